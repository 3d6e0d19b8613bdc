use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageReader, Rgb, RgbImage};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::{CliError, ResolvedConfig};
use crate::density::{load_c3dm, render, save_c3dm, DensityMap};
use crate::expdb::{config_hash, open_store, read_store, RunFilter};
use crate::ingest::{check_unique_ids, load_annotations, load_manifest, AnnotationSet, ManifestEntry};
use crate::labels::{count, downsample_sum_preserving, normalize_labels};
use crate::metrics::{evaluate_run, rows_to_csv};
use crate::preprocess::{apply_resize, plan_resize, ResizePlan};

pub const OUTPUT_MANIFEST: &str = "manifest.out.json";

fn warn(err: &mut dyn Write, message: &str) {
    let _ = writeln!(err, "{}", json!({ "warning": message }));
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("cannot build worker pool: {e}")))
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(format!("{}: {e}", path.display()))
}

fn check_image_id(id: &str) -> Result<(), CliError> {
    if id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(CliError::data(format!("image_id {id:?} is not usable as a file name")).for_image(id));
    }
    Ok(())
}

/// Width and height from the image header.
fn image_dims(path: &Path) -> Result<(u32, u32), CliError> {
    let reader = ImageReader::open(path)
        .map_err(io_at(path))?
        .with_guessed_format()
        .map_err(io_at(path))?;
    reader
        .into_dimensions()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_checked(entry: &ManifestEntry, strict: bool) -> Result<(AnnotationSet, usize), CliError> {
    let loaded = load_annotations(&entry.annotation, strict)?;
    let set = loaded.set;
    let ctx = |e: CliError| e.for_image(&set.image_id);
    check_image_id(&set.image_id)?;
    let (w, h) = image_dims(&entry.image).map_err(ctx)?;
    if (w, h) != (set.width, set.height) {
        return Err(ctx(CliError::data(format!(
            "image {} is {w}x{h} but its annotation says {}x{}",
            entry.image.display(),
            set.width,
            set.height
        ))));
    }
    Ok((set, loaded.clamped))
}

/// Per-image line of `manifest.out.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageSummary {
    pub image_id: String,
    /// Annotated heads.
    pub points: usize,
    /// Count recovered from the written map.
    pub count: f64,
    pub src: (u32, u32),
    /// Shape of the written map.
    pub dims: (u32, u32),
    pub clamped_points: usize,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GengtSummary {
    pub images: Vec<ImageSummary>,
    pub run_id: String,
}

fn gengt_one(entry: &ManifestEntry, cfg: &ResolvedConfig) -> Result<(ImageSummary, DensityMap), CliError> {
    let (ann, clamped) = load_checked(entry, cfg.strict)?;
    let id = ann.image_id.clone();
    let ctx = |e: CliError| e.for_image(&id);
    let plan = plan_resize((ann.height, ann.width), &cfg.resize).map_err(|e| ctx(e.into()))?;
    let resized = apply_resize(&ann, &plan).map_err(|e| ctx(e.into()))?;
    let mut map = render(&resized, &cfg.kernel, plan.dst).map_err(|e| ctx(e.into()))?;
    let mut flags = Vec::new();
    if clamped > 0 {
        flags.push(format!("clamped {clamped} out-of-bounds points"));
    }
    if let Some(d) = cfg.downsample {
        map = downsample_sum_preserving(&map, d).map_err(|e| ctx(e.into()))?;
        if d.factor > 1 {
            flags.push(format!("downsampled x{}", d.factor));
        }
    }
    if let Some(n) = cfg.normalization {
        map = normalize_labels(&map, n).map_err(|e| ctx(e.into()))?;
        flags.push(format!("normalized x{}", n.label_factor));
    }
    let summary = ImageSummary {
        image_id: id.clone(),
        points: ann.count(),
        count: count(&map),
        src: (ann.height, ann.width),
        dims: map.shape(),
        clamped_points: clamped,
        flags,
    };
    Ok((summary, map))
}

pub fn gengt(
    cfg: &ResolvedConfig,
    store: Option<&Path>,
    notes: Option<&str>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<GengtSummary, CliError> {
    let entries = load_manifest(&cfg.manifest)?;
    if entries.is_empty() {
        warn(err, "manifest is empty; nothing to render");
    }
    fs::create_dir_all(&cfg.output_dir).map_err(io_at(&cfg.output_dir))?;

    let results: Vec<Result<(ImageSummary, DensityMap), CliError>> =
        pool(cfg.threads)?.install(|| entries.par_iter().map(|e| gengt_one(e, cfg)).collect());
    let mut rendered = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => rendered.push(v),
            Err(e) => failures.push(e),
        }
    }
    if let Some(first) = failures.first().cloned() {
        for e in &failures[1..] {
            let _ = writeln!(err, "{}", e.to_json());
        }
        return Err(first);
    }
    check_unique_ids(rendered.iter().map(|(s, _)| s.image_id.as_str()))?;

    for (s, map) in &rendered {
        save_c3dm(map, &cfg.output_dir.join(format!("{}.c3dm", s.image_id)))?;
    }
    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    let images: Vec<ImageSummary> = rendered.into_iter().map(|(s, _)| s).collect();
    let manifest_out = json!({
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "config_hash": config_hash(&snapshot),
        "kernel": cfg.kernel,
        "resize": cfg.resize,
        "downsample": cfg.downsample,
        "normalization": cfg.normalization,
        "images": images,
    });
    let path = cfg.output_dir.join(OUTPUT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest_out).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(io_at(&path))?;

    let store_dir = store.map_or_else(|| cfg.output_dir.join("expdb"), Path::to_path_buf);
    let mut db = open_store(&store_dir)?;
    for note in db.recovery_notes() {
        warn(err, note);
    }
    let run_notes = format!(
        "gengt: {} images, threads={}{}",
        images.len(),
        cfg.threads,
        notes.map(|n| format!("; {n}")).unwrap_or_default()
    );
    let record = db.create_run(cfg.dataset, &snapshot, &run_notes)?;

    let _ = writeln!(out, "{:<24} {:>8} {:>14} {:>12}", "image_id", "points", "count", "dims");
    for s in &images {
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>14.6} {:>12}",
            s.image_id,
            s.points,
            s.count,
            format!("{}x{}", s.dims.0, s.dims.1)
        );
    }
    let _ = writeln!(out, "run {} recorded in {}", record.run_id, store_dir.display());
    Ok(GengtSummary {
        images,
        run_id: record.run_id,
    })
}

#[derive(Serialize)]
struct PlanLine<'a> {
    image_id: &'a str,
    plan: ResizePlan,
}

fn preprocess_one(
    entry: &ManifestEntry,
    cfg: &ResolvedConfig,
) -> Result<(ManifestEntry, String, ResizePlan), CliError> {
    let loaded = load_annotations(&entry.annotation, cfg.strict)?;
    let ann = loaded.set;
    check_image_id(&ann.image_id)?;
    let ctx = |e: CliError| e.for_image(&ann.image_id);
    let plan = plan_resize((ann.height, ann.width), &cfg.resize).map_err(|e| ctx(e.into()))?;

    let file_name = entry
        .image
        .file_name()
        .ok_or_else(|| ctx(CliError::data(format!("{} has no file name", entry.image.display()))))?;
    let image_rel = PathBuf::from("images").join(file_name);
    let image_out = cfg.output_dir.join(&image_rel);
    if plan.is_identity() {
        let (w, h) = image_dims(&entry.image).map_err(ctx)?;
        if (h, w) != plan.src {
            return Err(ctx(CliError::data(format!(
                "image {} is {w}x{h} but its annotation says {}x{}",
                entry.image.display(),
                plan.src.1,
                plan.src.0
            ))));
        }
        fs::copy(&entry.image, &image_out).map_err(|e| ctx(io_at(&image_out)(e)))?;
    } else {
        let img = ImageReader::open(&entry.image)
            .map_err(|e| ctx(io_at(&entry.image)(e)))?
            .with_guessed_format()
            .map_err(|e| ctx(io_at(&entry.image)(e)))?
            .decode()
            .map_err(|e| ctx(CliError::data(format!("{}: {e}", entry.image.display()))))?;
        if (img.height(), img.width()) != plan.src {
            return Err(ctx(CliError::data(format!(
                "image {} is {}x{} but its annotation says {}x{}",
                entry.image.display(),
                img.width(),
                img.height(),
                plan.src.1,
                plan.src.0
            ))));
        }
        let resized = img.resize_exact(plan.dst.1, plan.dst.0, FilterType::Triangle);
        resized
            .save(&image_out)
            .map_err(|e| ctx(CliError::io(format!("{}: {e}", image_out.display()))))?;
    }

    let resized = apply_resize(&ann, &plan).map_err(|e| ctx(e.into()))?;
    let ann_rel = PathBuf::from("annotations").join(format!("{}.json", ann.image_id));
    resized
        .save(&cfg.output_dir.join(&ann_rel))
        .map_err(|e| ctx(e.into()))?;
    Ok((
        ManifestEntry {
            annotation: ann_rel,
            image: image_rel,
        },
        ann.image_id.clone(),
        plan,
    ))
}

/// Resizes every manifest image (bilinear) and its annotation. Failing
/// images are reported individually; the rest are still written.
pub fn preprocess(cfg: &ResolvedConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let entries = load_manifest(&cfg.manifest)?;
    if entries.is_empty() {
        warn(err, "manifest is empty; nothing to preprocess");
    }
    for sub in ["images", "annotations"] {
        let d = cfg.output_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_at(&d))?;
    }
    let results: Vec<_> = pool(cfg.threads)?.install(|| entries.par_iter().map(|e| preprocess_one(e, cfg)).collect());

    let mut manifest = Vec::new();
    let mut plans = Vec::new();
    let mut failures: Vec<CliError> = Vec::new();
    for r in results {
        match r {
            Ok((entry, id, plan)) => {
                let _ = writeln!(
                    out,
                    "{:<24} {:>5}x{:<5} -> {:>5}x{:<5}",
                    id, plan.src.0, plan.src.1, plan.dst.0, plan.dst.1
                );
                manifest.push(entry);
                plans.push((id, plan));
            }
            Err(e) => failures.push(e),
        }
    }
    check_unique_ids(plans.iter().map(|(id, _)| id.as_str()))?;
    let write_json = |name: &str, v: &serde_json::Value| {
        let p = cfg.output_dir.join(name);
        fs::write(&p, serde_json::to_string_pretty(v).expect("serializes") + "\n").map_err(io_at(&p))
    };
    write_json("manifest.json", &serde_json::to_value(&manifest).expect("serializes"))?;
    let plan_lines: Vec<PlanLine> = plans
        .iter()
        .map(|(id, plan)| PlanLine {
            image_id: id,
            plan: *plan,
        })
        .collect();
    write_json("plans.json", &serde_json::to_value(&plan_lines).expect("serializes"))?;

    match failures.len() {
        0 => Ok(()),
        n => {
            for e in &failures {
                let _ = writeln!(err, "{}", e.to_json());
            }
            let code = failures.iter().map(|e| e.code).max().unwrap_or(super::EXIT_DATA);
            Err(CliError {
                code,
                message: format!("{n} of {} images failed", entries.len()),
                image_id: None,
            })
        }
    }
}

pub fn eval(
    pred: &Path,
    gt: &Path,
    quality: bool,
    out_dir: Option<&Path>,
    threads: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let outcome = match threads {
        Some(t) => pool(t)?.install(|| evaluate_run(pred, gt, quality))?,
        None => evaluate_run(pred, gt, quality)?,
    };
    let _ = write!(out, "{}", outcome.report.to_table());
    let dir = out_dir.unwrap_or(pred);
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let report = dir.join("report.json");
    fs::write(&report, outcome.report.to_json() + "\n").map_err(io_at(&report))?;
    let csv = dir.join("per_image.csv");
    fs::write(&csv, rows_to_csv(&outcome.rows)).map_err(io_at(&csv))?;
    Ok(())
}

/// Linear black-red-yellow-white ramp over `t` in [0, 1].
fn heat(t: f64) -> Rgb<u8> {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)])
}

pub fn heat_map(map: &DensityMap) -> RgbImage {
    let peak = map.max();
    RgbImage::from_fn(map.width(), map.height(), |x, y| {
        let v = map.get(y as usize, x as usize);
        heat(if peak > 0.0 { v / peak } else { 0.0 })
    })
}

pub fn inspect(path: &Path, png: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let map = load_c3dm(path)?;
    let _ = writeln!(out, "file         {}", path.display());
    let _ = writeln!(out, "dims         {}x{}", map.height(), map.width());
    let _ = writeln!(out, "norm_factor  {}", map.norm_factor());
    let _ = writeln!(out, "sum          {:.6}", map.sum());
    let _ = writeln!(out, "count        {:.6}", count(&map));
    let _ = writeln!(
        out,
        "min          {:.6e}",
        if map.values().is_empty() { 0.0 } else { map.min() }
    );
    let _ = writeln!(out, "max          {:.6e}", map.max());
    if let Some(png) = png {
        heat_map(&map)
            .save(png)
            .map_err(|e| CliError::io(format!("{}: {e}", png.display())))?;
        let _ = writeln!(out, "heat map     {}", png.display());
    }
    Ok(())
}

pub fn log(store: &Path, filter: &RunFilter, best: bool, out: &mut dyn Write) -> Result<(), CliError> {
    if !store.is_dir() {
        return Err(CliError::io(format!("{}: no such store directory", store.display())));
    }
    let snap = read_store(store)?;
    let runs = snap.query(filter);
    if best {
        let _ = writeln!(
            out,
            "{:<26} {:>10} {:>10} {:>10}",
            "run_id", "best_epoch", "best_mae", "mse"
        );
        for r in &runs {
            match &r.tracker {
                Some(t) => {
                    let _ = writeln!(
                        out,
                        "{:<26} {:>10} {:>10.4} {:>10.4}",
                        t.run_id, t.best_epoch, t.best_mae, t.best_mse_at_best_mae
                    );
                }
                None => {
                    let _ = writeln!(out, "{:<26} {:>10} {:>10} {:>10}", r.record.run_id, "-", "-", "-");
                }
            }
        }
    } else {
        let _ = writeln!(
            out,
            "{:<26} {:<30} {:<7} {:<12} notes",
            "run_id", "created_at", "dataset", "config"
        );
        for r in &runs {
            let rec = &r.record;
            let _ = writeln!(
                out,
                "{:<26} {:<30} {:<7} {:<12} {}",
                rec.run_id,
                rec.created_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                rec.dataset.as_str(),
                &rec.config_hash[..12.min(rec.config_hash.len())],
                rec.notes
            );
        }
    }
    Ok(())
}
