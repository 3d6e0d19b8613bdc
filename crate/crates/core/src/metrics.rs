//! Counting metrics (MAE, MSE) and map-quality metrics (PSNR, SSIM).
//!
//! `mse` follows the crowd-counting convention and is the root of the mean
//! squared count error.
//!
//! PSNR and SSIM work on denormalized maps rescaled so the ground-truth peak
//! is 1.0. An all-zero ground truth falls back to the prediction's peak and
//! the result is flagged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{load_c3dm, DensityError, DensityMap};
use crate::labels::count;
use crate::sum::compensated_sum;

/// PSNR reported for identical maps.
pub const PSNR_CAP_DB: f64 = 120.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no count pairs to evaluate")]
    Empty,
    #[error("map shapes differ: {pred:?} vs {gt:?}")]
    DimensionMismatch { pred: (u32, u32), gt: (u32, u32) },
    #[error("map {shape:?} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall { shape: (u32, u32) },
    #[error("missing counterparts: no prediction for {missing_pred:?}, no ground truth for {missing_gt:?}")]
    MissingCounterparts {
        missing_pred: Vec<String>,
        missing_gt: Vec<String>,
    },
    #[error("no C3DM files found in {pred} and {gt}")]
    NoImages { pred: PathBuf, gt: PathBuf },
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<MetricsError>,
    },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub image_id: String,
    pub predicted: f64,
    pub actual: f64,
}

impl CountPair {
    pub fn new(image_id: impl Into<String>, predicted: f64, actual: f64) -> Self {
        Self {
            image_id: image_id.into(),
            predicted,
            actual,
        }
    }
}

/// Mean absolute count error.
pub fn mae(pairs: &[CountPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let s = compensated_sum(pairs.iter().map(|p| (p.predicted - p.actual).abs()));
    Ok(s / pairs.len() as f64)
}

/// Root mean squared count error.
pub fn mse(pairs: &[CountPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let s = compensated_sum(pairs.iter().map(|p| {
        let d = p.predicted - p.actual;
        d * d
    }));
    Ok((s / pairs.len() as f64).sqrt())
}

fn check_same_shape(pred: &DensityMap, gt: &DensityMap) -> Result<(), MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::DimensionMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    Ok(())
}

/// Peak used to bring both maps to unit range, in denormalized units, and
/// whether the ground truth was empty.
fn reference_peak(pred: &DensityMap, gt: &DensityMap) -> (f64, bool) {
    let gt_peak = gt.max() / gt.norm_factor();
    if gt_peak > 0.0 {
        return (gt_peak, false);
    }
    (pred.max() / pred.norm_factor(), true)
}

fn unit_scaled(map: &DensityMap, peak: f64) -> Vec<f64> {
    let k = map.norm_factor() * peak;
    map.values().iter().map(|v| v / k).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// The ground truth was all zero, so the prediction's peak set the scale.
    pub zero_reference: bool,
}

/// PSNR with both maps divided by `peak` (after removing their norm factors).
/// Symmetric in its map arguments.
pub fn psnr_with_peak(a: &DensityMap, b: &DensityMap, peak: f64) -> Result<f64, MetricsError> {
    check_same_shape(a, b)?;
    if peak.is_nan() || peak <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let (sa, sb) = (unit_scaled(a, peak), unit_scaled(b, peak));
    let sq = compensated_sum(sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)));
    let mean = sq / sa.len() as f64;
    if mean == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mean).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(pred: &DensityMap, gt: &DensityMap) -> Result<Psnr, MetricsError> {
    check_same_shape(pred, gt)?;
    let (peak, zero_gt) = reference_peak(pred, gt);
    Ok(Psnr {
        db: psnr_with_peak(pred, gt, peak)?,
        zero_reference: zero_gt && peak > 0.0,
    })
}

fn ssim_window_1d() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filtering of `src` (`h x w`).
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            horiz[r * ow + c] = row[c..c + n].iter().zip(g).map(|(v, k)| v * k).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| horiz[(r + i) * ow + c] * g[i]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5),
/// dynamic range 1, with both maps divided by `peak` first. Symmetric in its
/// map arguments.
pub fn ssim_with_peak(a: &DensityMap, b: &DensityMap, peak: f64) -> Result<f64, MetricsError> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height() as usize, a.width() as usize);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { shape: a.shape() });
    }
    if peak.is_nan() || peak <= 0.0 {
        // both maps are all zero
        return Ok(1.0);
    }
    let x = unit_scaled(a, peak);
    let y = unit_scaled(b, peak);
    let g = ssim_window_1d();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_x = filter_valid(&x, h, w, &g);
    let mu_y = filter_valid(&y, h, w, &g);
    let e_xx = filter_valid(&prod(&x, &x), h, w, &g);
    let e_yy = filter_valid(&prod(&y, &y), h, w, &g);
    let e_xy = filter_valid(&prod(&x, &y), h, w, &g);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let local = (0..mu_x.len()).map(|i| {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        num / den
    });
    let mean = compensated_sum(local) / mu_x.len() as f64;
    Ok(mean.clamp(-1.0, 1.0))
}

pub fn ssim(pred: &DensityMap, gt: &DensityMap) -> Result<f64, MetricsError> {
    check_same_shape(pred, gt)?;
    let (peak, _) = reference_peak(pred, gt);
    ssim_with_peak(pred, gt, peak)
}

/// Aggregate evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub mae: f64,
    pub mse: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width plain-text table.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>14}", "metric", "value");
        let _ = writeln!(s, "{:<10} {:>14}", "images", self.n_images);
        let _ = writeln!(s, "{:<10} {:>14.4}", "mae", self.mae);
        let _ = writeln!(s, "{:<10} {:>14.4}", "mse", self.mse);
        let _ = writeln!(s, "{:<10} {:>14}", "psnr_db", opt(self.psnr));
        let _ = writeln!(s, "{:<10} {:>14}", "ssim", opt(self.ssim));
        for f in &self.flags {
            let _ = writeln!(s, "flag: {f}");
        }
        s
    }
}

/// Per-image evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageEval {
    pub image_id: String,
    pub predicted: f64,
    pub actual: f64,
    pub abs_err: f64,
    #[serde(skip)]
    pub psnr: Option<Psnr>,
    #[serde(skip)]
    pub ssim: Option<f64>,
}

/// `image_id,predicted,actual,abs_err` rows with a header.
pub fn rows_to_csv(rows: &[ImageEval]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub rows: Vec<ImageEval>,
}

fn list_maps(dir: &Path) -> Result<BTreeMap<String, PathBuf>, MetricsError> {
    let io = |source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("c3dm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Provenance notes read from a `manifest.out.json` next to the ground truth.
fn manifest_flags(gt_dir: &Path) -> Vec<String> {
    let Ok(text) = fs::read_to_string(gt_dir.join("manifest.out.json")) else {
        return Vec::new();
    };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
        return vec!["gt manifest.out.json is unreadable".to_string()];
    };
    let mut flags = Vec::new();
    if let Some(f) = v.pointer("/downsample/factor").and_then(|f| f.as_u64()) {
        flags.push(format!("gt downsampled by factor {f} (sum-preserving)"));
    }
    if let Some(k) = v.pointer("/normalization/label_factor").and_then(|k| k.as_f64()) {
        flags.push(format!("gt normalized by label factor {k}"));
    }
    flags
}

/// Pairs `<id>.c3dm` files of `pred_dir` and `gt_dir` and scores them.
/// Counts are norm-factor aware; quality metrics are optional.
pub fn evaluate_run(pred_dir: &Path, gt_dir: &Path, with_quality: bool) -> Result<EvalOutcome, MetricsError> {
    let preds = list_maps(pred_dir)?;
    let gts = list_maps(gt_dir)?;
    let pred_ids: BTreeSet<&String> = preds.keys().collect();
    let gt_ids: BTreeSet<&String> = gts.keys().collect();
    let missing_pred: Vec<String> = gt_ids.difference(&pred_ids).map(|s| s.to_string()).collect();
    let missing_gt: Vec<String> = pred_ids.difference(&gt_ids).map(|s| s.to_string()).collect();
    if pred_ids.is_empty() && gt_ids.is_empty() {
        return Err(MetricsError::NoImages {
            pred: pred_dir.to_path_buf(),
            gt: gt_dir.to_path_buf(),
        });
    }
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(MetricsError::MissingCounterparts {
            missing_pred,
            missing_gt,
        });
    }

    let ids: Vec<&String> = gts.keys().collect();
    let rows: Vec<ImageEval> = ids
        .par_iter()
        .map(|id| {
            let wrap = |e: MetricsError| MetricsError::Image {
                image_id: id.to_string(),
                source: Box::new(e),
            };
            let pred = load_c3dm(&preds[*id]).map_err(|e| wrap(e.into()))?;
            let gt = load_c3dm(&gts[*id]).map_err(|e| wrap(e.into()))?;
            let (predicted, actual) = (count(&pred), count(&gt));
            let (psnr_v, ssim_v) = if with_quality {
                (
                    Some(psnr(&pred, &gt).map_err(wrap)?),
                    Some(ssim(&pred, &gt).map_err(wrap)?),
                )
            } else {
                (None, None)
            };
            Ok(ImageEval {
                image_id: id.to_string(),
                predicted,
                actual,
                abs_err: (predicted - actual).abs(),
                psnr: psnr_v,
                ssim: ssim_v,
            })
        })
        .collect::<Result<_, MetricsError>>()?;

    let pairs: Vec<CountPair> = rows
        .iter()
        .map(|r| CountPair::new(r.image_id.clone(), r.predicted, r.actual))
        .collect();
    let mut flags = manifest_flags(gt_dir);
    let n = rows.len() as f64;
    let (psnr_mean, ssim_mean) = if with_quality {
        for r in rows.iter().filter(|r| r.psnr.is_some_and(|p| p.zero_reference)) {
            flags.push(format!(
                "psnr for {} uses the prediction peak (empty ground truth)",
                r.image_id
            ));
        }
        (
            Some(compensated_sum(rows.iter().filter_map(|r| r.psnr.map(|p| p.db))) / n),
            Some(compensated_sum(rows.iter().filter_map(|r| r.ssim)) / n),
        )
    } else {
        (None, None)
    };
    let report = EvalReport {
        n_images: rows.len(),
        mae: mae(&pairs)?,
        mse: mse(&pairs)?,
        psnr: psnr_mean,
        ssim: ssim_mean,
        flags,
    };
    Ok(EvalOutcome { report, rows })
}
