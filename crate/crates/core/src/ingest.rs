//! Annotation interchange files and the per-dataset rule registry.
//!
//! An annotation file is UTF-8 JSON:
//!
//! ```json
//! {"image_id": "IMG_1", "width": 1024, "height": 768, "points": [[12.5, 40.0], [300, 211.25]]}
//! ```
//!
//! Points are `[x, y]` with `x` along columns and `y` along rows, in continuous
//! pixel coordinates. A dataset manifest is a JSON array of
//! `{"annotation": path, "image": path}` pairs; relative paths resolve against
//! the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::KernelSpec;
use crate::preprocess::ResizeRule;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("image {image_id}: point {index} ({x}, {y}) lies outside {width}x{height}")]
    OutOfBounds {
        image_id: String,
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("dataset CUSTOM has no built-in rules; supply explicit resize and kernel settings")]
    CustomWithoutRules,
    #[error("duplicate image_id {0:?} in manifest")]
    DuplicateImageId(String),
}

/// A head position in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    /// Column axis.
    pub x: f64,
    /// Row axis.
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// One image's head annotations together with the image dimensions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub points: Vec<Point>,
}

impl AnnotationSet {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("annotation sets always serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        fs::write(path, self.to_json()).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Result of loading an annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedAnnotations {
    pub set: AnnotationSet,
    /// Number of points that were clamped into the image (always 0 in strict mode).
    pub clamped: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    image_id: String,
    width: i64,
    height: i64,
    points: Vec<[f64; 2]>,
}

/// Reads and validates an annotation file. See [`parse_annotations`].
pub fn load_annotations(path: &Path, strict: bool) -> Result<LoadedAnnotations, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(&text, strict)
}

/// Parses annotation JSON.
///
/// Out-of-bounds points are an error in strict mode. Otherwise each offending
/// coordinate is clamped into `[0, extent)`, the upper bound being the largest
/// double below the extent, and the clamp is counted.
pub fn parse_annotations(text: &str, strict: bool) -> Result<LoadedAnnotations, IngestError> {
    let raw: RawAnnotation = serde_json::from_str(text)?;
    if raw.image_id.is_empty() {
        return Err(IngestError::Schema("image_id must be non-empty".into()));
    }
    let width = positive_dim("width", raw.width)?;
    let height = positive_dim("height", raw.height)?;

    let mut clamped = 0;
    let mut points = Vec::with_capacity(raw.points.len());
    for (index, [x, y]) in raw.points.into_iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(IngestError::Schema(format!(
                "point {index} has a non-finite coordinate"
            )));
        }
        let (cx, cy) = (clamp_coord(x, width), clamp_coord(y, height));
        if cx != x || cy != y {
            if strict {
                return Err(IngestError::OutOfBounds {
                    image_id: raw.image_id,
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
            clamped += 1;
        }
        points.push(Point::new(cx, cy));
    }

    Ok(LoadedAnnotations {
        set: AnnotationSet {
            image_id: raw.image_id,
            width,
            height,
            points,
        },
        clamped,
    })
}

fn positive_dim(name: &str, v: i64) -> Result<u32, IngestError> {
    if v < 1 || v > u32::MAX as i64 {
        return Err(IngestError::Schema(format!(
            "{name} must be a positive integer, got {v}"
        )));
    }
    Ok(v as u32)
}

/// Clamps a coordinate into `[0, extent)`.
pub(crate) fn clamp_coord(v: f64, extent: u32) -> f64 {
    let hi = f64::from(extent);
    if v < 0.0 {
        0.0
    } else if v >= hi {
        hi.next_down()
    } else {
        v
    }
}

/// One `{"annotation", "image"}` pair of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub annotation: PathBuf,
    pub image: PathBuf,
}

/// Loads a manifest, resolving relative paths against its parent directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            annotation: base.join(e.annotation),
            image: base.join(e.image),
        })
        .collect())
}

/// Checks that every image id occurs once.
pub fn check_unique_ids<'a, I>(ids: I) -> Result<(), IngestError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(IngestError::DuplicateImageId(id.to_string()));
        }
    }
    Ok(())
}

/// The benchmark datasets with built-in sizing and kernel rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "UCF50")]
    Ucf50,
    #[serde(rename = "SHT_A")]
    ShtA,
    #[serde(rename = "SHT_B")]
    ShtB,
    #[serde(rename = "WE")]
    We,
    #[serde(rename = "QNRF")]
    Qnrf,
    #[serde(rename = "GCC")]
    Gcc,
    #[serde(rename = "CUSTOM")]
    Custom,
}

impl DatasetId {
    pub const BUILTIN: [DatasetId; 6] = [
        DatasetId::Ucf50,
        DatasetId::ShtA,
        DatasetId::ShtB,
        DatasetId::We,
        DatasetId::Qnrf,
        DatasetId::Gcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Ucf50 => "UCF50",
            DatasetId::ShtA => "SHT_A",
            DatasetId::ShtB => "SHT_B",
            DatasetId::We => "WE",
            DatasetId::Qnrf => "QNRF",
            DatasetId::Gcc => "GCC",
            DatasetId::Custom => "CUSTOM",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(DatasetId::Custom)
            .chain(DatasetId::BUILTIN)
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown dataset {s:?}"))
    }
}

/// Built-in image-size rule and kernel for a dataset.
///
/// | dataset | kernel         | image size                                   |
/// |---------|----------------|----------------------------------------------|
/// | UCF50   | 15x15 fixed    | keep ratio, max side 1024, multiples of 16   |
/// | SHT_A   | adaptive       | keep ratio, max side 1024, multiples of 16   |
/// | SHT_B   | 15x15 fixed    | 768x1024                                     |
/// | WE      | 15x15 fixed    | 576x720                                      |
/// | QNRF    | 15x15 fixed    | keep ratio, max side 1024, multiples of 16   |
/// | GCC     | 15x15 fixed    | 544x960                                      |
pub fn rule_for(dataset: DatasetId) -> Result<(ResizeRule, KernelSpec), IngestError> {
    let fixed = KernelSpec::fixed();
    Ok(match dataset {
        DatasetId::Ucf50 | DatasetId::Qnrf => (ResizeRule::ratio_preserving(1024), fixed),
        DatasetId::ShtA => (ResizeRule::ratio_preserving(1024), KernelSpec::adaptive()),
        DatasetId::ShtB => (ResizeRule::fixed_size(768, 1024), fixed),
        DatasetId::We => (ResizeRule::fixed_size(576, 720), fixed),
        DatasetId::Gcc => (ResizeRule::fixed_size(544, 960), fixed),
        DatasetId::Custom => return Err(IngestError::CustomWithoutRules),
    })
}
