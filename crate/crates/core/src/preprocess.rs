//! Resize planning, annotation rescaling, batch collation plans and crops.
//!
//! This module owns geometry only. Pixel resampling happens in the CLI layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{clamp_coord, AnnotationSet, Point};

/// Every planned dimension is a multiple of this.
pub const DIVISOR: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("source size {height}x{width} is invalid: {reason}")]
    InvalidSource { height: u32, width: u32, reason: String },
    #[error("invalid resize rule: {0}")]
    InvalidRule(String),
    #[error("plan source {plan:?} does not match annotation size {actual:?}")]
    SourceMismatch { plan: (u32, u32), actual: (u32, u32) },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch size {n} does not match {len} image sizes")]
    BatchSizeMismatch { n: usize, len: usize },
    #[error("image {index} has size {size:?}, not divisible by {DIVISOR}")]
    NotDivisible { index: usize, size: (u32, u32) },
    #[error("crop window at {origin:?} of size {target:?} exceeds image {image:?}")]
    CropOutOfBounds {
        origin: (u32, u32),
        target: (u32, u32),
        image: (u32, u32),
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeKind {
    FixedSize,
    RatioPreserving,
}

/// A dataset's sizing policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeRule {
    pub kind: ResizeKind,
    /// `(height, width)` for fixed-size rules.
    #[serde(default)]
    pub fixed: Option<(u32, u32)>,
    #[serde(default)]
    pub max_side: Option<u32>,
    #[serde(default = "default_divisor")]
    pub divisor: u32,
    /// Enlarge images whose longer side is below `max_side`.
    #[serde(default)]
    pub upscale: bool,
}

fn default_divisor() -> u32 {
    DIVISOR
}

impl ResizeRule {
    pub fn fixed_size(height: u32, width: u32) -> Self {
        Self {
            kind: ResizeKind::FixedSize,
            fixed: Some((height, width)),
            max_side: None,
            divisor: DIVISOR,
            upscale: false,
        }
    }

    pub fn ratio_preserving(max_side: u32) -> Self {
        Self {
            kind: ResizeKind::RatioPreserving,
            fixed: None,
            max_side: Some(max_side),
            divisor: DIVISOR,
            upscale: false,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidRule(m));
        if self.divisor == 0 {
            return bad("divisor must be positive".into());
        }
        match self.kind {
            ResizeKind::FixedSize => match self.fixed {
                Some((h, w)) if h > 0 && w > 0 && h % self.divisor == 0 && w % self.divisor == 0 => Ok(()),
                Some(f) => bad(format!(
                    "fixed size {f:?} must be positive multiples of {}",
                    self.divisor
                )),
                None => bad("fixed_size rule needs `fixed`".into()),
            },
            ResizeKind::RatioPreserving => match self.max_side {
                Some(m) if m >= self.divisor => Ok(()),
                Some(m) => bad(format!("max_side {m} is below divisor {}", self.divisor)),
                None => bad("ratio_preserving rule needs `max_side`".into()),
            },
        }
    }
}

/// A rule applied to one concrete image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub src: (u32, u32),
    pub dst: (u32, u32),
    pub scale_y: f64,
    pub scale_x: f64,
}

impl ResizePlan {
    fn new(src: (u32, u32), dst: (u32, u32)) -> Self {
        Self {
            src,
            dst,
            scale_y: f64::from(dst.0) / f64::from(src.0),
            scale_x: f64::from(dst.1) / f64::from(src.1),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }
}

/// Plans the resize of a `(height, width)` image under `rule`.
///
/// Ratio-preserving rules scale the longer side to `max_side` when it is
/// larger (or always, with `upscale`), then round each dimension down to a
/// multiple of the divisor, never below one divisor.
pub fn plan_resize(src: (u32, u32), rule: &ResizeRule) -> Result<ResizePlan, PreprocessError> {
    rule.validate()?;
    let (h, w) = src;
    let invalid = |reason: &str| PreprocessError::InvalidSource {
        height: h,
        width: w,
        reason: reason.to_string(),
    };
    if h == 0 || w == 0 {
        return Err(invalid("dimensions must be positive"));
    }
    let d = u64::from(rule.divisor);
    match rule.kind {
        ResizeKind::FixedSize => Ok(ResizePlan::new(src, rule.fixed.expect("validated"))),
        ResizeKind::RatioPreserving => {
            let max_side = u64::from(rule.max_side.expect("validated"));
            let longest = u64::from(h.max(w));
            let dst = if longest > max_side || rule.upscale {
                // floor(side * max_side / longest) rounded down to the divisor, in exact integers
                let fit = |side: u32| {
                    let v = u64::from(side) * max_side / (longest * d) * d;
                    v.max(d) as u32
                };
                (fit(h), fit(w))
            } else {
                if u64::from(h) < d || u64::from(w) < d {
                    return Err(invalid("smaller than the divisor and upscaling is disabled"));
                }
                let down = |side: u32| side / rule.divisor * rule.divisor;
                (down(h), down(w))
            };
            Ok(ResizePlan::new(src, dst))
        }
    }
}

/// Rescales annotation points by the plan. Point count is unchanged.
pub fn apply_resize(ann: &AnnotationSet, plan: &ResizePlan) -> Result<AnnotationSet, PreprocessError> {
    if plan.src != (ann.height, ann.width) {
        return Err(PreprocessError::SourceMismatch {
            plan: plan.src,
            actual: (ann.height, ann.width),
        });
    }
    if plan.is_identity() {
        return Ok(ann.clone());
    }
    let (dh, dw) = plan.dst;
    let points = ann
        .points
        .iter()
        .map(|p| {
            // products can round up onto the far edge
            Point::new(clamp_coord(p.x * plan.scale_x, dw), clamp_coord(p.y * plan.scale_y, dh))
        })
        .collect();
    Ok(AnnotationSet {
        image_id: ann.image_id.clone(),
        width: dw,
        height: dh,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    /// Crop every image to the elementwise minimum size.
    CropToMin,
    /// Pad every image at the bottom and right to the elementwise maximum size.
    PadToMax,
}

/// How a batch of differently-sized images is collated into one tensor.
///
/// For `CropToMin`, `per_image_offsets` holds `(row, col)` crop origins; for
/// `PadToMax` it holds `(bottom, right)` zero-fill margins with the image
/// anchored at the top-left.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub strategy: BatchStrategy,
    pub n: usize,
    pub target: (u32, u32),
    pub per_image_offsets: Vec<(u32, u32)>,
}

pub fn plan_batch(
    sizes: &[(u32, u32)],
    n: usize,
    strategy: BatchStrategy,
    seed: Option<u64>,
) -> Result<BatchPlan, PreprocessError> {
    if sizes.is_empty() || n == 0 {
        return Err(PreprocessError::EmptyBatch);
    }
    if sizes.len() != n {
        return Err(PreprocessError::BatchSizeMismatch { n, len: sizes.len() });
    }
    if let Some(index) = sizes
        .iter()
        .position(|&(h, w)| h == 0 || w == 0 || h % DIVISOR != 0 || w % DIVISOR != 0)
    {
        return Err(PreprocessError::NotDivisible {
            index,
            size: sizes[index],
        });
    }

    let (target, per_image_offsets) = match strategy {
        BatchStrategy::CropToMin => {
            let th = sizes.iter().map(|s| s.0).min().expect("non-empty");
            let tw = sizes.iter().map(|s| s.1).min().expect("non-empty");
            let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
            let offsets = sizes
                .iter()
                .map(|&(h, w)| match rng.as_mut() {
                    Some(rng) => (rng.random_range(0..=h - th), rng.random_range(0..=w - tw)),
                    None => ((h - th) / 2, (w - tw) / 2),
                })
                .collect();
            ((th, tw), offsets)
        }
        BatchStrategy::PadToMax => {
            let up = |v: u32| v.div_ceil(DIVISOR) * DIVISOR;
            let th = up(sizes.iter().map(|s| s.0).max().expect("non-empty"));
            let tw = up(sizes.iter().map(|s| s.1).max().expect("non-empty"));
            let margins = sizes.iter().map(|&(h, w)| (th - h, tw - w)).collect();
            ((th, tw), margins)
        }
    };
    Ok(BatchPlan {
        strategy,
        n,
        target,
        per_image_offsets,
    })
}

/// Keeps the points inside the half-open window
/// `[origin, origin + target)` and translates them by `-origin`.
/// `origin` and `target` are `(row, col)` and `(height, width)`.
pub fn crop_annotations(
    ann: &AnnotationSet,
    origin: (u32, u32),
    target: (u32, u32),
) -> Result<AnnotationSet, PreprocessError> {
    let (r0, c0) = origin;
    let (th, tw) = target;
    let fits = th > 0
        && tw > 0
        && u64::from(r0) + u64::from(th) <= u64::from(ann.height)
        && u64::from(c0) + u64::from(tw) <= u64::from(ann.width);
    if !fits {
        return Err(PreprocessError::CropOutOfBounds {
            origin,
            target,
            image: (ann.height, ann.width),
        });
    }
    let (y0, x0) = (f64::from(r0), f64::from(c0));
    let (y1, x1) = (y0 + f64::from(th), x0 + f64::from(tw));
    let points = ann
        .points
        .iter()
        .filter(|p| p.y >= y0 && p.y < y1 && p.x >= x0 && p.x < x1)
        .map(|p| Point::new(clamp_coord(p.x - x0, tw), clamp_coord(p.y - y0, th)))
        .collect();
    Ok(AnnotationSet {
        image_id: ann.image_id.clone(),
        width: tw,
        height: th,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{rule_for, DatasetId};
    use proptest::prelude::*;

    fn rule(d: DatasetId) -> ResizeRule {
        rule_for(d).unwrap().0
    }

    #[test]
    fn ratio_rule_halves_large_image() {
        let p = plan_resize((1536, 2048), &rule(DatasetId::ShtA)).unwrap();
        assert_eq!(p.dst, (768, 1024));
        assert_eq!((p.scale_y, p.scale_x), (0.5, 0.5));
    }

    #[test]
    fn fixed_rules() {
        let p = plan_resize((768, 1024), &rule(DatasetId::ShtB)).unwrap();
        assert_eq!(p.dst, (768, 1024));
        assert_eq!((p.scale_y, p.scale_x), (1.0, 1.0));
        assert_eq!(
            plan_resize((1080, 1920), &rule(DatasetId::Gcc)).unwrap().dst,
            (544, 960)
        );
        assert_eq!(plan_resize((576, 720), &rule(DatasetId::We)).unwrap().dst, (576, 720));
    }

    #[test]
    fn small_images_are_not_upscaled_by_default() {
        let r = rule(DatasetId::Qnrf);
        assert_eq!(plan_resize((500, 700), &r).unwrap().dst, (496, 688));
        assert!(plan_resize((10, 700), &r).is_err());
        let up = ResizeRule { upscale: true, ..r };
        assert_eq!(plan_resize((512, 256), &up).unwrap().dst, (1024, 512));
        assert_eq!(plan_resize((10, 700), &up).unwrap().dst, (16, 1024));
    }

    #[test]
    fn extreme_aspect_keeps_one_divisor() {
        let p = plan_resize((16, 4096), &rule(DatasetId::Ucf50)).unwrap();
        assert_eq!(p.dst, (16, 1024));
    }

    #[test]
    fn rule_validation() {
        let r = ResizeRule::fixed_size(100, 64);
        assert!(matches!(
            plan_resize((10, 10), &r),
            Err(PreprocessError::InvalidRule(_))
        ));
        assert!(plan_resize((0, 10), &ResizeRule::fixed_size(16, 16)).is_err());
    }

    #[test]
    fn apply_resize_cases() {
        let a = AnnotationSet {
            image_id: "x".into(),
            width: 200,
            height: 100,
            points: vec![Point::new(100.0, 50.0), Point::new(199.99, 99.5)],
        };
        let id = ResizePlan::new((100, 200), (100, 200));
        assert_eq!(apply_resize(&a, &id).unwrap(), a);

        let half = ResizePlan::new((100, 200), (50, 100));
        let r = apply_resize(&a, &half).unwrap();
        assert_eq!(r.points[0], Point::new(50.0, 25.0));
        assert_eq!(r.count(), a.count());
        assert_eq!((r.height, r.width), (50, 100));

        let wrong = ResizePlan::new((10, 10), (16, 16));
        assert!(matches!(
            apply_resize(&a, &wrong),
            Err(PreprocessError::SourceMismatch { .. })
        ));
    }

    #[test]
    fn batch_plans() {
        let p = plan_batch(&[(768, 1024)], 1, BatchStrategy::CropToMin, Some(3)).unwrap();
        assert_eq!((p.target, p.per_image_offsets.clone()), ((768, 1024), vec![(0, 0)]));

        let sizes = [(768, 1024), (512, 768)];
        let c = plan_batch(&sizes, 2, BatchStrategy::CropToMin, None).unwrap();
        assert_eq!(c.target, (512, 768));
        assert_eq!(c.per_image_offsets, vec![(128, 128), (0, 0)]);

        let p = plan_batch(&sizes, 2, BatchStrategy::PadToMax, None).unwrap();
        assert_eq!(p.target, (768, 1024));
        assert_eq!(p.per_image_offsets, vec![(0, 0), (256, 256)]);

        assert_eq!(
            plan_batch(&[], 0, BatchStrategy::PadToMax, None),
            Err(PreprocessError::EmptyBatch)
        );
        assert!(matches!(
            plan_batch(&sizes, 3, BatchStrategy::PadToMax, None),
            Err(PreprocessError::BatchSizeMismatch { .. })
        ));
        assert!(matches!(
            plan_batch(&[(100, 64)], 1, BatchStrategy::PadToMax, None),
            Err(PreprocessError::NotDivisible { index: 0, .. })
        ));
    }

    #[test]
    fn batch_plan_json_field_names() {
        let p = plan_batch(&[(32, 48)], 1, BatchStrategy::PadToMax, None).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["strategy"], "pad_to_max");
        assert_eq!(v["n"], 1);
        assert_eq!(v["target"], serde_json::json!([32, 48]));
        assert_eq!(v["per_image_offsets"], serde_json::json!([[0, 0]]));
        let r: serde_json::Value = serde_json::to_value(ResizePlan::new((32, 32), (16, 16))).unwrap();
        assert_eq!(r["scale_x"], 0.5);
        assert_eq!(r["dst"], serde_json::json!([16, 16]));
    }

    #[test]
    fn crop_windows_are_half_open() {
        let a = AnnotationSet {
            image_id: "c".into(),
            width: 64,
            height: 64,
            points: vec![
                Point::new(16.0, 16.0), // low edge: kept
                Point::new(48.0, 20.0), // high column edge: dropped
                Point::new(20.0, 48.0), // high row edge: dropped
                Point::new(47.5, 47.5),
            ],
        };
        assert_eq!(crop_annotations(&a, (0, 0), (64, 64)).unwrap(), a);
        let c = crop_annotations(&a, (16, 16), (32, 32)).unwrap();
        assert_eq!(c.points, vec![Point::new(0.0, 0.0), Point::new(31.5, 31.5)]);
        assert_eq!((c.height, c.width), (32, 32));
        assert_eq!(crop_annotations(&a, (0, 50), (10, 10)).unwrap().count(), 0);
        assert!(matches!(
            crop_annotations(&a, (60, 0), (16, 16)),
            Err(PreprocessError::CropOutOfBounds { .. })
        ));
    }

    proptest! {
        #[test]
        fn plans_are_divisible_and_bounded(h in 16u32..=4096, w in 16u32..=4096) {
            for d in DatasetId::BUILTIN {
                let r = rule(d);
                let p = plan_resize((h, w), &r).unwrap();
                prop_assert_eq!(p.dst.0 % 16, 0);
                prop_assert_eq!(p.dst.1 % 16, 0);
                if r.kind == ResizeKind::RatioPreserving {
                    prop_assert!(p.dst.0.max(p.dst.1) <= 1024);
                    let distortion = (p.scale_x - p.scale_y).abs() / p.scale_x.max(p.scale_y);
                    let bound = 16.0 / 1024.0 + 16.0 / f64::from(p.dst.0.min(p.dst.1));
                    prop_assert!(distortion <= bound, "{:?} {} > {}", p, distortion, bound);
                }
            }
        }

        #[test]
        fn seeded_batches_replay(seed in any::<u64>(), sizes in prop::collection::vec((1u32..64, 1u32..64), 1..8)) {
            let sizes: Vec<(u32, u32)> = sizes.into_iter().map(|(h, w)| (h * 16, w * 16)).collect();
            let a = plan_batch(&sizes, sizes.len(), BatchStrategy::CropToMin, Some(seed)).unwrap();
            let b = plan_batch(&sizes, sizes.len(), BatchStrategy::CropToMin, Some(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            for (&(h, w), &(r, c)) in sizes.iter().zip(&a.per_image_offsets) {
                prop_assert!(r + a.target.0 <= h && c + a.target.1 <= w);
            }
        }

        #[test]
        fn resize_keeps_points_in_bounds(
            h in 1u32..3000, w in 1u32..3000,
            fx in 0.0..1.0f64, fy in 0.0..1.0f64,
        ) {
            let a = AnnotationSet {
                image_id: "r".into(), width: w, height: h,
                points: vec![Point::new(fx * f64::from(w), fy * f64::from(h)), Point::new(f64::from(w).next_down(), f64::from(h).next_down())],
            };
            let plan = plan_resize((h, w), &ResizeRule { upscale: true, ..ResizeRule::ratio_preserving(1024) }).unwrap();
            let r = apply_resize(&a, &plan).unwrap();
            prop_assert_eq!(r.count(), 2);
            for p in &r.points {
                prop_assert!(p.x >= 0.0 && p.x < f64::from(r.width));
                prop_assert!(p.y >= 0.0 && p.y < f64::from(r.height));
            }
        }
    }
}
