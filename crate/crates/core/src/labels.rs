//! Label transformations: sum-preserving down-sampling and scalar
//! normalization, with count extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::DensityMap;
use crate::sum::compensated_sum;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("down-sampling factor must be >= 1")]
    ZeroFactor,
    #[error("map {height}x{width} is not divisible by factor {factor}")]
    NotDivisible { height: u32, width: u32, factor: u32 },
    #[error("label factor must be positive and finite, got {0}")]
    InvalidLabelFactor(f64),
    #[error("map is already normalized (norm_factor {0})")]
    AlreadyNormalized(f64),
    #[error("norm_factor must be positive, got {0}")]
    InvalidNormFactor(f64),
}

/// Block reduction factor; `8` gives CSRNet-style 1/8 targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleSpec {
    pub factor: u32,
}

/// Scalar multiplier applied to ground truth during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub label_factor: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self { label_factor: 100.0 }
    }
}

/// Shrinks the map by `factor` per axis. Each output cell is the block mean
/// times `factor^2`, i.e. the block sum, so the total is preserved.
pub fn downsample_sum_preserving(map: &DensityMap, spec: DownsampleSpec) -> Result<DensityMap, LabelError> {
    let f = spec.factor;
    if f == 0 {
        return Err(LabelError::ZeroFactor);
    }
    let (h, w) = map.shape();
    if h % f != 0 || w % f != 0 {
        return Err(LabelError::NotDivisible {
            height: h,
            width: w,
            factor: f,
        });
    }
    if f == 1 {
        return Ok(map.clone());
    }
    let (oh, ow) = (h / f, w / f);
    let f = f as usize;
    let mut out = vec![0.0; oh as usize * ow as usize];
    for (orow, out_row) in out.chunks_mut(ow as usize).enumerate() {
        for (ocol, cell) in out_row.iter_mut().enumerate() {
            let block = (orow * f..(orow + 1) * f).flat_map(|r| map.row(r)[ocol * f..(ocol + 1) * f].iter().copied());
            *cell = compensated_sum(block);
        }
    }
    Ok(map.with_values(oh, ow, out, map.norm_factor()))
}

/// Multiplies every value by `label_factor` and records it as the map's
/// `norm_factor`. The map must not already carry a factor other than 1.
pub fn normalize_labels(map: &DensityMap, spec: NormalizationSpec) -> Result<DensityMap, LabelError> {
    let k = spec.label_factor;
    if !(k > 0.0 && k.is_finite()) {
        return Err(LabelError::InvalidLabelFactor(k));
    }
    if map.norm_factor() != 1.0 {
        return Err(LabelError::AlreadyNormalized(map.norm_factor()));
    }
    let values = map.values().iter().map(|v| v * k).collect();
    Ok(map.with_values(map.height(), map.width(), values, k))
}

/// Divides out the map's `norm_factor`.
pub fn denormalize_labels(map: &DensityMap) -> Result<DensityMap, LabelError> {
    let k = map.norm_factor();
    if !(k > 0.0 && k.is_finite()) {
        return Err(LabelError::InvalidNormFactor(k));
    }
    if k == 1.0 {
        return Ok(map.clone());
    }
    let values = map.values().iter().map(|v| v / k).collect();
    Ok(map.with_values(map.height(), map.width(), values, 1.0))
}

/// Persons encoded by the map: compensated sum divided by `norm_factor`.
pub fn count(map: &DensityMap) -> f64 {
    compensated_sum(map.values().iter().copied()) / map.norm_factor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{render, KernelSpec};
    use crate::ingest::{AnnotationSet, Point};
    use proptest::prelude::*;

    fn map(h: u32, w: u32, v: Vec<f64>) -> DensityMap {
        DensityMap::from_values(h, w, v, 1.0).unwrap()
    }

    #[test]
    fn factor_one_is_identity() {
        let m = map(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(downsample_sum_preserving(&m, DownsampleSpec { factor: 1 }).unwrap(), m);
    }

    #[test]
    fn constant_block_dots_64() {
        let m = map(8, 8, vec![0.01; 64]);
        let d = downsample_sum_preserving(&m, DownsampleSpec { factor: 8 }).unwrap();
        assert_eq!(d.shape(), (1, 1));
        // mean 0.01 times 64
        assert_eq!(d.get(0, 0), 0.64);
    }

    #[test]
    fn downsample_errors() {
        let m = map(8, 12, vec![0.0; 96]);
        assert_eq!(
            downsample_sum_preserving(&m, DownsampleSpec { factor: 8 }),
            Err(LabelError::NotDivisible {
                height: 8,
                width: 12,
                factor: 8
            })
        );
        assert_eq!(
            downsample_sum_preserving(&m, DownsampleSpec { factor: 0 }),
            Err(LabelError::ZeroFactor)
        );
    }

    #[test]
    fn rendered_map_keeps_count_after_downsampling() {
        let pts: Vec<Point> = (0..57)
            .map(|i| Point::new((i * 37 % 128) as f64 + 0.3, (i * 53 % 96) as f64 + 0.6))
            .collect();
        let ann = AnnotationSet {
            image_id: "r".into(),
            width: 128,
            height: 96,
            points: pts,
        };
        let m = render(&ann, &KernelSpec::fixed(), (96, 128)).unwrap();
        assert!((count(&m) - 57.0).abs() <= 1e-4);
        let d = downsample_sum_preserving(&m, DownsampleSpec { factor: 8 }).unwrap();
        assert_eq!(d.shape(), (12, 16));
        assert!((count(&d) - 57.0).abs() <= 1e-4);

        let n = normalize_labels(&m, NormalizationSpec::default()).unwrap();
        assert!((count(&n) - 57.0).abs() <= 1e-4);
    }

    #[test]
    fn normalization() {
        let m = map(1, 3, vec![1.0, 0.5, 1.5]);
        let n = normalize_labels(&m, NormalizationSpec::default()).unwrap();
        assert_eq!(n.norm_factor(), 100.0);
        assert!((n.sum() - 300.0).abs() < 1e-12);
        assert!((count(&n) - 3.0).abs() < 1e-12);
        assert_eq!(
            normalize_labels(&n, NormalizationSpec::default()),
            Err(LabelError::AlreadyNormalized(100.0))
        );

        let same = normalize_labels(&m, NormalizationSpec { label_factor: 1.0 }).unwrap();
        assert_eq!(same, m);
        assert!(normalize_labels(&m, NormalizationSpec { label_factor: 0.0 }).is_err());

        let back = denormalize_labels(&n).unwrap();
        assert_eq!(back.norm_factor(), 1.0);
        assert!((back.sum() - 3.0).abs() < 1e-12);
        for (a, b) in back.values().iter().zip(m.values()) {
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
        let z = DensityMap::zeros(3, 3);
        assert_eq!(denormalize_labels(&z).unwrap(), z);
        assert_eq!(count(&z), 0.0);
    }

    fn arb_map(mult: u32) -> impl Strategy<Value = DensityMap> {
        (1u32..6, 1u32..6).prop_flat_map(move |(bh, bw)| {
            let (h, w) = (bh * mult, bw * mult);
            prop::collection::vec(0.0..1.0f64, (h * w) as usize)
                .prop_map(move |v| DensityMap::from_values(h, w, v, 1.0).unwrap())
        })
    }

    proptest! {
        #[test]
        fn count_survives_downsampling(m in arb_map(8)) {
            let c = count(&m);
            for f in [2, 4, 8] {
                let d = downsample_sum_preserving(&m, DownsampleSpec { factor: f }).unwrap();
                prop_assert!((count(&d) - c).abs() <= 1e-5 * c.max(1e-300));
                prop_assert!(d.values().iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn downsampling_composes(m in arb_map(6)) {
            let two = downsample_sum_preserving(&m, DownsampleSpec { factor: 2 }).unwrap();
            let then_three = downsample_sum_preserving(&two, DownsampleSpec { factor: 3 }).unwrap();
            let six = downsample_sum_preserving(&m, DownsampleSpec { factor: 6 }).unwrap();
            for (a, b) in then_three.values().iter().zip(six.values()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn normalization_cancels_in_count(m in arb_map(1), k in 1.0..1000.0f64) {
            let n = normalize_labels(&m, NormalizationSpec { label_factor: k }).unwrap();
            let c = count(&m);
            prop_assert!((count(&n) - c).abs() <= 1e-9 * c.max(1e-300));
            let back = denormalize_labels(&n).unwrap();
            for (a, b) in back.values().iter().zip(m.values()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs());
            }
        }
    }
}
