//! Density-map rendering from head points.
//!
//! Every point contributes exactly `1.0` to the map: the part of its kernel
//! that falls outside the raster is dropped and the remaining cells are
//! rescaled to unit sum. The map sum therefore equals the point count up to
//! floating accumulation error.

mod c3dm;
mod kernel;
mod knn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AnnotationSet, Point};
use crate::sum::compensated_sum;

pub use c3dm::{decode_c3dm, encode_c3dm, load_c3dm, save_c3dm, C3DM_MAGIC, C3DM_VERSION};
pub use kernel::{gaussian_kernel, Kernel};
pub use knn::{knn_mean_distance, KdTree, KnnMean};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("kernel size must be odd and >= 1, got {0}")]
    EvenKernelSize(usize),
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("output shape must be positive, got {height}x{width}")]
    ZeroSizedOutput { height: u32, width: u32 },
    #[error("point {index} has a non-finite coordinate")]
    NonFiniteCoordinate { index: usize },
    #[error("{len} values do not fill a {height}x{width} map")]
    ShapeMismatch { height: u32, width: u32, len: usize },
    #[error("invalid density map: {0}")]
    InvalidMap(String),
    #[error("C3DM format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    Fixed,
    Adaptive,
}

/// Gaussian kernel parameters for rendering.
///
/// In `Fixed` mode every point uses a `fixed_size` square kernel with
/// `fixed_sigma`. In `Adaptive` mode point `i` uses
/// `sigma_i = min(beta * mean_knn_distance_i, sigma_cap)` over its `knn_k`
/// nearest neighbours, with a window half-extent of `ceil(truncation_radius * sigma_i)`.
/// A point without neighbours falls back to `fixed_sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub mode: KernelMode,
    pub fixed_size: usize,
    pub fixed_sigma: f64,
    pub knn_k: usize,
    pub beta: f64,
    pub sigma_cap: f64,
    /// Adaptive window half-extent in multiples of sigma.
    pub truncation_radius: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::fixed()
    }
}

impl KernelSpec {
    /// 15x15 window, sigma 4.
    pub fn fixed() -> Self {
        Self {
            mode: KernelMode::Fixed,
            fixed_size: 15,
            fixed_sigma: 4.0,
            knn_k: 3,
            beta: 0.3,
            sigma_cap: 15.0,
            truncation_radius: 3.0,
        }
    }

    /// Geometry-adaptive: k = 3, beta = 0.3, sigma capped at 15.
    pub fn adaptive() -> Self {
        Self {
            mode: KernelMode::Adaptive,
            ..Self::fixed()
        }
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        let bad = |m: &str| Err(DensityError::InvalidSpec(m.to_string()));
        if self.fixed_size == 0 || self.fixed_size.is_multiple_of(2) {
            return bad("fixed_size must be odd and >= 1");
        }
        if !(self.fixed_sigma > 0.0 && self.fixed_sigma.is_finite()) {
            return bad("fixed_sigma must be positive");
        }
        if self.knn_k == 0 {
            return bad("knn_k must be >= 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.sigma_cap > 0.0 && self.sigma_cap.is_finite()) {
            return bad("sigma_cap must be positive");
        }
        if !(self.truncation_radius > 0.0 && self.truncation_radius.is_finite()) {
            return bad("truncation_radius must be positive");
        }
        Ok(())
    }

    /// Per-point sigmas for adaptive rendering. Coincident neighbours give 0.
    pub fn adaptive_sigmas(&self, points: &[Point]) -> Vec<f64> {
        knn_mean_distance(points, self.knn_k)
            .into_iter()
            .map(|m| {
                if m.is_isolated() {
                    self.fixed_sigma
                } else {
                    (self.beta * m.distance).min(self.sigma_cap)
                }
            })
            .collect()
    }

    fn adaptive_kernel(&self, sigma: f64) -> Kernel {
        if sigma <= 0.0 {
            return Kernel::delta();
        }
        let half = (self.truncation_radius * sigma).ceil() as usize;
        gaussian_kernel(2 * half + 1, sigma).expect("validated spec yields a valid kernel")
    }
}

/// A 2-D non-negative raster whose sum, divided by `norm_factor`, is the
/// crowd count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: u32,
    width: u32,
    values: Vec<f64>,
    norm_factor: f64,
}

impl DensityMap {
    pub fn zeros(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height as usize * width as usize],
            norm_factor: 1.0,
        }
    }

    /// Builds a map from row-major values. Values must be finite and
    /// `norm_factor` positive.
    pub fn from_values(height: u32, width: u32, values: Vec<f64>, norm_factor: f64) -> Result<Self, DensityError> {
        if values.len() != height as usize * width as usize {
            return Err(DensityError::ShapeMismatch {
                height,
                width,
                len: values.len(),
            });
        }
        if !(norm_factor > 0.0 && norm_factor.is_finite()) {
            return Err(DensityError::InvalidMap(format!(
                "norm_factor must be positive, got {norm_factor}"
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DensityError::InvalidMap(format!("value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            values,
            norm_factor,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn shape(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm_factor(&self) -> f64 {
        self.norm_factor
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width as usize + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.width as usize;
        &self.values[row * w..(row + 1) * w]
    }

    /// Compensated sum of the raw values (not divided by `norm_factor`).
    pub fn sum(&self) -> f64 {
        compensated_sum(self.values.iter().copied())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn with_values(&self, height: u32, width: u32, values: Vec<f64>, norm_factor: f64) -> Self {
        debug_assert_eq!(values.len(), height as usize * width as usize);
        Self {
            height,
            width,
            values,
            norm_factor,
        }
    }

    /// Adds `kernel` centered at `(row, col)`, clipped to the raster and
    /// rescaled so the deposited mass is exactly the in-bounds share of 1.
    fn deposit(&mut self, kernel: &Kernel, row: usize, col: usize) {
        let h = self.height as usize;
        let w = self.width as usize;
        let half = kernel.half();
        let r0 = row.saturating_sub(half);
        let r1 = (row + half).min(h - 1);
        let c0 = col.saturating_sub(half);
        let c1 = (col + half).min(w - 1);
        // kernel offsets of the clipped window
        let kr0 = r0 + half - row;
        let kc0 = c0 + half - col;
        let ncols = c1 - c0 + 1;

        let mut inside = 0.0;
        for kr in kr0..kr0 + (r1 - r0 + 1) {
            for &v in &kernel.row(kr)[kc0..kc0 + ncols] {
                inside += v;
            }
        }
        for (i, r) in (r0..=r1).enumerate() {
            let src = &kernel.row(kr0 + i)[kc0..kc0 + ncols];
            let dst = &mut self.values[r * w + c0..r * w + c0 + ncols];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s / inside;
            }
        }
    }
}

/// Points of `ann` mapped onto an `(height, width)` raster by per-axis ratios.
pub fn scale_points(ann: &AnnotationSet, out_shape: (u32, u32)) -> Vec<Point> {
    let (h, w) = out_shape;
    if (h, w) == (ann.height, ann.width) {
        return ann.points.clone();
    }
    let sy = f64::from(h) / f64::from(ann.height);
    let sx = f64::from(w) / f64::from(ann.width);
    ann.points.iter().map(|p| Point::new(p.x * sx, p.y * sy)).collect()
}

/// Nearest raster cell for a continuous position, clamped into the raster.
fn cell_of(v: f64, extent: u32) -> usize {
    let r = v.round();
    if r <= 0.0 {
        0
    } else {
        (r as usize).min(extent as usize - 1)
    }
}

const ADAPTIVE_CHUNK: usize = 256;

/// Renders `ann` into a density map of shape `(height, width)`.
///
/// Deposits are accumulated in point order regardless of how many threads
/// compute kernels, so the output is bitwise reproducible.
pub fn render(ann: &AnnotationSet, spec: &KernelSpec, out_shape: (u32, u32)) -> Result<DensityMap, DensityError> {
    spec.validate()?;
    let (height, width) = out_shape;
    if height == 0 || width == 0 {
        return Err(DensityError::ZeroSizedOutput { height, width });
    }
    if let Some(index) = ann.points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(DensityError::NonFiniteCoordinate { index });
    }

    let points = scale_points(ann, out_shape);
    let mut map = DensityMap::zeros(height, width);
    let center = |p: &Point| (cell_of(p.y, height), cell_of(p.x, width));

    match spec.mode {
        KernelMode::Fixed => {
            let kernel = gaussian_kernel(spec.fixed_size, spec.fixed_sigma)?;
            for p in &points {
                let (r, c) = center(p);
                map.deposit(&kernel, r, c);
            }
        }
        KernelMode::Adaptive => {
            let sigmas = spec.adaptive_sigmas(&points);
            for (pts, sig) in points.chunks(ADAPTIVE_CHUNK).zip(sigmas.chunks(ADAPTIVE_CHUNK)) {
                let kernels: Vec<Kernel> = sig.par_iter().map(|&s| spec.adaptive_kernel(s)).collect();
                for (p, k) in pts.iter().zip(&kernels) {
                    let (r, c) = center(p);
                    map.deposit(k, r, c);
                }
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(w: u32, h: u32, pts: &[(f64, f64)]) -> AnnotationSet {
        AnnotationSet {
            image_id: "t".into(),
            width: w,
            height: h,
            points: pts.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        }
    }

    fn argmax(m: &DensityMap) -> (usize, usize) {
        let (i, _) = m
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        (i / m.width() as usize, i % m.width() as usize)
    }

    #[test]
    fn empty_annotation_gives_zero_map() {
        let m = render(&ann(20, 10, &[]), &KernelSpec::fixed(), (10, 20)).unwrap();
        assert_eq!(m.sum(), 0.0);
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_center_point() {
        let m = render(&ann(64, 64, &[(32.0, 32.0)]), &KernelSpec::fixed(), (64, 64)).unwrap();
        assert!((m.sum() - 1.0).abs() <= 1e-6);
        assert_eq!(argmax(&m), (32, 32));
        // fully inside: the deposit is the kernel itself
        let k = gaussian_kernel(15, 4.0).unwrap();
        assert!((m.get(32, 32) - k.get(7, 7)).abs() < 1e-15);
    }

    #[test]
    fn corner_point_matches_padded_then_cropped_oracle() {
        let m = render(&ann(64, 64, &[(0.0, 0.0)]), &KernelSpec::fixed(), (64, 64)).unwrap();
        assert!((m.sum() - 1.0).abs() <= 1e-6);

        // Oracle: render on a raster padded by 7 on every side, crop, rescale.
        let k = gaussian_kernel(15, 4.0).unwrap();
        let pad = 7usize;
        let pw = 64 + 2 * pad;
        let mut padded = vec![0.0; pw * pw];
        for r in 0..15 {
            for c in 0..15 {
                padded[r * pw + c] += k.get(r, c);
            }
        }
        let mut crop = Vec::new();
        for r in pad..pad + 64 {
            for c in pad..pad + 64 {
                crop.push(padded[r * pw + c]);
            }
        }
        let kept: f64 = crop.iter().sum();
        assert!(kept > 0.25 && kept < 0.35, "about a quarter kept: {kept}");
        for (a, b) in m.values().iter().zip(&crop) {
            assert!((a - b / kept).abs() < 1e-12);
        }
    }

    #[test]
    fn points_are_scaled_to_output_shape() {
        let a = ann(200, 100, &[(100.0, 50.0)]);
        let m = render(&a, &KernelSpec::fixed(), (50, 100)).unwrap();
        assert_eq!(argmax(&m), (25, 50));
    }

    #[test]
    fn errors() {
        let a = ann(10, 10, &[(1.0, 1.0)]);
        assert!(matches!(
            render(&a, &KernelSpec::fixed(), (0, 10)),
            Err(DensityError::ZeroSizedOutput { .. })
        ));
        let nan = ann(10, 10, &[(1.0, 1.0), (f64::NAN, 2.0)]);
        assert!(matches!(
            render(&nan, &KernelSpec::fixed(), (10, 10)),
            Err(DensityError::NonFiniteCoordinate { index: 1 })
        ));
        let bad = KernelSpec {
            fixed_size: 14,
            ..KernelSpec::fixed()
        };
        assert!(matches!(render(&a, &bad, (10, 10)), Err(DensityError::InvalidSpec(_))));
    }

    #[test]
    fn adaptive_isolated_point_uses_fixed_sigma() {
        let spec = KernelSpec::adaptive();
        let a = ann(64, 64, &[(32.0, 32.0)]);
        assert_eq!(spec.adaptive_sigmas(&a.points), vec![4.0]);
        let m = render(&a, &spec, (64, 64)).unwrap();
        // half-extent ceil(3 * 4) = 12 -> 25x25 kernel
        let k = gaussian_kernel(25, 4.0).unwrap();
        assert!((m.get(32, 32) - k.get(12, 12)).abs() < 1e-15);
        assert_eq!(m.get(32, 32 + 13), 0.0);
        assert!(m.get(32, 32 + 12) > 0.0);
    }

    #[test]
    fn adaptive_sigma_is_capped_and_coincident_points_are_deltas() {
        let spec = KernelSpec::adaptive();
        let far = [Point::new(0.0, 0.0), Point::new(1000.0, 0.0)];
        assert_eq!(spec.adaptive_sigmas(&far), vec![15.0, 15.0]);
        let same = ann(10, 10, &[(4.0, 4.0), (4.0, 4.0)]);
        let m = render(&same, &spec, (10, 10)).unwrap();
        assert_eq!(m.get(4, 4), 2.0);
        assert_eq!(m.sum(), 2.0);
    }

    #[test]
    fn adaptive_sigma_scales_with_spread() {
        let spec = KernelSpec::adaptive();
        let base: Vec<Point> = [(1.0, 2.0), (4.0, 6.0), (2.0, 9.0), (7.0, 1.0), (5.0, 5.0)]
            .iter()
            .map(|&(x, y)| Point::new(x, y))
            .collect();
        let s1 = spec.adaptive_sigmas(&base);
        let scaled: Vec<Point> = base.iter().map(|p| Point::new(p.x * 2.0, p.y * 2.0)).collect();
        let s2 = spec.adaptive_sigmas(&scaled);
        for (a, b) in s1.iter().zip(&s2) {
            assert!(*a < 15.0 / 2.0);
            assert!((b - 2.0 * a).abs() <= 1e-12 * b);
        }
    }

    fn arb_points(w: u32, h: u32, max: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(
            (0.0..f64::from(w), 0.0..f64::from(h)).prop_map(|(x, y)| Point::new(x, y)),
            0..max,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn count_is_conserved(
            (w, h, pts) in (1u32..200, 1u32..200).prop_flat_map(|(w, h)| (Just(w), Just(h), arb_points(w, h, 300))),
            adaptive in any::<bool>(),
        ) {
            let spec = if adaptive { KernelSpec::adaptive() } else { KernelSpec::fixed() };
            let a = AnnotationSet { image_id: "p".into(), width: w, height: h, points: pts };
            let m = render(&a, &spec, (h, w)).unwrap();
            prop_assert!((m.sum() - a.count() as f64).abs() <= 1e-4);
            prop_assert!(m.values().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn translation_equivariance_away_from_borders(
            pts in prop::collection::vec((40.0..60.0f64, 40.0..60.0f64), 1..20),
            dr in 0usize..20,
            dc in 0usize..20,
            adaptive in any::<bool>(),
        ) {
            // windows: fixed half 7, adaptive half <= ceil(3 * 15) = 45 -> keep a margin of 46
            let spec = if adaptive {
                KernelSpec { sigma_cap: 5.0, ..KernelSpec::adaptive() }
            } else {
                KernelSpec::fixed()
            };
            let size = 140u32;
            // integer-valued positions so shifting moves rounded centers exactly
            let base: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x.round(), y.round())).collect();
            let shifted: Vec<Point> = base.iter().map(|p| Point::new(p.x + dc as f64, p.y + dr as f64)).collect();
            let mk = |points: Vec<Point>| AnnotationSet { image_id: "t".into(), width: size, height: size, points };
            let a = render(&mk(base), &spec, (size, size)).unwrap();
            let b = render(&mk(shifted), &spec, (size, size)).unwrap();
            for r in 0..(size as usize - dr) {
                for c in 0..(size as usize - dc) {
                    prop_assert_eq!(a.get(r, c).to_bits(), b.get(r + dr, c + dc).to_bits());
                }
            }
        }
    }
}
