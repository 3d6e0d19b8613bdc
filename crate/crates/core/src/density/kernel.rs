use super::DensityError;
use crate::sum::compensated_sum;

/// A square, odd-sized, unit-sum 2-D kernel stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    /// The 1x1 kernel `[[1.0]]`.
    pub fn delta() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Cells on each side of the center.
    pub fn half(&self) -> usize {
        self.size / 2
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.size..(row + 1) * self.size]
    }
}

/// Samples an isotropic Gaussian on a `size x size` grid centered on the
/// middle cell and rescales it to unit sum.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel, DensityError> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(DensityError::EvenKernelSize(size));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(DensityError::InvalidSigma(sigma));
    }
    let center = (size / 2) as f64;
    let two_var = 2.0 * sigma * sigma;
    // The 2-D Gaussian factorizes; identical 1-D factors keep the result
    // exactly symmetric under flips and transpose.
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / two_var).exp()
        })
        .collect();
    let mut weights: Vec<f64> = Vec::with_capacity(size * size);
    for &gr in &g {
        weights.extend(g.iter().map(|&gc| gr * gc));
    }
    let total = compensated_sum(weights.iter().copied());
    for w in &mut weights {
        *w /= total;
    }
    Ok(Kernel { size, weights })
}
