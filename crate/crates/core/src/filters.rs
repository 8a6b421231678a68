//! Separable Gaussian filtering shared by augmentation and post-processing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Mirror including the edge sample (`d c b a | a b c d`).
    #[default]
    Reflect,
    /// Wrap around.
    Periodic,
}

/// Kernel radius used for a given standard deviation.
pub fn truncation_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalised 1-D Gaussian weights over `[-r, r]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = truncation_radius(sigma) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Truncated 2-D kernel `P(x, y) ∝ exp(−(x² + y²) / 2σ²)`, renormalised to sum 1.
pub fn gaussian_kernel_2d(sigma: f64) -> Array2<f64> {
    let r = truncation_radius(sigma) as isize;
    let n = (2 * r + 1) as usize;
    let k = Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as isize - r, j as isize - r);
        (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k / s
}

fn wrap(i: isize, n: usize, mode: Boundary) -> usize {
    let n = n as isize;
    match mode {
        Boundary::Periodic => i.rem_euclid(n) as usize,
        Boundary::Reflect => {
            if n == 1 {
                return 0;
            }
            let period = 2 * n;
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        }
    }
}

/// Convolve with the truncated Gaussian, applied as two 1-D passes. The 2-D kernel
/// is the outer product of the 1-D one, so this equals direct 2-D convolution with
/// [`gaussian_kernel_2d`].
pub fn gaussian_filter(map: &Array2<f64>, sigma: f64, mode: Boundary) -> Array2<f64> {
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sx = wrap(x as isize + t as isize - r, w, mode);
                acc += kv * map[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let sy = wrap(y as isize + t as isize - r, h, mode);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}
