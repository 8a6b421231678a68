//! Beer–Lambert colour deconvolution of H&E patches.
//!
//! Intensities are turned into base-10 optical density, then unmixed against a
//! fixed 3×3 stain matrix whose rows are unit OD vectors for hematoxylin, eosin
//! and a residual channel.

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::HematoxylinMap;

/// Smallest intensity fed to the logarithm.
pub const INTENSITY_FLOOR: f64 = 1.0;
pub const DEFAULT_BACKGROUND: f64 = 255.0;

/// Standard H&E optical-density vectors (Ruifrok & Johnston).
pub const RUIFROK_HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const RUIFROK_EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// `H×W×3` optical density, all entries non-negative when intensities do not exceed
/// the background.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalDensityMap(pub Array3<f64>);

impl OpticalDensityMap {
    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalized(v: [f64; 3], what: &str) -> Result<[f64; 3]> {
    let n = norm(v);
    if !(n.is_finite() && n > 1e-12) {
        return Err(Error::invalid(format!("{what} stain vector has zero length")));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl StainMatrix {
    /// Builds the matrix from hematoxylin and eosin vectors; the residual row is their
    /// normalised cross product.
    pub fn from_he(hematoxylin: [f64; 3], eosin: [f64; 3]) -> Result<Self> {
        let h = normalized(hematoxylin, "hematoxylin")?;
        let e = normalized(eosin, "eosin")?;
        let r = normalized(cross(h, e), "residual (hematoxylin and eosin are parallel)")?;
        Ok(Self { rows: [h, e, r] })
    }

    /// Rows are normalised; invertibility is checked when the matrix is used.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Ok(Self {
            rows: [
                normalized(rows[0], "hematoxylin")?,
                normalized(rows[1], "eosin")?,
                normalized(rows[2], "residual")?,
            ],
        })
    }

    pub fn ruifrok_johnston() -> Self {
        Self::from_he(RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN).expect("reference vectors are independent")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.rows;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse of `Mᵀ`, i.e. the map from an OD triple to stain concentrations.
    fn unmixing(&self) -> Result<[[f64; 3]; 3]> {
        let det = self.determinant();
        if !(det.abs() > 1e-9) {
            return Err(Error::invalid(format!(
                "stain matrix is singular (det = {det:e})"
            )));
        }
        // rows of M are the columns of Mᵀ; (Mᵀ)⁻¹ = (M⁻¹)ᵀ
        let m = &self.rows;
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                // cofactor of m[j][i] gives (M⁻¹)[i][j]
                let cof = m[j1][i1] * m[j2][i2] - m[j1][i2] * m[j2][i1];
                inv[i][j] = cof / det;
            }
        }
        // inv = M⁻¹; transpose
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = inv[j][i];
            }
        }
        Ok(out)
    }

    /// `Mᵀ·c`: the optical density produced by concentrations `c`.
    pub fn mix(&self, c: [f64; 3]) -> [f64; 3] {
        let m = &self.rows;
        [
            m[0][0] * c[0] + m[1][0] * c[1] + m[2][0] * c[2],
            m[0][1] * c[0] + m[1][1] * c[1] + m[2][1] * c[2],
            m[0][2] * c[0] + m[1][2] * c[1] + m[2][2] * c[2],
        ]
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::ruifrok_johnston()
    }
}

/// Options controlling hematoxylin extraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainOptions {
    pub stains: StainMatrix,
    pub background_intensity: f64,
    /// Min-max rescale the hematoxylin channel of every patch to `[0, 1]`.
    pub rescale: bool,
}

impl Default for StainOptions {
    fn default() -> Self {
        Self {
            stains: StainMatrix::default(),
            background_intensity: DEFAULT_BACKGROUND,
            rescale: true,
        }
    }
}

pub fn rgb_to_optical_density(
    patch: ArrayView3<'_, f32>,
    background_intensity: f64,
) -> Result<OpticalDensityMap> {
    if !(background_intensity > 0.0 && background_intensity.is_finite()) {
        return Err(Error::invalid(format!(
            "background intensity must be positive, got {background_intensity}"
        )));
    }
    if patch.shape()[2] != 3 {
        return Err(Error::invalid(format!(
            "expected 3 colour channels, got {}",
            patch.shape()[2]
        )));
    }
    Ok(OpticalDensityMap(patch.mapv(|i| {
        -((i as f64).max(INTENSITY_FLOOR) / background_intensity).log10()
    })))
}

/// Per-pixel concentrations without clamping, as an `H×W×3` array.
pub fn deconvolve_unclamped(od: &OpticalDensityMap, stains: &StainMatrix) -> Result<Array3<f64>> {
    let u = stains.unmixing()?;
    let v = od.values();
    let mut out = Array3::<f64>::zeros(v.raw_dim());
    Zip::from(out.lanes_mut(Axis(2)))
        .and(v.lanes(Axis(2)))
        .for_each(|mut c, d| {
            for (i, row) in u.iter().enumerate() {
                c[i] = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            }
        });
    Ok(out)
}

/// Hematoxylin, eosin and residual concentration maps, negatives clamped to 0.
pub fn deconvolve_stains(od: &OpticalDensityMap, stains: &StainMatrix) -> Result<[Array2<f64>; 3]> {
    let c = deconvolve_unclamped(od, stains)?;
    let take = |k: usize| c.index_axis(Axis(2), k).mapv(|v| v.max(0.0));
    Ok([take(0), take(1), take(2)])
}

/// Hematoxylin channel of an RGB patch with the default stain options.
pub fn extract_hematoxylin(patch: ArrayView3<'_, f32>) -> Result<HematoxylinMap> {
    extract_hematoxylin_with(patch, &StainOptions::default())
}

pub fn extract_hematoxylin_with(
    patch: ArrayView3<'_, f32>,
    options: &StainOptions,
) -> Result<HematoxylinMap> {
    let od = rgb_to_optical_density(patch, options.background_intensity)?;
    let [h, _, _] = deconvolve_stains(&od, &options.stains)?;
    let h = if options.rescale { min_max_rescale(h) } else { h };
    Ok(h.mapv(|v| v as f32))
}

/// Rescale to `[0, 1]`; constant maps become all zeros.
fn min_max_rescale(map: Array2<f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 1e-12) {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(h: usize, w: usize, rgb: [f32; 3]) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(_, _, c)| rgb[c])
    }

    #[test]
    fn od_fixed_points() {
        let white = rgb_to_optical_density(uniform(2, 2, [255.0; 3]).view(), 255.0).unwrap();
        assert!(white.values().iter().all(|&v| v == 0.0));
        let tenth = rgb_to_optical_density(uniform(1, 1, [25.5; 3]).view(), 255.0).unwrap();
        for &v in tenth.values() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        // black pixels are floored at one intensity unit
        let black = rgb_to_optical_density(uniform(1, 1, [0.0; 3]).view(), 255.0).unwrap();
        let expected = -(1.0f64 / 255.0).log10();
        assert_abs_diff_eq!(expected, 2.406540180433955, epsilon = 1e-12);
        for &v in black.values() {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn od_rejects_non_positive_background() {
        let p = uniform(1, 1, [10.0; 3]);
        assert!(matches!(
            rgb_to_optical_density(p.view(), 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(rgb_to_optical_density(p.view(), -3.0).is_err());
    }

    #[test]
    fn default_matrix_rows_are_unit() {
        let m = StainMatrix::default();
        for row in m.rows() {
            assert_abs_diff_eq!(norm(*row), 1.0, epsilon = 1e-12);
        }
        assert!(m.determinant().abs() > 0.1);
    }

    #[test]
    fn pure_hematoxylin_od_unmixes_to_unit_hematoxylin() {
        let m = StainMatrix::default();
        let h = m.rows()[0];
        let od = OpticalDensityMap(Array3::from_shape_fn((3, 4, 3), |(_, _, c)| h[c]));
        let [hm, em, rm] = deconvolve_stains(&od, &m).unwrap();
        for &v in &hm {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert!(em.iter().chain(rm.iter()).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_od_gives_zero_concentrations() {
        let od = OpticalDensityMap(Array3::zeros((2, 2, 3)));
        let maps = deconvolve_stains(&od, &StainMatrix::default()).unwrap();
        assert!(maps.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = StainMatrix::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        let od = OpticalDensityMap(Array3::zeros((1, 1, 3)));
        assert!(matches!(deconvolve_stains(&od, &m), Err(Error::InvalidArgument(_))));
        assert!(StainMatrix::from_he([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn unmixing_roundtrips_random_od() {
        let m = StainMatrix::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let od = OpticalDensityMap(Array3::from_shape_fn((10, 10, 3), |_| rng.random_range(0.0..3.0)));
        let c = deconvolve_unclamped(&od, &m).unwrap();
        for (d, cc) in od.values().lanes(Axis(2)).into_iter().zip(c.lanes(Axis(2))) {
            let back = m.mix([cc[0], cc[1], cc[2]]);
            for k in 0..3 {
                assert!((back[k] - d[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn white_and_uniform_patches_give_zero_map() {
        let white = extract_hematoxylin(uniform(8, 8, [255.0; 3]).view()).unwrap();
        assert!(white.iter().all(|&v| v == 0.0));
        let purple = extract_hematoxylin(uniform(8, 8, [120.0, 60.0, 160.0]).view()).unwrap();
        assert!(purple.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hematoxylin_region_is_isolated() {
        // background white, a square rendered along the hematoxylin OD direction
        let h = StainMatrix::default().rows()[0];
        let strength = 0.5;
        let patch = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            if (4..10).contains(&y) && (5..12).contains(&x) {
                (255.0 * 10f64.powf(-strength * h[c])) as f32
            } else {
                255.0
            }
        });
        let map = extract_hematoxylin(patch.view()).unwrap();
        for ((y, x), &v) in map.indexed_iter() {
            let inside = (4..10).contains(&y) && (5..12).contains(&x);
            let expected = if inside { 1.0 } else { 0.0 };
            // f32 rendering of the intensities leaves a little quantisation error
            assert!((v - expected).abs() < 1e-4, "({y},{x}) = {v}");
        }
    }

    proptest! {
        #[test]
        fn darkening_never_decreases_od(i in 1.0f32..255.0, t in 0.01f32..0.999) {
            let a = rgb_to_optical_density(uniform(1, 1, [i; 3]).view(), 255.0).unwrap();
            let b = rgb_to_optical_density(uniform(1, 1, [i * t; 3]).view(), 255.0).unwrap();
            prop_assert!(b.values()[[0, 0, 0]] >= a.values()[[0, 0, 0]]);
        }

        #[test]
        fn hematoxylin_map_in_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patch = Array3::from_shape_fn((6, 7, 3), |_| rng.random_range(0.0f32..=255.0));
            let map = extract_hematoxylin(patch.view()).unwrap();
            prop_assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
