//! Random geometric augmentation applied identically to a patch and its targets.
//!
//! All sampled transforms are folded into one output→source coordinate map, so
//! every array is resampled exactly once.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::patches::Patch;
use super::resize::{sample_bilinear, sample_nearest};
use crate::error::{Error, Result};
use crate::filters::{gaussian_filter, Boundary};
use crate::types::{BinaryMap, ContourMap, HematoxylinMap, LabelMap, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Left-right flip.
    pub flip_prob: f64,
    /// Top-bottom mirror.
    pub mirror_prob: f64,
    /// Rotate by a uniformly drawn multiple of 90°.
    pub rotate: bool,
    pub crop_prob: f64,
    pub crop_size: usize,
    pub elastic_prob: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            mirror_prob: 0.5,
            rotate: true,
            crop_prob: 0.5,
            crop_size: 224,
            elastic_prob: 0.5,
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            mirror_prob: 0.0,
            rotate: false,
            crop_prob: 0.0,
            elastic_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("mirror_prob", self.mirror_prob),
            ("crop_prob", self.crop_prob),
            ("elastic_prob", self.elastic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if !(self.elastic_sigma > 0.0) || !(self.elastic_alpha >= 0.0) {
            return Err(Error::Config("elastic sigma must be positive and alpha non-negative".into()));
        }
        Ok(())
    }
}

/// One applied transform, in application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformStep {
    Flip,
    Mirror,
    Rotate { quarter_turns: u8 },
    Crop { y0: usize, x0: usize, size: usize },
    Elastic { alpha: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: String,
    pub patch_index: usize,
    pub transforms: Vec<TransformStep>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct AugmentedExample {
    pub image: RgbImage,
    pub hematoxylin: HematoxylinMap,
    pub seg_target: BinaryMap,
    pub contour_target: ContourMap,
    pub instances: LabelMap,
    pub provenance: Provenance,
}

impl AugmentedExample {
    /// Wraps a patch without transforming it.
    pub fn from_patch(patch: &Patch, seed: u64) -> Self {
        Self {
            image: patch.image.clone(),
            hematoxylin: patch.hematoxylin.clone(),
            seg_target: patch.instances.mapv(|l| l > 0),
            contour_target: patch.contours.clone(),
            instances: patch.instances.clone(),
            provenance: Provenance {
                sample_id: patch.sample_id.clone(),
                patch_index: patch.index(),
                transforms: Vec::new(),
                seed,
            },
        }
    }
}

/// Maps an output pixel to the source coordinate it is sampled from.
struct InverseMap {
    n: usize,
    flip: bool,
    mirror: bool,
    quarter_turns: u8,
    crop: Option<(usize, usize, usize)>,
    displacement: Option<(Array2<f64>, Array2<f64>)>,
}

impl InverseMap {
    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let last = (self.n - 1) as f64;
        let (mut py, mut px) = (y as f64, x as f64);
        if let Some((dy, dx)) = &self.displacement {
            py += dy[[y, x]];
            px += dx[[y, x]];
        }
        if let Some((y0, x0, size)) = self.crop {
            let scale = size as f64 / self.n as f64;
            py = y0 as f64 + (py + 0.5) * scale - 0.5;
            px = x0 as f64 + (px + 0.5) * scale - 0.5;
        }
        // a counter-clockwise quarter turn puts source (x, n-1-y) at output (y, x)
        for _ in 0..self.quarter_turns {
            (py, px) = (px, last - py);
        }
        if self.mirror {
            py = last - py;
        }
        if self.flip {
            px = last - px;
        }
        (py, px)
    }
}

fn elastic_field(rng: &mut ChaCha8Rng, n: usize, alpha: f64, sigma: f64) -> (Array2<f64>, Array2<f64>) {
    let mut noise = || {
        let raw = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        gaussian_filter(&raw, sigma, Boundary::Reflect) * alpha
    };
    let dy = noise();
    let dx = noise();
    (dy, dx)
}

/// Samples a transform composition from `seed` and applies it to `patch`.
pub fn augment(patch: &Patch, seed: u64, config: &AugmentConfig) -> Result<AugmentedExample> {
    config.validate()?;
    let (h, w, _) = patch.image.dim();
    if h != w || h == 0 {
        return Err(Error::invalid(format!("augmentation needs a square patch, got {h}×{w}")));
    }
    let n = h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    // every draw happens unconditionally so each decision uses a fixed stream position
    let flip = rng.random_bool(config.flip_prob);
    let mirror = rng.random_bool(config.mirror_prob);
    let k: u8 = rng.random_range(0..4);
    let quarter_turns = if config.rotate { k } else { 0 };
    let do_crop = rng.random_bool(config.crop_prob) && config.crop_size < n;
    let size = config.crop_size.min(n);
    let (cy, cx) = (rng.random_range(0..=n - size), rng.random_range(0..=n - size));
    let do_elastic = rng.random_bool(config.elastic_prob);

    if flip {
        steps.push(TransformStep::Flip);
    }
    if mirror {
        steps.push(TransformStep::Mirror);
    }
    if quarter_turns > 0 {
        steps.push(TransformStep::Rotate { quarter_turns });
    }
    let crop = do_crop.then(|| {
        steps.push(TransformStep::Crop { y0: cy, x0: cx, size });
        (cy, cx, size)
    });
    let displacement = do_elastic.then(|| {
        steps.push(TransformStep::Elastic {
            alpha: config.elastic_alpha,
            sigma: config.elastic_sigma,
        });
        elastic_field(&mut rng, n, config.elastic_alpha, config.elastic_sigma)
    });
    let map = InverseMap {
        n,
        flip,
        mirror,
        quarter_turns,
        crop,
        displacement,
    };

    let mut image = Array3::<f32>::zeros((n, n, 3));
    let mut hematoxylin = HematoxylinMap::zeros((n, n));
    let mut instances = LabelMap::zeros((n, n));
    let mut contour_target = ContourMap::from_elem((n, n), false);
    let planes: Vec<_> = (0..3).map(|c| patch.image.index_axis(Axis(2), c)).collect();
    let hv = patch.hematoxylin.view();
    let iv = patch.instances.view();
    let cv = patch.contours.view();
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = map.source(y, x);
            for (c, plane) in planes.iter().enumerate() {
                image[[y, x, c]] = sample_bilinear(plane, sy, sx);
            }
            hematoxylin[[y, x]] = sample_bilinear(&hv, sy, sx);
            instances[[y, x]] = sample_nearest(&iv, sy, sx);
            contour_target[[y, x]] = sample_nearest(&cv, sy, sx);
        }
    }
    Ok(AugmentedExample {
        image,
        hematoxylin,
        seg_target: instances.mapv(|l| l > 0),
        contour_target,
        instances,
        provenance: Provenance {
            sample_id: patch.sample_id.clone(),
            patch_index: patch.index(),
            transforms: steps,
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask_to_contours;
    use crate::data::patches::GridCell;

    fn patch(n: usize) -> Patch {
        let image = Array3::from_shape_fn((n, n, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 11) % 255) as f32);
        let mut instances = LabelMap::zeros((n, n));
        for y in 3..9 {
            for x in 4..12 {
                instances[[y, x]] = 1;
            }
        }
        for y in 9..14 {
            for x in 5..9 {
                instances[[y, x]] = 2;
            }
        }
        Patch {
            sample_id: "skin_1".into(),
            cell: GridCell { index: 3, y0: 0, x0: 0, height: n, width: n },
            hematoxylin: Array2::from_shape_fn((n, n), |(y, x)| ((y + x) % 10) as f32 / 10.0),
            contours: mask_to_contours(&instances, 1),
            image,
            instances,
        }
    }

    fn only(f: impl FnOnce(&mut AugmentConfig)) -> AugmentConfig {
        let mut c = AugmentConfig::identity();
        f(&mut c);
        c
    }

    #[test]
    fn identity_config_returns_input() {
        let p = patch(20);
        let a = augment(&p, 5, &AugmentConfig::identity()).unwrap();
        assert_eq!(a.image, p.image);
        assert_eq!(a.hematoxylin, p.hematoxylin);
        assert_eq!(a.instances, p.instances);
        assert_eq!(a.contour_target, p.contours);
        assert!(a.provenance.transforms.is_empty());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let p = patch(24);
        let cfg = AugmentConfig { crop_size: 18, ..AugmentConfig::default() };
        for seed in 0..6 {
            let a = augment(&p, seed, &cfg).unwrap();
            let b = augment(&p, seed, &cfg).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.hematoxylin, b.hematoxylin);
            assert_eq!(a.contour_target, b.contour_target);
            assert_eq!(a.provenance, b.provenance);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let p = patch(16);
        for cfg in [only(|c| c.flip_prob = 1.0), only(|c| c.mirror_prob = 1.0)] {
            let once = augment(&p, 1, &cfg).unwrap();
            assert_ne!(once.image, p.image);
            let mut q = p.clone();
            q.image = once.image.clone();
            q.hematoxylin = once.hematoxylin.clone();
            q.instances = once.instances.clone();
            q.contours = once.contour_target.clone();
            let twice = augment(&q, 1, &cfg).unwrap();
            assert_eq!(twice.image, p.image);
            assert_eq!(twice.instances, p.instances);
        }
    }

    #[test]
    fn flip_and_mirror_directions() {
        let p = patch(16);
        let f = augment(&p, 0, &only(|c| c.flip_prob = 1.0)).unwrap();
        assert_eq!(f.image[[2, 0, 1]], p.image[[2, 15, 1]]);
        let m = augment(&p, 0, &only(|c| c.mirror_prob = 1.0)).unwrap();
        assert_eq!(m.image[[0, 2, 1]], p.image[[15, 2, 1]]);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let p = patch(16);
        for seed in 0..40 {
            let a = augment(&p, seed, &only(|c| c.rotate = true)).unwrap();
            if a.provenance.transforms == vec![TransformStep::Rotate { quarter_turns: 1 }] {
                // top-right corner moves to top-left
                assert_eq!(a.image[[0, 0, 0]], p.image[[0, 15, 0]]);
                return;
            }
        }
        panic!("no single quarter turn drawn");
    }

    /// A single marked pixel must land at the same place in every array.
    #[test]
    fn arrays_stay_aligned() {
        let n = 32;
        let mut p = patch(n);
        p.image.fill(0.0);
        p.hematoxylin.fill(0.0);
        p.instances.fill(0);
        p.contours.fill(false);
        for y in 10..14 {
            for x in 20..24 {
                p.image[[y, x, 0]] = 255.0;
                p.hematoxylin[[y, x]] = 1.0;
                p.instances[[y, x]] = 1;
                p.contours[[y, x]] = true;
            }
        }
        let cfg = AugmentConfig { crop_size: 28, elastic_alpha: 2.0, ..AugmentConfig::default() };
        for seed in 0..20 {
            let a = augment(&p, seed, &cfg).unwrap();
            let centroid = |m: &Array2<bool>| {
                let pts: Vec<(usize, usize)> = m.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
                let k = pts.len() as f64;
                let cy = pts.iter().map(|p| p.0 as f64).sum::<f64>() / k;
                let cx = pts.iter().map(|p| p.1 as f64).sum::<f64>() / k;
                (cy, cx)
            };
            let img = a.image.index_axis(Axis(2), 0).mapv(|v| v > 127.5);
            let h = a.hematoxylin.mapv(|v| v > 0.5);
            let (a0, a1, a2) = (centroid(&img), centroid(&h), centroid(&a.contour_target));
            for c in [a1, a2, centroid(&a.seg_target)] {
                assert!((c.0 - a0.0).abs() < 1.0 && (c.1 - a0.1).abs() < 1.0, "seed {seed}");
            }
        }
    }

    #[test]
    fn contours_commute_with_flips_and_rotations() {
        let p = patch(20);
        let cfg = AugmentConfig { crop_prob: 0.0, elastic_prob: 0.0, ..AugmentConfig::default() };
        for seed in 0..16 {
            let a = augment(&p, seed, &cfg).unwrap();
            assert_eq!(a.contour_target, mask_to_contours(&a.instances, 1), "seed {seed}");
        }
    }

    #[test]
    fn targets_are_binary_and_sized() {
        let p = patch(24);
        let a = augment(&p, 9, &AugmentConfig { crop_size: 20, ..Default::default() }).unwrap();
        assert_eq!(a.seg_target.dim(), (24, 24));
        assert_eq!(a.seg_target, a.instances.mapv(|l| l > 0));
    }
}
