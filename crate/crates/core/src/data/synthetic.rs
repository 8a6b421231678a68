//! Synthetic H&E-like corpus: elliptical nuclei rendered through Beer–Lambert
//! absorption with the standard stain vectors.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io;
use crate::error::{Error, Result};
use crate::stain::StainMatrix;
use crate::types::{compact_labels, LabelMap, RgbImage};

pub const ORGANS: [&str; 10] = [
    "adrenalgland",
    "larynx",
    "lymphnode",
    "mediastinum",
    "pancreas",
    "pleura",
    "skin",
    "testis",
    "thymus",
    "thyroidgland",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub min_nuclei: usize,
    pub max_nuclei: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Chance that a nucleus is placed against an existing one.
    pub touching_prob: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 512,
            min_nuclei: 30,
            max_nuclei: 60,
            min_radius: 6.0,
            max_radius: 13.0,
            touching_prob: 0.25,
            noise_std: 3.0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.size < 8
            || self.min_nuclei > self.max_nuclei
            || !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius)
            || !(0.0..=1.0).contains(&self.touching_prob)
            || !(self.noise_std >= 0.0)
        {
            return Err(Error::invalid(format!("inconsistent synthetic config {self:?}")));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Renders one image and its instance labels.
pub fn render_sample(seed: u64, config: &SyntheticConfig) -> Result<(RgbImage, LabelMap)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.size;
    let count = rng.random_range(config.min_nuclei..=config.max_nuclei);
    let mut labels = LabelMap::zeros((n, n));
    let mut placed: Vec<Ellipse> = Vec::new();
    let mut next = 1u32;
    let margin = config.max_radius;
    for _ in 0..count * 20 {
        if placed.len() >= count {
            break;
        }
        let ry = rng.random_range(config.min_radius..=config.max_radius);
        let rx = (ry * rng.random_range(0.7..1.3)).max(config.min_radius);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (cy, cx) = match placed.last() {
            Some(prev) if rng.random_bool(config.touching_prob) => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let d = prev.ry.max(prev.rx) * 0.8 + ry.max(rx) * 0.8;
                (prev.cy + d * theta.sin(), prev.cx + d * theta.cos())
            }
            _ => (
                rng.random_range(margin..n as f64 - margin),
                rng.random_range(margin..n as f64 - margin),
            ),
        };
        let e = Ellipse { cy, cx, ry, rx, angle };
        let r = ry.max(rx).ceil() as isize + 1;
        let mut pixels = Vec::new();
        let mut overlap = 0usize;
        for y in (cy as isize - r).max(0)..(cy as isize + r + 1).min(n as isize) {
            for x in (cx as isize - r).max(0)..(cx as isize + r + 1).min(n as isize) {
                if e.contains(y as f64, x as f64) {
                    if labels[[y as usize, x as usize]] != 0 {
                        overlap += 1;
                    } else {
                        pixels.push((y as usize, x as usize));
                    }
                }
            }
        }
        // touching is fine, heavy overlap is not
        if pixels.len() < 20 || overlap * 4 > pixels.len() {
            continue;
        }
        for (y, x) in pixels {
            labels[[y, x]] = next;
        }
        next += 1;
        placed.push(e);
    }
    let labels = compact_labels(&labels);

    let stains = StainMatrix::ruifrok_johnston();
    let noise = Normal::new(0.0, config.noise_std.max(1e-12)).expect("finite std");
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let nucleus_h: Vec<f64> = (0..next).map(|_| rng.random_range(0.55..0.95)).collect();
    let mut image = Array3::<f32>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let l = labels[[y, x]] as usize;
            let wave = ((y as f64 / 37.0 + phase).sin() + (x as f64 / 53.0).cos()) * 0.05;
            let (h, e) = if l > 0 {
                (nucleus_h[l] + rng.random_range(-0.06..0.06), 0.12)
            } else {
                (0.06 + wave.abs() * 0.3, 0.30 + wave)
            };
            let od = stains.mix([h, e, 0.0]);
            for c in 0..3 {
                let jitter = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = 255.0 * 10f64.powf(-od[c]) + jitter;
                image[[y, x, c]] = v.round().clamp(0.0, 255.0) as f32;
            }
        }
    }
    Ok((image, labels))
}

/// Writes `per_organ` images for every organ under `root/images` and `root/masks`.
/// Returns the sample ids in write order.
pub fn write_corpus(
    root: &Path,
    organs: &[&str],
    per_organ: usize,
    seed: u64,
    config: &SyntheticConfig,
) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for (o, organ) in organs.iter().enumerate() {
        if organ.is_empty() || organ.contains('_') {
            return Err(Error::invalid(format!("organ name {organ:?} must be non-empty without underscores")));
        }
        for i in 0..per_organ {
            let id = format!("{organ}_{}", i + 1);
            let (image, labels) = render_sample(seed.wrapping_mul(1000).wrapping_add((o * per_organ + i) as u64), config)?;
            io::write_rgb(&root.join("images").join(format!("{id}.png")), &image)?;
            io::write_labels(&root.join("masks").join(format!("{id}.png")), &labels)?;
            ids.push(id);
        }
    }
    Ok(ids)
}
