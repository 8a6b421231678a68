//! Array aliases shared across modules.

use ndarray::{Array2, Array3};

/// `H×W×3` colour patch, channel values in `[0, 255]`.
pub type RgbImage = Array3<f32>;

/// `H×W` instance labels: 0 is background, `k ≥ 1` the k-th nucleus.
pub type LabelMap = Array2<u32>;

/// `H×W` binary map (foreground masks, nucleus contours).
pub type BinaryMap = Array2<bool>;

/// Nucleus boundary pixels.
pub type ContourMap = BinaryMap;

/// `H×W` per-pixel probability in `[0, 1]`.
pub type ProbabilityMap = Array2<f64>;

/// Hematoxylin concentration, rescaled to `[0, 1]` by default.
pub type HematoxylinMap = Array2<f32>;

pub fn foreground(labels: &LabelMap) -> BinaryMap {
    labels.mapv(|l| l > 0)
}

/// Relabel instances to `1..=K` in order of first appearance (raster order).
pub fn compact_labels(labels: &LabelMap) -> LabelMap {
    let mut map = std::collections::HashMap::new();
    let mut next = 0u32;
    labels.mapv(|l| {
        if l == 0 {
            0
        } else {
            *map.entry(l).or_insert_with(|| {
                next += 1;
                next
            })
        }
    })
}

/// Number of distinct non-zero labels.
pub fn count_instances(labels: &LabelMap) -> usize {
    let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}
