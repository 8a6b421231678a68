//! Published reference scores, echoed next to measured results in reports.

/// Organ-wise scores (fractions): `(organ, baseline AJI, three-branch AJI, baseline PQ, three-branch PQ)`.
pub const ORGAN_SCORES: [(&str, f64, f64, f64, f64); 10] = [
    ("adrenalgland", 0.5349, 0.6682, 0.4830, 0.5503),
    ("larynx", 0.5970, 0.7204, 0.5450, 0.5437),
    ("lymphnode", 0.5354, 0.7266, 0.5079, 0.4994),
    ("mediastinum", 0.5410, 0.6390, 0.5073, 0.4808),
    ("pancreas", 0.4484, 0.6374, 0.3775, 0.4802),
    ("pleura", 0.4649, 0.6271, 0.4002, 0.4572),
    ("skin", 0.4784, 0.7072, 0.4078, 0.5127),
    ("testis", 0.5049, 0.6840, 0.4751, 0.4776),
    ("thymus", 0.5646, 0.6579, 0.5283, 0.4807),
    ("thyroidgland", 0.5820, 0.6736, 0.5348, 0.5729),
];

/// Per-fold AJI: `(baseline, three-branch)`, fold `k` holding out organ `k` above.
pub const FOLD_AJI: [(f64, f64); 10] = [
    (0.5349, 0.668186),
    (0.5970, 0.720366),
    (0.5354, 0.72661),
    (0.5410, 0.639007),
    (0.4484, 0.637411),
    (0.4649, 0.62711),
    (0.4784, 0.707169),
    (0.5049, 0.684007),
    (0.5646, 0.657913),
    (0.582, 0.673637),
];

/// Per-fold PQ: `(baseline, three-branch)`.
pub const FOLD_PQ: [(f64, f64); 10] = [
    (0.4830, 0.550355),
    (0.5450, 0.543708),
    (0.5079, 0.499412),
    (0.5073, 0.480857),
    (0.3775, 0.480179),
    (0.4002, 0.457219),
    (0.4078, 0.512735),
    (0.4751, 0.477618),
    (0.5283, 0.4807),
    (0.5348, 0.572905),
];

/// Distance-map U-Net baseline, averaged over folds.
pub const BASELINE_AJI: f64 = 0.525;
pub const BASELINE_PQ: f64 = 0.477;
/// Three-branch network, averaged over folds.
pub const TRIPLE_UNET_AJI: f64 = 0.6741;
pub const TRIPLE_UNET_PQ: f64 = 0.5056;

/// Reference row for an organ, if it is one of the ten published organs.
pub fn organ_scores(organ: &str) -> Option<(f64, f64, f64, f64)> {
    ORGAN_SCORES
        .iter()
        .find(|(o, ..)| *o == organ)
        .map(|&(_, a, b, c, d)| (a, b, c, d))
}
