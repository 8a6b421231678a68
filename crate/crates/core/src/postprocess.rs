//! From probability maps to instance labels: Gaussian smoothing, seed markers and
//! marker-controlled watershed flooding.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{gaussian_filter, Boundary};
use crate::model::BranchOutputs;
use crate::types::{compact_labels, BinaryMap, LabelMap, ProbabilityMap};

pub const DEFAULT_MIN_INSTANCE_SIZE: usize = 10;
/// Chebyshev radius by which the foreground is grown before the rest is called background.
pub const BACKGROUND_MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingParams {
    pub sigma: f64,
    pub boundary: Boundary,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            boundary: Boundary::Reflect,
        }
    }
}

impl SmoothingParams {
    pub fn new(sigma: f64) -> Result<Self> {
        let p = Self {
            sigma,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("smoothing sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn truncation_radius(&self) -> usize {
        crate::filters::truncation_radius(self.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessParams {
    pub smoothing: SmoothingParams,
    pub fg_threshold: f64,
    pub contour_threshold: f64,
    pub min_instance_size: usize,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            smoothing: SmoothingParams::default(),
            fg_threshold: 0.5,
            contour_threshold: 0.5,
            min_instance_size: DEFAULT_MIN_INSTANCE_SIZE,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        check_threshold("fg_threshold", self.fg_threshold)?;
        check_threshold("contour_threshold", self.contour_threshold)
    }
}

fn check_threshold(name: &str, t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("{name} must lie in (0, 1), got {t}")));
    }
    Ok(())
}

/// Gaussian-smoothed copy of a probability map, clamped to `[0, 1]`.
pub fn gaussian_smooth(map: &ProbabilityMap, params: &SmoothingParams) -> Result<ProbabilityMap> {
    params.validate()?;
    Ok(gaussian_filter(map, params.sigma, params.boundary).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Watershed seeds: `1..=seeds` are sure nuclei, `background` is sure background and
/// 0 is undecided.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerMap {
    pub labels: LabelMap,
    pub seeds: u32,
    pub background: u32,
    /// Pixels that may end up inside an instance.
    pub foreground: BinaryMap,
}

impl MarkerMap {
    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// 4-connected components of a binary map, numbered `1..=n` in raster order of
/// their first pixel.
pub fn label_components(mask: &BinaryMap) -> (LabelMap, u32) {
    let (h, w) = mask.dim();
    let mut out = LabelMap::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || out[[y, x]] != 0 {
                continue;
            }
            next += 1;
            out[[y, x]] = next;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                for (ny, nx) in neighbours4(cy, cx, h, w) {
                    if mask[[ny, nx]] && out[[ny, nx]] == 0 {
                        out[[ny, nx]] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (out, next)
}

#[inline]
fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (y > 0).then(|| (y - 1, x));
    let left = (x > 0).then(|| (y, x - 1));
    let right = (x + 1 < w).then_some((y, x + 1));
    let down = (y + 1 < h).then_some((y + 1, x));
    [up, left, right, down].into_iter().flatten()
}

/// Binary dilation with a `(2r+1)×(2r+1)` square.
pub fn dilate(mask: &BinaryMap, radius: usize) -> BinaryMap {
    let (h, w) = mask.dim();
    let mut rows = BinaryMap::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w.saturating_sub(1));
            rows[[y, x]] = (lo..=hi).any(|xx| mask[[y, xx]]);
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h.saturating_sub(1));
        (lo..=hi).any(|yy| rows[[yy, x]])
    })
}

/// Sets labels covering fewer than `min_size` pixels to 0.
pub fn remove_small_instances(labels: &LabelMap, min_size: usize) -> LabelMap {
    let mut counts = std::collections::HashMap::new();
    for &l in labels.iter().filter(|&&l| l > 0) {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    labels.mapv(|l| if l > 0 && counts[&l] >= min_size { l } else { 0 })
}

/// Seeds are the large-enough components of the foreground with contour pixels
/// removed; everything farther than [`BACKGROUND_MARGIN`] from the foreground is
/// sure background.
pub fn make_markers(
    seg_prob: &ProbabilityMap,
    contour_prob: &ProbabilityMap,
    fg_threshold: f64,
    contour_threshold: f64,
) -> Result<MarkerMap> {
    make_markers_with(seg_prob, contour_prob, fg_threshold, contour_threshold, DEFAULT_MIN_INSTANCE_SIZE)
}

pub fn make_markers_with(
    seg_prob: &ProbabilityMap,
    contour_prob: &ProbabilityMap,
    fg_threshold: f64,
    contour_threshold: f64,
    min_seed_size: usize,
) -> Result<MarkerMap> {
    check_threshold("fg_threshold", fg_threshold)?;
    check_threshold("contour_threshold", contour_threshold)?;
    if seg_prob.dim() != contour_prob.dim() {
        return Err(Error::invalid(format!(
            "segmentation map {:?} and contour map {:?} differ in shape",
            seg_prob.dim(),
            contour_prob.dim()
        )));
    }
    let foreground = seg_prob.mapv(|p| p >= fg_threshold);
    let interior = ndarray::Zip::from(&foreground)
        .and(contour_prob)
        .map_collect(|&f, &c| f && c < contour_threshold);
    let (components, _) = label_components(&interior);
    let seeds_map = compact_labels(&remove_small_instances(&components, min_seed_size));
    let seeds = seeds_map.iter().copied().max().unwrap_or(0);
    let background = seeds + 1;
    let near = dilate(&foreground, BACKGROUND_MARGIN);
    let labels = ndarray::Zip::from(&seeds_map)
        .and(&near)
        .map_collect(|&s, &n| if s > 0 { s } else if n { 0 } else { background });
    Ok(MarkerMap {
        labels,
        seeds,
        background,
        foreground,
    })
}

#[derive(Clone, Copy, PartialEq)]
struct Key {
    elevation: f64,
    order: u64,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.elevation
            .total_cmp(&other.elevation)
            .then(self.order.cmp(&other.order))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Floods `elevation` from every marker pixel, lowest first. Equal elevations
/// are processed in insertion order, with the markers inserted in raster order.
pub fn flood(elevation: &Array2<f64>, markers: &LabelMap) -> LabelMap {
    let (h, w) = elevation.dim();
    let mut out = markers.clone();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for ((y, x), &l) in markers.indexed_iter() {
        if l != 0 {
            heap.push(Reverse((Key { elevation: elevation[[y, x]], order }, y, x)));
            order += 1;
        }
    }
    while let Some(Reverse((_, y, x))) = heap.pop() {
        let l = out[[y, x]];
        for (ny, nx) in neighbours4(y, x, h, w) {
            if out[[ny, nx]] == 0 {
                out[[ny, nx]] = l;
                heap.push(Reverse((Key { elevation: elevation[[ny, nx]], order }, ny, nx)));
                order += 1;
            }
        }
    }
    out
}

/// Keeps the largest 4-connected piece of every label (first in raster order on ties).
fn keep_largest_pieces(labels: &LabelMap) -> LabelMap {
    let (h, w) = labels.dim();
    let mut piece = Array2::<u32>::zeros((h, w));
    let mut sizes: Vec<usize> = vec![0];
    let mut owner: Vec<u32> = vec![0];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == 0 || piece[[y, x]] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            sizes.push(0);
            owner.push(l);
            piece[[y, x]] = id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                sizes[id as usize] += 1;
                for (ny, nx) in neighbours4(cy, cx, h, w) {
                    if labels[[ny, nx]] == l && piece[[ny, nx]] == 0 {
                        piece[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    let mut best: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    for id in 1..sizes.len() {
        let l = owner[id];
        let e = best.entry(l).or_insert(id as u32);
        if sizes[id] > sizes[*e as usize] {
            *e = id as u32;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let l = labels[[y, x]];
        if l > 0 && best[&l] == piece[[y, x]] {
            l
        } else {
            0
        }
    })
}

/// Marker-controlled watershed on the negated smoothed segmentation probability.
///
/// Background basins become 0, the result is restricted to `markers.foreground`,
/// and each instance keeps only its largest connected piece.
pub fn watershed_segment(
    seg_prob: &ProbabilityMap,
    markers: &MarkerMap,
    smoothing: &SmoothingParams,
) -> Result<LabelMap> {
    if seg_prob.dim() != markers.dim() || markers.foreground.dim() != markers.dim() {
        return Err(Error::invalid(format!(
            "probability map {:?} and markers {:?} differ in shape",
            seg_prob.dim(),
            markers.dim()
        )));
    }
    if let Some(&bad) = markers
        .labels
        .iter()
        .find(|&&l| l > markers.seeds && l != markers.background)
    {
        return Err(Error::invalid(format!(
            "marker label {bad} is neither a seed (1..={}) nor background ({})",
            markers.seeds, markers.background
        )));
    }
    if markers.seeds == 0 {
        return Ok(LabelMap::zeros(seg_prob.dim()));
    }
    let elevation = gaussian_smooth(seg_prob, smoothing)?.mapv(|p| -p);
    let flooded = flood(&elevation, &markers.labels);
    let kept = ndarray::Zip::from(&flooded)
        .and(&markers.foreground)
        .map_collect(|&l, &f| if f && l != markers.background { l } else { 0 });
    Ok(keep_largest_pieces(&kept))
}

/// Full post-processing of one patch's network outputs.
///
/// Seeds and flooding topography come from the smoothed maps; the pixels an
/// instance may occupy are those whose unsmoothed segmentation probability
/// reaches the foreground threshold.
pub fn segment_instances(outputs: &BranchOutputs, params: &PostprocessParams) -> Result<LabelMap> {
    segment_maps(&outputs.seg_prob, &outputs.contour_prob, params)
}

pub fn segment_maps(
    seg_prob: &ProbabilityMap,
    contour_prob: &ProbabilityMap,
    params: &PostprocessParams,
) -> Result<LabelMap> {
    params.validate()?;
    let seg_s = gaussian_smooth(seg_prob, &params.smoothing)?;
    let contour_s = gaussian_smooth(contour_prob, &params.smoothing)?;
    let mut markers = make_markers_with(
        &seg_s,
        &contour_s,
        params.fg_threshold,
        params.contour_threshold,
        params.min_instance_size,
    )?;
    markers.foreground = seg_prob.mapv(|p| p >= params.fg_threshold);
    let labels = watershed_segment(seg_prob, &markers, &params.smoothing)?;
    Ok(compact_labels(&remove_small_instances(&labels, params.min_instance_size)))
}
