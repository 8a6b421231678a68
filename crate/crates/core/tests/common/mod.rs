//! Helpers shared by the integration tests: an enumeration oracle for the
//! instance metrics, random label maps and small training fixtures.

#![allow(dead_code)]

use cryoseg::data::synthetic::{render_sample, SyntheticConfig};
use cryoseg::data::{crop_cell, AugmentedExample, GridCell, PatchOptions, Sample};
use cryoseg::types::LabelMap;
use ndarray::Array2;
use rand::Rng;

/// Metric values computed by brute force.
#[derive(Clone, Copy, Debug)]
pub struct OracleScores {
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub dice: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ids(map: &LabelMap) -> Vec<u32> {
    let mut v: Vec<u32> = map.iter().copied().filter(|&l| l > 0).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn count(map: &LabelMap, id: u32) -> usize {
    map.iter().filter(|&&l| l == id).count()
}

/// Scores by enumerating the full gt × pred overlap table, one pixel scan per pair.
pub fn oracle(gt: &LabelMap, pred: &LabelMap) -> OracleScores {
    let (g, p) = (ids(gt), ids(pred));
    let ga: Vec<usize> = g.iter().map(|&i| count(gt, i)).collect();
    let pa: Vec<usize> = p.iter().map(|&j| count(pred, j)).collect();
    let mut inter = vec![vec![0usize; p.len()]; g.len()];
    for (a, &gi) in g.iter().enumerate() {
        for (b, &pj) in p.iter().enumerate() {
            inter[a][b] = gt.iter().zip(pred.iter()).filter(|(&x, &y)| x == gi && y == pj).count();
        }
    }
    let iou = |a: usize, b: usize| inter[a][b] as f64 / (ga[a] + pa[b] - inter[a][b]) as f64;

    // AJI: each gt proposes its best prediction; a prediction wanted by several
    // gts is kept by the highest IoU, then the lowest gt id.
    let aji = if g.is_empty() && p.is_empty() {
        1.0
    } else {
        let mut proposal: Vec<Option<usize>> = vec![None; g.len()];
        for a in 0..g.len() {
            let mut best: Option<usize> = None;
            for b in 0..p.len() {
                if inter[a][b] == 0 {
                    continue;
                }
                if best.map_or(true, |c| iou(a, b) > iou(a, c)) {
                    best = Some(b);
                }
            }
            proposal[a] = best;
        }
        let mut owner: Vec<Option<usize>> = vec![None; p.len()];
        for b in 0..p.len() {
            for a in 0..g.len() {
                if proposal[a] != Some(b) {
                    continue;
                }
                if owner[b].map_or(true, |o| iou(a, b) > iou(o, b)) {
                    owner[b] = Some(a);
                }
            }
        }
        let (mut num, mut den) = (0usize, 0usize);
        let mut gt_used = vec![false; g.len()];
        for (b, o) in owner.iter().enumerate() {
            match o {
                Some(a) => {
                    gt_used[*a] = true;
                    num += inter[*a][b];
                    den += ga[*a] + pa[b] - inter[*a][b];
                }
                None => den += pa[b],
            }
        }
        for a in 0..g.len() {
            if !gt_used[a] {
                den += ga[a];
            }
        }
        num as f64 / den as f64
    };

    // PQ: pairs above one half are unique, so they can simply be listed.
    let mut tp = 0;
    let mut iou_sum = 0.0;
    for a in 0..g.len() {
        for b in 0..p.len() {
            if iou(a, b) > 0.5 {
                tp += 1;
                iou_sum += iou(a, b);
            }
        }
    }
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    let (pq, sq, rq) = if g.is_empty() && p.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        let rq = tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64);
        let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
        (sq * rq, sq, rq)
    };

    let a = gt.iter().filter(|&&l| l > 0).count();
    let b = pred.iter().filter(|&&l| l > 0).count();
    let both = gt.iter().zip(pred.iter()).filter(|(&x, &y)| x > 0 && y > 0).count();
    let dice = if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 };

    OracleScores { aji, pq, sq, rq, dice, tp, fp, fn_ }
}

/// Up to `max_instances` rectangles with arbitrary non-zero ids painted onto a
/// map of at most `max_side` pixels per side.
pub fn random_label_map<R: Rng>(rng: &mut R, h: usize, w: usize, max_instances: usize) -> LabelMap {
    let mut map = LabelMap::zeros((h, w));
    let k = rng.random_range(0..=max_instances);
    for _ in 0..k {
        let id = rng.random_range(1..40u32);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                map[[y, x]] = id;
            }
        }
    }
    map
}

/// A map sharing the layout of `base` with some instances nudged, grown or dropped,
/// so that predictions overlap their ground truth the way real ones do.
pub fn perturbed<R: Rng>(rng: &mut R, base: &LabelMap) -> LabelMap {
    let (h, w) = base.dim();
    let dy = rng.random_range(-1i64..=1);
    let dx = rng.random_range(-1i64..=1);
    let mut out = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            base[[sy as usize, sx as usize]]
        } else {
            0
        }
    });
    for v in out.iter_mut() {
        if rng.random_bool(0.08) {
            *v = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..40u32) };
        }
    }
    out
}

/// Swaps instance ids through a random permutation.
pub fn relabel<R: Rng>(rng: &mut R, map: &LabelMap) -> LabelMap {
    let ids = ids(map);
    let mut targets: Vec<u32> = (1..=ids.len() as u32).map(|i| i * 7 + 3).collect();
    for i in (1..targets.len()).rev() {
        targets.swap(i, rng.random_range(0..=i));
    }
    map.mapv(|l| ids.iter().position(|&i| i == l).map_or(0, |k| targets[k]))
}

/// Whether some ground-truth instance has two predictions at equal best IoU;
/// greedy matching then depends on id order.
pub fn has_iou_ties(gt: &LabelMap, pred: &LabelMap) -> bool {
    let (g, p) = (ids(gt), ids(pred));
    let area_g: Vec<usize> = g.iter().map(|&i| count(gt, i)).collect();
    let area_p: Vec<usize> = p.iter().map(|&j| count(pred, j)).collect();
    let mut ious = vec![vec![0.0f64; p.len()]; g.len()];
    for (a, &gi) in g.iter().enumerate() {
        for (b, &pj) in p.iter().enumerate() {
            let i = gt.iter().zip(pred.iter()).filter(|(&x, &y)| x == gi && y == pj).count();
            ious[a][b] = i as f64 / (area_g[a] + area_p[b] - i) as f64;
        }
    }
    let row_tie = ious.iter().any(|row| {
        let best = row.iter().cloned().fold(0.0, f64::max);
        best > 0.0 && row.iter().filter(|&&v| v == best).count() > 1
    });
    let col_tie = (0..p.len()).any(|b| {
        let col: Vec<f64> = ious.iter().map(|r| r[b]).filter(|&v| v > 0.0).collect();
        col.iter().enumerate().any(|(i, v)| col[i + 1..].contains(v))
    });
    row_tie || col_tie
}

/// Two synthetic images of blob nuclei, each cropped whole into one training example.
pub fn blob_examples(size: usize) -> Vec<AugmentedExample> {
    let cfg = SyntheticConfig {
        size,
        min_nuclei: 10,
        max_nuclei: 16,
        ..SyntheticConfig::default()
    };
    let options = PatchOptions {
        output_size: size,
        ..PatchOptions::default()
    };
    (0..2)
        .map(|i| {
            let (image, labels) = render_sample(100 + i, &cfg).unwrap();
            let s = Sample::new(format!("blob_{i}"), image, labels, 2).unwrap();
            let cell = GridCell { index: 0, y0: 0, x0: 0, height: size, width: size };
            let p = crop_cell(&s.id, &s.image, &s.instances, &s.contours, cell, &options).unwrap();
            AugmentedExample::from_patch(&p, 0)
        })
        .collect()
}
