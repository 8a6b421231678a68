//! Instance matching, aggregated Jaccard index, panoptic quality and Dice.

pub mod reference;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelMap;

/// Matching floor used by the aggregated Jaccard index.
pub const AJI_IOU_FLOOR: f64 = 0.0;
/// Matching floor used by panoptic quality.
pub const PQ_IOU_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MatchResult {
    /// Sorted by ground-truth id.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
    pub gt_areas: BTreeMap<u32, usize>,
    pub pred_areas: BTreeMap<u32, usize>,
}

fn areas(labels: &LabelMap) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l > 0) {
        *out.entry(l).or_insert(0) += 1;
    }
    out
}

fn check_shapes(gt: &LabelMap, pred: &LabelMap) -> Result<()> {
    if gt.dim() != pred.dim() {
        return Err(Error::invalid(format!(
            "ground truth {:?} and prediction {:?} differ in shape",
            gt.dim(),
            pred.dim()
        )));
    }
    Ok(())
}

/// One-to-one matching. Every ground-truth instance proposes the prediction with
/// the highest IoU (lower prediction id on ties); proposals above `iou_floor` are
/// accepted, and a prediction proposed by several instances goes to the highest
/// IoU, then the lowest ground-truth id. Instances losing such a conflict stay
/// unmatched.
pub fn match_instances(gt: &LabelMap, pred: &LabelMap, iou_floor: f64) -> Result<MatchResult> {
    check_shapes(gt, pred)?;
    let gt_areas = areas(gt);
    let pred_areas = areas(pred);
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        if g > 0 && p > 0 {
            *overlap.entry((g, p)).or_insert(0) += 1;
        }
    }
    let mut per_gt: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
    for (&(g, p), &i) in &overlap {
        per_gt.entry(g).or_default().push((p, i));
    }
    let mut proposals: Vec<MatchedPair> = Vec::new();
    for (&g, cands) in &per_gt {
        let mut best: Option<MatchedPair> = None;
        for &(p, i) in cands {
            let union = gt_areas[&g] + pred_areas[&p] - i;
            let iou = i as f64 / union as f64;
            let better = match &best {
                None => true,
                Some(b) => iou > b.iou || (iou == b.iou && p < b.pred),
            };
            if better {
                best = Some(MatchedPair { gt: g, pred: p, iou, intersection: i, union });
            }
        }
        if let Some(b) = best.filter(|b| b.iou > iou_floor) {
            proposals.push(b);
        }
    }
    proposals.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.gt.cmp(&b.gt)));
    let mut taken: HashSet<u32> = HashSet::new();
    let mut pairs: Vec<MatchedPair> = Vec::new();
    for prop in proposals {
        if taken.insert(prop.pred) {
            pairs.push(prop);
        }
    }
    pairs.sort_by_key(|p| p.gt);
    let unmatched_gt = gt_areas
        .keys()
        .copied()
        .filter(|g| pairs.binary_search_by_key(g, |p| p.gt).is_err())
        .collect();
    let unmatched_pred = pred_areas
        .keys()
        .copied()
        .filter(|p| !taken.contains(p))
        .collect();
    Ok(MatchResult {
        pairs,
        unmatched_gt,
        unmatched_pred,
        gt_areas,
        pred_areas,
    })
}

/// Aggregated Jaccard index; 1 when both maps are empty.
pub fn aji(gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    let m = match_instances(gt, pred, AJI_IOU_FLOOR)?;
    Ok(aji_from_match(&m))
}

pub fn aji_from_match(m: &MatchResult) -> f64 {
    if m.gt_areas.is_empty() && m.pred_areas.is_empty() {
        return 1.0;
    }
    let inter: usize = m.pairs.iter().map(|p| p.intersection).sum();
    let union: usize = m.pairs.iter().map(|p| p.union).sum::<usize>()
        + m.unmatched_gt.iter().map(|g| m.gt_areas[g]).sum::<usize>()
        + m.unmatched_pred.iter().map(|p| m.pred_areas[p]).sum::<usize>();
    inter as f64 / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Panoptic quality with matches at IoU > 0.5; `pq = 1` when both maps are empty.
pub fn panoptic_quality(gt: &LabelMap, pred: &LabelMap) -> Result<PanopticQuality> {
    let m = match_instances(gt, pred, PQ_IOU_FLOOR)?;
    Ok(pq_from_match(&m))
}

pub fn pq_from_match(m: &MatchResult) -> PanopticQuality {
    let tp = m.pairs.len();
    let fp = m.unmatched_pred.len();
    let fn_ = m.unmatched_gt.len();
    if tp + fp + fn_ == 0 {
        return PanopticQuality { pq: 1.0, sq: 1.0, rq: 1.0, tp, fp, fn_ };
    }
    let rq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    let sq = if tp == 0 {
        0.0
    } else {
        m.pairs.iter().map(|p| p.iou).sum::<f64>() / tp as f64
    };
    PanopticQuality { pq: rq * sq, sq, rq, tp, fp, fn_ }
}

/// Dice overlap of the binarised foregrounds; 1 when both are empty.
pub fn dice_score(gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    check_shapes(gt, pred)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&g, &p) in gt.iter().zip(pred.iter()) {
        a += (g > 0) as usize;
        b += (p > 0) as usize;
        both += (g > 0 && p > 0) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub dice: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// All metrics for one image.
pub fn evaluate_pair(gt: &LabelMap, pred: &LabelMap) -> Result<MetricReport> {
    let aji = aji(gt, pred)?;
    let q = panoptic_quality(gt, pred)?;
    Ok(MetricReport {
        aji,
        pq: q.pq,
        sq: q.sq,
        rq: q.rq,
        dice: dice_score(gt, pred)?,
        tp: q.tp,
        fp: q.fp,
        fn_: q.fn_,
    })
}

/// A report tagged with where the image came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub organ: String,
    pub fold: Option<usize>,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub dice: f64,
    pub images: usize,
}

impl MetricMeans {
    fn of<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Self {
        let mut m = Self::default();
        for r in reports {
            m.aji += r.aji;
            m.pq += r.pq;
            m.sq += r.sq;
            m.rq += r.rq;
            m.dice += r.dice;
            m.images += 1;
        }
        let n = m.images.max(1) as f64;
        Self {
            aji: m.aji / n,
            pq: m.pq / n,
            sq: m.sq / n,
            rq: m.rq / n,
            dice: m.dice / n,
            images: m.images,
        }
    }

    fn mean_of(groups: &[MetricMeans]) -> Self {
        let n = groups.len().max(1) as f64;
        let sum = |f: fn(&MetricMeans) -> f64| groups.iter().map(f).sum::<f64>() / n;
        Self {
            aji: sum(|g| g.aji),
            pq: sum(|g| g.pq),
            sq: sum(|g| g.sq),
            rq: sum(|g| g.rq),
            dice: sum(|g| g.dice),
            images: groups.iter().map(|g| g.images).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Sorted by organ name.
    pub per_organ: Vec<(String, MetricMeans)>,
    /// Sorted by fold index; empty when no report carries a fold.
    pub per_fold: Vec<(usize, MetricMeans)>,
    /// Unweighted mean of the per-fold means, or of the per-organ means without folds.
    pub overall: MetricMeans,
}

pub fn aggregate_reports(reports: &[ImageReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    let mut organs: BTreeMap<&str, Vec<&MetricReport>> = BTreeMap::new();
    let mut folds: BTreeMap<usize, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        organs.entry(&r.organ).or_default().push(&r.metrics);
        if let Some(f) = r.fold {
            folds.entry(f).or_default().push(&r.metrics);
        }
    }
    let per_organ: Vec<(String, MetricMeans)> = organs
        .into_iter()
        .map(|(o, rs)| (o.to_string(), MetricMeans::of(rs)))
        .collect();
    let per_fold: Vec<(usize, MetricMeans)> = folds
        .into_iter()
        .map(|(f, rs)| (f, MetricMeans::of(rs)))
        .collect();
    let groups: Vec<MetricMeans> = if per_fold.is_empty() {
        per_organ.iter().map(|(_, m)| *m).collect()
    } else {
        per_fold.iter().map(|(_, m)| *m).collect()
    };
    Ok(Aggregate {
        overall: MetricMeans::mean_of(&groups),
        per_organ,
        per_fold,
    })
}
