//! Scoring predicted label maps against ground truth and writing the report file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{io, organ_of, FoldSplit};
use crate::error::{Error, Result};
use crate::metrics::reference::{BASELINE_AJI, BASELINE_PQ, TRIPLE_UNET_AJI, TRIPLE_UNET_PQ};
use crate::metrics::{aggregate_reports, evaluate_pair, Aggregate, ImageReport, MetricMeans};
use crate::types::LabelMap;

/// Reference rows appended to every report: `(name, AJI, PQ)` as fractions.
pub const REFERENCE_ROWS: [(&str, f64, f64); 2] = [
    ("baseline_unet", BASELINE_AJI, BASELINE_PQ),
    ("triple_unet_published", TRIPLE_UNET_AJI, TRIPLE_UNET_PQ),
];

/// Label maps keyed by file stem. A directory with a `masks/` child is read from there.
pub fn read_label_dir(dir: &Path) -> Result<BTreeMap<String, LabelMap>> {
    let sub = dir.join("masks");
    let src = if sub.is_dir() { sub } else { dir.to_path_buf() };
    if !src.is_dir() {
        return Err(Error::Integrity(format!("missing directory {}", src.display())));
    }
    let mut out = BTreeMap::new();
    for path in io::list_images(&src)? {
        let id = io::file_stem(&path);
        if out.insert(id.clone(), io::read_labels(&path)?).is_some() {
            return Err(Error::Integrity(format!("{id} appears twice in {}", src.display())));
        }
    }
    Ok(out)
}

/// Per-image reports over id-aligned prediction and ground-truth sets.
pub fn evaluate_sets(
    predictions: &BTreeMap<String, LabelMap>,
    ground_truth: &BTreeMap<String, LabelMap>,
    folds: Option<&FoldSplit>,
) -> Result<Vec<ImageReport>> {
    if predictions.is_empty() {
        return Err(Error::invalid("the prediction set is empty"));
    }
    let missing: Vec<&str> = ground_truth
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = predictions
        .keys()
        .filter(|k| !ground_truth.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Integrity(format!(
            "prediction and ground-truth ids differ: missing predictions {missing:?}, unknown predictions {extra:?}"
        )));
    }
    predictions
        .iter()
        .map(|(id, pred)| {
            let gt = &ground_truth[id];
            if gt.dim() != pred.dim() {
                return Err(Error::Integrity(format!(
                    "{id}: prediction is {:?} but ground truth is {:?}",
                    pred.dim(),
                    gt.dim()
                )));
            }
            Ok(ImageReport {
                id: id.clone(),
                organ: organ_of(id),
                fold: folds.and_then(|f| f.fold_of(id)),
                metrics: evaluate_pair(gt, pred)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub images: Vec<ImageReport>,
    pub aggregate: Aggregate,
}

pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, folds: Option<&FoldSplit>) -> Result<Evaluation> {
    let predictions = read_label_dir(pred_dir)?;
    let ground_truth = read_label_dir(gt_dir)?;
    let images = evaluate_sets(&predictions, &ground_truth, folds)?;
    let aggregate = aggregate_reports(&images)?;
    Ok(Evaluation { images, aggregate })
}

/// Kinds of row in the report file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Image,
    Organ,
    Fold,
    Overall,
    Reference,
}

/// One line of the report file. Aggregate rows leave the count columns empty;
/// reference rows carry only AJI and PQ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub row_type: RowKind,
    pub id: String,
    pub organ: String,
    pub fold: Option<usize>,
    pub images: usize,
    pub aji: f64,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub dice: Option<f64>,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
}

impl ReportRow {
    fn from_means(row_type: RowKind, id: String, organ: String, fold: Option<usize>, m: &MetricMeans) -> Self {
        Self {
            row_type,
            id,
            organ,
            fold,
            images: m.images,
            aji: m.aji,
            pq: Some(m.pq),
            sq: Some(m.sq),
            rq: Some(m.rq),
            dice: Some(m.dice),
            tp: None,
            fp: None,
            fn_: None,
        }
    }
}

pub fn report_rows(images: &[ImageReport], aggregate: &Aggregate) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = images
        .iter()
        .map(|r| ReportRow {
            row_type: RowKind::Image,
            id: r.id.clone(),
            organ: r.organ.clone(),
            fold: r.fold,
            images: 1,
            aji: r.metrics.aji,
            pq: Some(r.metrics.pq),
            sq: Some(r.metrics.sq),
            rq: Some(r.metrics.rq),
            dice: Some(r.metrics.dice),
            tp: Some(r.metrics.tp),
            fp: Some(r.metrics.fp),
            fn_: Some(r.metrics.fn_),
        })
        .collect();
    for (organ, m) in &aggregate.per_organ {
        rows.push(ReportRow::from_means(RowKind::Organ, organ.clone(), organ.clone(), None, m));
    }
    for (fold, m) in &aggregate.per_fold {
        rows.push(ReportRow::from_means(RowKind::Fold, format!("fold_{fold}"), String::new(), Some(*fold), m));
    }
    rows.push(ReportRow::from_means(
        RowKind::Overall,
        "overall".into(),
        String::new(),
        None,
        &aggregate.overall,
    ));
    for (name, aji, pq) in REFERENCE_ROWS {
        rows.push(ReportRow {
            row_type: RowKind::Reference,
            id: name.into(),
            organ: String::new(),
            fold: None,
            images: 0,
            aji,
            pq: Some(pq),
            sq: None,
            rq: None,
            dice: None,
            tp: None,
            fp: None,
            fn_: None,
        });
    }
    rows
}

pub fn write_report(path: &Path, images: &[ImageReport], aggregate: &Aggregate) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in report_rows(images, aggregate) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn blobs(shift: usize) -> LabelMap {
        Array2::from_shape_fn((16, 16), |(y, x)| match (y, x) {
            (2..=6, 2..=6) => 1,
            (9..=13, _) if (9 + shift..=13 + shift).contains(&x) => 2,
            _ => 0,
        })
    }

    fn set(ids: &[&str], shift: usize) -> BTreeMap<String, LabelMap> {
        ids.iter().map(|id| (id.to_string(), blobs(shift))).collect()
    }

    #[test]
    fn identical_sets_score_one() {
        let gt = set(&["skin_1", "skin_2", "testis_1"], 0);
        let reports = evaluate_sets(&gt, &gt, None).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert_eq!((r.metrics.aji, r.metrics.pq, r.metrics.dice), (1.0, 1.0, 1.0));
        }
        assert_eq!(reports[2].organ, "testis");
    }

    #[test]
    fn id_mismatch_and_empty_set_are_errors() {
        let gt = set(&["skin_1", "skin_2"], 0);
        let pred = set(&["skin_1", "skin_3"], 0);
        assert!(matches!(evaluate_sets(&pred, &gt, None), Err(Error::Integrity(_))));
        assert!(matches!(evaluate_sets(&BTreeMap::new(), &gt, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn report_roundtrips_with_reference_rows() {
        let gt = set(&["skin_1", "testis_1"], 0);
        let pred = set(&["skin_1", "testis_1"], 1);
        let images = evaluate_sets(&pred, &gt, None).unwrap();
        let agg = aggregate_reports(&images).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report(&path, &images, &agg).unwrap();
        let rows = read_report(&path).unwrap();
        assert_eq!(rows, report_rows(&images, &agg));
        let kinds = |k: RowKind| rows.iter().filter(|r| r.row_type == k).count();
        assert_eq!((kinds(RowKind::Image), kinds(RowKind::Organ), kinds(RowKind::Overall)), (2, 2, 1));
        let base = rows.iter().find(|r| r.id == "baseline_unet").unwrap();
        assert!((base.aji * 100.0 - 52.5).abs() < 1e-9 && (base.pq.unwrap() * 100.0 - 47.7).abs() < 1e-9);
        let ours = rows.iter().find(|r| r.id == "triple_unet_published").unwrap();
        assert!((ours.aji * 100.0 - 67.41).abs() < 1e-9 && (ours.pq.unwrap() * 100.0 - 50.56).abs() < 1e-9);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("row_type,id,organ,fold,images,aji,pq,sq,rq,dice,tp,fp,fn\n"));
    }

    #[test]
    fn reads_mask_directories() {
        let dir = tempfile::tempdir().unwrap();
        io::write_labels(&dir.path().join("masks/skin_1.png"), &blobs(0)).unwrap();
        let m = read_label_dir(dir.path()).unwrap();
        assert_eq!(m["skin_1"], blobs(0));
    }
}
