//! Leave-one-organ-out cross-validation: every fold is trained, its hold-out images
//! labelled and scored, and the results are summarised in per-fold, per-organ and
//! overall tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_sets, write_report};
use super::infer::infer_image;
use super::train::{load_best, train_fold, write_json, RunRecord};
use super::TrainConfig;
use crate::data::{io, load_dataset_with, make_folds, FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::metrics::reference::{organ_scores, BASELINE_AJI, BASELINE_PQ, TRIPLE_UNET_AJI, TRIPLE_UNET_PQ};
use crate::metrics::{aggregate_reports, Aggregate, ImageReport, MetricMeans};

pub const FOLD_RESULT: &str = "result.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const REPORT_FILE: &str = "crossval_report.csv";
pub const SUMMARY_FILE: &str = "crossval.md";

/// Everything kept from one finished fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub organ: String,
    pub config_hash: String,
    pub record: RunRecord,
    pub reports: Vec<ImageReport>,
}

impl FoldResult {
    pub fn means(&self) -> MetricMeans {
        aggregate_reports(&self.reports)
            .map(|a| a.overall)
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct CrossvalOutcome {
    pub folds: Vec<FoldResult>,
    /// Folds whose stored result matched the config and were not rerun.
    pub skipped: Vec<usize>,
    pub aggregate: Aggregate,
    pub tables: Vec<Table>,
}

/// A small titled table written both as CSV and as Markdown.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut out = format!("### {}\n\n", self.title);
        out += &line(&self.header);
        out += &line(&vec!["---".to_string(); self.header.len()]);
        for r in &self.rows {
            out += &line(r);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".into())
}

/// Organ-wise comparison: baseline and measured AJI and PQ in percent.
pub fn organ_table(aggregate: &Aggregate) -> Table {
    let mut rows: Vec<Vec<String>> = aggregate
        .per_organ
        .iter()
        .map(|(organ, m)| {
            let reference = organ_scores(organ);
            vec![
                organ.clone(),
                opt_pct(reference.map(|r| r.0)),
                pct(m.aji),
                opt_pct(reference.map(|r| r.2)),
                pct(m.pq),
            ]
        })
        .collect();
    let n = aggregate.per_organ.len().max(1) as f64;
    let mean = |f: fn(&MetricMeans) -> f64| aggregate.per_organ.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    rows.push(vec![
        "Average".into(),
        pct(BASELINE_AJI),
        pct(mean(|m| m.aji)),
        pct(BASELINE_PQ),
        pct(mean(|m| m.pq)),
    ]);
    Table {
        name: "organ_table".into(),
        title: "Organ-wise comparison with the baseline (%)".into(),
        header: ["Organ", "AJI baseline", "AJI measured", "PQ baseline", "PQ measured"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Score {
    Aji,
    Pq,
}

/// Fold-wise comparison of one score, as fractions.
pub fn fold_table(score: Score, folds: &[FoldResult]) -> Table {
    let pick = |m: &MetricMeans| match score {
        Score::Aji => m.aji,
        Score::Pq => m.pq,
    };
    let baseline = |organ: &str| {
        organ_scores(organ).map(|r| match score {
            Score::Aji => r.0,
            Score::Pq => r.2,
        })
    };
    let mut rows: Vec<Vec<String>> = folds
        .iter()
        .map(|f| {
            vec![
                f.fold.to_string(),
                baseline(&f.organ).map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into()),
                format!("{:.6}", pick(&f.means())),
            ]
        })
        .collect();
    let n = folds.len().max(1) as f64;
    let measured = folds.iter().map(|f| pick(&f.means())).sum::<f64>() / n;
    let (name, title, base) = match score {
        Score::Aji => ("fold_aji", "AJI per fold", BASELINE_AJI),
        Score::Pq => ("fold_pq", "PQ per fold", BASELINE_PQ),
    };
    rows.push(vec!["AVERAGE".into(), format!("{base}"), format!("{measured:.6}")]);
    Table {
        name: name.into(),
        title: title.into(),
        header: ["Fold", "Baseline", "Measured"].map(String::from).to_vec(),
        rows,
    }
}

/// Headline comparison in percent: baseline, published three-branch, this run.
pub fn summary_table(overall: &MetricMeans) -> Table {
    Table {
        name: "summary".into(),
        title: "Performance summary (%)".into(),
        header: ["Model", "AJI", "PQ"].map(String::from).to_vec(),
        rows: vec![
            vec!["U-Net baseline".into(), pct(BASELINE_AJI), pct(BASELINE_PQ)],
            vec![
                "Triple U-Net (published)".into(),
                pct(TRIPLE_UNET_AJI),
                pct(TRIPLE_UNET_PQ),
            ],
            vec!["Triple U-Net (this run)".into(), pct(overall.aji), pct(overall.pq)],
        ],
    }
}

/// Folds from the configured fold file, or derived from the samples.
pub fn load_split(cfg: &TrainConfig, samples: &[Sample]) -> Result<FoldSplit> {
    let split = match &cfg.folds_file {
        Some(path) => {
            let split = FoldSplit::load(path)?;
            split.validate()?;
            split
        }
        None => make_folds(samples).map_err(|e| Error::Config(format!("dataset cannot be split into folds: {e}")))?,
    };
    for f in &split.folds {
        for id in f.holdout.iter().chain(&f.train) {
            if !samples.iter().any(|s| &s.id == id) {
                return Err(Error::Integrity(format!("fold sample {id} is not in the dataset")));
            }
        }
    }
    Ok(split)
}

pub fn fold_dir(cfg: &TrainConfig, fold: usize) -> PathBuf {
    cfg.output_dir.join(format!("fold_{fold}"))
}

/// Trains fold `k`, labels its hold-out images and scores them.
pub fn run_fold(samples: &[Sample], split: &FoldSplit, k: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    let fold = split.get(k)?;
    let dir = fold_dir(cfg, k);
    let record = train_fold(samples, fold, k, cfg, &dir)?;
    let model = load_best(&record)?;
    let post = cfg.postprocess();
    let mut predictions = std::collections::BTreeMap::new();
    let mut truth = std::collections::BTreeMap::new();
    for id in &fold.holdout {
        let s = samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Integrity(format!("hold-out sample {id} is not in the dataset")))?;
        let labels = infer_image(&model, &s.image, &post)?.labels;
        io::write_labels(&dir.join(PREDICTIONS_DIR).join(format!("{id}.png")), &labels)?;
        predictions.insert(id.clone(), labels);
        truth.insert(id.clone(), s.instances.clone());
    }
    let reports = evaluate_sets(&predictions, &truth, Some(split))?;
    let result = FoldResult {
        fold: k,
        organ: fold.organ.clone(),
        config_hash: cfg.hash(),
        record,
        reports,
    };
    write_json(&dir.join(FOLD_RESULT), &result)?;
    Ok(result)
}

/// A stored fold result produced by the same configuration, if any.
fn completed_fold(cfg: &TrainConfig, k: usize) -> Option<FoldResult> {
    let path = fold_dir(cfg, k).join(FOLD_RESULT);
    let bytes = std::fs::read(path).ok()?;
    let result: FoldResult = serde_json::from_slice(&bytes).ok()?;
    let hash = cfg.hash();
    (result.config_hash == hash && result.record.completed && result.record.check(&hash).is_ok()).then_some(result)
}

/// Runs every fold, reusing stored results, and writes the report and tables.
pub fn crossval(cfg: &TrainConfig) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let samples = load_dataset_with(&cfg.data_root, cfg.contour_thickness)?;
    let split = load_split(cfg, &samples)?;
    let mut folds = Vec::with_capacity(split.len());
    let mut skipped = Vec::new();
    for k in 0..split.len() {
        if let Some(done) = completed_fold(cfg, k) {
            log::info!("fold {k} ({}) already complete, skipping", done.organ);
            skipped.push(k);
            folds.push(done);
            continue;
        }
        log::info!("fold {k}: holding out {:?}", split.folds[k].holdout);
        folds.push(run_fold(&samples, &split, k, cfg)?);
    }
    let reports: Vec<ImageReport> = folds.iter().flat_map(|f| f.reports.iter().cloned()).collect();
    let aggregate = aggregate_reports(&reports)?;
    let tables = vec![
        summary_table(&aggregate.overall),
        organ_table(&aggregate),
        fold_table(Score::Aji, &folds),
        fold_table(Score::Pq, &folds),
    ];
    let out = &cfg.output_dir;
    write_report(&out.join(REPORT_FILE), &reports, &aggregate)?;
    let mut markdown = String::new();
    for t in &tables {
        t.write_csv(&out.join(format!("{}.csv", t.name)))?;
        markdown += &t.to_markdown();
        markdown.push('\n');
    }
    std::fs::write(out.join(SUMMARY_FILE), &markdown).map_err(|e| Error::io(out.join(SUMMARY_FILE), e))?;
    Ok(CrossvalOutcome {
        folds,
        skipped,
        aggregate,
        tables,
    })
}
