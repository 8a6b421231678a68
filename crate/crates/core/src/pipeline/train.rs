//! Gradient steps, the per-fold training loop and its run record.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::infer_image;
use super::schedule::LrSchedule;
use super::TrainConfig;
use crate::data::{augment, crop_into_patches, AugmentedExample, Fold, Patch, PatchOptions, Provenance, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss_grad, HeadMaps, LossBreakdown, LossWeights, SegStLoss};
use crate::metrics::{evaluate_pair, MetricMeans};
use crate::model::{input_tensors, Checkpoint, NetworkConfig, TripleUNet};
use crate::nn::{Adam, Tape, Tensor};
use crate::postprocess::PostprocessParams;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUN_RECORD: &str = "run.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";

/// Mixes a base seed with indices into an independent 64-bit seed (SplitMix64 finaliser).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts
        .iter()
        .fold(mix(base), |acc, &p| mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p) ^ acc.rotate_left(17)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Dice between the thresholded segmentation head and its target, before the update.
    pub seg_dice: f64,
}

/// A network with its optimiser and loss settings.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: TripleUNet,
    optimizer: Adam,
    weights: LossWeights,
    seg_st: SegStLoss,
}

impl Trainer {
    pub fn new(network: NetworkConfig, seed: u64, weights: LossWeights, seg_st: SegStLoss) -> Result<Self> {
        weights.validate()?;
        let model = TripleUNet::new(network, seed)?;
        let optimizer = Adam::new(model.params());
        Ok(Self {
            model,
            optimizer,
            weights,
            seg_st,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(cfg.network(), cfg.seed, cfg.loss_weights(), cfg.seg_st_loss)
    }

    pub fn model(&self) -> &TripleUNet {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn into_parts(self) -> (TripleUNet, Adam) {
        (self.model, self.optimizer)
    }

    /// Forward, loss, backward and one optimiser update. Nothing is updated when the
    /// loss or any gradient is non-finite.
    pub fn step(&mut self, batch: &[&AugmentedExample], lr: f64) -> Result<StepOutcome> {
        let pairs: Vec<_> = batch.iter().map(|e| (&e.image, &e.hematoxylin)).collect();
        let (rgb, hem) = input_tensors(&pairs)?;
        let as_f64 = |b: &bool| if *b { 1.0 } else { 0.0 };
        let seg_target: Vec<f64> = batch.iter().flat_map(|e| e.seg_target.iter().map(as_f64)).collect();
        let contour_target: Vec<f64> = batch.iter().flat_map(|e| e.contour_target.iter().map(as_f64)).collect();

        let (outcome, grads) = {
            let tape = Tape::new(self.model.params());
            let out = self.model.forward(&tape, &tape.constant(rgb), &tape.constant(hem))?;
            let probs = |t: &Tensor| t.iter().map(|&v| v as f64).collect::<Vec<f64>>();
            let (p_rgb, p_contour, p_seg) = (probs(out.rgb.value()), probs(out.contour.value()), probs(out.seg.value()));
            let maps = HeadMaps {
                rgb_prob: &p_rgb,
                contour_prob: &p_contour,
                seg_prob: &p_seg,
                seg_target: &seg_target,
                contour_target: &contour_target,
            };
            let (losses, head_grads) = total_loss_grad(maps, &self.weights, self.seg_st)?;
            if !losses.is_finite() {
                return Err(non_finite(format!("loss terms {losses:?}")));
            }
            let outcome = StepOutcome {
                losses,
                seg_dice: binary_dice(&p_seg, &seg_target),
            };
            let shape = out.seg.value().raw_dim();
            let seed = |g: Vec<f64>| {
                Array4::from_shape_vec(shape.clone(), g.into_iter().map(|v| v as f32).collect())
                    .expect("gradient matches head shape")
            };
            let grads = tape.backward(vec![
                (&out.rgb, seed(head_grads.rgb)),
                (&out.contour, seed(head_grads.contour)),
                (&out.seg, seed(head_grads.seg)),
            ]);
            (outcome, grads)
        };
        if !grads.is_finite() {
            return Err(non_finite("parameter gradients are not finite".into()));
        }
        self.optimizer.step(self.model.params_mut(), &grads, lr as f32);
        Ok(outcome)
    }
}

fn non_finite(detail: String) -> Error {
    Error::NonFinite {
        epoch: 0,
        step: 0,
        detail,
    }
}

/// Dice of `prob ≥ 0.5` against a 0/1 target; 1 when both are empty.
pub fn binary_dice(prob: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut sum) = (0usize, 0usize);
    for (&p, &t) in prob.iter().zip(target) {
        let (p, t) = (p >= 0.5, t >= 0.5);
        inter += (p && t) as usize;
        sum += p as usize + t as usize;
    }
    if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean of every step's loss terms.
    pub losses: LossBreakdown,
    pub train_dice: f64,
    /// Every sample whose patches were used in this epoch.
    pub sample_ids: Vec<String>,
    pub validation: Option<MetricMeans>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: PathBuf,
    pub holdout_aji: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub organ: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_epoch: Option<usize>,
    pub best_holdout_aji: Option<f64>,
    pub stopped_early: bool,
    pub completed: bool,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Path of the checkpoint holding the best weights.
    pub fn best_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(|c| c.path.as_path())
    }

    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.epochs.iter().map(|e| e.losses).collect()
    }

    /// Epoch indices run 0, 1, 2, ... and the record belongs to `config_hash`.
    pub fn check(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Integrity(format!(
                "run record of fold {} was produced by config {}, not {config_hash}",
                self.fold, self.config_hash
            )));
        }
        if self.epochs.iter().enumerate().any(|(i, e)| e.epoch != i) {
            return Err(Error::Integrity(format!("fold {}: epochs are not consecutive", self.fold)));
        }
        Ok(())
    }

    /// No hold-out id appears anywhere in the training log.
    pub fn holdout_isolated(&self) -> bool {
        let holdout: BTreeSet<&str> = self.holdout_ids.iter().map(String::as_str).collect();
        self.train_ids.iter().all(|id| !holdout.contains(id.as_str()))
            && self
                .epochs
                .iter()
                .all(|e| e.sample_ids.iter().all(|id| !holdout.contains(id.as_str())))
    }
}

/// Context written when training aborts on a non-finite value.
#[derive(Debug, Serialize)]
struct Diagnostics<'a> {
    fold: usize,
    epoch: usize,
    step: usize,
    lr: f64,
    detail: &'a str,
    batch: Vec<&'a Provenance>,
    config_hash: &'a str,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<&'a Sample>> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Integrity(format!("sample {id} is listed in the fold but was not loaded")))
        })
        .collect()
}

/// Mean metrics of a model on whole hold-out images.
pub fn validate_on(model: &TripleUNet, samples: &[&Sample], params: &PostprocessParams) -> Result<MetricMeans> {
    let mut sums = MetricMeans::default();
    for s in samples {
        let pred = infer_image(model, &s.image, params)?.labels;
        let m = evaluate_pair(&s.instances, &pred)?;
        sums.aji += m.aji;
        sums.pq += m.pq;
        sums.sq += m.sq;
        sums.rq += m.rq;
        sums.dice += m.dice;
    }
    let n = samples.len().max(1) as f64;
    Ok(MetricMeans {
        aji: sums.aji / n,
        pq: sums.pq / n,
        sq: sums.sq / n,
        rq: sums.rq / n,
        dice: sums.dice / n,
        images: samples.len(),
    })
}

/// Trains one fold and writes `best.ckpt` and `run.json` under `out_dir`.
///
/// The checkpoint is rewritten whenever the hold-out AJI improves; without hold-out
/// images the latest epoch is kept. The run record is rewritten after every epoch.
pub fn train_fold(
    samples: &[Sample],
    fold: &Fold,
    fold_index: usize,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    if fold.train.is_empty() {
        return Err(Error::invalid(format!("fold {fold_index} has an empty training set")));
    }
    if let Some(id) = fold.train.iter().find(|id| fold.holdout.contains(id)) {
        return Err(Error::Integrity(format!("{id} is both a training and a hold-out sample")));
    }
    let train = select(samples, &fold.train)?;
    let holdout = select(samples, &fold.holdout)?;
    let options = PatchOptions {
        output_size: cfg.input_size,
        ..PatchOptions::default()
    };
    let mut patches: Vec<Patch> = Vec::new();
    for s in &train {
        patches.extend(crop_into_patches(s, &options)?);
    }

    let config_hash = cfg.hash();
    let post = cfg.postprocess();
    let aug = cfg.augmentation();
    let mut trainer = Trainer::from_config(cfg)?;
    let mut schedule = LrSchedule::from_config(cfg);
    let full_pass = patches.len().div_ceil(cfg.batch_size);
    let steps = if cfg.steps_per_epoch == 0 {
        full_pass
    } else {
        cfg.steps_per_epoch
    };
    let mut record = RunRecord {
        fold: fold_index,
        organ: fold.organ.clone(),
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        train_ids: fold.train.clone(),
        holdout_ids: fold.holdout.clone(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        best_epoch: None,
        best_holdout_aji: None,
        stopped_early: false,
        completed: false,
        wall_clock_seconds: 0.0,
    };
    let ckpt_path = out_dir.join(BEST_CHECKPOINT);
    let metadata = serde_json::json!({
        "fold": fold_index,
        "organ": fold.organ,
        "config_hash": config_hash,
        "postprocess": post,
    });
    let mut stale = 0usize;
    let mut order: Vec<usize> = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = schedule.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fold_index as u64, epoch as u64]));
        let mut sums = LossBreakdown::default();
        let mut dice = 0.0;
        let mut seen = BTreeSet::new();
        for step in 0..steps {
            let batch_ids: Vec<usize> = (0..cfg.batch_size.min(patches.len()))
                .map(|_| {
                    if order.is_empty() {
                        order = (0..patches.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    order.pop().expect("refilled above")
                })
                .collect();
            let batch = batch_ids
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let seed = derive_seed(cfg.seed, &[fold_index as u64, epoch as u64, step as u64, slot as u64]);
                    augment(&patches[i], seed, &aug)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&AugmentedExample> = batch.iter().collect();
            let outcome = match trainer.step(&refs, lr) {
                Ok(o) => o,
                Err(Error::NonFinite { detail, .. }) => {
                    let diag = Diagnostics {
                        fold: fold_index,
                        epoch,
                        step,
                        lr,
                        detail: &detail,
                        batch: batch.iter().map(|e| &e.provenance).collect(),
                        config_hash: &config_hash,
                    };
                    write_json(&out_dir.join(DIAGNOSTICS), &diag)?;
                    record.wall_clock_seconds = started.elapsed().as_secs_f64();
                    record.save(&out_dir.join(RUN_RECORD))?;
                    return Err(Error::NonFinite { epoch, step, detail });
                }
                Err(e) => return Err(e),
            };
            for e in &batch {
                seen.insert(e.provenance.sample_id.clone());
            }
            let l = outcome.losses;
            sums.rgb += l.rgb;
            sums.h += l.h;
            sums.seg_st += l.seg_st;
            sums.seg_sd += l.seg_sd;
            sums.total += l.total;
            dice += outcome.seg_dice;
        }
        let n = steps.max(1) as f64;
        let losses = LossBreakdown {
            rgb: sums.rgb / n,
            h: sums.h / n,
            seg_st: sums.seg_st / n,
            seg_sd: sums.seg_sd / n,
            total: sums.total / n,
        };
        schedule.end_epoch(losses.total);

        let validation = if holdout.is_empty() {
            None
        } else {
            Some(validate_on(trainer.model(), &holdout, &post)?)
        };
        let score = validation.as_ref().map(|v| v.aji);
        let improved = match (score, record.best_holdout_aji) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(s), Some(best)) => s > best,
        };
        if improved {
            Checkpoint::from_model(
                trainer.model(),
                Some(trainer.optimizer()),
                epoch + 1,
                cfg.seed,
                metadata.clone(),
            )
            .save(&ckpt_path)?;
            record.checkpoints.push(CheckpointRecord {
                epoch,
                path: ckpt_path.clone(),
                holdout_aji: score,
            });
            record.best_epoch = Some(epoch);
            record.best_holdout_aji = score;
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!(
            "fold {fold_index} epoch {epoch}: lr {lr:.2e} loss {:.4} (rgb {:.4} h {:.4} seg {:.4}+{:.4}) dice {:.3}{}",
            losses.total,
            losses.rgb,
            losses.h,
            losses.seg_st,
            losses.seg_sd,
            dice / n,
            score.map(|a| format!(" hold-out AJI {a:.4}")).unwrap_or_default()
        );
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            steps,
            losses,
            train_dice: dice / n,
            sample_ids: seen.into_iter().collect(),
            validation,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        record.wall_clock_seconds = started.elapsed().as_secs_f64();
        record.save(&out_dir.join(RUN_RECORD))?;
        if cfg.patience > 0 && stale >= cfg.patience && epoch + 1 < cfg.epochs {
            log::info!("fold {fold_index}: no hold-out improvement for {stale} epochs, stopping");
            record.stopped_early = true;
            break;
        }
    }
    record.completed = true;
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    record.save(&out_dir.join(RUN_RECORD))?;
    Ok(record)
}

/// Loads the checkpointed model of a finished fold.
pub fn load_best(record: &RunRecord) -> Result<TripleUNet> {
    let path = record
        .best_checkpoint()
        .ok_or_else(|| Error::Integrity(format!("fold {} has no checkpoint", record.fold)))?;
    Checkpoint::load(path)?.into_model().map(|(m, _)| m)
}
