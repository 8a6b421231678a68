//! Flat run configuration. Every default is written out by [`TrainConfig::to_toml`]
//! so a saved config documents the whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schedule::SchedulerKind;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::filters::Boundary;
use crate::losses::{LossWeights, SegStLoss};
use crate::model::NetworkConfig;
use crate::postprocess::{PostprocessParams, SmoothingParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // data and outputs
    /// Dataset root holding `images/` and `masks/`.
    pub data_root: PathBuf,
    /// Optional fold file from `prepare`; folds are derived from the data when absent.
    pub folds_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub contour_thickness: usize,

    // optimisation
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a hold-out AJI improvement before stopping; 0 disables.
    pub patience: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub scheduler: SchedulerKind,
    /// Per-epoch decay factor of the exponential schedule.
    pub exp_decay: f64,
    /// Multiplicative step of the plateau schedule.
    pub plateau_factor: f64,
    /// Epochs without training-loss improvement before the plateau schedule steps down.
    pub plateau_patience: usize,
    /// Cycle length in epochs for the restarting cosine schedule.
    pub restart_period: usize,
    /// Cap on gradient steps per epoch; 0 runs every training patch once.
    pub steps_per_epoch: usize,

    // loss
    pub weight_rgb: f64,
    pub weight_h: f64,
    pub weight_seg_st: f64,
    pub weight_seg_sd: f64,
    pub seg_st_loss: SegStLoss,

    // network
    pub depth: usize,
    pub base_channels: usize,
    pub growth_rate: usize,
    pub input_size: usize,
    pub seg_raw_input: bool,

    // augmentation
    pub flip_prob: f64,
    pub mirror_prob: f64,
    pub rotate: bool,
    pub crop_prob: f64,
    pub crop_size: usize,
    pub elastic_prob: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,

    // post-processing
    pub smoothing_sigma: f64,
    pub smoothing_boundary: Boundary,
    pub fg_threshold: f64,
    pub contour_threshold: f64,
    pub min_instance_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let aug = AugmentConfig::default();
        let post = PostprocessParams::default();
        let w = LossWeights::default();
        Self {
            data_root: PathBuf::from("data"),
            folds_file: None,
            output_dir: PathBuf::from("runs"),
            contour_thickness: crate::data::DEFAULT_CONTOUR_THICKNESS,
            seed: 0,
            batch_size: 10,
            epochs: 100,
            patience: 20,
            lr_min: 0.001,
            lr_max: 0.002,
            scheduler: SchedulerKind::CosineAnnealing,
            exp_decay: 0.95,
            plateau_factor: 0.5,
            plateau_patience: 5,
            restart_period: 10,
            steps_per_epoch: 0,
            weight_rgb: w.rgb,
            weight_h: w.h,
            weight_seg_st: w.seg_st,
            weight_seg_sd: w.seg_sd,
            seg_st_loss: SegStLoss::default(),
            depth: net.depth,
            base_channels: net.base_channels,
            growth_rate: net.growth_rate,
            input_size: net.input_size,
            seg_raw_input: net.seg_raw_input,
            flip_prob: aug.flip_prob,
            mirror_prob: aug.mirror_prob,
            rotate: aug.rotate,
            crop_prob: aug.crop_prob,
            crop_size: aug.crop_size,
            elastic_prob: aug.elastic_prob,
            elastic_alpha: aug.elastic_alpha,
            elastic_sigma: aug.elastic_sigma,
            smoothing_sigma: post.smoothing.sigma,
            smoothing_boundary: post.smoothing.boundary,
            fg_threshold: post.fg_threshold,
            contour_threshold: post.contour_threshold,
            min_instance_size: post.min_instance_size,
        }
    }
}

impl TrainConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_root = base.join(&cfg.data_root);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.folds_file = cfg.folds_file.map(|f| base.join(f));
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Every sub-configuration is checked; failures are reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::InvalidArgument(m) | Error::Config(m) => Error::Config(m),
            other => other,
        };
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.exp_decay > 0.0 && self.exp_decay <= 1.0) {
            return Err(Error::Config(format!("exp_decay must lie in (0, 1], got {}", self.exp_decay)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.restart_period == 0 {
            return Err(Error::Config("restart_period must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.contour_thickness == 0 {
            return Err(Error::Config("contour_thickness must be at least 1".into()));
        }
        self.network().validate().map_err(config)?;
        self.loss_weights().validate().map_err(config)?;
        self.augmentation().validate().map_err(config)?;
        self.postprocess().validate().map_err(config)
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            growth_rate: self.growth_rate,
            input_size: self.input_size,
            seg_raw_input: self.seg_raw_input,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            rgb: self.weight_rgb,
            h: self.weight_h,
            seg_st: self.weight_seg_st,
            seg_sd: self.weight_seg_sd,
        }
    }

    pub fn augmentation(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            mirror_prob: self.mirror_prob,
            rotate: self.rotate,
            crop_prob: self.crop_prob,
            crop_size: self.crop_size,
            elastic_prob: self.elastic_prob,
            elastic_alpha: self.elastic_alpha,
            elastic_sigma: self.elastic_sigma,
        }
    }

    pub fn postprocess(&self) -> PostprocessParams {
        PostprocessParams {
            smoothing: SmoothingParams {
                sigma: self.smoothing_sigma,
                boundary: self.smoothing_boundary,
            },
            fg_threshold: self.fg_threshold,
            contour_threshold: self.contour_threshold,
            min_instance_size: self.min_instance_size,
        }
    }

    /// SHA-256 over everything that affects results; output locations are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
