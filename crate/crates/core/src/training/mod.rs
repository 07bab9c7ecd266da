//! Loss, optimizer, schedule, training loop and checkpoints.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod trainer;

use std::f64::consts::PI;
use std::path::PathBuf;

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::tensor::{Scalar, Tensor};

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError, TrainingState};
pub use trainer::{EpochRecord, Trainer};

/// Mean of squared differences over all elements.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let diff = pred.sub(target)?;
    Ok(diff.energy() / diff.numel().max(1) as f64)
}

/// Cosine annealing from `lr_init` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: f64, total: f64, lr_init: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * t / total).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Noise level in 8-bit units.
    pub sigma: f64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch: usize,
    /// Patch grid step; defaults to the patch size.
    pub stride: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Held-out evaluation and checkpoint interval, in epochs.
    pub eval_every: usize,
    pub train_dir: Option<PathBuf>,
    /// Optional glob on file names inside `train_dir`.
    pub pattern: Option<String>,
    pub heldout_fraction: f64,
    /// Random dihedral transform per patch.
    pub augment: bool,
    /// Random zoom before the dihedral transform.
    pub rescale: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Batches averaged into fresh batch norm statistics before each
    /// held-out evaluation; 0 keeps the running averages.
    pub bn_recalibrate: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 25.0,
            lr_init: 1e-3,
            lr_min: 1e-6,
            epochs: 20,
            batch_size: 16,
            patch: 128,
            stride: 128,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 1,
            train_dir: None,
            pattern: None,
            heldout_fraction: 0.1,
            augment: true,
            rescale: false,
            grad_clip: None,
            bn_recalibrate: 50,
            model: ModelConfig::ignet(),
        }
    }
}

pub const TRAIN_KEYS: [&str; 24] = [
    "sigma",
    "lr_init",
    "lr_min",
    "epochs",
    "batch_size",
    "patch",
    "stride",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "eval_every",
    "train_dir",
    "pattern",
    "heldout_fraction",
    "augment",
    "rescale",
    "grad_clip",
    "bn_recalibrate",
    "channels",
    "stages",
    "fe_blocks",
    "dec_blocks",
    "variant",
];

impl TrainConfig {
    /// Overlays every key present in `kv` onto `self`. Unknown keys are
    /// rejected by name.
    pub fn apply(&mut self, kv: &KvFile) -> Result<()> {
        kv.check_known(&TRAIN_KEYS)?;
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!(self.sigma, "sigma");
        set!(self.lr_init, "lr_init");
        set!(self.lr_min, "lr_min");
        set!(self.epochs, "epochs");
        set!(self.batch_size, "batch_size");
        if let Some(p) = kv.parsed("patch")? {
            self.patch = p;
            if kv.get("stride").is_none() {
                self.stride = p;
            }
        }
        set!(self.stride, "stride");
        set!(self.adam.beta1, "beta1");
        set!(self.adam.beta2, "beta2");
        set!(self.adam.eps, "adam_eps");
        set!(self.seed, "seed");
        set!(self.eval_every, "eval_every");
        set!(self.heldout_fraction, "heldout_fraction");
        set!(self.augment, "augment");
        set!(self.rescale, "rescale");
        set!(self.bn_recalibrate, "bn_recalibrate");
        set!(self.model.channels, "channels");
        set!(self.model.stages, "stages");
        set!(self.model.fe_blocks, "fe_blocks");
        set!(self.model.dec_blocks, "dec_blocks");
        if let Some(dir) = kv.get("train_dir") {
            self.train_dir = Some(PathBuf::from(dir));
        }
        if let Some(p) = kv.get("pattern") {
            self.pattern = Some(p.to_string());
        }
        if let Some(c) = kv.parsed::<f64>("grad_clip")? {
            self.grad_clip = (c > 0.0).then_some(c);
        }
        if let Some(v) = kv.get("variant") {
            self.model.variant = v.parse::<Variant>().map_err(Error::Config)?;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_init && self.lr_init.is_finite()) {
            return bad(format!(
                "need 0 < lr_min < lr_init, got lr_min={} lr_init={}",
                self.lr_min, self.lr_init
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.stride == 0 {
            return bad("batch_size, eval_every and stride must be at least 1".into());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            ));
        }
        let m = self.model.size_multiple();
        if self.patch == 0 || !self.patch.is_multiple_of(m) {
            return bad(format!(
                "patch {} must be a positive multiple of {m} for {} stages",
                self.patch, self.model.stages
            ));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad(format!(
                "heldout_fraction must be in [0, 1), got {}",
                self.heldout_fraction
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Every setting as config-file lines; `from_kv` of the parsed text gives
    /// back an equal configuration.
    pub fn to_text(&self) -> String {
        let mut kv = KvFile::default();
        kv.set("sigma", self.sigma);
        kv.set("lr_init", self.lr_init);
        kv.set("lr_min", self.lr_min);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("patch", self.patch);
        kv.set("stride", self.stride);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv.set("heldout_fraction", self.heldout_fraction);
        kv.set("augment", self.augment);
        kv.set("rescale", self.rescale);
        kv.set("grad_clip", self.grad_clip.unwrap_or(0.0));
        kv.set("bn_recalibrate", self.bn_recalibrate);
        kv.set("channels", self.model.channels);
        kv.set("stages", self.model.stages);
        kv.set("fe_blocks", self.model.fe_blocks);
        kv.set("dec_blocks", self.model.dec_blocks);
        kv.set("variant", self.model.variant);
        if let Some(d) = &self.train_dir {
            kv.set("train_dir", d.display());
        }
        if let Some(p) = &self.pattern {
            kv.set("pattern", p);
        }
        kv.to_text()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(epoch as f64, self.epochs as f64, self.lr_init, self.lr_min)
    }
}
