//! The training loop.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::{Eager, Graph};
use crate::data::{self, ImageSample, NoiseSpec};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::{ignet_forward, ModelParams};
use crate::ops::{BatchStats, Mode};
use crate::tensor::Tensor;
use crate::training::adam::{clip_grad_norm, Adam};
use crate::training::checkpoint::{Checkpoint, TrainingState};
use crate::training::TrainConfig;

/// Mixed into the run seed for weight initialization, so the data stream and
/// the initial weights are independent.
const INIT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
/// Base seed for the fixed held-out noise realizations.
const HELDOUT_SALT: u64 = 0xD1B5_4A32_D192_ED03;
/// Mixed with the run seed and epoch for batch norm recalibration batches.
const RECALIBRATE_SALT: u64 = 0x94D0_49BB_1331_11EB;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ignt";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_psnr: Option<f64>,
    pub heldout_noisy_psnr: Option<f64>,
    pub wall_seconds: f64,
    pub batches: usize,
    /// SHA-256 over the hashes of every noisy batch of the epoch, in order.
    pub data_hash: String,
}

/// Train-mode loss, parameter gradients and batch norm statistics for one
/// batch.
pub struct StepOutput {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<f32>>,
    pub batch_stats: Vec<(String, BatchStats<f32>)>,
}

pub fn train_step(
    model: &ModelParams<f32>,
    noisy: &Tensor<f32>,
    clean: &Tensor<f32>,
) -> Result<StepOutput> {
    let mut graph = Graph::new();
    let mut fwd = model.bind(&mut graph, Mode::Train)?;
    let x = fwd.ops.input(noisy.clone());
    let pred = ignet_forward(&mut fwd, &x)?;
    let batch_stats = fwd.take_batch_stats();
    let target = graph.input(clean.clone());
    let loss = graph.mse_loss(pred, target)?;
    let loss_value = f64::from(graph.get(loss).item()?);
    if !loss_value.is_finite() {
        return Ok(StepOutput {
            loss: loss_value,
            grads: BTreeMap::new(),
            batch_stats,
        });
    }
    let record = graph.backward(loss)?;
    Ok(StepOutput {
        loss: loss_value,
        grads: record.grads,
        batch_stats,
    })
}

/// A held-out image with its fixed noisy observation.
#[derive(Debug, Clone)]
struct HeldOut {
    clean: Tensor<f32>,
    noisy: Tensor<f32>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelParams<f32>,
    pub adam: Adam,
    rng: ChaCha8Rng,
    /// Completed epochs.
    epoch: usize,
    patches: Vec<Tensor<f32>>,
    heldout: Vec<HeldOut>,
    pub log: Vec<EpochRecord>,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        train: &[ImageSample],
        heldout: &[ImageSample],
    ) -> Result<Self> {
        config.validate()?;
        let mut patches = Vec::new();
        for img in train {
            if img.height() < config.patch || img.width() < config.patch {
                warn!(
                    "{}: smaller than patch size {}, skipped",
                    img.source.display(),
                    config.patch
                );
                continue;
            }
            patches.extend(data::extract_patches(img, config.patch, config.stride));
        }
        if patches.is_empty() {
            return Err(Error::Input(format!(
                "no training patches of size {} in {} training image(s)",
                config.patch,
                train.len()
            )));
        }
        let heldout = heldout
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let clean = img.pixels.reshape([img.height(), img.width()])?;
                let spec = NoiseSpec {
                    sigma: config.sigma,
                    seed: HELDOUT_SALT.wrapping_add(i as u64),
                };
                let noisy = data::add_awgn(&clean, spec);
                Ok(HeldOut { clean, noisy })
            })
            .collect::<Result<Vec<_>>>()?;
        info!(
            "{} training patches from {} image(s), {} held-out image(s)",
            patches.len(),
            train.len(),
            heldout.len()
        );
        Ok(Trainer {
            model: ModelParams::init(config.model.clone(), config.seed ^ INIT_SALT)?,
            adam: Adam::new(config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            patches,
            heldout,
            log: Vec::new(),
            out_dir: None,
            config,
        })
    }

    /// Loads `train_dir` and splits off the held-out images.
    pub fn from_dir(config: TrainConfig) -> Result<Self> {
        let dir = config
            .train_dir
            .clone()
            .ok_or_else(|| Error::Config("`train_dir` is not set".into()))?;
        let images = data::load_dir(&dir, config.pattern.as_deref())?;
        if images.is_empty() {
            return Err(Error::Input(format!(
                "`train_dir` {} contains no images",
                dir.display()
            )));
        }
        let (train, heldout) =
            data::heldout_split(&images, |s| s.source.as_path(), config.heldout_fraction);
        Self::new(config, &train, &heldout)
    }

    /// Continues from a checkpoint written by an earlier run with the same
    /// configuration and data.
    pub fn resume(mut self, checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.model.config != self.config.model {
            return Err(Error::Config(
                "checkpoint model configuration differs from the training configuration".into(),
            ));
        }
        let state = checkpoint.training.ok_or_else(|| {
            Error::Config("checkpoint has no optimizer state to resume from".into())
        })?;
        let epoch =
            usize::try_from(state.epoch).map_err(|_| Error::Config("epoch out of range".into()))?;
        if epoch > self.config.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {epoch}, past the configured {} epochs",
                self.config.epochs
            )));
        }
        self.model = checkpoint.model;
        self.adam = Adam {
            config: self.config.adam,
            ..state.adam
        };
        self.rng = state.rng;
        self.epoch = epoch;
        Ok(self)
    }

    /// Writes the log and checkpoints under `dir`. A fresh run starts a new
    /// log; a resumed run appends to it.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if self.epoch == 0 {
            let log = dir.join(LOG_FILE);
            fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
        }
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingState {
                epoch: self.epoch as u64,
                adam: self.adam.clone(),
                rng: self.rng.clone(),
            }),
        }
    }

    /// Per held-out image `(denoised PSNR, denoised SSIM, noisy PSNR)`; the
    /// denoised output is clamped to `[0, 1]`.
    pub fn heldout_scores(&self) -> Result<Vec<(f64, f64, f64)>> {
        self.heldout
            .iter()
            .map(|h| {
                let out = self.model.denoise(&h.noisy)?.clamp(0.0, 1.0);
                Ok((
                    psnr(&out, &h.clean)?,
                    ssim(&out, &h.clean)?,
                    psnr(&h.noisy, &h.clean)?,
                ))
            })
            .collect()
    }

    /// Mean held-out `(denoised PSNR, noisy PSNR)`, or `None` without
    /// held-out images.
    pub fn evaluate_heldout(&self) -> Result<Option<(f64, f64)>> {
        if self.heldout.is_empty() {
            return Ok(None);
        }
        let (mut den, mut noisy) = (0.0, 0.0);
        for h in &self.heldout {
            let out = self.model.denoise(&h.noisy)?.clamp(0.0, 1.0);
            den += psnr(&out, &h.clean)?;
            noisy += psnr(&h.noisy, &h.clean)?;
        }
        let n = self.heldout.len() as f64;
        Ok(Some((den / n, noisy / n)))
    }

    /// Replaces the batch norm running statistics with plain averages over
    /// `batches` freshly noised training batches under the current weights.
    ///
    /// Deterministic in the run seed and epoch; leaves the training stream
    /// untouched.
    pub fn recalibrate_bn(&mut self, batches: usize) -> Result<()> {
        if batches == 0 {
            return Ok(());
        }
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RECALIBRATE_SALT ^ self.epoch as u64);
        let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..batches {
            let batch: Vec<Tensor<f32>> = (0..cfg.batch_size)
                .map(|_| {
                    let p = &self.patches[rand::Rng::gen_range(&mut rng, 0..self.patches.len())];
                    if cfg.augment {
                        data::augment(p, &mut rng, cfg.rescale)
                    } else {
                        p.clone()
                    }
                })
                .collect();
            let noisy = data::add_awgn_with(&data::stack(&batch)?, cfg.sigma, &mut rng);
            let mut eager = Eager;
            let mut fwd = self.model.bind(&mut eager, Mode::Train)?;
            ignet_forward(&mut fwd, &noisy)?;
            for (prefix, st) in fwd.take_batch_stats() {
                let unbias = st.count as f64 / (st.count as f64 - 1.0).max(1.0);
                let (m, v) = sums
                    .entry(prefix)
                    .or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.mean.len()]));
                for c in 0..st.mean.len() {
                    m[c] += f64::from(st.mean[c]);
                    v[c] += f64::from(st.var[c]) * unbias;
                }
            }
        }
        let n = batches as f64;
        for (prefix, (m, v)) in sums {
            let c = m.len();
            let avg =
                |xs: Vec<f64>| Tensor::new([c], xs.into_iter().map(|x| (x / n) as f32).collect());
            self.model.buffers.insert(format!("{prefix}_mean"), avg(m)?);
            self.model.buffers.insert(format!("{prefix}_var"), avg(v)?);
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::Config(format!(
                "all {} epochs already done",
                self.config.epochs
            )));
        }
        let started = Instant::now();
        let cfg = &self.config;
        let lr = cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.patches.len()).collect();
        order.shuffle(&mut self.rng);

        let mut epoch_hash = Sha256::new();
        let (mut loss_sum, mut batches) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        data::augment(&self.patches[i], &mut self.rng, cfg.rescale)
                    } else {
                        self.patches[i].clone()
                    }
                })
                .collect();
            let clean = data::stack(&batch)?;
            let noisy = data::add_awgn_with(&clean, cfg.sigma, &mut self.rng);
            epoch_hash.update(data::tensor_hash(&noisy).as_bytes());

            let mut step = train_step(&self.model, &noisy, &clean)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: b,
                    lr,
                });
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut step.grads, max);
            }
            self.adam.step(&mut self.model.params, &step.grads, lr)?;
            self.model.apply_batch_stats(&step.batch_stats);
            loss_sum += step.loss;
            batches += 1;
        }
        self.epoch += 1;

        let due = self.epoch.is_multiple_of(self.config.eval_every) || self.is_finished();
        if due {
            self.recalibrate_bn(self.config.bn_recalibrate)?;
        }
        let eval = if due { self.evaluate_heldout()? } else { None };
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            heldout_psnr: eval.map(|e| e.0),
            heldout_noisy_psnr: eval.map(|e| e.1),
            wall_seconds: started.elapsed().as_secs_f64(),
            batches,
            data_hash: epoch_hash
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect(),
        };
        info!(
            "epoch {}/{}: lr {:.3e}, loss {:.6}, held-out {}, {:.1}s",
            record.epoch,
            self.config.epochs,
            record.lr,
            record.train_loss,
            record
                .heldout_psnr
                .map_or_else(|| "-".to_string(), |p| format!("{p:.2} dB")),
            record.wall_seconds
        );
        if let Some(dir) = &self.out_dir {
            append_record(&dir.join(LOG_FILE), &record)?;
            if due {
                self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
            }
        }
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs until `epoch` epochs are complete (capped at the configured
    /// total).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.config.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.epochs)
    }
}

fn append_record(path: &Path, record: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(record).expect("record serializes");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
