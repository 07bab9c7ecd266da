//! The denoising network: a [Conv+BN+ReLU] feature extractor, the
//! frequency-progressive refiner (FPFR) over a Haar pyramid, and a decoder
//! that predicts the clean image directly.
//!
//! Inside the FPFR each high band `H_s` is refined by a low-frequency guided
//! refiner (LGR) fed with the low band of its own stage, and then refined
//! again every time a deeper stage produces a cleaner low band for it. With
//! three stages the refinement schedule is
//!
//! ```text
//! H0(0) = LGR(L0, H0)
//! H1(0) = LGR(L1, H1);  L0(0) = IDWT(L1, H1(0));  H0(1) = LGR(L0(0), H0(0))
//! H2(0) = LGR(L2, H2);  L1(0) = IDWT(L2, H2(0));  H1(1) = LGR(L1(0), H1(0))
//!                       L0(1) = IDWT(L1(0), H1(1)); H0(2) = LGR(L0(1), H0(1))
//! ```
//!
//! after which the deepest low band passes through a single conv (`lt`) and
//! the refined high bands are folded back in with inverse transforms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Eager, Ops};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::ops::{BatchStats, Mode, RunningStats};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet;

/// Wiring of the refiner. `NoLgr` and `NoBandSep` are the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Low-frequency guided refinement of separated high bands.
    Full,
    /// Each refiner slot becomes a plain residual block on the high bands only.
    NoLgr,
    /// All four subbands are refined together and the stacked result feeds the
    /// next DWT; stages are merged back by addition.
    NoBandSep,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoLgr, Variant::NoBandSep];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLgr => "no-lgr",
            Variant::NoBandSep => "no-band-sep",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full, no-lgr or no-band-sep)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub stages: usize,
    pub fe_blocks: usize,
    pub dec_blocks: usize,
    pub kernel_size: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::ignet()
    }
}

const CONFIG_KEYS: [&str; 6] = [
    "channels",
    "stages",
    "fe_blocks",
    "dec_blocks",
    "kernel_size",
    "variant",
];

impl ModelConfig {
    /// 32 feature channels, three DWT stages.
    pub fn ignet() -> Self {
        ModelConfig {
            channels: 32,
            stages: 3,
            fe_blocks: 4,
            dec_blocks: 4,
            kernel_size: 3,
            variant: Variant::Full,
        }
    }

    /// Same architecture with twice the feature channels.
    pub fn ignet_plus() -> Self {
        ModelConfig {
            channels: 64,
            ..Self::ignet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if !(1..=3).contains(&self.stages) {
            return Err(Error::Config(format!(
                "stages must be 1, 2 or 3, got {}",
                self.stages
            )));
        }
        if self.fe_blocks == 0 || self.dec_blocks == 0 {
            return Err(Error::Config(
                "fe_blocks and dec_blocks must be at least 1".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Inputs must have height and width divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages
    }

    pub fn to_text(&self) -> String {
        format!(
            "channels = {}\nstages = {}\nfe_blocks = {}\ndec_blocks = {}\nkernel_size = {}\nvariant = {}\n",
            self.channels, self.stages, self.fe_blocks, self.dec_blocks, self.kernel_size, self.variant
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.check_known(&CONFIG_KEYS)?;
        let need = |key: &str| -> Result<usize> {
            kv.parsed(key)?
                .ok_or_else(|| Error::Config(format!("model config is missing `{key}`")))
        };
        let variant = kv
            .get("variant")
            .map(|v| v.parse::<Variant>().map_err(Error::Config))
            .transpose()?
            .unwrap_or(Variant::Full);
        let cfg = ModelConfig {
            channels: need("channels")?,
            stages: need("stages")?,
            fe_blocks: need("fe_blocks")?,
            dec_blocks: need("dec_blocks")?,
            kernel_size: need("kernel_size")?,
            variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Refiner slots `(stage, round)` in execution order; stage `s` is refined
/// once per stage at or below it.
pub fn lgr_slots(stages: usize) -> Vec<(usize, usize)> {
    let mut slots = vec![(0, 0)];
    for s in 1..stages {
        slots.push((s, 0));
        for j in (0..s).rev() {
            slots.push((j, s - j));
        }
    }
    slots
}

fn lgr_prefix(stage: usize, round: usize) -> String {
    format!("lgr{stage}{round}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`: Kaiming-uniform with negative slope
    /// `sqrt(5)`, the usual default for convolutions.
    Kaiming {
        fan_in: usize,
    },
    Zeros,
    Ones,
    /// Identity kernel: centre tap 1 on the diagonal of `[C, C, k, k]`.
    Dirac,
    /// Every element 0.5, the middle of the `[0, 1]` intensity range.
    MidGrey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SpecBuilder {
    k: usize,
    params: Vec<ParamSpec>,
    buffers: Vec<(String, usize)>,
}

impl SpecBuilder {
    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, weight_init: Option<Init>) {
        self.conv_weight(prefix, c_in, c_out, weight_init);
        self.params.push(ParamSpec {
            name: format!("{prefix}_b"),
            shape: vec![c_out],
            init: Init::Zeros,
        });
    }

    fn conv_weight(&mut self, prefix: &str, c_in: usize, c_out: usize, init: Option<Init>) {
        let k = self.k;
        let fan_in = c_in * k * k;
        self.params.push(ParamSpec {
            name: format!("{prefix}_w"),
            shape: vec![c_out, c_in, k, k],
            init: init.unwrap_or(Init::Kaiming { fan_in }),
        });
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.params.push(ParamSpec {
            name: format!("{prefix}_gamma"),
            shape: vec![c],
            init: Init::Ones,
        });
        self.params.push(ParamSpec {
            name: format!("{prefix}_beta"),
            shape: vec![c],
            init: Init::Zeros,
        });
        self.buffers.push((prefix.to_string(), c));
    }

    /// Conv + BN + ReLU. The conv has no bias: batch norm removes any
    /// per-channel shift, so a bias there would never receive gradient.
    fn cbr(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.conv_weight(&format!("{prefix}.conv"), c_in, c_out, None);
        self.bn(&format!("{prefix}.bn"), c_out);
    }
}

fn build_specs(cfg: &ModelConfig) -> SpecBuilder {
    let c = cfg.channels;
    let mut b = SpecBuilder {
        k: cfg.kernel_size,
        params: Vec::new(),
        buffers: Vec::new(),
    };
    for i in 0..cfg.fe_blocks {
        b.cbr(&format!("fe.block{i}"), if i == 0 { 1 } else { c }, c);
    }
    match cfg.variant {
        Variant::Full | Variant::NoLgr => {
            for (s, r) in lgr_slots(cfg.stages) {
                let p = lgr_prefix(s, r);
                b.conv(&format!("{p}.conv1"), 3 * c, 3 * c, None);
                if cfg.variant == Variant::Full {
                    b.conv(&format!("{p}.conv2"), c, c, None);
                    b.conv(&format!("{p}.conv3"), 4 * c, 3 * c, None);
                } else {
                    b.conv(&format!("{p}.conv3"), 3 * c, 3 * c, None);
                }
            }
            b.conv("lt.conv", c, c, Some(Init::Dirac));
        }
        Variant::NoBandSep => {
            for s in 0..cfg.stages {
                b.conv(&format!("bs{s}.conv1"), 4 * c, 4 * c, None);
                b.conv(&format!("bs{s}.conv2"), 4 * c, 4 * c, None);
                if s + 1 < cfg.stages {
                    b.conv(&format!("bs{s}.down"), 4 * c, c, None);
                }
            }
        }
    }
    for i in 0..cfg.dec_blocks - 1 {
        b.cbr(&format!("dec.block{i}"), c, c);
    }
    b.conv(&format!("dec.block{}.conv", cfg.dec_blocks - 1), c, 1, None);
    // The output bias starts at mid-grey so the untrained network already
    // predicts the right intensity range.
    b.params.last_mut().expect("output bias").init = Init::MidGrey;
    b
}

/// Every learnable tensor of the model described by `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    build_specs(cfg).params
}

/// Batch norm layers as `(prefix, channels)`; their running statistics live
/// in the buffers `{prefix}_mean` and `{prefix}_var`.
pub fn bn_layers(cfg: &ModelConfig) -> Vec<(String, usize)> {
    build_specs(cfg).buffers
}

/// Total learnable scalar count, excluding batch norm running statistics.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(param_specs(cfg)
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum())
}

/// Named learnable tensors plus batch norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    /// `{bn prefix}_mean` / `{bn prefix}_var`; empty until the first
    /// train-mode forward or a checkpoint load.
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in param_specs(&config) {
            let t = match spec.init {
                Init::Kaiming { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| {
                        T::from_f64(rng.gen_range(-bound..bound))
                    })
                }
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
                Init::MidGrey => Tensor::full(spec.shape.clone(), T::from_f64(0.5)),
                Init::Dirac => {
                    let [co, ci, k, _] =
                        [spec.shape[0], spec.shape[1], spec.shape[2], spec.shape[3]];
                    let mid = k / 2;
                    Tensor::from_fn(spec.shape.clone(), |i| {
                        let (o, rest) = (i / (ci * k * k), i % (ci * k * k));
                        let (inp, tap) = (rest / (k * k), rest % (k * k));
                        if o == inp && o < co && tap == mid * k + mid {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                }
            };
            params.insert(spec.name, t);
        }
        Ok(ModelParams {
            config,
            params,
            buffers: BTreeMap::new(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    pub fn running_stats(&self) -> BTreeMap<String, RunningStats<T>> {
        bn_layers(&self.config)
            .into_iter()
            .filter_map(|(prefix, _)| {
                let mean = self.buffers.get(&format!("{prefix}_mean"))?;
                let var = self.buffers.get(&format!("{prefix}_var"))?;
                Some((
                    prefix,
                    RunningStats {
                        mean: mean.data().to_vec(),
                        var: var.data().to_vec(),
                    },
                ))
            })
            .collect()
    }

    /// Folds the batch statistics of one train-mode pass into the running
    /// statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let mut running = self.running_stats();
        for (prefix, batch) in stats {
            running
                .entry(prefix.clone())
                .or_insert_with(|| RunningStats::fresh(batch.mean.len()))
                .update(batch);
        }
        for (prefix, r) in running {
            let c = r.mean.len();
            self.buffers.insert(
                format!("{prefix}_mean"),
                Tensor::new([c], r.mean).expect("mean shape"),
            );
            self.buffers.insert(
                format!("{prefix}_var"),
                Tensor::new([c], r.var).expect("var shape"),
            );
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Binds every parameter into `ops` and returns a forward context.
    pub fn bind<'o, O: Ops<T>>(&self, ops: &'o mut O, mode: Mode) -> Result<Forward<'o, T, O>> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), ops.parameter(name, t.clone())?);
        }
        Ok(Forward {
            ops,
            vars,
            config: self.config.clone(),
            mode,
            running: self.running_stats(),
            batch_stats: Vec::new(),
        })
    }

    /// Eval-mode denoising of `[H, W]` or `[N, 1, H, W]` input of any size:
    /// reflect-pads to a multiple of `2^stages`, runs the network without
    /// recording, and crops back.
    pub fn denoise(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        let batched = match noisy.ndim() {
            2 => noisy.reshape([1, 1, noisy.shape()[0], noisy.shape()[1]])?,
            4 => noisy.clone(),
            _ => {
                return Err(Error::shape(format!(
                    "denoise expects [H, W] or [N, 1, H, W], got {:?}",
                    noisy.shape()
                )))
            }
        };
        let (padded, size) = wavelet::pad_to_even(&batched, self.config.stages as u32)?;
        let mut eager = Eager;
        let mut fwd = self.bind(&mut eager, Mode::Eval)?;
        let out = ignet_forward(&mut fwd, &padded)?;
        let out = wavelet::crop(&out, size)?;
        out.reshape(noisy.shape())
    }
}

/// Parameters bound into an [`Ops`] backend, ready for a forward pass.
pub struct Forward<'o, T: Scalar, O: Ops<T>> {
    pub ops: &'o mut O,
    vars: BTreeMap<String, O::Var>,
    pub config: ModelConfig,
    mode: Mode,
    running: BTreeMap<String, RunningStats<T>>,
    batch_stats: Vec<(String, BatchStats<T>)>,
}

/// Intermediate high bands of the refiner, for inspection.
#[derive(Debug, Clone)]
pub struct FpfrTrace<V> {
    /// Unrefined `H_s` straight out of the DWT, per stage.
    pub raw: Vec<V>,
    /// `H_s^(r)` keyed by `(stage, round)`.
    pub refined: BTreeMap<(usize, usize), V>,
}

impl<V> Default for FpfrTrace<V> {
    fn default() -> Self {
        FpfrTrace {
            raw: Vec::new(),
            refined: BTreeMap::new(),
        }
    }
}

impl<'o, T: Scalar, O: Ops<T>> Forward<'o, T, O> {
    /// Batch statistics gathered by train-mode batch norms, in layer order.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn var(&self, name: &str) -> Result<O::Var> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    fn conv(&mut self, prefix: &str, x: &O::Var) -> Result<O::Var> {
        let w = self.var(&format!("{prefix}_w"))?;
        let b = self.var(&format!("{prefix}_b"))?;
        self.ops.conv2d(x, &w, &b)
    }

    fn batch_norm(&mut self, prefix: &str, x: &O::Var) -> Result<O::Var> {
        let gamma = self.var(&format!("{prefix}_gamma"))?;
        let beta = self.var(&format!("{prefix}_beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.ops.batch_norm_train(x, &gamma, &beta)?;
                self.batch_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let stats = self
                    .running
                    .get(prefix)
                    .ok_or_else(|| Error::MissingRunningStats(prefix.to_string()))?;
                self.ops.batch_norm_eval(x, &gamma, &beta, stats)
            }
        }
    }

    /// Conv (no bias) + BN + ReLU.
    fn block(&mut self, prefix: &str, x: &O::Var) -> Result<O::Var> {
        let w = self.var(&format!("{prefix}.conv_w"))?;
        let c_out = self.ops.value(&w).shape()[0];
        let no_bias = self.ops.constant(Tensor::zeros([c_out]));
        let y = self.ops.conv2d(x, &w, &no_bias)?;
        let y = self.batch_norm(&format!("{prefix}.bn"), &y)?;
        Ok(self.ops.relu(&y))
    }

    fn channels_of(&self, v: &O::Var) -> Result<usize> {
        Ok(self.ops.value(v).dims4()?[1])
    }
}

/// `fe_blocks` [Conv+BN+ReLU] blocks mapping `[N, 1, H, W]` to `[N, C, H, W]`.
pub fn feature_extractor<T: Scalar, O: Ops<T>>(
    fwd: &mut Forward<'_, T, O>,
    x: &O::Var,
) -> Result<O::Var> {
    let c_in = fwd.channels_of(x)?;
    if c_in != 1 {
        return Err(Error::shape(format!(
            "feature extractor expects 1 input channel, got {c_in}"
        )));
    }
    let mut y = x.clone();
    for i in 0..fwd.config.fe_blocks {
        y = fwd.block(&format!("fe.block{i}"), &y)?;
    }
    Ok(y)
}

/// Low-frequency guided refinement: `hf + conv3(concat(relu(conv1(hf)), relu(conv2(lf))))`.
///
/// `lf` is `[N, C, h, w]`, `hf` is `[N, 3C, h, w]`. For the `NoLgr` variant
/// `lf` is ignored and the slot is `hf + conv3(relu(conv1(hf)))`.
pub fn lgr_forward<T: Scalar, O: Ops<T>>(
    fwd: &mut Forward<'_, T, O>,
    prefix: &str,
    lf: &O::Var,
    hf: &O::Var,
) -> Result<O::Var> {
    let (lc, hc) = (fwd.channels_of(lf)?, fwd.channels_of(hf)?);
    if hc != 3 * lc {
        return Err(Error::shape(format!(
            "lgr: high band has {hc} channels, expected 3 x {lc}"
        )));
    }
    let f_hf = fwd.conv(&format!("{prefix}.conv1"), hf)?;
    let f_hf = fwd.ops.relu(&f_hf);
    let res = match fwd.config.variant {
        Variant::NoLgr => fwd.conv(&format!("{prefix}.conv3"), &f_hf)?,
        _ => {
            let f_lf = fwd.conv(&format!("{prefix}.conv2"), lf)?;
            let f_lf = fwd.ops.relu(&f_lf);
            let fused = fwd.ops.concat_channels(&[f_hf, f_lf])?;
            fwd.conv(&format!("{prefix}.conv3"), &fused)?
        }
    };
    fwd.ops.add(hf, &res)
}

fn check_divisible<T: Scalar>(t: &Tensor<T>, multiple: usize, op: &'static str) -> Result<()> {
    let [_, _, h, w] = t.dims4()?;
    if h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Divisibility {
            op,
            height: h,
            width: w,
            multiple,
        });
    }
    Ok(())
}

/// Frequency-progressive refinement of `[N, C, H, W]` features.
pub fn fpfr_forward<T: Scalar, O: Ops<T>>(
    fwd: &mut Forward<'_, T, O>,
    f: &O::Var,
) -> Result<O::Var> {
    fpfr_forward_traced(fwd, f, None)
}

/// [`fpfr_forward`], optionally recording the intermediate high bands.
pub fn fpfr_forward_traced<T: Scalar, O: Ops<T>>(
    fwd: &mut Forward<'_, T, O>,
    f: &O::Var,
    mut trace: Option<&mut FpfrTrace<O::Var>>,
) -> Result<O::Var> {
    let stages = fwd.config.stages;
    check_divisible(fwd.ops.value(f), 1 << stages, "fpfr")?;
    let c = fwd.channels_of(f)?;
    if fwd.config.variant == Variant::NoBandSep {
        return fpfr_no_band_sep(fwd, f, c);
    }

    let mut low: Vec<O::Var> = Vec::with_capacity(stages);
    let mut high: Vec<O::Var> = Vec::with_capacity(stages);
    let mut source = f.clone();
    for s in 0..stages {
        let bands = fwd.ops.dwt2(&source)?;
        let l = fwd.ops.slice_channels(&bands, 0, c)?;
        let h = fwd.ops.slice_channels(&bands, c, 3 * c)?;
        if let Some(t) = trace.as_deref_mut() {
            t.raw.push(h.clone());
        }
        let refined = lgr_forward(fwd, &lgr_prefix(s, 0), &l, &h)?;
        if let Some(t) = trace.as_deref_mut() {
            t.refined.insert((s, 0), refined.clone());
        }
        high.push(refined);
        // Rebuild each shallower low band from the freshly refined deeper
        // bands and use it to refine that stage's high band once more.
        let mut guide = l.clone();
        for j in (0..s).rev() {
            let stacked = fwd.ops.concat_channels(&[guide, high[j + 1].clone()])?;
            guide = fwd.ops.idwt2(&stacked)?;
            let round = s - j;
            let refined = lgr_forward(fwd, &lgr_prefix(j, round), &guide, &high[j])?;
            if let Some(t) = trace.as_deref_mut() {
                t.refined.insert((j, round), refined.clone());
            }
            high[j] = refined;
        }
        low.push(l.clone());
        source = l;
    }

    let mut recon = fwd.conv("lt.conv", &low[stages - 1])?;
    for j in (0..stages).rev() {
        let stacked = fwd.ops.concat_channels(&[recon, high[j].clone()])?;
        recon = fwd.ops.idwt2(&stacked)?;
    }
    Ok(recon)
}

fn fpfr_no_band_sep<T: Scalar, O: Ops<T>>(
    fwd: &mut Forward<'_, T, O>,
    f: &O::Var,
    c: usize,
) -> Result<O::Var> {
    let stages = fwd.config.stages;
    let mut refined = Vec::with_capacity(stages);
    let mut source = f.clone();
    for s in 0..stages {
        let bands = fwd.ops.dwt2(&source)?;
        let t = fwd.conv(&format!("bs{s}.conv1"), &bands)?;
        let t = fwd.ops.relu(&t);
        let t = fwd.conv(&format!("bs{s}.conv2"), &t)?;
        let r = fwd.ops.add(&bands, &t)?;
        if s + 1 < stages {
            source = fwd.conv(&format!("bs{s}.down"), &r)?;
        }
        refined.push(r);
    }
    let mut merged = fwd.ops.idwt2(&refined[stages - 1])?;
    for s in (0..stages - 1).rev() {
        let ll = fwd.ops.slice_channels(&refined[s], 0, c)?;
        let hi = fwd.ops.slice_channels(&refined[s], c, 3 * c)?;
        let ll = fwd.ops.add(&ll, &merged)?;
        let stacked = fwd.ops.concat_channels(&[ll, hi])?;
        merged = fwd.ops.idwt2(&stacked)?;
    }
    Ok(merged)
}

/// `dec_blocks - 1` [Conv+BN+ReLU] blocks, then a plain conv down to one
/// channel so the prediction can take any sign.
pub fn decoder<T: Scalar, O: Ops<T>>(fwd: &mut Forward<'_, T, O>, f: &O::Var) -> Result<O::Var> {
    let blocks = fwd.config.dec_blocks;
    let mut y = f.clone();
    for i in 0..blocks - 1 {
        y = fwd.block(&format!("dec.block{i}"), &y)?;
    }
    fwd.conv(&format!("dec.block{}.conv", blocks - 1), &y)
}

/// Full network: clean-image prediction for a noisy `[N, 1, H, W]` batch.
pub fn ignet_forward<T: Scalar, O: Ops<T>>(
    fwd: &mut Forward<'_, T, O>,
    x: &O::Var,
) -> Result<O::Var> {
    let f = feature_extractor(fwd, x)?;
    let r = fpfr_forward(fwd, &f)?;
    decoder(fwd, &r)
}
