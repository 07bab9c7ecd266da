//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"IGNT" | u32 version | u32 len + model config text | u64 entry count
//! entry:  u16 len + name | u8 dtype (0 = f32, 1 = u64) | u8 ndim | u64 dims.. | payload
//! ```
//!
//! Entries are written in name order, so saving the same state twice gives
//! identical bytes. Learnable tensors use their parameter names, batch norm
//! buffers their `{prefix}_mean`/`_var` names, optimizer moments
//! `adam.m.<name>`/`adam.v.<name>`, and training counters live under
//! `train.*`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{bn_layers, param_specs, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::training::adam::{Adam, AdamConfig};

pub const MAGIC: [u8; 4] = *b"IGNT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const KEY_EPOCH: &str = "train.epoch";
const KEY_ADAM_T: &str = "train.adam_t";
const KEY_RNG: &str = "train.rng_state";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (magic bytes {0:?})")]
    BadMagic([u8; 4]),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("shape mismatch for `{name}`: model expects {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing `{0}`")]
    MissingEntry(String),
}

fn malformed(msg: impl Into<String>) -> Error {
    CheckpointError::Malformed(msg.into()).into()
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: u64,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub training: Option<TrainingState>,
}

#[derive(Debug, Clone, PartialEq)]
enum Entry {
    F32(Tensor<f32>),
    U64(Vec<u64>),
}

impl Checkpoint {
    pub fn new(model: ModelParams<f32>) -> Self {
        Checkpoint {
            model,
            training: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (k, v) in self.model.params.iter().chain(&self.model.buffers) {
            entries.insert(k.clone(), Entry::F32(v.clone()));
        }
        if let Some(ts) = &self.training {
            for (k, v) in &ts.adam.m {
                entries.insert(format!("{ADAM_M}{k}"), Entry::F32(v.clone()));
            }
            for (k, v) in &ts.adam.v {
                entries.insert(format!("{ADAM_V}{k}"), Entry::F32(v.clone()));
            }
            entries.insert(KEY_EPOCH.into(), Entry::U64(vec![ts.epoch]));
            entries.insert(KEY_ADAM_T.into(), Entry::U64(vec![ts.adam.t]));
            entries.insert(KEY_RNG.into(), Entry::U64(rng_words(&ts.rng)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.model.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, entry) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F32(t) => {
                    out.push(DTYPE_F32);
                    out.push(t.ndim() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(words) => {
                    out.push(DTYPE_U64);
                    out.push(1);
                    out.extend_from_slice(&(words.len() as u64).to_le_bytes());
                    for w in words {
                        out.extend_from_slice(&w.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Parses and validates a checkpoint against the configuration stored in
    /// its own header.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, entries) = parse(bytes)?;
        assemble(config, entries)
    }

    /// Like [`Checkpoint::from_bytes`], but every tensor must also fit
    /// `expected`; the first parameter (in model order) whose shape differs
    /// is reported.
    pub fn from_bytes_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let (config, entries) = parse(bytes)?;
        check_shapes(expected, &entries)?;
        if config != *expected {
            return Err(malformed(format!(
                "checkpoint was written for a different model ({}), expected ({})",
                config.to_text().trim().replace('\n', ", "),
                expected.to_text().trim().replace('\n', ", ")
            )));
        }
        assemble(config, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_for(&bytes, expected)
    }
}

/// Seed (4 words), 128-bit word position (low, high) and stream.
fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let pos = rng.get_word_pos();
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words.push(rng.get_stream());
    words
}

fn rng_from_words(words: &[u64]) -> Result<ChaCha8Rng> {
    if words.len() != 7 {
        return Err(malformed(format!(
            "{KEY_RNG} has {} words, expected 7",
            words.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..4].iter().enumerate() {
        seed[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[6]);
    rng.set_word_pos(u128::from(words[4]) | (u128::from(words[5]) << 64));
    Ok(rng)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

fn parse(bytes: &[u8]) -> Result<(ModelConfig, BTreeMap<String, Entry>)> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 {
        let mut got = [0u8; 4];
        got[..bytes.len()].copy_from_slice(bytes);
        return Err(CheckpointError::BadMagic(got).into());
    }
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "model config")?)
        .map_err(|_| malformed("model config is not UTF-8"))?;
    let config =
        ModelConfig::from_text(text).map_err(|e| malformed(format!("model config: {e}")))?;
    let count = r.u64("entry count")?;

    let mut entries = BTreeMap::new();
    for i in 0..count {
        let ctx = format!("entry {i}");
        let name_len = r.u16(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &ctx)?)
            .map_err(|_| malformed(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let ctx = format!("entry `{name}`");
        let dtype = r.u8(&ctx)?;
        let ndim = r.u8(&ctx)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                usize::try_from(r.u64(&ctx)?)
                    .map_err(|_| malformed(format!("{ctx}: dimension overflow")))?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| malformed(format!("{ctx}: element count overflow")))?;
        let entry = match dtype {
            DTYPE_F32 => {
                let raw = r.take(
                    numel
                        .checked_mul(4)
                        .ok_or_else(|| malformed("size overflow"))?,
                    &ctx,
                )?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Entry::F32(Tensor::new(shape, data)?)
            }
            DTYPE_U64 => {
                if ndim != 1 {
                    return Err(malformed(format!("{ctx}: u64 entries must be 1-D")));
                }
                let raw = r.take(
                    numel
                        .checked_mul(8)
                        .ok_or_else(|| malformed("size overflow"))?,
                    &ctx,
                )?;
                Entry::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            }
            other => return Err(malformed(format!("{ctx}: unknown dtype {other}"))),
        };
        if entries.insert(name.clone(), entry).is_some() {
            return Err(malformed(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, entries))
}

fn f32_entry<'e>(
    entries: &'e BTreeMap<String, Entry>,
    name: &str,
) -> Result<Option<&'e Tensor<f32>>> {
    match entries.get(name) {
        None => Ok(None),
        Some(Entry::F32(t)) => Ok(Some(t)),
        Some(Entry::U64(_)) => Err(malformed(format!("`{name}` should hold f32 data"))),
    }
}

fn u64_entry<'e>(entries: &'e BTreeMap<String, Entry>, name: &str) -> Result<Option<&'e [u64]>> {
    match entries.get(name) {
        None => Ok(None),
        Some(Entry::U64(w)) => Ok(Some(w)),
        Some(Entry::F32(_)) => Err(malformed(format!("`{name}` should hold u64 data"))),
    }
}

/// Expected shape of every tensor a checkpoint for `config` may carry, in
/// model order.
fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = param_specs(config)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    for (prefix, c) in bn_layers(config) {
        out.push((format!("{prefix}_mean"), vec![c]));
        out.push((format!("{prefix}_var"), vec![c]));
    }
    out
}

fn check_shapes(config: &ModelConfig, entries: &BTreeMap<String, Entry>) -> Result<()> {
    let shapes = expected_shapes(config);
    let check = |name: &str, expected: &[usize]| -> Result<()> {
        if let Some(t) = f32_entry(entries, name)? {
            if t.shape() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(())
    };
    for (name, shape) in &shapes {
        check(name, shape)?;
    }
    for (name, shape) in &shapes {
        check(&format!("{ADAM_M}{name}"), shape)?;
        check(&format!("{ADAM_V}{name}"), shape)?;
    }
    Ok(())
}

fn assemble(config: ModelConfig, entries: BTreeMap<String, Entry>) -> Result<Checkpoint> {
    config
        .validate()
        .map_err(|e| malformed(format!("model config: {e}")))?;
    check_shapes(&config, &entries)?;

    let specs = param_specs(&config);
    let mut params = BTreeMap::new();
    for spec in &specs {
        let t = f32_entry(&entries, &spec.name)?
            .ok_or_else(|| CheckpointError::MissingEntry(spec.name.clone()))?;
        params.insert(spec.name.clone(), t.clone());
    }
    let mut buffers = BTreeMap::new();
    let layers = bn_layers(&config);
    for (prefix, _) in &layers {
        let mean = f32_entry(&entries, &format!("{prefix}_mean"))?;
        let var = f32_entry(&entries, &format!("{prefix}_var"))?;
        match (mean, var) {
            (Some(m), Some(v)) => {
                buffers.insert(format!("{prefix}_mean"), m.clone());
                buffers.insert(format!("{prefix}_var"), v.clone());
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(CheckpointError::MissingEntry(format!("{prefix}_var")).into())
            }
            (None, Some(_)) => {
                return Err(CheckpointError::MissingEntry(format!("{prefix}_mean")).into())
            }
        }
    }

    let training = match u64_entry(&entries, KEY_EPOCH)? {
        None => None,
        Some(epoch) => {
            let scalar = |key: &str| -> Result<u64> {
                match u64_entry(&entries, key)? {
                    Some([v]) => Ok(*v),
                    Some(_) => Err(malformed(format!("`{key}` must hold one value"))),
                    None => Err(CheckpointError::MissingEntry(key.to_string()).into()),
                }
            };
            let epoch = match epoch {
                [e] => *e,
                _ => return Err(malformed(format!("`{KEY_EPOCH}` must hold one value"))),
            };
            let mut adam = Adam::new(AdamConfig::default());
            adam.t = scalar(KEY_ADAM_T)?;
            for spec in &specs {
                let m = f32_entry(&entries, &format!("{ADAM_M}{}", spec.name))?;
                let v = f32_entry(&entries, &format!("{ADAM_V}{}", spec.name))?;
                match (m, v) {
                    (Some(m), Some(v)) => {
                        adam.m.insert(spec.name.clone(), m.clone());
                        adam.v.insert(spec.name.clone(), v.clone());
                    }
                    (None, None) if adam.t == 0 => {}
                    (None, _) => {
                        return Err(
                            CheckpointError::MissingEntry(format!("{ADAM_M}{}", spec.name)).into(),
                        )
                    }
                    (_, None) => {
                        return Err(
                            CheckpointError::MissingEntry(format!("{ADAM_V}{}", spec.name)).into(),
                        )
                    }
                }
            }
            let rng_words = u64_entry(&entries, KEY_RNG)?
                .ok_or_else(|| CheckpointError::MissingEntry(KEY_RNG.into()))?;
            Some(TrainingState {
                epoch,
                adam,
                rng: rng_from_words(rng_words)?,
            })
        }
    };

    let is_training_key = |k: &str| {
        let moment = k.strip_prefix(ADAM_M).or_else(|| k.strip_prefix(ADAM_V));
        moment.is_some_and(|n| params.contains_key(n))
            || [KEY_EPOCH, KEY_ADAM_T, KEY_RNG].contains(&k)
    };
    if let Some(stray) = entries.keys().find(|k| {
        !params.contains_key(*k)
            && !buffers.contains_key(*k)
            && !(training.is_some() && is_training_key(k))
    }) {
        return Err(malformed(format!("unexpected entry `{stray}`")));
    }

    Ok(Checkpoint {
        model: ModelParams {
            config,
            params,
            buffers,
        },
        training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::RngCore;

    fn toy() -> ModelConfig {
        ModelConfig {
            channels: 2,
            stages: 1,
            fe_blocks: 1,
            dec_blocks: 1,
            kernel_size: 3,
            variant: Variant::Full,
        }
    }

    fn with_training(seed: u64) -> Checkpoint {
        let model = ModelParams::<f32>::init(toy(), seed).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let mut params = model.params.clone();
        let grads = params
            .iter()
            .map(|(k, v)| (k.clone(), v.map(|x| x * 0.5 + 0.1)))
            .collect();
        adam.step(&mut params, &grads, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.next_u32();
        let mut model = ModelParams { params, ..model };
        model
            .buffers
            .insert("fe.block0.bn_mean".into(), Tensor::full([2], 0.25));
        model
            .buffers
            .insert("fe.block0.bn_var".into(), Tensor::full([2], 1.5));
        Checkpoint {
            model,
            training: Some(TrainingState {
                epoch: 3,
                adam,
                rng,
            }),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = with_training(7);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let ck = with_training(9);
        let mut a = ck.training.clone().unwrap().rng;
        let mut b = Checkpoint::from_bytes(&ck.to_bytes())
            .unwrap()
            .training
            .unwrap()
            .rng;
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn weights_only_checkpoint() {
        let ck = Checkpoint::new(ModelParams::init(toy(), 1).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.training.is_none());
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = with_training(1).to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::BadMagic(m)) if &m == b"XGNT"));
        assert!(matches!(
            Checkpoint::from_bytes(b"IG").unwrap_err(),
            Error::Checkpoint(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = with_training(1).to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(
            err,
            Error::Checkpoint(CheckpointError::UnsupportedVersion {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn every_truncation_is_reported_as_truncated() {
        let bytes = with_training(2).to_bytes();
        for cut in (4..bytes.len()).step_by(37) {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(CheckpointError::Truncated(_))),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let small = Checkpoint::new(ModelParams::init(toy(), 1).unwrap()).to_bytes();
        let bigger = ModelConfig {
            channels: 4,
            ..toy()
        };
        let err = Checkpoint::from_bytes_for(&small, &bigger).unwrap_err();
        match err {
            Error::Checkpoint(CheckpointError::ShapeMismatch {
                name,
                expected,
                found,
            }) => {
                assert_eq!(name, "fe.block0.conv_w");
                assert_eq!(expected, vec![4, 1, 3, 3]);
                assert_eq!(found, vec![2, 1, 3, 3]);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err_text(&small, &bigger).contains("fe.block0.conv_w"));
    }

    fn err_text(bytes: &[u8], cfg: &ModelConfig) -> String {
        Checkpoint::from_bytes_for(bytes, cfg)
            .unwrap_err()
            .to_string()
    }

    #[test]
    fn missing_parameter_is_reported() {
        let mut ck = Checkpoint::new(ModelParams::init(toy(), 1).unwrap());
        ck.model.params.remove("lt.conv_b");
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::MissingEntry(n)) if n == "lt.conv_b")
        );
    }

    #[test]
    fn load_reports_missing_file_as_io() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load(dir.path().join("none.ignt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ignt");
        let ck = with_training(4);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load_for(&path, &toy()).unwrap(), ck);
        assert_eq!(fs::read(&path).unwrap(), ck.to_bytes());
    }
}
