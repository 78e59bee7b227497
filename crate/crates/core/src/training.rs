//! Minibatch optimization, variable-length finetuning and checkpoints.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{BodyModel, Motion};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossBreakdown, LossWeights};
use crate::model::batch::MotionBatch;
use crate::model::{ActorModel, ModelConfig, Variant};

pub const CHECKPOINT_FORMAT: &str = "actor-ckpt-v1";
const MAGIC: &[u8; 8] = b"ACTORCKP";

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub fixed_duration: usize,
    pub variable_range: Option<[usize; 2]>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 20,
            epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            fixed_duration: 60,
            variable_range: None,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.fixed_duration == 0 {
            return bad("batch_size and fixed_duration must be positive");
        }
        if let Some([a, b]) = self.variable_range {
            if a == 0 || a > b {
                return bad("variable_range must satisfy 0 < min <= max");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        self.weights.validate()
    }
}

/// Model and training sections of a run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }
}

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self.word_pos.parse::<u128>().map_err(|e| Error::InvalidArgument(format!("rng word_pos: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// How far a checkpoint has been trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Stage {
    Init,
    Fixed { duration: usize },
    Variable { min: usize, max: usize },
}

/// A model with its training position.
pub struct Checkpoint {
    pub model: ActorModel,
    pub step: u64,
    pub rng: RngState,
    pub stage: Stage,
    pub action_names: Vec<String>,
}

impl Checkpoint {
    pub fn new(model: ActorModel, action_names: Vec<String>) -> Self {
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(model.config().init_seed));
        Checkpoint { model, step: 0, rng, stage: Stage::Init, action_names }
    }

    pub fn from_config(config: &ModelConfig, action_names: Vec<String>) -> Result<Self> {
        Ok(Checkpoint::new(ActorModel::new(config.clone())?, action_names))
    }
}

/// Mean loss terms of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Everything recorded during a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimizer step.
    pub step_totals: Vec<f64>,
    /// Padded length of every minibatch.
    pub batch_durations: Vec<usize>,
}

/// Optional side effects of a run.
#[derive(Default)]
pub struct Hooks<'a> {
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
    pub checkpoint_path: Option<PathBuf>,
}

fn check_actions(model: &ActorModel, data: &[Motion]) -> Result<()> {
    let a = model.config().num_actions;
    if let Some(m) = data.iter().find(|m| m.action >= a) {
        return Err(Error::ActionSetMismatch(format!("motion labeled {} but the model knows {a} actions", m.action)));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("no training motions".into()));
    }
    Ok(())
}

fn crop_random(m: &Motion, len: usize, rng: &mut ChaCha8Rng) -> Motion {
    if m.len() <= len {
        return m.clone();
    }
    let start = rng.random_range(0..=m.len() - len);
    m.crop(start, len)
}

fn snapshot(model: &ActorModel) -> Result<Vec<Tensor>> {
    Ok(model.params().vars().iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?)
}

fn restore(model: &ActorModel, snap: &[Tensor]) -> Result<()> {
    for (v, t) in model.params().vars().iter().zip(snap) {
        v.set(t)?;
    }
    Ok(())
}

fn clip_gradients(grads: &mut candle_core::backprop::GradStore, model: &ActorModel, max_norm: f64) -> Result<()> {
    let vars = model.params().vars();
    let mut sq = 0.0;
    for v in &vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in &vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(())
}

fn run(
    ckpt: &mut Checkpoint,
    data: &[Motion],
    body: &dyn BodyModel,
    config: &TrainConfig,
    mut rng: ChaCha8Rng,
    hooks: &mut Hooks,
) -> Result<TrainReport> {
    config.validate()?;
    check_actions(&ckpt.model, data)?;
    let model = &ckpt.model;
    let layout = model.layout();
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        },
    )?;
    let mut report = TrainReport::default();
    let mut good = snapshot(model)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let len = match config.variable_range {
                Some([a, b]) => rng.random_range(a..=b),
                None => config.fixed_duration,
            };
            let crops: Vec<Motion> = chunk.iter().map(|&i| crop_random(&data[i], len, &mut rng)).collect();
            let refs: Vec<&Motion> = crops.iter().collect();
            let batch = MotionBatch::new(&refs, &layout, model.dtype(), model.device())?;
            let out = model.forward_train(&batch, &mut rng)?;
            let loss = batch_loss(&out, &batch, &layout, body, &config.weights)?;
            if !loss.terms.is_finite() {
                restore(model, &good)?;
                ckpt.rng = RngState::capture(&rng);
                if let Some(p) = &hooks.checkpoint_path {
                    save_checkpoint(ckpt, p)?;
                }
                return Err(Error::DivergedLoss { step: ckpt.step + 1 });
            }
            let mut grads = loss.total.backward()?;
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, model, c)?;
            }
            opt.step(&grads)?;
            ckpt.step += 1;
            report.step_totals.push(loss.terms.total);
            report.batch_durations.push(batch.max_len());
            let t = loss.terms;
            sum.rotation += t.rotation;
            sum.displacement += t.displacement;
            sum.vertices += t.vertices;
            sum.joints += t.joints;
            sum.kl += t.kl;
            sum.total += t.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let mean = LossBreakdown {
            rotation: sum.rotation / n,
            displacement: sum.displacement / n,
            vertices: sum.vertices / n,
            joints: sum.joints / n,
            kl: sum.kl / n,
            total: sum.total / n,
        };
        let entry = EpochLog { epoch: epoch + 1, step: ckpt.step, loss: mean };
        log::info!(
            "epoch {} step {} total {:.6} rot {:.6} disp {:.6} vert {:.6} joints {:.6} kl {:.6}",
            entry.epoch,
            entry.step,
            mean.total,
            mean.rotation,
            mean.displacement,
            mean.vertices,
            mean.joints,
            mean.kl
        );
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&entry);
        }
        report.epochs.push(entry);
        good = snapshot(model)?;
        ckpt.rng = RngState::capture(&rng);
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            if let Some(p) = &hooks.checkpoint_path {
                save_checkpoint(ckpt, p)?;
            }
        }
    }
    Ok(report)
}

/// Fixed-duration training (or variable, if `config.variable_range` is set)
/// of the checkpoint's model in place. Deterministic given `config.seed`.
pub fn train(
    ckpt: &mut Checkpoint,
    data: &[Motion],
    body: &dyn BodyModel,
    config: &TrainConfig,
    hooks: &mut Hooks,
) -> Result<TrainReport> {
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    let report = run(ckpt, data, body, config, rng, hooks)?;
    ckpt.stage = match config.variable_range {
        Some([min, max]) => Stage::Variable { min, max },
        None => Stage::Fixed { duration: config.fixed_duration },
    };
    Ok(report)
}

/// Continues training with a per-batch duration drawn uniformly from `range`.
pub fn finetune_variable(
    ckpt: &mut Checkpoint,
    data: &[Motion],
    body: &dyn BodyModel,
    range: [usize; 2],
    epochs: usize,
    config: &TrainConfig,
    hooks: &mut Hooks,
) -> Result<TrainReport> {
    if ckpt.model.config().variant == Variant::FullyConnected {
        return Err(Error::IncompatibleCheckpoint("the fully connected variant only supports a fixed length".into()));
    }
    if ckpt.stage == Stage::Init {
        log::warn!("variable-length finetuning from random initialization tends to converge to a poor solution");
    }
    if !data.iter().any(|m| m.len() >= range[0]) {
        return Err(Error::InsufficientData(format!("no sequence reaches {} frames", range[0])));
    }
    let config = TrainConfig { variable_range: Some(range), epochs, ..config.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let report = run(ckpt, data, body, &config, rng, hooks)?;
    ckpt.stage = Stage::Variable { min: range[0], max: range[1] };
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: String,
    config: ModelConfig,
    step: u64,
    rng: RngState,
    stage: Stage,
    action_names: Vec<String>,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes magic, header length, JSON header, then little-endian tensor data.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, var) in ckpt.model.params().named() {
        let t = var.as_tensor();
        let offset = data.len();
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        tensors.push(TensorEntry { name: name.clone(), shape: t.dims().to_vec(), offset, len: data.len() - offset });
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT.into(),
        config: ckpt.model.config().clone(),
        step: ckpt.step,
        rng: ckpt.rng.clone(),
        stage: ckpt.stage,
        action_names: ckpt.action_names.clone(),
        tensors,
        sha256: hex(&Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ckpt)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |r: &str| Error::corrupt(path, r);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(corrupt("truncated header"));
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::corrupt(path, e))?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        Some(other) => return Err(Error::VersionMismatch { expected: CHECKPOINT_FORMAT.into(), found: other.into() }),
        None => return Err(corrupt("missing format_version")),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::corrupt(path, e))?;
    let data = &bytes[16 + hlen..];
    if hex(&Sha256::digest(data)) != header.sha256 {
        return Err(corrupt("tensor data checksum mismatch"));
    }
    let model = ActorModel::new(header.config.clone()).map_err(|e| Error::corrupt(path, e))?;
    let named = model.params().named();
    if named.len() != header.tensors.len() {
        return Err(corrupt("tensor count differs from the architecture"));
    }
    for entry in &header.tensors {
        let var = named.get(&entry.name).ok_or_else(|| corrupt(&format!("unexpected tensor {}", entry.name)))?;
        if var.dims() != entry.shape.as_slice() {
            return Err(corrupt(&format!("shape of {} differs from the architecture", entry.name)));
        }
        let raw = data.get(entry.offset..entry.offset + entry.len).ok_or_else(|| corrupt("tensor data out of range"))?;
        let t = match var.dtype() {
            DType::F64 => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, entry.shape.clone(), var.device())?
            }
            dt => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, entry.shape.clone(), var.device())?.to_dtype(dt)?
            }
        };
        if t.elem_count() != var.elem_count() {
            return Err(corrupt(&format!("size of {} differs from its shape", entry.name)));
        }
        var.set(&t)?;
    }
    header.rng.restore()?;
    Ok(Checkpoint { model, step: header.step, rng: header.rng, stage: header.stage, action_names: header.action_names })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes, path)
}

/// Loads a checkpoint and rejects it unless its architecture equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.model.config() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint architecture {:?} differs from the requested {:?}",
            ckpt.model.config(),
            expected
        )));
    }
    Ok(ckpt)
}
