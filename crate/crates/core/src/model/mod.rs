//! The action-conditioned Transformer VAE and its ablation variants.
//!
//! The encoder prepends two per-action learnable tokens to the linearly
//! embedded pose sequence, adds sinusoidal positional encodings to every
//! position and reads the posterior mean and log-variance off the first two
//! outputs. The decoder is queried with `T` positional encodings and attends
//! to a single memory vector, the latent plus a per-action bias token, so the
//! whole sequence is produced in one pass.

pub mod batch;
pub mod nn;
pub mod ops;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::Motion;
use crate::error::{Error, Result};
use crate::rotations::RotationRep;
use batch::{tensor_to_motions, FeatureLayout, MotionBatch};
use nn::{DecoderLayer, EncoderLayer, Gru, Linear, Mode, ParamStore};

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 10.0;
const TOKEN_INIT_STD: f64 = 0.02;

/// Architecture family; everything except `Actor` is an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Actor,
    Gru,
    FullyConnected,
    AutoregressiveDecoder,
    MeanPoolEncoder,
    OnehotConcatDecoder,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FullyConnected,
        Variant::Gru,
        Variant::Actor,
        Variant::AutoregressiveDecoder,
        Variant::MeanPoolEncoder,
        Variant::OnehotConcatDecoder,
    ];

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Actor => "Transformer",
            Variant::Gru => "GRU",
            Variant::FullyConnected => "Fully connected",
            Variant::AutoregressiveDecoder => "a) w/ autoreg. decoder",
            Variant::MeanPoolEncoder => "b) w/out μ_a^token, Σ_a^token",
            Variant::OnehotConcatDecoder => "c) w/out b_a^token",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Variant::Actor => "actor",
            Variant::Gru => "gru",
            Variant::FullyConnected => "fully_connected",
            Variant::AutoregressiveDecoder => "autoregressive_decoder",
            Variant::MeanPoolEncoder => "mean_pool_encoder",
            Variant::OnehotConcatDecoder => "onehot_concat_decoder",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub num_actions: usize,
    pub num_joints: usize,
    pub rotation: RotationRep,
    pub use_translation: bool,
    pub variant: Variant,
    /// Sequence length accepted by the fully connected variant.
    pub fixed_length: usize,
    pub precision: Precision,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 256,
            layers: 8,
            heads: 4,
            ff_dim: 1024,
            dropout: 0.1,
            activation: Activation::Gelu,
            num_actions: 5,
            num_joints: 24,
            rotation: RotationRep::SixD,
            use_translation: true,
            variant: Variant::Actor,
            fixed_length: 60,
            precision: Precision::F32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("num_actions", self.num_actions),
            ("num_joints", self.num_joints),
            ("fixed_length", self.fixed_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::InvalidConfig("latent_dim must be divisible by heads".into()));
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::InvalidConfig("latent_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { joints: self.num_joints, rep: self.rotation, translation: self.use_translation }
    }
}

/// Posterior parameters of one sequence plus a latent draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

enum Pool {
    Tokens { mu: Tensor, sigma: Tensor },
    Mean { mu: Linear, logvar: Linear },
}

enum Encoder {
    Transformer { embed: Linear, pool: Pool, layers: Vec<EncoderLayer> },
    Gru { embed: Linear, gru: Gru, mu: Linear, logvar: Linear },
    Mlp { l1: Linear, l2: Linear, mu: Linear, logvar: Linear },
}

enum Conditioning {
    Bias(Tensor),
    OneHot(Linear),
}

enum Decoder {
    Transformer { cond: Conditioning, layers: Vec<DecoderLayer>, out: Linear },
    Autoregressive { cond: Conditioning, embed: Linear, layers: Vec<DecoderLayer>, out: Linear },
    Gru { init: Linear, gru: Gru, out: Linear },
    Mlp { l1: Linear, l2: Linear, out: Linear },
}

/// Output of a training forward pass.
pub struct ForwardOutput {
    /// `[B, T, F]` reconstruction.
    pub pred: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

/// A motion VAE of any [`Variant`].
pub struct ActorModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    dropout: nn::Dropout,
}

/// Builds the model described by `config`, initialized from `config.init_seed`.
pub fn build_variant(config: &ModelConfig) -> Result<ActorModel> {
    ActorModel::new(config.clone())
}

impl ActorModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.init_seed, config.precision.dtype());
        let d = config.latent_dim;
        let a = config.num_actions;
        let f = config.layout().frame_dim();
        let (h, ff, p, l) = (config.heads, config.ff_dim, config.dropout, config.layers);
        let enc_layers = |ps: &mut ParamStore| -> Result<Vec<EncoderLayer>> {
            (0..l).map(|i| Ok(EncoderLayer::new(ps, &format!("encoder.layer{i}"), d, h, ff, p)?)).collect()
        };
        let dec_layers = |ps: &mut ParamStore| -> Result<Vec<DecoderLayer>> {
            (0..l).map(|i| Ok(DecoderLayer::new(ps, &format!("decoder.layer{i}"), d, h, ff, p)?)).collect()
        };
        let encoder = match config.variant {
            Variant::Actor | Variant::AutoregressiveDecoder | Variant::OnehotConcatDecoder => Encoder::Transformer {
                embed: Linear::new(&mut ps, "encoder.embed", f, d)?,
                pool: Pool::Tokens {
                    mu: ps.normal("encoder.mu_token", &[a, d], TOKEN_INIT_STD)?,
                    sigma: ps.normal("encoder.sigma_token", &[a, d], TOKEN_INIT_STD)?,
                },
                layers: enc_layers(&mut ps)?,
            },
            Variant::MeanPoolEncoder => Encoder::Transformer {
                embed: Linear::new(&mut ps, "encoder.embed", f, d)?,
                pool: Pool::Mean {
                    mu: Linear::new(&mut ps, "encoder.mu_head", d, d)?,
                    logvar: Linear::new(&mut ps, "encoder.logvar_head", d, d)?,
                },
                layers: enc_layers(&mut ps)?,
            },
            Variant::Gru => Encoder::Gru {
                embed: Linear::new(&mut ps, "encoder.embed", f + a, d)?,
                gru: Gru::new(&mut ps, "encoder.gru", d, d, l)?,
                mu: Linear::new(&mut ps, "encoder.mu_head", d, d)?,
                logvar: Linear::new(&mut ps, "encoder.logvar_head", d, d)?,
            },
            Variant::FullyConnected => Encoder::Mlp {
                l1: Linear::new(&mut ps, "encoder.l1", config.fixed_length * f + a, ff)?,
                l2: Linear::new(&mut ps, "encoder.l2", ff, ff)?,
                mu: Linear::new(&mut ps, "encoder.mu_head", ff, d)?,
                logvar: Linear::new(&mut ps, "encoder.logvar_head", ff, d)?,
            },
        };
        let bias = |ps: &mut ParamStore| -> Result<Conditioning> {
            Ok(Conditioning::Bias(ps.normal("decoder.bias_token", &[a, d], TOKEN_INIT_STD)?))
        };
        let decoder = match config.variant {
            Variant::Actor | Variant::MeanPoolEncoder => Decoder::Transformer {
                cond: bias(&mut ps)?,
                layers: dec_layers(&mut ps)?,
                out: Linear::new(&mut ps, "decoder.out", d, f)?,
            },
            Variant::OnehotConcatDecoder => Decoder::Transformer {
                cond: Conditioning::OneHot(Linear::new(&mut ps, "decoder.action_proj", d + a, d)?),
                layers: dec_layers(&mut ps)?,
                out: Linear::new(&mut ps, "decoder.out", d, f)?,
            },
            Variant::AutoregressiveDecoder => Decoder::Autoregressive {
                cond: bias(&mut ps)?,
                embed: Linear::new(&mut ps, "decoder.embed", f, d)?,
                layers: dec_layers(&mut ps)?,
                out: Linear::new(&mut ps, "decoder.out", d, f)?,
            },
            Variant::Gru => Decoder::Gru {
                init: Linear::new(&mut ps, "decoder.init", d + a, d * l)?,
                gru: Gru::new(&mut ps, "decoder.gru", d, d, l)?,
                out: Linear::new(&mut ps, "decoder.out", d, f)?,
            },
            Variant::FullyConnected => Decoder::Mlp {
                l1: Linear::new(&mut ps, "decoder.l1", d + a, ff)?,
                l2: Linear::new(&mut ps, "decoder.l2", ff, ff)?,
                out: Linear::new(&mut ps, "decoder.out", ff, config.fixed_length * f)?,
            },
        };
        Ok(ActorModel { dropout: nn::Dropout { p: config.dropout }, config, params: ps, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn layout(&self) -> FeatureLayout {
        self.config.layout()
    }

    fn check_actions(&self, actions: &[usize]) -> Result<()> {
        match actions.iter().find(|&&a| a >= self.config.num_actions) {
            Some(&a) => Err(Error::UnknownAction { action: a, num_actions: self.config.num_actions }),
            None => Ok(()),
        }
    }

    fn action_index(&self, actions: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = actions.iter().map(|&a| a as u32).collect();
        Ok(Tensor::from_vec(idx, actions.len(), self.device())?)
    }

    fn one_hot(&self, actions: &[usize]) -> Result<Tensor> {
        Ok(nn::one_hot(actions, self.config.num_actions, self.dtype(), self.device())?)
    }

    fn pe(&self, start: usize, len: usize) -> Result<Tensor> {
        Ok(nn::sinusoidal_tensor(start, len, self.config.latent_dim, self.dtype(), self.device())?)
    }

    /// Posterior mean and clamped log-variance, each `[B, d]`.
    pub fn encode_batch(&self, batch: &MotionBatch, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        if batch.lengths.contains(&0) {
            return Err(Error::EmptySequence);
        }
        self.check_actions(&batch.actions)?;
        let (b, t, _) = batch.features.dims3()?;
        let (mu, logvar) = match &self.encoder {
            Encoder::Transformer { embed, pool, layers } => {
                let x = embed.forward(&batch.features)?;
                let (x, prefix) = match pool {
                    Pool::Tokens { mu, sigma } => {
                        let idx = self.action_index(&batch.actions)?;
                        let mu_tok = mu.index_select(&idx, 0)?.unsqueeze(1)?;
                        let sig_tok = sigma.index_select(&idx, 0)?.unsqueeze(1)?;
                        (Tensor::cat(&[mu_tok, sig_tok, x], 1)?, 2)
                    }
                    Pool::Mean { .. } => (x, 0),
                };
                let x = x.broadcast_add(&self.pe(0, t + prefix)?)?;
                let mut x = self.dropout.forward(&x, mode)?;
                let mask = if batch.is_padded() {
                    Some(nn::key_padding_mask(&batch.lengths, prefix, t, self.dtype(), self.device())?)
                } else {
                    None
                };
                for layer in layers {
                    x = layer.forward(&x, mask.as_ref(), mode)?;
                }
                match pool {
                    Pool::Tokens { .. } => (x.narrow(1, 0, 1)?.squeeze(1)?, x.narrow(1, 1, 1)?.squeeze(1)?),
                    Pool::Mean { mu, logvar } => {
                        let m = batch.mask.unsqueeze(2)?;
                        let lens = batch.mask.sum_keepdim(1)?;
                        let pooled = x.broadcast_mul(&m)?.sum(1)?.broadcast_div(&lens)?;
                        (mu.forward(&pooled)?, logvar.forward(&pooled)?)
                    }
                }
            }
            Encoder::Gru { embed, gru, mu, logvar } => {
                let oh = self.one_hot(&batch.actions)?.unsqueeze(1)?.broadcast_as((b, t, self.config.num_actions))?;
                let x = embed.forward(&Tensor::cat(&[&batch.features, &oh.contiguous()?], 2)?)?;
                let x = self.dropout.forward(&x, mode)?;
                let (_, finals) = gru.forward(&x, None, Some(&batch.mask))?;
                let last = finals.last().unwrap();
                (mu.forward(last)?, logvar.forward(last)?)
            }
            Encoder::Mlp { l1, l2, mu, logvar } => {
                let expected = self.config.fixed_length;
                if let Some(&bad) = batch.lengths.iter().find(|&&l| l != expected) {
                    return Err(Error::FixedLengthOnly { expected, got: bad });
                }
                let flat = batch.features.reshape((b, t * self.layout().frame_dim()))?;
                let x = Tensor::cat(&[flat, self.one_hot(&batch.actions)?], 1)?;
                let h = self.dropout.forward(&ops::gelu(&l1.forward(&x)?)?, mode)?;
                let h = self.dropout.forward(&ops::gelu(&l2.forward(&h)?)?, mode)?;
                (mu.forward(&h)?, logvar.forward(&h)?)
            }
        };
        Ok((mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?))
    }

    fn memory(&self, cond: &Conditioning, z: &Tensor, actions: &[usize]) -> Result<Tensor> {
        let m = match cond {
            Conditioning::Bias(b) => (z + b.index_select(&self.action_index(actions)?, 0)?)?,
            Conditioning::OneHot(proj) => proj.forward(&Tensor::cat(&[z, &self.one_hot(actions)?], 1)?)?,
        };
        Ok(m.unsqueeze(1)?)
    }

    /// Decodes `[B, d]` latents into `[B, len, F]` features. `lengths` marks
    /// valid steps for padded batches; `teacher` supplies ground-truth frames to
    /// the autoregressive variant during training.
    pub fn decode_batch(
        &self,
        z: &Tensor,
        actions: &[usize],
        len: usize,
        lengths: Option<&[usize]>,
        teacher: Option<&Tensor>,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        if len == 0 {
            return Err(Error::NonPositiveDuration);
        }
        self.check_actions(actions)?;
        let b = z.dim(0)?;
        let padded = lengths.filter(|ls| ls.iter().any(|&l| l != len));
        let self_mask = match padded {
            Some(ls) => Some(nn::key_padding_mask(ls, 0, len, self.dtype(), self.device())?),
            None => None,
        };
        match &self.decoder {
            Decoder::Transformer { cond, layers, out } => {
                let memory = self.memory(cond, z, actions)?;
                let q = self.pe(0, len)?.unsqueeze(0)?.broadcast_as((b, len, self.config.latent_dim))?.contiguous()?;
                let mut x = self.dropout.forward(&q, mode)?;
                for layer in layers {
                    x = layer.forward(&x, &memory, self_mask.as_ref(), mode)?;
                }
                Ok(out.forward(&x)?)
            }
            Decoder::Autoregressive { cond, embed, layers, out } => {
                let memory = self.memory(cond, z, actions)?;
                let fd = self.layout().frame_dim();
                let run = |prev: &Tensor, mode: &mut Mode| -> Result<Tensor> {
                    let steps = prev.dim(1)?;
                    let x = embed.forward(prev)?.broadcast_add(&self.pe(0, steps)?)?;
                    let mut x = self.dropout.forward(&x, mode)?;
                    let causal = nn::causal_mask(steps, self.dtype(), self.device())?;
                    let mask = match &self_mask {
                        Some(m) if steps == len => causal.broadcast_add(m)?,
                        _ => causal,
                    };
                    for layer in layers {
                        x = layer.forward(&x, &memory, Some(&mask), mode)?;
                    }
                    Ok(out.forward(&x)?)
                };
                let start = Tensor::zeros((b, 1, fd), self.dtype(), self.device())?;
                match teacher {
                    Some(gt) => {
                        let prev = Tensor::cat(&[&start, &gt.narrow(1, 0, len - 1)?], 1)?;
                        run(&prev, mode)
                    }
                    None => {
                        let mut prev = start;
                        let mut outs = Vec::with_capacity(len);
                        for step in 0..len {
                            let y = run(&prev, mode)?;
                            let last = y.narrow(1, step, 1)?;
                            prev = Tensor::cat(&[&prev, &last], 1)?;
                            outs.push(last);
                        }
                        Ok(Tensor::cat(&outs, 1)?)
                    }
                }
            }
            Decoder::Gru { init, gru, out } => {
                let d = self.config.latent_dim;
                let h0 = init.forward(&Tensor::cat(&[z, &self.one_hot(actions)?], 1)?)?.tanh()?;
                let h0 = (0..gru.layers()).map(|l| h0.narrow(1, l * d, d)).collect::<candle_core::Result<Vec<_>>>()?;
                let q = self.pe(0, len)?.unsqueeze(0)?.broadcast_as((b, len, d))?.contiguous()?;
                let (x, _) = gru.forward(&q, Some(h0), None)?;
                Ok(out.forward(&self.dropout.forward(&x, mode)?)?)
            }
            Decoder::Mlp { l1, l2, out } => {
                let expected = self.config.fixed_length;
                if len != expected {
                    return Err(Error::FixedLengthOnly { expected, got: len });
                }
                let x = Tensor::cat(&[z, &self.one_hot(actions)?], 1)?;
                let h = self.dropout.forward(&ops::gelu(&l1.forward(&x)?)?, mode)?;
                let h = self.dropout.forward(&ops::gelu(&l2.forward(&h)?)?, mode)?;
                Ok(out.forward(&h)?.reshape((b, len, self.layout().frame_dim()))?)
            }
        }
    }

    /// Training-time pass with the given standard-normal noise `eps: [B, d]`.
    pub fn forward_with_eps(&self, batch: &MotionBatch, eps: &Tensor, mode: &mut Mode) -> Result<ForwardOutput> {
        let (mu, logvar) = self.encode_batch(batch, mode)?;
        let z = reparameterize_tensor(&mu, &logvar, eps)?;
        let pred = self.decode_batch(
            &z,
            &batch.actions,
            batch.max_len(),
            Some(&batch.lengths),
            Some(&batch.features),
            mode,
        )?;
        Ok(ForwardOutput { pred, mu, logvar, z })
    }

    /// Encode, sample with noise from `rng`, decode.
    pub fn forward_train(&self, batch: &MotionBatch, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        let eps = self.standard_normal(batch.len(), rng)?;
        self.forward_with_eps(batch, &eps, &mut Mode::Train(rng))
    }

    /// `[n, d]` standard normal draws from `rng`.
    pub fn standard_normal<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let d = self.config.latent_dim;
        let v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Tensor::from_vec(v, (n, d), self.device())?.to_dtype(self.dtype())?)
    }

    fn batch_for(&self, motions: &[&Motion]) -> Result<MotionBatch> {
        MotionBatch::new(motions, &self.layout(), self.dtype(), self.device())
    }

    /// Posterior parameters of one motion under action `action` (inference mode).
    pub fn encode(&self, motion: &Motion, action: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if motion.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut m = motion.clone();
        m.action = action;
        let (mu, logvar) = self.encode_batch(&self.batch_for(&[&m])?, &mut Mode::Eval)?;
        Ok((to_vec1(&mu)?, to_vec1(&logvar)?))
    }

    /// Posterior means for many motions, each under its own label.
    pub fn encode_means(&self, motions: &[Motion]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(motions.len());
        for chunk in motions.chunks(64) {
            let refs: Vec<&Motion> = chunk.iter().collect();
            let (mu, _) = self.encode_batch(&self.batch_for(&refs)?, &mut Mode::Eval)?;
            out.extend(mu.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Decodes one latent into a `duration`-frame motion of `action`.
    pub fn decode(&self, z: &[f64], action: usize, duration: usize) -> Result<Motion> {
        Ok(self.decode_many(&[z.to_vec()], &[action], duration)?.remove(0))
    }

    /// Decodes several latents with a shared duration.
    pub fn decode_many(&self, zs: &[Vec<f64>], actions: &[usize], duration: usize) -> Result<Vec<Motion>> {
        if duration == 0 {
            return Err(Error::NonPositiveDuration);
        }
        let d = self.config.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::ShapeMismatch { expected: d, got: z.len() });
        }
        self.check_actions(actions)?;
        let mut out = Vec::with_capacity(zs.len());
        for (zc, ac) in zs.chunks(64).zip(actions.chunks(64)) {
            let flat: Vec<f64> = zc.iter().flatten().copied().collect();
            let z = Tensor::from_vec(flat, (zc.len(), d), self.device())?.to_dtype(self.dtype())?;
            let pred = self.decode_batch(&z, ac, duration, None, None, &mut Mode::Eval)?;
            out.extend(tensor_to_motions(&pred, &self.layout(), &vec![duration; ac.len()], ac, DEFAULT_FPS)?);
        }
        Ok(out)
    }

    /// Samples `z ~ N(0, I)` from `rng` and decodes it.
    pub fn generate<R: Rng + ?Sized>(&self, action: usize, duration: usize, rng: &mut R) -> Result<Motion> {
        Ok(self.generate_many(&[action], duration, rng)?.remove(0))
    }

    /// One generation per entry of `actions`, latents drawn in order from `rng`.
    pub fn generate_many<R: Rng + ?Sized>(&self, actions: &[usize], duration: usize, rng: &mut R) -> Result<Vec<Motion>> {
        self.check_actions(actions)?;
        let d = self.config.latent_dim;
        let zs: Vec<Vec<f64>> =
            (0..actions.len()).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect();
        self.decode_many(&zs, actions, duration)
    }
}

/// Frame rate stamped on generated motions.
pub const DEFAULT_FPS: f64 = 20.0;

fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// `z = mu + exp(logvar / 2) * eps`, differentiable in `mu` and `logvar`.
pub fn reparameterize_tensor(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((mu + ((logvar * 0.5)?.exp()? * eps)?)?)
}

/// Reparameterized draw for plain vectors; `logvar` is clamped first.
pub fn reparameterize<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let e: f64 = StandardNormal.sample(rng);
            m + (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e
        })
        .collect()
}

/// Sinusoidal positional encoding table, `PE[t][2i] = sin(t / 10000^(2i/d))`,
/// `PE[t][2i+1] = cos(..)`, positions from 0.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if len == 0 || dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("positional encoding needs len >= 1 and even dim, got {len}x{dim}")));
    }
    Ok(nn::sinusoidal_table(0, len, dim).chunks(dim).map(|c| c.to_vec()).collect())
}

/// Sum over the latent axis of the Gaussian KL to N(0, I), per batch row.
pub(crate) fn kl_rows(mu: &Tensor, logvar: &Tensor) -> candle_core::Result<Tensor> {
    ((logvar.exp()? + mu.sqr()?)? - logvar)?.affine(0.5, -0.5)?.sum(D::Minus1)
}
