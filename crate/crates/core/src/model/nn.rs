//! Neural building blocks on candle tensors.
//!
//! Parameters are created from an explicit seeded generator rather than
//! candle's global RNG, and dropout draws its masks from the caller's
//! generator, so a fixed seed reproduces training bit for bit.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Additive attention-mask value for blocked positions.
pub const MASK_NEG: f64 = -1e9;

/// Forward-pass mode. Training carries the generator used for dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Named trainable tensors with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore { vars: BTreeMap::new(), dtype, device: Device::Cpu, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            candle_core::bail!("duplicate parameter `{name}`");
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, v, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let s: f64 = StandardNormal.sample(&mut self.rng);
                s * std
            })
            .collect();
        self.insert(name, v, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Affine map with PyTorch-style uniform initialization.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[output, input], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[output], bound)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().unwrap();
        let rows = x.elem_count() / input;
        let y = x.reshape((rows, input))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        y.reshape(out)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::ops::layer_norm(x, &self.weight, &self.bias, self.eps)
    }
}

/// Inverted dropout with masks drawn from the training generator.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let Mode::Train(rng) = mode else { return Ok(x.clone()) };
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p as f32;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x * mask
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    super::ops::softmax_last(x)
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dropout: Dropout,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, dropout: f64) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads,
            dropout: Dropout { p: dropout },
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// `query` is `[B, Tq, d]`, `memory` is `[B, Tk, d]`; `mask` is additive and
    /// broadcastable to `[B, heads, Tq, Tk]`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        if memory.dim(1)? == 1 && mask.is_none() {
            // A single key gets all the attention weight, so only dropout on
            // that weight survives.
            let v = self.split(&self.v.forward(memory)?)?;
            let ones = Tensor::ones((b, self.heads, tq, 1), v.dtype(), v.device())?;
            let att = self.dropout.forward(&ones, mode)?;
            let out = att.broadcast_mul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
            return self.o.forward(&out);
        }
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let att = self.dropout.forward(&softmax_last(&scores)?, mode)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
    dropout: Dropout,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(ps, &format!("{name}.l1"), dim, hidden)?,
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, dim)?,
            dropout: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let h = self.dropout.forward(&super::ops::gelu(&self.l1.forward(x)?)?, mode)?;
        self.l2.forward(&h)
    }
}

/// Post-norm Transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    dropout: Dropout,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ff: usize, dropout: f64) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, dropout)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff, dropout)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            dropout: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let a = self.attn.forward(x, x, mask, mode)?;
        let x = self.norm1.forward(&(x + self.dropout.forward(&a, mode)?)?)?;
        let f = self.ff.forward(&x, mode)?;
        self.norm2.forward(&(&x + self.dropout.forward(&f, mode)?)?)
    }
}

/// Post-norm Transformer decoder layer: self-attention, cross-attention to a
/// memory sequence, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
    dropout: Dropout,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ff: usize, dropout: f64) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, dropout)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, dropout)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff, dropout)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), dim)?,
            dropout: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, self_mask: Option<&Tensor>, mode: &mut Mode) -> Result<Tensor> {
        let a = self.self_attn.forward(x, x, self_mask, mode)?;
        let x = self.norm1.forward(&(x + self.dropout.forward(&a, mode)?)?)?;
        let c = self.cross_attn.forward(&x, memory, None, mode)?;
        let x = self.norm2.forward(&(&x + self.dropout.forward(&c, mode)?)?)?;
        let f = self.ff.forward(&x, mode)?;
        self.norm3.forward(&(&x + self.dropout.forward(&f, mode)?)?)
    }
}

/// Multi-layer GRU with optional per-step validity mask.
#[derive(Clone, Debug)]
pub struct Gru {
    cells: Vec<(Linear, Linear)>,
    hidden: usize,
}

impl Gru {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            cells.push((
                Linear::new(ps, &format!("{name}.{l}.ih"), inp, 3 * hidden)?,
                Linear::new(ps, &format!("{name}.{l}.hh"), hidden, 3 * hidden)?,
            ));
        }
        Ok(Gru { cells, hidden })
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    /// Runs over `x: [B, T, in]`. `mask: [B, T]` (1 valid, 0 padding) freezes the
    /// state on padded steps. Returns per-step top-layer outputs `[B, T, h]`
    /// and the final state of every layer.
    pub fn forward(&self, x: &Tensor, h0: Option<Vec<Tensor>>, mask: Option<&Tensor>) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, t, _) = x.dims3()?;
        let h = self.hidden;
        let mut input = x.clone();
        let mut finals = Vec::with_capacity(self.cells.len());
        for (l, (ih, hh)) in self.cells.iter().enumerate() {
            let gi = ih.forward(&input)?;
            let mut state = match &h0 {
                Some(v) => v[l].clone(),
                None => Tensor::zeros((b, h), x.dtype(), x.device())?,
            };
            let mut outs = Vec::with_capacity(t);
            for step in 0..t {
                let gi_t = gi.narrow(1, step, 1)?.squeeze(1)?;
                let gh = hh.forward(&state)?;
                let r = sigmoid(&(gi_t.narrow(1, 0, h)? + gh.narrow(1, 0, h)?)?)?;
                let z = sigmoid(&(gi_t.narrow(1, h, h)? + gh.narrow(1, h, h)?)?)?;
                let n = (gi_t.narrow(1, 2 * h, h)? + (r * gh.narrow(1, 2 * h, h)?)?)?.tanh()?;
                // h' = n + z * (h - n)
                let next = (&n + (z * (&state - &n)?)?)?;
                state = match mask {
                    Some(m) => {
                        let m = m.narrow(1, step, 1)?;
                        (&state + m.broadcast_mul(&(next - &state)?)?)?
                    }
                    None => next,
                };
                outs.push(state.clone());
            }
            input = Tensor::stack(&outs, 1)?;
            finals.push(state);
        }
        Ok((input, finals))
    }
}

/// Sinusoidal table `[len, dim]` for positions `start..start + len`.
pub fn sinusoidal_table(start: usize, len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for t in 0..len {
        let pos = (start + t) as f64;
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[t * dim + 2 * i] = (pos / freq).sin();
            out[t * dim + 2 * i + 1] = (pos / freq).cos();
        }
    }
    out
}

pub fn sinusoidal_tensor(start: usize, len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Tensor::from_vec(sinusoidal_table(start, len, dim), (len, dim), device)?.to_dtype(dtype)
}

/// One-hot rows `[n, classes]`.
pub fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0.0f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Tensor::from_vec(v, (labels.len(), classes), device)?.to_dtype(dtype)
}

/// Additive key-padding mask `[B, 1, 1, prefix + T]`; the first `prefix`
/// positions are always visible.
pub fn key_padding_mask(lengths: &[usize], prefix: usize, total: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let width = prefix + total;
    let mut v = vec![0.0f64; lengths.len() * width];
    for (b, &len) in lengths.iter().enumerate() {
        for t in prefix + len..width {
            v[b * width + t] = MASK_NEG;
        }
    }
    Tensor::from_vec(v, (lengths.len(), 1, 1, width), device)?.to_dtype(dtype)
}

/// Additive causal mask `[1, 1, T, T]`.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0.0f64; len * len];
    for i in 0..len {
        for j in i + 1..len {
            v[i * len + j] = MASK_NEG;
        }
    }
    Tensor::from_vec(v, (1, 1, len, len), device)?.to_dtype(dtype)
}

/// Validity mask `[B, T]` with ones on the first `lengths[b]` steps.
pub fn length_mask(lengths: &[usize], total: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0.0f64; lengths.len() * total];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(total) {
            v[b * total + t] = 1.0;
        }
    }
    Tensor::from_vec(v, (lengths.len(), total), device)?.to_dtype(dtype)
}
