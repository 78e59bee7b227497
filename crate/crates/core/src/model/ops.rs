//! Fused CPU kernels with hand-written gradients for the elementwise-heavy
//! pieces of a Transformer layer: layer normalization, last-axis softmax and
//! exact GELU.

use candle_core::cpu::erf::erf_f64;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Error, Layout, Result, Shape, Tensor};

fn read(storage: &CpuStorage, layout: &Layout) -> Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| Error::Msg("fused op expects a contiguous input".into()))?;
    match storage {
        CpuStorage::F32(v) => Ok(v[start..end].iter().map(|&x| x as f64).collect()),
        CpuStorage::F64(v) => Ok(v[start..end].to_vec()),
        _ => Err(Error::Msg("fused op supports f32 and f64 only".into())),
    }
}

fn write(values: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(values.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(values),
    }
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn tensor(values: Vec<f64>, shape: &Shape, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(values, shape.clone(), like.device())?.to_dtype(like.dtype())
}

struct LayerNormOp {
    eps: f64,
}

impl LayerNormOp {
    /// Normalized rows and their inverse standard deviations.
    fn normalize(&self, x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut y = vec![0.0; x.len()];
        let mut inv = Vec::with_capacity(x.len() / dim);
        for (row, out) in x.chunks_exact(dim).zip(y.chunks_exact_mut(dim)) {
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let r = 1.0 / (var + self.eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv.push(r);
        }
        (y, inv)
    }
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = read(s1, l1)?;
        let g = read(s2, l2)?;
        let b = read(s3, l3)?;
        let dim = g.len();
        let (mut y, _) = self.normalize(&x, dim);
        for row in y.chunks_exact_mut(dim) {
            for ((o, gi), bi) in row.iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        Ok((write(y, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xs = values(x)?;
        let gs = values(grad)?;
        let gm = values(gamma)?;
        let dim = gm.len();
        let (y, inv) = self.normalize(&xs, dim);
        let mut dx = vec![0.0; xs.len()];
        let mut dgamma = vec![0.0; dim];
        let mut dbeta = vec![0.0; dim];
        for (r, &ri) in inv.iter().enumerate() {
            let yr = &y[r * dim..(r + 1) * dim];
            let gr = &gs[r * dim..(r + 1) * dim];
            let mut mean_g = 0.0;
            let mut mean_gy = 0.0;
            for k in 0..dim {
                let gy = gr[k] * gm[k];
                mean_g += gy;
                mean_gy += gy * yr[k];
                dgamma[k] += gr[k] * yr[k];
                dbeta[k] += gr[k];
            }
            mean_g /= dim as f64;
            mean_gy /= dim as f64;
            for k in 0..dim {
                dx[r * dim + k] = ri * (gr[k] * gm[k] - mean_g - yr[k] * mean_gy);
            }
        }
        Ok((
            Some(tensor(dx, x.shape(), x)?),
            Some(tensor(dgamma, gamma.shape(), gamma)?),
            Some(tensor(dbeta, beta.shape(), beta)?),
        ))
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}

struct SoftmaxOp;

impl CustomOp1 for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let x = read(storage, layout)?;
        let dim = layout.dims().last().copied().unwrap_or(1);
        let mut y = vec![0.0; x.len()];
        for (row, out) in x.chunks_exact(dim).zip(y.chunks_exact_mut(dim)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        Ok((write(y, storage), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let y = values(res)?;
        let g = values(grad)?;
        let dim = arg.dims().last().copied().unwrap_or(1);
        let mut dx = vec![0.0; y.len()];
        for ((yr, gr), out) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(dx.chunks_exact_mut(dim)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                out[k] = yr[k] * (gr[k] - dot);
            }
        }
        Ok(Some(tensor(dx, arg.shape(), arg)?))
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxOp)
}

struct GeluOp;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl CustomOp1 for GeluOp {
    fn name(&self) -> &'static str {
        "gelu-erf"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let y = read(storage, layout)?.into_iter().map(|v| 0.5 * v * (1.0 + erf_f64(v * FRAC_1_SQRT_2))).collect();
        Ok((write(y, storage), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let x = values(arg)?;
        let g = values(grad)?;
        let dx = x
            .iter()
            .zip(&g)
            .map(|(&v, &gv)| {
                let cdf = 0.5 * (1.0 + erf_f64(v * FRAC_1_SQRT_2));
                let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
                gv * (cdf + v * pdf)
            })
            .collect();
        Ok(Some(tensor(dx, arg.shape(), arg)?))
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(GeluOp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < tol, "max diff {d}");
    }

    fn grads_of(f: impl Fn(&Tensor) -> Tensor, x: &Var, w: &Tensor) -> Tensor {
        let y = f(x.as_tensor());
        let g = (y * w).unwrap().sum_all().unwrap().backward().unwrap();
        g.get(x.as_tensor()).unwrap().clone()
    }

    #[test]
    fn layer_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 2.0, (3, 5, 8), &dev).unwrap();
        let gamma = Var::randn(1f64, 0.3, 8, &dev).unwrap();
        let beta = Var::randn(0f64, 0.3, 8, &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 5, 8), &dev).unwrap();
        let composed = |x: &Tensor| {
            let mean = x.mean_keepdim(D::Minus1).unwrap();
            let c = x.broadcast_sub(&mean).unwrap();
            let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
            let n = c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
            n.broadcast_mul(gamma.as_tensor()).unwrap().broadcast_add(beta.as_tensor()).unwrap()
        };
        let fused = |x: &Tensor| layer_norm(x, gamma.as_tensor(), beta.as_tensor(), 1e-5).unwrap();
        close(&composed(x.as_tensor()), &fused(x.as_tensor()), 1e-12);
        let ga = composed(x.as_tensor()).mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = fused(x.as_tensor()).mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            close(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap(), 1e-10);
        }
    }

    #[test]
    fn softmax_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 3.0, (2, 3, 7), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 7), &dev).unwrap();
        let composed = |x: &Tensor| {
            let e = x.broadcast_sub(&x.max_keepdim(D::Minus1).unwrap().detach()).unwrap().exp().unwrap();
            e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
        };
        close(&composed(x.as_tensor()), &softmax_last(x.as_tensor()).unwrap(), 1e-14);
        close(&grads_of(composed, &x, &w), &grads_of(|t| softmax_last(t).unwrap(), &x, &w), 1e-12);
    }

    #[test]
    fn gelu_closed_form_and_gradient() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-1.0f64, 0.0, 1.0], &dev).unwrap();
        let y = gelu(&x).unwrap().to_vec1::<f64>().unwrap();
        let erf1 = 0.6826894921370859;
        assert!((y[0] - (-0.5 * (1.0 - erf1))).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 0.5 * (1.0 + erf1)).abs() < 1e-12);

        let x = Var::randn(0f64, 2.0, (4, 9), &dev).unwrap();
        let w = Tensor::ones((4, 9), DType::F64, &dev).unwrap();
        let g = grads_of(|t| gelu(t).unwrap(), &x, &w).flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        for (xi, gi) in xs.iter().zip(&g) {
            let f = |v: f64| gelu(&Tensor::new(&[v], &dev).unwrap()).unwrap().to_vec1::<f64>().unwrap()[0];
            let fd = (f(xi + h) - f(xi - h)) / (2.0 * h);
            assert!((fd - gi).abs() < 1e-8, "{xi}: {fd} vs {gi}");
        }
    }

    #[test]
    fn f32_inputs_keep_dtype() {
        let x = Tensor::randn(0f32, 1.0, (2, 4), &Device::Cpu).unwrap();
        assert_eq!(gelu(&x).unwrap().dtype(), DType::F32);
        assert_eq!(softmax_last(&x).unwrap().dtype(), DType::F32);
    }
}
