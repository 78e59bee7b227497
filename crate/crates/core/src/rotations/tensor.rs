//! Differentiable batched rotation conversions on candle tensors.
//!
//! All functions take `[..., k]` inputs and return `[..., 3, 3]` matrices
//! indexed `[row, col]`.

use candle_core::{Result, Tensor, D};

use super::RotationRep;

const NORM_EPS: f64 = 1e-12;

fn comp(x: &Tensor, i: usize) -> Result<Tensor> {
    x.narrow(D::Minus1, i, 1)
}

fn normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    x.broadcast_div(&n)
}

/// Cross product over the last axis.
pub fn cross(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (ux, uy, uz) = (comp(u, 0)?, comp(u, 1)?, comp(u, 2)?);
    let (vx, vy, vz) = (comp(v, 0)?, comp(v, 1)?, comp(v, 2)?);
    Tensor::cat(
        &[
            ((&uy * &vz)? - (&uz * &vy)?)?,
            ((&uz * &vx)? - (&ux * &vz)?)?,
            ((&ux * &vy)? - (&uy * &vx)?)?,
        ],
        D::Minus1,
    )
}

/// Gram-Schmidt on `[..., 6]`.
pub fn sixd_to_matrix(x: &Tensor) -> Result<Tensor> {
    let a = x.narrow(D::Minus1, 0, 3)?;
    let b = x.narrow(D::Minus1, 3, 3)?;
    let b1 = normalize(&a)?;
    let dot = (&b1 * &b)?.sum_keepdim(D::Minus1)?;
    let b2 = normalize(&(b - b1.broadcast_mul(&dot)?)?)?;
    let b3 = cross(&b1, &b2)?;
    Tensor::stack(&[b1, b2, b3], D::Minus1)
}

fn from_rows(rows: [[Tensor; 3]; 3]) -> Result<Tensor> {
    let rows = rows
        .into_iter()
        .map(|r| Tensor::cat(&r, D::Minus1))
        .collect::<Result<Vec<_>>>()?;
    let nd = rows[0].rank();
    Tensor::stack(&rows, nd - 1)
}

/// Rodrigues on `[..., 3]` rotation vectors.
pub fn axis_angle_to_matrix(v: &Tensor) -> Result<Tensor> {
    let theta = (v.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    let k = v.broadcast_div(&theta)?;
    let (s, c) = (theta.sin()?, theta.cos()?);
    let one_c = c.affine(-1.0, 1.0)?;
    let (kx, ky, kz) = (comp(&k, 0)?, comp(&k, 1)?, comp(&k, 2)?);
    let outer = |a: &Tensor, b: &Tensor| -> Result<Tensor> { (a * b)? * &one_c };
    from_rows([
        [
            (&c + outer(&kx, &kx)?)?,
            (outer(&kx, &ky)? - (&kz * &s)?)?,
            (outer(&kx, &kz)? + (&ky * &s)?)?,
        ],
        [
            (outer(&ky, &kx)? + (&kz * &s)?)?,
            (&c + outer(&ky, &ky)?)?,
            (outer(&ky, &kz)? - (&kx * &s)?)?,
        ],
        [
            (outer(&kz, &kx)? - (&ky * &s)?)?,
            (outer(&kz, &ky)? + (&kx * &s)?)?,
            (&c + outer(&kz, &kz)?)?,
        ],
    ])
}

/// `[..., 4]` quaternions in (w, x, y, z) order, normalized first.
pub fn quaternion_to_matrix(q: &Tensor) -> Result<Tensor> {
    let q = normalize(q)?;
    let (w, x, y, z) = (comp(&q, 0)?, comp(&q, 1)?, comp(&q, 2)?, comp(&q, 3)?);
    let two = |a: &Tensor, b: &Tensor| -> Result<Tensor> { (a * b)? * 2.0 };
    let one_minus = |a: Tensor, b: Tensor| -> Result<Tensor> { (a + b)?.affine(-1.0, 1.0) };
    from_rows([
        [
            one_minus(two(&y, &y)?, two(&z, &z)?)?,
            (two(&x, &y)? - two(&w, &z)?)?,
            (two(&x, &z)? + two(&w, &y)?)?,
        ],
        [
            (two(&x, &y)? + two(&w, &z)?)?,
            one_minus(two(&x, &x)?, two(&z, &z)?)?,
            (two(&y, &z)? - two(&w, &x)?)?,
        ],
        [
            (two(&x, &z)? - two(&w, &y)?)?,
            (two(&y, &z)? + two(&w, &x)?)?,
            one_minus(two(&x, &x)?, two(&y, &y)?)?,
        ],
    ])
}

/// Raw column-major `[..., 9]` values reshaped without projection.
pub fn raw_matrix(x: &Tensor) -> Result<Tensor> {
    let mut dims = x.dims().to_vec();
    dims.pop();
    dims.extend([3, 3]);
    x.reshape(dims)?.transpose(D::Minus2, D::Minus1)
}

/// Dispatches on the representation; input is `[..., rep.dim()]`.
pub fn to_matrix(rep: RotationRep, x: &Tensor) -> Result<Tensor> {
    match rep {
        RotationRep::SixD => sixd_to_matrix(x),
        RotationRep::AxisAngle => axis_angle_to_matrix(x),
        RotationRep::Quaternion => quaternion_to_matrix(x),
        RotationRep::Matrix => raw_matrix(x),
    }
}

/// Batched `a @ b` for `[..., 3, 3]` via broadcast multiply-sum; avoids one
/// tiny GEMM per batch element.
pub fn matmul3(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let r = a.rank();
    // a[..., i, k, 1] * b[..., 1, k, j] summed over k
    a.unsqueeze(r)?.broadcast_mul(&b.unsqueeze(r - 2)?)?.sum(r - 1)
}

/// Batched `m @ v` for `[..., 3, 3]` and `[..., 3]`.
pub fn matvec3(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let r = v.rank();
    m.broadcast_mul(&v.unsqueeze(r - 1)?)?.sum(r)
}
