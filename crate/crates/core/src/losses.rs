//! Reconstruction and KL objectives, on single motions (`f64`) and on padded
//! training batches (differentiable tensors).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::body::{self, BodyModel, Motion, Vec3};
use crate::error::{Error, Result};
use crate::model::batch::{FeatureLayout, MotionBatch};
use crate::model::{kl_rows, ForwardOutput};

/// How per-frame errors are combined along time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeReduction {
    #[default]
    Sum,
    Mean,
}

/// Which terms enter the total and the KL weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub rotation: bool,
    pub displacement: bool,
    pub vertices: bool,
    pub joints: bool,
    pub time_reduction: TimeReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kl: 1e-5,
            rotation: true,
            displacement: true,
            vertices: true,
            joints: false,
            time_reduction: TimeReduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_kl must be finite and >= 0, got {}", self.lambda_kl)));
        }
        if !(self.rotation || self.displacement || self.vertices || self.joints) {
            return Err(Error::InvalidConfig("at least one reconstruction term must be enabled".into()));
        }
        Ok(())
    }

    /// Only the given terms, with the default KL weight.
    pub fn only(rotation: bool, displacement: bool, vertices: bool, joints: bool) -> Self {
        LossWeights { rotation, displacement, vertices, joints, ..LossWeights::default() }
    }
}

/// Unweighted value of every term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rotation: f64,
    pub displacement: f64,
    pub vertices: f64,
    pub joints: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the enabled terms.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        on(w.rotation, self.rotation)
            + on(w.displacement, self.displacement)
            + on(w.vertices, self.vertices)
            + on(w.joints, self.joints)
            + w.lambda_kl * self.kl
    }

    pub fn is_finite(&self) -> bool {
        [self.rotation, self.displacement, self.vertices, self.joints, self.kl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_lengths(gt: &Motion, pred: &Motion) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::LengthMismatch(gt.len(), pred.len()));
    }
    for (a, b) in gt.frames.iter().zip(&pred.frames) {
        if a.rotations.len() != b.rotations.len() {
            return Err(Error::ShapeMismatch { expected: a.rotations.len(), got: b.rotations.len() });
        }
    }
    Ok(())
}

/// `L_R`: squared error over all 6D rotation coordinates, summed over frames.
pub fn loss_rotation(gt: &Motion, pred: &Motion) -> Result<f64> {
    check_lengths(gt, pred)?;
    Ok(gt
        .frames
        .iter()
        .zip(&pred.frames)
        .flat_map(|(a, b)| a.rotations.iter().zip(&b.rotations))
        .flat_map(|(ra, rb)| ra.0.iter().zip(&rb.0))
        .map(|(x, y)| (x - y).powi(2))
        .sum())
}

/// `L_D`: squared error of the root displacement, summed over frames.
pub fn loss_displacement(gt: &Motion, pred: &Motion) -> Result<f64> {
    check_lengths(gt, pred)?;
    Ok(gt
        .frames
        .iter()
        .zip(&pred.frames)
        .flat_map(|(a, b)| a.displacement.iter().zip(&b.displacement))
        .map(|(x, y)| (x - y).powi(2))
        .sum())
}

/// `L_P = L_R + L_D` when translation is part of the pose, `L_R` otherwise.
pub fn loss_pose(gt: &Motion, pred: &Motion, with_translation: bool) -> Result<f64> {
    let r = loss_rotation(gt, pred)?;
    Ok(if with_translation { r + loss_displacement(gt, pred)? } else { r })
}

fn point_loss(gt: &Motion, pred: &Motion, f: impl Fn(&crate::body::FramePose) -> Result<Vec<Vec3>>) -> Result<f64> {
    check_lengths(gt, pred)?;
    let mut total = 0.0;
    for (a, b) in gt.frames.iter().zip(&pred.frames) {
        let pa = f(a)?;
        let pb = f(b)?;
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).norm_squared()).sum::<f64>();
    }
    Ok(total)
}

/// `L_V`: squared error of root-centered surface points.
pub fn loss_vertices(gt: &Motion, pred: &Motion, body: &dyn BodyModel) -> Result<f64> {
    point_loss(gt, pred, |p| body.surface(p))
}

/// `L_J`: squared error of root-centered joint positions.
pub fn loss_joints(gt: &Motion, pred: &Motion, body: &dyn BodyModel) -> Result<f64> {
    point_loss(gt, pred, |p| body.joints(p, false))
}

/// KL divergence of `N(mu, diag(exp(logvar)))` from `N(0, I)`.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

/// Every term for one sequence, combined by `weights`.
pub fn total_loss(
    gt: &Motion,
    pred: &Motion,
    mu: &[f64],
    logvar: &[f64],
    weights: &LossWeights,
    body: &dyn BodyModel,
) -> Result<LossBreakdown> {
    let scale = match weights.time_reduction {
        TimeReduction::Sum => 1.0,
        TimeReduction::Mean => 1.0 / gt.len().max(1) as f64,
    };
    let mut b = LossBreakdown {
        rotation: loss_rotation(gt, pred)? * scale,
        displacement: loss_displacement(gt, pred)? * scale,
        vertices: if weights.vertices { loss_vertices(gt, pred, body)? * scale } else { 0.0 },
        joints: if weights.joints { loss_joints(gt, pred, body)? * scale } else { 0.0 },
        kl: kl_loss(mu, logvar),
        total: 0.0,
    };
    b.total = b.weighted(weights);
    Ok(b)
}

/// Differentiable total over a padded batch, with per-term values.
pub struct BatchLoss {
    pub total: Tensor,
    pub terms: LossBreakdown,
}

/// Per-sequence sums over valid frames, then the batch mean. `per_frame` is `[B, T]`.
fn reduce(per_frame: &Tensor, batch: &MotionBatch, reduction: TimeReduction) -> candle_core::Result<Tensor> {
    let per_seq = (per_frame * &batch.mask)?.sum(1)?;
    let per_seq = match reduction {
        TimeReduction::Sum => per_seq,
        TimeReduction::Mean => per_seq.broadcast_div(&batch.mask.sum(1)?)?,
    };
    per_seq.mean(0)
}

/// Loss of a training forward pass against the batch it was computed on.
pub fn batch_loss(
    out: &ForwardOutput,
    batch: &MotionBatch,
    layout: &FeatureLayout,
    body: &dyn BodyModel,
    weights: &LossWeights,
) -> Result<BatchLoss> {
    let (b, t, f) = out.pred.dims3()?;
    if batch.features.dims3()? != (b, t, f) {
        return Err(Error::ShapeMismatch { expected: b * t * f, got: batch.features.elem_count() });
    }
    let rd = layout.rotation_dim();
    let pred_rot = out.pred.narrow(2, 0, rd)?;
    let gt_rot = batch.features.narrow(2, 0, rd)?;
    let zero = || Tensor::zeros((), out.pred.dtype(), out.pred.device());
    let red = weights.time_reduction;

    let rotation = reduce(&(&pred_rot - &gt_rot)?.sqr()?.sum(D::Minus1)?, batch, red)?;
    let displacement = if layout.translation {
        let d = (out.pred.narrow(2, rd, 3)? - batch.features.narrow(2, rd, 3)?)?;
        reduce(&d.sqr()?.sum(D::Minus1)?, batch, red)?
    } else {
        zero()?
    };
    let points = |f: fn(&dyn BodyModel, crate::rotations::RotationRep, &Tensor) -> candle_core::Result<Tensor>|
     -> candle_core::Result<Tensor> {
        let p = f(body, layout.rep, &pred_rot.reshape((b * t, rd))?)?;
        let g = f(body, layout.rep, &gt_rot.reshape((b * t, rd))?)?.detach();
        reduce(&body::squared_point_error(&p, &g)?.reshape((b, t))?, batch, red)
    };
    let vertices = if weights.vertices { points(body::surface_from_features)? } else { zero()? };
    let joints = if weights.joints { points(body::joints_from_features)? } else { zero()? };
    let kl = kl_rows(&out.mu, &out.logvar)?.mean(0)?;

    let mut total = zero()?;
    for (on, term) in [
        (weights.rotation, &rotation),
        (weights.displacement && layout.translation, &displacement),
        (weights.vertices, &vertices),
        (weights.joints, &joints),
    ] {
        if on {
            total = (total + term)?;
        }
    }
    let total = (total + (&kl * weights.lambda_kl)?)?;
    let scalar = |x: &Tensor| -> candle_core::Result<f64> { x.to_dtype(DType::F64)?.to_scalar::<f64>() };
    let terms = LossBreakdown {
        rotation: scalar(&rotation)?,
        displacement: scalar(&displacement)?,
        vertices: scalar(&vertices)?,
        joints: scalar(&joints)?,
        kl: scalar(&kl)?,
        total: scalar(&total)?,
    };
    Ok(BatchLoss { total, terms })
}
