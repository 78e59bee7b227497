//! Conversion between [`Motion`]s and padded feature tensors.

use candle_core::{DType, Device, Tensor};

use crate::body::{FramePose, Motion};
use crate::error::{Error, Result};
use crate::rotations::{self, RotationRep};

/// Layout of one frame's feature vector: every joint's rotation coordinates
/// followed by the optional root displacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joints: usize,
    pub rep: RotationRep,
    pub translation: bool,
}

impl FeatureLayout {
    pub fn rotation_dim(&self) -> usize {
        self.joints * self.rep.dim()
    }

    pub fn frame_dim(&self) -> usize {
        self.rotation_dim() + if self.translation { 3 } else { 0 }
    }

    /// Flattened `[T * frame_dim]` features.
    pub fn encode(&self, motion: &Motion) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(motion.len() * self.frame_dim());
        for f in &motion.frames {
            if f.rotations.len() != self.joints {
                return Err(Error::ShapeMismatch { expected: self.joints, got: f.rotations.len() });
            }
            for r in &f.rotations {
                match self.rep {
                    RotationRep::SixD => out.extend_from_slice(&r.0),
                    rep => out.extend(rep.encode(&rotations::sixd_to_matrix(r)?)),
                }
            }
            if self.translation {
                out.extend_from_slice(&f.displacement);
            }
        }
        Ok(out)
    }

    /// Inverse of [`FeatureLayout::encode`] for `frames` frames.
    pub fn decode(&self, values: &[f64], frames: usize, action: usize, fps: f64) -> Motion {
        let fd = self.frame_dim();
        let rd = self.rep.dim();
        let frames = (0..frames)
            .map(|t| {
                let row = &values[t * fd..(t + 1) * fd];
                FramePose {
                    rotations: (0..self.joints).map(|j| self.rep.decode_to_sixd(&row[j * rd..(j + 1) * rd])).collect(),
                    displacement: if self.translation {
                        [row[fd - 3], row[fd - 2], row[fd - 1]]
                    } else {
                        [0.0; 3]
                    },
                }
            })
            .collect();
        Motion { frames, action, fps }
    }
}

/// A padded minibatch.
#[derive(Clone, Debug)]
pub struct MotionBatch {
    /// `[B, T, F]`, zero on padded steps.
    pub features: Tensor,
    /// `[B, T]`, one on valid steps.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub actions: Vec<usize>,
}

impl MotionBatch {
    pub fn new(motions: &[&Motion], layout: &FeatureLayout, dtype: DType, device: &Device) -> Result<Self> {
        if motions.is_empty() {
            return Err(Error::EmptyInput);
        }
        let lengths: Vec<usize> = motions.iter().map(|m| m.len()).collect();
        if lengths.contains(&0) {
            return Err(Error::EmptySequence);
        }
        let t = *lengths.iter().max().unwrap();
        let fd = layout.frame_dim();
        let mut data = vec![0.0f64; motions.len() * t * fd];
        for (b, m) in motions.iter().enumerate() {
            let f = layout.encode(m)?;
            data[b * t * fd..b * t * fd + f.len()].copy_from_slice(&f);
        }
        let features = Tensor::from_vec(data, (motions.len(), t, fd), device)?.to_dtype(dtype)?;
        let mask = super::nn::length_mask(&lengths, t, dtype, device)?;
        Ok(MotionBatch { features, mask, lengths, actions: motions.iter().map(|m| m.action).collect() })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn is_padded(&self) -> bool {
        self.lengths.iter().any(|&l| l != self.max_len())
    }
}

/// Splits a `[B, T, F]` prediction into motions truncated to `lengths`.
pub fn tensor_to_motions(
    pred: &Tensor,
    layout: &FeatureLayout,
    lengths: &[usize],
    actions: &[usize],
    fps: f64,
) -> Result<Vec<Motion>> {
    let (b, t, fd) = pred.dims3()?;
    let flat: Vec<f64> = pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| layout.decode(&flat[i * t * fd..(i + 1) * t * fd], lengths[i], actions[i], fps))
        .collect())
}
