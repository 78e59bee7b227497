//! Skeletal body model: forward kinematics, rigid surface points and
//! frontal canonicalization.
//!
//! [`BodyModel`] is the seam where a mesh-based body model could be plugged
//! in. The built-in [`Skeleton`] is a 24-joint rigid tree with box-corner
//! surface points attached to each bone; shape is fixed to the mean body.
//!
//! Conventions: +y is up, +z is the facing direction, lengths in meters.

use std::path::Path;

use candle_core::{Tensor, D};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Strategy};
use crate::rotations::{self, tensor as rt, Rot6D, RotMatrix};

pub type Vec3 = Vector3<f64>;

/// Joint names of the default skeleton, in kinematic-tree order.
pub const DEFAULT_JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

const DEFAULT_PARENTS: [i32; 24] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

const DEFAULT_OFFSETS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.01],
    [-0.01, -0.40, -0.04],
    [0.01, -0.40, -0.04],
    [0.0, 0.05, 0.03],
    [0.02, -0.06, 0.12],
    [-0.02, -0.06, 0.12],
    [0.0, 0.21, -0.03],
    [0.07, 0.11, -0.02],
    [-0.07, 0.11, -0.02],
    [0.0, 0.09, 0.05],
    [0.11, 0.05, -0.01],
    [-0.11, 0.05, -0.01],
    [0.26, -0.01, -0.02],
    [-0.26, -0.01, -0.02],
    [0.25, 0.01, 0.0],
    [-0.25, 0.01, 0.0],
    [0.08, -0.01, -0.01],
    [-0.08, -0.01, -0.01],
];

/// Half-width of the box whose corners form each bone's surface points.
pub const SURFACE_BOX_RADIUS: f64 = 0.05;

/// Rigid kinematic tree. Joint 0 is the root and every parent index is
/// smaller than its child's, which makes the tree acyclic by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
    surface_offsets: Vec<Vec<Vec3>>,
}

/// One frame: per-joint 6D rotations plus root displacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub rotations: Vec<Rot6D>,
    pub displacement: [f64; 3],
}

/// A labeled pose sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub frames: Vec<FramePose>,
    pub action: usize,
    pub fps: f64,
}

/// `T x N` points, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub frames: Vec<Vec<Vec3>>,
}

pub type JointCloud = PointCloud;
pub type SurfaceCloud = PointCloud;

/// Maps poses to 3D points, both in f64 and as differentiable tensors.
pub trait BodyModel: Send + Sync {
    fn joint_count(&self) -> usize;
    fn surface_count(&self) -> usize;
    /// Joint positions; the root sits at the displacement if requested,
    /// otherwise at the origin.
    fn joints(&self, pose: &FramePose, apply_displacement: bool) -> Result<Vec<Vec3>>;
    /// Root-centered surface points.
    fn surface(&self, pose: &FramePose) -> Result<Vec<Vec3>>;
    /// `[N, J, 3, 3]` rotations to root-centered `[N, J, 3]` joints.
    fn joints_tensor(&self, rotmats: &Tensor) -> candle_core::Result<Tensor>;
    /// `[N, J, 3, 3]` rotations to root-centered `[N, S, 3]` surface points.
    fn surface_tensor(&self, rotmats: &Tensor) -> candle_core::Result<Tensor>;
}

#[derive(Deserialize)]
struct SkeletonFile {
    joint: Vec<JointEntry>,
}

#[derive(Deserialize)]
struct JointEntry {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    offset: [f64; 3],
    #[serde(default)]
    surface: Option<Vec<[f64; 3]>>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::smpl_like()
    }
}

impl Skeleton {
    /// Builds and validates a skeleton. Empty surface lists get box corners.
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
        surface_offsets: Option<Vec<Vec<Vec3>>>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if parents.len() != n || rest_offsets.len() != n {
            return Err(Error::InvalidSkeleton("array lengths differ".into()));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {j} must have a parent listed before it"
                    )))
                }
            }
        }
        if rest_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidSkeleton("non-finite rest offset".into()));
        }
        let surface_offsets = match surface_offsets {
            Some(s) => {
                if s.len() != n {
                    return Err(Error::InvalidSkeleton("surface list per joint required".into()));
                }
                s
            }
            None => box_surfaces(&parents, &rest_offsets),
        };
        let total: usize = surface_offsets.iter().map(Vec::len).sum();
        if total < n {
            return Err(Error::InvalidSkeleton(format!(
                "need at least {n} surface points, got {total}"
            )));
        }
        Ok(Skeleton { names, parents, rest_offsets, surface_offsets })
    }

    /// The 24-joint default figure (about 1.7 m tall), 192 surface points.
    pub fn smpl_like() -> Self {
        let parents = DEFAULT_PARENTS
            .iter()
            .map(|&p| (p >= 0).then_some(p as usize))
            .collect();
        let offsets = DEFAULT_OFFSETS.iter().map(|o| Vec3::new(o[0], o[1], o[2])).collect();
        let names = DEFAULT_JOINT_NAMES.iter().map(|s| s.to_string()).collect();
        Skeleton::new(names, parents, offsets, None).expect("default skeleton is valid")
    }

    /// A straight chain of `n` joints, each offset from its parent.
    pub fn chain(n: usize, offset: Vec3) -> Result<Self> {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let parents = (0..n).map(|i| i.checked_sub(1)).collect();
        let offsets = (0..n).map(|i| if i == 0 { Vec3::zeros() } else { offset }).collect();
        Skeleton::new(names, parents, offsets, None)
    }

    /// Parses the TOML skeleton description (`[[joint]]` tables with `name`,
    /// optional `parent` name, `offset` and optional `surface` points).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| Error::InvalidSkeleton(e.to_string()))?;
        let names: Vec<String> = file.joint.iter().map(|j| j.name.clone()).collect();
        let mut parents = Vec::with_capacity(names.len());
        for j in &file.joint {
            let p = match &j.parent {
                None => None,
                Some(pn) => Some(names.iter().position(|n| n == pn).ok_or_else(|| {
                    Error::InvalidSkeleton(format!("unknown parent `{pn}`"))
                })?),
            };
            parents.push(p);
        }
        let offsets = file.joint.iter().map(|j| Vec3::from(j.offset)).collect();
        let surfaces = if file.joint.iter().all(|j| j.surface.is_some()) {
            Some(
                file.joint
                    .iter()
                    .map(|j| j.surface.as_ref().unwrap().iter().map(|p| Vec3::from(*p)).collect())
                    .collect(),
            )
        } else {
            None
        };
        Skeleton::new(names, parents, offsets, surfaces)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }

    pub fn surface_offsets(&self) -> &[Vec<Vec3>] {
        &self.surface_offsets
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn global_transforms(&self, pose: &FramePose, apply_displacement: bool) -> Result<(Vec<RotMatrix>, Vec<Vec3>)> {
        let n = self.names.len();
        if pose.rotations.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: pose.rotations.len() });
        }
        let mut globals: Vec<RotMatrix> = Vec::with_capacity(n);
        let mut positions: Vec<Vec3> = Vec::with_capacity(n);
        for j in 0..n {
            let local = rotations::sixd_to_matrix(&pose.rotations[j])?;
            match self.parents[j] {
                None => {
                    globals.push(local);
                    positions.push(if apply_displacement {
                        Vec3::from(pose.displacement)
                    } else {
                        Vec3::zeros()
                    });
                }
                Some(p) => {
                    let g = globals[p];
                    positions.push(positions[p] + g.apply(&self.rest_offsets[j]));
                    globals.push(g.compose(&local));
                }
            }
        }
        Ok((globals, positions))
    }

    /// Per-joint surface offsets as `[J, 3, K]` columns, padded to the largest
    /// count `K`, plus the indices of the real points when padding was needed.
    fn surface_columns(&self) -> (Vec<f64>, usize, Option<Vec<u32>>) {
        let k = self.surface_offsets.iter().map(|p| p.len()).max().unwrap_or(0);
        let n = self.names.len();
        let mut cols = vec![0.0; n * 3 * k];
        let mut keep = Vec::new();
        for (j, pts) in self.surface_offsets.iter().enumerate() {
            for (i, p) in pts.iter().enumerate() {
                for c in 0..3 {
                    cols[(j * 3 + c) * k + i] = p[c];
                }
                keep.push((j * k + i) as u32);
            }
        }
        let padded = keep.len() != n * k;
        (cols, k, padded.then_some(keep))
    }

    /// Joint-major global rotations `[J, N, 3, 3]` and positions `[J, N, 3]`.
    fn tensor_fk(&self, rotmats: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let n = self.names.len();
        let (_, j, _, _) = rotmats.dims4()?;
        if j != n {
            candle_core::bail!("expected {n} joints, got {j}");
        }
        let dev = rotmats.device();
        let dtype = rotmats.dtype();
        let rotmats = rotmats.transpose(0, 1)?.contiguous()?;
        let mut globals: Vec<Tensor> = Vec::with_capacity(n);
        let mut positions: Vec<Tensor> = Vec::with_capacity(n);
        for j in 0..n {
            let local = rotmats.get(j)?;
            match self.parents[j] {
                None => {
                    let batch = local.dim(0)?;
                    positions.push(Tensor::zeros((batch, 3), dtype, dev)?);
                    globals.push(local);
                }
                Some(p) => {
                    let off = Tensor::from_slice(self.rest_offsets[j].as_slice(), (1, 3), dev)?
                        .to_dtype(dtype)?;
                    let pos = (&positions[p] + rt::matvec3(&globals[p], &off)?)?;
                    let g = rt::matmul3(&globals[p], &local)?;
                    positions.push(pos);
                    globals.push(g);
                }
            }
        }
        Ok((Tensor::stack(&globals, 0)?, Tensor::stack(&positions, 0)?))
    }

    /// Joint positions for every frame of a motion.
    pub fn motion_joints(&self, motion: &Motion, apply_displacement: bool, strategy: Strategy) -> Result<JointCloud> {
        let frames = par::map_slice(&motion.frames, strategy, |f| self.joints(f, apply_displacement));
        Ok(PointCloud { frames: frames.into_iter().collect::<Result<_>>()? })
    }

    /// Root-centered surface points for every frame of a motion.
    pub fn motion_surface(&self, motion: &Motion, strategy: Strategy) -> Result<SurfaceCloud> {
        let frames = par::map_slice(&motion.frames, strategy, |f| self.surface(f));
        Ok(PointCloud { frames: frames.into_iter().collect::<Result<_>>()? })
    }
}

fn box_surfaces(parents: &[Option<usize>], offsets: &[Vec3]) -> Vec<Vec<Vec3>> {
    let n = parents.len();
    (0..n)
        .map(|j| {
            let children: Vec<Vec3> = (0..n).filter(|&c| parents[c] == Some(j)).map(|c| offsets[c]).collect();
            let center = if children.is_empty() {
                Vec3::zeros()
            } else {
                children.iter().sum::<Vec3>() * (0.5 / children.len() as f64)
            };
            let r = SURFACE_BOX_RADIUS;
            let mut pts = Vec::with_capacity(8);
            for sx in [-r, r] {
                for sy in [-r, r] {
                    for sz in [-r, r] {
                        pts.push(center + Vec3::new(sx, sy, sz));
                    }
                }
            }
            pts
        })
        .collect()
}

impl BodyModel for Skeleton {
    fn joint_count(&self) -> usize {
        self.names.len()
    }

    fn surface_count(&self) -> usize {
        self.surface_offsets.iter().map(Vec::len).sum()
    }

    fn joints(&self, pose: &FramePose, apply_displacement: bool) -> Result<Vec<Vec3>> {
        Ok(self.global_transforms(pose, apply_displacement)?.1)
    }

    fn surface(&self, pose: &FramePose) -> Result<Vec<Vec3>> {
        let (globals, positions) = self.global_transforms(pose, false)?;
        let mut out = Vec::with_capacity(self.surface_count());
        for (j, pts) in self.surface_offsets.iter().enumerate() {
            for p in pts {
                out.push(positions[j] + globals[j].apply(p));
            }
        }
        Ok(out)
    }

    fn joints_tensor(&self, rotmats: &Tensor) -> candle_core::Result<Tensor> {
        self.tensor_fk(rotmats)?.1.transpose(0, 1)?.contiguous()
    }

    fn surface_tensor(&self, rotmats: &Tensor) -> candle_core::Result<Tensor> {
        let (globals, positions) = self.tensor_fk(rotmats)?;
        let (j, n, _, _) = globals.dims4()?;
        let dev = rotmats.device();
        let (cols, k, keep) = self.surface_columns();
        let cols = Tensor::from_vec(cols, (j, 3, k), dev)?.to_dtype(rotmats.dtype())?;
        let local = globals.reshape((j, n * 3, 3))?.matmul(&cols)?.reshape((j, n, 3, k))?;
        let pts = local.broadcast_add(&positions.unsqueeze(3)?)?;
        let pts = pts.permute((1, 0, 3, 2))?.contiguous()?.reshape((n, j * k, 3))?;
        match keep {
            Some(idx) => {
                let len = idx.len();
                pts.index_select(&Tensor::from_vec(idx, len, dev)?, 1)
            }
            None => Ok(pts),
        }
    }
}

/// Forward kinematics for one frame.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &FramePose, apply_displacement: bool) -> Result<Vec<Vec3>> {
    skeleton.joints(pose, apply_displacement)
}

/// Root-centered surface points for one frame.
pub fn surface_points(skeleton: &Skeleton, pose: &FramePose) -> Result<Vec<Vec3>> {
    skeleton.surface(pose)
}

impl FramePose {
    pub fn identity(joints: usize) -> Self {
        FramePose { rotations: vec![Rot6D::IDENTITY; joints], displacement: [0.0; 3] }
    }

    pub fn is_valid(&self) -> bool {
        self.displacement.iter().all(|v| v.is_finite())
            && self.rotations.iter().all(|r| rotations::sixd_to_matrix(r).is_ok())
    }
}

impl Motion {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.rotations.len())
    }

    /// Checks the structural invariants against a joint and action count.
    pub fn validate(&self, joints: usize, num_actions: usize) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.action >= num_actions {
            return Err(Error::UnknownAction { action: self.action, num_actions });
        }
        for f in &self.frames {
            if f.rotations.len() != joints {
                return Err(Error::ShapeMismatch { expected: joints, got: f.rotations.len() });
            }
            if !f.is_valid() {
                return Err(Error::DegenerateInput("frame has an invalid rotation".into()));
            }
        }
        Ok(())
    }

    /// Frames `[start, start + len)` as a new motion.
    pub fn crop(&self, start: usize, len: usize) -> Motion {
        Motion { frames: self.frames[start..start + len].to_vec(), action: self.action, fps: self.fps }
    }

    /// Root-relative per-frame displacement with 6D rotations re-projected.
    pub fn normalized(&self) -> Result<Motion> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Ok(FramePose {
                    rotations: f.rotations.iter().map(|r| r.normalized()).collect::<Result<_>>()?,
                    displacement: f.displacement,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Motion { frames, action: self.action, fps: self.fps })
    }

    /// Applies a global rotation to every frame's root orientation and
    /// displacement.
    pub fn rotated(&self, g: &RotMatrix) -> Result<Motion> {
        let mut out = self.clone();
        for f in &mut out.frames {
            let root = rotations::sixd_to_matrix(&f.rotations[0])?;
            f.rotations[0] = rotations::matrix_to_sixd(&g.compose(&root))?;
            f.displacement = (g.apply(&Vec3::from(f.displacement))).into();
        }
        Ok(out)
    }

    /// Shifts the displacement so the first frame's root sits at the origin.
    pub fn centered_first_frame(&self) -> Motion {
        let mut out = self.clone();
        if let Some(first) = self.frames.first() {
            let d0 = first.displacement;
            for f in &mut out.frames {
                for k in 0..3 {
                    f.displacement[k] -= d0[k];
                }
            }
        }
        out
    }
}

/// Horizontal facing direction of a root rotation, or `None` when the body
/// faces (nearly) straight up or down.
pub fn facing_yaw(root: &RotMatrix) -> Option<f64> {
    let f = root.apply(&Vec3::z());
    let h = (f.x * f.x + f.z * f.z).sqrt();
    (h >= 1e-6).then(|| f.x.atan2(f.z))
}

/// Rotates the whole motion about +y so that frame 1 faces +z.
pub fn canonicalize_frontal(motion: &Motion) -> Result<Motion> {
    let Some(first) = motion.frames.first() else {
        return Err(Error::EmptySequence);
    };
    let root = rotations::sixd_to_matrix(&first.rotations[0])?;
    match facing_yaw(&root) {
        Some(yaw) if yaw != 0.0 => motion.rotated(&RotMatrix::about_y(-yaw)),
        _ => Ok(motion.clone()),
    }
}

impl PointCloud {
    /// Subtracts the given per-frame root positions.
    pub fn root_center_with(&self, roots: &[Vec3]) -> Result<PointCloud> {
        if roots.len() != self.frames.len() {
            return Err(Error::LengthMismatch(roots.len(), self.frames.len()));
        }
        Ok(PointCloud {
            frames: self
                .frames
                .iter()
                .zip(roots)
                .map(|(pts, r)| pts.iter().map(|p| p - r).collect())
                .collect(),
        })
    }

    /// Subtracts point 0 (the root joint) in every frame.
    pub fn root_center(&self) -> PointCloud {
        PointCloud {
            frames: self
                .frames
                .iter()
                .map(|pts| match pts.first() {
                    Some(r) => pts.iter().map(|p| p - r).collect(),
                    None => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Differentiable root-centered joints straight from pose features
/// `[N, J * rep_dim]`.
pub fn joints_from_features(
    body: &dyn BodyModel,
    rep: rotations::RotationRep,
    rot_features: &Tensor,
) -> candle_core::Result<Tensor> {
    body.joints_tensor(&features_to_rotmats(body, rep, rot_features)?)
}

/// Differentiable root-centered surface points from pose features.
pub fn surface_from_features(
    body: &dyn BodyModel,
    rep: rotations::RotationRep,
    rot_features: &Tensor,
) -> candle_core::Result<Tensor> {
    body.surface_tensor(&features_to_rotmats(body, rep, rot_features)?)
}

fn features_to_rotmats(
    body: &dyn BodyModel,
    rep: rotations::RotationRep,
    rot_features: &Tensor,
) -> candle_core::Result<Tensor> {
    let n = rot_features.dim(0)?;
    let x = rot_features.reshape((n, body.joint_count(), rep.dim()))?;
    rt::to_matrix(rep, &x)
}

/// Sum of squared distances between two `[.., 3]` tensors over the last
/// two axes, per leading index.
pub(crate) fn squared_point_error(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.sqr()?.sum(D::Minus1)?.sum(D::Minus1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::{matrix_to_sixd, random_rotation};
    use approx::assert_abs_diff_eq;
    use candle_core::{Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(skel: &Skeleton, rng: &mut ChaCha8Rng) -> FramePose {
        use rand::Rng;
        FramePose {
            rotations: (0..skel.joint_count())
                .map(|_| matrix_to_sixd(&random_rotation(rng)).unwrap())
                .collect(),
            displacement: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        }
    }

    #[test]
    fn default_skeleton_shape() {
        let s = Skeleton::smpl_like();
        assert_eq!(s.joint_count(), 24);
        assert_eq!(s.surface_count(), 192);
        let rest = s.joints(&FramePose::identity(24), false).unwrap();
        let head = rest[s.joint_index("head").unwrap()].y;
        let ankle = rest[s.joint_index("left_foot").unwrap()].y;
        assert!((1.4..1.9).contains(&(head - ankle + 0.15)), "figure height");
    }

    #[test]
    fn invalid_skeletons_rejected() {
        let off = vec![Vec3::zeros(); 2];
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Skeleton::new(names.clone(), vec![Some(1), None], off.clone(), None).is_err());
        assert!(Skeleton::new(names.clone(), vec![None, Some(1)], off.clone(), None).is_err());
        assert!(Skeleton::new(names, vec![None, Some(0)], off, Some(vec![vec![], vec![]])).is_err());
    }

    #[test]
    fn identity_pose_accumulates_offsets() {
        let s = Skeleton::smpl_like();
        let pos = forward_kinematics(&s, &FramePose::identity(24), false).unwrap();
        for j in 1..24 {
            let p = s.parent(j).unwrap();
            assert_abs_diff_eq!(pos[j], pos[p] + s.rest_offsets()[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn two_bone_chain_hand_computed() {
        let s = Skeleton::chain(3, Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let mut pose = FramePose::identity(3);
        pose.rotations[1] = matrix_to_sixd(&RotMatrix::about_z(FRAC_PI_2)).unwrap();
        pose.displacement = [0.5, 0.0, -2.0];
        let pos = forward_kinematics(&s, &pose, true).unwrap();
        assert_abs_diff_eq!(pos[2], Vec3::new(-1.0, 1.0, 0.0) + Vec3::new(0.5, 0.0, -2.0), epsilon = 1e-12);
    }

    #[test]
    fn root_half_turn_negates_x_and_z() {
        let s = Skeleton::smpl_like();
        let rest = forward_kinematics(&s, &FramePose::identity(24), false).unwrap();
        let mut pose = FramePose::identity(24);
        pose.rotations[0] = matrix_to_sixd(&RotMatrix::about_y(PI)).unwrap();
        let turned = forward_kinematics(&s, &pose, false).unwrap();
        for (a, b) in rest.iter().zip(&turned) {
            assert_abs_diff_eq!(*b, Vec3::new(-a.x, a.y, -a.z), epsilon = 1e-12);
        }
    }

    #[test]
    fn joint_count_mismatch() {
        let s = Skeleton::smpl_like();
        assert!(matches!(
            forward_kinematics(&s, &FramePose::identity(3), false),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn surface_identity_and_rigidity() {
        let s = Skeleton::smpl_like();
        let joints = s.joints(&FramePose::identity(24), false).unwrap();
        let surf = surface_points(&s, &FramePose::identity(24)).unwrap();
        let mut k = 0;
        for (j, pts) in s.surface_offsets().iter().enumerate() {
            for p in pts {
                assert_abs_diff_eq!(surf[k], joints[j] + p, epsilon = 1e-15);
                k += 1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let posed = surface_points(&s, &random_pose(&s, &mut rng)).unwrap();
        // points 0..8 share bone 0; 8..16 share bone 1
        for base in [0, 8, 40] {
            for a in base..base + 8 {
                for b in base..base + 8 {
                    assert_abs_diff_eq!((surf[a] - surf[b]).norm(), (posed[a] - posed[b]).norm(), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn surface_matches_per_point_oracle() {
        let s = Skeleton::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pose = random_pose(&s, &mut rng);
            let surf = surface_points(&s, &pose).unwrap();
            // oracle: walk the chain from the root for every single point
            let mut k = 0;
            for (j, pts) in s.surface_offsets().iter().enumerate() {
                let mut chain = vec![j];
                while let Some(p) = s.parent(*chain.last().unwrap()) {
                    chain.push(p);
                }
                chain.reverse();
                for p in pts {
                    let mut g = nalgebra::Matrix3::identity();
                    let mut pos = Vec3::zeros();
                    for (i, &c) in chain.iter().enumerate() {
                        if i > 0 {
                            pos += g * s.rest_offsets()[c];
                        }
                        g *= rotations::sixd_to_matrix(&pose.rotations[c]).unwrap().0;
                    }
                    assert!((surf[k] - (pos + g * p)).norm() < 1e-6);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn tensor_fk_matches_scalar() {
        let s = Skeleton::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let poses: Vec<FramePose> = (0..5).map(|_| random_pose(&s, &mut rng)).collect();
        let feats: Vec<f64> = poses.iter().flat_map(|p| p.rotations.iter().flat_map(|r| r.0)).collect();
        let t = Tensor::from_vec(feats, (5, 24 * 6), &Device::Cpu).unwrap();
        let joints: Vec<Vec<Vec<f64>>> =
            joints_from_features(&s, rotations::RotationRep::SixD, &t).unwrap().to_vec3().unwrap();
        let surf: Vec<Vec<Vec<f64>>> =
            surface_from_features(&s, rotations::RotationRep::SixD, &t).unwrap().to_vec3().unwrap();
        for (i, p) in poses.iter().enumerate() {
            let j = s.joints(p, false).unwrap();
            let v = s.surface(p).unwrap();
            for k in 0..24 {
                assert!((Vec3::from_row_slice(&joints[i][k]) - j[k]).norm() < 1e-10);
            }
            for k in 0..192 {
                assert!((Vec3::from_row_slice(&surf[i][k]) - v[k]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn tensor_fk_gradients_match_finite_differences() {
        let s = Skeleton::chain(4, Vec3::new(0.1, 0.3, -0.2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pose = random_pose(&s, &mut rng);
        let base: Vec<f64> = pose.rotations.iter().flat_map(|r| r.0).collect();
        let weights = Tensor::from_vec(
            (0..s.surface_count() * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect::<Vec<_>>(),
            (1, s.surface_count(), 3),
            &Device::Cpu,
        )
        .unwrap();
        let scalar = |x: &Tensor| -> Tensor {
            let pts = surface_from_features(&s, rotations::RotationRep::SixD, x).unwrap();
            (pts.sqr().unwrap() * &weights).unwrap().sum_all().unwrap()
        };
        let var = Var::from_tensor(&Tensor::from_vec(base.clone(), (1, base.len()), &Device::Cpu).unwrap()).unwrap();
        let grads = scalar(var.as_tensor()).backward().unwrap();
        let analytic: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, (1, base.len()), &Device::Cpu).unwrap();
                scalar(&t).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(rel < 1e-4, "coordinate {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn canonicalization() {
        let s = Skeleton::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut frontal = Motion { frames: (0..5).map(|_| random_pose(&s, &mut rng)).collect(), action: 0, fps: 20.0 };
        // make frame 1 frontal: root rotation about x only keeps facing in the y-z plane
        frontal.frames[0].rotations[0] = matrix_to_sixd(&RotMatrix::about(Vec3::x(), 0.3)).unwrap();
        let same = canonicalize_frontal(&frontal).unwrap();
        for (a, b) in frontal.frames.iter().zip(&same.frames) {
            let ga = rotations::sixd_to_matrix(&a.rotations[0]).unwrap();
            let gb = rotations::sixd_to_matrix(&b.rotations[0]).unwrap();
            assert!(rotations::geodesic_distance(&ga, &gb) < 1e-6);
        }
        let turned = frontal.rotated(&RotMatrix::about_y(FRAC_PI_2)).unwrap();
        let back = canonicalize_frontal(&turned).unwrap();
        for (a, b) in frontal.frames.iter().zip(&back.frames) {
            let ga = rotations::sixd_to_matrix(&a.rotations[0]).unwrap();
            let gb = rotations::sixd_to_matrix(&b.rotations[0]).unwrap();
            assert!(rotations::geodesic_distance(&ga, &gb) < 1e-6);
            for k in 0..3 {
                assert_abs_diff_eq!(a.displacement[k], b.displacement[k], epsilon = 1e-6);
            }
        }
        let twice = canonicalize_frontal(&back).unwrap();
        for (a, b) in back.frames.iter().zip(&twice.frames) {
            for k in 0..6 {
                assert_abs_diff_eq!(a.rotations[0].0[k], b.rotations[0].0[k], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn root_centering() {
        let cloud = PointCloud { frames: vec![vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 3.0, 3.0)]] };
        let c = cloud.root_center();
        assert_eq!(c.frames[0][1], Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(c.root_center(), c);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        use rand::Rng;
        let pts: Vec<Vec<Vec3>> = (0..4)
            .map(|_| (0..6).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect())
            .collect();
        let roots: Vec<Vec3> = (0..4).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let centered = PointCloud { frames: pts.clone() }.root_center_with(&roots).unwrap();
        for t in 0..4 {
            for k in 0..6 {
                assert_eq!(centered.frames[t][k], pts[t][k] - roots[t]);
            }
        }
    }

    #[test]
    fn skeleton_from_toml() {
        let text = r#"
            [[joint]]
            name = "root"
            offset = [0.0, 0.0, 0.0]
            [[joint]]
            name = "tip"
            parent = "root"
            offset = [0.0, 1.0, 0.0]
        "#;
        let s = Skeleton::from_toml_str(text).unwrap();
        assert_eq!(s.joint_count(), 2);
        assert_eq!(s.parent(1), Some(0));
        assert_eq!(s.surface_count(), 16);
        assert!(Skeleton::from_toml_str("[[joint]]\nname='a'\nparent='zz'\noffset=[0,0,0]").is_err());
    }
}
