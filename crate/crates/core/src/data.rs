//! Procedural action dataset, noise injection and on-disk formats.
//!
//! Each generator is a closed-form function of the frame index and three
//! per-sequence parameters (amplitude, speed, phase). Joint rotations are
//! written as axis-angle vectors in the parent frame. Unlisted joints stay at
//! rest, except the shoulders, which hang the arms down by default.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, FramePose, Motion};
use crate::error::{Error, Result};
use crate::par::{self, Strategy};
use crate::rotations::{axis_angle_to_matrix, matrix_to_sixd, sixd_to_matrix, AxisAngle, Rot6D};

pub const MOTION_FORMAT: &str = "motion-v1";
pub const MANIFEST_FORMAT: &str = "dataset-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_FPS: f64 = 20.0;
pub const DEFAULT_ROT_NOISE: f64 = 0.05;
pub const DEFAULT_TRANS_NOISE: f64 = 0.01;
pub const MIN_DURATION: usize = 8;
/// Frames per cycle at unit speed.
pub const BASE_PERIOD: f64 = 30.0;
pub const TRAIN_FRACTION: f64 = 0.8;

const JOINTS: usize = 24;
const SPINE1: usize = 3;
const L_HIP: usize = 1;
const R_HIP: usize = 2;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_ANKLE: usize = 7;
const R_ANKLE: usize = 8;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;
const ARM_DOWN: f64 = 1.2;

/// Built-in action generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    #[serde(rename = "wave-left-arm")]
    WaveLeftArm,
    #[serde(rename = "wave-right-arm")]
    WaveRightArm,
    #[serde(rename = "squat")]
    Squat,
    #[serde(rename = "walk-in-place")]
    WalkInPlace,
    #[serde(rename = "reach-forward")]
    ReachForward,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::WaveLeftArm,
        ActionKind::WaveRightArm,
        ActionKind::Squat,
        ActionKind::WalkInPlace,
        ActionKind::ReachForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::WaveLeftArm => "wave-left-arm",
            ActionKind::WaveRightArm => "wave-right-arm",
            ActionKind::Squat => "squat",
            ActionKind::WalkInPlace => "walk-in-place",
            ActionKind::ReachForward => "reach-forward",
        }
    }

    /// Local axis-angle vector of every joint and the root displacement at
    /// frame `t`.
    pub fn pose_parameters(self, p: &SequenceParams, t: usize) -> ([Vector3<f64>; JOINTS], [f64; 3]) {
        let s = p.amplitude;
        let th = p.angle(t);
        let r = 0.5 - 0.5 * th.cos();
        let mut aa = [Vector3::zeros(); JOINTS];
        aa[L_SHOULDER] = Vector3::new(0.0, 0.0, -ARM_DOWN);
        aa[R_SHOULDER] = Vector3::new(0.0, 0.0, ARM_DOWN);
        let mut disp = [0.0; 3];
        match self {
            ActionKind::WaveLeftArm => {
                aa[L_SHOULDER] = Vector3::new(0.0, 0.0, 1.1 * s + 0.15 * s * th.sin());
                aa[L_ELBOW] = Vector3::new(0.0, 0.0, 0.7 * s + 0.5 * s * th.sin());
            }
            ActionKind::WaveRightArm => {
                aa[R_SHOULDER] = Vector3::new(0.0, 0.0, -(1.1 * s + 0.15 * s * th.sin()));
                aa[R_ELBOW] = Vector3::new(0.0, 0.0, -(0.7 * s + 0.5 * s * th.sin()));
            }
            ActionKind::Squat => {
                aa[L_HIP] = Vector3::new(-1.1 * s * r, 0.0, 0.0);
                aa[R_HIP] = aa[L_HIP];
                aa[L_KNEE] = Vector3::new(2.0 * s * r, 0.0, 0.0);
                aa[R_KNEE] = aa[L_KNEE];
                aa[L_ANKLE] = Vector3::new(-0.9 * s * r, 0.0, 0.0);
                aa[R_ANKLE] = aa[L_ANKLE];
                aa[SPINE1] = Vector3::new(0.35 * s * r, 0.0, 0.0);
                disp[1] = -0.38 * s * r;
            }
            ActionKind::WalkInPlace => {
                aa[L_HIP] = Vector3::new(-0.5 * s * th.sin(), 0.0, 0.0);
                aa[R_HIP] = Vector3::new(0.5 * s * th.sin(), 0.0, 0.0);
                aa[L_KNEE] = Vector3::new(0.35 * s * (1.0 + th.sin()), 0.0, 0.0);
                aa[R_KNEE] = Vector3::new(0.35 * s * (1.0 - th.sin()), 0.0, 0.0);
                aa[L_SHOULDER] = Vector3::new(0.4 * s * th.sin(), 0.0, -ARM_DOWN);
                aa[R_SHOULDER] = Vector3::new(-0.4 * s * th.sin(), 0.0, ARM_DOWN);
                disp[1] = 0.03 * s * (2.0 * th).cos();
            }
            ActionKind::ReachForward => {
                aa[L_SHOULDER] = Vector3::new(0.0, -1.4 * s * r, -ARM_DOWN * (1.0 - r));
                aa[R_SHOULDER] = Vector3::new(0.0, 1.4 * s * r, ARM_DOWN * (1.0 - r));
                aa[L_ELBOW] = Vector3::new(0.0, -0.3 * s * (1.0 - r), 0.0);
                aa[R_ELBOW] = Vector3::new(0.0, 0.3 * s * (1.0 - r), 0.0);
                aa[SPINE1] = Vector3::new(0.3 * s * r, 0.0, 0.0);
                disp[1] = -0.05 * s * r;
                disp[2] = 0.2 * s * r;
            }
        }
        (aa, disp)
    }

    /// Noise-free frame `t`.
    pub fn frame(self, p: &SequenceParams, t: usize) -> FramePose {
        let (aa, displacement) = self.pose_parameters(p, t);
        let rotations = aa
            .iter()
            .map(|v| matrix_to_sixd(&axis_angle_to_matrix(&AxisAngle(*v))).expect("rotation from axis-angle is valid"))
            .collect();
        FramePose { rotations, displacement }
    }

    /// Noise-free motion of `len` frames labeled `action`.
    pub fn motion(self, p: &SequenceParams, len: usize, action: usize) -> Motion {
        Motion { frames: (0..len).map(|t| self.frame(p, t)).collect(), action, fps: DEFAULT_FPS }
    }
}

impl FromStr for ActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActionKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown action generator `{s}`")))
    }
}

/// Per-sequence variation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub amplitude: f64,
    pub speed: f64,
    pub phase: f64,
}

impl SequenceParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SequenceParams {
            amplitude: rng.random_range(0.8..1.2),
            speed: rng.random_range(0.8..1.25),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Cycle angle at frame `t`.
    pub fn angle(&self, t: usize) -> f64 {
        std::f64::consts::TAU * self.speed * t as f64 / BASE_PERIOD + self.phase
    }
}

/// Fixed length or an inclusive range sampled per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Duration {
    Fixed(usize),
    Range([usize; 2]),
}

impl Duration {
    pub fn min(self) -> usize {
        match self {
            Duration::Fixed(t) => t,
            Duration::Range([a, _]) => a,
        }
    }

    pub fn max(self) -> usize {
        match self {
            Duration::Fixed(t) => t,
            Duration::Range([_, b]) => b,
        }
    }
}

/// Recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub actions: Vec<ActionKind>,
    pub sequences_per_action: usize,
    pub duration: Duration,
    pub rotation_noise_std: f64,
    pub translation_noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            actions: ActionKind::ALL.to_vec(),
            sequences_per_action: 100,
            duration: Duration::Range([60, 100]),
            rotation_noise_std: DEFAULT_ROT_NOISE,
            translation_noise_std: DEFAULT_TRANS_NOISE,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.actions.len() < 2 {
            return Err(Error::InvalidSpec("at least two actions are required".into()));
        }
        if self.sequences_per_action == 0 {
            return Err(Error::InvalidSpec("sequences_per_action must be positive".into()));
        }
        if self.duration.min() < MIN_DURATION || self.duration.min() > self.duration.max() {
            return Err(Error::InvalidSpec(format!(
                "durations must be >= {MIN_DURATION} frames with min <= max, got {:?}",
                self.duration
            )));
        }
        for (name, v) in [("rotation", self.rotation_noise_std), ("translation", self.translation_noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} noise std must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Motions with their split assignment and action names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub action_names: Vec<String>,
    pub motions: Vec<Motion>,
    pub splits: Vec<Split>,
    /// Generator parameters when the dataset is synthetic.
    pub params: Vec<Option<SequenceParams>>,
}

impl Dataset {
    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<Motion> {
        self.motions.iter().zip(&self.splits).filter(|(_, s)| **s == which).map(|(m, _)| m.clone()).collect()
    }

    pub fn train(&self) -> Vec<Motion> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<Motion> {
        self.split(Split::Test)
    }

    pub fn action_index(&self, name_or_id: &str) -> Result<usize> {
        if let Some(i) = self.action_names.iter().position(|n| n == name_or_id) {
            return Ok(i);
        }
        match name_or_id.parse::<usize>() {
            Ok(i) if i < self.num_actions() => Ok(i),
            Ok(i) => Err(Error::UnknownAction { action: i, num_actions: self.num_actions() }),
            Err(_) => Err(Error::InvalidArgument(format!("unknown action `{name_or_id}`"))),
        }
    }
}

/// Builds the dataset described by `spec`. Sequence `i` draws from its own
/// RNG stream, so the result is independent of the execution strategy.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    generate_dataset_with(spec, Strategy::available())
}

pub fn generate_dataset_with(spec: &DatasetSpec, strategy: Strategy) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.sequences_per_action;
    let total = n * spec.actions.len();
    let generated = par::map_indexed(total, strategy, |i| {
        let action = i / n;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let params = SequenceParams::sample(&mut rng);
        let len = match spec.duration {
            Duration::Fixed(t) => t,
            Duration::Range([a, b]) => rng.random_range(a..=b),
        };
        let clean = spec.actions[action].motion(&params, len, action);
        let noisy = add_noise(&clean, spec.rotation_noise_std, spec.translation_noise_std, &mut rng);
        (noisy, params)
    });
    let n_train = ((n as f64) * TRAIN_FRACTION).floor() as usize;
    let splits = (0..total).map(|i| if i % n < n_train { Split::Train } else { Split::Test }).collect();
    let (motions, params): (Vec<_>, Vec<_>) = generated.into_iter().map(|(m, p)| (m, Some(p))).unzip();
    Ok(Dataset {
        action_names: spec.actions.iter().map(|a| a.name().to_string()).collect(),
        motions,
        splits,
        params,
    })
}

/// Composes every joint rotation with a random rotation whose axis-angle
/// components are i.i.d. `N(0, rot_std^2)`, and jitters the displacement.
pub fn add_noise<R: Rng + ?Sized>(motion: &Motion, rot_std: f64, trans_std: f64, rng: &mut R) -> Motion {
    let mut out = motion.clone();
    if rot_std > 0.0 {
        let n = Normal::new(0.0, rot_std).expect("std is finite and positive");
        for f in &mut out.frames {
            for r in &mut f.rotations {
                let e = AxisAngle(Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)));
                if let Ok(m) = sixd_to_matrix(r) {
                    *r = matrix_to_sixd(&m.compose(&axis_angle_to_matrix(&e))).unwrap_or(*r);
                }
            }
        }
    }
    if trans_std > 0.0 {
        let n = Normal::new(0.0, trans_std).expect("std is finite and positive");
        for f in &mut out.frames {
            for d in &mut f.displacement {
                *d += n.sample(rng);
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct MotionFile {
    format_version: String,
    rot6d: Vec<Vec<[f64; 6]>>,
    trans: Vec<[f64; 3]>,
    action: usize,
    fps: f64,
}

pub fn motion_to_json(motion: &Motion) -> String {
    let file = MotionFile {
        format_version: MOTION_FORMAT.into(),
        rot6d: motion.frames.iter().map(|f| f.rotations.iter().map(|r| r.0).collect()).collect(),
        trans: motion.frames.iter().map(|f| f.displacement).collect(),
        action: motion.action,
        fps: motion.fps,
    };
    serde_json::to_string(&file).expect("motion serialization cannot fail")
}

pub fn motion_from_json(text: &str, path: &Path) -> Result<Motion> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::corrupt(path, e))?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(MOTION_FORMAT) => {}
        Some(other) => return Err(Error::VersionMismatch { expected: MOTION_FORMAT.into(), found: other.into() }),
        None => return Err(Error::corrupt(path, "missing format_version")),
    }
    let file: MotionFile = serde_json::from_value(value).map_err(|e| Error::corrupt(path, e))?;
    if file.rot6d.len() != file.trans.len() {
        return Err(Error::corrupt(path, "rot6d and trans lengths differ"));
    }
    if file.rot6d.is_empty() {
        return Err(Error::corrupt(path, "no frames"));
    }
    let joints = file.rot6d[0].len();
    if file.rot6d.iter().any(|f| f.len() != joints) {
        return Err(Error::corrupt(path, "inconsistent joint count"));
    }
    let frames: Vec<FramePose> = file
        .rot6d
        .into_iter()
        .zip(file.trans)
        .map(|(r, d)| FramePose { rotations: r.into_iter().map(Rot6D).collect(), displacement: d })
        .collect();
    if frames.iter().any(|f| !f.is_valid()) {
        return Err(Error::corrupt(path, "frame with invalid rotation or non-finite displacement"));
    }
    Ok(Motion { frames, action: file.action, fps: file.fps })
}

pub fn save_motion(motion: &Motion, path: &Path) -> Result<()> {
    write_atomic(path, motion_to_json(motion).as_bytes())
}

pub fn load_motion(path: &Path) -> Result<Motion> {
    let text = fs::read_to_string(path)?;
    motion_from_json(&text, path)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub action: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SequenceParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub actions: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

/// Writes the manifest and one motion file per sequence into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(dataset.len());
    for (i, m) in dataset.motions.iter().enumerate() {
        let file = format!("{i:06}.json");
        save_motion(m, &dir.join(&file))?;
        files.push(ManifestEntry { file, action: m.action, split: dataset.splits[i], params: dataset.params[i] });
    }
    let manifest =
        Manifest { format_version: MANIFEST_FORMAT.into(), actions: dataset.action_names.clone(), files };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e))?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(MANIFEST_FORMAT) => {}
        Some(other) => return Err(Error::VersionMismatch { expected: MANIFEST_FORMAT.into(), found: other.into() }),
        None => return Err(Error::corrupt(&path, "missing format_version")),
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::corrupt(&path, e))?;
    let a = manifest.actions.len();
    let mut ds = Dataset { action_names: manifest.actions, motions: vec![], splits: vec![], params: vec![] };
    for e in manifest.files {
        let m = load_motion(&dir.join(&e.file))?;
        if m.action != e.action || m.action >= a {
            return Err(Error::corrupt(dir.join(&e.file), "action label disagrees with manifest"));
        }
        ds.motions.push(m);
        ds.splits.push(e.split);
        ds.params.push(e.params);
    }
    Ok(ds)
}

/// Root-relative joint trajectory of the first `frames` frames, flattened.
pub fn joint_trajectory(motion: &Motion, body: &dyn BodyModel, frames: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(frames * body.joint_count() * 3);
    for f in motion.frames.iter().take(frames) {
        for p in body.joints(f, false)? {
            out.extend_from_slice(p.as_slice());
        }
    }
    Ok(out)
}

/// Accuracy (percent) of a nearest-centroid classifier on joint trajectories
/// truncated to the shortest sequence.
pub fn nearest_centroid_accuracy(train: &[Motion], test: &[Motion], body: &dyn BodyModel, num_actions: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let frames = train.iter().chain(test).map(|m| m.len()).min().unwrap_or(0);
    let dim = frames * body.joint_count() * 3;
    let mut centroids = vec![vec![0.0; dim]; num_actions];
    let mut counts = vec![0usize; num_actions];
    for m in train {
        let x = joint_trajectory(m, body, frames)?;
        for (c, v) in centroids[m.action].iter_mut().zip(&x) {
            *c += v;
        }
        counts[m.action] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut correct = 0;
    for m in test {
        let x = joint_trajectory(m, body, frames)?;
        let best = (0..num_actions)
            .filter(|&a| counts[a] > 0)
            .map(|a| (a, centroids[a].iter().zip(&x).map(|(c, v)| (c - v).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(a, _)| a);
        if best == Some(m.action) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}
