//! Evaluation metrics: a recurrent action recognizer used both as feature
//! extractor and classifier, Fréchet distance, accuracy, diversity and
//! multimodality, and the multi-seed confidence-interval protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::Motion;
use crate::error::{Error, Result};
use crate::model::batch::{FeatureLayout, MotionBatch};
use crate::model::nn::{Gru, Linear, ParamStore};
use crate::model::ActorModel;
use crate::par::{self, Strategy};
use crate::rotations::RotationRep;

/// Smallest eigenvalue kept when taking matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Ridge added to covariances estimated from fewer samples than dimensions.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RecognizerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training crops are drawn with lengths in `[min_crop, T]`.
    pub min_crop: usize,
    pub seed: u64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig { hidden: 64, layers: 2, epochs: 8, batch_size: 32, learning_rate: 3e-3, min_crop: 40, seed: 0 }
    }
}

/// Two-layer GRU classifier over per-frame 6D rotations and root displacement.
pub struct Recognizer {
    params: ParamStore,
    gru: Gru,
    head: Linear,
    layout: FeatureLayout,
    num_actions: usize,
    config: RecognizerConfig,
}

fn prepare(m: &Motion) -> Result<Motion> {
    Ok(m.normalized()?.centered_first_frame())
}

impl Recognizer {
    pub fn new(joints: usize, num_actions: usize, config: RecognizerConfig) -> Result<Self> {
        if num_actions < 2 {
            return Err(Error::InsufficientData(format!("{num_actions} class(es); need at least 2")));
        }
        if config.hidden == 0 || config.layers == 0 || config.batch_size == 0 {
            return Err(Error::InvalidConfig("recognizer sizes must be positive".into()));
        }
        let layout = FeatureLayout { joints, rep: RotationRep::SixD, translation: true };
        let mut params = ParamStore::new(config.seed, DType::F32);
        let gru = Gru::new(&mut params, "gru", layout.frame_dim(), config.hidden, config.layers)?;
        let head = Linear::new(&mut params, "head", config.hidden, num_actions)?;
        Ok(Recognizer { params, gru, head, layout, num_actions, config })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    fn batch(&self, motions: &[Motion]) -> Result<MotionBatch> {
        let prepared: Vec<Motion> = motions.iter().map(prepare).collect::<Result<_>>()?;
        let refs: Vec<&Motion> = prepared.iter().collect();
        MotionBatch::new(&refs, &self.layout, DType::F32, self.params.device())
    }

    fn forward(&self, batch: &MotionBatch) -> Result<(Tensor, Tensor)> {
        let (_, finals) = self.gru.forward(&batch.features, None, Some(&batch.mask))?;
        let feats = finals.last().expect("at least one layer").clone();
        let logits = self.head.forward(&feats)?;
        Ok((feats, logits))
    }

    fn chunked<T>(&self, motions: &[Motion], f: impl Fn(&Tensor, &Tensor) -> Result<Vec<T>>) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(motions.len());
        for chunk in motions.chunks(128) {
            let (feats, logits) = self.forward(&self.batch(chunk)?)?;
            out.extend(f(&feats, &logits)?);
        }
        Ok(out)
    }

    /// Penultimate-layer features, one row of `feature_dim()` per motion.
    pub fn features(&self, motions: &[Motion]) -> Result<Vec<Vec<f64>>> {
        self.chunked(motions, |f, _| Ok(f.to_dtype(DType::F64)?.to_vec2::<f64>()?))
    }

    pub fn logits(&self, motions: &[Motion]) -> Result<Vec<Vec<f64>>> {
        self.chunked(motions, |_, l| Ok(l.to_dtype(DType::F64)?.to_vec2::<f64>()?))
    }

    /// Arg-max class per motion; ties go to the lowest index.
    pub fn predict(&self, motions: &[Motion]) -> Result<Vec<usize>> {
        Ok(self.logits(motions)?.iter().map(|row| argmax(row)).collect())
    }

    /// Features and predictions in one pass.
    pub fn feature_set(&self, motions: &[Motion], source: Source) -> Result<(FeatureSet, Vec<usize>)> {
        let pairs = self.chunked(motions, |f, l| {
            let f = f.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let l = l.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            Ok(f.into_iter().zip(l.iter().map(|r| argmax(r))).collect())
        })?;
        let (features, preds): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let labels = motions.iter().map(|m| m.action).collect();
        Ok((FeatureSet { features, labels, source }, preds))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn random_crop(m: &Motion, min_len: usize, rng: &mut ChaCha8Rng) -> Motion {
    let lo = min_len.clamp(1, m.len());
    let len = rng.random_range(lo..=m.len());
    let start = rng.random_range(0..=m.len() - len);
    m.crop(start, len)
}

/// Trains a recognizer on labeled motions drawn by `sample` for each step.
/// `sample(rng, n)` must return `n` motions.
pub fn train_recognizer_with(
    joints: usize,
    num_actions: usize,
    steps_per_epoch: usize,
    config: &RecognizerConfig,
    mut sample: impl FnMut(&mut ChaCha8Rng, usize) -> Result<Vec<Motion>>,
) -> Result<Recognizer> {
    let rec = Recognizer::new(joints, num_actions, config.clone())?;
    let mut opt = AdamW::new(
        rec.params.vars(),
        ParamsAdamW { lr: config.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let motions = sample(&mut rng, config.batch_size)?;
            let crops: Vec<Motion> = motions.iter().map(|m| random_crop(m, config.min_crop, &mut rng)).collect();
            let batch = rec.batch(&crops)?;
            let (_, logits) = rec.forward(&batch)?;
            let targets: Vec<u32> = crops.iter().map(|m| m.action as u32).collect();
            let targets = Tensor::new(targets.as_slice(), rec.params.device())?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            total += loss.to_scalar::<f32>()? as f64;
            opt.backward_step(&loss)?;
        }
        log::debug!("recognizer epoch {} loss {:.4}", epoch + 1, total / steps_per_epoch.max(1) as f64);
    }
    Ok(rec)
}

/// Trains the recognizer on a labeled dataset, one shuffled pass per epoch.
pub fn train_recognizer(
    motions: &[Motion],
    joints: usize,
    num_actions: usize,
    config: &RecognizerConfig,
) -> Result<Recognizer> {
    let mut classes: Vec<usize> = motions.iter().map(|m| m.action).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!("{} distinct label(s); need at least 2", classes.len())));
    }
    if let Some(m) = motions.iter().find(|m| m.action >= num_actions) {
        return Err(Error::ActionSetMismatch(format!("label {} with {num_actions} classes", m.action)));
    }
    let steps = motions.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..motions.len()).collect();
    let mut cursor = order.len();
    train_recognizer_with(joints, num_actions, steps, config, |rng, n| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            out.push(motions[order[cursor]].clone());
            cursor += 1;
        }
        Ok(out)
    })
}

/// Percentage of motions whose predicted class equals their label.
pub fn accuracy(recognizer: &Recognizer, motions: &[Motion]) -> Result<f64> {
    if motions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let preds = recognizer.predict(motions)?;
    Ok(percent_correct(&preds, motions.iter().map(|m| m.action)))
}

fn percent_correct(preds: &[usize], labels: impl Iterator<Item = usize>) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| **p == *l).count();
    100.0 * hits as f64 / preds.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    RealTrain,
    RealTest,
    Generated,
}

#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, source: Source) -> Self {
        FeatureSet { features, labels, source }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Sample mean and unbiased covariance of row vectors.
pub fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, have: n });
    }
    let f = rows[0].len();
    if rows.iter().any(|r| r.len() != f || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::DegenerateMoments);
    }
    let x = DMatrix::from_fn(n, f, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n <= f {
        for i in 0..f {
            cov[(i, i)] += COV_RIDGE;
        }
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` for symmetric positive semi-definite `A`, `B`, computed as
/// the trace of the square root of `A^{1/2} B A^{1/2}`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let s = sym_sqrt(a);
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let t: f64 = eig.eigenvalues.iter().map(|l| l.max(EIGEN_FLOOR).sqrt()).sum();
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::DegenerateMoments)
    }
}

/// Fréchet distance between Gaussian fits of two moment pairs.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch { expected: mu_a.len(), got: mu_b.len() });
    }
    let diff = (mu_a - mu_b).norm_squared();
    let tr = cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b)?;
    let d = diff + tr;
    if d.is_finite() {
        Ok(d.max(0.0))
    } else {
        Err(Error::DegenerateMoments)
    }
}

/// Fréchet distance between the feature distributions of two sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    let (ma, ca) = moments(&a.features)?;
    let (mb, cb) = moments(&b.features)?;
    let exact = a.features == b.features;
    let d = frechet_distance(&ma, &ca, &mb, &cb)?;
    Ok(if exact { 0.0 } else { d })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over the given index pairs.
pub fn mean_pair_distance(features: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(i, j)| l2(&features[i], &features[j])).sum::<f64>() / pairs.len() as f64
}

fn draw_pairs(n: usize, pairs: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    if n < pairs || n < 2 {
        return Err(Error::InsufficientSamples { needed: pairs.max(2), have: n });
    }
    let a = rand::seq::index::sample(rng, n, pairs).into_vec();
    let b = rand::seq::index::sample(rng, n, pairs).into_vec();
    Ok(a.into_iter().zip(b).collect())
}

/// Mean distance between `pairs` random pairs drawn across the whole set.
pub fn diversity(features: &[Vec<f64>], pairs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let idx = draw_pairs(features.len(), pairs, rng)?;
    Ok(mean_pair_distance(features, &idx))
}

/// Mean over classes of the mean within-class pair distance.
pub fn multimodality(
    features: &[Vec<f64>],
    labels: &[usize],
    pairs_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch(features.len(), labels.len()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::InsufficientSamples { needed: 2, have: 0 });
    }
    let mut total = 0.0;
    for c in &classes {
        let members: Vec<Vec<f64>> =
            features.iter().zip(labels).filter(|(_, l)| *l == c).map(|(f, _)| f.clone()).collect();
        let idx = draw_pairs(members.len(), pairs_per_class, rng)?;
        total += mean_pair_distance(&members, &idx);
    }
    Ok(total / classes.len() as f64)
}

/// Mean and 95% confidence half-width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    /// `mean ± 1.96 · std / √n` with the population standard deviation.
    pub fn from_samples(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, ci95: 1.96 * var.sqrt() / n.sqrt() }
    }

    pub fn format(&self) -> String {
        format!("{:.2}^{{±{:.2}}}", self.mean, self.ci95)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid_train: Stat,
    pub fid_test: Stat,
    pub accuracy: Stat,
    pub diversity: Stat,
    pub multimodality: Stat,
}

pub const TABLE_COLUMNS: [&str; 5] = ["FID_tr", "FID_test", "Acc.", "Div.", "Multimod."];

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn cells(&self) -> [Stat; 5] {
        [self.fid_train, self.fid_test, self.accuracy, self.diversity, self.multimodality]
    }
}

/// Renders labeled reports as a Markdown table with `value^{±ci}` cells.
pub fn format_table(title: &str, rows: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {title} | {} |", TABLE_COLUMNS.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(TABLE_COLUMNS.len()));
    for (label, r) in rows {
        let cells: Vec<String> = r.cells().iter().map(Stat::format).collect();
        let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub seeds: usize,
    pub per_action: usize,
    pub duration: usize,
    pub diversity_pairs: usize,
    pub multimodality_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seeds: 20, per_action: 40, duration: 60, diversity_pairs: 200, multimodality_pairs: 20, seed: 0 }
    }
}

/// Per-seed raw metric values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SeedMetrics {
    pub fid_train: f64,
    pub fid_test: f64,
    pub accuracy: f64,
    pub diversity: f64,
    pub multimodality: f64,
}

fn aggregate(runs: &[SeedMetrics]) -> EvalReport {
    let col = |f: fn(&SeedMetrics) -> f64| Stat::from_samples(&runs.iter().map(f).collect::<Vec<_>>());
    EvalReport {
        fid_train: col(|m| m.fid_train),
        fid_test: col(|m| m.fid_test),
        accuracy: col(|m| m.accuracy),
        diversity: col(|m| m.diversity),
        multimodality: col(|m| m.multimodality),
    }
}

fn seed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Balanced label list: `per_action` copies of every action.
pub fn balanced_actions(num_actions: usize, per_action: usize) -> Vec<usize> {
    (0..num_actions).flat_map(|a| std::iter::repeat_n(a, per_action)).collect()
}

/// Real-data features computed once for a whole evaluation.
pub struct Reference {
    pub train: FeatureSet,
    pub test: FeatureSet,
    test_preds: Vec<usize>,
}

impl Reference {
    pub fn new(recognizer: &Recognizer, real_train: &[Motion], real_test: &[Motion]) -> Result<Self> {
        for m in real_train.iter().chain(real_test) {
            if m.action >= recognizer.num_actions() {
                return Err(Error::ActionSetMismatch(format!(
                    "real motion labeled {} but the recognizer knows {} actions",
                    m.action,
                    recognizer.num_actions()
                )));
            }
        }
        let (train, _) = recognizer.feature_set(real_train, Source::RealTrain)?;
        let (test, test_preds) = recognizer.feature_set(real_test, Source::RealTest)?;
        Ok(Reference { train, test, test_preds })
    }
}

fn metrics_for(
    set: &FeatureSet,
    preds: &[usize],
    reference: &Reference,
    config: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SeedMetrics> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in &set.labels {
        *counts.entry(*l).or_default() += 1;
    }
    let smallest = counts.values().copied().min().unwrap_or(0);
    Ok(SeedMetrics {
        fid_train: fid(set, &reference.train)?,
        fid_test: fid(set, &reference.test)?,
        accuracy: percent_correct(preds, set.labels.iter().copied()),
        diversity: diversity(&set.features, config.diversity_pairs.min(set.len()), rng)?,
        multimodality: multimodality(&set.features, &set.labels, config.multimodality_pairs.min(smallest), rng)?,
    })
}

/// Metrics of a single generated set against the real references.
pub fn evaluate_seed(
    model: &ActorModel,
    recognizer: &Recognizer,
    reference: &Reference,
    config: &EvalConfig,
    seed_index: usize,
) -> Result<SeedMetrics> {
    let mut rng = seed_rng(config.seed, seed_index as u64);
    let actions = balanced_actions(model.config().num_actions, config.per_action);
    let motions = model.generate_many(&actions, config.duration, &mut rng)?;
    let (set, preds) = recognizer.feature_set(&motions, Source::Generated)?;
    metrics_for(&set, &preds, reference, config, &mut rng)
}

/// Generates `seeds` balanced sets and aggregates every metric with a 95%
/// confidence interval.
pub fn evaluate(
    model: &ActorModel,
    recognizer: &Recognizer,
    real_train: &[Motion],
    real_test: &[Motion],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let reference = Reference::new(recognizer, real_train, real_test)?;
    evaluate_with_reference(model, recognizer, &reference, config)
}

pub fn evaluate_with_reference(
    model: &ActorModel,
    recognizer: &Recognizer,
    reference: &Reference,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if model.config().num_actions != recognizer.num_actions() {
        return Err(Error::ActionSetMismatch(format!(
            "model has {} actions, recognizer {}",
            model.config().num_actions,
            recognizer.num_actions()
        )));
    }
    if config.seeds == 0 {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let runs = par::map_indexed(config.seeds, Strategy::available(), |s| {
        evaluate_seed(model, recognizer, reference, config, s)
    });
    Ok(aggregate(&runs.into_iter().collect::<Result<Vec<_>>>()?))
}

/// The "Real" row: the real test set scored against the references. Only the
/// pair sampling of diversity and multimodality varies between seeds.
/// Pair counts are capped by the available samples in every protocol run.
pub fn evaluate_real(reference: &Reference, config: &EvalConfig) -> Result<EvalReport> {
    let runs = (0..config.seeds.max(1))
        .map(|s| {
            let mut rng = seed_rng(config.seed, s as u64);
            metrics_for(&reference.test, &reference.test_preds, reference, config, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&runs))
}

/// Recognition accuracy of generations at one duration, averaged over seeds.
pub fn generated_accuracy(
    model: &ActorModel,
    recognizer: &Recognizer,
    per_action: usize,
    duration: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seed_rng(seed, duration as u64);
    let actions = balanced_actions(model.config().num_actions, per_action);
    let motions = model.generate_many(&actions, duration, &mut rng)?;
    accuracy(recognizer, &motions)
}

/// Diversity of a plain motion set under the recognizer's features.
pub fn motion_diversity(recognizer: &Recognizer, motions: &[Motion], pairs: usize, seed: u64) -> Result<f64> {
    let feats = recognizer.features(motions)?;
    diversity(&feats, pairs.min(feats.len()), &mut seed_rng(seed, 0))
}
