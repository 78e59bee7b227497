//! Use cases of a trained model: encode-decode denoising, latent
//! interpolation within an action, and classifier training on generated or
//! interpolated data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, Motion};
use crate::error::{Error, Result};
use crate::eval::{accuracy, balanced_actions, train_recognizer_with, Recognizer, RecognizerConfig};
use crate::model::ActorModel;

/// Decodes each latent at its own duration, batching equal durations.
pub fn decode_grouped(
    model: &ActorModel,
    zs: &[Vec<f64>],
    actions: &[usize],
    durations: &[usize],
) -> Result<Vec<Motion>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in durations.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    let mut out: Vec<Option<Motion>> = vec![None; zs.len()];
    for (t, idx) in groups {
        let z: Vec<Vec<f64>> = idx.iter().map(|&i| zs[i].clone()).collect();
        let a: Vec<usize> = idx.iter().map(|&i| actions[i]).collect();
        for (i, m) in idx.iter().zip(model.decode_many(&z, &a, t)?) {
            out[*i] = Some(m);
        }
    }
    Ok(out.into_iter().map(|m| m.expect("every index decoded")).collect())
}

/// Re-synthesizes `motion` from its posterior mean under action `action`.
pub fn denoise(model: &ActorModel, motion: &Motion, action: usize) -> Result<Motion> {
    let (mu, _) = model.encode(motion, action)?;
    model.decode(&mu, action, motion.len())
}

/// Denoises every motion under its own label.
pub fn denoise_many(model: &ActorModel, motions: &[Motion]) -> Result<Vec<Motion>> {
    let mus = model.encode_means(motions)?;
    let actions: Vec<usize> = motions.iter().map(|m| m.action).collect();
    let lens: Vec<usize> = motions.iter().map(Motion::len).collect();
    decode_grouped(model, &mus, &actions, &lens)
}

/// Mean squared second temporal difference of joint positions (root
/// displacement applied), in squared length units per frame².
pub fn jitter_score(motion: &Motion, body: &dyn BodyModel) -> Result<f64> {
    let t = motion.len();
    if t < 3 {
        return Err(Error::TooShort { needed: 3, got: t });
    }
    let pos = motion.frames.iter().map(|f| body.joints(f, true)).collect::<Result<Vec<_>>>()?;
    let j = pos[0].len();
    let mut total = 0.0;
    for w in pos.windows(3) {
        for k in 0..j {
            total += (w[2][k] - 2.0 * w[1][k] + w[0][k]).norm_squared();
        }
    }
    Ok(total / ((t - 2) * j) as f64)
}

/// Decodes `(1 - alpha) μ₁ + alpha μ₂` with action `action` at the duration
/// of `m1`.
pub fn interpolate_latent(model: &ActorModel, m1: &Motion, m2: &Motion, action: usize, alpha: f64) -> Result<Motion> {
    if m1.action != m2.action {
        return Err(Error::ActionMismatch(m1.action, m2.action));
    }
    if m1.action != action {
        return Err(Error::ActionMismatch(m1.action, action));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let (mu1, _) = model.encode(m1, action)?;
    let (mu2, _) = model.encode(m2, action)?;
    let z: Vec<f64> = mu1.iter().zip(&mu2).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
    model.decode(&z, action, m1.len())
}

/// Training mixture for the augmentation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    RealOnly,
    GenOnly,
    InterpOnly,
    RealPlusGen,
}

impl Mix {
    pub const ALL: [Mix; 4] = [Mix::RealOnly, Mix::GenOnly, Mix::InterpOnly, Mix::RealPlusGen];

    pub fn label(self) -> &'static str {
        match self {
            Mix::RealOnly => "Real_orig",
            Mix::GenOnly => "Generated",
            Mix::InterpOnly => "Real_interpolated",
            Mix::RealPlusGen => "Real_orig + Generated",
        }
    }
}

/// The first `ceil(fraction · n_c)` motions of every class after a seeded
/// shuffle.
pub fn subsample(motions: &[Motion], fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Motion>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<&Motion>> = BTreeMap::new();
    for m in motions {
        by_class.entry(m.action).or_default().push(m);
    }
    let mut out = Vec::new();
    for (_, mut ms) in by_class {
        ms.shuffle(rng);
        let k = ((fraction * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
        out.extend(ms[..k].iter().map(|m| (*m).clone()));
    }
    Ok(out)
}

struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler { order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

fn generate_batch(
    model: &ActorModel,
    n: usize,
    lengths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Motion>> {
    let a = model.config().num_actions;
    let mut actions = balanced_actions(a, n.div_ceil(a));
    actions.shuffle(rng);
    actions.truncate(n);
    let t = lengths[rng.random_range(0..lengths.len())];
    model.generate_many(&actions, t, rng)
}

fn interpolate_batch(
    model: &ActorModel,
    pool: &[Motion],
    means: &[Vec<f64>],
    by_class: &BTreeMap<usize, Vec<usize>>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Motion>> {
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let mut zs = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut lens = Vec::with_capacity(n);
    for _ in 0..n {
        let members = classes[rng.random_range(0..classes.len())];
        let i = members[rng.random_range(0..members.len())];
        let j = members[rng.random_range(0..members.len())];
        let alpha: f64 = rng.random();
        zs.push(means[i].iter().zip(&means[j]).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect());
        actions.push(pool[i].action);
        lens.push(pool[i].len());
    }
    decode_grouped(model, &zs, &actions, &lens)
}

/// Trains a recognizer on the selected mixture built from `fraction` of the
/// real training motions. Every mixture uses the same number of optimizer
/// steps: one pass over the full real set per epoch.
pub fn train_on_mix(
    real: &[Motion],
    model: &ActorModel,
    mix: Mix,
    fraction: f64,
    config: &RecognizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Recognizer> {
    let pool = subsample(real, fraction, rng)?;
    let num_actions = model.config().num_actions;
    let joints = model.config().num_joints;
    let steps = real.len().div_ceil(config.batch_size).max(1);
    let lengths: Vec<usize> = pool.iter().map(Motion::len).collect();
    let mut cycle = Cycler::new(pool.len());
    let means = if mix == Mix::InterpOnly { model.encode_means(&pool)? } else { Vec::new() };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, m) in pool.iter().enumerate() {
        by_class.entry(m.action).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InsufficientData(format!("{} distinct label(s); need at least 2", by_class.len())));
    }
    train_recognizer_with(joints, num_actions, steps, config, |r, n| match mix {
        Mix::RealOnly => Ok((0..n).map(|_| pool[cycle.next(r)].clone()).collect()),
        Mix::GenOnly => generate_batch(model, n, &lengths, r),
        Mix::InterpOnly => interpolate_batch(model, &pool, &means, &by_class, n, r),
        Mix::RealPlusGen => {
            let half = n / 2;
            let mut out: Vec<Motion> = (0..n - half).map(|_| pool[cycle.next(r)].clone()).collect();
            out.extend(generate_batch(model, half, &lengths, r)?);
            Ok(out)
        }
    })
}

/// Trains on a mixture and reports accuracy on the real test motions.
pub fn augment_train_classifier(
    real_train: &[Motion],
    real_test: &[Motion],
    model: &ActorModel,
    mix: Mix,
    fraction: f64,
    config: &RecognizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Recognizer, f64)> {
    let rec = train_on_mix(real_train, model, mix, fraction, config, rng)?;
    let acc = accuracy(&rec, real_test)?;
    Ok((rec, acc))
}

/// Accuracy matrix with training sets as rows and test sets as columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub notes: Vec<String>,
}

impl AccuracyTable {
    pub fn format(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Train \\ Test | {} |", self.columns.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(self.columns.len()));
        for (label, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.1}")).collect();
            let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
        }
        for n in &self.notes {
            let _ = writeln!(s, "\n{n}");
        }
        s
    }
}

pub const DENOISED_CAVEAT: &str = "Real_denoised test columns denoise the test split with its known labels; \
they illustrate cleaner inputs and are not a benchmark improvement.";

/// Every training mixture plus a denoised-real row, each evaluated on the
/// real and the denoised test split.
pub fn augmentation_table(
    real_train: &[Motion],
    real_test: &[Motion],
    model: &ActorModel,
    fraction: f64,
    config: &RecognizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AccuracyTable> {
    let test_denoised = denoise_many(model, real_test)?;
    let mut rows = Vec::new();
    for mix in Mix::ALL {
        let rec = train_on_mix(real_train, model, mix, fraction, config, rng)?;
        rows.push((mix.label().to_string(), vec![accuracy(&rec, real_test)?, accuracy(&rec, &test_denoised)?]));
    }
    let train_denoised = denoise_many(model, real_train)?;
    let rec = train_on_mix(&train_denoised, model, Mix::RealOnly, fraction, config, rng)?;
    rows.push(("Real_denoised".into(), vec![accuracy(&rec, real_test)?, accuracy(&rec, &test_denoised)?]));
    Ok(AccuracyTable {
        columns: vec!["Real_orig".into(), "Real_denoised".into()],
        rows,
        notes: vec![DENOISED_CAVEAT.into()],
    })
}
