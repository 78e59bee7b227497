//! Ablation sweeps: each suite is a grid of model/training variations that
//! are trained from scratch and scored with a shared recognizer.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, Motion};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_real, evaluate_with_reference, format_table, generated_accuracy, train_recognizer, EvalConfig,
    EvalReport, Recognizer, RecognizerConfig, Reference,
};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Variant};
use crate::par::{self, Strategy};
use crate::rotations::RotationRep;
use crate::training::{finetune_variable, train, Checkpoint, Hooks, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Loss,
    Arch,
    Kl,
    Batch,
    Layers,
    Rotrep,
    Duration,
}

impl Suite {
    pub const ALL: [Suite; 7] =
        [Suite::Loss, Suite::Arch, Suite::Kl, Suite::Batch, Suite::Layers, Suite::Rotrep, Suite::Duration];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Loss => "loss",
            Suite::Arch => "arch",
            Suite::Kl => "kl",
            Suite::Batch => "batch",
            Suite::Layers => "layers",
            Suite::Rotrep => "rotrep",
            Suite::Duration => "duration",
        }
    }

    /// First column header of the emitted table.
    pub fn title(self) -> &'static str {
        match self {
            Suite::Loss => "Loss",
            Suite::Arch => "Architecture",
            Suite::Kl => "KL weight",
            Suite::Batch => "Batch size",
            Suite::Layers => "Layers",
            Suite::Rotrep => "Pose representation",
            Suite::Duration => "Training durations",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}`")))
    }
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KL_GRID: [f64; 5] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
pub const BATCH_GRID: [usize; 4] = [10, 20, 30, 40];
pub const LAYER_GRID: [usize; 4] = [2, 4, 6, 8];

fn kl_label(w: f64) -> String {
    format!("λ_KL={}e-{}", 1, (-w.log10()).round() as i32)
}

/// Grid of the suite around the base configuration. The duration suite has
/// a single training configuration; its rows are produced by finetuning.
pub fn grid(suite: Suite, model: &ModelConfig, train: &TrainConfig) -> Vec<GridPoint> {
    let point = |label: String, m: ModelConfig, t: TrainConfig| GridPoint { label, model: m, train: t };
    match suite {
        Suite::Loss => {
            let rows = [
                ("L_J", LossWeights::only(false, true, false, true)),
                ("L_R", LossWeights::only(true, true, false, false)),
                ("L_V", LossWeights::only(false, true, true, false)),
                ("L_R + L_V", LossWeights::only(true, true, true, false)),
            ];
            rows.into_iter()
                .map(|(l, w)| {
                    let weights = LossWeights { lambda_kl: train.weights.lambda_kl, time_reduction: train.weights.time_reduction, ..w };
                    point(l.into(), model.clone(), TrainConfig { weights, ..train.clone() })
                })
                .collect()
        }
        Suite::Arch => Variant::ALL
            .into_iter()
            .map(|v| point(v.label().into(), ModelConfig { variant: v, ..model.clone() }, train.clone()))
            .collect(),
        Suite::Kl => KL_GRID
            .into_iter()
            .map(|w| {
                let weights = LossWeights { lambda_kl: w, ..train.weights.clone() };
                point(kl_label(w), model.clone(), TrainConfig { weights, ..train.clone() })
            })
            .collect(),
        Suite::Batch => BATCH_GRID
            .into_iter()
            .map(|b| point(format!("Batch size = {b}"), model.clone(), TrainConfig { batch_size: b, ..train.clone() }))
            .collect(),
        Suite::Layers => LAYER_GRID
            .into_iter()
            .map(|l| point(format!("{l}-layers"), ModelConfig { layers: l, ..model.clone() }, train.clone()))
            .collect(),
        Suite::Rotrep => RotationRep::ALL
            .into_iter()
            .map(|r| point(r.label().into(), ModelConfig { rotation: r, ..model.clone() }, train.clone()))
            .collect(),
        Suite::Duration => vec![point(format!("Fixed {}", train.fixed_duration), model.clone(), train.clone())],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub recognizer: RecognizerConfig,
    pub finetune_range: [usize; 2],
    pub finetune_epochs: usize,
    /// Generation lengths scored by the duration suite.
    pub durations: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: ModelConfig { latent_dim: 64, layers: 2, ff_dim: 128, ..ModelConfig::default() },
            train: TrainConfig { epochs: 10, learning_rate: 5e-4, ..TrainConfig::default() },
            eval: EvalConfig { seeds: 5, per_action: 20, ..EvalConfig::default() },
            recognizer: RecognizerConfig::default(),
            finetune_range: [60, 100],
            finetune_epochs: 10,
            durations: (40..=120).step_by(5).collect(),
        }
    }
}

/// Outcome of one grid point. A diverged or failed run keeps its row with
/// the error message instead of metrics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RowResult {
    pub label: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DurationRow {
    pub label: String,
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SuiteResult {
    pub suite: Suite,
    pub real: EvalReport,
    pub rows: Vec<RowResult>,
    pub durations: Vec<usize>,
    pub duration_rows: Vec<DurationRow>,
}

impl SuiteResult {
    pub fn row(&self, label: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn format(&self) -> String {
        let mut rows = vec![("Real".to_string(), self.real.clone())];
        let mut failed = Vec::new();
        for r in &self.rows {
            match &r.report {
                Some(rep) => rows.push((r.label.clone(), rep.clone())),
                None => failed.push(r),
            }
        }
        let mut s = format_table(self.suite.title(), &rows);
        for r in failed {
            let _ = writeln!(s, "| {} | failed: {} |", r.label, r.error.as_deref().unwrap_or("unknown"));
        }
        if !self.duration_rows.is_empty() {
            let cols: Vec<String> = self.durations.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(s, "\n| Acc. at T | {} |", cols.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(cols.len()));
            for r in &self.duration_rows {
                let cells: Vec<String> = r.accuracy.iter().map(|a| format!("{a:.1}")).collect();
                let _ = writeln!(s, "| {} | {} |", r.label, cells.join(" | "));
            }
        }
        s
    }
}

/// Shared, read-only inputs of a sweep.
pub struct Bench<'a> {
    pub train: &'a [Motion],
    pub test: &'a [Motion],
    pub action_names: &'a [String],
    pub body: &'a dyn BodyModel,
    pub recognizer: &'a Recognizer,
    pub reference: &'a Reference,
}

fn train_point(bench: &Bench, p: &GridPoint) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::from_config(&p.model, bench.action_names.to_vec())?;
    train(&mut ckpt, bench.train, bench.body, &p.train, &mut Hooks::default())?;
    Ok(ckpt)
}

fn run_point(bench: &Bench, p: &GridPoint, eval: &EvalConfig) -> RowResult {
    let out = train_point(bench, p).and_then(|ckpt| {
        let eval = EvalConfig { duration: p.train.fixed_duration, ..eval.clone() };
        evaluate_with_reference(&ckpt.model, bench.recognizer, bench.reference, &eval)
    });
    match out {
        Ok(report) => RowResult { label: p.label.clone(), report: Some(report), error: None },
        Err(e) => {
            log::warn!("{}: {e}", p.label);
            RowResult { label: p.label.clone(), report: None, error: Some(e.to_string()) }
        }
    }
}

fn duration_rows(bench: &Bench, config: &AblationConfig, p: &GridPoint) -> Result<Vec<DurationRow>> {
    let mut ckpt = train_point(bench, p)?;
    let score = |ckpt: &Checkpoint| -> Result<Vec<f64>> {
        config
            .durations
            .iter()
            .map(|&t| generated_accuracy(&ckpt.model, bench.recognizer, config.eval.per_action, t, config.eval.seed))
            .collect()
    };
    let fixed = DurationRow { label: p.label.clone(), accuracy: score(&ckpt)? };
    let [a, b] = config.finetune_range;
    finetune_variable(&mut ckpt, bench.train, bench.body, config.finetune_range, config.finetune_epochs, &p.train, &mut Hooks::default())?;
    let variable = DurationRow { label: format!("Variable [{a}, {b}]"), accuracy: score(&ckpt)? };
    Ok(vec![fixed, variable])
}

/// Runs every grid point of `suite` (on up to `workers` threads) and scores
/// them against the shared references. Rows keep grid order.
pub fn run_suite(suite: Suite, bench: &Bench, config: &AblationConfig, workers: Option<usize>) -> Result<SuiteResult> {
    let points = grid(suite, &config.model, &config.train);
    let real = evaluate_real(bench.reference, &config.eval)?;
    let (rows, duration_rows) = if suite == Suite::Duration {
        (Vec::new(), duration_rows(bench, config, &points[0])?)
    } else {
        let rows = par::with_workers(workers, || {
            par::map_indexed(points.len(), Strategy::available(), |i| run_point(bench, &points[i], &config.eval))
        });
        (rows, Vec::new())
    };
    let durations = if suite == Suite::Duration { config.durations.clone() } else { Vec::new() };
    Ok(SuiteResult { suite, real, rows, durations, duration_rows })
}

/// Trains the shared recognizer and reference features, then runs `suite`.
pub fn run_suite_on(
    suite: Suite,
    train_set: &[Motion],
    test_set: &[Motion],
    action_names: &[String],
    body: &dyn BodyModel,
    config: &AblationConfig,
    workers: Option<usize>,
) -> Result<SuiteResult> {
    let recognizer = train_recognizer(train_set, config.model.num_joints, action_names.len(), &config.recognizer)?;
    let reference = Reference::new(&recognizer, train_set, test_set)?;
    let bench = Bench { train: train_set, test: test_set, action_names, body, recognizer: &recognizer, reference: &reference };
    run_suite(suite, &bench, config, workers)
}
