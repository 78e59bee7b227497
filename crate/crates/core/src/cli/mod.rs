//! Command-line front end: argument definitions and the command runners.
//! The `actor` binary only parses arguments and maps errors to exit codes.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{self, AblationConfig, Suite};
use crate::applications::{denoise, jitter_score};
use crate::body::Skeleton;
use crate::data::{self, DatasetSpec};
use crate::eval::{self, EvalConfig, RecognizerConfig, Reference};
use crate::par;
use crate::training::{self, Checkpoint, Hooks, RunConfig};
use crate::error::{Error, Result};

pub mod overrides;

#[derive(Parser)]
#[command(name = "actor", version, about = "Action-conditioned motion synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a spec field, e.g. `--set seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fixed-length training from scratch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        /// Override a config field, e.g. `--set model.layers=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Variable-length finetuning of a trained checkpoint.
    FinetuneVar {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [60, 100])]
        range: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        /// Training hyperparameters (`[train]` table of a run config).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint; defaults to overwriting `--ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sample one motion.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        action: String,
        #[arg(long)]
        duration: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with the multi-seed protocol.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_action: Option<usize>,
        #[arg(long)]
        duration: Option<usize>,
        #[arg(long)]
        recognizer_epochs: Option<usize>,
        #[arg(long)]
        diversity_pairs: Option<usize>,
        #[arg(long)]
        multimodality_pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an ablation sweep.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Encode-decode a motion through the model.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        action: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report_jitter: bool,
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
    /// Render a joint-trajectory strip.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        panels: usize,
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
}

/// Process exit status for an error: 1 usage, 2 data or format, 3 numerical
/// divergence.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DivergedLoss { .. } | Error::DegenerateMoments => 3,
        Error::InvalidArgument(_)
        | Error::UnknownAction { .. }
        | Error::NonPositiveDuration
        | Error::FixedLengthOnly { .. }
        | Error::ActionMismatch(..)
        | Error::AlphaOutOfRange(_) => 1,
        _ => 2,
    }
}

fn skeleton(path: &Option<PathBuf>) -> Result<Skeleton> {
    match path {
        Some(p) => Skeleton::load(p),
        None => Ok(Skeleton::smpl_like()),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn load_run_config(path: &Option<PathBuf>, set: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => read(p)?,
        None => String::new(),
    };
    RunConfig::from_toml_str(&overrides::apply(&text, set)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    data::write_atomic(path, text.as_bytes())
}

/// Executes one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, set } => {
            let text = match &spec {
                Some(p) => read(p)?,
                None => String::new(),
            };
            let spec = DatasetSpec::from_toml_str(&overrides::apply(&text, &set)?)?;
            let dataset = data::generate_dataset(&spec)?;
            data::save_dataset(&dataset, &out)?;
            println!("wrote {} motions to {}", dataset.len(), out.display());
        }
        Command::Train { config, data: dir, out, epochs, seed, skeleton: sk, set } => {
            let mut run = load_run_config(&config, &set)?;
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let body = skeleton(&sk)?;
            let dataset = data::load_dataset(&dir)?;
            run.model.num_actions = dataset.num_actions();
            run.model.num_joints = body.names().len();
            let mut ckpt = Checkpoint::from_config(&run.model, dataset.action_names.clone())?;
            let mut hooks = Hooks { on_epoch: Some(Box::new(print_epoch)), checkpoint_path: Some(out.clone()) };
            training::train(&mut ckpt, &dataset.train(), &body, &run.train, &mut hooks)?;
            training::save_checkpoint(&ckpt, &out)?;
        }
        Command::FinetuneVar { ckpt: path, data: dir, range, epochs, config, out, skeleton: sk, set } => {
            let run = load_run_config(&config, &set)?;
            let body = skeleton(&sk)?;
            let dataset = data::load_dataset(&dir)?;
            let mut ckpt = training::load_checkpoint(&path)?;
            if ckpt.action_names != dataset.action_names {
                return Err(Error::ActionSetMismatch("checkpoint and dataset actions differ".into()));
            }
            let out = out.unwrap_or(path);
            let mut hooks = Hooks { on_epoch: Some(Box::new(print_epoch)), checkpoint_path: Some(out.clone()) };
            let range = [range[0], range[1]];
            if range[0] == 0 || range[0] > range[1] {
                return Err(Error::InvalidArgument(format!("bad range {range:?}")));
            }
            training::finetune_variable(&mut ckpt, &dataset.train(), &body, range, epochs, &run.train, &mut hooks)?;
            training::save_checkpoint(&ckpt, &out)?;
        }
        Command::Generate { ckpt, action, duration, seed, out } => {
            let ckpt = training::load_checkpoint(&ckpt)?;
            let a = resolve_action(&ckpt, &action)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = ckpt.model.generate(a, duration, &mut rng)?;
            data::save_motion(&m, &out)?;
        }
        Command::Evaluate {
            ckpt,
            data: dir,
            seeds,
            out,
            per_action,
            duration,
            recognizer_epochs,
            diversity_pairs,
            multimodality_pairs,
            seed,
        } => {
            let ckpt = training::load_checkpoint(&ckpt)?;
            let dataset = data::load_dataset(&dir)?;
            if ckpt.action_names != dataset.action_names {
                return Err(Error::ActionSetMismatch("checkpoint and dataset actions differ".into()));
            }
            let mut rc = RecognizerConfig { seed, ..RecognizerConfig::default() };
            if let Some(e) = recognizer_epochs {
                rc.epochs = e;
            }
            let mut ec = EvalConfig { seeds, seed, ..EvalConfig::default() };
            if let Some(n) = per_action {
                ec.per_action = n;
            }
            if let Some(n) = diversity_pairs {
                ec.diversity_pairs = n;
            }
            if let Some(n) = multimodality_pairs {
                ec.multimodality_pairs = n;
            }
            ec.duration = duration.unwrap_or(ckpt.model.config().fixed_length);
            let (train_set, test_set) = (dataset.train(), dataset.test());
            let rec = eval::train_recognizer(&train_set, ckpt.model.config().num_joints, dataset.num_actions(), &rc)?;
            let reference = Reference::new(&rec, &train_set, &test_set)?;
            let real = eval::evaluate_real(&reference, &ec)?;
            let report = eval::evaluate_with_reference(&ckpt.model, &rec, &reference, &ec)?;
            let label = ckpt.model.config().variant.label().to_string();
            let table = eval::format_table("Method", &[("Real".into(), real.clone()), (label, report.clone())]);
            print!("{table}");
            write_text(&out, &table)?;
            let json = serde_json::json!({ "real": real, "model": report, "seeds": seeds });
            write_text(&out.with_extension("json"), &serde_json::to_string_pretty(&json).expect("json"))?;
        }
        Command::Ablate { suite, data: dir, config, out, epochs, skeleton: sk, set } => {
            let suite: Suite = suite.parse()?;
            let text = match &config {
                Some(p) => read(p)?,
                None => String::new(),
            };
            let mut cfg: AblationConfig = toml::from_str(&overrides::apply(&text, &set)?)
                .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let body = skeleton(&sk)?;
            let dataset = data::load_dataset(&dir)?;
            cfg.model.num_actions = dataset.num_actions();
            cfg.model.num_joints = body.names().len();
            let result = ablation::run_suite_on(
                suite,
                &dataset.train(),
                &dataset.test(),
                &dataset.action_names,
                &body,
                &cfg,
                workers(),
            )?;
            let table = result.format();
            print!("{table}");
            if let Some(out) = out {
                write_text(&out, &table)?;
                write_text(&out.with_extension("json"), &serde_json::to_string_pretty(&result).expect("json"))?;
            }
        }
        Command::Denoise { ckpt, input, action, out, report_jitter, skeleton: sk } => {
            let ckpt = training::load_checkpoint(&ckpt)?;
            let a = resolve_action(&ckpt, &action)?;
            let m = data::load_motion(&input)?;
            let clean = denoise(&ckpt.model, &m, a)?;
            data::save_motion(&clean, &out)?;
            if report_jitter {
                let body = skeleton(&sk)?;
                println!("jitter before {:.6e}", jitter_score(&m, &body)?);
                println!("jitter after  {:.6e}", jitter_score(&clean, &body)?);
            }
        }
        Command::Plot { input, out, panels, skeleton: sk } => {
            let body = skeleton(&sk)?;
            let m = data::load_motion(&input)?;
            let style = crate::plot::StripStyle { panels, ..Default::default() };
            let img = crate::plot::render_strip(&m, &body, &style)?;
            crate::plot::save_strip(&img, &out)?;
        }
    }
    Ok(())
}

fn print_epoch(e: &training::EpochLog) {
    let l = &e.loss;
    println!(
        "epoch {:>4} step {:>7} total {:.6} rot {:.6} disp {:.6} vert {:.6} joints {:.6} kl {:.6}",
        e.epoch, e.step, l.total, l.rotation, l.displacement, l.vertices, l.joints, l.kl
    );
}

fn resolve_action(ckpt: &Checkpoint, action: &str) -> Result<usize> {
    let n = ckpt.action_names.len();
    if let Ok(i) = action.parse::<usize>() {
        return if i < n { Ok(i) } else { Err(Error::UnknownAction { action: i, num_actions: n }) };
    }
    ckpt.action_names
        .iter()
        .position(|a| a == action)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown action `{action}`")))
}

/// Worker cap from `ACTOR_NUM_WORKERS`.
pub fn workers() -> Option<usize> {
    std::env::var("ACTOR_NUM_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|n: &usize| *n > 0)
}

/// Parses `args` (including the program name) and runs the command inside a
/// pool capped by `ACTOR_NUM_WORKERS`.
pub fn run_args<I, T>(args: I) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::Usage)?;
    par::with_workers(workers(), || run(cli)).map_err(CliError::Run)
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(e) if !e.use_stderr() => 0,
            CliError::Usage(_) => 1,
            CliError::Run(e) => exit_code(e),
        }
    }
}
