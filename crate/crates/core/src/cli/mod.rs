//! The `abdpref` command line.
//!
//! Exit codes: 0 success, 1 a verification failed (gradient check or
//! replay mismatch), 2 configuration error, 3 I/O error, 4 numeric fault.
//! Results go to stdout as JSON; logs go to stderr.

pub mod config;
pub mod manifest;
pub mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use crate::datagen::{self, DatagenError, EVAL_FILE, TRAIN_FILE};
use crate::evalkit::{self, EvalError};
use crate::gradcheck::{self, GradcheckReport};
use crate::lm::{LmError, LmPolicy};
use crate::losses::{Direction, Objective};
use crate::tensor::TensorError;
use crate::trainer::{self, TrainError};

use config::ExperimentConfig;
use manifest::{AblationKind, RecordedCommand, RunManifest, Seeds, MANIFEST_FILE};

/// Relative `--out` paths resolve under this directory when it is set.
pub const OUT_ROOT_ENV: &str = "ABDPREF_OUT_ROOT";

pub const BASE_CHECKPOINT: &str = "base.json";
pub const VALIDATOR_CHECKPOINT: &str = "validator.json";
pub const POLICY_CHECKPOINT: &str = "policy.json";
pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const VALIDATOR_FILE: &str = "validator.jsonl";
pub const SCORED_FILE: &str = "scored.jsonl";
pub const DYNAMICS_FILE: &str = "dynamics.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("numeric fault: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Io { path, source } => CliError::io(&path, source),
            DatagenError::Parse { ref path, .. } => CliError::io(&path.clone(), &e),
            DatagenError::Model(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Tensor(t) => t.into(),
            LmError::Io(io) => CliError::Io {
                path: PathBuf::new(),
                message: io.to_string(),
            },
            LmError::Checkpoint(m) => CliError::Io {
                path: PathBuf::new(),
                message: m,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Io(m) => CliError::Io {
                path: PathBuf::new(),
                message: m,
            },
            TrainError::Model(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Io(m) => CliError::Io {
                path: PathBuf::new(),
                message: m,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "abdpref", version, about = "Abductive preference learning on a tiny causal LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment config; defaults apply to anything left out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set data.delta=1.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize candidates, pretrain base and validator, filter, and split.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the base model under the configured objective.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        direction: Option<Direction>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lambda_dpop: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print accuracy and abductive accuracy of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
    },
    /// Run one of the ablation sweeps and write its CSV.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare autodiff gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add an op with a deliberately wrong backprop rule.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Re-execute the run recorded in a manifest and compare output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the replayed outputs (default: `<run dir>.replay`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Ops,
    Lm,
    Losses,
    All,
}

impl ValueEnum for Objective {
    fn value_variants<'a>() -> &'a [Self] {
        &[Objective::Dpo, Objective::Dpop]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Objective::Dpo => "dpo",
            Objective::Dpop => "dpop",
        }))
    }
}

impl ValueEnum for Direction {
    fn value_variants<'a>() -> &'a [Self] {
        &[Direction::Standard, Direction::Abductive, Direction::Multitask]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Direction::Standard => "standard",
            Direction::Abductive => "abductive",
            Direction::Multitask => "multitask",
        }))
    }
}

fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    let path = out.unwrap_or_else(|| PathBuf::from("runs").join(default_name));
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path,
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json serializes"));
}

/// Parses arguments already split from the process and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(config.config.as_deref(), &config.overrides)?;
            let out = resolve_out(out, "data");
            let summary = execute(&cfg, &RecordedCommand::GenData, &out)?;
            print_json(&summary);
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            objective,
            direction,
            beta,
            lambda,
            lambda_dpop,
            epochs,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(config.config.as_deref(), &config.overrides)?;
            if let Some(v) = objective {
                cfg.loss.objective = v;
            }
            if let Some(v) = direction {
                cfg.loss.direction = v;
            }
            if let Some(v) = beta {
                cfg.loss.beta = v;
            }
            if let Some(v) = lambda {
                cfg.loss.lambda_multi = v;
            }
            if let Some(v) = lambda_dpop {
                cfg.loss.lambda_dpop = v;
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            cfg.validate()?;
            let out = resolve_out(out, "train");
            let summary = execute(&cfg, &RecordedCommand::Train { data_dir: data }, &out)?;
            print_json(&summary);
            Ok(())
        }
        Command::Eval { checkpoint, data, split } => {
            let policy = LmPolicy::load(&checkpoint).map_err(|e| CliError::io(&checkpoint, e))?;
            let file = data.join(match split {
                Split::Train => TRAIN_FILE,
                Split::Eval => EVAL_FILE,
            });
            let records = datagen::load_dataset(&file)?;
            let report = evalkit::evaluate(&policy, &records)?;
            print_json(&serde_json::to_value(&report).expect("report serializes"));
            Ok(())
        }
        Command::Ablate {
            kind,
            config,
            data,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.config.as_deref(), &config.overrides)?;
            let out = resolve_out(out, &format!("ablate-{}", kind.csv_name().trim_end_matches(".csv")));
            let summary = execute(&cfg, &RecordedCommand::Ablate { kind, data_dir: data }, &out)?;
            print_json(&summary);
            Ok(())
        }
        Command::Gradcheck {
            scope,
            trials,
            seed,
            inject_fault,
        } => {
            let reports = run_gradcheck(scope, trials, seed, inject_fault)?;
            let passed = reports.iter().all(GradcheckReport::passed);
            print_json(&serde_json::to_value(&reports).expect("report serializes"));
            if passed {
                Ok(())
            } else {
                Err(CliError::Failed("gradient check exceeded tolerance".into()))
            }
        }
        Command::Replay { manifest, out } => {
            let report = replay(&manifest, out)?;
            let ok = report["matches"].as_bool().unwrap_or(false);
            print_json(&report);
            if ok {
                Ok(())
            } else {
                Err(CliError::Failed("replayed outputs differ from the manifest".into()))
            }
        }
    }
}

pub fn run_gradcheck(scope: Scope, trials: usize, seed: u64, inject_fault: bool) -> Result<Vec<GradcheckReport>, CliError> {
    let mut reports = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        reports.push(gradcheck::check_ops(trials, seed, inject_fault)?);
    }
    if matches!(scope, Scope::Lm | Scope::All) {
        reports.push(gradcheck::check_lm(trials.min(5), seed)?);
    }
    if matches!(scope, Scope::Losses | Scope::All) {
        reports.push(gradcheck::check_losses(trials.min(5), seed)?);
    }
    for r in &reports {
        for e in &r.entries {
            log::info!(
                "{:>8} {:<24} max rel err {:.3e} {}",
                r.scope,
                e.name,
                e.max_rel_err,
                if e.passed { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(reports)
}

/// Runs a recordable command into `out`, writes its manifest, and returns a
/// JSON summary.
pub fn execute(cfg: &ExperimentConfig, command: &RecordedCommand, out: &Path) -> Result<serde_json::Value, CliError> {
    let started = Instant::now();
    create_dir(out)?;
    let (inputs, outputs, summary) = match command {
        RecordedCommand::GenData => gen_data(cfg, out)?,
        RecordedCommand::Train { data_dir } => train(cfg, data_dir, out)?,
        RecordedCommand::Ablate { kind, data_dir } => ablate(cfg, *kind, data_dir, out)?,
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: match command {
            RecordedCommand::GenData => RecordedCommand::GenData,
            RecordedCommand::Train { data_dir } => RecordedCommand::Train {
                data_dir: absolute(data_dir)?,
            },
            RecordedCommand::Ablate { kind, data_dir } => RecordedCommand::Ablate {
                kind: *kind,
                data_dir: absolute(data_dir)?,
            },
        },
        config: cfg.clone(),
        seeds: Seeds::of(cfg),
        inputs: manifest::digest_inputs(&inputs)?,
        outputs: manifest::digest_outputs(out, &outputs)?,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let path = manifest.write_atomic(out)?;
    log::info!("wrote {}", path.display());
    let mut summary = summary;
    summary["out_dir"] = json!(out.display().to_string());
    summary["manifest"] = json!(path.display().to_string());
    Ok(summary)
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::io(p, e))
}

type RunFiles = (Vec<PathBuf>, Vec<String>, serde_json::Value);

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<RunFiles, CliError> {
    let bundle = pipeline::build_dataset(cfg)?;
    let sizes = datagen::emit_dataset(out, &bundle.records, cfg.data.split_ratio, cfg.data.seed)?;
    datagen::write_jsonl(&out.join(SCORED_FILE), &bundle.scored)?;
    datagen::write_jsonl(&out.join(PRETRAIN_FILE), &bundle.corpus.pretrain)?;
    datagen::write_jsonl(&out.join(VALIDATOR_FILE), &bundle.corpus.validator)?;
    save(&bundle.base.policy, &out.join(BASE_CHECKPOINT))?;
    save(&bundle.validator.policy, &out.join(VALIDATOR_CHECKPOINT))?;
    let outputs = [
        TRAIN_FILE,
        EVAL_FILE,
        SCORED_FILE,
        PRETRAIN_FILE,
        VALIDATOR_FILE,
        BASE_CHECKPOINT,
        VALIDATOR_CHECKPOINT,
    ]
    .map(String::from)
    .to_vec();
    let summary = json!({
        "candidates": bundle.corpus.candidates.len(),
        "stage1_kept": bundle.scored.len(),
        "records": bundle.records.len(),
        "train": sizes.train,
        "eval": sizes.eval,
    });
    Ok((vec![], outputs, summary))
}

fn save(policy: &LmPolicy, path: &Path) -> Result<(), CliError> {
    policy.save(path).map_err(|e| CliError::io(path, e))
}

/// Loads the data directory's base model, or pretrains one from its corpus
/// (and records it as an output) when the checkpoint is missing.
fn base_policy(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
    inputs: &mut Vec<PathBuf>,
    outputs: &mut Vec<String>,
) -> Result<LmPolicy, CliError> {
    let ckpt = data_dir.join(BASE_CHECKPOINT);
    if ckpt.exists() {
        inputs.push(ckpt.clone());
        let policy = LmPolicy::load(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
        if policy.config() != &cfg.model {
            log::warn!("{} was trained with a different [model] section", ckpt.display());
        }
        return Ok(policy);
    }
    let corpus_path = data_dir.join(PRETRAIN_FILE);
    inputs.push(corpus_path.clone());
    let corpus = datagen::read_jsonl(&corpus_path)?;
    log::info!("no base checkpoint in {}; pretraining", data_dir.display());
    let base = trainer::pretrain_mle(&LmPolicy::new(cfg.model.clone())?, &corpus, &cfg.pretrain)?;
    save(&base.policy, &out.join(BASE_CHECKPOINT))?;
    outputs.push(BASE_CHECKPOINT.into());
    Ok(base.policy)
}

fn train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<RunFiles, CliError> {
    let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
    let base = base_policy(cfg, data_dir, out, &mut inputs, &mut outputs)?;
    let train_path = data_dir.join(TRAIN_FILE);
    inputs.push(train_path.clone());
    let records = datagen::load_dataset(&train_path)?;
    let tc = cfg.train_config();
    let result = trainer::finetune(&base.clone_trainable(), &base.clone_frozen(), &records, &tc)?;
    save(&result.policy, &out.join(POLICY_CHECKPOINT))?;
    result.dynamics.write_csv(&out.join(DYNAMICS_FILE))?;
    outputs.extend([POLICY_CHECKPOINT.to_string(), DYNAMICS_FILE.to_string()]);
    let last = result.dynamics.rows.last();
    let summary = json!({
        "steps": result.dynamics.rows.len(),
        "final_loss": last.map(|r| r.loss),
        "checkpoint": out.join(POLICY_CHECKPOINT).display().to_string(),
    });
    Ok((inputs, outputs, summary))
}

fn ablate(cfg: &ExperimentConfig, kind: AblationKind, data_dir: &Path, out: &Path) -> Result<RunFiles, CliError> {
    let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
    let base = base_policy(cfg, data_dir, out, &mut inputs, &mut outputs)?;
    let csv_path = out.join(kind.csv_name());
    let mut tc = cfg.train_config();
    let rows = match kind {
        AblationKind::Lambda | AblationKind::Dpop => {
            let (train_path, eval_path) = (data_dir.join(TRAIN_FILE), data_dir.join(EVAL_FILE));
            inputs.extend([train_path.clone(), eval_path.clone()]);
            let train = datagen::load_dataset(&train_path)?;
            let eval = datagen::load_dataset(&eval_path)?;
            if kind == AblationKind::Lambda {
                let rows = evalkit::run_lambda_ablation(&base, &train, &eval, &tc, &cfg.ablation.lambda_grid)?;
                evalkit::write_csv(&csv_path, &rows)?;
                rows.len()
            } else {
                tc.loss.direction = cfg.ablation.dpop_direction;
                let rows = evalkit::run_dpop_penalty_ablation(&base, &train, &eval, &tc, &cfg.ablation.dpop_grid)?;
                evalkit::write_csv(&csv_path, &rows)?;
                rows.len()
            }
        }
        AblationKind::Delta => {
            let scored_path = data_dir.join(SCORED_FILE);
            inputs.push(scored_path.clone());
            let scored = datagen::load_dataset(&scored_path)?;
            let splits = pipeline::margin_splits(cfg, &scored, &cfg.ablation.delta_grid)?;
            tc.loss.direction = cfg.ablation.delta_direction;
            let rows = evalkit::run_delta_ablation(&base, &splits, &tc)?;
            evalkit::write_csv(&csv_path, &rows)?;
            rows.len()
        }
    };
    outputs.push(kind.csv_name().to_string());
    let summary = json!({
        "kind": kind,
        "rows": rows,
        "csv": csv_path.display().to_string(),
    });
    Ok((inputs, outputs, summary))
}

/// Re-executes a manifest's command into a fresh directory and compares
/// every recorded output digest.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<serde_json::Value, CliError> {
    let m = RunManifest::read(manifest_path)?;
    let run_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let out = out.unwrap_or_else(|| {
        let name = run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        run_dir.with_file_name(format!("{name}.replay"))
    });
    for input in &m.inputs {
        let now = manifest::sha256_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::Failed(format!("input {} changed since the recorded run", input.path)));
        }
    }
    m.config.validate()?;
    execute(&m.config, &m.command, &out)?;
    let replayed = RunManifest::read(&out.join(MANIFEST_FILE))?;
    let files: Vec<serde_json::Value> = m
        .outputs
        .iter()
        .map(|d| {
            let again = replayed.outputs.iter().find(|r| r.path == d.path);
            json!({
                "path": d.path,
                "recorded": d.sha256,
                "replayed": again.map(|r| r.sha256.clone()),
                "matches": again.is_some_and(|r| r.sha256 == d.sha256),
            })
        })
        .collect();
    let matches = files.iter().all(|f| f["matches"] == json!(true)) && replayed.outputs.len() == m.outputs.len();
    Ok(json!({
        "manifest": manifest_path.display().to_string(),
        "replay_dir": out.display().to_string(),
        "matches": matches,
        "files": files,
    }))
}
