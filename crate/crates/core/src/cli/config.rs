//! Experiment configuration: one TOML file, `--set` overrides, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::datagen::{GenConfig, EOS};
use crate::lm::LmConfig;
use crate::losses::{Direction, LossSpec};
use crate::trainer::{AdamConfig, PretrainConfig, TrainConfig};

/// Fine-tuning schedule; the objective lives in [`ExperimentConfig::loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub warmup_ratio: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            max_grad_norm: t.max_grad_norm,
            warmup_ratio: t.warmup_ratio,
            adam: t.adam,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambda_grid: Vec<f64>,
    pub dpop_grid: Vec<f64>,
    /// Direction used by the penalty sweep (λ comes from `[loss]`).
    pub dpop_direction: Direction,
    pub delta_grid: Vec<f64>,
    /// Direction used by the margin sweep.
    pub delta_direction: Direction,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            dpop_grid: vec![0.0, 0.25, 0.5, 1.0],
            dpop_direction: Direction::Multitask,
            delta_grid: vec![0.1, 1.0],
            delta_direction: Direction::Abductive,
        }
    }
}

fn default_model() -> LmConfig {
    LmConfig {
        end_token: Some(EOS),
        ..LmConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: GenConfig,
    #[serde(default = "default_model")]
    pub model: LmConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub validator: PretrainConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: GenConfig::default(),
            model: default_model(),
            pretrain: PretrainConfig::default(),
            validator: PretrainConfig::default(),
            train: TrainSection::default(),
            loss: LossSpec::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies each `key.path=value` override, and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        // A partial [model] table still terminates answers at the grammar's end token.
        if let Some(toml::Value::Table(model)) = tree.get_mut("model") {
            model.entry("end_token").or_insert(toml::Value::Integer(EOS.into()));
        }
        let cfg: ExperimentConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: String| CliError::Config(e);
        self.data.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.model.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.loss.validate().map_err(|e| cfg_err(e.to_string()))?;
        let grammar = self.data.grammar().map_err(|e| cfg_err(e.to_string()))?;
        if self.model.vocab_size < grammar.vocab_size() {
            return Err(cfg_err(format!(
                "model.vocab_size {} is smaller than the grammar's {} tokens",
                self.model.vocab_size,
                grammar.vocab_size()
            )));
        }
        if self.model.context_len < grammar.max_sequence_len() {
            return Err(cfg_err(format!(
                "model.context_len {} cannot hold sequences of length {}",
                self.model.context_len,
                grammar.max_sequence_len()
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss: self.loss.clone(),
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            max_grad_norm: t.max_grad_norm,
            warmup_ratio: t.warmup_ratio,
            adam: t.adam.clone(),
            seed: t.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `a.b.c = value` in `tree`. The value is read as a TOML literal when
/// it parses as one and as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = tree;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
