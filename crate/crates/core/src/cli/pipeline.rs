//! The end-to-end dataset build shared by `gen-data` and the test suites.

use crate::datagen::{self, AbductiveRecord, Corpus};
use crate::evalkit::MarginSplit;
use crate::lm::{LmConfig, LmPolicy};
use crate::trainer::{self, PretrainOutcome};

use super::config::ExperimentConfig;
use super::CliError;

/// Everything `gen-data` produces, in memory.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub corpus: Corpus,
    pub base: PretrainOutcome,
    pub validator: PretrainOutcome,
    /// Stage-1 survivors with validator margins, before the `delta` cut.
    pub scored: Vec<AbductiveRecord>,
    /// Records passing all three stages.
    pub records: Vec<AbductiveRecord>,
    pub train: Vec<AbductiveRecord>,
    pub eval: Vec<AbductiveRecord>,
}

/// The validator shares the architecture but not the initialization.
pub fn validator_model(model: &LmConfig) -> LmConfig {
    LmConfig {
        seed: model.seed.wrapping_add(1),
        ..model.clone()
    }
}

/// Records clearing `delta` that the grammar confirms.
pub fn select_records(cfg: &ExperimentConfig, scored: &[AbductiveRecord], delta: f64) -> Result<Vec<AbductiveRecord>, CliError> {
    let grammar = cfg.data.grammar()?;
    let kept = datagen::filter_by_margin(scored, delta)?;
    let total = kept.len();
    let supported: Vec<_> = kept.into_iter().filter(|r| grammar.supports(r)).collect();
    if supported.len() != total {
        log::warn!("stage 3 dropped {} records", total - supported.len());
    }
    Ok(supported)
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<DatasetBundle, CliError> {
    cfg.validate()?;
    let corpus = datagen::synthesize_corpus(&cfg.data)?;
    log::info!(
        "synthesized {} candidates, {} base and {} validator sequences",
        corpus.candidates.len(),
        corpus.pretrain.len(),
        corpus.validator.len()
    );

    let base = trainer::pretrain_mle(&LmPolicy::new(cfg.model.clone())?, &corpus.pretrain, &cfg.pretrain)?;
    log::info!("base model: loss {:.4} -> {:.4}", base.initial_loss, last(&base));
    let validator = trainer::pretrain_mle(
        &LmPolicy::new(validator_model(&cfg.model))?,
        &corpus.validator,
        &cfg.validator,
    )?;
    log::info!("validator: loss {:.4} -> {:.4}", validator.initial_loss, last(&validator));

    let stage1 = datagen::stage1_filter(&base.policy, &corpus.candidates, cfg.data.all_threshold)?;
    let scored = datagen::score_margins(&validator.policy, &stage1)?;
    let records = select_records(cfg, &scored, cfg.data.delta)?;
    let (train, eval) = datagen::split_records(&records, cfg.data.split_ratio, cfg.data.seed)?;
    log::info!(
        "stage 1 kept {}/{}, stage 2 kept {} (train {}, eval {})",
        stage1.len(),
        corpus.candidates.len(),
        records.len(),
        train.len(),
        eval.len()
    );
    Ok(DatasetBundle {
        corpus,
        base,
        validator,
        scored,
        records,
        train,
        eval,
    })
}

fn last(o: &PretrainOutcome) -> f64 {
    o.epoch_losses.last().copied().unwrap_or(o.initial_loss)
}

/// One train/eval split per margin floor in `grid`, all cut from `scored`.
pub fn margin_splits(cfg: &ExperimentConfig, scored: &[AbductiveRecord], grid: &[f64]) -> Result<Vec<MarginSplit>, CliError> {
    grid.iter()
        .map(|&delta| {
            let records = select_records(cfg, scored, delta)?;
            let (train, eval) = datagen::split_records(&records, cfg.data.split_ratio, cfg.data.seed)?;
            Ok(MarginSplit { delta, train, eval })
        })
        .collect()
}
