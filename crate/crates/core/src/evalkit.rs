//! Metrics, the abductive-policy oracle, and ablation runners.
//!
//! Both metrics compare average log-likelihoods with a strict inequality, so
//! ties (for instance under a uniform policy) count as wrong:
//!
//! * accuracy: `ALL(right | original) > ALL(hallucinated | original)`
//! * abductive accuracy: `ALL(hallucinated | modified) > ALL(hallucinated | original)`

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::AbductiveRecord;
use crate::lm::{LmError, LmPolicy, TokenSequence};
use crate::losses::{Direction, Objective};
use crate::trainer::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyDataset,
    #[error("response {response:?} has zero probability under every prompt")]
    Unreachable { response: Vec<u32> },
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid ablation grid: {0}")]
    InvalidGrid(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-record outcome. Margins are the left side minus the right side of
/// each metric's comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub std_correct: bool,
    pub abd_correct: bool,
    pub std_margin: f64,
    pub abd_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub abductive_accuracy: f64,
    pub n_items: usize,
    pub per_item: Vec<ItemResult>,
}

pub fn evaluate(policy: &LmPolicy, records: &[AbductiveRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut per_item = Vec::with_capacity(records.len());
    for r in records {
        let h_orig = policy.avg_log_lik(&r.original_prompt, &r.hallucinated_answer)?;
        let right = policy.avg_log_lik(&r.original_prompt, &r.right_answer)?;
        let h_mod = policy.avg_log_lik(&r.modified_prompt, &r.hallucinated_answer)?;
        per_item.push(ItemResult {
            id: r.id.clone(),
            std_correct: right > h_orig,
            abd_correct: h_mod > h_orig,
            std_margin: right - h_orig,
            abd_margin: h_mod - h_orig,
        });
    }
    let n = per_item.len() as f64;
    let frac = |f: fn(&ItemResult) -> bool| per_item.iter().filter(|i| f(i)).count() as f64 / n;
    Ok(EvalReport {
        accuracy: frac(|i| i.std_correct),
        abductive_accuracy: frac(|i| i.abd_correct),
        n_items: per_item.len(),
        per_item,
    })
}

pub fn accuracy(policy: &LmPolicy, records: &[AbductiveRecord]) -> Result<f64> {
    Ok(evaluate(policy, records)?.accuracy)
}

pub fn abductive_accuracy(policy: &LmPolicy, records: &[AbductiveRecord]) -> Result<f64> {
    Ok(evaluate(policy, records)?.abductive_accuracy)
}

/// Finite prompt set with a prior, and every response of length `1..=max_len`
/// over a small alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedWorld {
    prompts: Vec<TokenSequence>,
    log_prior: Vec<f64>,
    responses: Vec<TokenSequence>,
}

pub const MAX_WORLD_PROMPTS: usize = 8;
pub const MAX_WORLD_ALPHABET: usize = 4;
pub const MAX_WORLD_LEN: usize = 3;

impl EnumeratedWorld {
    /// World with a uniform prior over `prompts`.
    pub fn new(prompts: Vec<TokenSequence>, alphabet: &[u32], max_len: usize) -> Result<Self> {
        let n = prompts.len();
        Self::with_prior(prompts, vec![1.0 / n.max(1) as f64; n], alphabet, max_len)
    }

    pub fn with_prior(prompts: Vec<TokenSequence>, prior: Vec<f64>, alphabet: &[u32], max_len: usize) -> Result<Self> {
        let bad = |m: String| Err(EvalError::InvalidWorld(m));
        if prompts.is_empty() || prompts.len() > MAX_WORLD_PROMPTS {
            return bad(format!("need 1..={MAX_WORLD_PROMPTS} prompts, got {}", prompts.len()));
        }
        if alphabet.is_empty() || alphabet.len() > MAX_WORLD_ALPHABET {
            return bad(format!("alphabet size must be 1..={MAX_WORLD_ALPHABET}"));
        }
        if max_len == 0 || max_len > MAX_WORLD_LEN {
            return bad(format!("max_len must be 1..={MAX_WORLD_LEN}"));
        }
        if prior.len() != prompts.len() || prior.iter().any(|&p| p.is_nan() || p <= 0.0) {
            return bad("prior must be positive with one entry per prompt".into());
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("prior sums to {total}"));
        }
        let mut responses = Vec::new();
        let mut layer: Vec<Vec<u32>> = vec![vec![]];
        for _ in 0..max_len {
            layer = layer
                .iter()
                .flat_map(|prefix| {
                    alphabet.iter().map(move |&t| {
                        let mut s = prefix.clone();
                        s.push(t);
                        s
                    })
                })
                .collect();
            responses.extend(layer.iter().map(|s| TokenSequence::new(s.clone()).expect("non-empty")));
        }
        Ok(EnumeratedWorld {
            prompts,
            log_prior: prior.iter().map(|p| p.ln()).collect(),
            responses,
        })
    }

    pub fn prompts(&self) -> &[TokenSequence] {
        &self.prompts
    }

    pub fn responses(&self) -> &[TokenSequence] {
        &self.responses
    }

    pub fn prior(&self) -> Vec<f64> {
        self.log_prior.iter().map(|l| l.exp()).collect()
    }
}

/// `log π̃(x | y)` for every enumerated response (rows) and prompt (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AbductiveTable {
    pub log_posterior: Vec<Vec<f64>>,
}

impl AbductiveTable {
    pub fn posterior(&self, y: usize, x: usize) -> f64 {
        self.log_posterior[y][x].exp()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Bayes inversion `π̃(x|y) = π(y|x)p(x) / q(y)` with `q(y) = Σ_x π(y|x)p(x)`,
/// computed in log space.
pub fn abductive_policy_oracle(policy: &LmPolicy, world: &EnumeratedWorld) -> Result<AbductiveTable> {
    let mut log_posterior = Vec::with_capacity(world.responses.len());
    for y in &world.responses {
        let joint = world
            .prompts
            .iter()
            .zip(&world.log_prior)
            .map(|(x, lp)| Ok(policy.log_prob_sum(x, y)? + lp))
            .collect::<Result<Vec<f64>>>()?;
        let log_q = log_sum_exp(&joint);
        if log_q == f64::NEG_INFINITY {
            return Err(EvalError::Unreachable {
                response: y.ids().to_vec(),
            });
        }
        log_posterior.push(joint.iter().map(|j| j - log_q).collect());
    }
    Ok(AbductiveTable { log_posterior })
}

/// Index triple `(x_w, x_l, y)` into an [`EnumeratedWorld`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldTriple {
    pub chosen_prompt: usize,
    pub rejected_prompt: usize,
    pub response: usize,
}

/// Largest gap, over `triples`, between the abductive-policy logit
/// `β[log π̃_θ/π̃_ref (x_w|y) − log π̃_θ/π̃_ref (x_l|y)]` and the swapped-ψ
/// logit `β[ψ(x_w, y) − ψ(x_l, y)]`. Both tables share `world`'s prior.
pub fn verify_swap_equivalence(
    policy: &LmPolicy,
    reference: &LmPolicy,
    world: &EnumeratedWorld,
    beta: f64,
    triples: &[WorldTriple],
) -> Result<f64> {
    verify_swap_equivalence_with_priors(policy, reference, world, world, beta, triples)
}

/// [`verify_swap_equivalence`] with separate worlds (same prompts and responses,
/// possibly different priors) for the policy and the reference table.
pub fn verify_swap_equivalence_with_priors(
    policy: &LmPolicy,
    reference: &LmPolicy,
    policy_world: &EnumeratedWorld,
    reference_world: &EnumeratedWorld,
    beta: f64,
    triples: &[WorldTriple],
) -> Result<f64> {
    if policy_world.prompts != reference_world.prompts || policy_world.responses != reference_world.responses {
        return Err(EvalError::InvalidWorld("worlds differ in support".into()));
    }
    let world = policy_world;
    let n_x = world.prompts.len();
    let n_y = world.responses.len();
    if let Some(t) = triples
        .iter()
        .find(|t| t.chosen_prompt >= n_x || t.rejected_prompt >= n_x || t.response >= n_y)
    {
        return Err(EvalError::InvalidWorld(format!("triple {t:?} out of range")));
    }
    let pol = abductive_policy_oracle(policy, policy_world)?;
    let refr = abductive_policy_oracle(reference, reference_world)?;
    let mut worst: f64 = 0.0;
    for t in triples {
        let (w, l, y) = (t.chosen_prompt, t.rejected_prompt, t.response);
        let ratio = |x: usize| pol.log_posterior[y][x] - refr.log_posterior[y][x];
        let abductive = beta * (ratio(w) - ratio(l));
        let resp = &world.responses[y];
        let psi = |x: usize| -> Result<f64> {
            let xs = &world.prompts[x];
            Ok(policy.log_prob_sum(xs, resp)? - reference.log_prob_sum(xs, resp)?)
        };
        let swapped = beta * (psi(w)? - psi(l)?);
        worst = worst.max((abductive - swapped).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub abductive_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpopRow {
    pub lambda_dpop: f64,
    pub accuracy: f64,
    pub abductive_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub delta_train: f64,
    pub delta_eval: f64,
    pub epoch: usize,
    pub accuracy: f64,
    pub abductive_accuracy: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |e: csv::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let io = |e: csv::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(io)
}

fn check_grid(grid: &[f64], lo: f64, hi: f64, name: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(EvalError::InvalidGrid(format!("{name} grid is empty")));
    }
    if let Some(v) = grid.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(EvalError::InvalidGrid(format!("{name} value {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn finetune_and_eval(
    base: &LmPolicy,
    train: &[AbductiveRecord],
    eval: &[AbductiveRecord],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let out = trainer::finetune(&base.clone_trainable(), &base.clone_frozen(), train, cfg)?;
    evaluate(&out.policy, eval)
}

/// One multitask fine-tune from `base` per `λ`, all with `cfg.seed`. The
/// objective (DPO or DPOP) comes from `cfg.loss`.
pub fn run_lambda_ablation(
    base: &LmPolicy,
    train: &[AbductiveRecord],
    eval: &[AbductiveRecord],
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<LambdaRow>> {
    check_grid(grid, 0.0, 1.0, "lambda")?;
    grid.iter()
        .map(|&lambda| {
            let mut cfg = cfg.clone();
            cfg.loss.direction = Direction::Multitask;
            cfg.loss.lambda_multi = lambda;
            let report = finetune_and_eval(base, train, eval, &cfg)?;
            log::info!(
                "lambda {lambda}: accuracy {:.3}, abductive {:.3}",
                report.accuracy,
                report.abductive_accuracy
            );
            Ok(LambdaRow {
                lambda,
                accuracy: report.accuracy,
                abductive_accuracy: report.abductive_accuracy,
            })
        })
        .collect()
}

/// One DPOP fine-tune per penalty weight; direction and `λ` come from `cfg.loss`.
pub fn run_dpop_penalty_ablation(
    base: &LmPolicy,
    train: &[AbductiveRecord],
    eval: &[AbductiveRecord],
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<DpopRow>> {
    check_grid(grid, 0.0, f64::MAX, "lambda_dpop")?;
    grid.iter()
        .map(|&lambda_dpop| {
            let mut cfg = cfg.clone();
            cfg.loss.objective = Objective::Dpop;
            cfg.loss.lambda_dpop = lambda_dpop;
            let report = finetune_and_eval(base, train, eval, &cfg)?;
            log::info!(
                "lambda_dpop {lambda_dpop}: accuracy {:.3}, abductive {:.3}",
                report.accuracy,
                report.abductive_accuracy
            );
            Ok(DpopRow {
                lambda_dpop,
                accuracy: report.accuracy,
                abductive_accuracy: report.abductive_accuracy,
            })
        })
        .collect()
}

/// A train/eval pair filtered at one margin floor.
#[derive(Debug, Clone)]
pub struct MarginSplit {
    pub delta: f64,
    pub train: Vec<AbductiveRecord>,
    pub eval: Vec<AbductiveRecord>,
}

/// Trains on each split's train set and, after every epoch, evaluates on
/// every split's eval set. Rows are ordered by train split, epoch, eval split.
pub fn run_delta_ablation(base: &LmPolicy, splits: &[MarginSplit], cfg: &TrainConfig) -> Result<Vec<DeltaRow>> {
    if splits.is_empty() {
        return Err(EvalError::InvalidGrid("no delta splits".into()));
    }
    let mut rows = Vec::new();
    for train_split in splits {
        trainer::finetune_with(
            &base.clone_trainable(),
            &base.clone_frozen(),
            &train_split.train,
            cfg,
            |epoch, policy| {
                for eval_split in splits {
                    let report = evaluate(policy, &eval_split.eval).map_err(|e| TrainError::Callback(e.to_string()))?;
                    log::info!(
                        "delta_train {} epoch {epoch} delta_eval {}: abductive {:.3}",
                        train_split.delta,
                        eval_split.delta,
                        report.abductive_accuracy
                    );
                    rows.push(DeltaRow {
                        delta_train: train_split.delta,
                        delta_eval: eval_split.delta,
                        epoch,
                        accuracy: report.accuracy,
                        abductive_accuracy: report.abductive_accuracy,
                    });
                }
                Ok(())
            },
        )?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    fn tiny() -> LmConfig {
        LmConfig {
            vocab_size: 4,
            context_len: 8,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            seed: 0,
            end_token: None,
        }
    }

    fn record(id: &str) -> AbductiveRecord {
        AbductiveRecord {
            id: id.into(),
            original_prompt: seq(&[0, 1]),
            modified_prompt: seq(&[0, 2]),
            right_answer: seq(&[3]),
            hallucinated_answer: seq(&[1]),
            margin: 0.0,
            text_original: String::new(),
            text_modified: String::new(),
        }
    }

    #[test]
    fn uniform_policy_scores_zero() {
        let p = LmPolicy::zeros(tiny()).unwrap();
        let r = evaluate(&p, &[record("a"), record("b")]).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.abductive_accuracy, 0.0);
        assert_eq!(r.n_items, 2);
    }

    #[test]
    fn empty_dataset_errors() {
        let p = LmPolicy::zeros(tiny()).unwrap();
        assert!(matches!(evaluate(&p, &[]), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn flat_likelihood_gives_flat_posterior() {
        let p = LmPolicy::zeros(tiny()).unwrap();
        let w = EnumeratedWorld::new(vec![seq(&[0]), seq(&[1]), seq(&[2])], &[0, 1], 2).unwrap();
        assert_eq!(w.responses().len(), 6);
        let t = abductive_policy_oracle(&p, &w).unwrap();
        for row in 0..6 {
            for x in 0..3 {
                assert!((t.posterior(row, x) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn world_limits_enforced() {
        let prompts: Vec<_> = (0..9).map(|i| seq(&[i % 4])).collect();
        assert!(EnumeratedWorld::new(prompts, &[0], 1).is_err());
        assert!(EnumeratedWorld::new(vec![seq(&[0])], &[0, 1, 2, 3, 0], 1).is_err());
        assert!(EnumeratedWorld::new(vec![seq(&[0])], &[0], 4).is_err());
        assert!(EnumeratedWorld::with_prior(vec![seq(&[0]), seq(&[1])], vec![0.5, 0.4], &[0], 1).is_err());
    }

    #[test]
    fn grid_bounds() {
        assert!(check_grid(&[0.0, 0.5, 1.0], 0.0, 1.0, "lambda").is_ok());
        assert!(check_grid(&[1.5], 0.0, 1.0, "lambda").is_err());
        assert!(check_grid(&[], 0.0, 1.0, "lambda").is_err());
    }
}
