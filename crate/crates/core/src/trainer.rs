//! MLE pretraining and preference fine-tuning.
//!
//! Both loops use Adam with decoupled weight decay,
//! global-norm clipping, and a linear warmup to a constant learning rate.
//! Each epoch visits the data in a ChaCha8 order seeded by `(seed, epoch)`,
//! so a run is a pure function of its inputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{AbductiveRecord, CorpusItem};
use crate::lm::{LmError, LmPolicy};
use crate::losses::{self, LossError, LossSpec, PromptPair, ReferenceScores, ResponsePair, Scorer};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("reference policy must be frozen")]
    ReferenceNotFrozen,
    #[error("policy must be trainable")]
    PolicyFrozen,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Io(String),
    /// Raised by an epoch callback.
    #[error("{0}")]
    Callback(String),
}

impl TrainError {
    /// True for NaN/Inf failures, as opposed to configuration or I/O ones.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Model(LmError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Loss(LossError::Model(LmError::Tensor(TensorError::NonFinite { .. })))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub warmup_ratio: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossSpec::default(),
            epochs: 5,
            lr: 1e-3,
            batch_size: 8,
            grad_accum: 2,
            max_grad_norm: 1.0,
            warmup_ratio: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub warmup_ratio: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            lr: 1e-3,
            batch_size: 16,
            max_grad_norm: 1.0,
            warmup_ratio: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

struct Schedule {
    epochs: usize,
    lr: f64,
    batch_size: usize,
    grad_accum: usize,
    max_grad_norm: f64,
    warmup_ratio: f64,
}

impl Schedule {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size * self.grad_accum)
    }

    /// Learning rate at optimizer step `step` (0-based).
    fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = (self.warmup_ratio * total_steps as f64).ceil() as usize;
        if step < warmup {
            self.lr * (step + 1) as f64 / warmup as f64
        } else {
            self.lr
        }
    }
}

/// Learning-rate factor of the constant-with-warmup schedule.
pub fn warmup_factor(step: usize, total_steps: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        1.0
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &[Tensor], grads: &[Vec<f64>], lr: f64) -> Result<Vec<Tensor>> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(j, (&w, &gj))| {
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                    w - lr * ((m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps) + c.weight_decay * w)
                })
                .collect();
            out.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64, norm: f64) {
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
}

fn accumulate(acc: &mut [Vec<f64>], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
    }
}

/// Result of [`pretrain_mle`].
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub policy: LmPolicy,
    /// Mean per-token negative log-likelihood before any update.
    pub initial_loss: f64,
    /// Mean per-token negative log-likelihood after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean over items of `−log π(answer | prompt) / |answer|`.
pub fn mle_loss(policy: &LmPolicy, corpus: &[CorpusItem]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for item in corpus {
        total -= policy.avg_log_lik(&item.prompt, &item.answer)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Maximum-likelihood training on answer tokens only.
pub fn pretrain_mle(policy: &LmPolicy, corpus: &[CorpusItem], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if policy.is_frozen() {
        return Err(TrainError::PolicyFrozen);
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sched = Schedule {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        grad_accum: 1,
        max_grad_norm: cfg.max_grad_norm,
        warmup_ratio: cfg.warmup_ratio,
    };
    sched.validate()?;
    let initial_loss = mle_loss(policy, corpus)?;
    let mut policy = policy.clone();
    let mut adam = Adam::new(cfg.adam.clone(), policy.params());
    let total_steps = sched.epochs * sched.steps_per_epoch(corpus.len());
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch);
        for chunk in order.chunks(sched.batch_size) {
            let g = Graph::new();
            let bound = policy.bind(&g);
            let terms = chunk
                .iter()
                .map(|&i| {
                    let item = &corpus[i];
                    let lp = bound.log_prob_sum(&item.prompt, &item.answer)?;
                    Ok(lp.scalar_mul(-1.0 / item.answer.len() as f64)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = g.sum_scalars(&terms)?.scalar_mul(1.0 / chunk.len() as f64)?;
            if !loss.item().is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = bound.param_grads().iter().map(|t| t.data().to_vec()).collect();
            let norm = global_norm(&grads);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            clip(&mut grads, sched.max_grad_norm, norm);
            let next = adam.step(policy.params(), &grads, sched.lr_at(step, total_steps))?;
            policy.set_params(next)?;
            step += 1;
        }
        let l = mle_loss(&policy, corpus)?;
        log::debug!("pretrain epoch {} loss {l:.4}", epoch + 1);
        epoch_losses.push(l);
    }
    Ok(PretrainOutcome {
        policy,
        initial_loss,
        epoch_losses,
    })
}

/// One optimizer step of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: usize,
    /// Fractional epoch at the end of this step, in `(e, e + 1]` for the `e`-th (0-based) epoch.
    pub epoch: f64,
    pub logp_chosen_std: f64,
    pub logp_rejected_std: f64,
    pub logp_chosen_abd: f64,
    pub logp_rejected_abd: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-step training log. The four log-probabilities are means over the
/// step's items of `log π_θ(y_w|x)`, `log π_θ(y_l|x)`, `log π_θ(y|x_w)` and
/// `log π_θ(y|x_l)`, measured before the update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<DynamicsRow>, _>>()
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Ok(DynamicsLog { rows })
    }

    /// Mean of every column per 1-based epoch, in epoch order. The `step`
    /// field holds the last step of the epoch.
    pub fn epoch_means(&self) -> Vec<DynamicsRow> {
        let mut out: Vec<(usize, Vec<&DynamicsRow>)> = Vec::new();
        for row in &self.rows {
            let e = row.epoch.ceil() as usize;
            match out.last_mut() {
                Some((last, rows)) if *last == e => rows.push(row),
                _ => out.push((e, vec![row])),
            }
        }
        out.into_iter()
            .map(|(e, rows)| {
                let n = rows.len() as f64;
                let mean = |f: fn(&DynamicsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                DynamicsRow {
                    step: rows.last().expect("non-empty group").step,
                    epoch: e as f64,
                    logp_chosen_std: mean(|r| r.logp_chosen_std),
                    logp_rejected_std: mean(|r| r.logp_rejected_std),
                    logp_chosen_abd: mean(|r| r.logp_chosen_abd),
                    logp_rejected_abd: mean(|r| r.logp_rejected_abd),
                    loss: mean(|r| r.loss),
                    grad_norm: mean(|r| r.grad_norm),
                }
            })
            .collect()
    }
}

/// Result of [`finetune`].
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub policy: LmPolicy,
    pub dynamics: DynamicsLog,
}

/// Preference fine-tuning of `policy` against the frozen `reference`.
pub fn finetune(
    policy: &LmPolicy,
    reference: &LmPolicy,
    records: &[AbductiveRecord],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    finetune_with(policy, reference, records, cfg, |_, _| Ok(()))
}

/// [`finetune`] calling `on_epoch(epoch, policy)` after each 1-based epoch.
pub fn finetune_with<F>(
    policy: &LmPolicy,
    reference: &LmPolicy,
    records: &[AbductiveRecord],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(usize, &LmPolicy) -> Result<()>,
{
    if !reference.is_frozen() {
        return Err(TrainError::ReferenceNotFrozen);
    }
    if policy.is_frozen() {
        return Err(TrainError::PolicyFrozen);
    }
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.loss.validate()?;
    let sched = Schedule {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        grad_accum: cfg.grad_accum,
        max_grad_norm: cfg.max_grad_norm,
        warmup_ratio: cfg.warmup_ratio,
    };
    sched.validate()?;

    let responses: Vec<ResponsePair> = records.iter().map(AbductiveRecord::response_pair).collect();
    let prompts: Vec<PromptPair> = records.iter().map(AbductiveRecord::prompt_pair).collect();
    let ref_scores = ReferenceScores::new(reference.clone())?;
    let mut policy = policy.clone();
    let mut adam = Adam::new(cfg.adam.clone(), policy.params());
    let spe = sched.steps_per_epoch(records.len());
    let total_steps = sched.epochs * spe;
    let mut dynamics = DynamicsLog::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(records.len(), cfg.seed, epoch);
        for step_items in order.chunks(sched.batch_size * sched.grad_accum) {
            let mut acc: Vec<Vec<f64>> = policy.params().iter().map(|p| vec![0.0; p.len()]).collect();
            let mut loss_sum = 0.0;
            let mut logged = [0.0; 4];
            let micro: Vec<&[usize]> = step_items.chunks(sched.batch_size).collect();
            for batch in &micro {
                let g = Graph::new();
                let scorer = Scorer::new(&g, &policy, &ref_scores);
                let resp: Vec<ResponsePair> = batch.iter().map(|&i| responses[i].clone()).collect();
                let prm: Vec<PromptPair> = batch.iter().map(|&i| prompts[i].clone()).collect();
                let loss = losses::objective(&scorer, &cfg.loss, &resp, &prm)?;
                for (r, p) in resp.iter().zip(&prm) {
                    logged[0] += scorer.policy_log_prob(&r.prompt, &r.chosen)?.item();
                    logged[1] += scorer.policy_log_prob(&r.prompt, &r.rejected)?.item();
                    logged[2] += scorer.policy_log_prob(&p.chosen_prompt, &p.response)?.item();
                    logged[3] += scorer.policy_log_prob(&p.rejected_prompt, &p.response)?.item();
                }
                let l = loss.item();
                if !l.is_finite() {
                    return Err(TrainError::NonFinite { step });
                }
                loss_sum += l;
                g.backward(loss)?;
                accumulate(&mut acc, &scorer.bound_policy().param_grads());
            }
            let k = micro.len() as f64;
            acc.iter_mut().flatten().for_each(|x| *x /= k);
            let norm = global_norm(&acc);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { step });
            }
            clip(&mut acc, sched.max_grad_norm, norm);
            let n = step_items.len() as f64;
            dynamics.rows.push(DynamicsRow {
                step,
                epoch: (step + 1) as f64 / spe as f64,
                logp_chosen_std: logged[0] / n,
                logp_rejected_std: logged[1] / n,
                logp_chosen_abd: logged[2] / n,
                logp_rejected_abd: logged[3] / n,
                loss: loss_sum / k,
                grad_norm: norm,
            });
            let next = adam.step(policy.params(), &acc, sched.lr_at(step, total_steps))?;
            policy.set_params(next)?;
            step += 1;
        }
        on_epoch(epoch + 1, &policy)?;
    }
    Ok(FinetuneOutcome { policy, dynamics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_constant() {
        // 10 steps, ratio 0.1 -> one warmup step at full rate.
        assert_eq!(warmup_factor(0, 10, 0.1), 1.0);
        // 20 steps, ratio 0.1 -> two warmup steps.
        assert_eq!(warmup_factor(0, 20, 0.1), 0.5);
        assert_eq!(warmup_factor(1, 20, 0.1), 1.0);
        assert_eq!(warmup_factor(5, 20, 0.0), 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let n = global_norm(&g);
        assert_eq!(n, 5.0);
        clip(&mut g, 1.0, n);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        let out = adam.step(&p, &[vec![0.3, -5.0]], 0.1).unwrap();
        // Bias-corrected first step is lr·sign(g) up to eps.
        assert!((out[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((out[0].data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn epoch_means_group_by_epoch() {
        let row = |step: usize, epoch: f64, loss: f64| DynamicsRow {
            step,
            epoch,
            logp_chosen_std: 0.0,
            logp_rejected_std: 0.0,
            logp_chosen_abd: 0.0,
            logp_rejected_abd: 0.0,
            loss,
            grad_norm: 0.0,
        };
        let log = DynamicsLog {
            rows: vec![row(0, 0.5, 1.0), row(1, 1.0, 3.0), row(2, 1.5, 5.0), row(3, 2.0, 7.0)],
        };
        let means = log.epoch_means();
        assert_eq!(means.len(), 2);
        assert_eq!(means[0].loss, 2.0);
        assert_eq!(means[1].loss, 6.0);
        assert_eq!(means[1].step, 3);
    }
}
