//! Preference objectives over policy / reference log-likelihood ratios.
//!
//! With `ψ(x, y) = log π_θ(y|x) − log π_ref(y|x)` (summed over response
//! tokens), every objective here is a batch mean of a per-item term
//!
//! ```text
//! −log σ( β·(ψ_chosen − ψ_rejected) − λ_dpop · max(0, log π_ref(chosen) − log π_θ(chosen)) )
//! ```
//!
//! The standard direction compares two responses under one prompt
//! `(x, y_w, y_l)`; the abductive direction compares two prompts under one
//! response `(x_w, x_l, y)` and reuses the same term with the roles swapped.
//! The DPOP hinge (λ_dpop > 0) penalizes the preferred side falling below the
//! reference likelihood. The multitask objective mixes the two directions as
//! `λ·L_standard + (1 − λ)·L_abductive`.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{BoundLm, LmError, LmPolicy, TokenSequence};
use crate::tensor::{self, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error("loss called on an empty batch")]
    EmptyBatch,
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error("reference policy must be frozen")]
    ReferenceNotFrozen,
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dpo,
    Dpop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Standard,
    Abductive,
    Multitask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub objective: Objective,
    pub direction: Direction,
    pub beta: f64,
    /// Weight of the standard side; read only when `direction` is multitask.
    pub lambda_multi: f64,
    /// DPOP hinge weight; read only when `objective` is dpop.
    pub lambda_dpop: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::new(Objective::Dpo, Direction::Standard, 0.1)
    }
}

impl LossSpec {
    pub fn new(objective: Objective, direction: Direction, beta: f64) -> Self {
        LossSpec {
            objective,
            direction,
            beta,
            lambda_multi: 0.5,
            lambda_dpop: 0.0,
        }
    }

    pub fn with_lambda_multi(mut self, lambda: f64) -> Self {
        self.lambda_multi = lambda;
        self
    }

    pub fn with_lambda_dpop(mut self, lambda: f64) -> Self {
        self.lambda_dpop = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidSpec(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.lambda_multi) {
            return Err(LossError::InvalidSpec(format!(
                "lambda_multi must lie in [0, 1], got {}",
                self.lambda_multi
            )));
        }
        if !(self.lambda_dpop >= 0.0 && self.lambda_dpop.is_finite()) {
            return Err(LossError::InvalidSpec(format!(
                "lambda_dpop must be non-negative, got {}",
                self.lambda_dpop
            )));
        }
        Ok(())
    }

    /// Hinge weight actually applied (zero for plain DPO).
    fn penalty(&self) -> f64 {
        match self.objective {
            Objective::Dpo => 0.0,
            Objective::Dpop => self.lambda_dpop,
        }
    }
}

/// `(x, y_w, y_l)`: `chosen` is preferred over `rejected` for `prompt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePair {
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
}

impl ResponsePair {
    pub fn new(prompt: TokenSequence, chosen: TokenSequence, rejected: TokenSequence) -> Self {
        ResponsePair { prompt, chosen, rejected }
    }
}

/// `(x_w, x_l, y)`: `response` fits `chosen_prompt` better than `rejected_prompt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub chosen_prompt: TokenSequence,
    pub rejected_prompt: TokenSequence,
    pub response: TokenSequence,
}

impl PromptPair {
    pub fn new(chosen_prompt: TokenSequence, rejected_prompt: TokenSequence, response: TokenSequence) -> Self {
        PromptPair {
            chosen_prompt,
            rejected_prompt,
            response,
        }
    }
}

type PairKey = (TokenSequence, TokenSequence);

/// Frozen reference policy with a memo of `log π_ref(y|x)`.
pub struct ReferenceScores {
    policy: LmPolicy,
    cache: RefCell<HashMap<PairKey, f64>>,
}

impl ReferenceScores {
    pub fn new(policy: LmPolicy) -> Result<Self> {
        if !policy.is_frozen() {
            return Err(LossError::ReferenceNotFrozen);
        }
        Ok(ReferenceScores {
            policy,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn policy(&self) -> &LmPolicy {
        &self.policy
    }

    pub fn log_prob(&self, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        let key = (x.clone(), y.clone());
        if let Some(&v) = self.cache.borrow().get(&key) {
            return Ok(v);
        }
        let v = self.policy.log_prob_sum(x, y)?;
        self.cache.borrow_mut().insert(key, v);
        Ok(v)
    }
}

/// Policy bound onto one graph plus the reference. Each `(x, y)` pair is
/// scored once per graph, so a pair shared by both directions of a multitask
/// item is literally the same node.
pub struct Scorer<'g, 'r> {
    graph: &'g Graph,
    policy: BoundLm<'g, 'r>,
    reference: &'r ReferenceScores,
    cache: RefCell<HashMap<PairKey, Var<'g>>>,
}

impl<'g, 'r> Scorer<'g, 'r> {
    pub fn new(graph: &'g Graph, policy: &'r LmPolicy, reference: &'r ReferenceScores) -> Self {
        Scorer {
            graph,
            policy: policy.bind(graph),
            reference,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Scores with caller-supplied parameter nodes (finite-difference checks).
    pub fn from_vars(
        graph: &'g Graph,
        policy: &'r LmPolicy,
        vars: Vec<Var<'g>>,
        reference: &'r ReferenceScores,
    ) -> Self {
        Scorer {
            graph,
            policy: policy.bind_vars(vars),
            reference,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn bound_policy(&self) -> &BoundLm<'g, 'r> {
        &self.policy
    }

    /// Differentiable `log π_θ(y|x)`.
    pub fn policy_log_prob(&self, x: &TokenSequence, y: &TokenSequence) -> Result<Var<'g>> {
        let key = (x.clone(), y.clone());
        if let Some(&v) = self.cache.borrow().get(&key) {
            return Ok(v);
        }
        let v = self.policy.log_prob_sum(x, y)?;
        self.cache.borrow_mut().insert(key, v);
        Ok(v)
    }

    pub fn reference_log_prob(&self, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        self.reference.log_prob(x, y)
    }
}

/// `ψ(x, y)` as a graph node, with its ingredients.
#[derive(Debug, Clone)]
pub struct PsiScore<'g> {
    pub value: Var<'g>,
    pub policy_log_prob: Var<'g>,
    pub reference_log_prob: f64,
    pub x_id: String,
    pub y_id: String,
}

fn seq_id(s: &TokenSequence) -> String {
    s.ids().iter().map(u32::to_string).collect::<Vec<_>>().join("-")
}

pub fn compute_psi<'g>(s: &Scorer<'g, '_>, x: &TokenSequence, y: &TokenSequence) -> Result<PsiScore<'g>> {
    let policy_log_prob = s.policy_log_prob(x, y)?;
    let reference_log_prob = s.reference_log_prob(x, y)?;
    let value = policy_log_prob.sub(s.graph.constant(Tensor::scalar(reference_log_prob)))?;
    Ok(PsiScore {
        value,
        policy_log_prob,
        reference_log_prob,
        x_id: seq_id(x),
        y_id: seq_id(y),
    })
}

/// One item's term: `−log σ(β(ψ_w − ψ_l) − λ·max(0, log π_ref(w) − log π_θ(w)))`.
fn pair_term<'g>(s: &Scorer<'g, '_>, chosen: &PsiScore<'g>, rejected: &PsiScore<'g>, beta: f64, penalty: f64) -> Result<Var<'g>> {
    let mut z = chosen.value.sub(rejected.value)?.scalar_mul(beta)?;
    if penalty > 0.0 {
        let drop = s
            .graph
            .constant(Tensor::scalar(chosen.reference_log_prob))
            .sub(chosen.policy_log_prob)?
            .max_with_zero()?;
        z = z.sub(drop.scalar_mul(penalty)?)?;
    }
    Ok(z.log_sigmoid()?.scalar_mul(-1.0)?)
}

fn batch_mean<'g>(g: &'g Graph, terms: &[Var<'g>]) -> Result<Var<'g>> {
    let n = terms.len();
    Ok(g.sum_scalars(terms)?.scalar_mul(1.0 / n as f64)?)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidSpec(format!("beta must be positive, got {beta}")))
    }
}

fn check_penalty(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidSpec(format!("lambda_dpop must be non-negative, got {lambda}")))
    }
}

fn standard_side<'g>(s: &Scorer<'g, '_>, batch: &[ResponsePair], beta: f64, penalty: f64) -> Result<Var<'g>> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let terms = batch
        .iter()
        .map(|p| {
            let w = compute_psi(s, &p.prompt, &p.chosen)?;
            let l = compute_psi(s, &p.prompt, &p.rejected)?;
            pair_term(s, &w, &l, beta, penalty)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(s.graph, &terms)
}

fn abductive_side<'g>(s: &Scorer<'g, '_>, batch: &[PromptPair], beta: f64, penalty: f64) -> Result<Var<'g>> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let terms = batch
        .iter()
        .map(|p| {
            let w = compute_psi(s, &p.chosen_prompt, &p.response)?;
            let l = compute_psi(s, &p.rejected_prompt, &p.response)?;
            pair_term(s, &w, &l, beta, penalty)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(s.graph, &terms)
}

/// Mean over the batch of `−log σ(β(ψ(x, y_w) − ψ(x, y_l)))`.
pub fn dpo_loss<'g>(s: &Scorer<'g, '_>, batch: &[ResponsePair], beta: f64) -> Result<Var<'g>> {
    check_beta(beta)?;
    standard_side(s, batch, beta, 0.0)
}

/// Mean over the batch of `−log σ(β(ψ(x_w, y) − ψ(x_l, y)))`.
pub fn adpo_loss<'g>(s: &Scorer<'g, '_>, batch: &[PromptPair], beta: f64) -> Result<Var<'g>> {
    check_beta(beta)?;
    abductive_side(s, batch, beta, 0.0)
}

/// DPO with the hinge `λ·max(0, log π_ref(y_w|x) − log π_θ(y_w|x))` subtracted
/// inside the sigmoid. `lambda_dpop = 0` is exactly [`dpo_loss`].
pub fn dpop_loss<'g>(s: &Scorer<'g, '_>, batch: &[ResponsePair], beta: f64, lambda_dpop: f64) -> Result<Var<'g>> {
    check_beta(beta)?;
    check_penalty(lambda_dpop)?;
    standard_side(s, batch, beta, lambda_dpop)
}

/// Role-swapped DPOP: the hinge guards `log π_θ(y|x_w)`.
pub fn adpop_loss<'g>(s: &Scorer<'g, '_>, batch: &[PromptPair], beta: f64, lambda_dpop: f64) -> Result<Var<'g>> {
    check_beta(beta)?;
    check_penalty(lambda_dpop)?;
    abductive_side(s, batch, beta, lambda_dpop)
}

/// `λ·L_standard + (1 − λ)·L_abductive` with both sides using `spec.objective`.
/// At `λ ∈ {0, 1}` only the surviving side is built, so the result is
/// bit-identical to the single-direction loss and the unused batch may be empty.
pub fn multi_loss<'g>(
    s: &Scorer<'g, '_>,
    responses: &[ResponsePair],
    prompts: &[PromptPair],
    spec: &LossSpec,
) -> Result<Var<'g>> {
    spec.validate()?;
    let lambda = spec.lambda_multi;
    let penalty = spec.penalty();
    if lambda == 1.0 {
        return standard_side(s, responses, spec.beta, penalty);
    }
    if lambda == 0.0 {
        return abductive_side(s, prompts, spec.beta, penalty);
    }
    let std_side = standard_side(s, responses, spec.beta, penalty)?.scalar_mul(lambda)?;
    let abd_side = abductive_side(s, prompts, spec.beta, penalty)?.scalar_mul(1.0 - lambda)?;
    Ok(std_side.add(abd_side)?)
}

/// Dispatches on `spec.direction`. Standard reads only `responses`,
/// abductive only `prompts`.
pub fn objective<'g>(
    s: &Scorer<'g, '_>,
    spec: &LossSpec,
    responses: &[ResponsePair],
    prompts: &[PromptPair],
) -> Result<Var<'g>> {
    spec.validate()?;
    match spec.direction {
        Direction::Standard => standard_side(s, responses, spec.beta, spec.penalty()),
        Direction::Abductive => abductive_side(s, prompts, spec.beta, spec.penalty()),
        Direction::Multitask => multi_loss(s, responses, prompts, spec),
    }
}

/// Scalar form of one DPO term for given ψ values.
pub fn dpo_term(psi_chosen: f64, psi_rejected: f64, beta: f64) -> f64 {
    -tensor::log_sigmoid(beta * (psi_chosen - psi_rejected))
}

/// Scalar form of one DPOP term; `chosen_drop` is `log π_ref − log π_θ` of the chosen side.
pub fn dpop_term(psi_chosen: f64, psi_rejected: f64, chosen_drop: f64, beta: f64, lambda_dpop: f64) -> f64 {
    -tensor::log_sigmoid(beta * (psi_chosen - psi_rejected) - lambda_dpop * chosen_drop.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{micro_config, scrambled_policy};

    const LN2: f64 = std::f64::consts::LN_2;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    fn resp_batch() -> Vec<ResponsePair> {
        vec![
            ResponsePair::new(seq(&[0, 1]), seq(&[2, 3]), seq(&[4])),
            ResponsePair::new(seq(&[3]), seq(&[1, 1]), seq(&[0, 2, 2])),
        ]
    }

    fn prompt_batch() -> Vec<PromptPair> {
        vec![
            PromptPair::new(seq(&[0, 1]), seq(&[0, 4]), seq(&[2, 3])),
            PromptPair::new(seq(&[2, 2, 2]), seq(&[1]), seq(&[4])),
        ]
    }

    fn eval(policy: &LmPolicy, reference: &LmPolicy, spec: &LossSpec) -> f64 {
        let r = ReferenceScores::new(reference.clone_frozen()).unwrap();
        let g = Graph::new();
        let s = Scorer::new(&g, policy, &r);
        objective(&s, spec, &resp_batch(), &prompt_batch()).unwrap().item()
    }

    #[test]
    fn identical_policies_give_ln2() {
        let p = scrambled_policy(micro_config(1), 2, 0.5);
        for (obj, dir) in [
            (Objective::Dpo, Direction::Standard),
            (Objective::Dpo, Direction::Abductive),
            (Objective::Dpop, Direction::Standard),
            (Objective::Dpop, Direction::Abductive),
            (Objective::Dpo, Direction::Multitask),
            (Objective::Dpop, Direction::Multitask),
        ] {
            let spec = LossSpec::new(obj, dir, 0.1).with_lambda_dpop(1.0);
            assert!((eval(&p, &p, &spec) - LN2).abs() < 1e-12, "{obj:?} {dir:?}");
        }
    }

    #[test]
    fn dpo_scalar_values() {
        assert!((dpo_term(3.0, 3.0, 0.1) - LN2).abs() < 1e-15);
        // −ln σ(1) = ln(1 + e^{-1}), evaluated independently.
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((dpo_term(10.0, 0.0, 0.1) - expected).abs() < 1e-15);
        assert!((expected - 0.31326).abs() < 5e-6);
    }

    #[test]
    fn empty_batch_and_bad_spec() {
        let p = scrambled_policy(micro_config(1), 2, 0.5);
        let r = ReferenceScores::new(p.clone_frozen()).unwrap();
        let g = Graph::new();
        let s = Scorer::new(&g, &p, &r);
        assert!(matches!(dpo_loss(&s, &[], 0.1), Err(LossError::EmptyBatch)));
        assert!(matches!(adpo_loss(&s, &[], 0.1), Err(LossError::EmptyBatch)));
        assert!(matches!(dpop_loss(&s, &resp_batch(), 0.1, -1.0), Err(LossError::InvalidSpec(_))));
        let spec = LossSpec::new(Objective::Dpo, Direction::Multitask, 0.1).with_lambda_multi(1.5);
        assert!(matches!(multi_loss(&s, &resp_batch(), &prompt_batch(), &spec), Err(LossError::InvalidSpec(_))));
        let spec = LossSpec::new(Objective::Dpo, Direction::Multitask, 0.1).with_lambda_multi(0.5);
        assert!(matches!(multi_loss(&s, &resp_batch(), &[], &spec), Err(LossError::EmptyBatch)));
        let spec = spec.with_lambda_multi(1.0);
        assert!(multi_loss(&s, &resp_batch(), &[], &spec).is_ok());
    }

    #[test]
    fn reference_must_be_frozen() {
        let p = scrambled_policy(micro_config(1), 2, 0.5);
        assert!(matches!(ReferenceScores::new(p), Err(LossError::ReferenceNotFrozen)));
    }

    #[test]
    fn shared_pair_is_scored_once() {
        let p = scrambled_policy(micro_config(1), 2, 0.5);
        let r = ReferenceScores::new(p.clone_frozen()).unwrap();
        let g = Graph::new();
        let s = Scorer::new(&g, &p, &r);
        let a = s.policy_log_prob(&seq(&[1, 2]), &seq(&[3])).unwrap();
        let before = g.len();
        let b = s.policy_log_prob(&seq(&[1, 2]), &seq(&[3])).unwrap();
        assert_eq!(g.len(), before);
        assert_eq!(a.item().to_bits(), b.item().to_bits());
    }
}
