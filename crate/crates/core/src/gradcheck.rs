//! Central finite-difference checks of the autodiff rules.
//!
//! The step for coordinate `x` is `h = 1e-4 · max(1, |x|)` and the error
//! measure is `|autodiff − numeric| / max(1, |numeric|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::lm::{LmConfig, LmPolicy, TokenSequence};
use crate::losses::{self, Direction, LossSpec, Objective, PromptPair, ReferenceScores, ResponsePair, Scorer};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Relative tolerance every check must meet.
pub const RTOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub scope: String,
    pub rtol: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Largest relative error between autodiff and central differences of the
/// scalar function `f` with respect to every element of every input.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &leaves)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let x = input.data()[idx];
            let h = step(x);
            probe[which] = input.with_value(idx, x + h);
            let plus = eval(&probe)?;
            probe[which] = input.with_value(idx, x - h);
            let minus = eval(&probe)?;
            probe[which] = input.clone();
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[which].data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

/// Values bounded away from zero so the hinge kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

type OpCase = (
    &'static str,
    fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
);

/// A weighted sum keeps every output element in play when reducing to a scalar.
fn weighted_sum<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = v.graph().constant(Tensor::new(shape, w)?);
    v.mul(w)?.sum()
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", |r| vec![random_tensor(r, &[3, 4], 2.0), random_tensor(r, &[3, 4], 2.0)], |_, v| {
            weighted_sum(v[0].add(v[1])?)
        }),
        ("sub", |r| vec![random_tensor(r, &[3, 4], 2.0), random_tensor(r, &[3, 4], 2.0)], |_, v| {
            weighted_sum(v[0].sub(v[1])?)
        }),
        ("mul", |r| vec![random_tensor(r, &[3, 4], 2.0), random_tensor(r, &[3, 4], 2.0)], |_, v| {
            weighted_sum(v[0].mul(v[1])?)
        }),
        ("scalar_mul", |r| vec![random_tensor(r, &[5], 2.0)], |_, v| {
            weighted_sum(v[0].scalar_mul(-1.7)?)
        }),
        ("add_row", |r| vec![random_tensor(r, &[3, 4], 2.0), random_tensor(r, &[4], 2.0)], |_, v| {
            weighted_sum(v[0].add_row(v[1])?)
        }),
        ("matmul", |r| vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[4, 2], 1.0)], |_, v| {
            weighted_sum(v[0].matmul(v[1])?)
        }),
        ("transpose", |r| vec![random_tensor(r, &[3, 2], 1.0)], |_, v| {
            weighted_sum(v[0].transpose()?)
        }),
        ("embedding_gather", |r| vec![random_tensor(r, &[5, 3], 1.0)], |_, v| {
            weighted_sum(v[0].embedding_gather(&[4, 0, 4, 2])?)
        }),
        ("slice_rows", |r| vec![random_tensor(r, &[4, 3], 1.0)], |_, v| {
            weighted_sum(v[0].slice_rows(1, 2)?)
        }),
        ("slice_cols", |r| vec![random_tensor(r, &[3, 5], 1.0)], |_, v| {
            weighted_sum(v[0].slice_cols(1, 3)?)
        }),
        ("concat_cols", |r| vec![random_tensor(r, &[3, 2], 1.0), random_tensor(r, &[3, 1], 1.0)], |_, v| {
            weighted_sum(Var::concat_cols(&[v[0], v[1]])?)
        }),
        (
            "layer_norm",
            |r| vec![random_tensor(r, &[3, 5], 2.0), random_tensor(r, &[5], 1.5), random_tensor(r, &[5], 1.0)],
            |_, v| weighted_sum(v[0].layer_norm(v[1], v[2], 1e-5)?),
        ),
        ("gelu", |r| vec![random_tensor(r, &[6], 3.0)], |_, v| weighted_sum(v[0].gelu()?)),
        ("log_softmax", |r| vec![random_tensor(r, &[3, 4], 3.0)], |_, v| {
            weighted_sum(v[0].log_softmax(1)?)
        }),
        ("log_softmax_axis0", |r| vec![random_tensor(r, &[3, 4], 3.0)], |_, v| {
            weighted_sum(v[0].log_softmax(0)?)
        }),
        ("causal_softmax", |r| vec![random_tensor(r, &[4, 4], 2.0)], |_, v| {
            weighted_sum(v[0].causal_softmax()?)
        }),
        ("gather_logprob", |r| vec![random_tensor(r, &[3, 4], 2.0)], |_, v| {
            weighted_sum(v[0].gather_logprob(&[3, 0, 2])?)
        }),
        ("sum", |r| vec![random_tensor(r, &[2, 3], 2.0)], |_, v| v[0].sum()),
        ("mean", |r| vec![random_tensor(r, &[2, 3], 2.0)], |_, v| v[0].mean()),
        ("max_with_zero", |r| vec![away_from_zero(r, &[6])], |_, v| {
            weighted_sum(v[0].max_with_zero()?)
        }),
        ("sigmoid", |r| vec![random_tensor(r, &[6], 4.0)], |_, v| weighted_sum(v[0].sigmoid()?)),
        ("log_sigmoid", |r| vec![random_tensor(r, &[6], 4.0)], |_, v| {
            weighted_sum(v[0].log_sigmoid()?)
        }),
        ("exp", |r| vec![random_tensor(r, &[4], 2.0)], |_, v| weighted_sum(v[0].exp()?)),
        (
            "composite_3_layer",
            |r| {
                vec![
                    random_tensor(r, &[2, 3], 1.0),
                    random_tensor(r, &[3, 4], 1.0),
                    random_tensor(r, &[4, 4], 1.0),
                    random_tensor(r, &[4, 3], 1.0),
                ]
            },
            |_, v| {
                let h = v[0].matmul(v[1])?.gelu()?;
                let h = h.matmul(v[2])?.sigmoid()?;
                weighted_sum(h.matmul(v[3])?.log_softmax(1)?)
            },
        ),
    ]
}

/// A square op whose backward rule is deliberately off by a factor of two.
/// Used to prove the checker rejects a broken rule.
pub fn faulty_square<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let v = x.value();
    let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())?;
    x.graph().custom("faulty_square", &[x], out, move |g| {
        let d = g.data().iter().zip(v.data()).map(|(u, a)| u * a).collect();
        vec![Tensor::new(v.shape().to_vec(), d).expect("same shape")]
    })
}

/// Checks every tensor op on `trials` random inputs each.
pub fn check_ops(trials: usize, seed: u64, inject_fault: bool) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, gen, f) in op_cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs = gen(&mut rng);
            worst = worst.max(max_relative_error(&inputs, f)?);
        }
        entries.push(entry(name, trials, worst));
    }
    if inject_fault {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs = vec![random_tensor(&mut rng, &[4], 2.0)];
            worst = worst.max(max_relative_error(&inputs, |_, v| faulty_square(v[0])?.sum())?);
        }
        entries.push(entry("faulty_square", trials, worst));
    }
    Ok(GradcheckReport {
        scope: "ops".into(),
        rtol: RTOL,
        entries,
    })
}

fn entry(name: &str, trials: usize, worst: f64) -> GradcheckEntry {
    GradcheckEntry {
        name: name.to_string(),
        trials,
        max_rel_err: worst,
        passed: worst <= RTOL,
    }
}

/// Micro configuration used by the model and loss checks.
pub fn micro_config(seed: u64) -> LmConfig {
    LmConfig {
        vocab_size: 5,
        context_len: 8,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        seed,
        end_token: None,
    }
}

/// Random parameters at a scale where every nonlinearity is exercised.
pub fn scrambled_policy(config: LmConfig, seed: u64, scale: f64) -> LmPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = LmPolicy::new(config).expect("valid micro config");
    let params = base
        .params()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape is consistent")
        })
        .collect();
    base.with_params(params).expect("same layout")
}

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec()).expect("non-empty")
}

/// Gradient of `log π(y|x)` with respect to every model parameter.
pub fn check_lm(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let policy = scrambled_policy(micro_config(seed + t as u64), seed + 100 + t as u64, 0.5);
        let (x, y) = (seq(&[0, 3, 1]), seq(&[4, 2, 2]));
        let err = max_relative_error(policy.params(), |_, vars| {
            policy.bind_vars(vars.to_vec()).log_prob_sum(&x, &y).map_err(lm_to_tensor)
        })?;
        worst = worst.max(err);
    }
    Ok(GradcheckReport {
        scope: "lm".into(),
        rtol: RTOL,
        entries: vec![entry("log_prob_sum", trials, worst)],
    })
}

fn lm_to_tensor(e: crate::lm::LmError) -> TensorError {
    match e {
        crate::lm::LmError::Tensor(t) => t,
        other => panic!("unexpected model error during gradient check: {other}"),
    }
}

fn loss_to_tensor(e: losses::LossError) -> TensorError {
    match e {
        losses::LossError::Tensor(t) => t,
        losses::LossError::Model(m) => lm_to_tensor(m),
        other => panic!("unexpected loss error during gradient check: {other}"),
    }
}

/// Gradient of each preference objective with respect to the policy
/// parameters, against a reference that differs from the policy so every
/// term (including an active DPOP hinge) contributes.
pub fn check_losses(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let specs: Vec<(&str, LossSpec)> = vec![
        ("dpo", LossSpec::new(Objective::Dpo, Direction::Standard, 0.7)),
        ("adpo", LossSpec::new(Objective::Dpo, Direction::Abductive, 0.7)),
        ("dpop", LossSpec::new(Objective::Dpop, Direction::Standard, 0.7).with_lambda_dpop(2.0)),
        ("adpop", LossSpec::new(Objective::Dpop, Direction::Abductive, 0.7).with_lambda_dpop(2.0)),
        ("multi_dpo", LossSpec::new(Objective::Dpo, Direction::Multitask, 0.7).with_lambda_multi(0.3)),
        (
            "multi_dpop",
            LossSpec::new(Objective::Dpop, Direction::Multitask, 0.7)
                .with_lambda_multi(0.6)
                .with_lambda_dpop(1.5),
        ),
    ];
    let resp = vec![
        ResponsePair::new(seq(&[0, 1]), seq(&[2, 3]), seq(&[4])),
        ResponsePair::new(seq(&[0, 2]), seq(&[1]), seq(&[3, 3])),
    ];
    let prompts = vec![
        PromptPair::new(seq(&[0, 1]), seq(&[0, 4]), seq(&[2, 3])),
        PromptPair::new(seq(&[3, 2]), seq(&[0, 2]), seq(&[1])),
    ];
    let mut entries = Vec::new();
    for (name, spec) in specs {
        let mut worst: f64 = 0.0;
        for t in 0..trials {
            let s = seed + 31 * t as u64;
            let policy = scrambled_policy(micro_config(s), s + 1, 0.6);
            let reference = ReferenceScores::new(scrambled_policy(micro_config(s + 2), s + 3, 0.6).clone_frozen())
                .expect("frozen reference");
            let err = max_relative_error(policy.params(), |g, vars| {
                let scorer = Scorer::from_vars(g, &policy, vars.to_vec(), &reference);
                losses::objective(&scorer, &spec, &resp, &prompts).map_err(loss_to_tensor)
            })?;
            worst = worst.max(err);
        }
        entries.push(entry(name, trials, worst));
    }
    Ok(GradcheckReport {
        scope: "losses".into(),
        rtol: RTOL,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faulty_rule_is_caught() {
        let report = check_ops(3, 9, true).unwrap();
        let faulty = report.entries.iter().find(|e| e.name == "faulty_square").unwrap();
        assert!(!faulty.passed);
        assert!(!report.passed());
    }

    #[test]
    fn linear_function_has_tiny_error() {
        let x = Tensor::vector(vec![0.3, -1.2, 5.0]).unwrap();
        let err = max_relative_error(&[x], |_, v| v[0].scalar_mul(2.5)?.sum()).unwrap();
        assert!(err < 1e-9);
    }
}
