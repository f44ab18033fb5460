//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --test acceptance`.

use std::f64::consts::LN_2;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use abdpref::cli::config::ExperimentConfig;
use abdpref::cli::pipeline::{self, DatasetBundle};
use abdpref::cli::{self, Scope};
use abdpref::datagen::AbductiveRecord;
use abdpref::evalkit::{self, EnumeratedWorld, EvalReport, WorldTriple};
use abdpref::gradcheck::{micro_config, scrambled_policy, RTOL};
use abdpref::lm::{LmPolicy, TokenSequence};
use abdpref::losses::{self, Direction, LossSpec, Objective, PromptPair, ReferenceScores, ResponsePair, Scorer};
use abdpref::tensor::Graph;
use abdpref::trainer::{self, FinetuneOutcome, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SWAP_POLICIES: usize = 50;
const SWAP_TOL: f64 = 1e-9;
const SWAP_BUDGET: Duration = Duration::from_secs(60);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);
const BOUNDARY_TOL: f64 = 1e-12;
const STD_GAIN: f64 = 0.20;
const ABD_DRIFT: f64 = 0.10;
const ABD_GAIN: f64 = 0.20;
const MULTI_SLACK: f64 = 0.05;
const DIRECTION_BUDGET: Duration = Duration::from_secs(15 * 60);

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec()).unwrap()
}

fn swap_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..SWAP_POLICIES as u64 {
        let n_prompts = rng.random_range(2..=8);
        let mut prompts: Vec<Vec<u32>> = Vec::new();
        while prompts.len() < n_prompts {
            let len = rng.random_range(1..=3);
            let p: Vec<u32> = (0..len).map(|_| rng.random_range(0..5)).collect();
            if !prompts.contains(&p) {
                prompts.push(p);
            }
        }
        let world = EnumeratedWorld::new(prompts.iter().map(|p| seq(p)).collect(), &[0, 1, 2, 3], 3)
            .map_err(|e| e.to_string())?;
        let policy = scrambled_policy(micro_config(i), i, 1.0);
        let reference = scrambled_policy(micro_config(i + 1000), i + 1000, 1.0).clone_frozen();
        let (nx, ny) = (world.prompts().len(), world.responses().len());
        let triples: Vec<_> = (0..20)
            .map(|_| WorldTriple {
                chosen_prompt: rng.random_range(0..nx),
                rejected_prompt: rng.random_range(0..nx),
                response: rng.random_range(0..ny),
            })
            .collect();
        let gap = evalkit::verify_swap_equivalence(&policy, &reference, &world, 0.1, &triples).map_err(|e| e.to_string())?;
        worst = worst.max(gap);
    }
    let took = started.elapsed();
    check(
        worst <= SWAP_TOL && took < SWAP_BUDGET,
        format!("{SWAP_POLICIES} policies, max discrepancy {worst:.2e} (tol {SWAP_TOL:.0e}), {took:.1?}"),
    )
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let reports = cli::run_gradcheck(Scope::All, 100, 0, false).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    let entries: Vec<_> = reports.iter().flat_map(|r| &r.entries).collect();
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<_> = entries.iter().filter(|e| !e.passed).map(|e| e.name.clone()).collect();
    check(
        failing.is_empty() && worst <= RTOL && took < GRADCHECK_BUDGET,
        format!(
            "{} checks, worst rel err {worst:.2e} (rtol {RTOL:.0e}), {took:.1?}{}",
            entries.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    )
}

fn loss_boundaries(records: &[AbductiveRecord], base: &LmPolicy) -> Outcome {
    let responses: Vec<ResponsePair> = records.iter().map(AbductiveRecord::response_pair).collect();
    let prompts: Vec<PromptPair> = records.iter().map(AbductiveRecord::prompt_pair).collect();
    let value = |policy: &LmPolicy, reference: &LmPolicy, spec: &LossSpec| -> Result<f64, String> {
        let g = Graph::new();
        let refs = ReferenceScores::new(reference.clone_frozen()).map_err(|e| e.to_string())?;
        let s = Scorer::new(&g, policy, &refs);
        Ok(losses::objective(&s, spec, &responses, &prompts).map_err(|e| e.to_string())?.item())
    };
    let mut worst: f64 = 0.0;
    for objective in [Objective::Dpo, Objective::Dpop] {
        for direction in [Direction::Standard, Direction::Abductive] {
            let spec = LossSpec::new(objective, direction, 0.1).with_lambda_dpop(0.5);
            worst = worst.max((value(base, base, &spec)? - LN_2).abs());
        }
    }
    // a policy that differs from its reference, so the two sides disagree
    let moved = base.with_params(scrambled_params(base, 9)).map_err(|e| e.to_string())?;
    let mut mismatched = Vec::new();
    for objective in [Objective::Dpo, Objective::Dpop] {
        for (lambda, single) in [(1.0, Direction::Standard), (0.0, Direction::Abductive)] {
            let multi = LossSpec::new(objective, Direction::Multitask, 0.1)
                .with_lambda_multi(lambda)
                .with_lambda_dpop(0.5);
            let alone = LossSpec::new(objective, single, 0.1).with_lambda_dpop(0.5);
            let (m, a) = (value(&moved, base, &multi)?, value(&moved, base, &alone)?);
            if m.to_bits() != a.to_bits() {
                mismatched.push(format!("{objective:?} lambda={lambda}: {m} vs {a}"));
            }
        }
    }
    check(
        worst <= BOUNDARY_TOL && mismatched.is_empty(),
        format!(
            "max |loss - ln 2| {worst:.1e} over 4 losses; multitask at lambda 0/1 bit-identical: {}",
            if mismatched.is_empty() { "yes".to_string() } else { format!("no {mismatched:?}") }
        ),
    )
}

fn scrambled_params(p: &LmPolicy, seed: u64) -> Vec<abdpref::tensor::Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.params()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
            abdpref::tensor::Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

struct Runs {
    base: EvalReport,
    dpo: EvalReport,
    adpo: EvalReport,
    multi: EvalReport,
    adpo_run: FinetuneOutcome,
    dpo_run: FinetuneOutcome,
    n_train: usize,
    took: Duration,
}

fn finetune(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<FinetuneOutcome, String> {
    let base = &bundle.base.policy;
    trainer::finetune(&base.clone_trainable(), &base.clone_frozen(), &bundle.train, cfg).map_err(|e| e.to_string())
}

/// `dataset_time` counts toward the runtime budget along with the fine-tunes.
fn direction_runs(bundle: &DatasetBundle, cfg: &ExperimentConfig, dataset_time: Duration) -> Result<Runs, String> {
    let started = Instant::now();
    let with = |direction: Direction, lambda: f64| {
        let mut c = cfg.train_config();
        c.loss.objective = Objective::Dpo;
        c.loss.direction = direction;
        c.loss.lambda_multi = lambda;
        c
    };
    let eval = |p: &LmPolicy| evalkit::evaluate(p, &bundle.eval).map_err(|e| e.to_string());
    let dpo_run = finetune(bundle, &with(Direction::Standard, 0.5))?;
    let adpo_run = finetune(bundle, &with(Direction::Abductive, 0.5))?;
    let multi_run = finetune(bundle, &with(Direction::Multitask, 0.5))?;
    Ok(Runs {
        base: eval(&bundle.base.policy)?,
        dpo: eval(&dpo_run.policy)?,
        adpo: eval(&adpo_run.policy)?,
        multi: eval(&multi_run.policy)?,
        adpo_run,
        dpo_run,
        n_train: bundle.train.len(),
        took: started.elapsed() + dataset_time,
    })
}

fn direction_of_improvement(r: &Runs) -> Outcome {
    let pts = |v: f64| 100.0 * v;
    let std_gain = r.dpo.accuracy - r.base.accuracy;
    let abd_drift = r.dpo.abductive_accuracy - r.base.abductive_accuracy;
    let abd_gain = r.adpo.abductive_accuracy - r.base.abductive_accuracy;
    let best_std = r.dpo.accuracy.max(r.adpo.accuracy);
    let best_abd = r.dpo.abductive_accuracy.max(r.adpo.abductive_accuracy);
    let a = std_gain >= STD_GAIN && abd_drift.abs() < ABD_DRIFT;
    let b = abd_gain >= ABD_GAIN;
    let c = best_std - r.multi.accuracy <= MULTI_SLACK && best_abd - r.multi.abductive_accuracy <= MULTI_SLACK;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    check(
        a && b && c && r.took < DIRECTION_BUDGET,
        format!(
            "acc/abd base {:.1}/{:.1}, DPO {:.1}/{:.1}, A-DPO {:.1}/{:.1}, Multi {:.1}/{:.1}; \
             (a) +{:.1} std, {:+.1} abd {}; (b) +{:.1} abd {}; (c) {}; {:.0?} on {} train / {} eval",
            pts(r.base.accuracy),
            pts(r.base.abductive_accuracy),
            pts(r.dpo.accuracy),
            pts(r.dpo.abductive_accuracy),
            pts(r.adpo.accuracy),
            pts(r.adpo.abductive_accuracy),
            pts(r.multi.accuracy),
            pts(r.multi.abductive_accuracy),
            pts(std_gain),
            pts(abd_drift),
            mark(a),
            pts(abd_gain),
            mark(b),
            mark(c),
            r.took,
            r.n_train,
            r.base.n_items,
        ),
    )
}

fn squeezing(r: &Runs) -> Outcome {
    let means = r.adpo_run.dynamics.epoch_means();
    let (first, last) = (means.first().ok_or("no epochs")?, means.last().ok_or("no epochs")?);
    let identical = r
        .adpo_run
        .dynamics
        .rows
        .iter()
        .all(|row| row.logp_rejected_std.to_bits() == row.logp_rejected_abd.to_bits());
    check(
        last.logp_chosen_abd < first.logp_chosen_abd && last.logp_rejected_abd < first.logp_rejected_abd && identical,
        format!(
            "chosen_abd {:.3} -> {:.3}, rejected_abd {:.3} -> {:.3} (epoch 1 -> {}); (x,y_l) and (x_l,y) traces identical: {identical}",
            first.logp_chosen_abd,
            last.logp_chosen_abd,
            first.logp_rejected_abd,
            last.logp_rejected_abd,
            means.len()
        ),
    )
}

fn delta_asymmetry(bundle: &DatasetBundle, cfg: &ExperimentConfig) -> Outcome {
    let (small, large) = (0.1, 1.0);
    let splits = pipeline::margin_splits(cfg, &bundle.scored, &[small, large]).map_err(|e| e.to_string())?;
    let mut tc = cfg.train_config();
    tc.loss.direction = Direction::Abductive;
    let rows = evalkit::run_delta_ablation(&bundle.base.policy, &splits, &tc).map_err(|e| e.to_string())?;
    let at = |train: f64, eval: f64, epoch: usize| {
        rows.iter()
            .find(|r| r.delta_train == train && r.delta_eval == eval && r.epoch == epoch)
            .map(|r| r.abductive_accuracy)
    };
    let mut cells = Vec::new();
    let mut ok = true;
    for epoch in 2..=tc.epochs {
        let (up, down) = (at(small, large, epoch), at(large, small, epoch));
        let (Some(up), Some(down)) = (up, down) else {
            return Err(format!("missing rows for epoch {epoch}"));
        };
        ok &= up > down;
        cells.push(format!("e{epoch} {:.2}>{:.2}", up, down));
    }
    check(
        ok,
        format!(
            "train {small} on eval {large} vs train {large} on eval {small}: {} ({} / {} train items)",
            cells.join(", "),
            splits[0].train.len(),
            splits[1].train.len()
        ),
    )
}

fn lambda_one_consistency(bundle: &DatasetBundle, cfg: &ExperimentConfig, dpo: &FinetuneOutcome) -> Outcome {
    let mut tc = cfg.train_config();
    tc.loss.objective = Objective::Dpo;
    tc.loss.direction = Direction::Multitask;
    tc.loss.lambda_multi = 1.0;
    let multi = finetune(bundle, &tc)?;
    let same_params = multi.policy.fingerprint() == dpo.policy.fingerprint();
    let same_log = multi.dynamics == dpo.dynamics;
    check(
        same_params && same_log,
        format!(
            "parameters identical: {same_params}, dynamics identical: {same_log} over {} steps",
            dpo.dynamics.rows.len()
        ),
    )
}

fn reproducibility() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_abdpref");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/small.toml");
    let cfg = cfg.to_str().unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<serde_json::Value, String> {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .env("RUST_LOG", "warn")
            .env_remove(cli::OUT_ROOT_ENV)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
    };
    run(&["gen-data", "--config", cfg, "--out", "data"])?;
    run(&["train", "--config", cfg, "--data", "data", "--out", "train", "--direction", "multitask"])?;
    run(&["ablate", "--kind", "delta", "--config", cfg, "--data", "data", "--out", "delta"])?;
    let mut files = 0;
    for m in ["data", "train", "delta"] {
        let report = run(&["replay", "--manifest", &format!("{m}/manifest.json")])?;
        if report["matches"] != true {
            return Err(format!("{m}: replay differs: {report}"));
        }
        files += report["files"].as_array().map_or(0, Vec::len);
    }
    Ok(format!("gen-data, train and ablate replayed from manifests; {files} output hashes identical"))
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
        Err(d) => println!("FAIL criterion {n} ({name}): {d}"),
    }
    outcome.is_ok()
}

fn main() {
    // `cargo test` passes harness flags like `--quiet`; listing requests get nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    all &= report(1, "abductive form equals swapped-psi form", &swap_equivalence());
    all &= report(2, "gradient correctness", &gradient_correctness());

    let cfg = ExperimentConfig::default();
    let started = Instant::now();
    let bundle = match pipeline::build_dataset(&cfg) {
        Ok(b) => b,
        Err(e) => {
            for (n, name) in [(3, "loss boundaries"), (4, "direction of improvement"), (5, "squeezing"), (6, "delta asymmetry"), (7, "lambda=1 consistency")] {
                report(n, name, &Err(format!("dataset build failed: {e}")));
            }
            std::process::exit(1);
        }
    };
    let dataset_time = started.elapsed();

    let sample = &bundle.train[..bundle.train.len().min(16)];
    all &= report(3, "loss boundaries", &loss_boundaries(sample, &bundle.base.policy));
    match direction_runs(&bundle, &cfg, dataset_time) {
        Ok(runs) => {
            all &= report(4, "direction of improvement", &direction_of_improvement(&runs));
            all &= report(5, "squeezing", &squeezing(&runs));
            all &= report(6, "delta asymmetry", &delta_asymmetry(&bundle, &cfg));
            all &= report(7, "lambda=1 consistency", &lambda_one_consistency(&bundle, &cfg, &runs.dpo_run));
        }
        Err(e) => {
            for (n, name) in [(4, "direction of improvement"), (5, "squeezing"), (6, "delta asymmetry"), (7, "lambda=1 consistency")] {
                all &= report(n, name, &Err(e.clone()));
            }
        }
    }
    all &= report(8, "reproducibility", &reproducibility());
    if !all {
        std::process::exit(1);
    }
}
