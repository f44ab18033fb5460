use std::sync::OnceLock;

use abdpref::datagen::{self, AbductiveRecord, GenConfig};
use abdpref::evalkit::{self, EnumeratedWorld, WorldTriple};
use abdpref::gradcheck::{micro_config, scrambled_policy};
use abdpref::lm::{LmConfig, LmPolicy, TokenSequence};
use abdpref::losses::{dpo_term, dpop_term};
use abdpref::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec()).unwrap()
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

/// `-ln σ(t)` written as `ln(1 + e^{-t})`, split by sign so neither branch overflows.
fn neg_log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

fn tokens(vocab: u32, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..vocab, len)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn log_softmax_rows_exponentiate_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -scale..scale)).collect();
        let g = Graph::new();
        let out = g.leaf(Tensor::matrix(rows, cols, data).unwrap()).log_softmax(1).unwrap().value();
        for r in out.data().chunks(cols) {
            let total: f64 = r.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "row sums to {total}");
        }
    }

    #[test]
    fn dpo_term_matches_closed_form_and_is_nonnegative(
        psi_w in -50.0f64..50.0,
        psi_l in -50.0f64..50.0,
        beta in 0.01f64..2.0,
    ) {
        let v = dpo_term(psi_w, psi_l, beta);
        prop_assert!(v >= 0.0);
        let oracle = neg_log_sigmoid(beta * (psi_w - psi_l));
        prop_assert!((v - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn dpo_term_strictly_decreases_in_the_gap(
        psi_l in -5.0f64..5.0,
        gap in -10.0f64..10.0,
        step in 0.01f64..5.0,
    ) {
        let beta = 0.5;
        prop_assert!(dpo_term(psi_l + gap + step, psi_l, beta) < dpo_term(psi_l + gap, psi_l, beta));
    }

    #[test]
    fn dpo_term_depends_only_on_the_gap(
        psi_w in -20.0f64..20.0,
        psi_l in -20.0f64..20.0,
        shift in -20.0f64..20.0,
    ) {
        let a = dpo_term(psi_w, psi_l, 0.1);
        let b = dpo_term(psi_w + shift, psi_l + shift, 0.1);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn dpop_reduces_to_dpo_without_penalty(
        psi_w in -20.0f64..20.0,
        psi_l in -20.0f64..20.0,
        drop in -5.0f64..5.0,
        lambda in 0.0f64..3.0,
    ) {
        let dpo = dpo_term(psi_w, psi_l, 0.1);
        prop_assert_eq!(dpop_term(psi_w, psi_l, drop, 0.1, 0.0).to_bits(), dpo.to_bits());
        let with_penalty = dpop_term(psi_w, psi_l, drop, 0.1, lambda);
        if drop <= 0.0 {
            prop_assert_eq!(with_penalty.to_bits(), dpo.to_bits());
        } else {
            prop_assert!(with_penalty >= dpo);
        }
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn next_token_distributions_sum_to_one(seed in any::<u64>(), ids in tokens(5, 1..8)) {
        let policy = scrambled_policy(micro_config(seed), seed, 0.8);
        for row in policy.next_token_logprobs(&seq(&ids)).unwrap() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_prob_sum_is_the_chain_rule(seed in any::<u64>(), x in tokens(5, 1..4), y in tokens(5, 1..4)) {
        let policy = scrambled_policy(micro_config(seed), seed, 0.8);
        let (xs, ys) = (seq(&x), seq(&y));
        let rows = policy.next_token_logprobs(&xs.concat(&ys)).unwrap();
        let oracle: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &t)| rows[x.len() - 1 + i][t as usize])
            .sum();
        let total = policy.log_prob_sum(&xs, &ys).unwrap();
        prop_assert!((total - oracle).abs() <= 1e-12);
        let avg = policy.avg_log_lik(&xs, &ys).unwrap();
        prop_assert!((avg - oracle / y.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn later_tokens_never_change_earlier_distributions(
        seed in any::<u64>(),
        ids in tokens(5, 2..8),
        pos in 1usize..8,
        replacement in 0u32..5,
    ) {
        let policy = scrambled_policy(micro_config(seed), seed, 0.8);
        let t = pos % ids.len();
        let mut changed = ids.clone();
        changed[t] = replacement;
        let before = policy.next_token_logprobs(&seq(&ids)).unwrap();
        let after = policy.next_token_logprobs(&seq(&changed)).unwrap();
        for i in 0..t {
            prop_assert_eq!(&before[i], &after[i]);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>(), x in tokens(5, 1..4), y in tokens(5, 1..4)) {
        let policy = scrambled_policy(micro_config(seed), seed, 0.8);
        let grads = || {
            let g = Graph::new();
            let bound = policy.bind(&g);
            let root = bound.log_prob_sum(&seq(&x), &seq(&y)).unwrap();
            g.backward(root).unwrap();
            bound.param_grads()
        };
        let (a, b) = (grads(), grads());
        for (ga, gb) in a.iter().zip(&b) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ga), bits(gb));
        }
    }

    #[test]
    fn greedy_decoding_is_bounded_and_repeatable(seed in any::<u64>(), x in tokens(5, 1..4), max_len in 1usize..5) {
        let policy = scrambled_policy(micro_config(seed), seed, 0.8);
        let out = policy.sample_greedy(&seq(&x), max_len).unwrap();
        prop_assert!(out.len() <= max_len);
        prop_assert_eq!(out, policy.sample_greedy(&seq(&x), max_len).unwrap());
    }
}

struct Fixture {
    records: Vec<AbductiveRecord>,
    model: LmConfig,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = GenConfig {
            num_templates: 6,
            num_entities: 6,
            num_candidates: 60,
            pretrain_size: 10,
            validator_size: 10,
            ..GenConfig::default()
        };
        let grammar = cfg.grammar().unwrap();
        let corpus = datagen::synthesize_corpus(&cfg).unwrap();
        let model = LmConfig {
            vocab_size: grammar.vocab_size(),
            context_len: grammar.max_sequence_len(),
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            seed: 0,
            end_token: Some(datagen::EOS),
        };
        Fixture {
            records: corpus.candidates,
            model,
        }
    })
}

fn grammar_policy(seed: u64) -> LmPolicy {
    let f = fixture();
    scrambled_policy(LmConfig { seed, ..f.model.clone() }, seed, 1.0)
}

fn with_margins(margins: &[f64]) -> Vec<AbductiveRecord> {
    fixture()
        .records
        .iter()
        .zip(margins)
        .map(|(r, &m)| AbductiveRecord { margin: m, ..r.clone() })
        .collect()
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn larger_delta_keeps_a_subset(
        margins in prop::collection::vec(-2.0f64..3.0, 60),
        lo in 0.0f64..1.0,
        extra in 0.0f64..2.0,
    ) {
        let records = with_margins(&margins);
        let loose = datagen::filter_by_margin(&records, lo).unwrap();
        let strict = datagen::filter_by_margin(&records, lo + extra).unwrap();
        prop_assert!(strict.iter().all(|r| loose.contains(r)));
        prop_assert!(strict.iter().all(|r| r.margin >= lo + extra));
        let expected = records.iter().filter(|r| r.margin >= lo).count();
        prop_assert_eq!(loose.len(), expected);
    }

    #[test]
    fn split_partitions_and_is_stable_under_filtering(
        seed in any::<u64>(),
        ratio in 0.05f64..0.95,
        keep in prop::collection::vec(any::<bool>(), 60),
    ) {
        let records = &fixture().records;
        let (train, eval) = datagen::split_records(records, ratio, seed).unwrap();
        prop_assert_eq!(train.len() + eval.len(), records.len());
        prop_assert!(train.iter().all(|r| !eval.iter().any(|e| e.id == r.id)));
        let subset: Vec<_> = records.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r.clone()).collect();
        let (sub_train, sub_eval) = datagen::split_records(&subset, ratio, seed).unwrap();
        prop_assert!(sub_train.iter().all(|r| train.contains(r)));
        prop_assert!(sub_eval.iter().all(|r| eval.contains(r)));
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn accuracies_ignore_record_order(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let policy = grammar_policy(seed);
        let records = &fixture().records;
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = evalkit::evaluate(&policy, records).unwrap();
        let b = evalkit::evaluate(&policy, &shuffled).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.abductive_accuracy, b.abductive_accuracy);
    }

    #[test]
    fn abductive_accuracy_is_the_same_under_summed_likelihood(seed in any::<u64>()) {
        let policy = grammar_policy(seed);
        let records = &fixture().records;
        let report = evalkit::evaluate(&policy, records).unwrap();
        let summed = records
            .iter()
            .filter(|r| {
                let m = policy.log_prob_sum(&r.modified_prompt, &r.hallucinated_answer).unwrap();
                let o = policy.log_prob_sum(&r.original_prompt, &r.hallucinated_answer).unwrap();
                m > o
            })
            .count() as f64
            / records.len() as f64;
        prop_assert_eq!(report.abductive_accuracy, summed);
        let from_items = report.per_item.iter().filter(|i| i.std_correct).count() as f64 / report.n_items as f64;
        prop_assert_eq!(report.accuracy, from_items);
    }
}

/// Micro world: up to 8 prompts over a 5-token vocabulary, responses over a
/// 4-token alphabet up to length `max_len`.
fn micro_world(prompt_ids: &[Vec<u32>], prior: Option<Vec<f64>>, max_len: usize) -> EnumeratedWorld {
    let prompts: Vec<_> = prompt_ids.iter().map(|p| seq(p)).collect();
    let alphabet = [0, 1, 2, 3];
    match prior {
        Some(p) => EnumeratedWorld::with_prior(prompts, p, &alphabet, max_len).unwrap(),
        None => EnumeratedWorld::new(prompts, &alphabet, max_len).unwrap(),
    }
}

fn distinct_prompts() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::btree_set(tokens(5, 1..3), 2..=8).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(cases(20))]

    #[test]
    fn abductive_form_equals_swapped_psi_form(
        seed in any::<u64>(),
        prompts in distinct_prompts(),
        triple_seeds in prop::collection::vec((any::<usize>(), any::<usize>(), any::<usize>()), 10),
    ) {
        let policy = scrambled_policy(micro_config(seed), seed, 1.0);
        let reference = scrambled_policy(micro_config(seed ^ 1), seed ^ 1, 1.0).clone_frozen();
        let world = micro_world(&prompts, None, 2);
        let (nx, ny) = (world.prompts().len(), world.responses().len());
        let triples: Vec<_> = triple_seeds
            .iter()
            .map(|&(a, b, c)| WorldTriple { chosen_prompt: a % nx, rejected_prompt: b % nx, response: c % ny })
            .collect();
        let gap = evalkit::verify_swap_equivalence(&policy, &reference, &world, 0.1, &triples).unwrap();
        prop_assert!(gap <= 1e-9, "gap {gap}");
    }

    #[test]
    fn mismatched_priors_break_the_equivalence(seed in any::<u64>(), tilt in 0.2f64..0.8) {
        let prompts = vec![vec![0], vec![1], vec![2, 3]];
        let policy = scrambled_policy(micro_config(seed), seed, 1.0);
        let reference = scrambled_policy(micro_config(seed ^ 1), seed ^ 1, 1.0).clone_frozen();
        let uniform = micro_world(&prompts, None, 1);
        let skewed = micro_world(&prompts, Some(vec![tilt, (1.0 - tilt) / 2.0, (1.0 - tilt) / 2.0]), 1);
        let triples = [WorldTriple { chosen_prompt: 0, rejected_prompt: 1, response: 0 }];
        let gap = evalkit::verify_swap_equivalence_with_priors(&policy, &reference, &skewed, &uniform, 1.0, &triples).unwrap();
        // log-prior ratio between the two prompts moves by ln(2·tilt/(1−tilt)), at least 0.22 here.
        let expected = ((2.0 * tilt) / (1.0 - tilt)).ln().abs();
        prop_assert!((gap - expected).abs() <= 1e-9, "gap {gap}, expected {expected}");
    }

    #[test]
    fn posterior_table_matches_double_loop_bayes(seed in any::<u64>()) {
        let prompts = [vec![4], vec![3, 4]];
        let policy = scrambled_policy(micro_config(seed), seed, 1.0);
        let world = EnumeratedWorld::new(prompts.iter().map(|p| seq(p)).collect(), &[0, 1, 2], 2).unwrap();
        let table = evalkit::abductive_policy_oracle(&policy, &world).unwrap();
        prop_assert_eq!(world.responses().len(), 3 + 9);
        for (yi, y) in world.responses().iter().enumerate() {
            let mut joint = Vec::new();
            for x in world.prompts() {
                let mut p = 0.5;
                let rows = policy.next_token_logprobs(&x.concat(y)).unwrap();
                for (i, &t) in y.ids().iter().enumerate() {
                    p *= rows[x.len() - 1 + i][t as usize].exp();
                }
                joint.push(p);
            }
            let q: f64 = joint.iter().sum();
            let mut col_total = 0.0;
            for (xi, j) in joint.iter().enumerate() {
                let post = table.posterior(yi, xi);
                col_total += post;
                prop_assert!((post - j / q).abs() <= 1e-12);
            }
            prop_assert!((col_total - 1.0).abs() <= 1e-12);
        }
    }
}
