use cbr_core::evaluation::{generate_corpus, SyntheticCorpusSpec};
use cbr_core::function_f1;
use cbr_core::retrieval::Embedder;
use cbr_core::reuse::{assemble_prompt, GenerationRequest, RetrievedCase};
use cbr_core::rlft::*;
use cbr_core::FunctionCallSet;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(rng: &mut ChaCha8Rng, functions: &[&str], max_length: usize, scale: f64) -> ToyPolicy {
    let base = ToyPolicy::uniform(functions, max_length);
    let logits = (0..base.parameter_count()).map(|_| rng.random_range(-scale..scale)).collect();
    base.with_logits(logits)
}

fn spec_for(policy: &ToyPolicy, reference: &[&str], beta: f64, rng: &mut ChaCha8Rng) -> RewardSpec {
    RewardSpec {
        reference_calls: reference.iter().copied().collect(),
        beta,
        reference_policy: random_policy(rng, &policy.vocabulary()[..policy.vocab_size() - 1].iter().map(String::as_str).collect::<Vec<_>>(), policy.max_length(), 1.0),
    }
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn finite_difference(policy: &ToyPolicy, loss: impl Fn(&ToyPolicy) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..policy.parameter_count())
        .map(|i| {
            let mut plus = policy.logits().to_vec();
            plus[i] += h;
            let mut minus = policy.logits().to_vec();
            minus[i] -= h;
            (loss(&policy.with_logits(plus)) - loss(&policy.with_logits(minus))) / (2.0 * h)
        })
        .collect()
}

const POOL: &[&str] = &["A", "B", "C", "D"];

#[test]
fn reinforce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 20 {
        let policy = random_policy(&mut rng, POOL, 3, 2.0);
        let spec = spec_for(&policy, &["A", "B"], 0.1, &mut rng);
        let batch = RolloutBatch::sample(Algorithm::Reinforce, &policy, &spec, &mut rng);
        let out = reinforce_loss(&policy, &batch).unwrap();
        if out.loss == 0.0 {
            continue;
        }
        let numeric = finite_difference(&policy, |p| reinforce_loss(p, &batch).unwrap().loss);
        let err = max_relative_error(&out.grad, &numeric);
        assert!(err < 1e-4, "relative error {err}");
        checked += 1;
    }
}

#[test]
fn every_variant_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = VariantConfig::default();
    for algorithm in Algorithm::ALL {
        let mut checked = 0;
        while checked < 10 {
            let old = random_policy(&mut rng, POOL, 3, 1.5);
            let spec = spec_for(&old, &["A", "B", "C"], 0.1, &mut rng);
            let batch = RolloutBatch::sample(algorithm, &old, &spec, &mut rng);
            // evaluate away from π_old so ratios and clipping are exercised
            let current = old.with_logits(old.logits().iter().map(|l| l + rng.random_range(-0.3..0.3)).collect());
            let out = variant_loss(algorithm, &current, &batch, &spec, &config).unwrap();
            if out.skipped || out.grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            let numeric =
                finite_difference(&current, |p| variant_loss(algorithm, p, &batch, &spec, &config).unwrap().loss);
            let err = max_relative_error(&out.grad, &numeric);
            assert!(err < 1e-4, "{algorithm}: relative error {err}");
            checked += 1;
        }
    }
}

fn rational_ff1(g: &FunctionCallSet, r: &FunctionCallSet) -> BigRational {
    let total = g.len() + r.len();
    if total == 0 {
        return BigRational::from_integer(BigInt::from(1));
    }
    BigRational::new(BigInt::from(2 * g.intersection_len(r)), BigInt::from(total))
}

#[test]
fn rloo_advantages_sum_to_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference: FunctionCallSet = ["A", "B"].into_iter().collect();
    let policy = ToyPolicy::uniform(POOL, 3);
    for _ in 0..500 {
        let rewards: Vec<BigRational> = (0..4)
            .map(|_| rational_ff1(&policy.calls(&policy.sample(&mut rng)), &reference))
            .collect();
        let advantages = rloo_advantages(&rewards);
        let sum = advantages.iter().fold(BigRational::zero(), |acc, a| acc + a);
        assert!(sum.is_zero());
    }
    let hand: Vec<f64> = rloo_advantages(&[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(hand[0], 1.0);
    assert!(hand[1..].iter().all(|a| (a + 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn grpo_advantages_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut nondegenerate = 0;
    for _ in 0..500 {
        let rewards: Vec<f64> = (0..4).map(|_| rng.random_range(0..4) as f64 / 3.0).collect();
        let a = grpo_advantages(&rewards);
        if a.degenerate {
            assert!(a.values.iter().all(|v| *v == 0.0));
            continue;
        }
        nondegenerate += 1;
        let mean = a.values.iter().sum::<f64>() / 4.0;
        let std = (a.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12, "{rewards:?}");
    }
    assert!(nondegenerate > 300);
    assert_eq!(grpo_advantages(&[1.0, 0.0]).values, vec![1.0, -1.0]);
}

/// Σ_y π(y) · g(y) over every sequence of a one-position policy.
fn exact_expectation(policy: &ToyPolicy, grad_of: impl Fn(&[usize]) -> Vec<f64>) -> Vec<f64> {
    let mut total = vec![0.0; policy.parameter_count()];
    for (seq, p) in policy.enumerate() {
        for (t, g) in total.iter_mut().zip(grad_of(&seq)) {
            *t += p * g;
        }
    }
    total
}

#[test]
fn remax_expected_gradient_equals_reinforce() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let policy = random_policy(&mut rng, &["A"], 1, 3.0);
        assert_eq!(policy.vocab_size(), 2);
        let spec = spec_for(&policy, &["A"], rng.random_range(0.0..0.5), &mut rng);
        let greedy = policy.greedy();
        let remax = exact_expectation(&policy, |seq| {
            let batch = RolloutBatch::from_sequences(&policy, &spec, vec![seq.to_vec(), greedy.clone()]);
            remax_loss(&policy, &batch).unwrap().grad
        });
        let reinforce = exact_expectation(&policy, |seq| {
            let batch = RolloutBatch::from_sequences(&policy, &spec, vec![seq.to_vec()]);
            reinforce_loss(&policy, &batch).unwrap().grad
        });
        for (a, b) in remax.iter().zip(&reinforce) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn kl_estimator_is_exactly_zero_for_identical_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let policy = random_policy(&mut rng, POOL, 3, 2.0);
    let spec = RewardSpec {
        reference_calls: ["A"].into_iter().collect(),
        beta: 0.3,
        reference_policy: policy.clone(),
    };
    for _ in 0..100 {
        let r = Rollout::new(&policy, &spec, policy.sample(&mut rng));
        assert_eq!(kl_estimate(r.logprob(), r.ref_logprob()), 0.0);
        assert_eq!(r.reward, r.ff1);
    }
    assert_eq!(exact_kl(&policy, &policy), 0.0);
}

#[test]
fn reward_has_set_semantics_at_zero_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let policy = ToyPolicy::uniform(POOL, 6);
    let spec = spec_for(&policy, &["A", "C"], 0.0, &mut rng);
    for _ in 0..200 {
        let seq = policy.sample(&mut rng);
        let mut names: Vec<&str> = policy.tokens(&seq).filter(|t| *t != END_TOKEN).collect();
        let r = reward(&names, &spec, -1.0, -2.0);
        names.reverse();
        let dup: Vec<&str> = names.iter().chain(names.iter()).copied().collect();
        assert_eq!(reward(&names, &spec, 0.0, 0.0), r);
        assert_eq!(reward(&dup, &spec, 3.0, 1.0), r);
    }
}

#[test]
fn repeated_single_call_is_dominated() {
    let vocab = ["A", "B", "C", "D", "E"];
    for mask in 0u32..(1 << vocab.len()) {
        let reference: FunctionCallSet = vocab.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, v)| *v).collect();
        if reference.len() < 2 {
            continue;
        }
        let bound = 2.0 / (1.0 + reference.len() as f64);
        for token in vocab {
            for max_length in 1..6 {
                let calls: FunctionCallSet = std::iter::repeat_n(token, max_length).collect();
                let f = function_f1(&calls, &reference);
                assert!(f <= bound && bound < 1.0);
            }
        }
    }
}

#[test]
fn reinforce_solves_two_position_task_with_bounded_gradients() {
    let task = ToyTask::two_position();
    let config = TrainToyConfig {
        beta: 0.0,
        ..TrainToyConfig::default()
    };
    let run = train_toy(&task, Algorithm::Reinforce, &config).unwrap();
    assert_eq!(run.curve.len(), 2000);
    assert!(run.final_expected_reward().unwrap() >= 0.9);
    let mut norms: Vec<f64> = run.curve.iter().map(|p| p.grad_norm).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    norms.sort_by(f64::total_cmp);
    assert!(max / norms[norms.len() / 2] < 20.0);

    // the reported expectation is the exact enumeration
    let reference: FunctionCallSet = ["A", "B"].into_iter().collect();
    let exact: f64 = run.policies[0]
        .enumerate()
        .into_iter()
        .map(|(s, p)| p * function_f1(&run.policies[0].calls(&s), &reference))
        .sum();
    assert_eq!(exact, run.final_expected_reward().unwrap());
}

#[test]
fn every_algorithm_improves_the_two_position_task() {
    let task = ToyTask::two_position();
    let start = expected_ff1(&task.instances[0].reference_policy, &task.instances[0].reference_calls);
    for algorithm in Algorithm::ALL {
        let config = TrainToyConfig {
            steps: 1000,
            learning_rate: 0.2,
            ..TrainToyConfig::default()
        };
        let run = train_toy(&task, algorithm, &config).unwrap();
        assert!(run.final_expected_reward().unwrap() > start, "{algorithm}");
    }
}

#[test]
fn sft_export_never_retrieves_the_query() {
    let spec = SyntheticCorpusSpec {
        modules: 4,
        cases_per_module: 25,
        test_fraction: 0.0,
        ..SyntheticCorpusSpec::default()
    };
    let bank = generate_corpus(&spec).unwrap().bank().unwrap();
    let embedder = Embedder::stub(32, 0);
    let records = export_sft_dataset(&bank, &embedder, 3).unwrap();
    assert_eq!(records.len(), 100);
    for r in &records {
        assert_eq!(r.retrieved_ids.len(), 3);
        assert!(!r.retrieved_ids.contains(&r.query_id));
        let query = bank.get(&r.query_id).unwrap();
        assert_eq!(r.completion, query.script);
    }
    // prompts are exactly what the reuse engine would assemble
    let first = &records[0];
    let query = bank.get(&first.query_id).unwrap();
    let retrieved: Vec<RetrievedCase> = first
        .retrieved_ids
        .iter()
        .map(|id| {
            let case = bank.get(id).unwrap().clone();
            let similarity = cbr_core::retrieval::cosine_similarity(
                &embedder.embed(&query.intent).unwrap(),
                &embedder.embed(&case.intent).unwrap(),
            )
            .unwrap();
            RetrievedCase { case, similarity }
        })
        .collect();
    assert_eq!(first.prompt, assemble_prompt(&GenerationRequest::new(query.intent.clone(), retrieved)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.jsonl");
    write_sft_dataset(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 100);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["prompt", "completion", "query_id", "retrieved_ids"] {
        assert!(v.get(key).is_some());
    }
}
