use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{variant_loss, VariantConfig};
use super::policy::{exact_kl, ToyPolicy};
use super::{Algorithm, RewardSpec, RlftError, RolloutBatch};
use crate::metrics::function_f1;
use crate::script::FunctionCallSet;

/// Sequence spaces up to this size are evaluated exactly.
const EXACT_LIMIT: u128 = 10_000;
const MONTE_CARLO_SAMPLES: usize = 4096;

/// One query of the toy task: the reference (SFT-analog) policy over the
/// retrieved call pool, and the ground-truth call set.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub reference_policy: ToyPolicy,
    pub reference_calls: FunctionCallSet,
}

impl ToyInstance {
    pub fn uniform<S: AsRef<str>>(pool: &[S], reference: &[S], max_length: usize) -> Self {
        Self {
            reference_policy: ToyPolicy::uniform(pool, max_length),
            reference_calls: reference.iter().map(|s| s.as_ref()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub instances: Vec<ToyInstance>,
}

impl ToyTask {
    pub fn new(instances: Vec<ToyInstance>) -> Self {
        Self { instances }
    }

    /// Pool {A, B, C, D}, two positions, reference {A, B}, uniform start.
    pub fn two_position() -> Self {
        Self::new(vec![ToyInstance::uniform(&["A", "B", "C", "D"], &["A", "B"], 2)])
    }

    /// Pool {A, …, F}, three positions, reference {A, B, C}, uniform start.
    /// Partial and repetitive sequences earn positive reward, so an
    /// unregularized policy at a high learning rate can lock into them.
    pub fn three_position() -> Self {
        Self::new(vec![ToyInstance::uniform(
            &["A", "B", "C", "D", "E", "F"],
            &["A", "B", "C"],
            3,
        )])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainToyConfig {
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta: f64,
    pub variant: VariantConfig,
}

impl Default for TrainToyConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            learning_rate: 0.05,
            beta: 0.1,
            variant: VariantConfig::default(),
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Expected FF1 of the updated policies, averaged over instances.
    pub expected_reward: f64,
    pub grad_norm: f64,
    /// KL(π_θ ‖ π_ref) of the updated policies, averaged over instances.
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub curve: Vec<CurvePoint>,
    /// Final policy per instance.
    pub policies: Vec<ToyPolicy>,
    pub skipped_pairs: usize,
    pub degenerate_groups: usize,
}

impl ToyRun {
    pub fn final_expected_reward(&self) -> Option<f64> {
        self.curve.last().map(|p| p.expected_reward)
    }
}

fn monte_carlo_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed)
}

/// E_{ŷ∼π}[FF1(ŷ, R)], by enumeration when the sequence space has at most
/// 10⁴ members and by a fixed-seed Monte Carlo estimate otherwise.
pub fn expected_ff1(policy: &ToyPolicy, reference: &FunctionCallSet) -> f64 {
    if policy.sequence_space_size() <= EXACT_LIMIT {
        policy
            .enumerate()
            .into_iter()
            .map(|(seq, p)| p * function_f1(&policy.calls(&seq), reference))
            .sum()
    } else {
        let mut rng = monte_carlo_rng();
        (0..MONTE_CARLO_SAMPLES)
            .map(|_| function_f1(&policy.calls(&policy.sample(&mut rng)), reference))
            .sum::<f64>()
            / MONTE_CARLO_SAMPLES as f64
    }
}

fn kl_to_reference(policy: &ToyPolicy, reference: &ToyPolicy) -> f64 {
    if policy.sequence_space_size() <= EXACT_LIMIT {
        exact_kl(policy, reference)
    } else {
        let mut rng = monte_carlo_rng();
        (0..MONTE_CARLO_SAMPLES)
            .map(|_| {
                let s = policy.sample(&mut rng);
                policy.log_prob(&s) - reference.log_prob(&s)
            })
            .sum::<f64>()
            / MONTE_CARLO_SAMPLES as f64
    }
}

/// Sample → reward → update for `config.steps` steps at a fixed learning
/// rate, starting every instance from its reference policy. Deterministic
/// for a given seed.
pub fn train_toy(task: &ToyTask, algorithm: Algorithm, config: &TrainToyConfig) -> Result<ToyRun, RlftError> {
    if task.instances.is_empty() {
        return Err(RlftError::EmptyTask);
    }
    let specs: Vec<RewardSpec> = task
        .instances
        .iter()
        .map(|inst| RewardSpec {
            reference_calls: inst.reference_calls.clone(),
            beta: config.beta,
            reference_policy: inst.reference_policy.clone(),
        })
        .collect();
    let mut policies: Vec<ToyPolicy> = task.instances.iter().map(|i| i.reference_policy.clone()).collect();
    for (spec, policy) in specs.iter().zip(&policies) {
        spec.validate_for(policy)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut expected: Vec<f64> = policies
        .iter()
        .zip(&specs)
        .map(|(p, s)| expected_ff1(p, &s.reference_calls))
        .collect();
    let mut kls = vec![0.0; policies.len()];
    let mut run = ToyRun {
        curve: Vec::with_capacity(config.steps),
        policies: Vec::new(),
        skipped_pairs: 0,
        degenerate_groups: 0,
    };

    for step in 1..=config.steps {
        let i = if policies.len() == 1 {
            0
        } else {
            rng.random_range(0..policies.len())
        };
        let batch = RolloutBatch::sample(algorithm, &policies[i], &specs[i], &mut rng);
        let out = variant_loss(algorithm, &policies[i], &batch, &specs[i], &config.variant)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(RlftError::NonFiniteLoss { step });
        }
        run.skipped_pairs += usize::from(out.skipped);
        run.degenerate_groups += usize::from(out.degenerate);
        policies[i].step(&out.grad, config.learning_rate);

        expected[i] = expected_ff1(&policies[i], &specs[i].reference_calls);
        kls[i] = kl_to_reference(&policies[i], &specs[i].reference_policy);
        let n = policies.len() as f64;
        run.curve.push(CurvePoint {
            step,
            expected_reward: expected.iter().sum::<f64>() / n,
            grad_norm: out.grad_norm(),
            kl: kls.iter().sum::<f64>() / n,
        });
    }
    run.policies = policies;
    Ok(run)
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<(), RlftError> {
    let mut out = BufWriter::new(File::create(path)?);
    for point in curve {
        serde_json::to_writer(&mut out, point).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>, RlftError> {
    let reader = BufReader::new(File::open(path)?);
    let mut curve = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        curve.push(serde_json::from_str(&line).map_err(|e| RlftError::MalformedCurve {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(curve)
}
