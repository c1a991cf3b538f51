//! Policy-gradient finetuning of the reuse step on an enumerable toy policy.
//!
//! The golden reward is function F1 against the reference call set minus a
//! β-weighted per-sample KL estimate. REINFORCE is the main algorithm; Online
//! DPO, Remax, RLOO and GRPO are provided for comparison. Gradients w.r.t.
//! the policy logits are analytic.

mod losses;
mod policy;
mod sft;
mod train;

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::BankError;
use crate::metrics::function_f1;
use crate::retrieval::RetrievalError;
use crate::script::FunctionCallSet;

pub use losses::{
    grpo_advantages, grpo_loss, online_dpo_loss, reinforce_loss, remax_loss, rloo_advantages, rloo_loss,
    variant_loss, GrpoAdvantages, LossOutput, VariantConfig,
};
pub use policy::{exact_kl, Sequence, ToyPolicy, END_TOKEN};
pub use sft::{export_sft_dataset, write_sft_dataset, SftRecord};
pub use train::{
    expected_ff1, read_curve, train_toy, write_curve, CurvePoint, ToyInstance, ToyRun, ToyTask, TrainToyConfig,
};

#[derive(Debug, Error)]
pub enum RlftError {
    #[error("invalid reward spec: {0}")]
    InvalidSpec(String),
    #[error("{algorithm} expects {expected} rollout(s), got {got}")]
    WrongSampleCount {
        algorithm: Algorithm,
        expected: usize,
        got: usize,
    },
    #[error("toy task has no instances")]
    EmptyTask,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("bank has {size} case(s); export needs at least 2")]
    BankTooSmall { size: usize },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed curve line {line}: {message}")]
    MalformedCurve { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Reinforce,
    OnlineDpo,
    Remax,
    Rloo,
    Grpo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Reinforce,
        Algorithm::OnlineDpo,
        Algorithm::Remax,
        Algorithm::Rloo,
        Algorithm::Grpo,
    ];

    /// On-policy rollouts per query. Remax's second rollout is the greedy one.
    pub fn samples(self) -> usize {
        match self {
            Algorithm::Reinforce => 1,
            Algorithm::OnlineDpo | Algorithm::Remax => 2,
            Algorithm::Rloo | Algorithm::Grpo => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Reinforce => "reinforce",
            Algorithm::OnlineDpo => "online_dpo",
            Algorithm::Remax => "remax",
            Algorithm::Rloo => "rloo",
            Algorithm::Grpo => "grpo",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected reinforce, online_dpo, remax, rloo or grpo)"))
    }
}

/// Reference call set, KL coefficient and the frozen reference policy.
#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub reference_calls: FunctionCallSet,
    pub beta: f64,
    pub reference_policy: ToyPolicy,
}

impl RewardSpec {
    pub fn validate_for(&self, policy: &ToyPolicy) -> Result<(), RlftError> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(RlftError::InvalidSpec(format!("beta must be finite and ≥ 0, got {}", self.beta)));
        }
        if !self.reference_policy.same_shape(policy) {
            return Err(RlftError::InvalidSpec(
                "reference policy vocabulary or length differs from the trained policy".into(),
            ));
        }
        Ok(())
    }
}

/// `FF1(calls(sequence), R) − β · (log π_θ − log π_ref)`.
///
/// Repeated calls collapse into a set before scoring.
pub fn reward<S: AsRef<str>>(sequence: &[S], spec: &RewardSpec, logprob_current: f64, logprob_reference: f64) -> f64 {
    let calls: FunctionCallSet = sequence.iter().map(|s| s.as_ref()).collect();
    function_f1(&calls, &spec.reference_calls) - spec.beta * kl_estimate(logprob_current, logprob_reference)
}

/// Per-sample KL estimator `log π_θ(ŷ) − log π_ref(ŷ)`.
pub fn kl_estimate(logprob_current: f64, logprob_reference: f64) -> f64 {
    logprob_current - logprob_reference
}

/// One sampled sequence with everything the losses need, frozen at sampling
/// time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Sequence,
    /// Per-token log-probabilities under the sampling policy (π_old).
    pub old_token_logprobs: Vec<f64>,
    pub ref_token_logprobs: Vec<f64>,
    pub ff1: f64,
    /// `ff1 − β · KL estimate`.
    pub reward: f64,
}

impl Rollout {
    pub fn new(policy: &ToyPolicy, spec: &RewardSpec, tokens: Sequence) -> Self {
        let old_token_logprobs = policy.token_log_probs(&tokens);
        let ref_token_logprobs = spec.reference_policy.token_log_probs(&tokens);
        let ff1 = function_f1(&policy.calls(&tokens), &spec.reference_calls);
        let lp: f64 = old_token_logprobs.iter().sum();
        let lp_ref: f64 = ref_token_logprobs.iter().sum();
        let reward = ff1 - spec.beta * kl_estimate(lp, lp_ref);
        Self {
            tokens,
            old_token_logprobs,
            ref_token_logprobs,
            ff1,
            reward,
        }
    }

    pub fn logprob(&self) -> f64 {
        self.old_token_logprobs.iter().sum()
    }

    pub fn ref_logprob(&self) -> f64 {
        self.ref_token_logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
}

impl RolloutBatch {
    /// Draw the rollouts `algorithm` needs from `policy`.
    pub fn sample<R: Rng + ?Sized>(algorithm: Algorithm, policy: &ToyPolicy, spec: &RewardSpec, rng: &mut R) -> Self {
        let rollouts = match algorithm {
            Algorithm::Remax => vec![
                Rollout::new(policy, spec, policy.sample(rng)),
                Rollout::new(policy, spec, policy.greedy()),
            ],
            _ => (0..algorithm.samples())
                .map(|_| Rollout::new(policy, spec, policy.sample(rng)))
                .collect(),
        };
        Self { rollouts }
    }

    pub fn from_sequences(policy: &ToyPolicy, spec: &RewardSpec, sequences: Vec<Sequence>) -> Self {
        Self {
            rollouts: sequences.into_iter().map(|s| Rollout::new(policy, spec, s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(reference: &[&str], beta: f64) -> RewardSpec {
        RewardSpec {
            reference_calls: reference.iter().copied().collect(),
            beta,
            reference_policy: ToyPolicy::uniform(&["A", "B", "E", "F", "G", "H"], 5),
        }
    }

    #[test]
    fn reward_examples() {
        let s = spec(&["B", "E", "F", "G", "H"], 0.1);
        assert_eq!(reward(&["B", "E", "F", "G", "H"], &s, -2.0, -2.0), 1.0);
        let s0 = spec(&["B", "E", "F", "G", "H"], 0.0);
        assert_eq!(reward(&["X", "Y"], &s0, -1.0, -7.0), 0.0);
        assert_eq!(reward(&["B", "E", "A", "A", "A"], &s0, -1.0, -3.0), 0.5);
        assert_eq!(
            reward(&["A", "B", "A", "E"], &s0, 0.0, 0.0),
            reward(&["E", "B", "A"], &s0, 0.0, 0.0)
        );
    }

    #[test]
    fn kl_term_enters_with_beta() {
        let s = spec(&["B"], 0.5);
        let r = reward(&["B"], &s, -1.0, -2.0);
        assert!((r - (1.0 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let p = ToyPolicy::uniform(&["A", "B", "E", "F", "G", "H"], 5);
        assert!(spec(&["A"], -0.1).validate_for(&p).is_err());
        assert!(spec(&["A"], f64::NAN).validate_for(&p).is_err());
        assert!(spec(&["A"], 0.1).validate_for(&ToyPolicy::uniform(&["A"], 5)).is_err());
        assert!(spec(&["A"], 0.1).validate_for(&p).is_ok());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.as_str()));
        }
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn remax_batch_second_rollout_is_greedy() {
        use rand::SeedableRng;
        let p = ToyPolicy::uniform(&["A", "B", "E", "F", "G", "H"], 5);
        let s = spec(&["A"], 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let batch = RolloutBatch::sample(Algorithm::Remax, &p, &s, &mut rng);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.rollouts[1].tokens, p.greedy());
        assert_eq!(RolloutBatch::sample(Algorithm::Grpo, &p, &s, &mut rng).len(), 4);
    }
}
