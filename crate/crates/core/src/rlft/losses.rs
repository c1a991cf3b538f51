use std::ops::{Div, Sub};

use num_traits::{FromPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::{Algorithm, RewardSpec, RlftError, RolloutBatch, ToyPolicy};

/// Loss value and its gradient w.r.t. the policy logits. Rewards,
/// advantages, π_old and π_ref are constants of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Online DPO drew two rollouts with equal FF1; no pair was formed.
    pub skipped: bool,
    /// GRPO group had zero reward spread; advantages were set to 0.
    pub degenerate: bool,
}

impl LossOutput {
    fn new(loss: f64, grad: Vec<f64>) -> Self {
        Self {
            loss,
            grad,
            skipped: false,
            degenerate: false,
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    /// GRPO importance-ratio clip ε.
    pub clip_epsilon: f64,
    /// Scale of the Online DPO log-ratio margin.
    pub dpo_beta: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            dpo_beta: 0.1,
        }
    }
}

fn expect_samples(algorithm: Algorithm, batch: &RolloutBatch, ok: bool) -> Result<(), RlftError> {
    if ok {
        Ok(())
    } else {
        Err(RlftError::WrongSampleCount {
            algorithm,
            expected: algorithm.samples(),
            got: batch.len(),
        })
    }
}

/// `−r(ŷ) · log π_θ(ŷ)` for a single rollout.
pub fn reinforce_loss(policy: &ToyPolicy, batch: &RolloutBatch) -> Result<LossOutput, RlftError> {
    expect_samples(Algorithm::Reinforce, batch, batch.len() == 1)?;
    let rollout = &batch.rollouts[0];
    let r = rollout.reward;
    let mut grad = vec![0.0; policy.parameter_count()];
    if r == 0.0 {
        return Ok(LossOutput::new(0.0, grad));
    }
    policy.add_log_prob_grad(&mut grad, &rollout.tokens, -r);
    Ok(LossOutput::new(-r * policy.log_prob(&rollout.tokens), grad))
}

/// `−log π_θ(ŷ₁) · (r(ŷ₁) − r(ŷ₂))` with ŷ₂ the greedy rollout.
pub fn remax_loss(policy: &ToyPolicy, batch: &RolloutBatch) -> Result<LossOutput, RlftError> {
    expect_samples(Algorithm::Remax, batch, batch.len() == 2)?;
    let (sampled, greedy) = (&batch.rollouts[0], &batch.rollouts[1]);
    let advantage = sampled.reward - greedy.reward;
    let mut grad = vec![0.0; policy.parameter_count()];
    policy.add_log_prob_grad(&mut grad, &sampled.tokens, -advantage);
    Ok(LossOutput::new(-advantage * policy.log_prob(&sampled.tokens), grad))
}

/// `a_i = r_i − mean_{j≠i} r_j`, generic so the zero-sum property can be
/// checked in exact arithmetic.
///
/// # Panics
/// If fewer than two rewards are given.
pub fn rloo_advantages<T>(rewards: &[T]) -> Vec<T>
where
    T: Clone + Zero + FromPrimitive + Sub<Output = T> + Div<Output = T>,
{
    assert!(rewards.len() >= 2, "leave-one-out needs at least two samples");
    let total = rewards.iter().cloned().fold(T::zero(), |acc, r| acc + r);
    let others = T::from_usize(rewards.len() - 1).expect("count fits the numeric type");
    rewards
        .iter()
        .map(|r| r.clone() - (total.clone() - r.clone()) / others.clone())
        .collect()
}

/// `−(1/K) Σ_i log π_θ(ŷ_i) · a_i` with leave-one-out advantages.
pub fn rloo_loss(policy: &ToyPolicy, batch: &RolloutBatch) -> Result<LossOutput, RlftError> {
    expect_samples(Algorithm::Rloo, batch, batch.len() >= 2)?;
    let rewards: Vec<f64> = batch.rollouts.iter().map(|r| r.reward).collect();
    let advantages = rloo_advantages(&rewards);
    let k = batch.len() as f64;
    let mut grad = vec![0.0; policy.parameter_count()];
    let mut loss = 0.0;
    for (rollout, a) in batch.rollouts.iter().zip(&advantages) {
        loss -= a * policy.log_prob(&rollout.tokens) / k;
        policy.add_log_prob_grad(&mut grad, &rollout.tokens, -a / k);
    }
    Ok(LossOutput::new(loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoAdvantages {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// `(r_i − mean) / std` with the population standard deviation. A group with
/// zero spread gets all-zero advantages and is flagged degenerate.
pub fn grpo_advantages(rewards: &[f64]) -> GrpoAdvantages {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if rewards.is_empty() || std == 0.0 {
        return GrpoAdvantages {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        };
    }
    GrpoAdvantages {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    }
}

/// Clipped per-token importance-ratio objective with group-standardized FF1
/// advantages and a per-token KL penalty toward the reference policy:
///
/// `−(1/K) Σ_i (1/T_i) Σ_t [min(ρ A, clip(ρ, 1−ε, 1+ε) A) − β (log π_θ − log π_ref)]`
///
/// where `ρ = π_θ(y_t) / π_old(y_t)` and π_old is the sampling policy.
pub fn grpo_loss(
    policy: &ToyPolicy,
    batch: &RolloutBatch,
    beta: f64,
    clip_epsilon: f64,
) -> Result<LossOutput, RlftError> {
    expect_samples(Algorithm::Grpo, batch, batch.len() >= 2)?;
    let rewards: Vec<f64> = batch.rollouts.iter().map(|r| r.ff1).collect();
    let advantages = grpo_advantages(&rewards);
    let k = batch.len() as f64;
    let mut grad = vec![0.0; policy.parameter_count()];
    let mut loss = 0.0;
    for (rollout, &a) in batch.rollouts.iter().zip(&advantages.values) {
        let current = policy.token_log_probs(&rollout.tokens);
        let weight = 1.0 / (k * rollout.tokens.len() as f64);
        for (t, &tok) in rollout.tokens.iter().enumerate() {
            let ratio = (current[t] - rollout.old_token_logprobs[t]).exp();
            let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
            let unclipped_term = ratio * a;
            let clipped_term = clipped * a;
            let surrogate = unclipped_term.min(clipped_term);
            let kl = current[t] - rollout.ref_token_logprobs[t];
            loss -= weight * (surrogate - beta * kl);

            // d surrogate / d log π_θ(y_t): ρA on the unclipped branch or
            // inside the clip window, else 0.
            let inside = ratio > 1.0 - clip_epsilon && ratio < 1.0 + clip_epsilon;
            let d_surrogate = if unclipped_term <= clipped_term || inside {
                ratio * a
            } else {
                0.0
            };
            policy.add_token_log_prob_grad(&mut grad, t, tok, -weight * (d_surrogate - beta));
        }
    }
    let mut out = LossOutput::new(loss, grad);
    out.degenerate = advantages.degenerate;
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(β [log π_θ/π_ref (y_w) − log π_θ/π_ref (y_l)])` with the winner
/// chosen by FF1. Equal FF1 forms no pair: zero loss, zero gradient.
pub fn online_dpo_loss(policy: &ToyPolicy, batch: &RolloutBatch, dpo_beta: f64) -> Result<LossOutput, RlftError> {
    expect_samples(Algorithm::OnlineDpo, batch, batch.len() == 2)?;
    let (a, b) = (&batch.rollouts[0], &batch.rollouts[1]);
    if a.ff1 == b.ff1 {
        let mut out = LossOutput::new(0.0, vec![0.0; policy.parameter_count()]);
        out.skipped = true;
        return Ok(out);
    }
    let (winner, loser) = if a.ff1 > b.ff1 { (a, b) } else { (b, a) };
    let log_ratio_w = policy.log_prob(&winner.tokens) - winner.ref_logprob();
    let log_ratio_l = policy.log_prob(&loser.tokens) - loser.ref_logprob();
    let margin = dpo_beta * (log_ratio_w - log_ratio_l);
    let upstream = -sigmoid(-margin) * dpo_beta;
    let mut grad = vec![0.0; policy.parameter_count()];
    policy.add_log_prob_grad(&mut grad, &winner.tokens, upstream);
    policy.add_log_prob_grad(&mut grad, &loser.tokens, -upstream);
    Ok(LossOutput::new(softplus(-margin), grad))
}

/// Dispatch on `algorithm`, enforcing its rollout count.
pub fn variant_loss(
    algorithm: Algorithm,
    policy: &ToyPolicy,
    batch: &RolloutBatch,
    spec: &RewardSpec,
    config: &VariantConfig,
) -> Result<LossOutput, RlftError> {
    expect_samples(algorithm, batch, batch.len() == algorithm.samples())?;
    match algorithm {
        Algorithm::Reinforce => reinforce_loss(policy, batch),
        Algorithm::Remax => remax_loss(policy, batch),
        Algorithm::Rloo => rloo_loss(policy, batch),
        Algorithm::Grpo => grpo_loss(policy, batch, spec.beta, config.clip_epsilon),
        Algorithm::OnlineDpo => online_dpo_loss(policy, batch, config.dpo_beta),
    }
}

#[cfg(test)]
mod tests {
    use super::super::Rollout;
    use super::*;

    fn spec(policy: &ToyPolicy, reference: &[&str], beta: f64) -> RewardSpec {
        RewardSpec {
            reference_calls: reference.iter().copied().collect(),
            beta,
            reference_policy: policy.clone(),
        }
    }

    #[test]
    fn reinforce_closed_form() {
        let base = ToyPolicy::uniform(&["a", "b"], 1);
        // π(a) = 0.6 with π(b) = 0.4 and the end token pushed to ~0
        let logits = vec![0.6f64.ln(), 0.4f64.ln(), f64::NEG_INFINITY];
        let policy = base.with_logits(logits);
        let s = spec(&policy, &["a"], 0.0);
        let batch = RolloutBatch::from_sequences(&policy, &s, vec![vec![0]]);
        assert_eq!(batch.rollouts[0].reward, 1.0);
        let out = reinforce_loss(&policy, &batch).unwrap();
        assert!((out.loss - 0.5108256237659907).abs() < 1e-12);
        assert!((out.grad[0] + 0.4).abs() < 1e-12);
        assert!((out.grad[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_means_zero_loss_and_gradient() {
        let policy = ToyPolicy::uniform(&["a", "b"], 2);
        let s = spec(&policy, &["z"], 0.0);
        let batch = RolloutBatch::from_sequences(&policy, &s, vec![vec![0, 1]]);
        let out = reinforce_loss(&policy, &batch).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn sample_counts_are_enforced() {
        let policy = ToyPolicy::uniform(&["a"], 1);
        let s = spec(&policy, &["a"], 0.0);
        let two = RolloutBatch::from_sequences(&policy, &s, vec![vec![0], vec![1]]);
        assert!(reinforce_loss(&policy, &two).is_err());
        assert!(variant_loss(Algorithm::Rloo, &policy, &two, &s, &VariantConfig::default()).is_err());
        assert!(variant_loss(Algorithm::Remax, &policy, &two, &s, &VariantConfig::default()).is_ok());
    }

    #[test]
    fn rloo_hand_example() {
        let a: Vec<f64> = rloo_advantages(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(a[0], 1.0);
        for x in &a[1..] {
            assert!((x + 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grpo_hand_examples() {
        let a = grpo_advantages(&[1.0, 0.0]);
        assert_eq!(a.values, vec![1.0, -1.0]);
        assert!(!a.degenerate);
        let flat = grpo_advantages(&[0.5, 0.5, 0.5, 0.5]);
        assert!(flat.degenerate);
        assert_eq!(flat.values, vec![0.0; 4]);
    }

    #[test]
    fn dpo_tie_is_skipped() {
        let policy = ToyPolicy::uniform(&["a", "b"], 2);
        let s = spec(&policy, &["a"], 0.1);
        let batch = RolloutBatch::from_sequences(&policy, &s, vec![vec![0, 2], vec![0, 0]]);
        let out = online_dpo_loss(&policy, &batch, 0.1).unwrap();
        assert!(out.skipped);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn dpo_at_reference_is_log_two() {
        let policy = ToyPolicy::uniform(&["a", "b"], 2);
        let s = spec(&policy, &["a"], 0.1);
        let batch = RolloutBatch::from_sequences(&policy, &s, vec![vec![1, 2], vec![0, 2]]);
        let out = online_dpo_loss(&policy, &batch, 0.1).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(!out.skipped);
    }

    #[test]
    fn grpo_on_policy_gradient_is_advantage_weighted_score() {
        let policy = ToyPolicy::uniform(&["a", "b"], 1);
        let s = spec(&policy, &["a"], 0.0);
        let batch = RolloutBatch::from_sequences(&policy, &s, vec![vec![0], vec![1]]);
        let out = grpo_loss(&policy, &batch, 0.0, 0.2).unwrap();
        // ρ = 1 everywhere, so the loss is −(1/2)(A₁ + A₂) = 0
        assert!(out.loss.abs() < 1e-15);
        let mut expected = vec![0.0; 3];
        policy.add_token_log_prob_grad(&mut expected, 0, 0, -0.5);
        policy.add_token_log_prob_grad(&mut expected, 0, 1, 0.5);
        for (g, e) in out.grad.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn rollout_records_kl_in_reward() {
        let policy = ToyPolicy::uniform(&["a", "b"], 1);
        let reference = policy.with_logits(vec![1.0, 0.0, 0.0]);
        let s = RewardSpec {
            reference_calls: ["a"].into_iter().collect(),
            beta: 0.5,
            reference_policy: reference.clone(),
        };
        let r = Rollout::new(&policy, &s, vec![0]);
        let expected = 1.0 - 0.5 * (policy.log_prob(&[0]) - reference.log_prob(&[0]));
        assert_eq!(r.reward, expected);
        assert_eq!(r.ff1, 1.0);
    }
}
