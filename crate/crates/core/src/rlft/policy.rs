use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::script::FunctionCallSet;

pub const END_TOKEN: &str = "<end>";

/// Token indices of one rollout. Contains the end token only when it was
/// emitted before `max_length`.
pub type Sequence = Vec<usize>;

/// Position-wise categorical policy over function tokens plus an end token.
///
/// Position `t` draws from `softmax(logits[t])` independently of earlier
/// tokens, so every sequence probability and expectation is enumerable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocabulary: Vec<String>,
    max_length: usize,
    /// Row-major `max_length × vocabulary.len()`.
    logits: Vec<f64>,
}

impl ToyPolicy {
    /// Uniform policy over `functions` plus a trailing end token.
    ///
    /// # Panics
    /// If `functions` is empty, contains the end token, or `max_length == 0`.
    pub fn uniform<S: AsRef<str>>(functions: &[S], max_length: usize) -> Self {
        assert!(!functions.is_empty(), "toy policy needs at least one function token");
        assert!(max_length >= 1, "max_length must be at least 1");
        let mut vocabulary: Vec<String> = functions.iter().map(|f| f.as_ref().to_string()).collect();
        assert!(
            !vocabulary.iter().any(|v| v == END_TOKEN),
            "function tokens must not include {END_TOKEN}"
        );
        vocabulary.push(END_TOKEN.to_string());
        let logits = vec![0.0; max_length * vocabulary.len()];
        Self {
            vocabulary,
            max_length,
            logits,
        }
    }

    /// Same vocabulary and shape as `self`, with the given logits.
    ///
    /// # Panics
    /// If `logits` has the wrong length.
    pub fn with_logits(&self, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), self.logits.len(), "logit shape mismatch");
        Self {
            logits,
            ..self.clone()
        }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn end_index(&self) -> usize {
        self.vocabulary.len() - 1
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn parameter_count(&self) -> usize {
        self.logits.len()
    }

    pub fn same_shape(&self, other: &ToyPolicy) -> bool {
        self.vocabulary == other.vocabulary && self.max_length == other.max_length
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == token)
    }

    fn row(&self, t: usize) -> &[f64] {
        let v = self.vocab_size();
        &self.logits[t * v..(t + 1) * v]
    }

    /// Log-softmax of position `t`, max-shifted.
    pub fn log_probs_at(&self, t: usize) -> Vec<f64> {
        let row = self.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - log_z).collect()
    }

    pub fn probs_at(&self, t: usize) -> Vec<f64> {
        self.log_probs_at(t).into_iter().map(f64::exp).collect()
    }

    /// `log π(token_t)` for each position of the sequence.
    pub fn token_log_probs(&self, sequence: &[usize]) -> Vec<f64> {
        sequence
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.log_probs_at(t)[tok])
            .collect()
    }

    pub fn log_prob(&self, sequence: &[usize]) -> f64 {
        self.token_log_probs(sequence).iter().sum()
    }

    /// ∂ log π(token_t) / ∂ logits, flattened like [`ToyPolicy::logits`].
    pub fn token_log_prob_grad(&self, t: usize, token: usize) -> Vec<f64> {
        let mut grad = vec![0.0; self.logits.len()];
        self.add_token_log_prob_grad(&mut grad, t, token, 1.0);
        grad
    }

    /// `grad += scale · ∂ log π(token at t)`; only row `t` is touched.
    pub fn add_token_log_prob_grad(&self, grad: &mut [f64], t: usize, token: usize, scale: f64) {
        let v = self.vocab_size();
        let probs = self.probs_at(t);
        for (j, p) in probs.iter().enumerate() {
            let onehot = if j == token { 1.0 } else { 0.0 };
            grad[t * v + j] += scale * (onehot - p);
        }
    }

    /// `grad += scale · ∂ log π(sequence)`.
    pub fn add_log_prob_grad(&self, grad: &mut [f64], sequence: &[usize], scale: f64) {
        for (t, &tok) in sequence.iter().enumerate() {
            self.add_token_log_prob_grad(grad, t, tok, scale);
        }
    }

    pub fn log_prob_grad(&self, sequence: &[usize]) -> Vec<f64> {
        let mut grad = vec![0.0; self.logits.len()];
        self.add_log_prob_grad(&mut grad, sequence, 1.0);
        grad
    }

    /// Draw one rollout; halts at the end token or `max_length`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        let mut sequence = Vec::with_capacity(self.max_length);
        for t in 0..self.max_length {
            let probs = self.probs_at(t);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut token = probs.len() - 1;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    token = j;
                    break;
                }
            }
            sequence.push(token);
            if token == self.end_index() {
                break;
            }
        }
        sequence
    }

    /// Argmax at every position (lowest index on ties), halting at the end token.
    pub fn greedy(&self) -> Sequence {
        let mut sequence = Vec::with_capacity(self.max_length);
        for t in 0..self.max_length {
            let row = self.row(t);
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            sequence.push(best);
            if best == self.end_index() {
                break;
            }
        }
        sequence
    }

    /// Number of distinct sequences: Σ_{L<n} (V−1)^L  +  (V−1)^n.
    pub fn sequence_space_size(&self) -> u128 {
        let f = (self.vocab_size() - 1) as u128;
        let mut total: u128 = 0;
        let mut power: u128 = 1;
        for _ in 0..self.max_length {
            total = total.saturating_add(power);
            power = power.saturating_mul(f);
        }
        total.saturating_add(power)
    }

    /// Every sequence with its probability.
    pub fn enumerate(&self) -> Vec<(Sequence, f64)> {
        let log_probs: Vec<Vec<f64>> = (0..self.max_length).map(|t| self.log_probs_at(t)).collect();
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.max_length);
        self.enumerate_from(&log_probs, &mut prefix, 0.0, &mut out);
        out
    }

    fn enumerate_from(&self, log_probs: &[Vec<f64>], prefix: &mut Sequence, lp: f64, out: &mut Vec<(Sequence, f64)>) {
        let t = prefix.len();
        if t == self.max_length {
            out.push((prefix.clone(), lp.exp()));
            return;
        }
        for tok in 0..self.vocab_size() {
            let next = lp + log_probs[t][tok];
            prefix.push(tok);
            if tok == self.end_index() {
                out.push((prefix.clone(), next.exp()));
            } else {
                self.enumerate_from(log_probs, prefix, next, out);
            }
            prefix.pop();
        }
    }

    /// The set of function names a sequence invokes; repeats collapse.
    pub fn calls(&self, sequence: &[usize]) -> FunctionCallSet {
        sequence
            .iter()
            .filter(|&&tok| tok != self.end_index())
            .map(|&tok| self.vocabulary[tok].as_str())
            .collect()
    }

    pub fn tokens<'a>(&'a self, sequence: &'a [usize]) -> impl Iterator<Item = &'a str> + 'a {
        sequence.iter().map(|&tok| self.vocabulary[tok].as_str())
    }

    /// θ ← θ − lr · grad.
    pub fn step(&mut self, grad: &[f64], learning_rate: f64) {
        for (w, g) in self.logits.iter_mut().zip(grad) {
            *w -= learning_rate * g;
        }
    }
}

/// Exact KL(π ‖ π_ref) over whole sequences, by enumeration.
pub fn exact_kl(policy: &ToyPolicy, reference: &ToyPolicy) -> f64 {
    assert!(policy.same_shape(reference), "policies must share vocabulary and shape");
    policy
        .enumerate()
        .into_iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(seq, p)| p * (policy.log_prob(&seq) - reference.log_prob(&seq)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy() -> ToyPolicy {
        let base = ToyPolicy::uniform(&["A", "B", "C"], 3);
        let logits = (0..base.parameter_count()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
        base.with_logits(logits)
    }

    #[test]
    fn rows_normalize() {
        let p = policy();
        for t in 0..p.max_length() {
            let s: f64 = p.probs_at(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_covers_the_space_and_sums_to_one() {
        let p = policy();
        let all = p.enumerate();
        assert_eq!(all.len() as u128, p.sequence_space_size());
        assert_eq!(all.len(), 1 + 3 + 9 + 27);
        let total: f64 = all.iter().map(|(_, q)| q).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let two_by_four = ToyPolicy::uniform(&["A", "B", "C", "D"], 2);
        assert_eq!(two_by_four.sequence_space_size(), 21);
    }

    #[test]
    fn sampling_halts_and_is_seeded() {
        let p = policy();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = p.sample(&mut a);
            assert_eq!(s, p.sample(&mut b));
            assert!(!s.is_empty() && s.len() <= p.max_length());
            let end_at = s.iter().position(|&t| t == p.end_index());
            if let Some(i) = end_at {
                assert_eq!(i, s.len() - 1);
            } else {
                assert_eq!(s.len(), p.max_length());
            }
        }
    }

    #[test]
    fn greedy_stops_at_end() {
        let mut p = ToyPolicy::uniform(&["A", "B"], 3);
        let mut logits = p.logits().to_vec();
        logits[1] = 2.0; // position 0 prefers B
        logits[3 + 2] = 2.0; // position 1 prefers end
        p = p.with_logits(logits);
        assert_eq!(p.greedy(), vec![1, 2]);
    }

    #[test]
    fn calls_deduplicate_and_skip_end() {
        let p = ToyPolicy::uniform(&["A", "B"], 4);
        let calls = p.calls(&[0, 0, 1, 2]);
        assert_eq!(calls.len(), 2);
        assert!(calls.contains("A") && calls.contains("B"));
    }

    #[test]
    fn kl_is_zero_for_identical_and_positive_otherwise() {
        let p = policy();
        assert_eq!(exact_kl(&p, &p), 0.0);
        let q = ToyPolicy::uniform(&["A", "B", "C"], 3);
        assert!(exact_kl(&p, &q) > 0.0);
    }
}
