//! Tabular softmax policies and their first-order machinery: score function,
//! exact and sampled value gradients, natural-gradient and direction
//! updates, and occupancy-weighted KL divergence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{sample_categorical, CmdpError, CmdpSpec, QTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("expected {expected} logits, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("Q-table {got:?} does not fit this problem {expected:?}")]
    ChannelMismatch { expected: String, got: String },
    #[error("state weights must be a distribution over {0} states")]
    BadWeights(usize),
    #[error("malformed policy document: {0}")]
    Parse(String),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// `π_w(a|s) ∝ exp(w[s][a])`.
///
/// Logits are unnormalized; adding a constant to a row leaves the policy
/// unchanged, so compare policies through their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, logits: vec![0.0; n_states * n_actions] }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        let expected = n_states * n_actions;
        if logits.len() != expected {
            return Err(PolicyError::DimensionMismatch { expected, got: logits.len() });
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self { n_states, n_actions, logits })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, scale: f64, rng: &mut R) -> Self {
        let logits = (0..n_states * n_actions)
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        Self { n_states, n_actions, logits }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Softmax of the logits in state `s`, max-shifted against overflow.
    pub fn action_probs(&self, s: usize) -> Vec<f64> {
        let row = self.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    fn log_probs(&self, s: usize) -> Vec<f64> {
        let row = self.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
        row.iter().map(|w| w - lse).collect()
    }

    pub fn probability_table(&self) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| self.action_probs(s)).collect()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(&self.action_probs(s), rng)
    }

    /// `∇_w log π(a|s)`: `1{a'=a} − π(a'|s)` on row `s`, zero elsewhere.
    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_score(s, a, 1.0, &mut out);
        out
    }

    fn add_score(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        let probs = self.action_probs(s);
        let base = s * self.n_actions;
        for (b, p) in probs.iter().enumerate() {
            let indicator = if b == a { 1.0 } else { 0.0 };
            out[base + b] += scale * (indicator - p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        Self::from_logits(raw.n_states, raw.n_actions, raw.logits)
    }

    fn check_table(&self, q: &QTable) -> Result<()> {
        if q.n_states != self.n_states || q.n_actions != self.n_actions || q.values.len() != self.dim() {
            return Err(PolicyError::ChannelMismatch {
                expected: format!("{}x{}", self.n_states, self.n_actions),
                got: format!("{}x{} {}", q.n_states, q.n_actions, q.channel),
            });
        }
        Ok(())
    }
}

/// How [`value_gradient`] takes the expectation over states and actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientEstimator {
    /// Exact discounted occupancy from a linear solve.
    Exact,
    /// Average over `episodes` rollouts of length `horizon`.
    Sampled { episodes: usize, horizon: usize, seed: u64 },
}

/// Policy gradient `∇V(ρ) = Σ_t γ^t E[Q(s_t,a_t)·∇log π(a_t|s_t)]` for the
/// channel that `q` was computed on.
pub fn value_gradient(
    spec: &CmdpSpec,
    policy: &SoftmaxPolicy,
    q: &QTable,
    estimator: GradientEstimator,
) -> Result<Vec<f64>> {
    match estimator {
        GradientEstimator::Exact => exact_value_gradient(spec, policy, q),
        GradientEstimator::Sampled { episodes, horizon, seed } => {
            Ok(sampled_value_gradient(spec, policy, q, episodes, horizon, seed)?.0)
        }
    }
}

fn check_channel(spec: &CmdpSpec, policy: &SoftmaxPolicy, q: &QTable) -> Result<()> {
    policy.check_table(q)?;
    if q.n_states != spec.n_states || q.n_actions != spec.n_actions {
        return Err(PolicyError::ChannelMismatch {
            expected: format!("{}x{}", spec.n_states, spec.n_actions),
            got: format!("{}x{}", q.n_states, q.n_actions),
        });
    }
    spec.signal(q.channel).map_err(|_| PolicyError::ChannelMismatch {
        expected: format!("one of {:?}", spec.channels()),
        got: q.channel.to_string(),
    })?;
    Ok(())
}

fn exact_value_gradient(spec: &CmdpSpec, policy: &SoftmaxPolicy, q: &QTable) -> Result<Vec<f64>> {
    check_channel(spec, policy, q)?;
    let occupancy = spec.discounted_occupancy(policy)?;
    let mut grad = vec![0.0; policy.dim()];
    for (s, &m) in occupancy.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (a, p) in policy.action_probs(s).into_iter().enumerate() {
            policy.add_score(s, a, m * p * q.get(s, a), &mut grad);
        }
    }
    Ok(grad)
}

/// Monte Carlo gradient estimate with per-coordinate standard errors.
pub fn sampled_value_gradient(
    spec: &CmdpSpec,
    policy: &SoftmaxPolicy,
    q: &QTable,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_channel(spec, policy, q)?;
    let dim = policy.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = policy.probability_table();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut episode_grad = vec![0.0; dim];
    for _ in 0..episodes {
        episode_grad.iter_mut().for_each(|x| *x = 0.0);
        let mut s = spec.sample_state(&mut rng);
        let mut discount = 1.0;
        for _ in 0..horizon {
            let a = sample_categorical(&probs[s], &mut rng);
            policy.add_score(s, a, discount * q.get(s, a), &mut episode_grad);
            s = spec.sample_next(s, a, &mut rng);
            discount *= spec.gamma;
        }
        for i in 0..dim {
            sum[i] += episode_grad[i];
            sum_sq[i] += episode_grad[i] * episode_grad[i];
        }
    }
    let n = episodes.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|x| x / n).collect();
    let std_err =
        sum_sq.iter().zip(&mean).map(|(sq, m)| ((sq / n - m * m).max(0.0) / (n - 1.0).max(1.0)).sqrt()).collect();
    Ok((mean, std_err))
}

/// Direction of a natural-gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateSign {
    /// Increase the channel's value (reward).
    Ascend,
    /// Decrease it (cost).
    Descend,
}

impl UpdateSign {
    fn factor(self) -> f64 {
        match self {
            UpdateSign::Ascend => 1.0,
            UpdateSign::Descend => -1.0,
        }
    }
}

/// `(1−γ)⁻¹·Q̂` flattened: the softmax natural-gradient direction for a
/// channel.
pub fn natural_direction(q: &QTable, gamma: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - gamma);
    q.values.iter().map(|x| scale * x).collect()
}

/// `w' = w ± η·(1−γ)⁻¹·Q̂`.
pub fn npg_update(policy: &SoftmaxPolicy, q: &QTable, gamma: f64, eta: f64, sign: UpdateSign) -> Result<SoftmaxPolicy> {
    policy.check_table(q)?;
    direction_update(policy, &natural_direction(q, gamma), sign.factor() * eta)
}

/// `w' = w + η·d`.
pub fn direction_update(policy: &SoftmaxPolicy, direction: &[f64], eta: f64) -> Result<SoftmaxPolicy> {
    if direction.len() != policy.dim() {
        return Err(PolicyError::DimensionMismatch { expected: policy.dim(), got: direction.len() });
    }
    let logits = policy.logits.iter().zip(direction).map(|(w, d)| w + eta * d).collect();
    SoftmaxPolicy::from_logits(policy.n_states, policy.n_actions, logits)
}

/// `Σ_s d(s)·KL(π_old(·|s) ‖ π_new(·|s))`.
pub fn kl_divergence(old: &SoftmaxPolicy, new: &SoftmaxPolicy, state_weights: &[f64]) -> Result<f64> {
    if old.n_states != new.n_states || old.n_actions != new.n_actions {
        return Err(PolicyError::DimensionMismatch { expected: old.dim(), got: new.dim() });
    }
    let total: f64 = state_weights.iter().sum();
    if state_weights.len() != old.n_states || state_weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(PolicyError::BadWeights(old.n_states));
    }
    let mut kl = 0.0;
    for (s, &weight) in state_weights.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let (lp, lq) = (old.log_probs(s), new.log_probs(s));
        let row: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        kl += weight * row;
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{exact_q, exact_value, random_spec, Channel};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_probs() {
        let pi = SoftmaxPolicy::uniform(1, 4);
        assert_eq!(pi.action_probs(0), vec![0.25; 4]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let pi = SoftmaxPolicy::from_logits(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = pi.action_probs(0);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    #[test]
    fn closed_form_softmax() {
        let pi = SoftmaxPolicy::from_logits(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        assert!(close(&pi.action_probs(0), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(matches!(SoftmaxPolicy::from_logits(2, 2, vec![0.0; 3]), Err(PolicyError::DimensionMismatch { .. })));
        assert_eq!(SoftmaxPolicy::from_logits(1, 2, vec![0.0, f64::NAN]), Err(PolicyError::NonFinite(1)));
    }

    #[test]
    fn uniform_two_action_score() {
        let pi = SoftmaxPolicy::uniform(2, 2);
        assert_eq!(pi.score(0, 0), vec![0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn score_matches_finite_differences() {
        let pi = SoftmaxPolicy::from_logits(2, 3, vec![0.3, -0.2, 1.1, 0.0, 0.5, -0.7]).unwrap();
        let h = 1e-6;
        for s in 0..2 {
            for a in 0..3 {
                let score = pi.score(s, a);
                for i in 0..pi.dim() {
                    let mut plus = pi.logits.clone();
                    let mut minus = pi.logits.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    let lp = SoftmaxPolicy::from_logits(2, 3, plus).unwrap().action_probs(s)[a].ln();
                    let lm = SoftmaxPolicy::from_logits(2, 3, minus).unwrap().action_probs(s)[a].ln();
                    assert!(((lp - lm) / (2.0 * h) - score[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_q_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random_spec(&mut rng, 3, 2, 1, 0.9);
        let pi = SoftmaxPolicy::random(3, 2, 1.0, &mut rng);
        let mut q = QTable::zeros(3, 2, Channel::Reward);
        q.values.iter_mut().for_each(|x| *x = 4.2);
        let g = value_gradient(&spec, &pi, &q, GradientEstimator::Exact).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = random_spec(&mut rng, 3, 2, 1, 0.9);
        let pi = SoftmaxPolicy::random(3, 2, 1.0, &mut rng);
        for ch in spec.channels() {
            let q = exact_q(&spec, &pi, ch).unwrap();
            let g = value_gradient(&spec, &pi, &q, GradientEstimator::Exact).unwrap();
            let h = 1e-5;
            for i in 0..pi.dim() {
                let mut e = vec![0.0; pi.dim()];
                e[i] = 1.0;
                let up = exact_value(&spec, &direction_update(&pi, &e, h).unwrap(), ch).unwrap();
                let dn = exact_value(&spec, &direction_update(&pi, &e, -h).unwrap(), ch).unwrap();
                assert!(((up - dn) / (2.0 * h) - g[i]).abs() < 1e-5, "{ch} coord {i}");
            }
        }
    }

    #[test]
    fn sampled_gradient_converges_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random_spec(&mut rng, 3, 2, 1, 0.8);
        let pi = SoftmaxPolicy::random(3, 2, 0.5, &mut rng);
        let q = exact_q(&spec, &pi, Channel::Reward).unwrap();
        let exact = value_gradient(&spec, &pi, &q, GradientEstimator::Exact).unwrap();
        let horizon = crate::cmdp::default_horizon(spec.gamma);
        let (mean, se) = sampled_value_gradient(&spec, &pi, &q, 200_000, horizon, 9).unwrap();
        // Truncation bias is below 1e-3 relative to the value scale.
        for i in 0..pi.dim() {
            assert!((mean[i] - exact[i]).abs() <= 3.0 * se[i] + 1e-3, "coord {i}");
        }
    }

    #[test]
    fn gradient_rejects_mismatched_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random_spec(&mut rng, 3, 2, 1, 0.9);
        let pi = SoftmaxPolicy::uniform(3, 2);
        let q = QTable::zeros(3, 2, Channel::Cost(5));
        assert!(matches!(
            value_gradient(&spec, &pi, &q, GradientEstimator::Exact),
            Err(PolicyError::ChannelMismatch { .. })
        ));
        let q = QTable::zeros(2, 2, Channel::Reward);
        assert!(matches!(
            value_gradient(&spec, &pi, &q, GradientEstimator::Exact),
            Err(PolicyError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn npg_zero_q_is_noop() {
        let pi = SoftmaxPolicy::from_logits(1, 2, vec![0.1, 0.2]).unwrap();
        let q = QTable::zeros(1, 2, Channel::Reward);
        assert_eq!(npg_update(&pi, &q, 0.9, 0.5, UpdateSign::Ascend).unwrap(), pi);
    }

    #[test]
    fn npg_single_entry_step() {
        let pi = SoftmaxPolicy::uniform(2, 2);
        let mut q = QTable::zeros(2, 2, Channel::Reward);
        q.values[3] = 1.0;
        let next = npg_update(&pi, &q, 0.5, 0.1, UpdateSign::Ascend).unwrap();
        assert!(close(next.logits(), &[0.0, 0.0, 0.0, 0.2], 1e-15));
    }

    #[test]
    fn npg_descent_lowers_costly_action() {
        let pi = SoftmaxPolicy::uniform(1, 3);
        let mut q = QTable::zeros(1, 3, Channel::Cost(0));
        q.values = vec![0.1, 2.0, 0.3];
        let next = npg_update(&pi, &q, 0.9, 0.05, UpdateSign::Descend).unwrap();
        assert!(next.action_probs(0)[1] < pi.action_probs(0)[1]);
    }

    #[test]
    fn direction_update_examples() {
        let pi = SoftmaxPolicy::from_logits(1, 3, vec![0.5, -0.5, 1.0]).unwrap();
        assert_eq!(direction_update(&pi, &[0.0; 3], 1.0).unwrap(), pi);
        let bumped = direction_update(&pi, &[0.0, 1.0, 0.0], 1.0).unwrap();
        assert_eq!(bumped.logits(), &[0.5, 0.5, 1.0]);
        let d = [0.25, -1.0, 3.0];
        let half = direction_update(&direction_update(&pi, &d, 0.5).unwrap(), &d, 0.5).unwrap();
        assert!(close(half.logits(), direction_update(&pi, &d, 1.0).unwrap().logits(), 1e-15));
        assert!(matches!(direction_update(&pi, &[1.0], 1.0), Err(PolicyError::DimensionMismatch { .. })));
    }

    #[test]
    fn kl_examples() {
        let a = SoftmaxPolicy::from_logits(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(kl_divergence(&a, &a, &[1.0]).unwrap(), 0.0);
        let b = SoftmaxPolicy::from_logits(1, 2, vec![9f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&a, &b, &[1.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.51083).abs() < 1e-5);
        assert!(matches!(kl_divergence(&a, &b, &[0.5]), Err(PolicyError::BadWeights(1))));
    }

    #[test]
    fn kl_ignores_unweighted_states() {
        let a = SoftmaxPolicy::uniform(2, 2);
        let b = SoftmaxPolicy::from_logits(2, 2, vec![0.0, 0.0, 5.0, 0.0]).unwrap();
        assert_eq!(kl_divergence(&a, &b, &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn policy_json_round_trip() {
        let pi = SoftmaxPolicy::from_logits(2, 2, vec![0.1, -3.0, 2.5, 0.0]).unwrap();
        assert_eq!(SoftmaxPolicy::from_json(&pi.to_json()).unwrap(), pi);
        assert!(matches!(SoftmaxPolicy::from_json("[]"), Err(PolicyError::Parse(_))));
    }

    #[test]
    fn npg_ascent_improves_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let spec = random_spec(&mut rng, 4, 3, 1, 0.9);
            let pi = SoftmaxPolicy::random(4, 3, 1.0, &mut rng);
            let q = exact_q(&spec, &pi, Channel::Reward).unwrap();
            let next = npg_update(&pi, &q, spec.gamma, 1e-3, UpdateSign::Ascend).unwrap();
            assert!(
                exact_value(&spec, &next, Channel::Reward).unwrap() > exact_value(&spec, &pi, Channel::Reward).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn score_identity(logits in proptest::collection::vec(-5.0..5.0_f64, 8)) {
            let pi = SoftmaxPolicy::from_logits(2, 4, logits).unwrap();
            for s in 0..2 {
                let probs = pi.action_probs(s);
                let mut acc = vec![0.0; pi.dim()];
                for (a, p) in probs.iter().enumerate() {
                    pi.add_score(s, a, *p, &mut acc);
                }
                prop_assert!(acc.iter().all(|x| x.abs() < 1e-12));
                prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(probs.iter().all(|p| *p > 0.0));
            }
        }

        #[test]
        fn kl_is_nonnegative(
            a in proptest::collection::vec(-6.0..6.0_f64, 9),
            b in proptest::collection::vec(-6.0..6.0_f64, 9),
            w in proptest::collection::vec(0.0..1.0_f64, 3),
        ) {
            let total: f64 = w.iter().sum();
            prop_assume!(total > 1e-6);
            let weights: Vec<f64> = w.iter().map(|x| x / total).collect();
            let pa = SoftmaxPolicy::from_logits(3, 3, a).unwrap();
            let pb = SoftmaxPolicy::from_logits(3, 3, b).unwrap();
            prop_assert!(kl_divergence(&pa, &pb, &weights).unwrap() >= 0.0);
        }
    }
}
