//! The soft-switching training loop and its CRPO / SCRPO baselines.
//!
//! Every iteration evaluates the current policy per channel, picks an
//! [`UpdateMode`] from the cost estimates and the slack band, builds an
//! update direction for that mode, and backtracks the step until the
//! occupancy-weighted KL to the previous policy is within the threshold.
//!
//! | slack case | `h⁺`, `h⁻`        | decision                                              |
//! |------------|-------------------|-------------------------------------------------------|
//! | One        | `+∞`, `0`         | any `V_c ≥ b` → projection, else reward               |
//! | Two        | `0`, `−∞`         | any `V_c ≥ b` → safety, else projection               |
//! | Three      | finite, finite    | above `b+h⁺` → safety; in `[b+h⁻, b+h⁺]` → projection; else reward |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{CmdpError, CmdpSpec, QTable};
use crate::evaluation::{self, td_q_estimate, EvalError, QEstimate, TdConfig, ValueEstimates};
use crate::gradmanip::{self, CombineWeights, GradError, GradientPair};
use crate::policy::{self, kl_divergence, GradientEstimator, PolicyError, SoftmaxPolicy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid slack configuration: {0}")]
    InvalidSlack(String),
    #[error("policy evaluation failed: {0}")]
    EvaluationFailure(#[from] EvalError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Gradient(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlackCase {
    One,
    Two,
    Three,
}

/// How the slack bounds shrink in case Three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayLaw {
    /// `h ← h − h/T` every iteration; ends near `h₀/e`.
    #[default]
    Geometric,
    /// `h_t = h₀·(1 − (t+1)/T)`; reaches zero on the last iteration.
    LinearToZero,
}

/// Slack bounds around each cost limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackConfig {
    pub h_plus: f64,
    pub h_minus: f64,
    #[serde(default)]
    pub decay_plus: bool,
    #[serde(default)]
    pub decay_minus: bool,
    #[serde(default)]
    pub decay_law: DecayLaw,
}

impl SlackConfig {
    /// `h⁺ = +∞, h⁻ = 0`.
    pub fn case_one() -> Self {
        Self {
            h_plus: f64::INFINITY,
            h_minus: 0.0,
            decay_plus: false,
            decay_minus: false,
            decay_law: DecayLaw::Geometric,
        }
    }

    /// `h⁺ = 0, h⁻ = −∞`.
    pub fn case_two() -> Self {
        Self {
            h_plus: 0.0,
            h_minus: f64::NEG_INFINITY,
            decay_plus: false,
            decay_minus: false,
            decay_law: DecayLaw::Geometric,
        }
    }

    pub fn case_three(h_plus: f64, h_minus: f64, decay_plus: bool, decay_minus: bool) -> Self {
        Self { h_plus, h_minus, decay_plus, decay_minus, decay_law: DecayLaw::Geometric }
    }

    pub fn case(&self) -> Result<SlackCase> {
        let (hp, hm) = (self.h_plus, self.h_minus);
        if hp == f64::INFINITY && hm == 0.0 {
            Ok(SlackCase::One)
        } else if hp == 0.0 && hm == f64::NEG_INFINITY {
            Ok(SlackCase::Two)
        } else if hp.is_finite() && hm.is_finite() && hp >= 0.0 && hm <= 0.0 {
            Ok(SlackCase::Three)
        } else {
            Err(TrainError::InvalidSlack(format!("h+ = {hp}, h- = {hm} matches no slack case")))
        }
    }
}

/// One geometric decay step of the enabled bounds: `h ← h·(1 − 1/T)`.
/// Only case Three decays; other cases are returned unchanged.
pub fn decay_slack(slack: &SlackConfig, total_iters: usize) -> SlackConfig {
    if !matches!(slack.case(), Ok(SlackCase::Three)) || total_iters == 0 {
        return *slack;
    }
    let t = total_iters as f64;
    let mut next = *slack;
    if slack.decay_plus {
        next.h_plus = slack.h_plus - slack.h_plus / t;
    }
    if slack.decay_minus {
        next.h_minus = slack.h_minus - slack.h_minus / t;
    }
    next
}

fn linear_slack(initial: &SlackConfig, iter: usize, total_iters: usize) -> SlackConfig {
    let frac = (1.0 - (iter + 1) as f64 / total_iters as f64).max(0.0);
    let mut next = *initial;
    if initial.decay_plus {
        next.h_plus = initial.h_plus * frac;
    }
    if initial.decay_minus {
        next.h_minus = initial.h_minus * frac;
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdateMode {
    RewardOnly,
    /// Cost descent on the given constraint.
    SafetyOnly(usize),
    /// Combined reward/cost step against the given constraint.
    Projection(usize),
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateMode::RewardOnly => write!(f, "reward_only"),
            UpdateMode::SafetyOnly(i) => write!(f, "safety_only:{i}"),
            UpdateMode::Projection(i) => write!(f, "projection:{i}"),
        }
    }
}

impl FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "reward_only" {
            return Ok(UpdateMode::RewardOnly);
        }
        let (kind, idx) = s.split_once(':').ok_or_else(|| format!("bad mode {s:?}"))?;
        let idx: usize = idx.parse().map_err(|_| format!("bad constraint index in {s:?}"))?;
        match kind {
            "safety_only" => Ok(UpdateMode::SafetyOnly(idx)),
            "projection" => Ok(UpdateMode::Projection(idx)),
            _ => Err(format!("bad mode {s:?}")),
        }
    }
}

fn normalized_violation(value: f64, limit: f64) -> f64 {
    (value - limit) / limit.abs().max(1.0)
}

/// Index in `candidates` with the largest normalized violation; ties go to
/// the lowest index.
fn most_violated(costs: &[f64], limits: &[f64], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    candidates.fold(None, |best: Option<usize>, i| match best {
        Some(j) if normalized_violation(costs[j], limits[j]) >= normalized_violation(costs[i], limits[i]) => Some(j),
        _ => Some(i),
    })
}

/// Slack-banded mode decision.
pub fn select_mode(costs: &[f64], limits: &[f64], slack: &SlackConfig) -> Result<UpdateMode> {
    if costs.len() != limits.len() || costs.is_empty() {
        return Err(TrainError::InvalidConfig(format!("{} cost estimates for {} limits", costs.len(), limits.len())));
    }
    let n = costs.len();
    let pick = |pred: &dyn Fn(usize) -> bool| most_violated(costs, limits, (0..n).filter(|&i| pred(i)));
    let mode = match slack.case()? {
        SlackCase::One => match pick(&|i| costs[i] >= limits[i]) {
            Some(i) => UpdateMode::Projection(i),
            None => UpdateMode::RewardOnly,
        },
        SlackCase::Two => match pick(&|i| costs[i] >= limits[i]) {
            Some(i) => UpdateMode::SafetyOnly(i),
            None => UpdateMode::Projection(pick(&|_| true).unwrap_or(0)),
        },
        SlackCase::Three => {
            let upper = |i: usize| limits[i] + slack.h_plus;
            let lower = |i: usize| limits[i] + slack.h_minus;
            if let Some(i) = pick(&|i| costs[i] > upper(i)) {
                UpdateMode::SafetyOnly(i)
            } else if let Some(i) = pick(&|i| costs[i] >= lower(i) && costs[i] <= upper(i)) {
                UpdateMode::Projection(i)
            } else {
                UpdateMode::RewardOnly
            }
        }
    };
    Ok(mode)
}

/// CRPO decision: cost descent on any strict violation, reward otherwise.
pub fn crpo_mode(costs: &[f64], limits: &[f64]) -> UpdateMode {
    match most_violated(costs, limits, (0..costs.len()).filter(|&i| costs[i] > limits[i])) {
        Some(i) => UpdateMode::SafetyOnly(i),
        None => UpdateMode::RewardOnly,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pcrpo,
    Crpo,
    Scrpo,
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pcrpo" => Ok(Algorithm::Pcrpo),
            "crpo" => Ok(Algorithm::Crpo),
            "scrpo" => Ok(Algorithm::Scrpo),
            _ => Err(format!("unknown algorithm {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Linear-solve Q-functions.
    Exact,
    /// On-policy TD(0) with `k_td` updates per channel.
    Td,
}

/// Which per-channel gradients enter the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientSource {
    /// `(1−γ)⁻¹·Q̂` tables (softmax natural gradient).
    Natural,
    /// `Σ_s m(s) Σ_a π Q̂ ∇log π` with the exact occupancy.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub total_iters: usize,
    pub eta: f64,
    pub kl_threshold: f64,
    pub max_halvings: u32,
    pub eval_mode: EvalMode,
    pub k_td: usize,
    pub td_lr0: f64,
    pub gradient_source: GradientSource,
    pub normalize_gradients: bool,
    /// Subtract the per-state policy average from natural-gradient tables
    /// before they are combined. Leaves single-channel steps unchanged.
    pub center_advantages: bool,
    pub weights: CombineWeights,
    /// Pure reward iterations before constraint handling engages.
    pub safety_warmup_iters: usize,
    /// Initial logits are uniform in `[-init_logit_scale, init_logit_scale]`.
    pub init_logit_scale: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Pcrpo,
            total_iters: 200,
            eta: 1.0,
            kl_threshold: 0.01,
            max_halvings: 20,
            eval_mode: EvalMode::Exact,
            k_td: 200_000,
            td_lr0: TdConfig::DEFAULT_LR0,
            gradient_source: GradientSource::Natural,
            normalize_gradients: true,
            center_advantages: true,
            weights: CombineWeights::default(),
            safety_warmup_iters: 0,
            init_logit_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.kl_threshold > 0.0) {
            return bad(format!("kl_threshold must be positive, got {}", self.kl_threshold));
        }
        if self.eval_mode == EvalMode::Td && self.k_td == 0 {
            return bad("k_td must be at least 1".into());
        }
        if !(self.init_logit_scale >= 0.0) {
            return bad("init_logit_scale must be nonnegative".into());
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// One logged training iteration. Values are the estimates the mode
/// decision used, taken before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub v_r: f64,
    pub v_c: Vec<f64>,
    pub mode: UpdateMode,
    pub theta_deg: Option<f64>,
    pub kl: f64,
    pub h_plus: f64,
    pub h_minus: f64,
    /// Fraction of `η` accepted by the KL backtracking; zero marks a stall.
    pub step_scale: f64,
}

/// Outcome of KL backtracking.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedStep {
    pub policy: SoftmaxPolicy,
    pub scale: f64,
    pub kl: f64,
}

/// Try `w + η·s·d` for `s = 1, ½, ¼, …` (at most `max_halvings` halvings)
/// and keep the first candidate whose KL is within `threshold`. If none
/// qualifies the step is dropped.
pub fn kl_backtrack(
    policy: &SoftmaxPolicy,
    direction: &[f64],
    eta: f64,
    threshold: f64,
    state_weights: &[f64],
    max_halvings: u32,
) -> Result<AcceptedStep> {
    let mut scale = 1.0;
    for _ in 0..=max_halvings {
        let candidate = policy::direction_update(policy, direction, eta * scale)?;
        let kl = kl_divergence(policy, &candidate, state_weights)?;
        if kl <= threshold {
            return Ok(AcceptedStep { policy: candidate, scale, kl });
        }
        scale *= 0.5;
    }
    Ok(AcceptedStep { policy: policy.clone(), scale: 0.0, kl: 0.0 })
}

/// SplitMix64 finalizer, used to derive independent per-call seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initial policy for a run; depends only on the config seed and scale.
pub fn initial_policy(config: &TrainerConfig, spec: &CmdpSpec) -> SoftmaxPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX, 0));
    SoftmaxPolicy::random(spec.n_states, spec.n_actions, config.init_logit_scale, &mut rng)
}

/// Mutable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState<'a> {
    pub spec: &'a CmdpSpec,
    pub config: &'a TrainerConfig,
    pub policy: SoftmaxPolicy,
    /// Slack bounds as of the last decision.
    pub slack: SlackConfig,
    pub initial_slack: SlackConfig,
    pub iter: usize,
}

impl<'a> TrainState<'a> {
    pub fn new(spec: &'a CmdpSpec, config: &'a TrainerConfig, slack: SlackConfig) -> Result<Self> {
        config.validate()?;
        spec.ensure_valid()?;
        slack.case()?;
        Ok(Self { spec, config, policy: initial_policy(config, spec), slack, initial_slack: slack, iter: 0 })
    }

    fn evaluate(&self) -> Result<(Vec<QEstimate>, ValueEstimates)> {
        let qhats = self
            .spec
            .channels()
            .into_iter()
            .enumerate()
            .map(|(k, channel)| match self.config.eval_mode {
                EvalMode::Exact => QEstimate::exact(self.spec, &self.policy, channel),
                EvalMode::Td => {
                    let cfg = TdConfig {
                        k_td: self.config.k_td,
                        lr0: self.config.td_lr0,
                        seed: mix_seed(self.config.seed, self.iter as u64, k as u64),
                        horizon: None,
                    };
                    td_q_estimate(self.spec, &self.policy, channel, &cfg)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let values = evaluation::estimate_values(self.spec, &self.policy, &qhats)?;
        Ok((qhats, values))
    }

    fn advance_slack(&mut self) {
        let total = self.config.total_iters.max(1);
        self.slack = match self.initial_slack.decay_law {
            DecayLaw::Geometric => decay_slack(&self.slack, total),
            DecayLaw::LinearToZero if matches!(self.initial_slack.case(), Ok(SlackCase::Three)) => {
                linear_slack(&self.initial_slack, self.iter, total)
            }
            DecayLaw::LinearToZero => self.slack,
        };
    }

    /// Ascent direction for one channel's value (negated for descent by the caller).
    fn channel_gradient(&self, q: &QTable, centered: bool) -> Result<Vec<f64>> {
        match self.config.gradient_source {
            GradientSource::Natural => {
                let mut g = policy::natural_direction(q, self.spec.gamma);
                if centered {
                    let na = self.spec.n_actions;
                    for s in 0..self.spec.n_states {
                        let probs = self.policy.action_probs(s);
                        let row = &mut g[s * na..(s + 1) * na];
                        let mean: f64 = probs.iter().zip(row.iter()).map(|(p, x)| p * x).sum();
                        row.iter_mut().for_each(|x| *x -= mean);
                    }
                }
                Ok(g)
            }
            GradientSource::Vanilla => {
                Ok(policy::value_gradient(self.spec, &self.policy, q, GradientEstimator::Exact)?)
            }
        }
    }

    fn step_with(&mut self, algorithm: Algorithm) -> Result<TrainRecord> {
        let (qhats, values) = self.evaluate()?;
        let limits = &self.spec.limits;
        let warming_up = self.iter < self.config.safety_warmup_iters;
        let mode = if warming_up {
            UpdateMode::RewardOnly
        } else {
            match algorithm {
                Algorithm::Crpo => crpo_mode(&values.costs, limits),
                Algorithm::Pcrpo | Algorithm::Scrpo => {
                    self.advance_slack();
                    select_mode(&values.costs, limits, &self.slack)?
                }
            }
        };

        let mut theta_deg = None;
        let direction = match mode {
            UpdateMode::RewardOnly => self.channel_gradient(&qhats[0].table, false)?,
            UpdateMode::SafetyOnly(i) => {
                self.channel_gradient(&qhats[i + 1].table, false)?.into_iter().map(|x| -x).collect()
            }
            UpdateMode::Projection(i) => {
                let center = self.config.center_advantages;
                let g_r = self.channel_gradient(&qhats[0].table, center)?;
                let g_c: Vec<f64> =
                    self.channel_gradient(&qhats[i + 1].table, center)?.into_iter().map(|x| -x).collect();
                let pair = GradientPair::with_weights(g_r, g_c, self.config.weights)?;
                match gradmanip::manipulate(&pair, self.config.normalize_gradients) {
                    Ok(m) => {
                        theta_deg = Some(m.theta_deg);
                        if algorithm == Algorithm::Scrpo && m.cos_theta < 0.0 {
                            let work = if self.config.normalize_gradients { pair.normalized()? } else { pair };
                            gradmanip::surgery_combine(&work)?
                        } else {
                            m.direction
                        }
                    }
                    // Both channels flat: nothing to follow.
                    Err(GradError::ZeroGradient) => vec![0.0; self.policy.dim()],
                    Err(e) => return Err(e.into()),
                }
            }
        };

        let weights = self.spec.state_distribution(&self.policy)?;
        let step = kl_backtrack(
            &self.policy,
            &direction,
            self.config.eta,
            self.config.kl_threshold,
            &weights,
            self.config.max_halvings,
        )?;
        let record = TrainRecord {
            iter: self.iter,
            v_r: values.reward,
            v_c: values.costs,
            mode,
            theta_deg,
            kl: step.kl,
            h_plus: self.slack.h_plus,
            h_minus: self.slack.h_minus,
            step_scale: step.scale,
        };
        self.policy = step.policy;
        self.iter += 1;
        Ok(record)
    }
}

/// One iteration of the soft-switching algorithm.
pub fn pcrpo_step(state: &mut TrainState<'_>) -> Result<TrainRecord> {
    state.step_with(Algorithm::Pcrpo)
}

/// One CRPO iteration: reward ascent unless a constraint is violated.
pub fn crpo_step(state: &mut TrainState<'_>) -> Result<TrainRecord> {
    state.step_with(Algorithm::Crpo)
}

/// One SCRPO iteration: as [`pcrpo_step`] but with one-sided gradient surgery
/// on conflict.
pub fn scrpo_step(state: &mut TrainState<'_>) -> Result<TrainRecord> {
    state.step_with(Algorithm::Scrpo)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub policy: SoftmaxPolicy,
}

/// Run `config.total_iters` iterations of the configured algorithm.
pub fn train(config: &TrainerConfig, spec: &CmdpSpec, slack: SlackConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::new(spec, config, slack)?;
    let mut records = Vec::with_capacity(config.total_iters);
    for _ in 0..config.total_iters {
        let record = match config.algorithm {
            Algorithm::Pcrpo => pcrpo_step(&mut state)?,
            Algorithm::Crpo => crpo_step(&mut state)?,
            Algorithm::Scrpo => scrpo_step(&mut state)?,
        };
        records.push(record);
    }
    Ok(TrainOutcome { records, policy: state.policy })
}

/// Number of consecutive iterations whose modes differ.
pub fn mode_flip_count(records: &[TrainRecord]) -> usize {
    records.windows(2).filter(|w| w[0].mode != w[1].mode).count()
}

/// Mode the decision rule assigns to a logged record.
pub fn expected_mode(
    algorithm: Algorithm,
    record: &TrainRecord,
    limits: &[f64],
    warmup_iters: usize,
) -> Result<UpdateMode> {
    if record.iter < warmup_iters {
        return Ok(UpdateMode::RewardOnly);
    }
    match algorithm {
        Algorithm::Crpo => Ok(crpo_mode(&record.v_c, limits)),
        Algorithm::Pcrpo | Algorithm::Scrpo => {
            let slack = SlackConfig { h_plus: record.h_plus, h_minus: record.h_minus, ..SlackConfig::case_one() };
            select_mode(&record.v_c, limits, &slack)
        }
    }
}

/// Mean of `v_r` and of each `v_c` over the last `window` records.
pub fn final_window_means(records: &[TrainRecord], window: usize) -> Option<(f64, Vec<f64>)> {
    let tail = &records[records.len().saturating_sub(window)..];
    let first = tail.first()?;
    let n = tail.len() as f64;
    let v_r = tail.iter().map(|r| r.v_r).sum::<f64>() / n;
    let v_c = (0..first.v_c.len()).map(|i| tail.iter().map(|r| r.v_c[i]).sum::<f64>() / n).collect();
    Some((v_r, v_c))
}
