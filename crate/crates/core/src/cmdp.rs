//! Finite constrained MDPs: the model, two environment builders, trajectory
//! sampling and exact (linear-solve) value oracles.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::SoftmaxPolicy;

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmdpError {
    #[error("invalid CMDP: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("Bellman system is singular")]
    SingularSystem,
    #[error("channel {0} does not exist in this CMDP")]
    NoSuchChannel(Channel),
    #[error("policy shape {policy:?} does not match CMDP shape {spec:?}")]
    ShapeMismatch { policy: (usize, usize), spec: (usize, usize) },
    #[error("bad geometry: {0}")]
    BadGeometry(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("malformed CMDP document: {0}")]
    Parse(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, CmdpError>;

/// Which per-step signal a value or Q-function is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Reward,
    Cost(usize),
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Reward => write!(f, "reward"),
            Channel::Cost(i) => write!(f, "cost{i}"),
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "reward" {
            return Ok(Channel::Reward);
        }
        s.strip_prefix("cost")
            .and_then(|i| if i.is_empty() { Some(0) } else { i.parse().ok() })
            .map(Channel::Cost)
            .ok_or_else(|| format!("unknown channel {s:?}, expected reward or cost<i>"))
    }
}

/// A single problem found by [`CmdpSpec::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    GammaOutOfRange(f64),
    NonFinite(String),
    NegativeProbability { state: usize, action: usize, next: usize, value: f64 },
    RowSum { state: usize, action: usize, sum: f64 },
    NegativeInitial { state: usize, value: f64 },
    InitialSum(f64),
    ChannelCount { costs: usize, limits: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(m) => write!(f, "shape: {m}"),
            Violation::GammaOutOfRange(g) => write!(f, "gamma {g} not in [0, 1)"),
            Violation::NonFinite(w) => write!(f, "non-finite value in {w}"),
            Violation::NegativeProbability { state, action, next, value } => {
                write!(f, "P[{state}][{action}][{next}] = {value} is negative")
            }
            Violation::RowSum { state, action, sum } => {
                write!(f, "P[{state}][{action}] sums to {sum}")
            }
            Violation::NegativeInitial { state, value } => write!(f, "rho[{state}] = {value} is negative"),
            Violation::InitialSum(s) => write!(f, "rho sums to {s}"),
            Violation::ChannelCount { costs, limits } => {
                write!(f, "{costs} cost channels but {limits} limits")
            }
        }
    }
}

/// A finite CMDP with one reward and `n ≥ 1` cost channels.
///
/// `transition[s][a][s']`, `reward[s][a]` and `costs[i][s][a]` are stored as
/// explicit nested arrays so the JSON document is readable by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub costs: Vec<Vec<Vec<f64>>>,
    pub limits: Vec<f64>,
    pub gamma: f64,
    pub rho: Vec<f64>,
}

impl CmdpSpec {
    pub fn n_costs(&self) -> usize {
        self.costs.len()
    }

    /// Checks every structural invariant and returns all violations found.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            out.push(Violation::Shape(format!("{ns} states, {na} actions")));
            return Err(out);
        }
        if !(0.0..1.0).contains(&self.gamma) {
            out.push(Violation::GammaOutOfRange(self.gamma));
        }
        if self.costs.is_empty() || self.costs.len() != self.limits.len() {
            out.push(Violation::ChannelCount { costs: self.costs.len(), limits: self.limits.len() });
        }
        if self.limits.iter().any(|b| !b.is_finite()) {
            out.push(Violation::NonFinite("limits".into()));
        }

        if self.transition.len() != ns {
            out.push(Violation::Shape(format!("transition has {} rows", self.transition.len())));
        } else {
            for (s, per_action) in self.transition.iter().enumerate() {
                if per_action.len() != na {
                    out.push(Violation::Shape(format!("transition[{s}] has {} actions", per_action.len())));
                    continue;
                }
                for (a, row) in per_action.iter().enumerate() {
                    if row.len() != ns {
                        out.push(Violation::Shape(format!("transition[{s}][{a}] has {} entries", row.len())));
                        continue;
                    }
                    for (next, &p) in row.iter().enumerate() {
                        if !p.is_finite() {
                            out.push(Violation::NonFinite(format!("transition[{s}][{a}][{next}]")));
                        } else if p < 0.0 {
                            out.push(Violation::NegativeProbability { state: s, action: a, next, value: p });
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > PROB_TOL {
                        out.push(Violation::RowSum { state: s, action: a, sum });
                    }
                }
            }
        }

        let mut check_table = |name: String, table: &Vec<Vec<f64>>| {
            if table.len() != ns || table.iter().any(|row| row.len() != na) {
                out.push(Violation::Shape(format!("{name} is not {ns}x{na}")));
            } else if table.iter().flatten().any(|x| !x.is_finite()) {
                out.push(Violation::NonFinite(name));
            }
        };
        check_table("reward".into(), &self.reward);
        for (i, c) in self.costs.iter().enumerate() {
            check_table(format!("costs[{i}]"), c);
        }

        if self.rho.len() != ns {
            out.push(Violation::Shape(format!("rho has {} entries", self.rho.len())));
        } else {
            for (s, &p) in self.rho.iter().enumerate() {
                if !(p >= 0.0) {
                    out.push(Violation::NegativeInitial { state: s, value: p });
                }
            }
            let sum: f64 = self.rho.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                out.push(Violation::InitialSum(sum));
            }
        }

        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        self.validate().map_err(CmdpError::Invalid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("CmdpSpec serializes")
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| CmdpError::Parse(e.to_string()))?;
        spec.ensure_valid()?;
        Ok(spec)
    }

    /// Per-step signal table for a channel.
    pub fn signal(&self, channel: Channel) -> Result<&Vec<Vec<f64>>> {
        match channel {
            Channel::Reward => Ok(&self.reward),
            Channel::Cost(i) => self.costs.get(i).ok_or(CmdpError::NoSuchChannel(channel)),
        }
    }

    /// Reward first, then every cost channel in order.
    pub fn channels(&self) -> Vec<Channel> {
        std::iter::once(Channel::Reward).chain((0..self.n_costs()).map(Channel::Cost)).collect()
    }

    fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(CmdpError::ShapeMismatch {
                policy: (policy.n_states(), policy.n_actions()),
                spec: (self.n_states, self.n_actions),
            });
        }
        Ok(())
    }

    /// State-to-state transition matrix under `policy`.
    fn policy_transition(&self, probs: &[Vec<f64>]) -> DMatrix<f64> {
        let ns = self.n_states;
        let mut m = DMatrix::zeros(ns, ns);
        for s in 0..ns {
            for (a, &pa) in probs[s].iter().enumerate() {
                for (next, &p) in self.transition[s][a].iter().enumerate() {
                    m[(s, next)] += pa * p;
                }
            }
        }
        m
    }

    fn bellman_matrix(&self, probs: &[Vec<f64>]) -> DMatrix<f64> {
        let ns = self.n_states;
        DMatrix::identity(ns, ns) - self.policy_transition(probs) * self.gamma
    }

    /// Exact state values `V(s)` for a channel, from `(I − γP_π)V = R_π`.
    pub fn state_values(&self, policy: &SoftmaxPolicy, channel: Channel) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let signal = self.signal(channel)?;
        let probs = policy.probability_table();
        let rhs =
            DVector::from_fn(self.n_states, |s, _| probs[s].iter().zip(&signal[s]).map(|(p, r)| p * r).sum::<f64>());
        let v = self.bellman_matrix(&probs).lu().solve(&rhs).ok_or(CmdpError::SingularSystem)?;
        Ok(v.iter().copied().collect())
    }

    /// Unnormalized discounted occupancy `m(s) = Σ_t γ^t Pr(s_t = s)` from
    /// `rho`. Multiply by `1 − γ` for a distribution.
    pub fn discounted_occupancy(&self, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let probs = policy.probability_table();
        let rho = DVector::from_column_slice(&self.rho);
        let m = self.bellman_matrix(&probs).transpose().lu().solve(&rho).ok_or(CmdpError::SingularSystem)?;
        Ok(m.iter().copied().collect())
    }

    /// Discounted occupancy normalized to sum to one.
    pub fn state_distribution(&self, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
        let m = self.discounted_occupancy(policy)?;
        let total: f64 = m.iter().sum();
        Ok(m.iter().map(|x| x / total).collect())
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.rho, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        sample_categorical(&self.transition[state][action], rng)
    }
}

/// Index drawn from a probability vector by inverse CDF.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Exact `V^π(ρ)` for one channel.
pub fn exact_value(spec: &CmdpSpec, policy: &SoftmaxPolicy, channel: Channel) -> Result<f64> {
    let v = spec.state_values(policy, channel)?;
    Ok(spec.rho.iter().zip(&v).map(|(p, x)| p * x).sum())
}

/// Per-(state, action) table for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub channel: Channel,
    /// Row-major `values[s * n_actions + a]`.
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize, channel: Channel) -> Self {
        Self { n_states, n_actions, channel, values: vec![0.0; n_states * n_actions] }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Exact `Q(s,a) = R(s,a) + γ·Σ_s' P(s'|s,a)·V(s')`.
pub fn exact_q(spec: &CmdpSpec, policy: &SoftmaxPolicy, channel: Channel) -> Result<QTable> {
    let v = spec.state_values(policy, channel)?;
    let signal = spec.signal(channel)?;
    let mut q = QTable::zeros(spec.n_states, spec.n_actions, channel);
    for s in 0..spec.n_states {
        for a in 0..spec.n_actions {
            let future: f64 = spec.transition[s][a].iter().zip(&v).map(|(p, x)| p * x).sum();
            q.values[s * spec.n_actions + a] = signal[s][a] + spec.gamma * future;
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub horizon: usize,
}

impl Trajectory {
    /// `Σ_t γ^t x_t` for the chosen channel.
    pub fn discounted_return(&self, gamma: f64, channel: Channel) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for step in &self.steps {
            let x = match channel {
                Channel::Reward => step.reward,
                Channel::Cost(i) => step.costs[i],
            };
            total += discount * x;
            discount *= gamma;
        }
        total
    }
}

/// Smallest horizon `H` with `γ^H / (1 − γ) < 1e−3`.
pub fn default_horizon(gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    let target = 1e-3 * (1.0 - gamma);
    ((target.ln() / gamma.ln()).floor() as usize + 1).max(1)
}

/// Roll out `policy` for `horizon` steps starting from `ρ`.
pub fn sample_trajectory(spec: &CmdpSpec, policy: &SoftmaxPolicy, horizon: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_trajectory_with(spec, policy, horizon, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    spec: &CmdpSpec,
    policy: &SoftmaxPolicy,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(CmdpError::ZeroHorizon);
    }
    spec.check_policy(policy)?;
    let probs = policy.probability_table();
    let mut steps = Vec::with_capacity(horizon);
    let mut state = spec.sample_state(rng);
    for _ in 0..horizon {
        let action = sample_categorical(&probs[state], rng);
        let next_state = spec.sample_next(state, action, rng);
        steps.push(Step {
            state,
            action,
            reward: spec.reward[state][action],
            costs: spec.costs.iter().map(|c| c[state][action]).collect(),
            next_state,
        });
        state = next_state;
    }
    Ok(Trajectory { steps, horizon })
}

/// Hazard gridworld parameters. Cells are `(x, y)`; actions are
/// up, down, left, right. Moves off the grid leave the agent in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldConfig {
    pub width: usize,
    pub height: usize,
    pub hazards: Vec<(usize, usize)>,
    pub goal: (usize, usize),
    #[serde(default)]
    pub start: (usize, usize),
    /// Probability that the chosen move is replaced by a uniformly random one.
    #[serde(default)]
    pub slip: f64,
    pub gamma: f64,
    pub cost_limit: f64,
}

pub const GRID_ACTIONS: usize = 4;

/// Gridworld CMDP: reward 1 for every step spent in the absorbing goal, cost
/// 1 for every step spent on a hazard cell.
pub fn build_gridworld(cfg: &GridworldConfig) -> Result<CmdpSpec> {
    let (w, h) = (cfg.width, cfg.height);
    if w == 0 || h == 0 {
        return Err(CmdpError::BadGeometry(format!("{w}x{h} grid")));
    }
    let inside = |(x, y): (usize, usize)| x < w && y < h;
    if !inside(cfg.goal) || !inside(cfg.start) || !cfg.hazards.iter().all(|&c| inside(c)) {
        return Err(CmdpError::BadGeometry("cell outside the grid".into()));
    }
    if cfg.hazards.contains(&cfg.goal) {
        return Err(CmdpError::BadGeometry("goal is a hazard".into()));
    }
    if !(0.0..1.0).contains(&cfg.slip) {
        return Err(CmdpError::BadGeometry(format!("slip {} not in [0, 1)", cfg.slip)));
    }
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(CmdpError::BadGeometry(format!("gamma {} not in [0, 1)", cfg.gamma)));
    }

    let index = |(x, y): (usize, usize)| y * w + x;
    let ns = w * h;
    let goal = index(cfg.goal);
    let moved = |x: usize, y: usize, a: usize| -> usize {
        let (nx, ny) = match a {
            0 if y + 1 < h => (x, y + 1),
            1 if y > 0 => (x, y - 1),
            2 if x > 0 => (x - 1, y),
            3 if x + 1 < w => (x + 1, y),
            _ => (x, y),
        };
        index((nx, ny))
    };

    let mut transition = vec![vec![vec![0.0; ns]; GRID_ACTIONS]; ns];
    for y in 0..h {
        for x in 0..w {
            let s = index((x, y));
            for a in 0..GRID_ACTIONS {
                let row = &mut transition[s][a];
                if s == goal {
                    row[s] = 1.0;
                    continue;
                }
                row[moved(x, y, a)] += 1.0 - cfg.slip;
                for b in 0..GRID_ACTIONS {
                    row[moved(x, y, b)] += cfg.slip / GRID_ACTIONS as f64;
                }
            }
        }
    }
    let mut reward = vec![vec![0.0; GRID_ACTIONS]; ns];
    reward[goal] = vec![1.0; GRID_ACTIONS];
    let mut cost = vec![vec![0.0; GRID_ACTIONS]; ns];
    for &c in &cfg.hazards {
        cost[index(c)] = vec![1.0; GRID_ACTIONS];
    }
    let mut rho = vec![0.0; ns];
    rho[index(cfg.start)] = 1.0;

    let spec = CmdpSpec {
        n_states: ns,
        n_actions: GRID_ACTIONS,
        transition,
        reward,
        costs: vec![cost],
        limits: vec![cfg.cost_limit],
        gamma: cfg.gamma,
        rho,
    };
    spec.ensure_valid()?;
    Ok(spec)
}

/// Discretized point mass driven forward on a ring: reward is proportional
/// to the current velocity, cost to the squared thrust.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassConfig {
    pub n_positions: usize,
    pub n_velocities: usize,
    pub action_levels: usize,
    pub alpha_r: f64,
    pub alpha_c: f64,
    pub gamma: f64,
    pub cost_limit: f64,
}

/// Velocity index `v` maps to speed `v/(V−1)` and action `a` to thrust
/// `u = a/(A−1)`. Each step the velocity rises by one with probability `u`,
/// otherwise drops by one with probability `(1−u)/2` (drag), and the position
/// advances by the velocity index modulo the ring length.
pub fn build_pointmass_velocity(cfg: &PointMassConfig) -> Result<CmdpSpec> {
    if cfg.n_positions < 2 || cfg.n_velocities < 2 || cfg.action_levels < 2 {
        return Err(CmdpError::BadGeometry("all lattice counts must be at least 2".into()));
    }
    if cfg.alpha_r < 0.0 || cfg.alpha_c < 0.0 {
        return Err(CmdpError::BadGeometry("reward and cost scales must be nonnegative".into()));
    }
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(CmdpError::BadGeometry(format!("gamma {} not in [0, 1)", cfg.gamma)));
    }
    let (np, nv, na) = (cfg.n_positions, cfg.n_velocities, cfg.action_levels);
    let ns = np * nv;
    let index = |p: usize, v: usize| v * np + p;
    let thrust = |a: usize| a as f64 / (na - 1) as f64;
    let speed = |v: usize| v as f64 / (nv - 1) as f64;

    let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
    let mut reward = vec![vec![0.0; na]; ns];
    let mut cost = vec![vec![0.0; na]; ns];
    for v in 0..nv {
        for p in 0..np {
            let s = index(p, v);
            let next_p = (p + v) % np;
            for a in 0..na {
                let u = thrust(a);
                let faster = (v + 1).min(nv - 1);
                let slower = v.saturating_sub(1);
                let row = &mut transition[s][a];
                row[index(next_p, faster)] += u;
                row[index(next_p, slower)] += (1.0 - u) / 2.0;
                row[index(next_p, v)] += (1.0 - u) / 2.0;
                reward[s][a] = cfg.alpha_r * speed(v);
                cost[s][a] = cfg.alpha_c * u * u;
            }
        }
    }
    let mut rho = vec![0.0; ns];
    rho[index(0, 0)] = 1.0;
    let spec = CmdpSpec {
        n_states: ns,
        n_actions: na,
        transition,
        reward,
        costs: vec![cost],
        limits: vec![cfg.cost_limit],
        gamma: cfg.gamma,
        rho,
    };
    spec.ensure_valid()?;
    Ok(spec)
}

/// Random dense CMDP: transition rows and `ρ` from normalized exponential
/// draws, reward and costs uniform in `[0, 1)`.
pub fn random_spec<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    n_costs: usize,
    gamma: f64,
) -> CmdpSpec {
    let simplex = |n: usize, rng: &mut R| {
        let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect::<Vec<_>>()
    };
    let transition = (0..n_states).map(|_| (0..n_actions).map(|_| simplex(n_states, rng)).collect()).collect();
    let rho = simplex(n_states, rng);
    let table = |rng: &mut R| -> Vec<Vec<f64>> {
        (0..n_states).map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect()).collect()
    };
    let reward = table(rng);
    let costs = (0..n_costs).map(|_| table(rng)).collect();
    CmdpSpec { n_states, n_actions, transition, reward, costs, limits: vec![1.0; n_costs], gamma, rho }
}
