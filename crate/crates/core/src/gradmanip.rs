//! Gradient projection and conflict-aware combination of a reward gradient
//! with one cost gradient.
//!
//! When the two gradients conflict (negative inner product) each is projected
//! onto the normal plane of the other and the projections are averaged.
//! Otherwise the raw gradients are averaged. The module also carries the
//! one-sided gradient-surgery variant used by the SCRPO baseline and a
//! numerical check of the one-step improvement bounds on smooth quadratics.
//!
//! Gradients follow the ascent convention: the combined direction `d` is
//! meant to be added to the parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// `(1 − √17)/4`. For unit-norm pairs with `cos θ` in `[this, 0)` the
/// projected combination is at least as long as the surgery combination;
/// below it the surgery combination is longer.
pub const SURGERY_DOMINANCE_COS: f64 = -0.780_776_406_404_415_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("gradient norm is below {ZERO_NORM:e}")]
    ZeroGradient,
    #[error("gradient dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("gradients must have at least one entry")]
    Empty,
    #[error("step size {eta} exceeds 1/L = {limit}")]
    StepTooLarge { eta: f64, limit: f64 },
    #[error("invalid combination weights: {0}")]
    InvalidWeights(String),
    #[error("invalid test problem: {0}")]
    InvalidProblem(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], beta: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| alpha * a + beta * b).collect()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GradError::DimensionMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(GradError::Empty);
    }
    Ok(())
}

/// Convex weights for the two combination rules.
///
/// `reward`/`cost` weight the plain average used when the gradients agree;
/// `reward_projected`/`cost_projected` weight the mutual projections used
/// when they conflict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombineWeights {
    pub reward: f64,
    pub cost: f64,
    pub reward_projected: f64,
    pub cost_projected: f64,
}

impl Default for CombineWeights {
    fn default() -> Self {
        Self { reward: 0.5, cost: 0.5, reward_projected: 0.5, cost_projected: 0.5 }
    }
}

impl CombineWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.reward, self.cost, self.reward_projected, self.cost_projected];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GradError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        for (name, a, b) in
            [("aligned", self.reward, self.cost), ("projected", self.reward_projected, self.cost_projected)]
        {
            if ((a + b) - 1.0).abs() > 1e-9 {
                return Err(GradError::InvalidWeights(format!("{name} weights sum to {}, expected 1", a + b)));
            }
        }
        Ok(())
    }
}

/// A reward gradient and a cost gradient of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub weights: CombineWeights,
}

impl GradientPair {
    /// Pair with the default 0.5/0.5 weights.
    pub fn new(reward: Vec<f64>, cost: Vec<f64>) -> Result<Self> {
        Self::with_weights(reward, cost, CombineWeights::default())
    }

    pub fn with_weights(reward: Vec<f64>, cost: Vec<f64>, weights: CombineWeights) -> Result<Self> {
        check_dims(&reward, &cost)?;
        weights.validate()?;
        Ok(Self { reward, cost, weights })
    }

    pub fn dim(&self) -> usize {
        self.reward.len()
    }

    /// Both gradients rescaled to unit norm; weights are kept.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self { reward: unit(&self.reward)?, cost: unit(&self.cost)?, weights: self.weights })
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= ZERO_NORM {
        return Err(GradError::ZeroGradient);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineMode {
    ConflictProjected,
    AlignedAveraged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulationResult {
    pub direction: Vec<f64>,
    pub cos_theta: f64,
    pub theta_deg: f64,
    pub mode: CombineMode,
    /// `(λ_r, λ_c)` with `direction = λ_r·g_r + λ_c·g_c` for the raw
    /// (un-normalized) input gradients.
    pub effective_weights: (f64, f64),
}

/// Cosine of the angle between two nonzero vectors, clamped to `[-1, 1]`.
pub fn cos_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(GradError::ZeroGradient);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn theta_deg(cos_theta: f64) -> f64 {
    cos_theta.clamp(-1.0, 1.0).acos().to_degrees()
}

/// `a` minus its component along `b`.
pub fn project_onto_normal_plane(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let nb2 = dot(b, b);
    if nb2.sqrt() <= ZERO_NORM {
        return Err(GradError::ZeroGradient);
    }
    Ok(axpy(1.0, a, -dot(a, b) / nb2, b))
}

/// Weighted sum of the mutual normal-plane projections,
/// `β_r⁺·g_r⁺ + β_c⁺·g_c⁺`.
///
/// This does not check the sign of the inner product; [`manipulate`] is the
/// dispatching entry point.
pub fn combine_conflicting(pair: &GradientPair) -> Result<Vec<f64>> {
    let reward_plus = project_onto_normal_plane(&pair.reward, &pair.cost)?;
    let cost_plus = project_onto_normal_plane(&pair.cost, &pair.reward)?;
    let w = pair.weights;
    Ok(axpy(w.reward_projected, &reward_plus, w.cost_projected, &cost_plus))
}

/// `β_r·g_r + β_c·g_c`.
pub fn combine_aligned(pair: &GradientPair) -> Result<Vec<f64>> {
    check_dims(&pair.reward, &pair.cost)?;
    let w = pair.weights;
    Ok(axpy(w.reward, &pair.reward, w.cost, &pair.cost))
}

/// Combined update direction for a reward/cost gradient pair.
///
/// Conflicting pairs (`cos θ < 0`) take the projected combination, all others
/// the weighted average. If exactly one gradient vanishes the other is
/// returned times its aligned weight. With `normalize` both gradients are
/// rescaled to unit norm before combining.
pub fn manipulate(pair: &GradientPair, normalize: bool) -> Result<ManipulationResult> {
    check_dims(&pair.reward, &pair.cost)?;
    let (nr, nc) = (norm(&pair.reward), norm(&pair.cost));
    let w = pair.weights;
    let scale = |n: f64| if normalize { 1.0 / n } else { 1.0 };

    match (nr > ZERO_NORM, nc > ZERO_NORM) {
        (false, false) => Err(GradError::ZeroGradient),
        (true, false) => {
            let lr = w.reward * scale(nr);
            Ok(ManipulationResult {
                direction: pair.reward.iter().map(|x| lr * x).collect(),
                cos_theta: 0.0,
                theta_deg: 90.0,
                mode: CombineMode::AlignedAveraged,
                effective_weights: (lr, 0.0),
            })
        }
        (false, true) => {
            let lc = w.cost * scale(nc);
            Ok(ManipulationResult {
                direction: pair.cost.iter().map(|x| lc * x).collect(),
                cos_theta: 0.0,
                theta_deg: 90.0,
                mode: CombineMode::AlignedAveraged,
                effective_weights: (0.0, lc),
            })
        }
        (true, true) => {
            let work = if normalize { pair.normalized()? } else { pair.clone() };
            let cos_theta = cos_angle(&work.reward, &work.cost)?;
            let (direction, mode, (lr, lc)) = if cos_theta < 0.0 {
                let inner = dot(&work.reward, &work.cost);
                let (r2, c2) = (dot(&work.reward, &work.reward), dot(&work.cost, &work.cost));
                let lr = w.reward_projected - w.cost_projected * inner / r2;
                let lc = w.cost_projected - w.reward_projected * inner / c2;
                (combine_conflicting(&work)?, CombineMode::ConflictProjected, (lr, lc))
            } else {
                (combine_aligned(&work)?, CombineMode::AlignedAveraged, (w.reward, w.cost))
            };
            Ok(ManipulationResult {
                direction,
                cos_theta,
                theta_deg: theta_deg(cos_theta),
                mode,
                effective_weights: (lr * scale(nr), lc * scale(nc)),
            })
        }
    }
}

/// One-sided gradient surgery: `(g_r + g_c⁺)/2` on conflict, `(g_r + g_c)/2`
/// otherwise.
pub fn surgery_combine(pair: &GradientPair) -> Result<Vec<f64>> {
    let cos_theta = cos_angle(&pair.reward, &pair.cost)?;
    if cos_theta < 0.0 {
        let cost_plus = project_onto_normal_plane(&pair.cost, &pair.reward)?;
        Ok(axpy(0.5, &pair.reward, 0.5, &cost_plus))
    } else {
        Ok(axpy(0.5, &pair.reward, 0.5, &pair.cost))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormComparison {
    /// ‖g‖, the projected combination.
    pub projected: f64,
    /// ‖g⁻‖, the plain average.
    pub averaged: f64,
    /// ‖g′‖, the surgery combination.
    pub surgery: f64,
    pub projected_ge_averaged: bool,
    pub projected_ge_surgery: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormDominanceReport {
    pub cos_theta: f64,
    pub theta_deg: f64,
    pub raw: NormComparison,
    pub normalized: NormComparison,
}

fn compare_norms(pair: &GradientPair) -> Result<NormComparison> {
    let projected = norm(&combine_conflicting(pair)?);
    let averaged = norm(&combine_aligned(pair)?);
    let surgery = norm(&surgery_combine(pair)?);
    Ok(NormComparison {
        projected,
        averaged,
        surgery,
        projected_ge_averaged: projected >= averaged,
        projected_ge_surgery: projected >= surgery,
    })
}

/// Norms of the projected, averaged and surgery combinations, for both the
/// raw gradients and their unit-normalized versions.
pub fn norm_dominance_report(pair: &GradientPair) -> Result<NormDominanceReport> {
    let cos_theta = cos_angle(&pair.reward, &pair.cost)?;
    Ok(NormDominanceReport {
        cos_theta,
        theta_deg: theta_deg(cos_theta),
        raw: compare_norms(pair)?,
        normalized: compare_norms(&pair.normalized()?)?,
    })
}

fn step_limit_check(eta: f64, smoothness: f64) -> Result<()> {
    if !(smoothness > 0.0) || !smoothness.is_finite() {
        return Err(GradError::InvalidProblem(format!("smoothness constant {smoothness}")));
    }
    if !(eta > 0.0) {
        return Err(GradError::InvalidProblem(format!("step size {eta} must be positive")));
    }
    let limit = 1.0 / smoothness;
    if eta > limit * (1.0 + 1e-12) {
        return Err(GradError::StepTooLarge { eta, limit });
    }
    Ok(())
}

/// Lower and upper bounds on `f(w + η·d) − f(w)` for an `L`-smooth
/// `f = f_r + f_c` and `d` from [`manipulate`] with 0.5/0.5 weights and no
/// normalization.
///
/// Uses the expressions that follow from the quadratic expansion
/// `|f(w') − f(w) − ∇f·(w'−w)| ≤ L/2·‖w'−w‖²` together with `η ≤ 1/L`.
pub fn improvement_bounds(pair: &GradientPair, eta: f64, smoothness: f64) -> Result<(f64, f64)> {
    step_limit_check(eta, smoothness)?;
    let c = cos_angle(&pair.reward, &pair.cost)?;
    let (a, b) = (norm(&pair.reward), norm(&pair.cost));
    let (a2, b2, ab) = (a * a, b * b, a * b);
    if c < 0.0 {
        let c2 = c * c;
        let c3 = c2 * c;
        let lower = eta * (3.0 * a2 + 3.0 * b2 - 3.0 * c2 * (a2 + b2) - 2.0 * c3 * ab + 2.0 * c * ab) / 8.0;
        let upper = (5.0 * a2 + 5.0 * b2 - 5.0 * c2 * (a2 + b2) + 2.0 * c3 * ab - 2.0 * c * ab) / (8.0 * smoothness);
        Ok((lower, upper))
    } else {
        let lower = eta * (3.0 * a2 + 6.0 * c * ab + 3.0 * b2) / 8.0;
        let upper = (5.0 * a2 + 10.0 * c * ab + 5.0 * b2) / (8.0 * smoothness);
        Ok((lower, upper))
    }
}

/// `f(w) = f_r(w) + f_c(w)` with concave quadratics
/// `f_x(w) = ½·wᵀH_x·w + b_xᵀw`.
#[derive(Debug, Clone)]
pub struct QuadraticTestSpec {
    pub hess_reward: DMatrix<f64>,
    pub hess_cost: DMatrix<f64>,
    pub lin_reward: DVector<f64>,
    pub lin_cost: DVector<f64>,
    /// Smoothness constant; at least the spectral norm of `H_r + H_c`.
    pub smoothness: f64,
    pub start: DVector<f64>,
}

impl QuadraticTestSpec {
    pub fn dim(&self) -> usize {
        self.start.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(GradError::Empty);
        }
        let shapes_ok = self.hess_reward.shape() == (n, n)
            && self.hess_cost.shape() == (n, n)
            && self.lin_reward.len() == n
            && self.lin_cost.len() == n;
        if !shapes_ok {
            return Err(GradError::InvalidProblem("inconsistent shapes".into()));
        }
        let total = &self.hess_reward + &self.hess_cost;
        if (&total - total.transpose()).amax() > 1e-12 * (1.0 + total.amax()) {
            return Err(GradError::InvalidProblem("Hessian is not symmetric".into()));
        }
        let spectral = spectral_norm(&total);
        if self.smoothness < spectral * (1.0 - 1e-12) {
            return Err(GradError::InvalidProblem(format!("L = {} below spectral norm {spectral}", self.smoothness)));
        }
        Ok(())
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        let quad = |h: &DMatrix<f64>, b: &DVector<f64>| 0.5 * w.dot(&(h * w)) + b.dot(w);
        quad(&self.hess_reward, &self.lin_reward) + quad(&self.hess_cost, &self.lin_cost)
    }

    pub fn gradients(&self, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.hess_reward * w + &self.lin_reward, &self.hess_cost * w + &self.lin_cost)
    }

    /// Random instance whose gradients at the start point are `g_r`, `g_c`.
    ///
    /// Hessians are `−AᵀA` with Gaussian-like entries; `L` is the exact
    /// spectral norm of their sum.
    pub fn random_with_gradients<R: Rng + ?Sized>(rng: &mut R, g_reward: &[f64], g_cost: &[f64]) -> Result<Self> {
        check_dims(g_reward, g_cost)?;
        let n = g_reward.len();
        let neg_gram = |rng: &mut R| {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            -(a.transpose() * a) / n as f64
        };
        let hess_reward = neg_gram(rng);
        let hess_cost = neg_gram(rng);
        let start = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let lin_reward = DVector::from_column_slice(g_reward) - &hess_reward * &start;
        let lin_cost = DVector::from_column_slice(g_cost) - &hess_cost * &start;
        let smoothness = spectral_norm(&(&hess_reward + &hess_cost)).max(ZERO_NORM);
        Ok(Self { hess_reward, hess_cost, lin_reward, lin_cost, smoothness, start })
    }
}

fn spectral_norm(sym: &DMatrix<f64>) -> f64 {
    sym.clone().symmetric_eigenvalues().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremCheck {
    pub cos_theta: f64,
    pub delta_f: f64,
    pub lower: f64,
    pub upper: f64,
    /// `Δf ≥ lower − 1e−9`.
    pub pass: bool,
    pub upper_holds: bool,
}

/// Take one step `w1 = w0 + η·d` on a quadratic test problem and compare the
/// realized improvement with [`improvement_bounds`].
pub fn verify_theorem_bounds(spec: &QuadraticTestSpec, eta: f64) -> Result<TheoremCheck> {
    spec.validate()?;
    step_limit_check(eta, spec.smoothness)?;
    let (g_r, g_c) = spec.gradients(&spec.start);
    let pair = GradientPair::new(g_r.as_slice().to_vec(), g_c.as_slice().to_vec())?;
    let manip = manipulate(&pair, false)?;
    let (lower, upper) = improvement_bounds(&pair, eta, spec.smoothness)?;
    let next = &spec.start + DVector::from_vec(manip.direction) * eta;
    let delta_f = spec.value(&next) - spec.value(&spec.start);
    Ok(TheoremCheck {
        cos_theta: manip.cos_theta,
        delta_f,
        lower,
        upper,
        pass: delta_f >= lower - 1e-9,
        upper_holds: delta_f <= upper + 1e-9,
    })
}
