//! Randomized verification suites for the gradient kernel and the one-step
//! improvement bounds.

use std::fmt;

use pcrpo_core::gradmanip::{
    combine_aligned, combine_conflicting, cos_angle, dot, norm, project_onto_normal_plane, surgery_combine,
    verify_theorem_bounds, GradientPair, QuadraticTestSpec, SURGERY_DOMINANCE_COS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    /// Informational properties are reported but never fail the suite.
    pub asserted: bool,
    pub checked: usize,
    pub failed: usize,
    pub counterexample: Option<(Vec<f64>, Vec<f64>)>,
}

impl PropertyResult {
    fn new(name: &'static str, asserted: bool) -> Self {
        Self { name, asserted, checked: 0, failed: 0, counterexample: None }
    }

    fn record(&mut self, ok: bool, r: &[f64], c: &[f64]) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some((r.to_vec(), c.to_vec()));
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub properties: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| !p.asserted || p.failed == 0)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            let tag = match (p.asserted, p.failed) {
                (false, _) => "INFO",
                (true, 0) => "PASS",
                (true, _) => "FAIL",
            };
            writeln!(f, "{tag} {:<40} {}/{} hold", p.name, p.checked - p.failed, p.checked)?;
            if let Some((r, c)) = &p.counterexample {
                writeln!(f, "     counterexample g_r = {r:?}")?;
                writeln!(f, "                    g_c = {c:?}")?;
            }
        }
        Ok(())
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `samples` random pairs per dimension.
pub fn verify_gradients(samples: usize, dims: &[usize], seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orth = PropertyResult::new("orthogonality of projections", true);
    let mut ratio = PropertyResult::new("unit norms: |g| = (1-cos)|g_avg|", true);
    let mut dominance = PropertyResult::new("unit norms: |g| >= |g_avg|", true);
    let mut ascent = PropertyResult::new("ascent identity", true);
    let mut surgery = PropertyResult::new("unit norms: |g| >= |g'| (cos >= -0.7808)", true);
    let mut surgery_low = PropertyResult::new("unit norms: |g| >= |g'| (cos < -0.7808)", false);
    let mut raw_dom = PropertyResult::new("raw norms: |g| >= |g_avg|", false);
    let mut raw_surgery = PropertyResult::new("raw norms: |g| >= |g'|", false);

    for &dim in dims {
        for _ in 0..samples {
            let r = gaussian_unit(&mut rng, dim);
            let c = gaussian_unit(&mut rng, dim);
            let pair = GradientPair::new(r.clone(), c.clone()).expect("unit vectors of equal length");
            let cos = cos_angle(&r, &c).expect("unit vectors are nonzero");

            let rp = project_onto_normal_plane(&r, &c).expect("nonzero");
            let cp = project_onto_normal_plane(&c, &r).expect("nonzero");
            orth.record(dot(&rp, &c).abs() <= 1e-9 && dot(&cp, &r).abs() <= 1e-9, &r, &c);

            let g = combine_conflicting(&pair).expect("nonzero");
            let sum: Vec<f64> = r.iter().zip(&c).map(|(a, b)| a + b).collect();
            let identity = (1.0 - cos * cos) * (dot(&r, &r) + dot(&c, &c)) / 2.0;
            ascent.record((dot(&sum, &g) - identity).abs() <= 1e-9, &r, &c);

            if cos <= 0.0 {
                let avg = norm(&combine_aligned(&pair).expect("equal dims"));
                ratio.record((norm(&g) - (1.0 - cos) * avg).abs() <= 1e-9, &r, &c);
                dominance.record(norm(&g) + 1e-12 >= avg, &r, &c);
            }
            if cos < 0.0 {
                let ok = norm(&g) + 1e-12 >= norm(&surgery_combine(&pair).expect("nonzero"));
                if cos >= SURGERY_DOMINANCE_COS {
                    surgery.record(ok, &r, &c);
                } else {
                    surgery_low.record(ok, &r, &c);
                }

                // Same directions with unequal lengths.
                let (sr, sc) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
                let rr: Vec<f64> = r.iter().map(|x| x * sr).collect();
                let cc: Vec<f64> = c.iter().map(|x| x * sc).collect();
                let raw = GradientPair::new(rr.clone(), cc.clone()).expect("equal dims");
                let g = norm(&combine_conflicting(&raw).expect("nonzero"));
                raw_dom.record(g + 1e-12 >= norm(&combine_aligned(&raw).expect("equal dims")), &rr, &cc);
                raw_surgery.record(g + 1e-12 >= norm(&surgery_combine(&raw).expect("nonzero")), &rr, &cc);
            }
        }
    }
    SuiteReport { properties: vec![orth, ratio, dominance, ascent, surgery, surgery_low, raw_dom, raw_surgery] }
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `instances` random quadratics per angle regime and dimension, each
/// stepped with `η = 1/L` and `η = 1/(2L)`, plus antiparallel instances.
pub fn verify_theorems(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acute_lower = PropertyResult::new("lower bound, cos >= 0", true);
    let mut obtuse_lower = PropertyResult::new("lower bound, cos < 0", true);
    let mut improves = PropertyResult::new("strict improvement when sin != 0", true);
    let mut degenerate = PropertyResult::new("antiparallel: lower = 0, delta_f >= 0", true);
    let mut upper = PropertyResult::new("upper bound", false);

    for dim in [2usize, 4, 16] {
        for obtuse in [false, true] {
            let mut made = 0;
            while made < instances {
                let (r, c) = (random_vec(&mut rng, dim), random_vec(&mut rng, dim));
                let Ok(cos) = cos_angle(&r, &c) else { continue };
                if (cos < 0.0) != obtuse {
                    continue;
                }
                made += 1;
                let spec = QuadraticTestSpec::random_with_gradients(&mut rng, &r, &c).expect("valid instance");
                for eta in [1.0 / spec.smoothness, 0.5 / spec.smoothness] {
                    let check = verify_theorem_bounds(&spec, eta).expect("eta within 1/L");
                    let lower = if obtuse { &mut obtuse_lower } else { &mut acute_lower };
                    lower.record(check.pass, &r, &c);
                    if (1.0 - cos * cos) > 1e-12 {
                        improves.record(check.delta_f > 0.0, &r, &c);
                    }
                    upper.record(check.upper_holds, &r, &c);
                }
            }
        }
        for _ in 0..instances.div_ceil(10) {
            let r = random_vec(&mut rng, dim);
            let k = -rng.random_range(0.1..3.0);
            let c: Vec<f64> = r.iter().map(|x| k * x).collect();
            let spec = QuadraticTestSpec::random_with_gradients(&mut rng, &r, &c).expect("valid instance");
            let check = verify_theorem_bounds(&spec, 1.0 / spec.smoothness).expect("eta = 1/L");
            degenerate.record(check.lower.abs() <= 1e-12 && check.delta_f >= -1e-12, &r, &c);
        }
    }
    SuiteReport { properties: vec![acute_lower, obtuse_lower, improves, degenerate, upper] }
}
