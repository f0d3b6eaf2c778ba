//! Monte Carlo check of the excess-loss bound on synthetic losses where every
//! constant is known exactly.
//!
//! The loss is `ℒ(w) = ½ Σ h_i (w_i − w*_i)² + c₃ Σ |w_i − w*_i|³`, whose
//! Hessian is `L`-bounded at the optimum and `6c₃`-Lipschitz. For a model
//! `W_pre + θ` with `θ ~ N(μ, Σ)` inside a `δ`-ball around `w*`, the bound is
//!
//! ```text
//! E[ℒ(W_pre + θ) − ℒ(w*)] ≤ (L/2 + L_H·δ/6) · (δ² + tr Σ)
//! ```

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::clip_cross;
use crate::merge::{merged_trace, optimal_weights};
use crate::params::Rng;
use crate::report::{fmt_f64, CsvTable};

pub const MIN_DRAWS: usize = 10_000;
const BATCH: usize = 4096;
/// Relative slack on `cross² ≤ v_F·v_L` for the PSD check.
const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadScenario {
    pub w_star: Vec<f64>,
    /// Diagonal of `H`.
    pub h: Vec<f64>,
    pub l: f64,
    /// Cubic coefficient; `L_H = 6·c₃`.
    pub c3: f64,
    pub delta: f64,
    pub w_pre: Vec<f64>,
    pub mu_f: Vec<f64>,
    pub mu_l: Vec<f64>,
    pub var_f: Vec<f64>,
    pub var_l: Vec<f64>,
    pub cross: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Which {
    FedIt,
    Local,
    Merge(f64),
}

impl Which {
    /// Weight on the federated model.
    pub fn lambda(self) -> f64 {
        match self {
            Which::FedIt => 1.0,
            Which::Local => 0.0,
            Which::Merge(l) => l,
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::FedIt => "fedit",
            Which::Local => "local",
            Which::Merge(_) => "merge",
        })
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl QuadScenario {
    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn l_h(&self) -> f64 {
        6.0 * self.c3
    }

    /// `‖W_pre + μ − w*‖` for the given mean.
    pub fn offset_norm(&self, mu: &[f64]) -> f64 {
        norm((0..self.dim()).map(|i| self.w_pre[i] + mu[i] - self.w_star[i]))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("scenario has dimension 0"));
        }
        for (name, v) in [
            ("h", &self.h),
            ("w_pre", &self.w_pre),
            ("mu_f", &self.mu_f),
            ("mu_l", &self.mu_l),
            ("var_f", &self.var_f),
            ("var_l", &self.var_l),
            ("cross", &self.cross),
        ] {
            if v.len() != d {
                return Err(Error::shape(name, format!("length {} != dimension {d}", v.len())));
            }
        }
        let scalars_ok = self.l.is_finite() && self.l > 0.0 && self.c3.is_finite() && self.c3 >= 0.0;
        if !scalars_ok || !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::invalid("L and δ must be positive, c₃ non-negative"));
        }
        if self.h.iter().any(|&h| !(0.0..=self.l).contains(&h)) {
            return Err(Error::Invariant("curvature outside [0, L]".into()));
        }
        for i in 0..d {
            let (vf, vl, c) = (self.var_f[i], self.var_l[i], self.cross[i]);
            if !(vf >= 0.0 && vl >= 0.0 && c >= 0.0) {
                return Err(Error::Invariant(format!("negative variance at coordinate {i}")));
            }
            if c > vf.min(vl) {
                return Err(Error::Invariant(format!(
                    "cross variance exceeds a marginal at coordinate {i}"
                )));
            }
        }
        for (name, mu) in [("fedit", &self.mu_f), ("local", &self.mu_l)] {
            let r = self.offset_norm(mu);
            if r > self.delta {
                return Err(Error::Invariant(format!(
                    "{name} mean lies {r} from the optimum, outside δ = {}",
                    self.delta
                )));
            }
        }
        Ok(())
    }

    /// `ℒ(w) − ℒ(w*)`.
    pub fn excess(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.w_star)
            .zip(&self.h)
            .map(|((wi, si), hi)| {
                let e = (wi - si).abs();
                0.5 * hi * e * e + self.c3 * e * e * e
            })
            .sum()
    }

    pub fn sigma_trace(&self, which: Which) -> f64 {
        let a: f64 = self.var_f.iter().sum();
        let b: f64 = self.var_l.iter().sum();
        let c: f64 = self.cross.iter().sum();
        merged_trace(a, b, c, which.lambda())
    }

    /// `(L/2 + L_H·δ/6)(δ² + tr Σ)`.
    pub fn rhs(&self, which: Which) -> f64 {
        (self.l / 2.0 + self.l_h() * self.delta / 6.0) * (self.delta * self.delta + self.sigma_trace(which))
    }

    /// Trace-optimal weight for this scenario's covariance.
    pub fn lambda_star(&self) -> Result<f64> {
        let a = self.var_f.iter().sum();
        let b = self.var_l.iter().sum();
        let c = self.cross.iter().sum();
        Ok(optimal_weights(a, b, c)?.lambda_fedit)
    }

    /// Random scenario satisfying every assumption. Both means lie within
    /// `δ/2` of the optimum and `6·√(tr Σ) ≤ δ/2`, so draws leave the basin
    /// with negligible probability.
    pub fn random(d: usize, cubic: bool, rng: &mut Rng) -> Self {
        let l = 0.5 + 4.5 * rng.uniform();
        let mut h: Vec<f64> = (0..d).map(|_| l * rng.uniform()).collect();
        h[rng.below(d)] = l;
        let c3 = if cubic { 0.05 + 0.95 * rng.uniform() } else { 0.0 };
        let delta = 0.5 + 1.5 * rng.uniform();
        let w_star: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let w_pre: Vec<f64> = (0..d).map(|_| rng.normal()).collect();

        let mean_within = |rng: &mut Rng| -> Vec<f64> {
            let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = norm(dir.iter().copied()).max(f64::MIN_POSITIVE);
            let r = 0.5 * delta * rng.uniform();
            (0..d).map(|i| w_star[i] - w_pre[i] + r * dir[i] / n).collect()
        };
        let mu_f = mean_within(rng);
        let mu_l = mean_within(rng);

        let budget = (delta / 12.0).powi(2);
        let variances = |rng: &mut Rng| -> Vec<f64> {
            let u: Vec<f64> = (0..d).map(|_| rng.uniform() + 1e-3).collect();
            let total = budget * (0.05 + 0.95 * rng.uniform());
            let s: f64 = u.iter().sum();
            u.iter().map(|x| total * x / s).collect()
        };
        let var_f = variances(rng);
        let var_l = variances(rng);
        let cross = (0..d)
            .map(|i| clip_cross(2.0 * rng.uniform() - 1.0, var_f[i], var_l[i]).1)
            .collect();

        Self {
            w_star,
            h,
            l,
            c3,
            delta,
            w_pre,
            mu_f,
            mu_l,
            var_f,
            var_l,
            cross,
        }
    }

    /// Per coordinate `(σ_F, κ, τ)` with `θ_F = μ_F + σ_F z₁` and
    /// `θ_L = μ_L + κ z₁ + τ z₂`.
    fn cholesky(&self) -> Result<Vec<(f64, f64, f64)>> {
        (0..self.dim())
            .map(|i| {
                let (vf, vl, c) = (self.var_f[i], self.var_l[i], self.cross[i]);
                if !(vf >= 0.0 && vl >= 0.0) || c * c > vf * vl * (1.0 + PSD_TOL) {
                    return Err(Error::Invariant(format!(
                        "covariance block at coordinate {i} is not positive semidefinite"
                    )));
                }
                let sf = vf.sqrt();
                // Via ρ' = c/v_F so that Σ_cross = Σ_F = Σ_L gives κ = σ_F, τ = 0 exactly.
                let ratio = if vf > 0.0 { c / vf } else { 0.0 };
                Ok((sf, ratio * sf, (vl - ratio * c).max(0.0).sqrt()))
            })
            .collect()
    }

    fn draw_into(&self, chol: &[(f64, f64, f64)], rng: &mut Rng, tf: &mut [f64], tl: &mut [f64]) {
        for (i, &(sf, kappa, tau)) in chol.iter().enumerate() {
            let z1 = rng.normal();
            let z2 = rng.normal();
            tf[i] = self.mu_f[i] + sf * z1;
            tl[i] = self.mu_l[i] + kappa * z1 + tau * z2;
        }
    }
}

/// `n` exact joint draws `(θ_F, θ_L)`.
pub fn sample_joint(sc: &QuadScenario, n: usize, rng: &mut Rng) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let chol = sc.cholesky()?;
    let d = sc.dim();
    Ok((0..n)
        .map(|_| {
            let mut tf = vec![0.0; d];
            let mut tl = vec![0.0; d];
            sc.draw_into(&chol, rng, &mut tf, &mut tl);
            (tf, tl)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub which: Which,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    /// `lhs − 3·stderr ≤ rhs`.
    pub holds: bool,
    /// Draws that landed outside the `δ`-ball.
    pub escapes: usize,
}

pub fn check_bound(sc: &QuadScenario, which: Which, n: usize, rng: &mut Rng) -> Result<BoundCheck> {
    Ok(check_bounds(sc, &[which], n, rng)?.remove(0))
}

/// Evaluates several targets on one shared set of joint draws.
pub fn check_bounds(sc: &QuadScenario, targets: &[Which], n: usize, rng: &mut Rng) -> Result<Vec<BoundCheck>> {
    sc.validate()?;
    if n < MIN_DRAWS {
        return Err(Error::invalid(format!("need at least {MIN_DRAWS} draws, got {n}")));
    }
    for t in targets {
        if !(0.0..=1.0).contains(&t.lambda()) {
            return Err(Error::invalid(format!("λ = {} outside [0, 1]", t.lambda())));
        }
    }
    let chol = sc.cholesky()?;
    let d = sc.dim();
    let k = targets.len();
    let root = rng.child("theory/mc");
    let n_batches = n.div_ceil(BATCH);

    // Per batch: excess values laid out [target][draw], plus escape counts.
    let batches: Vec<(Vec<Vec<f64>>, Vec<usize>)> = (0..n_batches)
        .into_par_iter()
        .map(|bi| {
            let mut r = root.child(&format!("batch/{bi}"));
            let len = BATCH.min(n - bi * BATCH);
            let mut vals = vec![Vec::with_capacity(len); k];
            let mut esc = vec![0usize; k];
            let (mut tf, mut tl, mut w) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            for _ in 0..len {
                sc.draw_into(&chol, &mut r, &mut tf, &mut tl);
                for (j, t) in targets.iter().enumerate() {
                    let lam = t.lambda();
                    for i in 0..d {
                        let theta = match t {
                            Which::FedIt => tf[i],
                            Which::Local => tl[i],
                            Which::Merge(_) => lam * tf[i] + (1.0 - lam) * tl[i],
                        };
                        w[i] = sc.w_pre[i] + theta;
                    }
                    if norm((0..d).map(|i| w[i] - sc.w_star[i])) > sc.delta {
                        esc[j] += 1;
                    }
                    vals[j].push(sc.excess(&w));
                }
            }
            (vals, esc)
        })
        .collect();

    Ok(targets
        .iter()
        .enumerate()
        .map(|(j, &which)| {
            let all: Vec<f64> = batches.iter().flat_map(|(v, _)| v[j].iter().copied()).collect();
            let escapes = batches.iter().map(|(_, e)| e[j]).sum();
            let nf = all.len() as f64;
            let lhs = all.iter().sum::<f64>() / nf;
            let var = all.iter().map(|x| (x - lhs) * (x - lhs)).sum::<f64>() / (nf - 1.0);
            let lhs_stderr = (var / nf).sqrt();
            let rhs = sc.rhs(which);
            BoundCheck {
                which,
                lhs,
                lhs_stderr,
                rhs,
                holds: lhs - 3.0 * lhs_stderr <= rhs,
                escapes,
            }
        })
        .collect())
}

/// Draws random PSD diagonal joint blocks and counts how many satisfy
/// `|tr Σ₁₂| ≤ √(tr Σ₁ · tr Σ₂)`.
pub fn check_trace_cs(n_trials: usize, rng: &mut Rng) -> Result<usize> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    let mut passes = 0;
    for _ in 0..n_trials {
        let d = 1 + rng.below(32);
        let scale_f = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let scale_l = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for _ in 0..d {
            let vf = scale_f * rng.uniform();
            let vl = scale_l * rng.uniform();
            a += vf;
            b += vl;
            c += clip_cross(2.0 * rng.uniform() - 1.0, vf, vl).1;
        }
        if c.abs() <= (a * b).sqrt() * (1.0 + 1e-12) {
            passes += 1;
        }
    }
    Ok(passes)
}

/// Outcome of the randomized bound suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    /// `(scenario_id, check)` in generation order.
    pub checks: Vec<(usize, BoundCheck)>,
    /// Scenarios where `rhs(λ*) ≤ min(rhs(0), rhs(1))` failed.
    pub ordering_failures: usize,
    pub cs_trials: usize,
    pub cs_passes: usize,
}

impl SuiteReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|(_, c)| c.holds) && self.ordering_failures == 0 && self.cs_passes == self.cs_trials
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["scenario_id", "which", "lambda", "lhs", "lhs_stderr", "rhs", "holds"]);
        for (id, c) in &self.checks {
            t.push(vec![
                id.to_string(),
                c.which.to_string(),
                fmt_f64(c.which.lambda()),
                fmt_f64(c.lhs),
                fmt_f64(c.lhs_stderr),
                fmt_f64(c.rhs),
                c.holds.to_string(),
            ]);
        }
        t
    }
}

pub const SUITE_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// `n_scenarios` random scenarios (every other one with a cubic term), each
/// checked for FedIT, Local and Merge at [`SUITE_LAMBDAS`] and `λ*`.
pub fn run_suite(n_scenarios: usize, n_draws: usize, cs_trials: usize, rng: &Rng) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let mut ordering_failures = 0;
    for s in 0..n_scenarios {
        let mut r = rng.child(&format!("scenario/{s}"));
        let d = 2 + r.below(7);
        let sc = QuadScenario::random(d, s % 2 == 1, &mut r);
        let lambda_star = sc.lambda_star()?;
        let mut targets = vec![Which::FedIt, Which::Local];
        targets.extend(SUITE_LAMBDAS.iter().map(|&l| Which::Merge(l)));
        targets.push(Which::Merge(lambda_star));
        for c in check_bounds(&sc, &targets, n_draws, &mut r)? {
            checks.push((s, c));
        }
        let best = sc.rhs(Which::Merge(lambda_star));
        if best > sc.rhs(Which::Merge(0.0)).min(sc.rhs(Which::Merge(1.0))) {
            ordering_failures += 1;
        }
    }
    let cs_passes = if cs_trials > 0 {
        check_trace_cs(cs_trials, &mut rng.child("theory/cs"))?
    } else {
        0
    };
    Ok(SuiteReport {
        checks,
        ordering_failures,
        cs_trials,
        cs_passes,
    })
}
