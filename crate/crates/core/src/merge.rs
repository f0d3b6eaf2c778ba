//! Federated–local model merging.
//!
//! With traces `a = tr Σ_F`, `b = tr Σ_L`, `c = tr Σ_cross`, the merged
//! posterior trace for weight `λ` on the federated model is
//!
//! ```text
//! g(λ) = a λ² + b (1 − λ)² + 2 λ (1 − λ) c
//! ```
//!
//! which is minimized at `λ* = (b − c) / (a + b − 2c)`. Merging itself is a
//! per-matrix convex combination of the LoRA factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::Traces;
use crate::model::{
    adapters_from_params, adapters_to_params, check_adapter_layout, AdaptedModel, DenseModel, Example, LoraAdapter,
    Metrics,
};
use crate::params::ParamVector;

/// Relative tolerance on `a + b − 2c` below which `g` is treated as flat.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-15;

/// The `{0, 0.1, …, 1}` grid.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingWeights {
    pub lambda_fedit: f64,
    pub lambda_local: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `a + b − 2c` was too small to divide by; `λ = 0.5` was used.
    pub degenerate: bool,
}

impl MixingWeights {
    /// Fixed weights with no trace information attached.
    pub fn fixed(lambda_fedit: f64) -> Self {
        Self {
            lambda_fedit,
            lambda_local: 1.0 - lambda_fedit,
            a: f64::NAN,
            b: f64::NAN,
            c: f64::NAN,
            degenerate: false,
        }
    }

    /// `g(λ_fedit)`.
    pub fn predicted_trace(&self) -> f64 {
        merged_trace(self.a, self.b, self.c, self.lambda_fedit)
    }
}

/// `g(λ) = aλ² + b(1−λ)² + 2λ(1−λ)c`.
pub fn merged_trace(a: f64, b: f64, c: f64, lambda: f64) -> f64 {
    let mu = 1.0 - lambda;
    a * lambda * lambda + b * mu * mu + 2.0 * lambda * mu * c
}

pub fn optimal_weights(a: f64, b: f64, c: f64) -> Result<MixingWeights> {
    optimal_weights_with_tol(a, b, c, DEFAULT_DEGENERACY_TOL)
}

pub fn optimal_weights_with_tol(a: f64, b: f64, c: f64, tol: f64) -> Result<MixingWeights> {
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::invalid(format!(
            "traces must be finite and non-negative: a={a}, b={b}, c={c}"
        )));
    }
    if c > a.min(b) {
        return Err(Error::Invariant(format!("cross trace c={c} exceeds min(a={a}, b={b})")));
    }
    let denom = a + b - 2.0 * c;
    let (lambda, degenerate) = if denom > tol * (a + b) && denom > 0.0 {
        (((b - c) / denom).clamp(0.0, 1.0), false)
    } else {
        (0.5, true)
    };
    Ok(MixingWeights {
        lambda_fedit: lambda,
        lambda_local: 1.0 - lambda,
        a,
        b,
        c,
        degenerate,
    })
}

pub fn optimal_weights_for(t: &Traces) -> Result<MixingWeights> {
    optimal_weights(t.a, t.b, t.c)
}

/// Coordinate-wise `λ_F·x_F + λ_L·x_L`; equal inputs pass through unchanged.
pub fn convex_combine(fedit: &ParamVector, local: &ParamVector, w: &MixingWeights) -> Result<ParamVector> {
    let (lf, ll) = (w.lambda_fedit, w.lambda_local);
    fedit.zip_with(local, |x, y| if x == y { x } else { lf * x + ll * y })
}

/// Merges `A` and `B` of every layer separately.
pub fn merge_adapters(fedit: &[LoraAdapter], local: &[LoraAdapter], w: &MixingWeights) -> Result<Vec<LoraAdapter>> {
    check_adapter_layout(fedit, local)?;
    let merged = convex_combine(&adapters_to_params(fedit), &adapters_to_params(local), w)?;
    adapters_from_params(&merged)
}

/// Per-coordinate Fisher-weighted average
/// `Σ_i (F_ik + ε) μ_ik / Σ_i (F_ik + ε)`.
pub fn fisher_merge_baseline(models: &[(ParamVector, ParamVector)], damping: f64) -> Result<ParamVector> {
    if models.len() < 2 {
        return Err(Error::invalid("Fisher merging needs at least two models"));
    }
    let (mu0, _) = &models[0];
    for (mu, f) in models {
        mu0.check_compatible(mu)?;
        mu0.check_compatible(f)?;
        if f.iter().any(|v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("Fisher entries must be finite and non-negative"));
        }
    }
    let d = mu0.len();
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for (mu, f) in models {
        for (k, (m, fk)) in mu.iter().zip(f.iter()).enumerate() {
            let w = fk + damping;
            num[k] += w * m;
            den[k] += w;
        }
    }
    let merged: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
        .collect();
    mu0.with_flat(&merged)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_lambda: f64,
    pub best: Metrics,
    /// `(λ, metrics)` in grid order.
    pub curve: Vec<(f64, Metrics)>,
}

/// Evaluates the merged model at each grid weight; picks the lowest loss,
/// breaking ties toward the smaller `λ`.
pub fn grid_search_lambda(
    fedit: &AdaptedModel,
    local: &AdaptedModel,
    grid: &[f64],
    eval: &[Example],
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    if eval.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let merged = merge_adapters(fedit.adapters(), local.adapters(), &MixingWeights::fixed(lambda))?;
        curve.push((lambda, fedit.with_adapters(merged)?.evaluate(eval)?));
    }
    let (best_lambda, best) = curve
        .iter()
        .copied()
        .min_by(|(la, ma), (lb, mb)| ma.loss.total_cmp(&mb.loss).then(la.total_cmp(lb)))
        .expect("non-empty grid");
    Ok(GridResult {
        best_lambda,
        best,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmcScan {
    /// `(λ, metrics)` for `λ·w1 + (1−λ)·w2`, λ ascending from 0 to 1.
    pub curve: Vec<(f64, Metrics)>,
    /// `max_λ loss(λ) − max(loss(0), loss(1))`.
    pub barrier: f64,
}

/// Loss along the straight line between two models' effective weights.
pub fn lmc_scan(w1: &DenseModel, w2: &DenseModel, eval: &[Example], n_points: usize) -> Result<LmcScan> {
    if n_points < 2 {
        return Err(Error::invalid("a scan needs at least two points"));
    }
    if eval.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut curve = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let lambda = i as f64 / (n_points - 1) as f64;
        let m = DenseModel::interpolate(lambda, w1, w2)?;
        curve.push((lambda, m.evaluate(eval)?));
    }
    let peak = curve.iter().map(|(_, m)| m.loss).fold(f64::NEG_INFINITY, f64::max);
    let ends = curve[0].1.loss.max(curve[n_points - 1].1.loss);
    Ok(LmcScan {
        curve,
        barrier: peak - ends,
    })
}

/// Per-client merge outcome (one `merge.csv` row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMerge {
    pub client: usize,
    pub weights: MixingWeights,
    pub pred_trace: f64,
    pub acc_fedit: f64,
    pub acc_local: f64,
    pub acc_merged: f64,
    pub lambda_grid: f64,
    pub acc_grid: f64,
    pub acc_fisher_merge: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub clients: Vec<ClientMerge>,
}

impl MergeReport {
    fn mean(&self, f: impl Fn(&ClientMerge) -> f64) -> f64 {
        if self.clients.is_empty() {
            return f64::NAN;
        }
        self.clients.iter().map(f).sum::<f64>() / self.clients.len() as f64
    }

    pub fn mean_acc_fedit(&self) -> f64 {
        self.mean(|c| c.acc_fedit)
    }

    pub fn mean_acc_local(&self) -> f64 {
        self.mean(|c| c.acc_local)
    }

    pub fn mean_acc_merged(&self) -> f64 {
        self.mean(|c| c.acc_merged)
    }

    pub fn mean_acc_grid(&self) -> f64 {
        self.mean(|c| c.acc_grid)
    }

    pub fn mean_best_single(&self) -> f64 {
        self.mean(|c| c.acc_fedit.max(c.acc_local))
    }
}
