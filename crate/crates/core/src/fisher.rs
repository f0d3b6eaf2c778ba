//! Diagonal Fisher information and clipped cross-covariance estimates.
//!
//! The Fisher diagonal is taken over the LoRA factors `A` and `B`
//! themselves (never over the product `BA`), at the trained adapter values:
//!
//! ```text
//! F_k = 1/N Σ_n E_{y ~ p(·|x_n)} [ (∂ log p(y|x_n) / ∂θ_k)² ]
//! ```
//!
//! Its damped inverse is the Laplace posterior variance of each coordinate.
//! The cross-covariance between two posteriors is built from per-sample
//! loss-gradient correlations at the true labels, clipped so that
//! `0 ≤ Σ_cross,kk ≤ min(Σ_F,kk, Σ_L,kk)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdaptedModel, Example};
use crate::params::{ParamVector, Rng};

pub const DEFAULT_DAMPING: f64 = 1e-8;
pub const DEFAULT_FISHER_BATCH: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Sum over every label weighted by the model's probabilities.
    ExactExpectation,
    /// One label per example drawn from the model.
    ModelSampled,
}

impl LabelMode {
    pub fn default_for(n_classes: usize) -> Self {
        if n_classes <= 32 {
            LabelMode::ExactExpectation
        } else {
            LabelMode::ModelSampled
        }
    }
}

/// Diagonal Fisher over the adapter coordinates of `model`.
pub fn fisher_diag(model: &AdaptedModel, batch: &[Example], mode: LabelMode, rng: &mut Rng) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::Empty("Fisher batch"));
    }
    let layout = model.adapter_params();
    let mut acc = vec![0.0; layout.len()];
    for ex in batch {
        let (p, scores) = model.scores(&ex.x)?;
        match mode {
            LabelMode::ExactExpectation => {
                for (py, s) in p.iter().zip(&scores) {
                    for (a, g) in acc.iter_mut().zip(s) {
                        *a += py * g * g;
                    }
                }
            }
            LabelMode::ModelSampled => {
                let y = rng.categorical(&p);
                for (a, g) in acc.iter_mut().zip(&scores[y]) {
                    *a += g * g;
                }
            }
        }
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    if acc.iter().any(|a| !a.is_finite()) {
        return Err(Error::Invariant("non-finite Fisher estimate".into()));
    }
    layout.with_flat(&acc)
}

/// Diagonal Gaussian posterior over a task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: ParamVector,
    pub var: ParamVector,
}

impl GaussianDiag {
    /// `var_k = 1 / (F_k + ε)`.
    pub fn from_fisher(mean: ParamVector, fisher: &ParamVector, damping: f64) -> Result<Self> {
        mean.check_compatible(fisher)?;
        if damping.is_nan() || damping <= 0.0 {
            return Err(Error::invalid("damping must be positive"));
        }
        if fisher.iter().any(|f| f < 0.0 || !f.is_finite()) {
            return Err(Error::Invariant(
                "Fisher diagonal must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            var: fisher.map(|f| 1.0 / (f + damping)),
            mean,
        })
    }

    pub fn trace(&self) -> f64 {
        self.var.sum()
    }
}

/// Diagonal cross-covariance between two posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDiag {
    /// Gradient correlation before clipping.
    pub rho_raw: ParamVector,
    /// Clipped correlation in `[0, ρ_max]`.
    pub rho: ParamVector,
    pub cross_var: ParamVector,
}

/// Cross-covariance from two per-sample gradient populations evaluated on
/// the same examples in the same order.
pub fn cross_from_grads(
    grads_f: &[ParamVector],
    grads_l: &[ParamVector],
    var_f: &ParamVector,
    var_l: &ParamVector,
) -> Result<CrossDiag> {
    if grads_f.len() != grads_l.len() {
        return Err(Error::invalid("gradient populations differ in size"));
    }
    if grads_f.len() < 2 {
        return Err(Error::invalid("need at least two samples for a covariance"));
    }
    var_f.check_compatible(var_l)?;
    for g in grads_f.iter().chain(grads_l) {
        var_f.check_compatible(g)?;
    }
    if var_f.iter().chain(var_l.iter()).any(|v| v < 0.0 || v.is_nan()) {
        return Err(Error::invalid("variances must be non-negative"));
    }
    let d = var_f.len();
    let n = grads_f.len() as f64;
    let flat_f: Vec<Vec<f64>> = grads_f.iter().map(ParamVector::to_flat).collect();
    let flat_l: Vec<Vec<f64>> = grads_l.iter().map(ParamVector::to_flat).collect();
    let vf = var_f.to_flat();
    let vl = var_l.to_flat();

    let mut rho_raw = vec![0.0; d];
    let mut rho = vec![0.0; d];
    let mut cross = vec![0.0; d];
    for k in 0..d {
        let mean_f = flat_f.iter().map(|g| g[k]).sum::<f64>() / n;
        let mean_l = flat_l.iter().map(|g| g[k]).sum::<f64>() / n;
        let (mut sff, mut sll, mut sfl) = (0.0, 0.0, 0.0);
        for (gf, gl) in flat_f.iter().zip(&flat_l) {
            let a = gf[k] - mean_f;
            let b = gl[k] - mean_l;
            sff += a * a;
            sll += b * b;
            sfl += a * b;
        }
        let denom = (sff / n).sqrt() * (sll / n).sqrt();
        let r = if denom > 0.0 { (sfl / n) / denom } else { 0.0 };
        rho_raw[k] = r;
        (rho[k], cross[k]) = clip_cross(r, vf[k], vl[k]);
    }
    Ok(CrossDiag {
        rho_raw: var_f.with_flat(&rho_raw)?,
        rho: var_f.with_flat(&rho)?,
        cross_var: var_f.with_flat(&cross)?,
    })
}

/// Clips a raw correlation to `[0, ρ_max]` with
/// `ρ_max = min(√(v_F/v_L), √(v_L/v_F))` and returns `(ρ, ρ·√(v_F·v_L))`.
/// The cross variance never exceeds `min(v_F, v_L)`.
pub fn clip_cross(rho_raw: f64, var_f: f64, var_l: f64) -> (f64, f64) {
    let rho_max = if var_f > 0.0 && var_l > 0.0 {
        (var_f / var_l).sqrt().min((var_l / var_f).sqrt())
    } else {
        0.0
    };
    let rho = if rho_raw.is_nan() {
        0.0
    } else {
        rho_raw.min(rho_max).max(0.0)
    };
    // The outer min absorbs rounding in ρ_max·√(v_F·v_L).
    (rho, (rho * (var_f * var_l).sqrt()).min(var_f).min(var_l))
}

/// Per-sample loss gradients of both models on a shared batch, then
/// [`cross_from_grads`].
pub fn cross_corr(
    model_f: &AdaptedModel,
    model_l: &AdaptedModel,
    batch: &[Example],
    var_f: &ParamVector,
    var_l: &ParamVector,
) -> Result<CrossDiag> {
    model_f.adapter_params().check_compatible(&model_l.adapter_params())?;
    if batch.len() < 2 {
        return Err(Error::invalid(
            "cross-correlation needs a batch of at least two examples",
        ));
    }
    let gf = model_f.per_sample_grads(batch)?;
    let gl = model_l.per_sample_grads(batch)?;
    cross_from_grads(&gf, &gl, var_f, var_l)
}

/// Scalar traces `a = tr Σ_F`, `b = tr Σ_L`, `c = tr Σ_cross`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn traces(var_f: &ParamVector, var_l: &ParamVector, cross: &CrossDiag) -> Result<Traces> {
    var_f.check_compatible(var_l)?;
    var_f.check_compatible(&cross.cross_var)?;
    if var_f.iter().chain(var_l.iter()).any(|v| v < 0.0 || v.is_nan()) {
        return Err(Error::invalid("negative variance"));
    }
    if cross.cross_var.iter().any(|v| v < 0.0 || v.is_nan()) {
        return Err(Error::invalid("negative cross variance"));
    }
    let a = var_f.sum();
    let b = var_l.sum();
    let c = cross.cross_var.sum();
    if c > a.min(b) {
        return Err(Error::Invariant(format!("cross trace {c} exceeds min({a}, {b})")));
    }
    Ok(Traces { a, b, c })
}
