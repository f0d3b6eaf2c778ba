#![allow(dead_code)]

use fedlora::model::{AdaptedModel, Architecture, Example, GradMask, InitConfig, LoraAdapter, Matrix};
use fedlora::params::Rng;

pub fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).unwrap()
}

/// Random base and random (non-zero) adapters.
pub fn random_model(arch: Architecture, rank: usize, rng: &mut Rng) -> AdaptedModel {
    let base = AdaptedModel::init(arch, rank, &InitConfig::default(), rng).unwrap();
    let adapters = arch
        .layers()
        .into_iter()
        .map(|(name, m, n)| {
            LoraAdapter::new(name, random_matrix(m, rank, 0.5, rng), random_matrix(rank, n, 0.5, rng)).unwrap()
        })
        .collect();
    base.with_adapters(adapters).unwrap()
}

pub fn random_batch(d_in: usize, n_classes: usize, n: usize, rng: &mut Rng) -> Vec<Example> {
    (0..n)
        .map(|_| Example::new((0..d_in).map(|_| rng.normal()).collect(), rng.below(n_classes)))
        .collect()
}

pub fn random_arch(mlp: bool, rng: &mut Rng) -> Architecture {
    let d_in = 2 + rng.below(6);
    let n_classes = 2 + rng.below(4);
    if mlp {
        Architecture::Mlp1 {
            d_in,
            d_hidden: 2 + rng.below(6),
            n_classes,
        }
    } else {
        Architecture::LinearSoftmax { d_in, n_classes }
    }
}

/// Largest ratio `|analytic − fd| / max(1e-6, 1e-4·|fd|)` over all adapter
/// coordinates; the check passes when the result is ≤ 1.
pub fn gradient_error_ratio(model: &AdaptedModel, batch: &[Example]) -> f64 {
    let (_, grad) = model.loss_and_grad(batch, GradMask::ALL).unwrap();
    let theta = model.adapter_params().to_flat();
    let g = grad.to_flat();
    let layout = model.adapter_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let mut plus = theta.clone();
        plus[k] += h;
        let mut minus = theta.clone();
        minus[k] -= h;
        let lp = model
            .with_adapter_params(&layout.with_flat(&plus).unwrap())
            .unwrap()
            .loss(batch)
            .unwrap();
        let lm = model
            .with_adapter_params(&layout.with_flat(&minus).unwrap())
            .unwrap()
            .loss(batch)
            .unwrap();
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((g[k] - fd).abs() / (1e-4 * fd.abs()).max(1e-6));
    }
    worst
}
