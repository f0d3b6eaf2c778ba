//! Desk-scale adapted models.
//!
//! Two architectures are supported: a single linear layer followed by
//! softmax, and a one-hidden-layer tanh MLP. Every linear layer carries a
//! frozen base weight `W_pre`, a frozen bias, and a LoRA adapter `(B, A)`
//! so the effective weight is `W_pre + B·A`. Only adapter coordinates are
//! trainable.

mod matrix;

pub use matrix::Matrix;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Block, ParamVector, Rng};

pub const ROLE_A: &str = "loraA";
pub const ROLE_B: &str = "loraB";
pub const ROLE_BASE: &str = "base";
pub const ROLE_BIAS: &str = "bias";

/// One labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    LinearSoftmax {
        d_in: usize,
        n_classes: usize,
    },
    Mlp1 {
        d_in: usize,
        d_hidden: usize,
        n_classes: usize,
    },
}

impl Architecture {
    pub fn d_in(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { d_in, .. } | Architecture::Mlp1 { d_in, .. } => d_in,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { n_classes, .. } | Architecture::Mlp1 { n_classes, .. } => n_classes,
        }
    }

    /// `(layer name, out dim m, in dim n)` for each linear layer, input first.
    pub fn layers(&self) -> Vec<(&'static str, usize, usize)> {
        match *self {
            Architecture::LinearSoftmax { d_in, n_classes } => vec![("fc", n_classes, d_in)],
            Architecture::Mlp1 {
                d_in,
                d_hidden,
                n_classes,
            } => vec![("fc1", d_hidden, d_in), ("fc2", n_classes, d_hidden)],
        }
    }

    /// Largest admissible adapter rank (the minimum over all adapted layers).
    pub fn max_rank(&self) -> usize {
        self.layers().iter().map(|&(_, m, n)| m.min(n)).min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers().iter().any(|&(_, m, n)| m == 0 || n == 0) {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        if self.n_classes() < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        Ok(())
    }
}

/// Low-rank factor pair `B (m×r)`, `A (r×n)` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layer: String,
    b: Matrix,
    a: Matrix,
}

impl LoraAdapter {
    pub fn new(layer: impl Into<String>, b: Matrix, a: Matrix) -> Result<Self> {
        let layer = layer.into();
        let r = a.rows();
        if b.cols() != r {
            return Err(Error::shape(
                format!("{layer}.{ROLE_B}"),
                format!("B has {} columns but A has {} rows", b.cols(), r),
            ));
        }
        if r == 0 || r > b.rows().min(a.cols()) {
            return Err(Error::invalid(format!(
                "rank {r} not in 1..=min({}, {}) for layer {layer}",
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { layer, b, a })
    }

    /// `B = 0`, `A` i.i.d. Gaussian with standard deviation `a_std`.
    pub fn init(layer: impl Into<String>, m: usize, n: usize, rank: usize, a_std: f64, rng: &mut Rng) -> Result<Self> {
        let a = Matrix::from_vec(rank, n, (0..rank * n).map(|_| a_std * rng.normal()).collect())?;
        Self::new(layer, Matrix::zeros(m, rank), a)
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn lora_a(&self) -> &Matrix {
        &self.a
    }

    pub fn lora_b(&self) -> &Matrix {
        &self.b
    }

    /// The weight update `ΔW = B·A`.
    pub fn compose_update(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter factors are conformable by construction")
    }

    fn same_layout(&self, other: &LoraAdapter) -> bool {
        self.layer == other.layer
            && self.a.rows() == other.a.rows()
            && self.a.cols() == other.a.cols()
            && self.b.rows() == other.b.rows()
    }
}

/// Checks that two adapter lists share layer names and factor shapes.
pub fn check_adapter_layout(x: &[LoraAdapter], y: &[LoraAdapter]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "<adapters>",
            format!("{} vs {} adapters", x.len(), y.len()),
        ));
    }
    for (a, b) in x.iter().zip(y) {
        if !a.same_layout(b) {
            return Err(Error::shape(a.layer.clone(), "adapter layouts differ"));
        }
    }
    Ok(())
}

/// Flattens adapters into `<layer>.loraA`, `<layer>.loraB` blocks.
pub fn adapters_to_params(adapters: &[LoraAdapter]) -> ParamVector {
    let mut blocks = Vec::with_capacity(2 * adapters.len());
    for ad in adapters {
        blocks.push(
            Block::new(
                format!("{}.{ROLE_A}", ad.layer),
                vec![ad.a.rows(), ad.a.cols()],
                ad.a.as_slice().to_vec(),
            )
            .expect("shape matches"),
        );
        blocks.push(
            Block::new(
                format!("{}.{ROLE_B}", ad.layer),
                vec![ad.b.rows(), ad.b.cols()],
                ad.b.as_slice().to_vec(),
            )
            .expect("shape matches"),
        );
    }
    ParamVector::new(blocks).expect("adapter layer names are unique")
}

/// Inverse of [`adapters_to_params`]; ignores non-adapter blocks.
pub fn adapters_from_params(pv: &ParamVector) -> Result<Vec<LoraAdapter>> {
    let mut out = Vec::new();
    for blk in pv.blocks().iter().filter(|b| b.role() == ROLE_A) {
        let layer = blk.layer();
        let b_blk = pv
            .block(&format!("{layer}.{ROLE_B}"))
            .ok_or_else(|| Error::shape(format!("{layer}.{ROLE_B}"), "missing B factor"))?;
        let (Some(&[r, n]), Some(&[m, rb])) = (
            <&[usize; 2]>::try_from(blk.shape()).ok(),
            <&[usize; 2]>::try_from(b_blk.shape()).ok(),
        ) else {
            return Err(Error::shape(blk.name(), "adapter factors must be 2-D"));
        };
        let a = Matrix::from_vec(r, n, blk.values().to_vec())?;
        let b = Matrix::from_vec(m, rb, b_blk.values().to_vec())?;
        out.push(LoraAdapter::new(layer, b, a)?);
    }
    Ok(out)
}

/// Which adapter factors receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask {
    pub lora_a: bool,
    pub lora_b: bool,
}

impl GradMask {
    pub const ALL: GradMask = GradMask {
        lora_a: true,
        lora_b: true,
    };
    pub const B_ONLY: GradMask = GradMask {
        lora_a: false,
        lora_b: true,
    };
}

/// Loss and accuracy of a model on a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub acc: f64,
}

/// Linear layer with explicit (effective) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub bias: Vec<f64>,
}

/// A model with materialized effective weights; the object that linear
/// interpolation scans operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    arch: Architecture,
    layers: Vec<DenseLayer>,
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `-log softmax(z)[y]`, computed stably.
fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[y]
}

struct Activations {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl DenseModel {
    pub fn new(arch: Architecture, layers: Vec<DenseLayer>) -> Result<Self> {
        let dims = arch.layers();
        if dims.len() != layers.len() {
            return Err(Error::invalid("layer count does not match architecture"));
        }
        for (&(name, m, n), l) in dims.iter().zip(&layers) {
            if l.w.rows() != m || l.w.cols() != n || l.bias.len() != m {
                return Err(Error::shape(name, "dense layer dimensions do not match architecture"));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.d_in() {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.arch.d_in()
            )));
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.w.matvec(&cur);
            for (zi, bi) in z.iter_mut().zip(&l.bias) {
                *zi += bi;
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut cur, z));
        }
        Activations { inputs, logits: cur }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).logits)
    }

    /// Class probabilities `softmax(logits(x))`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        Ok(self.evaluate(batch)?.loss)
    }

    /// Mean cross-entropy and accuracy (ties resolved to the lowest class).
    pub fn evaluate(&self, batch: &[Example]) -> Result<Metrics> {
        if batch.is_empty() {
            return Err(Error::Empty("evaluation batch"));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for ex in batch {
            let z = self.logits(&ex.x)?;
            check_label(ex.y, self.arch.n_classes())?;
            loss += cross_entropy(&z, ex.y);
            if argmax(&z) == ex.y {
                correct += 1;
            }
        }
        let n = batch.len() as f64;
        Ok(Metrics {
            loss: loss / n,
            acc: correct as f64 / n,
        })
    }

    /// `λ·w1 + (1 − λ)·w2` over every effective weight and bias.
    pub fn interpolate(lambda: f64, w1: &DenseModel, w2: &DenseModel) -> Result<DenseModel> {
        if w1.arch != w2.arch {
            return Err(Error::shape("<architecture>", "models have different architectures"));
        }
        let layers = w1
            .layers
            .iter()
            .zip(&w2.layers)
            .map(|(a, b)| DenseLayer {
                w: a.w
                    .scale(lambda)
                    .add(&b.w.scale(1.0 - lambda))
                    .expect("same architecture"),
                bias: a
                    .bias
                    .iter()
                    .zip(&b.bias)
                    .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                    .collect(),
            })
            .collect();
        Ok(DenseModel { arch: w1.arch, layers })
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn check_label(y: usize, n_classes: usize) -> Result<()> {
    if y >= n_classes {
        return Err(Error::invalid(format!(
            "label {y} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Initialization scales for a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Base weights are drawn with standard deviation `base_scale / √fan_in`.
    pub base_scale: f64,
    /// Standard deviation of adapter `A` entries; `None` means `1/√r`.
    pub adapter_a_std: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            base_scale: 1.0,
            adapter_a_std: None,
        }
    }
}

/// Frozen base weights plus trainable LoRA adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    arch: Architecture,
    base: ParamVector,
    adapters: Vec<LoraAdapter>,
}

impl AdaptedModel {
    pub fn new(arch: Architecture, base: ParamVector, adapters: Vec<LoraAdapter>) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        if adapters.len() != layers.len() {
            return Err(Error::invalid(format!(
                "architecture has {} layers, got {} adapters",
                layers.len(),
                adapters.len()
            )));
        }
        for (&(name, m, n), ad) in layers.iter().zip(&adapters) {
            if ad.layer != name || ad.out_dim() != m || ad.in_dim() != n {
                return Err(Error::shape(name, "adapter does not fit layer"));
            }
            let w = base
                .block(&format!("{name}.{ROLE_BASE}"))
                .ok_or_else(|| Error::shape(format!("{name}.{ROLE_BASE}"), "missing base weight"))?;
            let b = base
                .block(&format!("{name}.{ROLE_BIAS}"))
                .ok_or_else(|| Error::shape(format!("{name}.{ROLE_BIAS}"), "missing bias"))?;
            if w.shape() != [m, n] || b.shape() != [m] {
                return Err(Error::shape(w.name(), "base weight shape does not fit layer"));
            }
        }
        if base.num_blocks() != 2 * layers.len() {
            return Err(Error::shape("<base>", "unexpected extra base blocks"));
        }
        Ok(Self { arch, base, adapters })
    }

    /// Random base weights and freshly initialized adapters (`B = 0`).
    pub fn init(arch: Architecture, rank: usize, init: &InitConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut base_rng = rng.child("base");
        let mut blocks = Vec::new();
        for (name, m, n) in arch.layers() {
            let std = init.base_scale / (n as f64).sqrt();
            let w = (0..m * n).map(|_| std * base_rng.normal()).collect();
            blocks.push(Block::new(format!("{name}.{ROLE_BASE}"), vec![m, n], w)?);
            blocks.push(Block::zeros(format!("{name}.{ROLE_BIAS}"), vec![m]));
        }
        let base = ParamVector::new(blocks)?;
        let adapters = Self::init_adapters(arch, rank, init, &mut rng.child("adapters"))?;
        Self::new(arch, base, adapters)
    }

    pub fn init_adapters(
        arch: Architecture,
        rank: usize,
        init: &InitConfig,
        rng: &mut Rng,
    ) -> Result<Vec<LoraAdapter>> {
        if rank == 0 || rank > arch.max_rank() {
            return Err(Error::invalid(format!(
                "rank {rank} must lie in 1..={}",
                arch.max_rank()
            )));
        }
        let a_std = init.adapter_a_std.unwrap_or(1.0 / (rank as f64).sqrt());
        arch.layers()
            .into_iter()
            .map(|(name, m, n)| LoraAdapter::init(name, m, n, rank, a_std, rng))
            .collect()
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank()
    }

    pub fn base(&self) -> &ParamVector {
        &self.base
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Same base, different adapters.
    pub fn with_adapters(&self, adapters: Vec<LoraAdapter>) -> Result<Self> {
        check_adapter_layout(&self.adapters, &adapters)?;
        Ok(Self {
            arch: self.arch,
            base: self.base.clone(),
            adapters,
        })
    }

    /// Same base, different base weights.
    pub fn with_base(&self, base: ParamVector) -> Result<Self> {
        self.base.check_compatible(&base)?;
        Self::new(self.arch, base, self.adapters.clone())
    }

    pub fn adapter_params(&self) -> ParamVector {
        adapters_to_params(&self.adapters)
    }

    pub fn with_adapter_params(&self, pv: &ParamVector) -> Result<Self> {
        self.adapter_params().check_compatible(pv)?;
        self.with_adapters(adapters_from_params(pv)?)
    }

    /// Base and adapter blocks together, as written to checkpoints.
    pub fn to_param_vector(&self) -> ParamVector {
        self.base
            .concat(&self.adapter_params())
            .expect("base and adapter names are disjoint")
    }

    pub fn from_param_vector(arch: Architecture, pv: &ParamVector) -> Result<Self> {
        let base = pv.filter(|b| b.role() == ROLE_BASE || b.role() == ROLE_BIAS);
        let adapters = adapters_from_params(pv)?;
        Self::new(arch, base, adapters)
    }

    /// Effective weights `W_pre + B·A`.
    pub fn effective(&self) -> DenseModel {
        let layers = self
            .arch
            .layers()
            .iter()
            .zip(&self.adapters)
            .map(|(&(name, m, n), ad)| {
                let w = self.base.block(&format!("{name}.{ROLE_BASE}")).expect("validated");
                let bias = self.base.block(&format!("{name}.{ROLE_BIAS}")).expect("validated");
                let w = Matrix::from_vec(m, n, w.values().to_vec()).expect("validated");
                DenseLayer {
                    w: w.add(&ad.compose_update()).expect("validated"),
                    bias: bias.values().to_vec(),
                }
            })
            .collect();
        DenseModel {
            arch: self.arch,
            layers,
        }
    }

    /// Base blocks with the adapter update folded in.
    pub fn folded_base(&self) -> ParamVector {
        let eff = self.effective();
        let blocks = self
            .arch
            .layers()
            .iter()
            .zip(eff.layers())
            .flat_map(|(&(name, m, n), l)| {
                [
                    Block::new(format!("{name}.{ROLE_BASE}"), vec![m, n], l.w.as_slice().to_vec()),
                    Block::new(format!("{name}.{ROLE_BIAS}"), vec![m], l.bias.clone()),
                ]
            })
            .collect::<Result<Vec<_>>>()
            .expect("shapes follow the architecture");
        ParamVector::new(blocks).expect("distinct layer names")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.effective().forward(x)
    }

    pub fn evaluate(&self, batch: &[Example]) -> Result<Metrics> {
        self.effective().evaluate(batch)
    }

    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        self.effective().loss(batch)
    }

    fn check_batch(&self, batch: &[Example]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for ex in batch {
            if ex.x.len() != self.arch.d_in() {
                return Err(Error::invalid(format!(
                    "input has dimension {}, model expects {}",
                    ex.x.len(),
                    self.arch.d_in()
                )));
            }
            check_label(ex.y, self.arch.n_classes())?;
        }
        Ok(())
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to the
    /// adapter coordinates selected by `mask` (others are zero).
    pub fn loss_and_grad(&self, batch: &[Example], mask: GradMask) -> Result<(f64, ParamVector)> {
        self.check_batch(batch)?;
        let ctx = Backprop::new(self);
        let mut grad = vec![0.0; ctx.len];
        let mut loss = 0.0;
        for ex in batch {
            let act = ctx.dense.activations(&ex.x);
            loss += cross_entropy(&act.logits, ex.y);
            let mut d = act.logits.clone();
            softmax_in_place(&mut d);
            d[ex.y] -= 1.0;
            ctx.accumulate(&act, &d, mask, 1.0, &mut grad);
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, self.adapter_params().with_flat(&grad)?))
    }

    /// Per-example loss gradients over all adapter coordinates.
    pub fn per_sample_grads(&self, batch: &[Example]) -> Result<Vec<ParamVector>> {
        self.check_batch(batch)?;
        let ctx = Backprop::new(self);
        let layout = self.adapter_params();
        batch
            .iter()
            .map(|ex| {
                let act = ctx.dense.activations(&ex.x);
                let mut d = act.logits.clone();
                softmax_in_place(&mut d);
                d[ex.y] -= 1.0;
                let mut g = vec![0.0; ctx.len];
                ctx.accumulate(&act, &d, GradMask::ALL, 1.0, &mut g);
                layout.with_flat(&g)
            })
            .collect()
    }

    /// Probabilities at `x` and, for every label `y`, the score
    /// `∇ log p(y|x)` over all adapter coordinates (flattened).
    pub(crate) fn scores(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if x.len() != self.arch.d_in() {
            return Err(Error::invalid("input dimension mismatch"));
        }
        let ctx = Backprop::new(self);
        let act = ctx.dense.activations(x);
        let mut p = act.logits.clone();
        softmax_in_place(&mut p);
        let scores = (0..p.len())
            .map(|y| {
                // score = −∂(cross-entropy)/∂θ
                let mut d = p.clone();
                d[y] -= 1.0;
                let mut g = vec![0.0; ctx.len];
                ctx.accumulate(&act, &d, GradMask::ALL, -1.0, &mut g);
                g
            })
            .collect();
        Ok((p, scores))
    }

    /// `adapters − lr · grad`.
    pub fn sgd_step(&self, grad: &ParamVector, lr: f64) -> Result<Self> {
        let updated = crate::params::axpby(1.0, &self.adapter_params(), -lr, grad)?;
        self.with_adapter_params(&updated)
    }
}

/// Cached effective weights and flat adapter offsets for backprop.
struct Backprop<'a> {
    model: &'a AdaptedModel,
    dense: DenseModel,
    /// Offset of each layer's A block in the flat adapter layout; B follows A.
    offsets: Vec<usize>,
    len: usize,
}

impl<'a> Backprop<'a> {
    fn new(model: &'a AdaptedModel) -> Self {
        let mut offsets = Vec::with_capacity(model.adapters.len());
        let mut len = 0;
        for ad in &model.adapters {
            offsets.push(len);
            len += ad.rank() * (ad.in_dim() + ad.out_dim());
        }
        Self {
            model,
            dense: model.effective(),
            offsets,
            len,
        }
    }

    /// Adds `scale · ∂(loss)/∂(adapters)` into `out`, where `dlogits` is the
    /// derivative of the per-example loss with respect to the logits.
    fn accumulate(&self, act: &Activations, dlogits: &[f64], mask: GradMask, scale: f64, out: &mut [f64]) {
        let mut delta = dlogits.to_vec();
        for l in (0..self.dense.layers.len()).rev() {
            let ad = &self.model.adapters[l];
            let u = &act.inputs[l];
            let r = ad.rank();
            let (n, m) = (ad.in_dim(), ad.out_dim());
            let off_a = self.offsets[l];
            let off_b = off_a + r * n;
            if mask.lora_b {
                // dB = δ (A u)ᵀ
                let au = ad.a.matvec(u);
                for i in 0..m {
                    let di = scale * delta[i];
                    if di == 0.0 {
                        continue;
                    }
                    let row = &mut out[off_b + i * r..off_b + (i + 1) * r];
                    for (o, &v) in row.iter_mut().zip(&au) {
                        *o += di * v;
                    }
                }
            }
            if mask.lora_a {
                // dA = (Bᵀ δ) uᵀ
                let btd = ad.b.t_matvec(&delta);
                for s in 0..r {
                    let ws = scale * btd[s];
                    if ws == 0.0 {
                        continue;
                    }
                    let row = &mut out[off_a + s * n..off_a + (s + 1) * n];
                    for (o, &v) in row.iter_mut().zip(u) {
                        *o += ws * v;
                    }
                }
            }
            if l > 0 {
                let back = self.dense.layers[l].w.t_matvec(&delta);
                // u = tanh(pre-activation), so d tanh = 1 − u².
                delta = back.iter().zip(u).map(|(g, h)| g * (1.0 - h * h)).collect();
            }
        }
    }
}

/// JSON sidecar describing a `PVEC` model checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub architecture: String,
    pub d_in: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_hidden: Option<usize>,
    pub n_classes: usize,
    pub rank: usize,
}

impl ModelDescriptor {
    pub fn of(model: &AdaptedModel) -> Self {
        match model.arch {
            Architecture::LinearSoftmax { d_in, n_classes } => Self {
                architecture: "linear_softmax".into(),
                d_in,
                d_hidden: None,
                n_classes,
                rank: model.rank(),
            },
            Architecture::Mlp1 {
                d_in,
                d_hidden,
                n_classes,
            } => Self {
                architecture: "mlp1".into(),
                d_in,
                d_hidden: Some(d_hidden),
                n_classes,
                rank: model.rank(),
            },
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        match (self.architecture.as_str(), self.d_hidden) {
            ("linear_softmax", None) => Ok(Architecture::LinearSoftmax {
                d_in: self.d_in,
                n_classes: self.n_classes,
            }),
            ("mlp1", Some(d_hidden)) => Ok(Architecture::Mlp1 {
                d_in: self.d_in,
                d_hidden,
                n_classes: self.n_classes,
            }),
            (a, _) => Err(Error::Format(format!("unknown or incomplete architecture `{a}`"))),
        }
    }
}

/// Writes `<path>` as `PVEC` and `<path>.json` as the descriptor.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &AdaptedModel) -> Result<()> {
    let path = path.as_ref();
    crate::params::write_pvec(path, &model.to_param_vector())?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&ModelDescriptor::of(model))?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AdaptedModel> {
    let path = path.as_ref();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let desc: ModelDescriptor = serde_json::from_slice(&std::fs::read(sidecar)?)?;
    let model = AdaptedModel::from_param_vector(desc.architecture()?, &crate::params::read_pvec(path)?)?;
    if model.rank() != desc.rank {
        return Err(Error::Format("descriptor rank disagrees with checkpoint".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(d_in: usize, n_classes: usize, rank: usize, seed: u64) -> AdaptedModel {
        AdaptedModel::init(
            Architecture::LinearSoftmax { d_in, n_classes },
            rank,
            &InitConfig::default(),
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn compose_update_examples() {
        let ad = LoraAdapter::init("fc", 3, 4, 2, 1.0, &mut Rng::new(1)).unwrap();
        assert!(ad.compose_update().as_slice().iter().all(|&v| v == 0.0));

        let b = Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap();
        let a = Matrix::from_rows(&[&[3.0, 4.0]]).unwrap();
        let ad = LoraAdapter::new("fc", b, a).unwrap();
        assert_eq!(
            ad.compose_update(),
            Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]]).unwrap()
        );
    }

    #[test]
    fn full_rank_identity_padding() {
        // m = 3, n = 2, r = 2: B = [I; 0], A = I gives [I; 0].
        let b = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        let ad = LoraAdapter::new("fc", b.clone(), Matrix::identity(2)).unwrap();
        assert_eq!(ad.compose_update(), b);
    }

    #[test]
    fn rank_bounds_enforced() {
        assert!(LoraAdapter::new("fc", Matrix::zeros(2, 3), Matrix::zeros(3, 5)).is_err());
        assert!(LoraAdapter::new("fc", Matrix::zeros(2, 2), Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let m = linear(3, 4, 1, 0);
        let zero = m.with_base(m.base().zeros_like()).unwrap();
        let p = zero.forward(&[1.0, -2.0, 0.5]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_softmax_of_first_column() {
        let arch = Architecture::LinearSoftmax { d_in: 2, n_classes: 2 };
        let dense = DenseModel::new(
            arch,
            vec![DenseLayer {
                w: Matrix::from_rows(&[&[1.0, 5.0], &[-1.0, 7.0]]).unwrap(),
                bias: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        let p = dense.forward(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        let expected = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];
        assert!((p[0] - expected[0]).abs() < 1e-15 && (p[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn probability_monotone_in_margin() {
        let arch = Architecture::LinearSoftmax { d_in: 1, n_classes: 2 };
        let mut last = 0.0;
        for k in 0..40 {
            let w = f64::from(k) * 2.0;
            let dense = DenseModel::new(
                arch,
                vec![DenseLayer {
                    w: Matrix::from_rows(&[&[w], &[0.0]]).unwrap(),
                    bias: vec![0.0; 2],
                }],
            )
            .unwrap();
            let p = dense.forward(&[1.0]).unwrap()[0];
            assert!(p >= last);
            last = p;
        }
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let m = linear(3, 2, 1, 0);
        assert!(m.forward(&[1.0]).is_err());
        assert!(matches!(m.loss_and_grad(&[], GradMask::ALL), Err(Error::Empty(_))));
        assert!(m.per_sample_grads(&[]).is_err());
        assert!(m
            .loss_and_grad(&[Example::new(vec![0.0; 3], 5)], GradMask::ALL)
            .is_err());
    }

    #[test]
    fn uniform_model_loss_is_ln_k() {
        let m = linear(3, 4, 1, 0);
        let zero = m.with_base(m.base().zeros_like()).unwrap();
        let (loss, _) = zero
            .loss_and_grad(&[Example::new(vec![1.0, 2.0, 3.0], 2)], GradMask::ALL)
            .unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_factor_has_zero_gradient() {
        let m = linear(4, 3, 2, 9);
        let m = m.sgd_step(&m.adapter_params().filled_like(0.1), 1.0).unwrap();
        let batch = [Example::new(vec![0.3, -1.0, 2.0, 0.5], 1)];
        let (_, g) = m.loss_and_grad(&batch, GradMask::B_ONLY).unwrap();
        assert!(g.block("fc.loraA").unwrap().values().iter().all(|&v| v == 0.0));
        assert!(g.block("fc.loraB").unwrap().values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_param_vector_round_trip() {
        let arch = Architecture::Mlp1 {
            d_in: 3,
            d_hidden: 4,
            n_classes: 2,
        };
        let m = AdaptedModel::init(arch, 2, &InitConfig::default(), &mut Rng::new(5)).unwrap();
        let pv = m.to_param_vector();
        let names: Vec<&str> = pv.blocks().iter().map(|b| b.name()).collect();
        assert_eq!(
            names,
            [
                "fc1.base",
                "fc1.bias",
                "fc2.base",
                "fc2.bias",
                "fc1.loraA",
                "fc1.loraB",
                "fc2.loraA",
                "fc2.loraB"
            ]
        );
        assert_eq!(AdaptedModel::from_param_vector(arch, &pv).unwrap(), m);
    }
}
