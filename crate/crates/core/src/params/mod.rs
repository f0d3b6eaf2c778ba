//! Flat parameter containers.
//!
//! A [`ParamVector`] is an ordered list of named, shaped blocks of `f64`
//! values. Models, gradients, task vectors, Fisher diagonals and posterior
//! variances are all carried in this one type so that every algebraic step
//! (averaging, convex combination, traces) is written once.
//!
//! Block names follow `<layer>.<role>`, where role is one of `loraA`,
//! `loraB`, `base` or `bias`.

mod codec;
mod rng;

pub use codec::{deserialize, read_pvec, serialize, serialized_len, write_pvec, FORMAT_VERSION, MAGIC};
pub use rng::Rng;

use crate::error::{Error, Result};

/// One named block of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::shape(
                name,
                format!("shape {:?} holds {} values, got {}", shape, count, values.len()),
            ));
        }
        Ok(Self { name, shape, values })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; count],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The role suffix of the block name (`loraA` for `fc1.loraA`).
    pub fn role(&self) -> &str {
        self.name.rsplit_once('.').map_or("", |(_, r)| r)
    }

    /// The layer prefix of the block name (`fc1` for `fc1.loraA`).
    pub fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(&self.name, |(l, _)| l)
    }
}

/// Ordered, named collection of real-valued parameter blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    blocks: Vec<Block>,
}

impl ParamVector {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::invalid(format!("duplicate block name `{}`", b.name)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Total coordinate count over all blocks.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All coordinates in block order.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.values.iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    /// Same layout as `self`, every coordinate zero.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    /// Same layout as `self`, every coordinate `value`.
    pub fn filled_like(&self, value: f64) -> Self {
        self.map(|_| value)
    }

    /// Same layout as `self`, values taken in order from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::shape(
                "<all>",
                format!("expected {} coordinates, got {}", self.len(), flat.len()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for b in &mut out.blocks {
            let n = b.values.len();
            b.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Checks that names, order and shapes agree; reports the first mismatch.
    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            let block = self
                .blocks
                .iter()
                .zip(&other.blocks)
                .find(|(a, b)| a.name != b.name || a.shape != b.shape)
                .map(|(a, _)| a.name.clone())
                .or_else(|| {
                    let shorter = self.blocks.len().min(other.blocks.len());
                    self.blocks
                        .get(shorter)
                        .or_else(|| other.blocks.get(shorter))
                        .map(|b| b.name.clone())
                })
                .unwrap_or_default();
            return Err(Error::shape(
                block,
                format!("block count {} vs {}", self.blocks.len(), other.blocks.len()),
            ));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name {
                return Err(Error::shape(a.name.clone(), format!("name differs from `{}`", b.name)));
            }
            if a.shape != b.shape {
                return Err(Error::shape(
                    a.name.clone(),
                    format!("shape {:?} vs {:?}", a.shape, b.shape),
                ));
            }
        }
        Ok(())
    }

    pub fn is_compatible(&self, other: &ParamVector) -> bool {
        self.check_compatible(other).is_ok()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                name: b.name.clone(),
                shape: b.shape.clone(),
                values: b.values.iter().map(|&v| f(v)).collect(),
            })
            .collect();
        Self { blocks }
    }

    /// Coordinate-wise binary operation on shape-compatible vectors.
    pub fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| Block {
                name: a.name.clone(),
                shape: a.shape.clone(),
                values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
            })
            .collect();
        Ok(Self { blocks })
    }

    /// Keeps only the blocks for which `keep` returns true, in order.
    pub fn filter(&self, keep: impl Fn(&Block) -> bool) -> Self {
        Self {
            blocks: self.blocks.iter().filter(|b| keep(b)).cloned().collect(),
        }
    }

    /// Concatenates the blocks of `self` and `other`.
    pub fn concat(&self, other: &ParamVector) -> Result<Self> {
        let mut blocks = self.blocks.clone();
        blocks.extend(other.blocks.iter().cloned());
        Self::new(blocks)
    }

    /// Sum of all coordinates, sequential in block order.
    pub fn sum(&self) -> f64 {
        self.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .iter()
            .zip(other.iter())
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }
}

/// `alpha * x + beta * y`, coordinate-wise.
pub fn axpby(alpha: f64, x: &ParamVector, beta: f64, y: &ParamVector) -> Result<ParamVector> {
    x.zip_with(y, |a, b| alpha * a + beta * b)
}

/// Inner product, accumulated left to right in block order.
pub fn dot(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    x.check_compatible(y)?;
    Ok(x.iter().zip(y.iter()).fold(0.0, |acc, (a, b)| acc + a * b))
}

/// Incremental uniform mean of shape-compatible vectors, in input order.
///
/// `m_k = m_{k-1} + (x_k - m_{k-1}) / k` returns the input bit-exactly when
/// every input is identical.
pub fn mean<'a>(items: impl IntoIterator<Item = &'a ParamVector>) -> Result<ParamVector> {
    let mut iter = items.into_iter();
    let first = iter.next().ok_or(Error::Empty("mean of zero vectors"))?;
    let mut acc = first.clone();
    for (k, x) in iter.enumerate() {
        acc.check_compatible(x)?;
        let k = (k + 2) as f64;
        for (ab, xb) in acc.blocks.iter_mut().zip(&x.blocks) {
            for (a, &v) in ab.values.iter_mut().zip(&xb.values) {
                *a += (v - *a) / k;
            }
        }
    }
    Ok(acc)
}
