//! Parameter containers shared by every architecture.
//!
//! Containers are generic over the leaf type: `T = Tensor` for stored
//! parameters, `T = Var` once they are bound to a tape. `map` converts
//! between the two and hands every leaf its stable checkpoint name.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{BatchStats, NormSpec, Tape, Var};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

pub type Visitor<'a, T> = dyn FnMut(&str, &T) + 'a;
pub type VisitorMut<'a, T> = dyn FnMut(&str, &mut T) + 'a;
pub type Mapper<'a, T, U> = dyn FnMut(&str, &T) -> U + 'a;

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in×out`
    pub weight: T,
    /// `out`
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: fan_in_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Mapper<'_, T, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}/weight"), &self.weight),
            bias: f(&format!("{prefix}/bias"), &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}/weight"), &self.weight);
        f(&format!("{prefix}/bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{prefix}/weight"), &mut self.weight);
        f(&format!("{prefix}/bias"), &mut self.bias);
    }
}

/// Affine layers with ReLU between them and a linear output. No layers means
/// the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl Mlp<Tensor> {
    /// `widths = [in, hidden.., out]`.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| Linear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn identity() -> Self {
        Mlp { layers: Vec::new() }
    }

    pub fn out_width(&self) -> Option<usize> {
        self.layers.last().map(Linear::out_width)
    }
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Mapper<'_, T, U>) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("{prefix}/{i}"), f))
                .collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}/{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}/{i}"), f);
        }
    }
}

/// `x ↦ W_n(…relu(W_1 x + b_1)…) + b_n` applied row-wise.
pub fn mlp_apply(tape: &mut Tape, x: Var, mlp: &Mlp<Var>) -> Result<Var> {
    let mut h = x;
    let last = mlp.layers.len().saturating_sub(1);
    for (i, layer) in mlp.layers.iter().enumerate() {
        let w = tape.shape(layer.weight);
        if w[0] != tape.value(h).row_len() {
            return Err(Error::shape(
                "mlp_apply",
                format!("layer {i} expects width {}, got {}", w[0], tape.value(h).row_len()),
            ));
        }
        h = tape.matmul(h, layer.weight)?;
        h = tape.add_bias(h, layer.bias)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Learned scale and shift plus running statistics for one normalization
/// site. `slot` indexes the site in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: T,
    pub beta: T,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub slot: usize,
}

impl BatchNorm<Tensor> {
    pub fn init(width: usize, slot: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            slot,
        }
    }

    /// Exponential moving average with momentum [`BATCH_NORM_MOMENTUM`].
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

impl<T> BatchNorm<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Mapper<'_, T, U>) -> BatchNorm<U> {
        BatchNorm {
            gamma: f(&format!("{prefix}/gamma"), &self.gamma),
            beta: f(&format!("{prefix}/beta"), &self.beta),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            slot: self.slot,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}/gamma"), &self.gamma);
        f(&format!("{prefix}/beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{prefix}/gamma"), &mut self.gamma);
        f(&format!("{prefix}/beta"), &mut self.beta);
    }
}

/// Train/eval switch plus the batch statistics gathered during one forward
/// pass.
pub struct NormContext {
    pub train: bool,
    pub updates: Vec<(usize, BatchStats)>,
}

impl NormContext {
    pub fn new(train: bool) -> Self {
        NormContext {
            train,
            updates: Vec::new(),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var, bn: &BatchNorm<Var>, row_mask: &[f64]) -> Result<Var> {
        let spec = NormSpec {
            running_mean: &bn.running_mean,
            running_var: &bn.running_var,
            eps: BATCH_NORM_EPS,
            train: self.train,
        };
        let (y, stats) = tape.batch_norm(x, bn.gamma, bn.beta, row_mask, spec)?;
        if let Some(s) = stats {
            self.updates.push((bn.slot, s));
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_mlp_is_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![-1.0, 2.0]]));
        let mlp: Mlp<Var> = Mlp::identity().map("phi", &mut |_, t| tape.param(t));
        assert!(mlp.layers.is_empty());
        let y = mlp_apply(&mut tape, x, &mlp).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 2.0]);
    }

    #[test]
    fn names_are_stable() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&[3, 4, 2], &mut rng);
        let mut names = Vec::new();
        mlp.visit("classifier", &mut |n, _| names.push(n.to_string()));
        assert_eq!(
            names,
            ["classifier/0/weight", "classifier/0/bias", "classifier/1/weight", "classifier/1/bias"]
        );
    }

    #[test]
    fn fan_in_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = fan_in_uniform(16, 8, &mut rng);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
    }
}
