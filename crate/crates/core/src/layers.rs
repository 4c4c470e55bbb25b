//! Graph-level building blocks: intra- and inter-channel message passing,
//! multiset assembly, channel filters, soft assignment and pooling.
//!
//! All functions work on batched tensors `[b, n, ·]` recorded on a tape.
//! Node masks are `b·n` vectors with 1 for real nodes; padded nodes stay
//! exactly zero through every op here.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{mlp_apply, BatchNorm, Mapper, Mlp, NormContext, Visitor, VisitorMut};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard for all-zero rows in the post-convolution normalization.
pub const L2_EPS: f64 = 1e-12;

/// Per-layer transforms `W_1..W_K` shared by every intra and inter pass at
/// that layer, and one normalization site per (pass, step).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub weights: Vec<T>,
    /// `norms[pass][step]`; pass `(i, c)` of a `C`-channel layer is `i·C + c`.
    pub norms: Vec<Vec<BatchNorm<T>>>,
    pub channels: usize,
}

impl ConvStack<Tensor> {
    /// `slot` is advanced past every normalization site created.
    pub fn init(
        in_width: usize,
        hidden: usize,
        steps: usize,
        channels: usize,
        slot: &mut usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = (0..steps)
            .map(|k| {
                let fan_in = if k == 0 { in_width } else { hidden };
                crate::nn::fan_in_uniform(fan_in, hidden, rng)
            })
            .collect();
        let norms = (0..channels * channels)
            .map(|_| {
                (0..steps)
                    .map(|_| {
                        let bn = BatchNorm::init(hidden, *slot);
                        *slot += 1;
                        bn
                    })
                    .collect()
            })
            .collect();
        ConvStack {
            weights,
            norms,
            channels,
        }
    }
}

impl<T> ConvStack<T> {
    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    pub fn pass_norms(&self, i: usize, c: usize) -> &[BatchNorm<T>] {
        &self.norms[i * self.channels + c]
    }

    fn norm_prefix(&self, prefix: &str, pass: usize, step: usize) -> String {
        let (i, c) = (pass / self.channels, pass % self.channels);
        format!("{prefix}/bn/ch{i}_{c}/step{}", step + 1)
    }

    pub fn map<U>(&self, prefix: &str, f: &mut Mapper<'_, T, U>) -> ConvStack<U> {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| f(&format!("{prefix}/convW{}", k + 1), w))
            .collect();
        let norms = self
            .norms
            .iter()
            .enumerate()
            .map(|(p, steps)| {
                steps
                    .iter()
                    .enumerate()
                    .map(|(k, bn)| bn.map(&self.norm_prefix(prefix, p, k), f))
                    .collect()
            })
            .collect();
        ConvStack {
            weights,
            norms,
            channels: self.channels,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (k, w) in self.weights.iter().enumerate() {
            f(&format!("{prefix}/convW{}", k + 1), w);
        }
        for (p, steps) in self.norms.iter().enumerate() {
            for (k, bn) in steps.iter().enumerate() {
                bn.visit(&self.norm_prefix(prefix, p, k), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (k, w) in self.weights.iter_mut().enumerate() {
            f(&format!("{prefix}/convW{}", k + 1), w);
        }
        let channels = self.channels;
        for (p, steps) in self.norms.iter_mut().enumerate() {
            for (k, bn) in steps.iter_mut().enumerate() {
                let (i, c) = (p / channels, p % channels);
                bn.visit_mut(&format!("{prefix}/bn/ch{i}_{c}/step{}", k + 1), f);
            }
        }
    }

    pub fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNorm<T>)) {
        for (p, steps) in self.norms.iter().enumerate() {
            for (k, bn) in steps.iter().enumerate() {
                f(&self.norm_prefix(prefix, p, k), bn);
            }
        }
    }

    pub fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm<T>)) {
        let channels = self.channels;
        for (p, steps) in self.norms.iter_mut().enumerate() {
            for (k, bn) in steps.iter_mut().enumerate() {
                let (i, c) = (p / channels, p % channels);
                f(&format!("{prefix}/bn/ch{i}_{c}/step{}", k + 1), bn);
            }
        }
    }
}

/// Scalar weights `θ` over a multiset, scalar bias `b`, and the MLP `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFilter<T> {
    pub theta: T,
    pub bias: T,
    pub phi: Mlp<T>,
}

impl ChannelFilter<Tensor> {
    /// `θ = 1/m`, `b = 0`, `φ` with the given widths.
    pub fn init(multiset_len: usize, phi_widths: &[usize], rng: &mut impl Rng) -> Self {
        ChannelFilter {
            theta: Tensor::full(&[multiset_len], 1.0 / multiset_len as f64),
            bias: Tensor::scalar(0.0),
            phi: Mlp::init(phi_widths, rng),
        }
    }
}

impl<T> ChannelFilter<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut Mapper<'_, T, U>) -> ChannelFilter<U> {
        ChannelFilter {
            theta: f(&format!("{prefix}_theta"), &self.theta),
            bias: f(&format!("{prefix}_bias"), &self.bias),
            phi: self.phi.map(&format!("{prefix}_phi"), f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}_theta"), &self.theta);
        f(&format!("{prefix}_bias"), &self.bias);
        self.phi.visit(&format!("{prefix}_phi"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        f(&format!("{prefix}_theta"), &mut self.theta);
        f(&format!("{prefix}_bias"), &mut self.bias);
        self.phi.visit_mut(&format!("{prefix}_phi"), f);
    }
}

/// Ordered embeddings of one channel:
/// `[X, H_1..H_K, then for each other channel c ascending: H^{i,c}_1..H^{i,c}_K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multiset {
    pub entries: Vec<Var>,
}

impl Multiset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One convolution step `σ([H + A·N]·W)` followed by batch norm and row
/// normalization. For intra passes `N = H`.
#[allow(clippy::too_many_arguments)]
fn conv_step(
    tape: &mut Tape,
    norm: &mut NormContext,
    h: Var,
    adj: Var,
    neighbor: Var,
    weight: Var,
    bn: &BatchNorm<Var>,
    mask: &[f64],
) -> Result<Var> {
    let agg = tape.batch_matmul(adj, neighbor, false)?;
    let s = tape.add(h, agg)?;
    let t = tape.matmul(s, weight)?;
    let r = tape.relu(t)?;
    let b = norm.apply(tape, r, bn, mask)?;
    tape.row_l2_normalize(b, L2_EPS)
}

/// `H_k = σ([H_{k−1} + A·H_{k−1}]·W_k)`, `H_0 = X`, for `k = 1..K`.
pub fn message_pass_intra(
    tape: &mut Tape,
    norm: &mut NormContext,
    x: Var,
    adj: Var,
    weights: &[Var],
    norms: &[BatchNorm<Var>],
    mask: &[f64],
) -> Result<Vec<Var>> {
    if weights.is_empty() {
        return Err(Error::Config("message passing needs K >= 1".into()));
    }
    if norms.len() != weights.len() {
        return Err(Error::shape("message_pass_intra", "one norm per step required"));
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut h = x;
    for (w, bn) in weights.iter().zip(norms) {
        h = conv_step(tape, norm, h, adj, h, *w, bn, mask)?;
        out.push(h);
    }
    Ok(out)
}

/// `H^{i,c}_k = σ([H^{i,c}_{k−1} + A^{i,c}·H^c_{k−1}]·W_k)` with
/// `H^{i,c}_0 = X^i`. `neighbor` is `[H^c_0, .., H^c_{K−1}]` from channel
/// `c`'s own intra pass (`H^c_0 = X^c`).
#[allow(clippy::too_many_arguments)]
pub fn message_pass_inter(
    tape: &mut Tape,
    norm: &mut NormContext,
    x_i: Var,
    a_ic: Var,
    neighbor: &[Var],
    weights: &[Var],
    norms: &[BatchNorm<Var>],
    mask: &[f64],
) -> Result<Vec<Var>> {
    if weights.is_empty() {
        return Err(Error::Config("message passing needs K >= 1".into()));
    }
    if neighbor.len() != weights.len() || norms.len() != weights.len() {
        return Err(Error::shape(
            "message_pass_inter",
            format!("{} neighbor embeddings for K = {}", neighbor.len(), weights.len()),
        ));
    }
    let (sa, sx) = (tape.shape(a_ic), tape.shape(x_i));
    if sa.len() != sx.len() || sa[..sa.len() - 1] != sx[..sx.len() - 1] || sa[sa.len() - 1] != sa[sa.len() - 2] {
        return Err(Error::shape(
            "message_pass_inter",
            format!("A^(i,c) {sa:?} vs X^i {sx:?}"),
        ));
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut h = x_i;
    for ((w, bn), &nb) in weights.iter().zip(norms).zip(neighbor) {
        h = conv_step(tape, norm, h, a_ic, nb, *w, bn, mask)?;
        out.push(h);
    }
    Ok(out)
}

/// Assembles channel `channel`'s multiset. `inter` must hold exactly the
/// other channels' inter-pass sequences.
pub fn build_multiset(
    tape: &Tape,
    x: Var,
    intra: &[Var],
    inter: &BTreeMap<usize, Vec<Var>>,
    channel: usize,
    num_channels: usize,
) -> Result<Multiset> {
    let expected: Vec<usize> = (0..num_channels).filter(|&c| c != channel).collect();
    let present: Vec<usize> = inter.keys().copied().collect();
    if present != expected {
        return Err(Error::shape(
            "build_multiset",
            format!("channel {channel}: neighbor sequences for {present:?}, need {expected:?}"),
        ));
    }
    let mut entries = Vec::with_capacity(1 + intra.len() * num_channels);
    entries.push(x);
    entries.extend_from_slice(intra);
    for seq in inter.values() {
        if seq.len() != intra.len() {
            return Err(Error::shape("build_multiset", "inter sequence length differs from K"));
        }
        entries.extend_from_slice(seq);
    }
    let shape = tape.shape(x);
    if let Some(bad) = entries.iter().find(|&&e| tape.shape(e) != shape) {
        return Err(Error::shape(
            "build_multiset",
            format!("entry {:?} vs X {:?}", tape.shape(*bad), shape),
        ));
    }
    Ok(Multiset { entries })
}

/// `Z = φ(Σ_i θ_i·M_i + b)`, masked rows zeroed afterwards.
pub fn filter_apply(tape: &mut Tape, ms: &Multiset, filter: &ChannelFilter<Var>, mask: &[f64]) -> Result<Var> {
    if tape.value(filter.theta).numel() != ms.len() {
        return Err(Error::shape(
            "filter_apply",
            format!("θ has {} entries, multiset {}", tape.value(filter.theta).numel(), ms.len()),
        ));
    }
    let s = tape.weighted_sum(filter.theta, &ms.entries)?;
    let s = tape.add(s, filter.bias)?;
    let z = mlp_apply(tape, s, &filter.phi)?;
    tape.row_scale(z, mask)
}

/// Row-stochastic `n_l×n_next` assignment. Masked rows have all-zero logits
/// and therefore come out uniform.
pub fn compute_assignment(
    tape: &mut Tape,
    ms: &Multiset,
    pool_filter: &ChannelFilter<Var>,
    n_next: usize,
    mask: &[f64],
) -> Result<Var> {
    if n_next < 1 {
        return Err(Error::Config("assignment needs at least one cluster".into()));
    }
    let logits = filter_apply(tape, ms, pool_filter, mask)?;
    if tape.value(logits).row_len() != n_next {
        return Err(Error::shape(
            "compute_assignment",
            format!("pool φ outputs {}, expected {n_next}", tape.value(logits).row_len()),
        ));
    }
    tape.row_softmax(logits, None)
}

/// `X' = SᵀZ`, `A' = SᵀAS`.
pub fn diffpool(tape: &mut Tape, z: Var, s: Var, adj: Var) -> Result<(Var, Var)> {
    let x_next = tape.batch_matmul(s, z, true)?;
    let a_s = tape.batch_matmul(adj, s, false)?;
    let a_next = tape.batch_matmul(s, a_s, true)?;
    Ok((x_next, a_next))
}

/// `S_iᵀ · A · S_c`.
pub fn inter_adjacency(tape: &mut Tape, s_i: Var, s_c: Var, a_parents: Var) -> Result<Var> {
    let right = tape.batch_matmul(a_parents, s_c, false)?;
    inter_adjacency_from_product(tape, s_i, right)
}

/// `S_iᵀ · (A·S_c)` when the right product is shared between pairs.
pub fn inter_adjacency_from_product(tape: &mut Tape, s_i: Var, a_s_c: Var) -> Result<Var> {
    tape.batch_matmul(s_i, a_s_c, true)
}
