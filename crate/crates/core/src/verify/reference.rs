//! Straight-line forward pass over nested `Vec`s with naive triple-loop
//! products. Shares nothing with the tape beyond reading the parameter
//! tensors, and is generic over the scalar so the loss can also be taken in
//! double-double precision for finite differences.

use std::collections::HashMap;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::graphio::Graph;
use crate::layers::{ChannelFilter, ConvStack, L2_EPS};
use crate::model::{Body, ModelConfig, ModelParams};
use crate::nn::{BatchNorm, Mlp, BATCH_NORM_EPS};
use crate::tensor::Tensor;

/// Scalar arithmetic the reference needs.
pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Double-double scalar: `twofloat` addition, multiplication and square
/// root, with division, `exp` and `ln` done here. The crate's own versions
/// of those three stop well short of double-double accuracy, which shows up
/// directly as noise in difference quotients.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DoubleDouble(pub TwoFloat);

impl DoubleDouble {
    fn hi(self) -> f64 {
        self.0.hi()
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        DoubleDouble(self.0 + o.0)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        DoubleDouble(self.0 - o.0)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        DoubleDouble(self.0 * o.0)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble(-self.0)
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    /// Long division: three `f64` quotient digits, each taken from an exact
    /// double-double remainder.
    fn div(self, o: Self) -> Self {
        let b = o.0;
        let q1 = self.0.hi() / b.hi();
        let r = self.0 - b * q1;
        let q2 = r.hi() / b.hi();
        let r = r - b * q2;
        let q3 = r.hi() / b.hi();
        DoubleDouble(TwoFloat::from(q1) + q2 + q3)
    }
}

impl Real for DoubleDouble {
    fn of(x: f64) -> Self {
        DoubleDouble(TwoFloat::from(x))
    }
    fn to_f64(self) -> f64 {
        self.0.into()
    }
    fn sqrt(self) -> Self {
        DoubleDouble(self.0.sqrt())
    }
    fn exp(self) -> Self {
        dd_exp(self)
    }
    fn ln(self) -> Self {
        // Newton on e^y = x; each step doubles the correct digits
        let mut y = Self::of(f64::ln(self.hi()));
        for _ in 0..2 {
            y = y + self * dd_exp(-y) - Self::of(1.0);
        }
        y
    }
}

/// `e^x = 2^k · (e^{r/1024})^1024` with `x = k·ln 2 + r` and a Taylor
/// series for the small factor.
fn dd_exp(x: DoubleDouble) -> DoubleDouble {
    let of = DoubleDouble::of;
    if x.hi() < -700.0 {
        return of(0.0);
    }
    let k = (x.hi() / std::f64::consts::LN_2).round();
    let r = (x - DoubleDouble(twofloat::consts::LN_2) * of(k)) * of(1.0 / 1024.0);
    let mut term = of(1.0);
    let mut sum = of(1.0);
    for i in 1..=14 {
        term = term * r / of(i as f64);
        sum = sum + term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum * of(2f64.powi(k as i32))
}

/// A parameter or activation as rows. Vectors are a single row.
pub type Mat<R> = Vec<Vec<R>>;

fn to_mat<R: Real>(t: &Tensor) -> Mat<R> {
    let c = t.row_len();
    t.data().chunks(c).map(|r| r.iter().map(|&v| R::of(v)).collect()).collect()
}

/// Parameters lifted to `R`. A coordinate can be shifted by `delta` to take
/// finite differences without rounding the shift into `f64`.
pub fn lift_params<R: Real>(params: &ModelParams<Tensor>, shift: Option<(&str, usize, R)>) -> ModelParams<Mat<R>> {
    params.map(&mut |name, t| {
        let mut m: Mat<R> = to_mat(t);
        if let Some((target, index, delta)) = shift {
            if name == target {
                let c = t.row_len();
                m[index / c][index % c] = m[index / c][index % c] + delta;
            }
        }
        m
    })
}

fn zeros<R: Real>(n: usize, m: usize) -> Mat<R> {
    vec![vec![R::of(0.0); m]; n]
}

fn product<R: Real>(a: &Mat<R>, b: &Mat<R>) -> Mat<R> {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = R::of(0.0);
            for p in 0..k {
                s = s + a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose<R: Real>(a: &Mat<R>) -> Mat<R> {
    let m = a.first().map_or(0, Vec::len);
    (0..m).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn plus<R: Real>(a: &Mat<R>, b: &Mat<R>) -> Mat<R> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p + q).collect())
        .collect()
}

fn relu<R: Real>(v: R) -> R {
    v.max(R::of(0.0))
}

fn mlp<R: Real>(x: &Mat<R>, net: &Mlp<Mat<R>>) -> Mat<R> {
    let mut h = x.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        h = product(&h, &layer.weight);
        let b = &layer.bias[0];
        for row in &mut h {
            for (v, &bias) in row.iter_mut().zip(b) {
                *v = *v + bias;
                if i + 1 < net.layers.len() {
                    *v = relu(*v);
                }
            }
        }
    }
    h
}

/// One message-passing step for every graph of the batch. Normalization
/// statistics are pooled over all rows of all graphs in train mode.
fn conv_step<R: Real>(
    h: &[Mat<R>],
    adj: &[Mat<R>],
    neighbor: &[Mat<R>],
    w: &Mat<R>,
    bn: &BatchNorm<Mat<R>>,
    train: bool,
) -> Vec<Mat<R>> {
    let pre: Vec<Mat<R>> = (0..h.len())
        .map(|g| {
            let mut p = product(&plus(&h[g], &product(&adj[g], &neighbor[g])), w);
            p.iter_mut().flatten().for_each(|v| *v = relu(*v));
            p
        })
        .collect();
    let d = w[0].len();
    let rows: Vec<&Vec<R>> = pre.iter().flatten().collect();
    let eps = R::of(BATCH_NORM_EPS);
    let (mean, inv_std): (Vec<R>, Vec<R>) = if train && rows.len() >= 2 {
        let count = R::of(rows.len() as f64);
        let mean: Vec<R> = (0..d)
            .map(|j| rows.iter().fold(R::of(0.0), |acc, r| acc + r[j]) / count)
            .collect();
        let inv = (0..d)
            .map(|j| {
                let var = rows
                    .iter()
                    .fold(R::of(0.0), |acc, r| acc + (r[j] - mean[j]) * (r[j] - mean[j]))
                    / count;
                R::of(1.0) / (var + eps).sqrt()
            })
            .collect();
        (mean, inv)
    } else {
        (
            bn.running_mean.iter().map(|&m| R::of(m)).collect(),
            bn.running_var.iter().map(|&v| R::of(1.0) / (R::of(v) + eps).sqrt()).collect(),
        )
    };
    let (gamma, beta) = (&bn.gamma[0], &bn.beta[0]);
    pre.iter()
        .map(|m| {
            m.iter()
                .map(|row| {
                    let normed: Vec<R> = (0..d)
                        .map(|j| gamma[j] * (row[j] - mean[j]) * inv_std[j] + beta[j])
                        .collect();
                    let sq = normed.iter().fold(R::of(0.0), |acc, &v| acc + v * v);
                    let norm = sq.sqrt().max(R::of(L2_EPS));
                    normed.iter().map(|&v| v / norm).collect()
                })
                .collect()
        })
        .collect()
}

/// `[H_1..H_K]` for pass `(i, c)`, per graph. Inter passes take the
/// neighbor's `[H^c_0..H^c_{K−1}]`; intra passes use their own previous step.
fn passes<R: Real>(
    conv: &ConvStack<Mat<R>>,
    i: usize,
    c: usize,
    x: &[Mat<R>],
    adj: &[Mat<R>],
    neighbor_seq: Option<&[Vec<Mat<R>>]>,
    train: bool,
) -> Vec<Vec<Mat<R>>> {
    let norms = conv.pass_norms(i, c);
    let mut out = Vec::with_capacity(conv.weights.len());
    let mut h = x.to_vec();
    for (k, (w, bn)) in conv.weights.iter().zip(norms).enumerate() {
        let nb = match neighbor_seq {
            Some(seq) => seq[k].clone(),
            None => h.clone(),
        };
        h = conv_step(&h, adj, &nb, w, bn, train);
        out.push(h.clone());
    }
    out
}

fn apply_filter<R: Real>(entries: &[Mat<R>], f: &ChannelFilter<Mat<R>>) -> Mat<R> {
    let theta = &f.theta[0];
    let b = f.bias[0][0];
    let (n, d) = (entries[0].len(), entries[0][0].len());
    let mut s = vec![vec![b; d]; n];
    for (e, &t) in entries.iter().zip(theta) {
        for r in 0..n {
            for c in 0..d {
                s[r][c] = s[r][c] + t * e[r][c];
            }
        }
    }
    mlp(&s, &f.phi)
}

fn softmax_rows<R: Real>(a: &Mat<R>) -> Mat<R> {
    a.iter()
        .map(|row| {
            let mx = row.iter().copied().fold(row[0], R::max);
            let e: Vec<R> = row.iter().map(|&v| (v - mx).exp()).collect();
            let s = e.iter().fold(R::of(0.0), |acc, &v| acc + v);
            e.iter().map(|&v| v / s).collect()
        })
        .collect()
}

fn column_max<R: Real>(a: &Mat<R>) -> Vec<R> {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).fold(a[0][j], R::max))
        .collect()
}

/// Mean over rows of `−Σ p ln p`, pooled across the batch.
fn mean_row_entropy<R: Real>(ss: &[Mat<R>]) -> R {
    let mut total = R::of(0.0);
    let mut count = 0usize;
    for row in ss.iter().flatten() {
        for &p in row {
            if p > R::of(0.0) {
                total = total - p * p.ln();
            }
        }
        count += 1;
    }
    total / R::of(count as f64)
}

fn per_graph<T, U>(xs: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    xs.iter().map(f).collect()
}

/// Logits of each graph plus the summed mean row entropy of every
/// assignment matrix.
fn run<R: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<Mat<R>>,
    graphs: &[&Graph],
    train: bool,
) -> Result<(Vec<Vec<R>>, R)> {
    if graphs.is_empty() {
        return Err(Error::shape("reference", "empty batch"));
    }
    for g in graphs {
        let n = g.num_nodes();
        if n == 0 || n > cfg.max_nodes || g.features.row_len() != cfg.d_in {
            return Err(Error::shape("reference", "graph does not fit the model"));
        }
    }
    let plans = cfg.plan_shapes()?;
    let x0: Vec<Mat<R>> = per_graph(graphs, |g| to_mat(&g.features));
    let a0: Vec<Mat<R>> = per_graph(graphs, |g| to_mat(&g.adjacency));
    let mut readout: Vec<Vec<R>> = vec![Vec::with_capacity(cfg.readout_width()); graphs.len()];
    let mut entropy = R::of(0.0);

    match &params.body {
        Body::Flat(conv) => {
            let h = passes(conv, 0, 0, &x0, &a0, None, train);
            for (r, z) in readout.iter_mut().zip(h.last().unwrap()) {
                r.extend(column_max(z));
            }
        }
        Body::DiffPool(layers) => {
            let (mut x, mut a) = (x0, a0);
            for layer in layers {
                let h = passes(&layer.conv, 0, 0, &x, &a, None, train);
                let z = h.last().unwrap().clone();
                for (r, zg) in readout.iter_mut().zip(&z) {
                    r.extend(column_max(zg));
                }
                let Some(head) = &layer.pool_head else { break };
                let s: Vec<Mat<R>> = per_graph(&z, |zg| softmax_rows(&mlp(zg, head)));
                entropy = entropy + mean_row_entropy(&s);
                let st: Vec<Mat<R>> = per_graph(&s, transpose);
                x = (0..z.len()).map(|g| product(&st[g], &z[g])).collect();
                a = (0..z.len())
                    .map(|g| product(&product(&st[g], &a[g]), &s[g]))
                    .collect();
            }
        }
        Body::MultiChannel(layers) => {
            let k = cfg.steps;
            let mut xs = vec![x0];
            let mut adj: HashMap<(usize, usize), Vec<Mat<R>>> = HashMap::from([((0, 0), a0)]);
            for (l, layer) in layers.iter().enumerate() {
                let c_l = plans[l].channels;
                let t = cfg.channel_expansion[l];
                let intra: Vec<Vec<Vec<Mat<R>>>> = (0..c_l)
                    .map(|i| passes(&layer.conv, i, i, &xs[i], &adj[&(i, i)], None, train))
                    .collect();
                // multisets[i][entry][graph]
                let mut multisets: Vec<Vec<Vec<Mat<R>>>> = Vec::with_capacity(c_l);
                for i in 0..c_l {
                    let x_entry = match &layer.input_proj {
                        Some(p) => per_graph(&xs[i], |x| product(x, p)),
                        None => xs[i].clone(),
                    };
                    let mut ms = vec![x_entry];
                    ms.extend(intra[i].iter().cloned());
                    for c in (0..c_l).filter(|&c| c != i) {
                        let mut seq = vec![xs[c].clone()];
                        seq.extend(intra[c][..k - 1].iter().cloned());
                        ms.extend(passes(&layer.conv, i, c, &xs[i], &adj[&(i, c)], Some(&seq), train));
                    }
                    multisets.push(ms);
                }
                let entries_of = |i: usize, g: usize| -> Vec<Mat<R>> {
                    multisets[i].iter().map(|e| e[g].clone()).collect()
                };
                let nb = graphs.len();
                // zs[j][graph]
                let zs: Vec<Vec<Mat<R>>> = layer
                    .embed
                    .iter()
                    .enumerate()
                    .map(|(j, f)| (0..nb).map(|g| apply_filter(&entries_of(j / t, g), f)).collect())
                    .collect();
                for (g, r) in readout.iter_mut().enumerate() {
                    let mut y = vec![R::of(0.0); cfg.hidden];
                    for z in &zs {
                        for (acc, v) in y.iter_mut().zip(column_max(&z[g])) {
                            *acc = *acc + v;
                        }
                    }
                    r.extend(y);
                }
                if layer.pool.is_empty() {
                    break;
                }
                let ss: Vec<Vec<Mat<R>>> = layer
                    .pool
                    .iter()
                    .enumerate()
                    .map(|(j, f)| {
                        (0..nb)
                            .map(|g| softmax_rows(&apply_filter(&entries_of(j / t, g), f)))
                            .collect()
                    })
                    .collect();
                for s in &ss {
                    entropy = entropy + mean_row_entropy(s);
                }
                let mut next_adj = HashMap::new();
                for (j, sj) in ss.iter().enumerate() {
                    for (jp, sjp) in ss.iter().enumerate() {
                        let parents = &adj[&(j / t, jp / t)];
                        let a = (0..nb)
                            .map(|g| product(&product(&transpose(&sj[g]), &parents[g]), &sjp[g]))
                            .collect();
                        next_adj.insert((j, jp), a);
                    }
                }
                xs = zs
                    .iter()
                    .zip(&ss)
                    .map(|(z, s)| (0..nb).map(|g| product(&transpose(&s[g]), &z[g])).collect())
                    .collect();
                adj = next_adj;
            }
        }
    }
    let logits = mlp(&readout, &params.classifier);
    Ok((logits, entropy))
}

/// Eval-mode logits of one unpadded graph.
pub fn reference_forward(model: &crate::model::Model, graph: &Graph) -> Result<Vec<f64>> {
    let params = lift_params::<f64>(&model.params, None);
    let (logits, _) = run(&model.config, &params, &[graph], false)?;
    Ok(logits.into_iter().next().unwrap())
}

/// Train-mode loss (mean cross-entropy plus the weighted assignment
/// entropy) over a batch of unpadded graphs.
pub fn reference_loss<R: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<Mat<R>>,
    graphs: &[&Graph],
    labels: &[usize],
) -> Result<R> {
    if labels.len() != graphs.len() || labels.iter().any(|&y| y >= cfg.num_classes) {
        return Err(Error::shape("reference_loss", "labels do not match the batch"));
    }
    let (logits, entropy) = run(cfg, params, graphs, true)?;
    let mut ce = R::of(0.0);
    for (row, &y) in logits.iter().zip(labels) {
        let mx = row.iter().copied().fold(row[0], R::max);
        let sum = row.iter().fold(R::of(0.0), |acc, &v| acc + (v - mx).exp());
        ce = ce + mx + sum.ln() - row[y];
    }
    let ce = ce / R::of(labels.len() as f64);
    if cfg.entropy_weight == 0.0 {
        return Ok(ce);
    }
    Ok(ce + R::of(cfg.entropy_weight) * entropy)
}
