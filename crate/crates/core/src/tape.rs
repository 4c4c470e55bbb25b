//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends one node to the [`Tape`]; nodes only ever reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Test hook that deliberately breaks one gradient rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Scales the ReLU pass-through gradient.
    ReluGradScale(f64),
}

/// Train-mode batch-norm statistics, handed back to the caller so running
/// averages can be updated outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<f64>,
}

/// Running statistics and mode for one batch-norm application.
#[derive(Clone, Copy, Debug)]
pub struct NormSpec<'a> {
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
    pub eps: f64,
    pub train: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_a: bool,
    },
    AddBias(Var, Var),
    Relu(Var),
    RowSoftmax(Var),
    RowL2Normalize {
        a: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        mask: Vec<f64>,
        train: bool,
    },
    RowScale {
        a: Var,
        scale: Vec<f64>,
    },
    MaxOverRows {
        a: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Concat(Vec<Var>),
    WeightedSum {
        theta: Var,
        entries: Vec<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RowEntropy {
        p: Var,
        mask: Vec<f64>,
        count: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push_raw(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Pointwise add or multiply. Shapes must match unless one side is a
    /// scalar, which is broadcast.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElementwiseKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match kind {
            ElementwiseKind::Add => "add",
            ElementwiseKind::Mul => "mul",
        };
        let f = |x: f64, y: f64| match kind {
            ElementwiseKind::Add => x + y,
            ElementwiseKind::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, s)).collect())
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Tensor::from_parts(tb.shape().to_vec(), tb.data().iter().map(|&y| f(s, y)).collect())
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        };
        let op = match kind {
            ElementwiseKind::Add => Op::Add(a, b),
            ElementwiseKind::Mul => Op::Mul(a, b),
        };
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        self.push("scalar_mul", out, Op::Scale(a, c), &[a])
    }

    /// Add a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        self.push("scalar_add", out, Op::Shift(a), &[a])
    }

    /// `a · b` where `a` is `[.., k]` (all leading axes flattened into rows)
    /// and `b` is a `k×m` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.row_len() != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.num_rows(), ta.row_len(), tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(ta.data(), tb.data(), &mut out, n, k, m, false, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Per-batch-entry product `op(a) · b` with `op` the optional transpose.
    /// Both operands are rank 2, or both rank 3 with equal batch size.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = ta.batched_dims().zip(tb.batched_dims());
        let ((ba, ra, ca), (bb, rb, cb)) = match dims {
            Some(d) if ta.rank() == tb.rank() => d,
            _ => {
                return Err(Error::shape(
                    "batch_matmul",
                    format!("{:?} · {:?}", ta.shape(), tb.shape()),
                ))
            }
        };
        let (n, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        if ba != bb || k != rb {
            return Err(Error::shape(
                "batch_matmul",
                format!("{:?}{} · {:?}", ta.shape(), if trans_a { "ᵀ" } else { "" }, tb.shape()),
            ));
        }
        let m = cb;
        let mut out = vec![0.0; ba * n * m];
        for bi in 0..ba {
            gemm_acc(
                &ta.data()[bi * ra * ca..(bi + 1) * ra * ca],
                &tb.data()[bi * rb * cb..(bi + 1) * rb * cb],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
                trans_a,
                false,
            );
        }
        let shape = if ta.rank() == 2 { vec![n, m] } else { vec![ba, n, m] };
        self.push(
            "batch_matmul",
            Tensor::from_parts(shape, out),
            Op::BatchMatMul { a, b, trans_a },
            &[a, b],
        )
    }

    /// Adds vector `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let m = ta.row_len();
        if tb.numel() != m {
            return Err(Error::shape(
                "add_bias",
                format!("rows of width {m}, bias {:?}", tb.shape()),
            ));
        }
        let bias_data = tb.data();
        let data = ta
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(bias_data).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        );
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Softmax along the trailing axis. `col_mask[j] == false` pins column
    /// `j` to probability zero.
    pub fn row_softmax(&mut self, a: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let m = t.row_len();
        if let Some(mask) = col_mask {
            if mask.len() != m {
                return Err(Error::shape("row_softmax", "column mask width"));
            }
            if !mask.iter().any(|&keep| keep) {
                return Err(Error::FullyMasked {
                    op: "row_softmax",
                    row: 0,
                });
            }
        }
        let keep = |j: usize| col_mask.is_none_or(|mk| mk[j]);
        let mut out = vec![0.0; t.numel()];
        for (row, orow) in t.data().chunks(m).zip(out.chunks_mut(m)) {
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, (o, &x)) in orow.iter_mut().zip(row).enumerate() {
                if keep(j) {
                    *o = (x - mx).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("row_softmax", out, Op::RowSoftmax(a), &[a])
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let m = t.row_len();
        let mut norms = Vec::with_capacity(t.num_rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(m) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|x| x / denom));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("row_l2_normalize", out, Op::RowL2Normalize { a, eps, norms }, &[a])
    }

    /// Per-feature normalization over the rows of `x` whose `row_mask` entry
    /// is nonzero. Masked rows come out as zero.
    ///
    /// In train mode with at least two unmasked rows the batch statistics are
    /// used and returned; otherwise the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        row_mask: &[f64],
        spec: NormSpec<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        let d = t.row_len();
        let rows = t.num_rows();
        if row_mask.len() != rows
            || self.value(gamma).numel() != d
            || self.value(beta).numel() != d
            || spec.running_mean.len() != d
            || spec.running_var.len() != d
        {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?}, mask {}, features {d}", t.shape(), row_mask.len()),
            ));
        }
        let active = row_mask.iter().filter(|&&w| w != 0.0).count();
        let use_batch = spec.train && active >= 2;
        let (mean, inv_std, stats) = if use_batch {
            let count = active as f64;
            let mut mean = vec![0.0; d];
            for (row, &w) in t.data().chunks(d).zip(row_mask) {
                if w != 0.0 {
                    for (acc, v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= count);
            let mut var = vec![0.0; d];
            for (row, &w) in t.data().chunks(d).zip(row_mask) {
                if w != 0.0 {
                    for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
            }
            let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
            let unbiased = var.iter().map(|v| v / (count - 1.0)).collect();
            let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + spec.eps).sqrt()).collect();
            (
                mean.clone(),
                inv_std,
                Some(BatchStats {
                    mean,
                    var: unbiased,
                }),
            )
        } else {
            let inv_std = spec
                .running_var
                .iter()
                .map(|v| 1.0 / (v + spec.eps).sqrt())
                .collect();
            (spec.running_mean.to_vec(), inv_std, None)
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for (r, &w) in row_mask.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for j in 0..d {
                let idx = r * d + j;
                let xh = (t.data()[idx] - mean[j]) * inv_std[j];
                x_hat[idx] = xh;
                out[idx] = g[j] * xh + b[j];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            mask: row_mask.to_vec(),
            train: use_batch,
        };
        let v = self.push("batch_norm", out, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Multiplies row `r` of `a` by the constant `scale[r]`.
    pub fn row_scale(&mut self, a: Var, scale: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let m = t.row_len();
        if scale.len() != t.num_rows() {
            return Err(Error::shape(
                "row_scale",
                format!("{} rows, {} scales", t.num_rows(), scale.len()),
            ));
        }
        let data = t
            .data()
            .chunks(m)
            .zip(scale)
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(
            "row_scale",
            out,
            Op::RowScale {
                a,
                scale: scale.to_vec(),
            },
            &[a],
        )
    }

    /// Column-wise max over the rows of each batch entry, skipping rows whose
    /// mask entry is zero. `[n, d] -> [d]`, `[b, n, d] -> [b, d]`. Ties go to
    /// the lowest row index.
    pub fn max_over_rows(&mut self, a: Var, row_mask: Option<&[f64]>) -> Result<Var> {
        let t = self.value(a);
        let (batch, n, d) = t
            .batched_dims()
            .ok_or_else(|| Error::shape("max_over_rows", format!("{:?}", t.shape())))?;
        if let Some(mask) = row_mask {
            if mask.len() != batch * n {
                return Err(Error::shape("max_over_rows", "row mask length"));
            }
        }
        let mut out = vec![0.0; batch * d];
        let mut argmax = vec![0usize; batch * d];
        for bi in 0..batch {
            let rows: Vec<usize> = (0..n)
                .filter(|&r| row_mask.is_none_or(|m| m[bi * n + r] != 0.0))
                .collect();
            if rows.is_empty() {
                return Err(Error::EmptyReduction("max_over_rows"));
            }
            for j in 0..d {
                let mut best = rows[0];
                let base = bi * n * d;
                for &r in &rows[1..] {
                    if t.data()[base + r * d + j] > t.data()[base + best * d + j] {
                        best = r;
                    }
                }
                argmax[bi * d + j] = base + best * d + j;
                out[bi * d + j] = t.data()[base + best * d + j];
            }
        }
        let shape = if t.rank() == 2 { vec![d] } else { vec![batch, d] };
        self.push(
            "max_over_rows",
            Tensor::from_parts(shape, out),
            Op::MaxOverRows { a, argmax },
            &[a],
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Concatenation along the trailing axis. Parts share every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "empty list"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs leading axes {lead:?}", s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec()),
            parts,
        )
    }

    /// `Σ_i theta[i] · entries[i]` with `theta` a vector of scalars.
    pub fn weighted_sum(&mut self, theta: Var, entries: &[Var]) -> Result<Var> {
        let th = self.value(theta);
        if th.numel() != entries.len() || entries.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} entries", th.numel(), entries.len()),
            ));
        }
        let shape = self.shape(entries[0]).to_vec();
        let mut out = vec![0.0; self.value(entries[0]).numel()];
        for (&w, &e) in th.data().iter().zip(entries) {
            let ev = self.value(e);
            if ev.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("entry {:?} vs {shape:?}", ev.shape()),
                ));
            }
            for (o, x) in out.iter_mut().zip(ev.data()) {
                *o += w * x;
            }
        }
        let mut inputs = entries.to_vec();
        inputs.push(theta);
        self.push(
            "weighted_sum",
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                theta,
                entries: entries.to_vec(),
            },
            &inputs,
        )
    }

    /// Mean softmax cross-entropy of `[b, c]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.row_len();
        if t.num_rows() != labels.len() || t.rank() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} labels", t.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(c).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        loss /= labels.len() as f64;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean over unmasked rows of `-Σ_j p_j ln p_j`, with `0 ln 0 = 0`.
    pub fn row_entropy(&mut self, p: Var, row_mask: &[f64]) -> Result<Var> {
        let t = self.value(p);
        let m = t.row_len();
        if row_mask.len() != t.num_rows() {
            return Err(Error::shape("row_entropy", "row mask length"));
        }
        let count = row_mask.iter().filter(|&&w| w != 0.0).count();
        if count == 0 {
            return Err(Error::EmptyReduction("row_entropy"));
        }
        let mut total = 0.0;
        for (row, &w) in t.data().chunks(m).zip(row_mask) {
            if w != 0.0 {
                total -= row.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
            }
        }
        let count = count as f64;
        self.push(
            "row_entropy",
            Tensor::scalar(total / count),
            Op::RowEntropy {
                p,
                mask: row_mask.to_vec(),
                count,
            },
            &[p],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let relu_scale = match self.fault {
            Some(Fault::ReluGradScale(s)) => s,
            None => 1.0,
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let len_of = |v: Var| self.nodes[v.0].value.numel();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    for &v in [a, b] {
                        if !needs(v) {
                            continue;
                        }
                        let g = accumulate(&mut grads[v.0], len_of(v));
                        if g.len() == dy.len() {
                            g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                        } else {
                            g[0] += dy.iter().sum::<f64>();
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (&v, &other) in [(a, b), (b, a)] {
                        if !needs(v) {
                            continue;
                        }
                        let ov = self.val(other).to_vec();
                        let g = accumulate(&mut grads[v.0], len_of(v));
                        match (g.len() == dy.len(), ov.len() == dy.len()) {
                            (true, true) => g
                                .iter_mut()
                                .zip(&dy)
                                .zip(&ov)
                                .for_each(|((g, d), o)| *g += d * o),
                            (true, false) => g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d * ov[0]),
                            (false, _) => {
                                g[0] += dy.iter().zip(&ov).map(|(d, o)| d * o).sum::<f64>()
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], dy.len());
                        g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d * c);
                    }
                }
                Op::Shift(a) => {
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], dy.len());
                        g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.num_rows(), ta.row_len(), tb.shape()[1]);
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], n * k);
                        gemm_acc(&dy, tb.data(), g, n, m, k, false, true);
                    }
                    if needs(*b) {
                        let g = accumulate(&mut grads[b.0], k * m);
                        gemm_acc(ta.data(), &dy, g, k, n, m, true, false);
                    }
                }
                Op::BatchMatMul { a, b, trans_a } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, ra, ca) = ta.batched_dims().unwrap();
                    let (_, rb, cb) = tb.batched_dims().unwrap();
                    let (n, k) = if *trans_a { (ca, ra) } else { (ra, ca) };
                    let m = cb;
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], ta.numel());
                        for bi in 0..batch {
                            let dyb = &dy[bi * n * m..(bi + 1) * n * m];
                            let bb = &tb.data()[bi * rb * cb..(bi + 1) * rb * cb];
                            let gb = &mut g[bi * ra * ca..(bi + 1) * ra * ca];
                            if *trans_a {
                                // A is k×n: dA = B · dYᵀ
                                gemm_acc(bb, dyb, gb, k, m, n, false, true);
                            } else {
                                // dA = dY · Bᵀ
                                gemm_acc(dyb, bb, gb, n, m, k, false, true);
                            }
                        }
                    }
                    if needs(*b) {
                        let g = accumulate(&mut grads[b.0], tb.numel());
                        for bi in 0..batch {
                            let dyb = &dy[bi * n * m..(bi + 1) * n * m];
                            let ab = &ta.data()[bi * ra * ca..(bi + 1) * ra * ca];
                            let gb = &mut g[bi * rb * cb..(bi + 1) * rb * cb];
                            // dB = op(A)ᵀ · dY
                            gemm_acc(ab, dyb, gb, k, n, m, !*trans_a, false);
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    let m = len_of(*bias);
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], dy.len());
                        g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                    if needs(*bias) {
                        let g = accumulate(&mut grads[bias.0], m);
                        for row in dy.chunks(m) {
                            g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    }
                }
                Op::Relu(a) => {
                    if needs(*a) {
                        let x = self.val(*a);
                        let g = accumulate(&mut grads[a.0], dy.len());
                        for ((g, d), &xv) in g.iter_mut().zip(&dy).zip(x) {
                            if xv > 0.0 {
                                *g += d * relu_scale;
                            }
                        }
                    }
                }
                Op::RowSoftmax(a) => {
                    if needs(*a) {
                        let p = node.value.data();
                        let m = node.value.row_len();
                        let g = accumulate(&mut grads[a.0], dy.len());
                        for ((prow, drow), grow) in p.chunks(m).zip(dy.chunks(m)).zip(g.chunks_mut(m)) {
                            let dot: f64 = prow.iter().zip(drow).map(|(p, d)| p * d).sum();
                            for ((g, p), d) in grow.iter_mut().zip(prow).zip(drow) {
                                *g += p * (d - dot);
                            }
                        }
                    }
                }
                Op::RowL2Normalize { a, eps, norms } => {
                    if needs(*a) {
                        let y = node.value.data();
                        let m = node.value.row_len();
                        let g = accumulate(&mut grads[a.0], dy.len());
                        for (((yrow, drow), grow), &norm) in
                            y.chunks(m).zip(dy.chunks(m)).zip(g.chunks_mut(m)).zip(norms)
                        {
                            if norm > *eps {
                                let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                                for ((g, y), d) in grow.iter_mut().zip(yrow).zip(drow) {
                                    *g += (d - y * dot) / norm;
                                }
                            } else {
                                for (g, d) in grow.iter_mut().zip(drow) {
                                    *g += d / eps;
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    mask,
                    train,
                } => {
                    let d = inv_std.len();
                    let gv = self.val(*gamma).to_vec();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut sum_dxh = vec![0.0; d];
                    let mut sum_dxh_xh = vec![0.0; d];
                    let mut count = 0.0;
                    for (r, &w) in mask.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        count += 1.0;
                        for j in 0..d {
                            let i = r * d + j;
                            dgamma[j] += dy[i] * x_hat[i];
                            dbeta[j] += dy[i];
                            let dxh = dy[i] * gv[j];
                            sum_dxh[j] += dxh;
                            sum_dxh_xh[j] += dxh * x_hat[i];
                        }
                    }
                    if needs(*x) {
                        let g = accumulate(&mut grads[x.0], dy.len());
                        for (r, &w) in mask.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                let i = r * d + j;
                                let dxh = dy[i] * gv[j];
                                g[i] += if *train {
                                    inv_std[j] / count
                                        * (count * dxh - sum_dxh[j] - x_hat[i] * sum_dxh_xh[j])
                                } else {
                                    dxh * inv_std[j]
                                };
                            }
                        }
                    }
                    if needs(*gamma) {
                        let g = accumulate(&mut grads[gamma.0], d);
                        g.iter_mut().zip(&dgamma).for_each(|(g, d)| *g += d);
                    }
                    if needs(*beta) {
                        let g = accumulate(&mut grads[beta.0], d);
                        g.iter_mut().zip(&dbeta).for_each(|(g, d)| *g += d);
                    }
                }
                Op::RowScale { a, scale } => {
                    if needs(*a) {
                        let m = node.value.row_len();
                        let g = accumulate(&mut grads[a.0], dy.len());
                        for ((grow, drow), s) in g.chunks_mut(m).zip(dy.chunks(m)).zip(scale) {
                            grow.iter_mut().zip(drow).for_each(|(g, d)| *g += d * s);
                        }
                    }
                }
                Op::MaxOverRows { a, argmax } => {
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], len_of(*a));
                        for (&src, d) in argmax.iter().zip(&dy) {
                            g[src] += d;
                        }
                    }
                }
                Op::Sum(a) => {
                    if needs(*a) {
                        let g = accumulate(&mut grads[a.0], len_of(*a));
                        g.iter_mut().for_each(|g| *g += dy[0]);
                    }
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).row_len()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = dy.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if needs(p) {
                            let g = accumulate(&mut grads[p.0], rows * w);
                            for r in 0..rows {
                                for c in 0..w {
                                    g[r * w + c] += dy[r * total + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::WeightedSum { theta, entries } => {
                    let th = self.val(*theta).to_vec();
                    if needs(*theta) {
                        let dots: Vec<f64> = entries
                            .iter()
                            .map(|e| self.val(*e).iter().zip(&dy).map(|(x, d)| x * d).sum())
                            .collect();
                        let g = accumulate(&mut grads[theta.0], th.len());
                        g.iter_mut().zip(&dots).for_each(|(g, d)| *g += d);
                    }
                    for (&e, &w) in entries.iter().zip(&th) {
                        if needs(e) {
                            let g = accumulate(&mut grads[e.0], dy.len());
                            g.iter_mut().zip(&dy).for_each(|(g, d)| *g += w * d);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if needs(*logits) {
                        let c = self.value(*logits).row_len();
                        let scale = dy[0] / labels.len() as f64;
                        let g = accumulate(&mut grads[logits.0], probs.len());
                        for (r, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == y { 1.0 } else { 0.0 };
                                g[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    }
                }
                Op::RowEntropy { p, mask, count } => {
                    if needs(*p) {
                        let pv = self.val(*p);
                        let m = self.value(*p).row_len();
                        let scale = dy[0] / count;
                        let g = accumulate(&mut grads[p.0], pv.len());
                        for (r, &w) in mask.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            for j in r * m..(r + 1) * m {
                                if pv[j] > 0.0 {
                                    g[j] -= scale * (pv[j].ln() + 1.0);
                                }
                            }
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
