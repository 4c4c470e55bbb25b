use rand::Rng;
use serde::Serialize;

use super::reference::{lift_params, reference_loss, DoubleDouble, Real};
use crate::error::{Error, Result};
use crate::graphio::{Batch, Graph, RawGraph};
use crate::model::{Model, ModelConfig, Variant};
use crate::rng::substream;
use crate::tape::{Fault, Tape};
use crate::tensor::Tensor;
use crate::train::{collect_gradients, loss};

/// How the central differences are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Numeric {
    /// The tape-free reference loss in double-double arithmetic. Rounding
    /// noise in the difference quotient drops far below any gradient worth
    /// checking.
    DoubleDouble,
    /// The engine's own `f64` loss. Rounding noise of about `ε·|L|/h`
    /// swamps gradients below roughly `1e−5` at `h = 1e−6`.
    EngineF64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub numeric: Numeric,
    /// Cap on coordinates per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Breaks a gradient rule on the analytic side only.
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            tol: 1e-5,
            numeric: Numeric::DoubleDouble,
            max_coords_per_param: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub h: f64,
    pub tol: f64,
    pub numeric: Numeric,
    /// `|engine loss − reference loss|` at the unperturbed point.
    pub loss_gap: f64,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
    /// Parameters over tolerance, worst first.
    pub failures: Vec<String>,
    pub passed: bool,
}

/// `|a − f| / max(|a|, |f|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// The small configuration used for gradient checks of each variant:
/// `n ≤ 8`, `d = 4`, `K = 2`, `L ≤ 2`, `T ≤ 2`.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    let (layers, t) = match variant {
        Variant::FlatGcn => (1, 1),
        Variant::MuchgcnM => (1, 2),
        Variant::MuchgcnH | Variant::DiffpoolGcn => (2, 1),
        Variant::MuchgcnMh => (2, 2),
    };
    ModelConfig {
        variant,
        layers,
        steps: 2,
        hidden: 4,
        assign_ratio: vec![0.5; layers - 1],
        channel_expansion: vec![t; layers],
        max_nodes: 6,
        num_classes: 2,
        d_in: 3,
        entropy_weight: 0.1,
    }
}

/// A connected-ish random graph with continuous random features.
pub fn random_graph(n: usize, d_in: usize, label: usize, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.25) {
                edges.push((i, j));
            }
        }
    }
    let raw = RawGraph::new(n, edges, None, label);
    let features = Tensor::new(
        vec![n, d_in],
        (0..n * d_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches");
    Graph {
        adjacency: raw.adjacency(),
        features,
        label,
    }
}

/// `size` random graphs with between `max_nodes/2` and `max_nodes` nodes.
pub fn random_graphs(config: &ModelConfig, size: usize, rng: &mut impl Rng) -> Vec<Graph> {
    let lo = (config.max_nodes / 2).max(1);
    (0..size)
        .map(|i| {
            let n = rng.random_range(lo..=config.max_nodes);
            random_graph(n, config.d_in, i % config.num_classes, rng)
        })
        .collect()
}

pub fn random_batch(config: &ModelConfig, size: usize, rng: &mut impl Rng) -> Result<Batch> {
    let graphs = random_graphs(config, size, rng);
    let refs: Vec<&Graph> = graphs.iter().collect();
    Batch::from_graphs(&refs, config.max_nodes)
}

/// Adds `U(−scale, scale)` to every trainable entry so checks do not run at
/// the symmetric initial point (uniform θ, zero biases, unit γ).
pub fn jitter(model: &mut Model, scale: f64, rng: &mut impl Rng) {
    model.params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    });
}

fn train_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, true)?;
    let l = loss(&mut tape, out.logits, &batch.labels, &out.assignments, model.config.entropy_weight)?;
    Ok(tape.value(l).data()[0])
}

fn perturbed(model: &Model, slot: usize, index: usize, delta: f64) -> Model {
    let mut m = model.clone();
    let mut s = 0;
    m.params.visit_mut(&mut |_, t| {
        if s == slot {
            t.data_mut()[index] += delta;
        }
        s += 1;
    });
    m
}

/// Compares reverse-mode gradients of the train-mode loss with central
/// differences for every parameter coordinate (or an evenly spaced subset).
pub fn gradcheck(model: &Model, graphs: &[Graph], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.h > 0.0 && opts.tol > 0.0) {
        return Err(Error::Config("h and tol must be positive".into()));
    }
    let refs: Vec<&Graph> = graphs.iter().collect();
    let batch = &Batch::from_graphs(&refs, model.config.max_nodes)?;
    let cfg = &model.config;
    let dd_loss = |shift: Option<(&str, usize, DoubleDouble)>| -> Result<DoubleDouble> {
        reference_loss(cfg, &lift_params(&model.params, shift), &refs, &batch.labels)
    };
    let mut tape = Tape::new();
    if let Some(f) = opts.fault {
        tape.inject_fault(f);
    }
    let out = model.forward(&mut tape, batch, true)?;
    let l = loss(&mut tape, out.logits, &batch.labels, &out.assignments, model.config.entropy_weight)?;
    let analytic = collect_gradients(&tape.backward(l)?, &out.params);
    let loss_gap = (tape.value(l).data()[0] - dd_loss(None)?.to_f64()).abs();

    let mut names = Vec::new();
    model.params.visit(&mut |n, _| names.push(n.to_string()));

    let mut params = Vec::with_capacity(names.len());
    for (slot, (name, grad)) in names.iter().zip(&analytic).enumerate() {
        let n = grad.numel();
        let indices: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let numeric = match opts.numeric {
                Numeric::EngineF64 => {
                    let plus = train_loss(&perturbed(model, slot, i, opts.h), batch)?;
                    let minus = train_loss(&perturbed(model, slot, i, -opts.h), batch)?;
                    (plus - minus) / (2.0 * opts.h)
                }
                Numeric::DoubleDouble => {
                    let h = DoubleDouble::of(opts.h);
                    let plus = dd_loss(Some((name, i, h)))?;
                    let minus = dd_loss(Some((name, i, -h)))?;
                    ((plus - minus) / (h * DoubleDouble::of(2.0))).to_f64()
                }
            };
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if i == indices[0] || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let mut failing: Vec<&ParamCheck> = params.iter().filter(|p| p.max_rel_error > opts.tol).collect();
    failing.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    let failures: Vec<String> = failing.iter().map(|p| p.name.clone()).collect();
    Ok(GradCheckReport {
        variant: model.config.variant.name().to_string(),
        h: opts.h,
        tol: opts.tol,
        numeric: opts.numeric,
        loss_gap,
        coords_checked: params.iter().map(|p| p.coords_checked).sum(),
        max_rel_error: params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max),
        passed: failures.is_empty(),
        failures,
        params,
    })
}

/// Gradient check of `config` on a jittered model and a random two-graph
/// batch, both drawn from `seed`.
pub fn gradcheck_model(config: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = substream(seed, "gradcheck", 0);
    jitter(&mut model, 0.2, &mut rng);
    let graphs = random_graphs(config, 2, &mut rng);
    gradcheck(&model, &graphs, opts)
}
