use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::{Batch, Graph, RawGraph};
use crate::model::{Model, ModelConfig, ModelParams, Variant};
use crate::rng::substream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::loss;

pub const MIN_REPS: usize = 3;

/// Grid and fixed sizes of a runtime sweep. `C` sets the channel expansion
/// of every layer, so layer `l` holds `C^l` channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub nodes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub assign_ratio: f64,
    pub batch_size: usize,
    pub edge_prob: f64,
    pub k_values: Vec<usize>,
    pub c_values: Vec<usize>,
    pub reps: usize,
    /// Forward+backward passes per timed repetition.
    pub steps_per_rep: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            nodes: 100,
            hidden: 32,
            layers: 2,
            assign_ratio: 0.25,
            batch_size: 2,
            edge_prob: 0.05,
            k_values: vec![2, 4],
            c_values: vec![2, 4],
            reps: 5,
            steps_per_rep: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchCell {
    pub k: usize,
    pub c: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    /// Coefficient of variation over the timed repetitions.
    pub cv: f64,
    pub samples: Vec<f64>,
}

/// `time(to)/time(from)` along one axis with the other held at `fixed`.
#[derive(Clone, Debug, Serialize)]
pub struct AxisRatio {
    pub fixed: usize,
    pub from: usize,
    pub to: usize,
    pub ratio: f64,
}

/// Least-squares line `time = intercept + slope·x` along one axis.
#[derive(Clone, Debug, Serialize)]
pub struct AxisFit {
    pub fixed: usize,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub cells: Vec<BenchCell>,
    pub k_ratios: Vec<AxisRatio>,
    pub c_ratios: Vec<AxisRatio>,
    pub k_fits: Vec<AxisFit>,
    pub c_fits: Vec<AxisFit>,
    pub max_cv: f64,
}

impl BenchReport {
    pub fn cell(&self, k: usize, c: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|x| x.k == k && x.c == c)
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!("reps must be at least {MIN_REPS}")));
        }
        if self.k_values.is_empty() || self.c_values.is_empty() {
            return Err(Error::Config("empty K or C grid".into()));
        }
        if self.k_values.contains(&0) || self.c_values.contains(&0) {
            return Err(Error::Config("grid values must be positive".into()));
        }
        if self.nodes < 2 || self.hidden == 0 || self.layers == 0 || self.batch_size == 0 || self.steps_per_rep == 0 {
            return Err(Error::Config("nodes, hidden, layers and batch_size must be positive".into()));
        }
        if !(self.edge_prob >= 0.0 && self.edge_prob <= 1.0) {
            return Err(Error::Config("edge_prob outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, k: usize, c: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::MuchgcnMh,
            layers: self.layers,
            steps: k,
            hidden: self.hidden,
            assign_ratio: vec![self.assign_ratio; self.layers - 1],
            channel_expansion: vec![c; self.layers],
            max_nodes: self.nodes,
            num_classes: 2,
            d_in: self.hidden,
            entropy_weight: 0.1,
        }
    }

    fn batch(&self) -> Result<Batch> {
        let mut rng = substream(self.seed, "bench", 0);
        let graphs: Vec<Graph> = (0..self.batch_size)
            .map(|i| {
                let n = self.nodes;
                let mut edges = Vec::new();
                for a in 0..n {
                    for b in a + 1..n {
                        if rng.random_bool(self.edge_prob) {
                            edges.push((a, b));
                        }
                    }
                }
                let raw = RawGraph::new(n, edges, None, i % 2);
                let x = (0..n * self.hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
                Graph {
                    adjacency: raw.adjacency(),
                    features: Tensor::from_parts(vec![n, self.hidden], x),
                    label: i % 2,
                }
            })
            .collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        Batch::from_graphs(&refs, self.nodes)
    }
}

/// Seconds per forward+backward pass, averaged over `steps` passes.
fn forward_backward(model: &Model, batch: &Batch, steps: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch, true)?;
        let l = loss(&mut tape, out.logits, &batch.labels, &out.assignments, model.config.entropy_weight)?;
        let g = tape.backward(l)?;
        std::hint::black_box(&g);
    }
    Ok(start.elapsed().as_secs_f64() / steps as f64)
}

fn bench_model(spec: &BenchSpec, k: usize, c: usize) -> Result<Model> {
    let cfg = spec.model_config(k, c);
    let mut rng = substream(spec.seed, "init", 0);
    Ok(Model::from_params(cfg.clone(), ModelParams::init_multi_channel(&cfg, &mut rng)?))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, if mean > 0.0 { var.sqrt() / mean } else { 0.0 })
}

fn fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Times `steps_per_rep` forward+backward passes per repetition for every
/// `(K, C)` cell, on the calling thread. Repetitions go round-robin over
/// the cells after one untimed warm-up pass each, so slow drift in machine
/// speed lands on every cell alike.
pub fn bench_linearity(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let batch = spec.batch()?;
    let mut grid = Vec::new();
    for &c in &spec.c_values {
        for &k in &spec.k_values {
            let model = bench_model(spec, k, c)?;
            forward_backward(&model, &batch, 1)?;
            grid.push((k, c, model));
        }
    }
    let mut samples = vec![Vec::with_capacity(spec.reps); grid.len()];
    for _ in 0..spec.reps {
        for ((_, _, model), out) in grid.iter().zip(&mut samples) {
            out.push(forward_backward(model, &batch, spec.steps_per_rep)?);
        }
    }
    let cells: Vec<BenchCell> = grid
        .iter()
        .zip(samples)
        .map(|((k, c, _), samples)| {
            let (mean, cv) = mean_cv(&samples);
            log::info!("bench K={k} C={c}: median {:.4}s cv {cv:.3}", median(&samples));
            BenchCell {
                k: *k,
                c: *c,
                median_seconds: median(&samples),
                mean_seconds: mean,
                cv,
                samples,
            }
        })
        .collect();
    let time = |k: usize, c: usize| {
        cells
            .iter()
            .find(|x| x.k == k && x.c == c)
            .map(|x| x.median_seconds)
            .expect("cell exists")
    };
    let ratios = |axis: &[usize], other: &[usize], swap: bool| {
        let mut out = Vec::new();
        for &fixed in other {
            for &from in axis {
                if axis.contains(&(2 * from)) {
                    let (a, b) = if swap {
                        (time(fixed, from), time(fixed, 2 * from))
                    } else {
                        (time(from, fixed), time(2 * from, fixed))
                    };
                    out.push(AxisRatio {
                        fixed,
                        from,
                        to: 2 * from,
                        ratio: b / a,
                    });
                }
            }
        }
        out
    };
    let fits = |axis: &[usize], other: &[usize], swap: bool| {
        other
            .iter()
            .map(|&fixed| {
                let pts: Vec<(f64, f64)> = axis
                    .iter()
                    .map(|&x| (x as f64, if swap { time(fixed, x) } else { time(x, fixed) }))
                    .collect();
                let (slope, intercept) = fit(&pts);
                AxisFit {
                    fixed,
                    slope,
                    intercept,
                }
            })
            .collect::<Vec<_>>()
    };
    Ok(BenchReport {
        k_ratios: ratios(&spec.k_values, &spec.c_values, false),
        c_ratios: ratios(&spec.c_values, &spec.k_values, true),
        k_fits: fits(&spec.k_values, &spec.c_values, false),
        c_fits: fits(&spec.c_values, &spec.k_values, true),
        max_cv: cells.iter().map(|c| c.cv).fold(0.0, f64::max),
        cells,
        spec: spec.clone(),
    })
}

/// Coefficient of variation of `reps` timings of a single cell.
pub fn repeat_cell(spec: &BenchSpec, k: usize, c: usize, reps: usize) -> Result<f64> {
    let batch = spec.batch()?;
    let model = bench_model(spec, k, c)?;
    forward_backward(&model, &batch, 1)?;
    let samples = (0..reps)
        .map(|_| forward_backward(&model, &batch, spec.steps_per_rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_cv(&samples).1)
}
