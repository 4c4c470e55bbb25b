use std::collections::{BTreeMap, HashMap};

use super::config::{LayerPlan, ModelConfig};
use super::params::{Body, DiffPoolLayer, ModelParams, MultiChannelLayer};
use crate::error::{Error, Result};
use crate::graphio::Batch;
use crate::layers::{
    build_multiset, compute_assignment, diffpool, filter_apply, inter_adjacency_from_product, message_pass_inter,
    message_pass_intra, Multiset,
};
use crate::nn::{mlp_apply, NormContext};
use crate::tape::{BatchStats, Tape, Var};

/// One soft assignment and the rows that count toward its entropy.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub layer: usize,
    pub graph: usize,
    /// `[b, n_l, n_{l+1}]`
    pub s: Var,
    pub row_mask: Vec<f64>,
}

pub struct ForwardOutput {
    /// `[b, classes]`
    pub logits: Var,
    /// `[b, d·L]`
    pub readout: Var,
    pub assignments: Vec<Assignment>,
    /// Parameters as bound on the tape, for looking up gradients.
    pub params: ModelParams<Var>,
    /// Batch statistics per normalization slot (train mode only).
    pub norm_updates: Vec<(usize, BatchStats)>,
}

struct BodyOutput {
    readouts: Vec<Var>,
    assignments: Vec<Assignment>,
}

pub(super) fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams<crate::tensor::Tensor>,
    batch: &Batch,
    train: bool,
) -> Result<ForwardOutput> {
    if batch.max_nodes != config.max_nodes {
        return Err(Error::shape(
            "forward",
            format!("batch padded to {}, model expects {}", batch.max_nodes, config.max_nodes),
        ));
    }
    if batch.d_in() != config.d_in {
        return Err(Error::shape(
            "forward",
            format!("batch feature width {}, model expects {}", batch.d_in(), config.d_in),
        ));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= config.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: config.num_classes,
        });
    }
    let vars = params.map(&mut |_, t| tape.param(t));
    let mut norm = NormContext::new(train);
    let x = tape.constant(batch.features.clone());
    let a = tape.constant(batch.adjacency.clone());
    let mask = batch.node_mask.clone();
    let plans = config.plan_shapes()?;
    let body = match &vars.body {
        Body::MultiChannel(layers) => forward_multi_channel(tape, &mut norm, config, &plans, layers, x, a, mask)?,
        Body::Flat(conv) => {
            let h = message_pass_intra(tape, &mut norm, x, a, &conv.weights, conv.pass_norms(0, 0), &mask)?;
            let y = tape.max_over_rows(last(&h), Some(&mask))?;
            BodyOutput {
                readouts: vec![y],
                assignments: Vec::new(),
            }
        }
        Body::DiffPool(layers) => forward_diffpool(tape, &mut norm, &plans, layers, x, a, mask)?,
    };
    let readout = tape.concat(&body.readouts)?;
    let logits = mlp_apply(tape, readout, &vars.classifier)?;
    Ok(ForwardOutput {
        logits,
        readout,
        assignments: body.assignments,
        params: vars,
        norm_updates: norm.updates,
    })
}

fn last(h: &[Var]) -> Var {
    *h.last().expect("message passing yields K >= 1 embeddings")
}

#[allow(clippy::too_many_arguments)]
fn forward_multi_channel(
    tape: &mut Tape,
    norm: &mut NormContext,
    config: &ModelConfig,
    plans: &[LayerPlan],
    layers: &[MultiChannelLayer<Var>],
    x0: Var,
    a0: Var,
    mut mask: Vec<f64>,
) -> Result<BodyOutput> {
    if layers.len() != plans.len() {
        return Err(Error::shape("forward", "layer count differs from config"));
    }
    let b = tape.shape(x0)[0];
    let k = config.steps;
    let mut xs = vec![x0];
    // (i, c) -> A^{i,c}; (i, i) holds the channel's own adjacency
    let mut adj: HashMap<(usize, usize), Var> = HashMap::from([((0, 0), a0)]);
    let mut readouts = Vec::with_capacity(plans.len());
    let mut assignments = Vec::new();

    for (l, (layer, plan)) in layers.iter().zip(plans).enumerate() {
        let c_l = plan.channels;
        let w = &layer.conv.weights;
        if xs.len() != c_l || layer.embed.len() != plan.embed_filters || layer.pool.len() != plan.pool_filters {
            return Err(Error::shape("forward", format!("layer {l} parameters do not match the schedule")));
        }
        let intra = (0..c_l)
            .map(|i| message_pass_intra(tape, norm, xs[i], adj[&(i, i)], w, layer.conv.pass_norms(i, i), &mask))
            .collect::<Result<Vec<_>>>()?;

        let mut multisets: Vec<Multiset> = Vec::with_capacity(c_l);
        for i in 0..c_l {
            let mut inter = BTreeMap::new();
            for c in (0..c_l).filter(|&c| c != i) {
                let mut neighbor = Vec::with_capacity(k);
                neighbor.push(xs[c]);
                neighbor.extend_from_slice(&intra[c][..k - 1]);
                let seq = message_pass_inter(
                    tape,
                    norm,
                    xs[i],
                    adj[&(i, c)],
                    &neighbor,
                    w,
                    layer.conv.pass_norms(i, c),
                    &mask,
                )?;
                inter.insert(c, seq);
            }
            let x_entry = match layer.input_proj {
                Some(p) => tape.matmul(xs[i], p)?,
                None => xs[i],
            };
            multisets.push(build_multiset(tape, x_entry, &intra[i], &inter, i, c_l)?);
        }

        let t = config.channel_expansion[l];
        let top = l + 1 == plans.len();
        let mut zs = Vec::with_capacity(plan.embed_filters);
        let mut ss = Vec::with_capacity(plan.pool_filters);
        let mut y: Option<Var> = None;
        for j in 0..plan.embed_filters {
            let ms = &multisets[j / t];
            let z = filter_apply(tape, ms, &layer.embed[j], &mask)?;
            let pooled = tape.max_over_rows(z, Some(&mask))?;
            y = Some(match y {
                Some(acc) => tape.add(acc, pooled)?,
                None => pooled,
            });
            zs.push(z);
            if !top {
                let n_next = plans[l + 1].nodes;
                let s = compute_assignment(tape, ms, &layer.pool[j], n_next, &mask)?;
                assignments.push(Assignment {
                    layer: l,
                    graph: j,
                    s,
                    row_mask: mask.clone(),
                });
                ss.push(s);
            }
        }
        readouts.push(y.expect("at least one generated graph"));
        if top {
            break;
        }

        let parent = |j: usize| j / t;
        let c_next = plan.embed_filters;
        // A(p, parent(j'))·S_j' shared by every j with parent p
        let mut right = HashMap::with_capacity(c_l * c_next);
        for p in 0..c_l {
            for (jp, &s) in ss.iter().enumerate() {
                right.insert((p, jp), tape.batch_matmul(adj[&(p, parent(jp))], s, false)?);
            }
        }
        let mut next_adj = HashMap::with_capacity(c_next * c_next);
        for (j, &s) in ss.iter().enumerate() {
            for jp in 0..c_next {
                let a = inter_adjacency_from_product(tape, s, right[&(parent(j), jp)])?;
                next_adj.insert((j, jp), a);
            }
        }
        xs = zs
            .iter()
            .zip(&ss)
            .map(|(&z, &s)| tape.batch_matmul(s, z, true))
            .collect::<Result<Vec<_>>>()?;
        adj = next_adj;
        mask = vec![1.0; b * plans[l + 1].nodes];
    }
    Ok(BodyOutput { readouts, assignments })
}

fn forward_diffpool(
    tape: &mut Tape,
    norm: &mut NormContext,
    plans: &[LayerPlan],
    layers: &[DiffPoolLayer<Var>],
    mut x: Var,
    mut a: Var,
    mut mask: Vec<f64>,
) -> Result<BodyOutput> {
    let b = tape.shape(x)[0];
    let mut readouts = Vec::with_capacity(layers.len());
    let mut assignments = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let conv = &layer.conv;
        let h = message_pass_intra(tape, norm, x, a, &conv.weights, conv.pass_norms(0, 0), &mask)?;
        let z = last(&h);
        readouts.push(tape.max_over_rows(z, Some(&mask))?);
        let Some(head) = &layer.pool_head else {
            break;
        };
        let logits = mlp_apply(tape, z, head)?;
        let logits = tape.row_scale(logits, &mask)?;
        let s = tape.row_softmax(logits, None)?;
        assignments.push(Assignment {
            layer: l,
            graph: 0,
            s,
            row_mask: mask.clone(),
        });
        (x, a) = diffpool(tape, z, s, a)?;
        mask = vec![1.0; b * plans[l + 1].nodes];
    }
    Ok(BodyOutput { readouts, assignments })
}
