//! Objective, optimizer and the cross-validation protocol.

mod cv;
mod optim;

pub use cv::{run_cv, run_cv_with_models, EpochRecord, FoldResult, MetricsSink, TrainConfig, TrainReport};
pub use optim::{clip_gradients, global_norm, Adam, AdamConfig, DEFAULT_CLIP_NORM};

use crate::error::Result;
use crate::graphio::Batch;
use crate::model::{Assignment, ForwardOutput, Model, ModelParams};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Mean cross-entropy plus `entropy_weight` times the summed per-assignment
/// mean row entropy.
pub fn loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    assignments: &[Assignment],
    entropy_weight: f64,
) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if assignments.is_empty() || entropy_weight == 0.0 {
        return Ok(ce);
    }
    let mut ent: Option<Var> = None;
    for a in assignments {
        let h = tape.row_entropy(a.s, &a.row_mask)?;
        ent = Some(match ent {
            Some(acc) => tape.add(acc, h)?,
            None => h,
        });
    }
    let reg = tape.scale(ent.expect("non-empty"), entropy_weight)?;
    tape.add(ce, reg)
}

/// Gradients of every trainable tensor, in visitor order.
pub fn collect_gradients(grads: &Gradients, bound: &ModelParams<Var>) -> Vec<Tensor> {
    let mut out = Vec::new();
    bound.visit(&mut |_, &v| out.push(grads.get(v)));
    out
}

/// Applies one Adam update with the gradients in visitor order.
pub fn adam_step(params: &mut ModelParams<Tensor>, grads: &[Tensor], adam: &mut Adam) {
    adam.begin_step();
    let mut slot = 0;
    params.visit_mut(&mut |_, t| {
        adam.update(slot, t.data_mut(), grads[slot].data());
        slot += 1;
    });
    assert_eq!(slot, grads.len(), "one gradient per parameter");
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub grad_norm: f64,
}

pub fn count_correct(tape: &Tape, logits: Var, labels: &[usize]) -> usize {
    let t = tape.value(logits);
    t.data()
        .chunks(t.row_len())
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward in train mode, backward, clip, Adam, running-stat update.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, clip_norm: f64) -> Result<StepStats> {
    let mut tape = Tape::new();
    let ForwardOutput {
        logits,
        assignments,
        params,
        norm_updates,
        ..
    } = model.forward(&mut tape, batch, true)?;
    let l = loss(&mut tape, logits, &batch.labels, &assignments, model.config.entropy_weight)?;
    let grads = tape.backward(l)?;
    let mut g = collect_gradients(&grads, &params);
    let grad_norm = clip_gradients(&mut g, clip_norm);
    adam_step(&mut model.params, &g, adam);
    model.apply_norm_updates(&norm_updates);
    Ok(StepStats {
        loss: tape.value(l).data()[0],
        correct: count_correct(&tape, logits, &batch.labels),
        grad_norm,
    })
}

/// Eval-mode accuracy and mean loss over `batches`.
pub fn evaluate(model: &Model, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut correct, mut total, mut loss_sum) = (0usize, 0usize, 0.0);
    for batch in batches {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch, false)?;
        let l = loss(&mut tape, out.logits, &batch.labels, &out.assignments, model.config.entropy_weight)?;
        loss_sum += tape.value(l).data()[0] * batch.size() as f64;
        correct += count_correct(&tape, out.logits, &batch.labels);
        total += batch.size();
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((correct as f64 / total as f64, loss_sum / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_logits_give_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let l = loss(&mut tape, logits, &[0], &[], 0.1).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_term() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let s = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let a = Assignment {
            layer: 0,
            graph: 0,
            s,
            row_mask: vec![1.0, 1.0],
        };
        let l = loss(&mut tape, logits, &[1], &[a], 1.0).unwrap();
        // mean of 0 and ln 2
        let expect = 2f64.ln() + 0.5 * 2f64.ln();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
