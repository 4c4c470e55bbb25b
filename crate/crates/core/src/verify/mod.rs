//! Independent checks of the engine: finite-difference gradients, a
//! tape-free reference forward, the multiset distinguishability property
//! of channel filters, and runtime scaling in `K` and `C`.

mod bench;
mod gradcheck;
mod prop1;
mod reference;

pub use bench::{bench_linearity, repeat_cell, AxisFit, AxisRatio, BenchCell, BenchReport, BenchSpec, MIN_REPS};
pub use gradcheck::{
    gradcheck, gradcheck_model, jitter, random_batch, random_graph, random_graphs, relative_error, tiny_config,
    GradCheckOptions, GradCheckReport, Numeric, ParamCheck,
};
pub use prop1::{proposition1_check, Counterexample, Prop1Report, COLLISION_TOL};
pub use reference::{lift_params, DoubleDouble, reference_forward, reference_loss, Mat, Real};

use serde::Serialize;

use crate::error::Result;
use crate::graphio::Batch;
use crate::model::{Model, ModelConfig};
use crate::rng::substream;

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub variant: String,
    pub instances: usize,
    pub max_abs_diff: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Engine vs [`reference_forward`] on `instances` random graphs of at most
/// `config.max_nodes` nodes, each with freshly jittered parameters and
/// random running statistics.
pub fn oracle_check(config: &ModelConfig, instances: usize, seed: u64, tol: f64) -> Result<OracleReport> {
    use rand::Rng;
    let mut max_abs_diff: f64 = 0.0;
    for inst in 0..instances {
        let mut model = Model::new(config.clone(), seed.wrapping_add(inst as u64))?;
        let mut rng = substream(seed, "oracle", inst as u64);
        jitter(&mut model, 0.3, &mut rng);
        model.params.visit_norms_mut(&mut |_, bn| {
            for v in &mut bn.running_mean {
                *v = rng.random_range(-0.2..0.2);
            }
            for v in &mut bn.running_var {
                *v = rng.random_range(0.5..1.5);
            }
        });
        let n = rng.random_range(1..=config.max_nodes);
        let g = random_graph(n, config.d_in, 0, &mut rng);
        let batch = Batch::single(&g, config.max_nodes)?;
        let engine = model.predict(&batch)?;
        let reference = reference_forward(&model, &g)?;
        for (a, b) in engine[0].iter().zip(&reference) {
            max_abs_diff = max_abs_diff.max((a - b).abs());
        }
    }
    Ok(OracleReport {
        variant: config.variant.name().to_string(),
        instances,
        max_abs_diff,
        tol,
        passed: max_abs_diff <= tol,
    })
}
