//! Full forward pass for the multi-channel hierarchical model, its
//! ablations, and the flat and single-channel pooling baselines.

pub mod checkpoint;
mod config;
mod forward;
mod params;

use std::collections::HashMap;
use std::path::Path;

pub use config::{next_node_count, LayerPlan, ModelConfig, Variant};
pub use forward::{Assignment, ForwardOutput};
pub use params::{Body, DiffPoolLayer, ModelParams, MultiChannelLayer};

use crate::error::Result;
use crate::graphio::Batch;
use crate::rng::substream;
use crate::tape::{BatchStats, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Parameters drawn from the `init` substream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init", 0);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor>) -> Self {
        Model { config, params }
    }

    /// Records one forward pass on `tape`. Normalization uses batch
    /// statistics when `train` is set and running statistics otherwise.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, train: bool) -> Result<ForwardOutput> {
        forward::forward(tape, &self.config, &self.params, batch, train)
    }

    /// Eval-mode logits, one row per graph.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, false)?;
        let logits = tape.value(out.logits);
        Ok(logits.data().chunks(logits.row_len()).map(<[f64]>::to_vec).collect())
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_norm_updates(&mut self, updates: &[(usize, BatchStats)]) {
        if updates.is_empty() {
            return;
        }
        let by_slot: HashMap<usize, &BatchStats> = updates.iter().map(|(s, b)| (*s, b)).collect();
        self.params.visit_norms_mut(&mut |_, bn| {
            if let Some(stats) = by_slot.get(&bn.slot) {
                bn.update_running(stats);
            }
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    /// Reads a checkpoint written for the same `config`.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let entries = checkpoint::read_entries(path)?;
        let mut rng = substream(0, "init", 0);
        let mut params = ModelParams::init(&config, &mut rng)?;
        checkpoint::restore(&mut params, entries)?;
        Ok(Model { config, params })
    }
}
