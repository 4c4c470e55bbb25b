//! A full cross-validation run driven by a [`RunConfig`], with its output
//! files.

use std::fs::File;
use std::io::BufWriter;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{fold_checkpoint_path, RunConfig};
use crate::error::Result;
use crate::graphio::Dataset;
use crate::model::ModelConfig;
use crate::train::{run_cv_with_models, FoldResult, MetricsSink};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub graphs: usize,
    pub classes: usize,
    pub d_in: usize,
    pub max_nodes: usize,
    pub mean_nodes: f64,
}

impl DatasetInfo {
    pub fn of(ds: &Dataset) -> Self {
        DatasetInfo {
            name: ds.name.clone(),
            graphs: ds.len(),
            classes: ds.num_classes,
            d_in: ds.d_in,
            max_nodes: ds.max_nodes,
            mean_nodes: ds.mean_nodes(),
        }
    }
}

/// Everything needed to reproduce and compare a run. Only
/// `wall_clock_seconds` varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub dataset: DatasetInfo,
    pub selection: String,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub folds: Vec<FoldResult>,
    pub wall_clock_seconds: f64,
}

impl Summary {
    /// Serialized summary with the timing field removed.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_clock_seconds");
        }
        v
    }
}

/// Loads the dataset, runs cross-validation, and writes whichever of the
/// metrics stream, summary and checkpoints the config asks for.
pub fn run_experiment(cfg: &RunConfig, parallel_folds: usize) -> Result<Summary> {
    let start = Instant::now();
    let data = cfg.load_dataset()?;
    run_on_dataset(cfg, &data, parallel_folds, start)
}

/// [`run_experiment`] on an already loaded dataset; `cfg.dataset` is only
/// echoed into the summary.
pub fn run_experiment_on(cfg: &RunConfig, data: &Dataset, parallel_folds: usize) -> Result<Summary> {
    run_on_dataset(cfg, data, parallel_folds, Instant::now())
}

fn run_on_dataset(cfg: &RunConfig, data: &Dataset, parallel_folds: usize, start: Instant) -> Result<Summary> {
    let model_cfg = cfg.model_config(data)?;
    log::info!(
        "{}: {} graphs, {} classes, d_in {}, max_nodes {}",
        data.name,
        data.len(),
        data.num_classes,
        data.d_in,
        data.max_nodes
    );
    let sink = match &cfg.output.metrics_path {
        Some(p) => Some(MetricsSink::new(BufWriter::new(File::create(p)?))),
        None => None,
    };
    let (report, models) = run_cv_with_models(data, &model_cfg, &cfg.train_config(parallel_folds), sink.as_ref())?;
    if let Some(base) = &cfg.output.checkpoint_path {
        for (i, m) in models.iter().enumerate() {
            m.save(&fold_checkpoint_path(base, i))?;
        }
    }
    let summary = Summary {
        config: cfg.clone(),
        model: model_cfg,
        dataset: DatasetInfo::of(data),
        selection: report.selection,
        fold_accuracies: report.fold_accuracies,
        mean_accuracy: report.mean_accuracy,
        std_accuracy: report.std_accuracy,
        folds: report.folds,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(p) = &cfg.output.summary_path {
        std::fs::write(p, serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(summary)
}
