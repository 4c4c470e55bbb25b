use std::io::Write;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig, DEFAULT_CLIP_NORM};
use super::{evaluate, train_step};
use crate::error::{Error, Result};
use crate::graphio::{batchify, make_folds, Dataset, Fold};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Report each fold's best test accuracy instead of its final one.
    pub best_epoch: bool,
    /// Fold jobs run concurrently; 0 or 1 means sequential.
    pub parallel_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 100,
            batch_size: 20,
            folds: 10,
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
            best_epoch: false,
            parallel_folds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub folds: Vec<FoldResult>,
    /// The per-fold accuracies the mean and std are taken over.
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Population standard deviation over folds.
    pub std_accuracy: f64,
    pub selection: String,
}

/// Line-oriented JSON writer shared between fold jobs. Each record is
/// written and flushed under one lock.
pub struct MetricsSink {
    inner: Mutex<Box<dyn Write + Send>>,
}

impl MetricsSink {
    pub fn new(w: impl Write + Send + 'static) -> Self {
        MetricsSink {
            inner: Mutex::new(Box::new(w)),
        }
    }

    pub fn record(&self, r: &EpochRecord) -> Result<()> {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        let mut w = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(line.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_fold(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    index: usize,
    fold: &Fold,
    sink: Option<&MetricsSink>,
) -> Result<(FoldResult, Vec<EpochRecord>, Model)> {
    let mut rng = substream(cfg.seed, "init", index as u64);
    let mut model = Model::from_params(model_cfg.clone(), ModelParams::init(model_cfg, &mut rng)?);
    let mut adam = Adam::new(cfg.adam);
    let test = batchify(ds, &fold.test, cfg.batch_size, model_cfg.max_nodes)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order = fold.train.clone();
    let (mut best_acc, mut best_epoch) = (f64::NEG_INFINITY, 0);
    for epoch in 0..cfg.epochs {
        let mut shuffle = substream(cfg.seed, "shuffle", ((index as u64) << 32) | epoch as u64);
        order.shuffle(&mut shuffle);
        let batches = batchify(ds, &order, cfg.batch_size, model_cfg.max_nodes)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in &batches {
            let stats = train_step(&mut model, &mut adam, batch, cfg.clip_norm)?;
            loss_sum += stats.loss * batch.size() as f64;
            correct += stats.correct;
        }
        let (test_acc, _) = evaluate(&model, &test)?;
        let n = order.len().max(1) as f64;
        let rec = EpochRecord {
            fold: index,
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
        };
        if let Some(s) = sink {
            s.record(&rec)?;
        }
        if test_acc > best_acc {
            best_acc = test_acc;
            best_epoch = epoch;
        }
        log::debug!(
            "fold {index} epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            rec.train_loss,
            rec.train_acc,
            rec.test_acc
        );
        records.push(rec);
    }
    let last = records
        .last()
        .ok_or_else(|| Error::Config("epochs must be positive".into()))?;
    log::info!("fold {index}: final test accuracy {:.4}", last.test_acc);
    Ok((
        FoldResult {
            fold: index,
            final_test_acc: last.test_acc,
            best_test_acc: best_acc,
            best_epoch,
            final_train_loss: last.train_loss,
        },
        records,
        model,
    ))
}

/// Stratified `folds`-fold cross-validation with fresh parameters per fold.
/// Deterministic given `cfg.seed`, whatever `parallel_folds` is.
pub fn run_cv(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sink: Option<&MetricsSink>,
) -> Result<TrainReport> {
    run_cv_with_models(ds, model_cfg, cfg, sink).map(|(report, _)| report)
}

/// [`run_cv`], also returning each fold's final model.
pub fn run_cv_with_models(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sink: Option<&MetricsSink>,
) -> Result<(TrainReport, Vec<Model>)> {
    model_cfg.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if !(cfg.adam.lr > 0.0 && cfg.clip_norm > 0.0) {
        return Err(Error::Config("lr and clip_norm must be positive".into()));
    }
    if ds.d_in != model_cfg.d_in || ds.num_classes != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "model expects d_in {} and {} classes, dataset has {} and {}",
            model_cfg.d_in, model_cfg.num_classes, ds.d_in, ds.num_classes
        )));
    }
    let folds = make_folds(&ds.labels(), cfg.folds, cfg.seed)?;
    let job = |(i, f): (usize, &Fold)| run_fold(ds, model_cfg, cfg, i, f, sink);
    let results: Vec<(FoldResult, Vec<EpochRecord>, Model)> = if cfg.parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel_folds)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().enumerate().map(job).collect::<Result<Vec<_>>>())?
    } else {
        folds.iter().enumerate().map(job).collect::<Result<Vec<_>>>()?
    };
    let mut folds = Vec::with_capacity(results.len());
    let mut epochs = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for (f, e, m) in results {
        folds.push(f);
        epochs.push(e);
        models.push(m);
    }
    let fold_accuracies: Vec<f64> = folds
        .iter()
        .map(|f| if cfg.best_epoch { f.best_test_acc } else { f.final_test_acc })
        .collect();
    let (mean_accuracy, std_accuracy) = mean_std(&fold_accuracies);
    let report = TrainReport {
        epochs: epochs.into_iter().flatten().collect(),
        folds,
        fold_accuracies,
        mean_accuracy,
        std_accuracy,
        selection: if cfg.best_epoch { "best" } else { "final" }.to_string(),
    };
    Ok((report, models))
}
