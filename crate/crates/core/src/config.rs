//! JSON run configuration with defaults and dotted-path overrides.
//!
//! ```json
//! {
//!   "dataset": {"path": "data/PTC_MR", "family": "bio"},
//!   "model": {"variant": "muchgcn_mh", "L": 2, "K": 3, "d": 64,
//!             "assign_ratio": 0.1, "channel_expansion": 4},
//!   "train": {"epochs": 100, "folds": 10, "seed": 0},
//!   "output": {"metrics_path": "metrics.jsonl", "summary_path": "summary.json"}
//! }
//! ```
//!
//! Every field is optional. `assign_ratio` and `channel_expansion` accept a
//! scalar (applied to every layer) or a per-layer list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graphio::{generate_synthetic, parse_tu_dataset, Dataset, FeatureMode, SyntheticFamily};
use crate::model::{ModelConfig, Variant};
use crate::train::{AdamConfig, TrainConfig, DEFAULT_CLIP_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFamily {
    Bio,
    Social,
    Synthetic,
}

/// In-memory synthetic data instead of a TU directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub family: SyntheticFamily,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    /// File prefix inside `path`; defaults to the directory name.
    pub name: Option<String>,
    pub family: DatasetFamily,
    pub max_nodes: Option<usize>,
    pub generate: Option<GenerateSpec>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            name: None,
            family: DatasetFamily::Bio,
            max_nodes: None,
            generate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayer<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerLayer<T> {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<T>> {
        match self {
            PerLayer::All(v) => Ok(vec![v.clone(); n]),
            PerLayer::Each(v) if v.len() == n => Ok(v.clone()),
            PerLayer::Each(v) => Err(Error::Config(format!("{what} needs {n} entries, got {}", v.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(rename = "L", alias = "layers")]
    pub layers: usize,
    #[serde(rename = "K", alias = "steps")]
    pub steps: usize,
    #[serde(rename = "d", alias = "hidden")]
    pub hidden: usize,
    /// Defaults to 0.1 for two layers and 0.25 for more.
    pub assign_ratio: Option<PerLayer<f64>>,
    /// Defaults to 4 for the multi-channel variants and 1 otherwise.
    pub channel_expansion: Option<PerLayer<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::MuchgcnMh,
            layers: 2,
            steps: 3,
            hidden: 64,
            assign_ratio: None,
            channel_expansion: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub entropy_weight: f64,
    pub folds: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub best_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            epochs: 100,
            batch_size: 20,
            entropy_weight: 0.1,
            folds: 10,
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
            best_epoch: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub metrics_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
    /// One file per fold, `_fold<i>` inserted before the extension.
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

/// Splits `a.b.c=value`; the value is parsed as JSON and falls back to a
/// plain string.
fn parse_override(spec: &str) -> Result<(Vec<&str>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[&str], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order, then re-validates field names
    /// and types.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (path, value) = parse_override(o.as_ref())?;
            set_path(&mut v, &path, value)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn feature_mode(&self) -> FeatureMode {
        match self.dataset.family {
            DatasetFamily::Bio => FeatureMode::Bio,
            DatasetFamily::Social => FeatureMode::Social,
            DatasetFamily::Synthetic => FeatureMode::Structural,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = &self.dataset;
        let mut data = match (&ds.generate, &ds.path) {
            (Some(g), None) => generate_synthetic(g.family, g.count, g.seed)?,
            (None, Some(path)) => {
                let name = match &ds.name {
                    Some(n) => n.clone(),
                    None => path
                        .file_name()
                        .and_then(|s| s.to_str())
                        .ok_or_else(|| Error::Config(format!("cannot infer dataset name from {}", path.display())))?
                        .to_string(),
                };
                let raw = parse_tu_dataset(path, &name)?;
                Dataset::from_raw(&raw, self.feature_mode(), ds.max_nodes)?
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config("dataset.path and dataset.generate are exclusive".into()));
            }
            (None, None) => return Err(Error::Config("dataset.path or dataset.generate is required".into())),
        };
        if let (Some(cap), Some(_)) = (ds.max_nodes, &ds.generate) {
            let raw_cap = data.max_nodes;
            if raw_cap > cap {
                return Err(Error::Dataset(format!(
                    "generated graphs reach {raw_cap} nodes, above max_nodes = {cap}"
                )));
            }
            data.max_nodes = cap;
        }
        Ok(data)
    }

    /// Architecture for `data`, filling input width, class count and node
    /// cap from the dataset.
    pub fn model_config(&self, data: &Dataset) -> Result<ModelConfig> {
        let m = &self.model;
        if m.layers == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        let assign_ratio = match &m.assign_ratio {
            Some(r) => r.expand(m.layers - 1, "assign_ratio").or_else(|e| match r {
                // a full-length list is accepted with the unused top entry
                PerLayer::Each(v) if v.len() == m.layers => Ok(v[..m.layers - 1].to_vec()),
                _ => Err(e),
            })?,
            None => vec![if m.layers >= 3 { 0.25 } else { 0.1 }; m.layers - 1],
        };
        let channel_expansion = match &m.channel_expansion {
            Some(t) => t.expand(m.layers, "channel_expansion")?,
            None => {
                let t = match m.variant {
                    Variant::MuchgcnMh | Variant::MuchgcnM => 4,
                    _ => 1,
                };
                vec![t; m.layers]
            }
        };
        let cfg = ModelConfig {
            variant: m.variant,
            layers: m.layers,
            steps: m.steps,
            hidden: m.hidden,
            assign_ratio,
            channel_expansion,
            max_nodes: data.max_nodes,
            num_classes: data.num_classes,
            d_in: data.d_in,
            entropy_weight: self.train.entropy_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, parallel_folds: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            epochs: t.epochs,
            batch_size: t.batch_size,
            folds: t.folds,
            seed: t.seed,
            clip_norm: t.clip_norm,
            best_epoch: t.best_epoch,
            parallel_folds,
        }
    }
}

/// `dir/stem_fold3.ext` for `dir/stem.ext`.
pub fn fold_checkpoint_path(base: &Path, fold: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_fold{fold}.{ext}"),
        None => format!("{stem}_fold{fold}"),
    };
    base.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_everything() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.model.steps, 3);
        assert_eq!(c.model.hidden, 64);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.folds, 10);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(&["train.epochs=5", "model.variant=flat_gcn", "model.L=1", "dataset.path=/tmp/x"])
            .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.model.variant, Variant::FlatGcn);
        assert_eq!(c.model.layers, 1);
        assert_eq!(c.dataset.path, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn bad_overrides_rejected() {
        let c = RunConfig::default();
        assert!(c.with_overrides(&["train.epochz=5"]).is_err());
        assert!(c.with_overrides(&["train.epochs"]).is_err());
        assert!(c.with_overrides(&["train.epochs=-1"]).is_err());
    }

    #[test]
    fn scalar_or_list_per_layer() {
        let c = RunConfig::from_json(r#"{"model": {"L": 3, "assign_ratio": [0.5, 0.25], "channel_expansion": 2}}"#)
            .unwrap();
        let ds = generate_synthetic(SyntheticFamily::CyclesVsChords, 20, 0).unwrap();
        let m = c.model_config(&ds).unwrap();
        assert_eq!(m.assign_ratio, vec![0.5, 0.25]);
        assert_eq!(m.channel_expansion, vec![2, 2, 2]);
    }

    #[test]
    fn model_validation_surfaces() {
        let ds = generate_synthetic(SyntheticFamily::CyclesVsChords, 20, 0).unwrap();
        for bad in [r#"{"model": {"assign_ratio": 0}}"#, r#"{"model": {"K": 0}}"#, r#"{"model": {"channel_expansion": 0}}"#] {
            let c = RunConfig::from_json(bad).unwrap();
            assert!(c.model_config(&ds).is_err(), "{bad}");
        }
    }

    #[test]
    fn fold_paths() {
        assert_eq!(fold_checkpoint_path(Path::new("/a/m.ckpt"), 2), PathBuf::from("/a/m_fold2.ckpt"));
        assert_eq!(fold_checkpoint_path(Path::new("m"), 0), PathBuf::from("m_fold0"));
    }
}
