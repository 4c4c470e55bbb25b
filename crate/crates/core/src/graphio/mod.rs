//! Graph datasets: TU-format I/O, input features, synthetic families,
//! cross-validation folds and padded minibatches.

mod batch;
mod features;
mod folds;
mod synthetic;
mod tu;

use serde::{Deserialize, Serialize};

pub use batch::{batchify, Batch};
pub use features::{build_features, clustering_coefficients, degrees};
pub use folds::{make_folds, Fold};
pub use synthetic::{generate_synthetic, generate_synthetic_raw, SyntheticFamily};
pub use tu::{parse_tu_dataset, write_tu_dataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Graph structure before input features are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGraph {
    pub num_nodes: usize,
    /// Undirected edges `(i, j)` with `i < j`, sorted, no duplicates.
    pub edges: Vec<(usize, usize)>,
    pub node_labels: Option<Vec<usize>>,
    pub label: usize,
}

impl RawGraph {
    /// Normalizes an arbitrary edge list: drops self loops and duplicates,
    /// orients every pair as `(min, max)`.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_labels: Option<Vec<usize>>,
        label: usize,
    ) -> Self {
        let mut edges: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        RawGraph {
            num_nodes,
            edges,
            node_labels,
            label,
        }
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn adjacency(&self) -> Tensor {
        let n = self.num_nodes;
        let mut t = Tensor::zeros(&[n, n]);
        for &(a, b) in &self.edges {
            t.data_mut()[a * n + b] = 1.0;
            t.data_mut()[b * n + a] = 1.0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub graphs: Vec<RawGraph>,
    pub num_classes: usize,
    /// Number of distinct node labels, when node labels are present.
    pub num_node_labels: Option<usize>,
}

/// How node features are derived from structure and labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// One-hot node label, degree, clustering coefficient.
    Bio,
    /// Degree only.
    Social,
    /// Degree and clustering coefficient (bio without node labels).
    Structural,
}

/// One graph with its dense adjacency and feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    /// `n×n`, binary, symmetric, zero diagonal.
    pub adjacency: Tensor,
    /// `n×d_in`.
    pub features: Tensor,
    pub label: usize,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn num_edges(&self) -> usize {
        (self.adjacency.sum() / 2.0).round() as usize
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes();
        let d = self.features.shape()[1];
        assert_eq!(perm.len(), n);
        let mut adj = Tensor::zeros(&[n, n]);
        let mut feat = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..n {
                adj.data_mut()[i * n + j] = self.adjacency.get2(perm[i], perm[j]);
            }
            for k in 0..d {
                feat.data_mut()[i * d + k] = self.features.get2(perm[i], k);
            }
        }
        Graph {
            adjacency: adj,
            features: feat,
            label: self.label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub d_in: usize,
    pub max_nodes: usize,
}

impl Dataset {
    /// Attaches features to every graph. `max_nodes` defaults to the largest
    /// graph; graphs above an explicit cap are rejected.
    pub fn from_raw(raw: &RawDataset, mode: FeatureMode, max_nodes: Option<usize>) -> Result<Self> {
        if raw.graphs.is_empty() {
            return Err(Error::Dataset("no graphs".into()));
        }
        let mode = match (mode, raw.num_node_labels) {
            (FeatureMode::Bio, None) => {
                log::warn!(
                    "{}: bio features requested but no node labels; using degree and clustering only",
                    raw.name
                );
                FeatureMode::Structural
            }
            (m, _) => m,
        };
        let width = raw.num_node_labels;
        let graphs: Vec<Graph> = raw
            .graphs
            .iter()
            .map(|g| build_features(g, mode, width))
            .collect::<Result<_>>()?;
        let largest = raw.graphs.iter().map(|g| g.num_nodes).max().unwrap_or(0);
        let max_nodes = max_nodes.unwrap_or(largest);
        if let Some((idx, g)) = raw
            .graphs
            .iter()
            .enumerate()
            .find(|(_, g)| g.num_nodes > max_nodes)
        {
            return Err(Error::Dataset(format!(
                "graph {idx} of {} has {} nodes, above max_nodes = {max_nodes}",
                raw.name, g.num_nodes
            )));
        }
        let d_in = graphs[0].features.shape()[1];
        Ok(Dataset {
            name: raw.name.clone(),
            graphs,
            num_classes: raw.num_classes,
            d_in,
            max_nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn mean_nodes(&self) -> f64 {
        self.graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / self.len() as f64
    }
}
