use super::{Dataset, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-padded minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[b, max_nodes, d_in]`
    pub features: Tensor,
    /// `[b, max_nodes, max_nodes]`
    pub adjacency: Tensor,
    /// `b·max_nodes` entries, 1 for real nodes and 0 for padding.
    pub node_mask: Vec<f64>,
    pub labels: Vec<usize>,
    pub max_nodes: usize,
}

impl Batch {
    pub fn from_graphs(graphs: &[&Graph], max_nodes: usize) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Dataset("empty batch".into()))?;
        let d = first.features.shape()[1];
        let b = graphs.len();
        let mut features = Tensor::zeros(&[b, max_nodes, d]);
        let mut adjacency = Tensor::zeros(&[b, max_nodes, max_nodes]);
        let mut node_mask = vec![0.0; b * max_nodes];
        for (bi, g) in graphs.iter().enumerate() {
            let n = g.num_nodes();
            if n > max_nodes {
                return Err(Error::Dataset(format!(
                    "graph with {n} nodes exceeds max_nodes = {max_nodes}"
                )));
            }
            if g.features.shape()[1] != d {
                return Err(Error::Dataset("feature width differs within batch".into()));
            }
            let f = features.data_mut();
            for i in 0..n {
                let dst = (bi * max_nodes + i) * d;
                f[dst..dst + d].copy_from_slice(&g.features.data()[i * d..(i + 1) * d]);
            }
            let a = adjacency.data_mut();
            for i in 0..n {
                let dst = (bi * max_nodes + i) * max_nodes;
                a[dst..dst + n].copy_from_slice(&g.adjacency.data()[i * n..(i + 1) * n]);
            }
            node_mask[bi * max_nodes..bi * max_nodes + n].fill(1.0);
        }
        Ok(Batch {
            features,
            adjacency,
            node_mask,
            labels: graphs.iter().map(|g| g.label).collect(),
            max_nodes,
        })
    }

    pub fn single(graph: &Graph, max_nodes: usize) -> Result<Self> {
        Self::from_graphs(&[graph], max_nodes)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn d_in(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.node_mask
            .chunks(self.max_nodes)
            .map(|m| m.iter().filter(|&&v| v != 0.0).count())
            .collect()
    }
}

/// Splits `indices` into padded batches in order; the last batch may be
/// smaller.
pub fn batchify(ds: &Dataset, indices: &[usize], batch_size: usize, max_nodes: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| ds.graphs[i].num_nodes() > max_nodes) {
        return Err(Error::Dataset(format!(
            "graph {bad} of {} has {} nodes, above max_nodes = {max_nodes}",
            ds.name,
            ds.graphs[bad].num_nodes()
        )));
    }
    indices
        .chunks(batch_size)
        .map(|chunk| {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &ds.graphs[i]).collect();
            Batch::from_graphs(&graphs, max_nodes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::{FeatureMode, RawDataset, RawGraph};

    fn tiny() -> Dataset {
        let raw = RawDataset {
            name: "t".into(),
            graphs: vec![
                RawGraph::new(2, [(0, 1)], None, 0),
                RawGraph::new(3, [(0, 1), (1, 2)], None, 1),
                RawGraph::new(1, [], None, 0),
            ],
            num_classes: 2,
            num_node_labels: None,
        };
        Dataset::from_raw(&raw, FeatureMode::Social, Some(4)).unwrap()
    }

    #[test]
    fn sizes_and_padding() {
        let ds = tiny();
        let batches = batchify(&ds, &[0, 1, 2], 2, 4).unwrap();
        assert_eq!(batches.iter().map(Batch::size).collect::<Vec<_>>(), vec![2, 1]);
        let b = &batches[0];
        assert_eq!(b.node_counts(), vec![2, 3]);
        // padded rows of graph 0 (nodes 2, 3) are zero
        let a = b.adjacency.data();
        for row in 2..4 {
            assert!(a[row * 4..row * 4 + 4].iter().all(|&v| v == 0.0));
        }
        assert_eq!(b.node_mask, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn oversize_graph_is_named() {
        let ds = tiny();
        let err = batchify(&ds, &[1], 1, 2).unwrap_err();
        assert!(err.to_string().contains("graph 1"), "{err}");
    }
}
