use super::{FeatureMode, Graph, RawGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn degrees(g: &RawGraph) -> Vec<usize> {
    let mut deg = vec![0; g.num_nodes];
    for &(a, b) in &g.edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    deg
}

/// Local clustering coefficient `2·triangles / (deg·(deg−1))`, zero below
/// degree two.
pub fn clustering_coefficients(g: &RawGraph) -> Vec<f64> {
    let nbrs = g.neighbors();
    let mut adj = vec![false; g.num_nodes * g.num_nodes];
    for &(a, b) in &g.edges {
        adj[a * g.num_nodes + b] = true;
        adj[b * g.num_nodes + a] = true;
    }
    nbrs.iter()
        .map(|ns| {
            let k = ns.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (x, &u) in ns.iter().enumerate() {
                for &v in &ns[x + 1..] {
                    if adj[u * g.num_nodes + v] {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .collect()
}

/// Feature rows per node: `[one-hot label | degree | clustering]` for bio,
/// `[degree]` for social, `[degree | clustering]` for structural.
/// `label_width` is the dataset-wide one-hot width.
pub fn build_features(g: &RawGraph, mode: FeatureMode, label_width: Option<usize>) -> Result<Graph> {
    let deg = degrees(g);
    let n = g.num_nodes;
    let rows: Vec<Vec<f64>> = match mode {
        FeatureMode::Social => deg.iter().map(|&d| vec![d as f64]).collect(),
        FeatureMode::Structural => {
            let cc = clustering_coefficients(g);
            (0..n).map(|i| vec![deg[i] as f64, cc[i]]).collect()
        }
        FeatureMode::Bio => {
            let (Some(labels), Some(width)) = (&g.node_labels, label_width) else {
                return Err(Error::Dataset(
                    "bio features need node labels and a label width".into(),
                ));
            };
            let cc = clustering_coefficients(g);
            (0..n)
                .map(|i| {
                    let mut row = vec![0.0; width + 2];
                    if labels[i] >= width {
                        return Err(Error::Dataset(format!(
                            "node label {} outside one-hot width {width}",
                            labels[i]
                        )));
                    }
                    row[labels[i]] = 1.0;
                    row[width] = deg[i] as f64;
                    row[width + 1] = cc[i];
                    Ok(row)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(Graph {
        adjacency: g.adjacency(),
        features: Tensor::from_rows(&rows),
        label: g.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_node() {
        let g = RawGraph::new(1, [], None, 0);
        assert_eq!(degrees(&g), vec![0]);
        assert_eq!(clustering_coefficients(&g), vec![0.0]);
    }

    #[test]
    fn triangle_is_fully_clustered() {
        let g = RawGraph::new(3, [(0, 1), (1, 2), (2, 0)], None, 0);
        assert_eq!(degrees(&g), vec![2, 2, 2]);
        assert_eq!(clustering_coefficients(&g), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn path_middle_has_no_triangle() {
        let g = RawGraph::new(3, [(0, 1), (1, 2)], None, 0);
        assert_eq!(degrees(&g)[1], 2);
        assert_eq!(clustering_coefficients(&g)[1], 0.0);
    }

    #[test]
    fn bio_layout() {
        let g = RawGraph::new(3, [(0, 1), (1, 2), (2, 0)], Some(vec![0, 2, 1]), 1);
        let fg = build_features(&g, FeatureMode::Bio, Some(3)).unwrap();
        assert_eq!(fg.features.shape(), &[3, 5]);
        assert_eq!(&fg.features.data()[5..10], &[0.0, 0.0, 1.0, 2.0, 1.0]);
        assert!(build_features(&g, FeatureMode::Bio, None).is_err());
        let social = build_features(&g, FeatureMode::Social, None).unwrap();
        assert_eq!(social.features.data(), &[2.0, 2.0, 2.0]);
    }
}
