//! Desk-scale synthetic graph families.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureMode, RawDataset, RawGraph};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticFamily {
    /// Class 0: plain cycle. Class 1: cycle plus `⌈n/4⌉` random chords.
    CyclesVsChords,
    /// `k ∈ {2, 3}` dense communities joined sparsely; label 0 for two
    /// communities, 1 for three.
    KCommunities,
}

impl SyntheticFamily {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticFamily::CyclesVsChords => "cycles_vs_chords",
            SyntheticFamily::KCommunities => "k_communities",
        }
    }
}

impl std::str::FromStr for SyntheticFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycles_vs_chords" => Ok(SyntheticFamily::CyclesVsChords),
            "k_communities" => Ok(SyntheticFamily::KCommunities),
            other => Err(Error::Config(format!("unknown synthetic family {other:?}"))),
        }
    }
}

pub const MIN_SYNTHETIC_COUNT: usize = 20;
const CYCLE_MIN: usize = 8;
const CYCLE_MAX: usize = 20;
const BLOCK_MIN: usize = 5;
const BLOCK_MAX: usize = 8;
const P_IN: f64 = 0.8;
const P_OUT: f64 = 0.05;

fn cycle_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i + 1) % n)).collect()
}

fn cycle_with_chords(n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = cycle_edges(n);
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 2..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !(i == 0 && j == n - 1))
        .collect();
    candidates.shuffle(rng);
    let chords = n.div_ceil(4);
    edges.extend(candidates.into_iter().take(chords));
    edges
}

fn communities(k: usize, rng: &mut impl Rng) -> (usize, Vec<(usize, usize)>) {
    let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(BLOCK_MIN..=BLOCK_MAX)).collect();
    let mut block = Vec::new();
    for (b, &s) in sizes.iter().enumerate() {
        block.extend(std::iter::repeat_n(b, s));
    }
    let n = block.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block[i] == block[j] { P_IN } else { P_OUT };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    (n, edges)
}

/// Structure and labels only; see [`generate_synthetic`] for features.
/// Labels alternate so the classes are balanced to within one graph.
pub fn generate_synthetic_raw(family: SyntheticFamily, count: usize, seed: u64) -> Result<RawDataset> {
    if count < MIN_SYNTHETIC_COUNT {
        return Err(Error::Config(format!(
            "synthetic count must be at least {MIN_SYNTHETIC_COUNT}, got {count}"
        )));
    }
    let mut rng = substream(seed, family.name(), 0);
    let graphs = (0..count)
        .map(|i| {
            let label = i % 2;
            match family {
                SyntheticFamily::CyclesVsChords => {
                    let n = rng.random_range(CYCLE_MIN..=CYCLE_MAX);
                    let edges = if label == 0 {
                        cycle_edges(n)
                    } else {
                        cycle_with_chords(n, &mut rng)
                    };
                    RawGraph::new(n, edges, None, label)
                }
                SyntheticFamily::KCommunities => {
                    let (n, edges) = communities(label + 2, &mut rng);
                    RawGraph::new(n, edges, None, label)
                }
            }
        })
        .collect();
    Ok(RawDataset {
        name: family.name().to_string(),
        graphs,
        num_classes: 2,
        num_node_labels: None,
    })
}

/// Synthetic dataset with degree and clustering-coefficient features.
pub fn generate_synthetic(family: SyntheticFamily, count: usize, seed: u64) -> Result<Dataset> {
    let raw = generate_synthetic_raw(family, count, seed)?;
    Dataset::from_raw(&raw, FeatureMode::Structural, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::degrees;

    #[test]
    fn deterministic_given_seed() {
        for fam in [SyntheticFamily::CyclesVsChords, SyntheticFamily::KCommunities] {
            let a = generate_synthetic_raw(fam, 30, 5).unwrap();
            let b = generate_synthetic_raw(fam, 30, 5).unwrap();
            let c = generate_synthetic_raw(fam, 30, 6).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn cycles_have_degree_two_and_chords_add_edges() {
        let ds = generate_synthetic_raw(SyntheticFamily::CyclesVsChords, 40, 1).unwrap();
        for g in &ds.graphs {
            assert!((CYCLE_MIN..=CYCLE_MAX).contains(&g.num_nodes));
            if g.label == 0 {
                assert!(degrees(g).iter().all(|&d| d == 2));
                assert_eq!(g.edges.len(), g.num_nodes);
            } else {
                assert_eq!(g.edges.len(), g.num_nodes + g.num_nodes.div_ceil(4));
            }
        }
    }

    #[test]
    fn classes_balanced() {
        for count in [20, 21, 57] {
            let ds = generate_synthetic_raw(SyntheticFamily::KCommunities, count, 3).unwrap();
            let ones = ds.graphs.iter().filter(|g| g.label == 1).count();
            let zeros = count - ones;
            assert!(ones.abs_diff(zeros) <= 1);
        }
    }

    #[test]
    fn minimum_count_enforced() {
        assert!(generate_synthetic_raw(SyntheticFamily::CyclesVsChords, 19, 0).is_err());
    }
}
