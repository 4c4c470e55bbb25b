//! TU benchmark text format.
//!
//! `NAME_A.txt` holds one `i, j` edge per line with 1-based global node ids,
//! `NAME_graph_indicator.txt` the 1-based graph id of each node,
//! `NAME_graph_labels.txt` one label per graph and, optionally,
//! `NAME_node_labels.txt` one label per node.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{RawDataset, RawGraph};
use crate::error::{Error, Result};

fn read_required(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Non-empty lines with their 1-based line numbers. Accepts LF and CRLF.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_int(file: &Path, line: usize, token: &str) -> Result<i64> {
    token.trim().parse::<i64>().map_err(|_| Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: format!("expected an integer, found {token:?}"),
    })
}

fn parse_column(path: &Path, text: &str) -> Result<Vec<(usize, i64)>> {
    lines(text)
        .map(|(no, l)| Ok((no, parse_int(path, no, l)?)))
        .collect()
}

/// Sorted distinct values mapped onto `0..k`.
fn contiguous(values: &[i64]) -> (Vec<usize>, usize) {
    let distinct: Vec<i64> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mapped = values
        .iter()
        .map(|v| distinct.binary_search(v).expect("value is present"))
        .collect();
    (mapped, distinct.len())
}

pub fn parse_tu_dataset(dir: impl AsRef<Path>, name: &str) -> Result<RawDataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{name}_{suffix}.txt")) };

    let labels_path = file("graph_labels");
    let label_rows = parse_column(&labels_path, &read_required(&labels_path)?)?;
    if label_rows.is_empty() {
        return Err(Error::Dataset("no graphs".into()));
    }
    let raw_labels: Vec<i64> = label_rows.iter().map(|&(_, v)| v).collect();
    let (graph_labels, num_classes) = contiguous(&raw_labels);
    let num_graphs = graph_labels.len();

    let ind_path = file("graph_indicator");
    let indicator = parse_column(&ind_path, &read_required(&ind_path)?)?;
    let num_nodes_total = indicator.len();
    // global node -> (graph, local index)
    let mut owner = Vec::with_capacity(num_nodes_total);
    let mut sizes = vec![0usize; num_graphs];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::Parse {
                file: ind_path.clone(),
                line,
                msg: format!("graph id {gid} outside 1..={num_graphs}"),
            });
        }
        let g = gid as usize - 1;
        owner.push((g, sizes[g]));
        sizes[g] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Dataset(format!("graph {} has no nodes", empty + 1)));
    }

    let node_label_path = file("node_labels");
    let (node_labels, num_node_labels) = if node_label_path.is_file() {
        let rows = parse_column(&node_label_path, &fs::read_to_string(&node_label_path)?)?;
        if rows.len() != num_nodes_total {
            return Err(Error::Dataset(format!(
                "{} node labels for {num_nodes_total} nodes",
                rows.len()
            )));
        }
        let raw: Vec<i64> = rows.iter().map(|&(_, v)| v).collect();
        let (mapped, k) = contiguous(&raw);
        (Some(mapped), Some(k))
    } else {
        (None, None)
    };

    let a_path = file("A");
    let a_text = read_required(&a_path)?;
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (line, l) in lines(&a_text) {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                file: a_path.clone(),
                line,
                msg: format!("expected \"i, j\", found {l:?}"),
            });
        };
        let mut ids = [0usize; 2];
        for (slot, tok) in ids.iter_mut().zip([a, b]) {
            let v = parse_int(&a_path, line, tok)?;
            if v < 1 || v as usize > num_nodes_total {
                return Err(Error::Parse {
                    file: a_path.clone(),
                    line,
                    msg: format!("node id {v} outside 1..={num_nodes_total}"),
                });
            }
            *slot = v as usize - 1;
        }
        let ((ga, la), (gb, lb)) = (owner[ids[0]], owner[ids[1]]);
        if ga != gb {
            return Err(Error::Parse {
                file: a_path.clone(),
                line,
                msg: format!("edge joins graphs {} and {}", ga + 1, gb + 1),
            });
        }
        edges[ga].push((la, lb));
    }

    let mut per_graph_labels: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    if let Some(nl) = &node_labels {
        for (&(g, _), &lab) in owner.iter().zip(nl) {
            per_graph_labels[g].push(lab);
        }
    }
    let graphs = edges
        .into_iter()
        .enumerate()
        .map(|(g, e)| {
            let labels = node_labels.as_ref().map(|_| std::mem::take(&mut per_graph_labels[g]));
            RawGraph::new(sizes[g], e, labels, graph_labels[g])
        })
        .collect();

    Ok(RawDataset {
        name: name.to_string(),
        graphs,
        num_classes,
        num_node_labels,
    })
}

/// Writes `ds` in TU format. Edges are listed in both directions, graph
/// labels as class indices.
pub fn write_tu_dataset(ds: &RawDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let name = &ds.name;
    let mut a = Vec::new();
    let mut ind = Vec::new();
    let mut gl = Vec::new();
    let mut nl = Vec::new();
    let has_node_labels = ds.graphs.iter().all(|g| g.node_labels.is_some()) && !ds.graphs.is_empty();
    let mut offset = 0usize;
    for (gi, g) in ds.graphs.iter().enumerate() {
        let mut directed: Vec<(usize, usize)> = g
            .edges
            .iter()
            .flat_map(|&(i, j)| [(i, j), (j, i)])
            .collect();
        directed.sort_unstable();
        for (i, j) in directed {
            writeln!(a, "{}, {}", offset + i + 1, offset + j + 1)?;
        }
        for _ in 0..g.num_nodes {
            writeln!(ind, "{}", gi + 1)?;
        }
        writeln!(gl, "{}", g.label)?;
        if has_node_labels {
            for l in g.node_labels.as_ref().unwrap() {
                writeln!(nl, "{l}")?;
            }
        }
        offset += g.num_nodes;
    }
    fs::write(dir.join(format!("{name}_A.txt")), a)?;
    fs::write(dir.join(format!("{name}_graph_indicator.txt")), ind)?;
    fs::write(dir.join(format!("{name}_graph_labels.txt")), gl)?;
    if has_node_labels {
        fs::write(dir.join(format!("{name}_node_labels.txt")), nl)?;
    }
    Ok(())
}
