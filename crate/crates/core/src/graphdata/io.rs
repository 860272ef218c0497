//! JSON graph files.
//!
//! ```text
//! { "schema": 1, "n": int,
//!   "modalities": [{"name": str, "dim": int, "features": [[f64]]}],
//!   "edges": [[u, v]], "labels": [int] | null,
//!   "natural_mask": [[0|1]], "pairs": [[i, j]] | null }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Mask, Modality, MultimodalGraph};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityFile {
    name: String,
    dim: usize,
    features: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    schema: u64,
    n: usize,
    modalities: Vec<ModalityFile>,
    edges: Vec<[usize; 2]>,
    labels: Option<Vec<usize>>,
    natural_mask: Vec<Vec<u8>>,
    pairs: Option<Vec<[usize; 2]>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::GraphFile(msg.into())
}

pub fn graph_to_json(graph: &MultimodalGraph) -> Result<String> {
    graph.validate()?;
    let file = GraphFile {
        schema: SCHEMA_VERSION,
        n: graph.num_nodes,
        modalities: graph
            .modalities
            .iter()
            .map(|m| ModalityFile {
                name: m.name.clone(),
                dim: m.dim(),
                features: (0..graph.num_nodes).map(|i| m.features.row_slice(i).to_vec()).collect(),
            })
            .collect(),
        edges: graph.edges.iter().map(|&(u, v)| [u, v]).collect(),
        labels: graph.labels.clone(),
        natural_mask: (0..graph.num_nodes).map(|i| graph.natural_mask.row(i).iter().map(|&b| u8::from(b)).collect()).collect(),
        pairs: graph.pairs.as_ref().map(|p| p.iter().map(|&(a, b)| [a, b]).collect()),
    };
    serde_json::to_string(&file).map_err(|e| bad(e.to_string()))
}

pub fn graph_from_json(text: &str) -> Result<MultimodalGraph> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(format!("malformed JSON: {e}")))?;
    match value.get("schema").and_then(serde_json::Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(bad(format!("unsupported schema version {v}, expected {SCHEMA_VERSION}"))),
        None => return Err(bad("missing integer field `schema`")),
    }
    let file: GraphFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    let n = file.n;
    let mut modalities = Vec::with_capacity(file.modalities.len());
    for m in file.modalities {
        if m.features.len() != n || m.features.iter().any(|r| r.len() != m.dim) {
            return Err(bad(format!("modality `{}` must have {n} rows of dim {}", m.name, m.dim)));
        }
        let data = m.features.into_iter().flatten().collect();
        modalities.push(Modality { name: m.name, features: Tensor::from_vec(n, m.dim, data) });
    }
    if file.natural_mask.len() != n || file.natural_mask.iter().any(|r| r.len() != modalities.len()) {
        return Err(bad("natural_mask must be n × (number of modalities)"));
    }
    let mut rows = Vec::with_capacity(n);
    for r in &file.natural_mask {
        let mut row = Vec::with_capacity(r.len());
        for &b in r {
            match b {
                0 => row.push(false),
                1 => row.push(true),
                other => return Err(bad(format!("mask entries must be 0 or 1, got {other}"))),
            }
        }
        rows.push(row);
    }
    let natural_mask = if n == 0 { Mask::filled(0, modalities.len(), true) } else { Mask::from_rows(&rows) };
    let graph = MultimodalGraph {
        num_nodes: n,
        modalities,
        edges: file.edges.into_iter().map(|[u, v]| (u.min(v), u.max(v))).collect(),
        labels: file.labels,
        natural_mask,
        pairs: file.pairs.map(|p| p.into_iter().map(|[a, b]| (a, b)).collect()),
    };
    graph.validate().map_err(|e| bad(e.to_string()))?;
    Ok(graph)
}

pub fn save_graph(graph: &MultimodalGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, graph_to_json(graph)?)?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<MultimodalGraph> {
    graph_from_json(&fs::read_to_string(path)?)
}
