use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

/// A binary `nodes × modalities` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    nodes: usize,
    modalities: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(nodes: usize, modalities: usize, value: bool) -> Self {
        Self { nodes, modalities, bits: vec![value; nodes * modalities] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let modalities = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == modalities), "ragged mask");
        Self { nodes: rows.len(), modalities, bits: rows.iter().flatten().copied().collect() }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn get(&self, i: usize, m: usize) -> bool {
        self.bits[i * self.modalities + m]
    }

    pub fn set(&mut self, i: usize, m: usize, v: bool) {
        self.bits[i * self.modalities + m] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.modalities..(i + 1) * self.modalities]
    }

    /// Column `m` as a `[nodes × 1]` tensor of 0/1.
    pub fn column(&self, m: usize) -> Tensor {
        Tensor::col(&(0..self.nodes).map(|i| f64::from(u8::from(self.get(i, m)))).collect::<Vec<_>>())
    }

    /// Rows `idx` of this mask, in order.
    pub fn select(&self, idx: &[usize]) -> Mask {
        let mut out = Mask::filled(idx.len(), self.modalities, false);
        for (new, &old) in idx.iter().enumerate() {
            for m in 0..self.modalities {
                out.set(new, m, self.get(old, m));
            }
        }
        out
    }
}

/// One attribute channel of every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub features: Tensor,
}

impl Modality {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// An undirected graph whose nodes carry several feature modalities, some
/// of which may be absent.
///
/// Feature rows of naturally missing cells are all-zero placeholders and
/// must never be read as data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalGraph {
    pub num_nodes: usize,
    pub modalities: Vec<Modality>,
    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub edges: Vec<(usize, usize)>,
    pub labels: Option<Vec<usize>>,
    pub natural_mask: Mask,
    /// Cross-modal retrieval pairs `(query node, gallery node)`.
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl MultimodalGraph {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |&c| c + 1)
    }

    /// Sorted neighbor lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency(self.num_nodes, &self.edges)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.modalities.is_empty() {
            return Err(invalid("graph has no modalities"));
        }
        for (u, v) in &self.edges {
            if *u >= n || *v >= n {
                return Err(invalid(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u == v {
                return Err(invalid(format!("self-loop at node {u}")));
            }
        }
        if self.natural_mask.nodes() != n || self.natural_mask.modalities() != self.modalities.len() {
            return Err(invalid("natural mask shape does not match the graph"));
        }
        for (m, modality) in self.modalities.iter().enumerate() {
            if modality.features.rows() != n {
                return Err(invalid(format!("modality `{}` has {} rows, expected {n}", modality.name, modality.features.rows())));
            }
            if !modality.features.is_finite() {
                return Err(invalid(format!("modality `{}` has non-finite features", modality.name)));
            }
            for i in 0..n {
                if !self.natural_mask.get(i, m) && modality.features.row_slice(i).iter().any(|&x| x != 0.0) {
                    return Err(invalid(format!("missing cell ({i}, {}) has a non-zero placeholder", modality.name)));
                }
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(invalid(format!("{} labels for {n} nodes", l.len())));
            }
        }
        if let Some(p) = &self.pairs {
            if p.iter().any(|&(a, b)| a >= n || b >= n) {
                return Err(invalid("retrieval pair out of range"));
            }
        }
        Ok(())
    }

    /// Installs `mask` as the natural mask and zeroes the feature rows of
    /// every missing cell.
    pub fn set_natural_mask(&mut self, mask: Mask) {
        assert_eq!(mask.nodes(), self.num_nodes);
        assert_eq!(mask.modalities(), self.modalities.len());
        for (m, modality) in self.modalities.iter_mut().enumerate() {
            for i in 0..self.num_nodes {
                if !mask.get(i, m) {
                    modality.features.row_slice_mut(i).fill(0.0);
                }
            }
        }
        self.natural_mask = mask;
    }

    /// The subgraph induced by `nodes` (in the given order). Edges leaving
    /// the set are dropped.
    pub fn induced(&self, nodes: &[usize]) -> MultimodalGraph {
        let mut local = vec![usize::MAX; self.num_nodes];
        for (k, &i) in nodes.iter().enumerate() {
            local[i] = k;
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| {
                let (a, b) = (local[u], local[v]);
                (a != usize::MAX && b != usize::MAX).then(|| (a.min(b), a.max(b)))
            })
            .collect();
        let modalities = self
            .modalities
            .iter()
            .map(|md| Modality {
                name: md.name.clone(),
                features: Tensor::from_rows(&nodes.iter().map(|&i| md.features.row_slice(i).to_vec()).collect::<Vec<_>>()),
            })
            .collect();
        let pairs = self.pairs.as_ref().map(|p| {
            p.iter()
                .filter_map(|&(a, b)| {
                    let (x, y) = (local[a], local[b]);
                    (x != usize::MAX && y != usize::MAX).then_some((x, y))
                })
                .collect()
        });
        MultimodalGraph {
            num_nodes: nodes.len(),
            modalities,
            edges,
            labels: self.labels.as_ref().map(|l| nodes.iter().map(|&i| l[i]).collect()),
            natural_mask: self.natural_mask.select(nodes),
            pairs,
        }
    }
}

pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    adj
}
