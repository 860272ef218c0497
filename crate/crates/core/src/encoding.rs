//! Modality encoders, structural anchors, graph context and the
//! structure-only representation.
//!
//! Per-cell tensors are stacked by modality: the cell `(i, m)` of an
//! `n`-node graph lives in row `m·n + i` (see [`Layout`]). A shared GNN runs
//! over the stacked matrix with a block-diagonal adjacency, so messages
//! never cross modalities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::Mask;
use crate::numerics::nn::{init_layer_norm, init_linear, init_sage, layer_norm_named, linear};
use crate::numerics::{sage_conv, Bound, ParamStore, SageWeights, Tape, Tensor, Var};

/// Denominator guard of the anchor weights.
pub const ANCHOR_EPS: f64 = 1e-12;

/// Row indexing of stacked per-cell tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub nodes: usize,
    pub modalities: usize,
}

impl Layout {
    pub fn new(nodes: usize, modalities: usize) -> Self {
        Self { nodes, modalities }
    }

    pub fn cells(&self) -> usize {
        self.nodes * self.modalities
    }

    pub fn idx(&self, i: usize, m: usize) -> usize {
        m * self.nodes + i
    }

    /// Rows of modality `m`.
    pub fn block(&self, m: usize) -> Vec<usize> {
        (m * self.nodes..(m + 1) * self.nodes).collect()
    }

    /// `[cells × 1]` column of a mask in stacked order.
    pub fn mask_column(&self, mask: &Mask) -> Tensor {
        let mut data = Vec::with_capacity(self.cells());
        for m in 0..self.modalities {
            data.extend((0..self.nodes).map(|i| f64::from(u8::from(mask.get(i, m)))));
        }
        Tensor::col(&data)
    }

    /// Neighbor lists of the stacked graph: `(i, m)` links to `(j, m)`.
    pub fn stacked_adjacency(&self, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
        (0..self.modalities).flat_map(|m| adj.iter().map(move |l| l.iter().map(|&j| m * self.nodes + j).collect())).collect()
    }

    /// Per node, the list of its cells with `weight` each, for reducing a
    /// stacked tensor over modalities.
    pub fn node_reduction(&self, weight: f64) -> Vec<Vec<(usize, f64)>> {
        (0..self.nodes).map(|i| (0..self.modalities).map(|m| (self.idx(i, m), weight)).collect()).collect()
    }

    /// Stacked row → node, for broadcasting a per-node tensor to cells.
    pub fn broadcast_index(&self) -> Vec<usize> {
        (0..self.cells()).map(|c| c % self.nodes).collect()
    }
}

/// Neighbor weighting inside structural anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorWeighting {
    /// `a_ij = 1 / |N(i)|`.
    #[default]
    Uniform,
    /// `a_ij ∝ 1 / sqrt(|N(i)|·|N(j)|)`.
    DegreeNormalized,
}

/// Registers the encoder weights for modalities of raw widths `dims`.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    dims: &[usize],
    d: usize,
    gnn_layers: usize,
    with_anchors: bool,
    rng: &mut R,
) -> Result<()> {
    for (m, &dim) in dims.iter().enumerate() {
        init_linear(store, &format!("enc.phi.{m}"), dim, d, true, rng)?;
        init_layer_norm(store, &format!("enc.phi.{m}.ln"), d)?;
        init_linear(store, &format!("enc.adapter.{m}"), d, d, true, rng)?;
        if with_anchors {
            store.insert(format!("enc.null.{m}"), Tensor::zeros(1, d))?;
        }
    }
    for l in 0..gnn_layers {
        init_sage(store, &format!("enc.gnn.{l}"), d, d, rng)?;
    }
    if with_anchors {
        init_linear(store, "enc.str.in", 1, d, true, rng)?;
        for l in 0..gnn_layers {
            init_sage(store, &format!("enc.str.gnn.{l}"), d, d, rng)?;
        }
    }
    Ok(())
}

/// `z = LayerNorm(x·W + b)` for modality `m`.
pub fn encode_modality(tape: &mut Tape, p: &Bound, m: usize, x: Var) -> Result<Var> {
    let name = format!("enc.phi.{m}");
    let w = p.get(&format!("{name}.w")).ok_or_else(|| Error::Shape(format!("no encoder for modality {m}")))?;
    let (got, want) = (tape.value(x).cols(), tape.value(w).rows());
    if got != want {
        return Err(Error::Shape(format!("modality {m} has raw dim {got}, encoder expects {want}")));
    }
    let y = linear(tape, p, &name, x);
    Ok(layer_norm_named(tape, p, &format!("{name}.ln"), y))
}

/// Stacked raw embeddings `z_raw`, zero at cells where `r = 0`.
pub fn encode_all(tape: &mut Tape, p: &Bound, features: &[Tensor], r: &Mask) -> Result<Var> {
    let layout = Layout::new(r.nodes(), r.modalities());
    let mut blocks = Vec::with_capacity(features.len());
    for (m, x) in features.iter().enumerate() {
        let xv = tape.constant(x.clone());
        blocks.push(encode_modality(tape, p, m, xv)?);
    }
    let z = tape.concat_rows(&blocks);
    let keep = tape.constant(layout.mask_column(r));
    Ok(tape.mul_col(z, keep))
}

/// Normalized anchor weights of modality `m`: for node `i`, the pairs
/// `(j, a_ij·r̃_j / (Σ_j a_ij·r̃_j + ε))` over neighbors, plus whether no
/// neighbor is visible.
pub fn anchor_weights(
    adj: &[Vec<usize>],
    visible: &Mask,
    m: usize,
    weighting: AnchorWeighting,
) -> (Vec<Vec<(usize, f64)>>, Vec<bool>) {
    let raw: Vec<Vec<(usize, f64)>> = adj
        .iter()
        .map(|nbrs| {
            nbrs.iter()
                .map(|&j| {
                    let a = match weighting {
                        AnchorWeighting::Uniform => 1.0 / nbrs.len() as f64,
                        AnchorWeighting::DegreeNormalized => 1.0 / ((nbrs.len() * adj[j].len()) as f64).sqrt(),
                    };
                    (j, a)
                })
                .collect()
        })
        .collect();
    normalize_anchor_weights(&raw, visible, m)
}

/// Applies visibility and the ε-guarded normalization to explicit weights.
pub fn normalize_anchor_weights(raw: &[Vec<(usize, f64)>], visible: &Mask, m: usize) -> (Vec<Vec<(usize, f64)>>, Vec<bool>) {
    let mut rows = Vec::with_capacity(raw.len());
    let mut fallback = Vec::with_capacity(raw.len());
    for list in raw {
        let kept: Vec<(usize, f64)> = list.iter().filter(|&&(j, a)| visible.get(j, m) && a > 0.0).copied().collect();
        let total: f64 = kept.iter().map(|&(_, a)| a).sum();
        fallback.push(kept.is_empty());
        rows.push(kept.into_iter().map(|(j, a)| (j, a / (total + ANCHOR_EPS))).collect());
    }
    (rows, fallback)
}

/// Stacked anchors plus the per-cell fallback flags.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Var,
    pub fallback: Vec<bool>,
}

/// Anchor of one modality from normalized weights: a weighted sum of the
/// rows of `z` (an `n × d` block), or the null token where `fallback` is set.
pub fn structural_anchor(tape: &mut Tape, z: Var, null: Var, weights: Vec<Vec<(usize, f64)>>, fallback: &[bool]) -> Var {
    let mixed = tape.weighted_gather(z, weights);
    let nulls = tape.weighted_gather(null, fallback.iter().map(|&f| if f { vec![(0, 1.0)] } else { Vec::new() }).collect());
    tape.add(mixed, nulls)
}

/// Anchors for every cell from the stacked raw embeddings.
pub fn structural_anchors(
    tape: &mut Tape,
    p: &Bound,
    z: Var,
    adj: &[Vec<usize>],
    visible: &Mask,
    weighting: AnchorWeighting,
) -> AnchorSet {
    let layout = Layout::new(visible.nodes(), visible.modalities());
    let mut blocks = Vec::with_capacity(layout.modalities);
    let mut fallback = Vec::with_capacity(layout.cells());
    for m in 0..layout.modalities {
        let (w, fb) = anchor_weights(adj, visible, m, weighting);
        // Shift neighbor indices into the stacked rows of modality m.
        let w = w.into_iter().map(|l| l.into_iter().map(|(j, a)| (layout.idx(j, m), a)).collect()).collect();
        blocks.push(structural_anchor(tape, z, p[&format!("enc.null.{m}")], w, &fb));
        fallback.extend(fb);
    }
    AnchorSet { anchors: tape.concat_rows(&blocks), fallback }
}

/// `x ⊙ keep + other ⊙ (1 − keep)` for a constant `[rows × 1]` column.
pub fn mix_by_mask(tape: &mut Tape, x: Var, other: Var, keep: &Tensor) -> Var {
    let k = tape.constant(keep.clone());
    let drop = tape.constant(keep.map(|v| 1.0 - v));
    let a = tape.mul_col(x, k);
    let b = tape.mul_col(other, drop);
    tape.add(a, b)
}

/// Runs the per-modality adapters `ψ_m` (linear + ReLU) over the stacked
/// input and then the shared GNN.
pub fn adapt_and_propagate(tape: &mut Tape, p: &Bound, input: Var, layout: Layout, adj: &[Vec<usize>], layers: usize) -> Var {
    let mut blocks = Vec::with_capacity(layout.modalities);
    for m in 0..layout.modalities {
        let x = tape.gather_rows(input, &layout.block(m));
        let y = linear(tape, p, &format!("enc.adapter.{m}"), x);
        blocks.push(tape.relu(y));
    }
    let x = tape.concat_rows(&blocks);
    gnn_stack(tape, p, "enc.gnn", x, &layout.stacked_adjacency(adj), layers)
}

/// `layers` SAGE convolutions with ReLU between them.
pub fn gnn_stack(tape: &mut Tape, p: &Bound, prefix: &str, mut x: Var, adj: &[Vec<usize>], layers: usize) -> Var {
    for l in 0..layers {
        if l > 0 {
            x = tape.relu(x);
        }
        x = sage_conv(tape, x, adj, &SageWeights::named(p, &format!("{prefix}.{l}")));
    }
    x
}

/// Per-modality graph context `h` from the raw/anchor mixture
/// `r̃·z_raw + (1 − r̃)·z_anc`.
pub fn graph_context(
    tape: &mut Tape,
    p: &Bound,
    z: Var,
    anchors: Var,
    visible: &Mask,
    adj: &[Vec<usize>],
    layers: usize,
) -> Var {
    let layout = Layout::new(visible.nodes(), visible.modalities());
    let mixed = mix_by_mask(tape, z, anchors, &layout.mask_column(visible));
    adapt_and_propagate(tape, p, mixed, layout, adj, layers)
}

/// Target-exclusive context: for cell `(i, m)`, the mean of `h_i^(m')` over
/// the other visible modalities `m' ≠ m`, or zero if there are none.
pub fn target_exclusive_context(tape: &mut Tape, h: Var, visible: &Mask) -> Var {
    let layout = Layout::new(visible.nodes(), visible.modalities());
    let mut rows = Vec::with_capacity(layout.cells());
    for m in 0..layout.modalities {
        for i in 0..layout.nodes {
            let others: Vec<usize> = (0..layout.modalities).filter(|&o| o != m && visible.get(i, o)).collect();
            let w = 1.0 / others.len().max(1) as f64;
            rows.push(others.into_iter().map(|o| (layout.idx(i, o), w)).collect());
        }
    }
    tape.weighted_gather(h, rows)
}

/// Structure-only representation `h_str`: `log(1 + degree)` lifted to `d`
/// (linear + ReLU) and propagated through its own SAGE stack.
pub fn structure_only_repr(tape: &mut Tape, p: &Bound, adj: &[Vec<usize>], layers: usize) -> Var {
    let deg = Tensor::col(&adj.iter().map(|l| (1.0 + l.len() as f64).ln()).collect::<Vec<_>>());
    let x = tape.constant(deg);
    let y = linear(tape, p, "enc.str.in", x);
    let y = tape.relu(y);
    gnn_stack(tape, p, "enc.str.gnn", y, adj, layers)
}
