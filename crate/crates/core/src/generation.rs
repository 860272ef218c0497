//! Cross-modal generation: context banks, modality-specific queries, the
//! gated warmup generator and its reconstruction and alignment losses.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::Layout;
use crate::error::Result;
use crate::graphdata::Mask;
use crate::numerics::nn::{init_linear, linear};
use crate::numerics::{batched_attention, AttentionProj, Bound, ParamStore, Tape, Tensor, Var};
use crate::rng::stream;

/// Width of the mask and modality embeddings.
pub const EMBED_DIM: usize = 16;
/// Norm-product guard of the alignment cosine.
pub const COS_EPS: f64 = 1e-12;
/// Denominator guard of the reconstruction loss.
pub const REC_EPS: f64 = 1e-12;

/// Where a bank token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    /// Another modality of the target node.
    SelfModality(usize),
    /// Modality `.1` of neighbor `.0`.
    Neighbor(usize, usize),
}

/// Tokens attended by one `(node, modality)` cell. `tokens` index stacked
/// rows; every additive mask entry is 0 because only visible tokens enter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBank {
    pub tokens: Vec<usize>,
    pub sources: Vec<TokenSource>,
}

impl ContextBank {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask(&self) -> Vec<f64> {
        vec![0.0; self.tokens.len()]
    }
}

/// The bank of cell `(i, m)`: the other visible modalities of `i` plus at
/// most `cap` visible neighbor tokens drawn uniformly without replacement.
pub fn build_context_bank<R: Rng + ?Sized>(
    layout: Layout,
    i: usize,
    m: usize,
    adj: &[Vec<usize>],
    visible: &Mask,
    cap: usize,
    rng: &mut R,
) -> ContextBank {
    let mut bank = ContextBank { tokens: Vec::new(), sources: Vec::new() };
    for o in (0..layout.modalities).filter(|&o| o != m && visible.get(i, o)) {
        bank.tokens.push(layout.idx(i, o));
        bank.sources.push(TokenSource::SelfModality(o));
    }
    let pool: Vec<(usize, usize)> =
        adj[i].iter().flat_map(|&j| (0..layout.modalities).map(move |o| (j, o))).filter(|&(j, o)| j != i && visible.get(j, o)).collect();
    let mut picked: Vec<usize> = if pool.len() <= cap { (0..pool.len()).collect() } else { sample(rng, pool.len(), cap).into_vec() };
    picked.sort_unstable();
    for k in picked {
        let (j, o) = pool[k];
        bank.tokens.push(layout.idx(j, o));
        bank.sources.push(TokenSource::Neighbor(j, o));
    }
    bank
}

/// Banks for every cell in stacked order, drawn from the stream `seed`.
pub fn build_banks(layout: Layout, adj: &[Vec<usize>], visible: &Mask, cap: usize, seed: u64) -> Vec<ContextBank> {
    let mut rng = stream(&[seed]);
    let mut banks = Vec::with_capacity(layout.cells());
    for m in 0..layout.modalities {
        for i in 0..layout.nodes {
            banks.push(build_context_bank(layout, i, m, adj, visible, cap, &mut rng));
        }
    }
    banks
}

/// Warmup coefficient `γ_t = min(1, t / T_w)`, optionally clamped.
pub fn warmup_gamma(t: usize, warmup: usize, clamp: Option<(f64, f64)>) -> f64 {
    let g = if warmup == 0 { 1.0 } else { (t as f64 / warmup as f64).min(1.0) };
    match clamp {
        Some((lo, hi)) => g.clamp(lo, hi),
        None => g,
    }
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, modalities: usize, d: usize, rng: &mut R) -> Result<()> {
    init_linear(store, "gen.mask_embed", modalities, EMBED_DIM, true, rng)?;
    store.insert("gen.mod_embed", crate::numerics::nn::glorot(modalities, EMBED_DIM, rng))?;
    init_linear(store, "gen.w_q", d + 2 * EMBED_DIM, d, true, rng)?;
    for part in ["k", "v", "o"] {
        store.insert(format!("gen.attn.{part}"), crate::numerics::nn::glorot(d, d, rng))?;
    }
    init_linear(store, "gen.gate", 2 * d, d, true, rng)?;
    init_linear(store, "gen.w_s", d, d, false, rng)?;
    init_linear(store, "gen.w_a", d, d, false, rng)?;
    init_linear(store, "gen.w_al", d, d, false, rng)
}

/// `[cells × M]` matrix whose row for cell `(i, m)` is the visibility row of `i`.
fn visibility_rows(layout: Layout, visible: &Mask) -> Tensor {
    let mut out = Tensor::zeros(layout.cells(), layout.modalities);
    for m in 0..layout.modalities {
        for i in 0..layout.nodes {
            for o in 0..layout.modalities {
                out.set(layout.idx(i, m), o, f64::from(u8::from(visible.get(i, o))));
            }
        }
    }
    out
}

/// Queries `Q = W_Q·[h_excl ‖ E_mask(r̃_i) ‖ E_mod(m)]` for every cell.
pub fn build_query(tape: &mut Tape, p: &Bound, h_excl: Var, visible: &Mask) -> Var {
    let layout = Layout::new(visible.nodes(), visible.modalities());
    let vis = tape.constant(visibility_rows(layout, visible));
    let mask_embed = linear(tape, p, "gen.mask_embed", vis);
    let modality_of: Vec<usize> = (0..layout.cells()).map(|c| c / layout.nodes).collect();
    let mod_embed = tape.gather_rows(p["gen.mod_embed"], &modality_of);
    let input = tape.concat_cols(&[h_excl, mask_embed, mod_embed]);
    linear(tape, p, "gen.w_q", input)
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    /// Stacked generated embeddings `ẑ`.
    pub z_hat: Var,
    pub gamma: f64,
    pub empty_bank: Vec<bool>,
    /// Attention output node, for inspecting weights.
    pub attention: Var,
}

/// `ẑ = γ·(g ⊙ c + (1 − g) ⊙ W_s·h_excl) + (1 − γ)·W_a·z_anc` with
/// `c = MHA(Q, bank)` and `g = σ(W_g·[c ‖ W_s·h_excl])`. Cells with an empty
/// bank force `g = 0`.
pub fn generate(
    tape: &mut Tape,
    p: &Bound,
    query: Var,
    h: Var,
    h_excl: Var,
    anchors: Var,
    banks: &[ContextBank],
    gamma: f64,
    heads: usize,
) -> Result<GenerationOutput> {
    let proj = AttentionProj::named(p, "gen.attn");
    let cells = banks.iter().map(|b| b.tokens.clone()).collect();
    let masks = banks.iter().map(ContextBank::mask).collect();
    let c = batched_attention(tape, query, h, h, cells, masks, heads, Some(&proj))?;
    let s = linear(tape, p, "gen.w_s", h_excl);
    let gate_in = tape.concat_cols(&[c, s]);
    let g = linear(tape, p, "gen.gate", gate_in);
    let g = tape.sigmoid(g);
    let empty_bank: Vec<bool> = banks.iter().map(ContextBank::is_empty).collect();
    let open = tape.constant(Tensor::col(&empty_bank.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect::<Vec<_>>()));
    let g = tape.mul_col(g, open);
    let gc = tape.mul(g, c);
    let not_g = tape.one_minus(g);
    let gs = tape.mul(not_g, s);
    let evidence = tape.add(gc, gs);
    let prior = linear(tape, p, "gen.w_a", anchors);
    let a = tape.scale(evidence, gamma);
    let b = tape.scale(prior, 1.0 - gamma);
    let z_hat = tape.add(a, b);
    Ok(GenerationOutput { z_hat, gamma, empty_bank, attention: c })
}

/// Per-cell squared error `‖ẑ − target‖²` as a `[cells × 1]` node.
pub fn squared_errors(tape: &mut Tape, z_hat: Var, target: &Tensor) -> Var {
    let t = tape.constant(target.clone());
    let diff = tape.sub(z_hat, t);
    let sq = tape.mul(diff, diff);
    tape.row_sums(sq)
}

/// `Σ Δ·‖ẑ − sg(z)‖² / (Σ Δ + ε)`; `target` is the stop-gradient value of
/// `z_raw` and `recon` the `[cells × 1]` indicator column.
pub fn reconstruction_loss(tape: &mut Tape, z_hat: Var, target: &Tensor, recon: &Tensor) -> Var {
    let sq = squared_errors(tape, z_hat, target);
    reconstruction_from_errors(tape, sq, recon)
}

/// [`reconstruction_loss`] from precomputed per-cell squared errors.
pub fn reconstruction_from_errors(tape: &mut Tape, sq: Var, recon: &Tensor) -> Var {
    let count = recon.sum();
    let delta = tape.constant(recon.clone());
    let masked = tape.mul(sq, delta);
    let total = tape.sum(masked);
    tape.scale(total, 1.0 / (count + REC_EPS))
}

/// Mean of `1 − cos(W_al·z̃^(m), W_al·z̃^(m'))` over every node and every
/// unordered modality pair, with `z̃ = r̃·z_raw + (1 − r̃)·ẑ`.
pub fn alignment_loss(tape: &mut Tape, p: &Bound, z: Var, z_hat: Var, visible: &Mask) -> Var {
    let layout = Layout::new(visible.nodes(), visible.modalities());
    let mixed = crate::encoding::mix_by_mask(tape, z, z_hat, &layout.mask_column(visible));
    let proj = linear(tape, p, "gen.w_al", mixed);
    alignment_from_projections(tape, proj, layout)
}

/// Alignment loss over already projected stacked embeddings.
pub fn alignment_from_projections(tape: &mut Tape, proj: Var, layout: Layout) -> Var {
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..layout.nodes {
        for m in 0..layout.modalities {
            for o in m + 1..layout.modalities {
                left.push(layout.idx(i, m));
                right.push(layout.idx(i, o));
            }
        }
    }
    if left.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let a = tape.gather_rows(proj, &left);
    let b = tape.gather_rows(proj, &right);
    let cos = tape.row_cosine(a, b, COS_EPS);
    let gap = tape.one_minus(cos);
    tape.mean(gap)
}
