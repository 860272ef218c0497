//! Post-fusion refinement, task heads and task losses.

use rand::seq::index::sample;
use rand::Rng;

use super::{TaskKind, TaskSpec};
use crate::error::{invalid, Result};
use crate::numerics::nn::{init_layer_norm, init_linear, init_sage, layer_norm_named, linear};
use crate::numerics::{sage_conv, Bound, ParamStore, SageWeights, Tape, Tensor, Var};

/// Guard inside the row normalization of retrieval embeddings.
pub const NORM_EPS: f64 = 1e-12;

pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    kind: TaskKind,
    d: usize,
    classes: usize,
    rng: &mut R,
) -> Result<()> {
    init_sage(store, "task.refine", d, d, rng)?;
    init_layer_norm(store, "task.refine.ln", d)?;
    if classes > 0 && kind != TaskKind::Lp {
        init_linear(store, "task.nc", d, classes, true, rng)?;
    }
    if kind == TaskKind::Mr {
        init_linear(store, "task.mr.q", d, d, false, rng)?;
        init_linear(store, "task.mr.g", d, d, false, rng)?;
    }
    Ok(())
}

/// `r' = LN(r + σ(SAGE(r)))`.
pub fn refine(tape: &mut Tape, p: &Bound, r: Var, adj: &[Vec<usize>]) -> Var {
    let conv = sage_conv(tape, r, adj, &SageWeights::named(p, "task.refine"));
    let gate = tape.sigmoid(conv);
    let sum = tape.add(r, gate);
    layer_norm_named(tape, p, "task.refine.ln", sum)
}

/// Class logits `[n × C]`.
pub fn classify(tape: &mut Tape, p: &Bound, r: Var) -> Var {
    linear(tape, p, "task.nc", r)
}

/// Mean cross-entropy over `nodes`.
pub fn classification_loss(tape: &mut Tape, logits: Var, nodes: &[usize], labels: &[usize]) -> Result<Var> {
    if nodes.is_empty() {
        return Err(invalid("no labelled nodes for classification"));
    }
    let w = 1.0 / nodes.len() as f64;
    let targets = nodes.iter().map(|&i| (i, labels[i], w)).collect();
    Ok(tape.softmax_xent(logits, targets))
}

/// Link scores `dot(r'_i, r'_j)` as `[pairs × 1]`.
pub fn link_scores(tape: &mut Tape, r: Var, pairs: &[(usize, usize)]) -> Var {
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ra = tape.gather_rows(r, &a);
    let rb = tape.gather_rows(r, &b);
    tape.row_dot(ra, rb)
}

/// Plain dot-product scores from values, for ranking candidates.
pub fn link_scores_value(r: &Tensor, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(i, j)| r.row_slice(i).iter().zip(r.row_slice(j)).map(|(a, b)| a * b).sum()).collect()
}

/// Draws a pool of `max(pool_min, pool_scale·|positives|)` node pairs that are
/// not edges and keeps the `|positives|` highest scoring ones.
pub fn hard_negatives<R: Rng + ?Sized>(
    r: &Tensor,
    n: usize,
    edges: &std::collections::HashSet<(usize, usize)>,
    positives: usize,
    spec: &TaskSpec,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if n < 2 || positives == 0 {
        return Vec::new();
    }
    let pool_size = ((spec.pool_scale * positives as f64).ceil() as usize).max(spec.pool_min);
    let mut pool = Vec::with_capacity(pool_size);
    let mut attempts = 0;
    while pool.len() < pool_size && attempts < pool_size * 20 {
        attempts += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j && !edges.contains(&(i.min(j), i.max(j))) {
            pool.push((i, j));
        }
    }
    if pool.is_empty() {
        return Vec::new();
    }
    let scores = link_scores_value(r, &pool);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    (0..positives).map(|k| pool[order[k % order.len()]]).collect()
}

/// Uniform non-edge pairs, used as evaluation negatives.
pub fn uniform_negatives<R: Rng + ?Sized>(
    n: usize,
    edges: &std::collections::HashSet<(usize, usize)>,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < count * 50 + 100 && n >= 2 {
        attempts += 1;
        let pick = sample(rng, n, 2).into_vec();
        let (i, j) = (pick[0], pick[1]);
        if !edges.contains(&(i.min(j), i.max(j))) {
            out.push((i, j));
        }
    }
    out
}

/// `w_bce·BCE + w_bpr·BPR + w_margin·margin` with `pos[k]` paired with
/// `neg[k]` for the pairwise terms.
pub fn link_loss(tape: &mut Tape, r: Var, pos: &[(usize, usize)], neg: &[(usize, usize)], spec: &TaskSpec) -> Result<Var> {
    if pos.is_empty() {
        return Err(invalid("no positive edges for link prediction"));
    }
    if neg.len() != pos.len() {
        return Err(invalid("link loss needs one negative per positive"));
    }
    let sp = link_scores(tape, r, pos);
    let sn = link_scores(tape, r, neg);
    let neg_sp = tape.scale(sp, -1.0);
    let lp = tape.softplus(neg_sp);
    let ln = tape.softplus(sn);
    let both = tape.add(lp, ln);
    let bce = tape.sum(both);
    let bce = tape.scale(bce, 1.0 / (2 * pos.len()) as f64);
    let gap = tape.sub(sp, sn);
    let neg_gap = tape.scale(gap, -1.0);
    let bpr = tape.softplus(neg_gap);
    let bpr = tape.mean(bpr);
    let shortfall = tape.add_scalar(neg_gap, spec.margin);
    let hinge = tape.relu(shortfall);
    let margin = tape.mean(hinge);
    let a = tape.scale(bce, spec.w_bce);
    let b = tape.scale(bpr, spec.w_bpr);
    let c = tape.scale(margin, spec.w_margin);
    let ab = tape.add(a, b);
    Ok(tape.add(ab, c))
}

/// Rows scaled to unit norm.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.row_dot(x, x);
    let sq = tape.add_scalar(sq, NORM_EPS);
    let ln = tape.ln(sq);
    let half = tape.scale(ln, -0.5);
    let inv = tape.exp(half);
    tape.mul_col(x, inv)
}

/// Unit-norm query and gallery embeddings from the query and gallery
/// modality expert outputs.
pub fn retrieval_embeddings(tape: &mut Tape, p: &Bound, f_query: Var, f_gallery: Var) -> (Var, Var) {
    let q = linear(tape, p, "task.mr.q", f_query);
    let g = linear(tape, p, "task.mr.g", f_gallery);
    (normalize_rows(tape, q), normalize_rows(tape, g))
}

/// InfoNCE over `pairs` with in-batch negatives: query `a` must pick its
/// gallery item `b` among the gallery items of every pair.
pub fn info_nce(tape: &mut Tape, q: Var, g: Var, pairs: &[(usize, usize)], tau: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Err(invalid("no retrieval pairs"));
    }
    let qa: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let gb: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let qs = tape.gather_rows(q, &qa);
    let gs = tape.gather_rows(g, &gb);
    let gt = tape.transpose(gs);
    let sim = tape.matmul(qs, gt);
    let logits = tape.scale(sim, 1.0 / tau);
    let w = 1.0 / pairs.len() as f64;
    Ok(tape.softmax_xent(logits, (0..pairs.len()).map(|k| (k, k, w)).collect()))
}
