//! Neural building blocks recorded on a [`Tape`]: affine maps, affine layer
//! normalization, mean-aggregation graph convolution and multi-head
//! attention with additive masks.

use rand::Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var, MASKED};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance guard used by every layer normalization in the crate.
pub const LN_EPS: f64 = 1e-10;

/// Glorot-uniform initialization.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Registers `prefix.w` (`fan_in × fan_out`) and, if requested, a zero
/// `prefix.b`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), glorot(fan_in, fan_out, rng))?;
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out))?;
    }
    Ok(())
}

/// Registers unit gain `prefix.g` and zero shift `prefix.b`.
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(1, dim, 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, dim))
}

/// Registers the weights of one [`sage_conv`] layer under `prefix`.
pub fn init_sage<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    dim_in: usize,
    dim_out: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.self"), dim_in, dim_out, true, rng)?;
    init_linear(store, &format!("{prefix}.neigh"), dim_in, dim_out, false, rng)
}

/// `x · W (+ b)` using `prefix.w` and, when bound, `prefix.b`.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, p[&format!("{prefix}.w")]);
    match p.get(&format!("{prefix}.b")) {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

/// Layer normalization with learned gain and shift.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, shift: Var) -> Var {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let s = tape.mul_row(n, gain);
    tape.add_row(s, shift)
}

/// [`layer_norm`] with parameters `prefix.g` / `prefix.b`.
pub fn layer_norm_named(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    layer_norm(tape, x, p[&format!("{prefix}.g")], p[&format!("{prefix}.b")])
}

/// Weights of a mean-aggregation graph convolution.
#[derive(Debug, Clone, Copy)]
pub struct SageWeights {
    pub w_self: Var,
    pub b_self: Option<Var>,
    pub w_neigh: Var,
}

impl SageWeights {
    pub fn named(p: &Bound, prefix: &str) -> Self {
        Self {
            w_self: p[&format!("{prefix}.self.w")],
            b_self: p.get(&format!("{prefix}.self.b")),
            w_neigh: p[&format!("{prefix}.neigh.w")],
        }
    }
}

/// GraphSAGE-style convolution with mean aggregation:
/// `row i = x_i·W_self (+ b) + mean_{j∈N(i)} x_j · W_neigh`.
///
/// An isolated node contributes a zero neighbor term.
pub fn sage_conv(tape: &mut Tape, x: Var, neighbors: &[Vec<usize>], w: &SageWeights) -> Var {
    debug_assert!(neighbors.iter().flatten().all(|&j| j < neighbors.len()));
    let own = tape.matmul(x, w.w_self);
    let own = match w.b_self {
        Some(b) => tape.add_row(own, b),
        None => own,
    };
    let agg = tape.mean_gather(x, neighbors);
    let neigh = tape.matmul(agg, w.w_neigh);
    tape.add(own, neigh)
}

/// Projection matrices around the attention core. Each is `d × d`. The
/// query projection is optional for callers that build their own queries.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProj {
    pub q: Option<Var>,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

impl AttentionProj {
    pub fn named(p: &Bound, prefix: &str) -> Self {
        Self {
            q: p.get(&format!("{prefix}.q")),
            k: p[&format!("{prefix}.k")],
            v: p[&format!("{prefix}.v")],
            o: p[&format!("{prefix}.o")],
        }
    }
}

/// Batched multi-head attention: query row `c` attends over the rows
/// `cells[c]` of `bank` (keys) and `values`, with additive logits
/// `masks[c]`. Without projections the raw query, bank and values are used.
///
/// Cells with no tokens produce a zero row; a cell whose tokens are all
/// masked is rejected with [`Error::EmptyAttention`].
pub fn batched_attention(
    tape: &mut Tape,
    queries: Var,
    bank: Var,
    values: Var,
    cells: Vec<Vec<usize>>,
    masks: Vec<Vec<f64>>,
    heads: usize,
    proj: Option<&AttentionProj>,
) -> Result<Var> {
    for m in &masks {
        if !m.is_empty() && m.iter().all(|&x| x <= MASKED / 2.0) {
            return Err(Error::EmptyAttention);
        }
    }
    let (dq, dk, dv) = (tape.value(queries).cols(), tape.value(bank).cols(), tape.value(values).cols());
    if dq % heads != 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(Error::Shape(format!("widths {dq}/{dk}/{dv} not divisible by {heads} heads")));
    }
    let out = match proj {
        Some(pr) => {
            let q = match pr.q {
                Some(w) => tape.matmul(queries, w),
                None => queries,
            };
            let k = tape.matmul(bank, pr.k);
            let v = tape.matmul(values, pr.v);
            let core = tape.attention(q, k, v, cells, masks, heads);
            tape.matmul(core, pr.o)
        }
        None => tape.attention(queries, bank, values, cells, masks, heads),
    };
    Ok(out)
}

/// Single-query multi-head attention over a bank of `S` tokens.
///
/// `additive_mask[t]` is `0.0` to keep token `t` or [`MASKED`] to drop it.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    bank: Var,
    values: Var,
    additive_mask: &[f64],
    heads: usize,
    proj: Option<&AttentionProj>,
) -> Result<Var> {
    let s = tape.value(bank).rows();
    if s == 0 || additive_mask.len() != s {
        return Err(Error::Shape(format!("bank of {s} tokens with mask of {}", additive_mask.len())));
    }
    if tape.value(values).rows() != s || tape.value(query).rows() != 1 {
        return Err(Error::Shape("attention expects one query row and S value rows".into()));
    }
    batched_attention(tape, query, bank, values, vec![(0..s).collect()], vec![additive_mask.to_vec()], heads, proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_attention(bank: &[Vec<f64>], values: &[Vec<f64>], mask: &[f64], heads: usize) -> (Tensor, Vec<f64>) {
        let mut tape = Tape::new();
        let d = bank[0].len();
        let q = tape.leaf(Tensor::row(&vec![0.7; d]));
        let k = tape.leaf(Tensor::from_rows(bank));
        let v = tape.leaf(Tensor::from_rows(values));
        let out = multi_head_attention(&mut tape, q, k, v, mask, heads, None).unwrap();
        let w = tape.attention_weights(out, 0).unwrap().to_vec();
        (tape.value(out).clone(), w)
    }

    #[test]
    fn single_token_returns_its_value() {
        let (out, w) = run_attention(&[vec![0.3, -1.0]], &[vec![5.0, -2.0]], &[0.0], 1);
        assert_eq!(w, vec![1.0]);
        assert_eq!(out.data(), &[5.0, -2.0]);
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let (_, w) = run_attention(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[vec![1.0, 0.0], vec![1.0, 0.0]], &[0.0, 0.0], 2);
        assert!(w.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn masked_token_gets_exact_zero_weight() {
        let (out, w) = run_attention(&[vec![1.0, 2.0], vec![9.0, 9.0]], &[vec![1.0, 0.0], vec![100.0, 100.0]], &[0.0, MASKED], 1);
        assert_eq!(w[1], 0.0);
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_bank_is_an_error() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[1.0, 1.0]));
        let k = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let err = multi_head_attention(&mut tape, q, k, k, &[MASKED, MASKED], 1, None);
        assert!(matches!(err, Err(Error::EmptyAttention)));
    }

    #[test]
    fn identity_projections_are_transparent() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::identity(2));
        let proj = AttentionProj { q: Some(eye), k: eye, v: eye, o: eye };
        let q = tape.leaf(Tensor::row(&[0.1, 0.2]));
        let k = tape.leaf(Tensor::row(&[3.0, 4.0]));
        let out = multi_head_attention(&mut tape, q, k, k, &[0.0], 2, Some(&proj)).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    fn sage_once(x: &Tensor, nbrs: &[Vec<usize>], ws: Tensor, wn: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w = SageWeights { w_self: tape.leaf(ws), b_self: None, w_neigh: tape.leaf(wn) };
        let y = sage_conv(&mut tape, xv, nbrs, &w);
        tape.value(y).clone()
    }

    #[test]
    fn sage_identity_self_zero_neighbor_is_identity() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.5]]);
        let nbrs = vec![vec![1, 2], vec![0], vec![0]];
        assert_eq!(sage_once(&x, &nbrs, Tensor::identity(2), Tensor::zeros(2, 2)), x);
    }

    #[test]
    fn sage_neighbor_mean() {
        let x = Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 0.0], vec![3.0, 0.0], vec![7.0, 7.0]]);
        let nbrs = vec![vec![1, 2], vec![0], vec![0], vec![]];
        let y = sage_once(&x, &nbrs, Tensor::zeros(2, 2), Tensor::identity(2));
        assert_eq!(y.row_slice(0), &[2.0, 0.0]);
        // isolated node: empty mean is the zero vector
        assert_eq!(y.row_slice(3), &[0.0, 0.0]);
    }

    #[test]
    fn sage_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = glorot(5, 3, &mut rng);
        let nbrs = vec![vec![1, 2], vec![0, 3], vec![0], vec![1, 4], vec![3]];
        let ws = glorot(3, 3, &mut rng);
        let wn = glorot(3, 3, &mut rng);
        let y = sage_once(&x, &nbrs, ws.clone(), wn.clone());
        let perm = [3, 0, 4, 1, 2]; // new index of old node i
        let mut inv = [0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let px = Tensor::from_rows(&(0..5).map(|p| x.row_slice(inv[p]).to_vec()).collect::<Vec<_>>());
        let pn: Vec<Vec<usize>> = (0..5).map(|p| nbrs[inv[p]].iter().map(|&j| perm[j]).collect()).collect();
        let py = sage_once(&px, &pn, ws, wn);
        for i in 0..5 {
            for (a, b) in y.row_slice(i).iter().zip(py.row_slice(perm[i])) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    fn ln(row: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(row));
        let g = tape.leaf(Tensor::full(1, row.len(), 1.0));
        let b = tape.leaf(Tensor::zeros(1, row.len()));
        let y = layer_norm(&mut tape, x, g, b);
        tape.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_cases() {
        assert_eq!(ln(&[4.0, 4.0, 4.0]), vec![0.0, 0.0, 0.0]);
        let y = ln(&[1.0, -1.0]);
        assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
        let y = ln(&[0.3, 7.0, -2.0, 1.1]);
        assert!(y.iter().sum::<f64>().abs() < 1e-10);
    }
}
