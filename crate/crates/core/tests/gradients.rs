//! Finite-difference checks of every differentiable tape operation and of
//! the model's sub-networks.

use fedmm::model::Variant;
use fedmm::numerics::{grad_check, Bound, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use fedmm::rng::stream;
use fedmm::tasks::TaskKind;
use fedmm::verify::{grad_cases, GRAD_TOLERANCE};
use rand::Rng;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = stream(&[seed, rows as u64, cols as u64]);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Points whose entries keep at least `gap` away from zero, for kinked ops.
fn away_from_zero(rows: usize, cols: usize, gap: f64, seed: u64) -> Tensor {
    random(rows, cols, -1.0, 1.0, seed).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// Reduces an output to a scalar with fixed random weights so that every
/// output entry contributes a distinct gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = (tape.value(out).rows(), tape.value(out).cols());
    let w = tape.constant(random(r, c, -1.0, 1.0, seed ^ 0xABCD));
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

fn check(name: &str, inputs: &[(&str, Tensor)], f: impl Fn(&mut Tape, &Bound) -> Var) {
    let mut store = ParamStore::new();
    for (n, t) in inputs {
        store.insert(*n, t.clone()).unwrap();
    }
    let r = grad_check(
        |tape, p| {
            let out = f(tape, p);
            Ok(project(tape, out, 17))
        },
        &store,
        &GradCheckOptions { h: 1e-5, ..GradCheckOptions::default() },
    )
    .unwrap();
    assert!(r.max_rel_error <= GRAD_TOLERANCE, "{name}: {r:?}");
    assert!(r.checked > 0, "{name}: nothing checked");
}

#[test]
fn elementwise_binary_ops() {
    let a = random(3, 4, -1.0, 1.0, 1);
    let b = random(3, 4, 0.5, 2.0, 2);
    let ins = [("a", a), ("b", b)];
    check("add", &ins, |t, p| t.add(p["a"], p["b"]));
    check("sub", &ins, |t, p| t.sub(p["a"], p["b"]));
    check("mul", &ins, |t, p| t.mul(p["a"], p["b"]));
    check("div", &ins, |t, p| t.div(p["a"], p["b"]));
}

#[test]
fn broadcast_ops() {
    let x = random(3, 4, -1.0, 1.0, 3);
    let row = random(1, 4, -1.0, 1.0, 4);
    let col = random(3, 1, -1.0, 1.0, 5);
    check("add_row", &[("x", x.clone()), ("r", row.clone())], |t, p| t.add_row(p["x"], p["r"]));
    check("mul_row", &[("x", x.clone()), ("r", row)], |t, p| t.mul_row(p["x"], p["r"]));
    check("mul_col", &[("x", x), ("c", col)], |t, p| t.mul_col(p["x"], p["c"]));
}

#[test]
fn unary_ops() {
    let x = random(3, 4, -2.0, 2.0, 6);
    let pos = random(3, 4, 0.2, 3.0, 7);
    let kinked = away_from_zero(3, 4, 0.05, 8);
    check("scale", &[("x", x.clone())], |t, p| t.scale(p["x"], -1.7));
    check("add_scalar", &[("x", x.clone())], |t, p| t.add_scalar(p["x"], 0.3));
    check("one_minus", &[("x", x.clone())], |t, p| t.one_minus(p["x"]));
    check("sigmoid", &[("x", x.clone())], |t, p| t.sigmoid(p["x"]));
    check("tanh", &[("x", x.clone())], |t, p| t.tanh(p["x"]));
    check("exp", &[("x", x.clone())], |t, p| t.exp(p["x"]));
    check("softplus", &[("x", x.clone())], |t, p| t.softplus(p["x"]));
    check("ln", &[("x", pos)], |t, p| t.ln(p["x"]));
    check("relu", &[("x", kinked.clone())], |t, p| t.relu(p["x"]));
    check("clamp_max", &[("x", kinked)], |t, p| t.clamp_max(p["x"], 0.0));
}

#[test]
fn row_ops() {
    let x = random(4, 5, -1.5, 1.5, 9);
    let y = random(4, 5, -1.5, 1.5, 10);
    check("softmax_rows", &[("x", x.clone())], |t, p| t.softmax_rows(p["x"], 0.7));
    check("layer_norm_rows", &[("x", x.clone())], |t, p| t.layer_norm_rows(p["x"], 1e-5));
    check("row_sums", &[("x", x.clone())], |t, p| t.row_sums(p["x"]));
    check("sum", &[("x", x.clone())], |t, p| t.sum(p["x"]));
    check("mean", &[("x", x.clone())], |t, p| t.mean(p["x"]));
    check("row_dot", &[("x", x.clone()), ("y", y.clone())], |t, p| t.row_dot(p["x"], p["y"]));
    check("row_cosine", &[("x", x), ("y", y)], |t, p| t.row_cosine(p["x"], p["y"], 1e-12));
}

#[test]
fn shape_ops() {
    let a = random(3, 4, -1.0, 1.0, 11);
    let b = random(2, 4, -1.0, 1.0, 12);
    let c = random(3, 2, -1.0, 1.0, 13);
    check("matmul", &[("a", a.clone()), ("c", random(4, 2, -1.0, 1.0, 14))], |t, p| t.matmul(p["a"], p["c"]));
    check("transpose", &[("a", a.clone())], |t, p| t.transpose(p["a"]));
    check("concat_rows", &[("a", a.clone()), ("b", b)], |t, p| t.concat_rows(&[p["a"], p["b"]]));
    check("concat_cols", &[("a", a.clone()), ("c", c)], |t, p| t.concat_cols(&[p["a"], p["c"]]));
    check("slice_cols", &[("a", a.clone())], |t, p| t.slice_cols(p["a"], 1, 3));
    check("gather_rows", &[("a", a.clone())], |t, p| t.gather_rows(p["a"], &[2, 0, 2, 1]));
    check("mean_gather", &[("a", a.clone())], |t, p| t.mean_gather(p["a"], &[vec![0, 1], vec![], vec![2, 2, 0]]));
    check("weighted_gather", &[("a", a)], |t, p| t.weighted_gather(p["a"], vec![vec![(0, 0.5), (2, -1.5)], vec![], vec![(1, 2.0)]]));
}

#[test]
fn attention_and_cross_entropy() {
    let q = random(3, 4, -1.0, 1.0, 15);
    let k = random(5, 4, -1.0, 1.0, 16);
    let v = random(5, 6, -1.0, 1.0, 17);
    let cells = vec![vec![0, 1, 4], vec![2], vec![]];
    let masks = vec![vec![0.0, fedmm::numerics::MASKED, 0.0], vec![0.0], vec![]];
    check("attention", &[("q", q), ("k", k), ("v", v)], move |t, p| t.attention(p["q"], p["k"], p["v"], cells.clone(), masks.clone(), 2));
    let logits = random(4, 3, -2.0, 2.0, 18);
    check("softmax_xent", &[("l", logits)], |t, p| t.softmax_xent(p["l"], vec![(0, 2, 1.0), (1, 0, 0.5), (3, 1, 0.25)]));
}

#[test]
fn sub_networks_over_twenty_seeds() {
    for seed in 0..20 {
        for task in [TaskKind::Nc, TaskKind::Lp, TaskKind::Mr] {
            for case in grad_cases(task, Variant::Full, seed, 40).unwrap() {
                assert!(case.max_rel_error <= GRAD_TOLERANCE, "{case:?}");
            }
        }
    }
}

#[test]
fn zero_fill_objective() {
    for seed in 0..5 {
        for task in [TaskKind::Nc, TaskKind::Lp, TaskKind::Mr] {
            for case in grad_cases(task, Variant::ZeroFill, seed, 60).unwrap() {
                assert!(case.max_rel_error <= GRAD_TOLERANCE, "{case:?}");
            }
        }
    }
}
