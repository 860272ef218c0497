//! Recovery uncertainty, two-expert routing, reliability-weighted fusion
//! with a structural fallback, the routing regularizers and a Monte Carlo
//! check of the fusion error bound.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::Layout;
use crate::error::{invalid, Error, Result};
use crate::numerics::nn::{init_layer_norm, init_linear, layer_norm_named, linear};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};
use crate::rng::{domain, stream};

/// Denominator guard of the fusion weights.
pub const FUSION_EPS: f64 = 1e-13;

/// Optional knobs around fusion. All are off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionOptions {
    /// Caps the mean uncertainty fed to the fallback gate.
    pub uncertainty_cap: Option<f64>,
    /// Mixes the fusion weights with `floor / M`.
    pub uniform_floor: f64,
    /// Replaces the learned fallback coefficient.
    pub force_fallback: Option<f64>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { uncertainty_cap: None, uniform_floor: 0.0, force_fallback: None }
    }
}

/// Hidden width of the router and the uncertainty head.
pub fn hidden_width(d: usize) -> usize {
    (d / 2).max(4)
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut R) -> Result<()> {
    init_linear(store, "fus.unc.0", 3 * d, hidden, true, rng)?;
    init_linear(store, "fus.unc.1", hidden, 1, true, rng)?;
    init_linear(store, "fus.router.0", 4, hidden, true, rng)?;
    init_linear(store, "fus.router.1", hidden, 2, true, rng)?;
    for e in ["fus.e_obs", "fus.e_rec", "fus.e_struct"] {
        init_linear(store, e, d, d, true, rng)?;
    }
    init_linear(store, "fus.fb", 2, 1, true, rng)?;
    init_layer_norm(store, "fus.ln", d)
}

fn mlp2(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, p, &format!("{prefix}.0"), x);
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.1"), h)
}

/// `u = 0` where `r̃ = 1`, else `σ(f_u([ẑ ‖ h_excl ‖ z_anc]))`; `visible` is
/// the stacked `[cells × 1]` column of `r̃`.
pub fn estimate_uncertainty(tape: &mut Tape, p: &Bound, z_hat: Var, h_excl: Var, anchors: Var, visible: &Tensor) -> Var {
    let x = tape.concat_cols(&[z_hat, h_excl, anchors]);
    let logit = mlp2(tape, p, "fus.unc", x);
    let u = tape.sigmoid(logit);
    let hidden = tape.constant(visible.map(|v| 1.0 - v));
    tape.mul_col(u, hidden)
}

/// Routing weights `softmax(f_r([r̃, u, ρ_i, ρ_k]) / τ)` as `[cells × 2]`
/// (observed expert, recovered expert). `rho_node` is per cell.
pub fn route(tape: &mut Tape, p: &Bound, visible: &Tensor, u: Var, rho_node: &Tensor, rho_client: f64, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config { key: "model.tau".into(), msg: format!("router temperature must be > 0, got {tau}") });
    }
    let r = tape.constant(visible.clone());
    let rho_i = tape.constant(rho_node.clone());
    let rho_k = tape.constant(Tensor::full(visible.rows(), 1, rho_client));
    let x = tape.concat_cols(&[r, u, rho_i, rho_k]);
    let logits = mlp2(tape, p, "fus.router", x);
    Ok(tape.softmax_rows(logits, tau))
}

/// `r̃·(w_obs·e_obs + w_rec·e_rec) + (1 − r̃)·e_rec` from expert outputs.
pub fn mix_experts(tape: &mut Tape, e_obs: Var, e_rec: Var, weights: Var, visible: &Tensor) -> Var {
    let w_obs = tape.slice_cols(weights, 0, 1);
    let w_rec = tape.slice_cols(weights, 1, 2);
    let a = tape.mul_col(e_obs, w_obs);
    let b = tape.mul_col(e_rec, w_rec);
    let routed = tape.add(a, b);
    crate::encoding::mix_by_mask(tape, routed, e_rec, visible)
}

/// Expert outputs `f` per cell with `E_obs`, `E_rec` = linear + ReLU.
pub fn expert_mix(tape: &mut Tape, p: &Bound, z: Var, z_hat: Var, weights: Var, visible: &Tensor) -> Var {
    let e_obs = linear(tape, p, "fus.e_obs", z);
    let e_obs = tape.relu(e_obs);
    let e_rec = linear(tape, p, "fus.e_rec", z_hat);
    let e_rec = tape.relu(e_rec);
    mix_experts(tape, e_obs, e_rec, weights, visible)
}

/// Per-cell fusion weights `a = exp(−u) / (Σ_m' exp(−u^(m')) + ε)`, mixed
/// with `floor / M` when a uniform floor is set.
pub fn fusion_weights(tape: &mut Tape, u: Var, layout: Layout, floor: f64) -> Var {
    let neg = tape.scale(u, -1.0);
    let e = tape.exp(neg);
    let per_node = tape.weighted_gather(e, layout.node_reduction(1.0));
    let spread = tape.gather_rows(per_node, &layout.broadcast_index());
    let denom = tape.add_scalar(spread, FUSION_EPS);
    let a = tape.div(e, denom);
    if floor > 0.0 {
        let s = tape.scale(a, 1.0 - floor);
        tape.add_scalar(s, floor / layout.modalities as f64)
    } else {
        a
    }
}

#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    /// `[n × d]` fused node representations.
    pub r: Var,
    /// `[cells × 1]` fusion weights.
    pub weights: Var,
    /// `[n × 1]` fallback coefficients.
    pub alpha: Var,
    /// `[n × 1]` mean uncertainty per node.
    pub u_bar: Var,
}

/// `r = LN((1 − α)·Σ_m a^(m) f^(m) + α·E_struct(h_str))` with
/// `α = σ(f_fb([ρ_i, ū]))`; `rho_node` is per node.
pub fn fuse(tape: &mut Tape, p: &Bound, f: Var, u: Var, rho_node: &Tensor, h_str: Var, layout: Layout, opts: &FusionOptions) -> FusedRepresentation {
    let weights = fusion_weights(tape, u, layout, opts.uniform_floor);
    let weighted = tape.mul_col(f, weights);
    let data = tape.weighted_gather(weighted, layout.node_reduction(1.0));
    let u_bar = tape.weighted_gather(u, layout.node_reduction(1.0 / layout.modalities as f64));
    let gate_u = match opts.uncertainty_cap {
        Some(cap) => tape.clamp_max(u_bar, cap),
        None => u_bar,
    };
    let alpha = match opts.force_fallback {
        Some(a) => tape.constant(Tensor::full(layout.nodes, 1, a)),
        None => {
            let rho = tape.constant(rho_node.clone());
            let x = tape.concat_cols(&[rho, gate_u]);
            let logit = linear(tape, p, "fus.fb", x);
            tape.sigmoid(logit)
        }
    };
    let s = linear(tape, p, "fus.e_struct", h_str);
    let s = tape.relu(s);
    let keep = tape.one_minus(alpha);
    let a = tape.mul_col(data, keep);
    let b = tape.mul_col(s, alpha);
    let pre = tape.add(a, b);
    let r = layer_norm_named(tape, p, "fus.ln", pre);
    FusedRepresentation { r, weights, alpha, u_bar }
}

/// Per-modality min-max normalization of squared errors over the cells with
/// `Δ = 1`, clamped to `[0, 1]`; 0 elsewhere and for a degenerate range.
pub fn norm_err(sq_errors: &[f64], recon: &Tensor, layout: Layout) -> Vec<f64> {
    let mut out = vec![0.0; layout.cells()];
    for m in 0..layout.modalities {
        let cells: Vec<usize> = layout.block(m).into_iter().filter(|&c| recon.data()[c] > 0.5).collect();
        let lo = cells.iter().map(|&c| sq_errors[c]).fold(f64::INFINITY, f64::min);
        let hi = cells.iter().map(|&c| sq_errors[c]).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for &c in &cells {
            out[c] = if range > 0.0 { ((sq_errors[c] - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct RoutingLoss {
    pub total: Var,
    pub calibration: Var,
    pub balance: Var,
}

/// `L_route = L_unc + λ_bal·L_bal` with
/// `L_unc = Σ Δ·(u − NormErr)² / (Σ Δ + ε)` and
/// `L_bal = Σ_q (w̄_q − 1/2)²`, where `w̄` averages the routing weights over
/// the cells in `balance_cells` (a `[cells × 1]` 0/1 column).
pub fn routing_loss(
    tape: &mut Tape,
    u: Var,
    norm_err: &Tensor,
    recon: &Tensor,
    weights: Var,
    balance_cells: &Tensor,
    lambda_bal: f64,
) -> RoutingLoss {
    let target = tape.constant(norm_err.clone());
    let diff = tape.sub(u, target);
    let sq = tape.mul(diff, diff);
    let calibration = crate::generation::reconstruction_from_errors(tape, sq, recon);
    let count = balance_cells.sum();
    let balance = if count > 0.0 {
        let rows = vec![(0..balance_cells.rows()).filter(|&c| balance_cells.data()[c] > 0.5).map(|c| (c, 1.0 / count)).collect()];
        let mean_w = tape.weighted_gather(weights, rows);
        let off = tape.add_scalar(mean_w, -0.5);
        let off2 = tape.mul(off, off);
        tape.sum(off2)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let scaled = tape.scale(balance, lambda_bal);
    let total = tape.add(calibration, scaled);
    RoutingLoss { total, calibration, balance }
}

/// Inputs of one Monte Carlo bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckInput {
    /// Error variance `v^(m)` of each modality representation.
    pub variances: Vec<f64>,
    pub v_str: f64,
    pub uncertainty: Vec<f64>,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    /// Latent width `D`; each coordinate gets variance `v / D`.
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub empirical_mse: f64,
    pub analytic_bound: f64,
    pub holds: bool,
    pub weights: Vec<f64>,
}

/// Softmax of `−u` with the fusion ε guard.
pub fn reliability_weights(u: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = u.iter().map(|x| (-x).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / (s + FUSION_EPS)).collect()
}

/// Simulates `f^(m) = z* + ε^(m)` and `E_struct = z* + ε_str` with
/// independent zero-mean Gaussian errors, fuses them with the reliability
/// weights and compares the empirical `E‖r − z*‖²` against
/// `2(1 − α)² Σ a² v + 2α² v_str`. The bound holds when the empirical value
/// is at most `bound·(1 + 3/√trials)`.
pub fn monte_carlo_bound_check(input: &BoundCheckInput) -> Result<BoundReport> {
    let m = input.variances.len();
    if m == 0 || input.uncertainty.len() != m {
        return Err(invalid("need one uncertainty per modality and at least one modality"));
    }
    if input.variances.iter().chain([&input.v_str]).any(|&v| !(v > 0.0)) {
        return Err(invalid("variances must be positive"));
    }
    if !(0.0..=1.0).contains(&input.alpha) {
        return Err(invalid(format!("fallback coefficient must lie in [0, 1], got {}", input.alpha)));
    }
    if input.trials < 1000 || input.dim == 0 {
        return Err(invalid("need at least 1000 trials and a positive dimension"));
    }
    let a = reliability_weights(&input.uncertainty);
    let alpha = input.alpha;
    let bound = 2.0 * (1.0 - alpha).powi(2) * a.iter().zip(&input.variances).map(|(w, v)| w * w * v).sum::<f64>()
        + 2.0 * alpha * alpha * input.v_str;

    let mut rng = stream(&[domain::THEORY, input.seed]);
    let d = input.dim as f64;
    let std: Vec<f64> = input.variances.iter().map(|v| (v / d).sqrt()).collect();
    let std_str = (input.v_str / d).sqrt();
    let mut total = 0.0;
    for _ in 0..input.trials {
        let mut err2 = 0.0;
        for _ in 0..input.dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut data = 0.0;
            for (w, s) in a.iter().zip(&std) {
                let e: f64 = StandardNormal.sample(&mut rng);
                data += w * (z + s * e);
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            let r = (1.0 - alpha) * data + alpha * (z + std_str * e);
            err2 += (r - z).powi(2);
        }
        total += err2;
    }
    let empirical = total / input.trials as f64;
    let holds = empirical <= bound * (1.0 + 3.0 / (input.trials as f64).sqrt());
    Ok(BoundReport { empirical_mse: empirical, analytic_bound: bound, holds, weights: a })
}

/// Summary of [`theory_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub configurations: usize,
    pub holds: usize,
    pub holds_fraction: f64,
    pub failures: Vec<(BoundCheckInput, BoundReport)>,
}

/// Runs [`monte_carlo_bound_check`] on `configs` random configurations:
/// `M ∈ {2, 3, 4}`, `v, v_str ~ U(0.1, 5)`, `u ~ U(0, 5)`, `α ~ U(0, 1)`.
pub fn theory_sweep(configs: usize, trials: usize, seed: u64) -> Result<SweepReport> {
    let mut rng = stream(&[domain::THEORY, seed, u64::MAX]);
    let mut holds = 0;
    let mut failures = Vec::new();
    for c in 0..configs {
        let m = rng.random_range(2..=4);
        let input = BoundCheckInput {
            variances: (0..m).map(|_| rng.random_range(0.1..5.0)).collect(),
            v_str: rng.random_range(0.1..5.0),
            uncertainty: (0..m).map(|_| rng.random_range(0.0..5.0)).collect(),
            alpha: rng.random_range(0.0..1.0),
            trials,
            seed: crate::rng::mix(&[seed, c as u64]),
            dim: 8,
        };
        let report = monte_carlo_bound_check(&input)?;
        if report.holds {
            holds += 1;
        } else {
            failures.push((input, report));
        }
    }
    let holds_fraction = if configs == 0 { 1.0 } else { holds as f64 / configs as f64 };
    Ok(SweepReport { configurations: configs, holds, holds_fraction, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, d, hidden_width(d), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        s
    }

    #[test]
    fn uncertainty_zero_at_visible_cells() {
        let s = store(4);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 2.0]]));
        let u = estimate_uncertainty(&mut tape, &p, x, x, x, &Tensor::col(&[1.0, 0.0, 0.0]));
        let uv = tape.value(u).data().to_vec();
        assert_eq!(uv[0], 0.0);
        assert!(uv[1] > 0.0 && uv[1] < 1.0 && uv[2] > 0.0 && uv[2] < 1.0);
    }

    #[test]
    fn routing_examples() {
        let s = store(4);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let u = tape.constant(Tensor::col(&[0.0, 0.3]));
        let w = route(&mut tape, &p, &Tensor::col(&[1.0, 0.0]), u, &Tensor::col(&[0.0, 0.5]), 0.25, 1.0).unwrap();
        for i in 0..2 {
            let row = tape.value(w).row_slice(i);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12 && row[0] > 0.0 && row[1] > 0.0);
        }
        assert!(route(&mut tape, &p, &Tensor::col(&[1.0]), u, &Tensor::col(&[0.0]), 0.0, 0.0).is_err());

        let logits = tape.constant(Tensor::row(&[2.0, 0.0]));
        let sharp = tape.softmax_rows(logits, 0.1);
        assert!(tape.value(sharp).data()[0] > 1.0 - 1e-8);
        let even = tape.constant(Tensor::row(&[0.7, 0.7]));
        let even = tape.softmax_rows(even, 1.0);
        assert_eq!(tape.value(even).data(), &[0.5, 0.5]);
    }

    #[test]
    fn expert_mixture_examples() {
        let mut tape = Tape::new();
        let e_obs = tape.constant(Tensor::from_rows(&[vec![2.0], vec![2.0]]));
        let e_rec = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]));
        let w = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]));
        let f = mix_experts(&mut tape, e_obs, e_rec, w, &Tensor::col(&[1.0, 0.0]));
        assert_eq!(tape.value(f).data(), &[1.0, 5.0]);
        let w2 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.2, 0.8]]));
        let f2 = mix_experts(&mut tape, e_obs, e_rec, w2, &Tensor::col(&[1.0, 0.0]));
        assert_eq!(tape.value(f2).data(), &[2.0, 5.0]);
    }

    #[test]
    fn fusion_weight_examples() {
        let layout = Layout::new(1, 2);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::col(&[0.0, 3f64.ln()]));
        let a = fusion_weights(&mut tape, u, layout, 0.0);
        let av = tape.value(a).data().to_vec();
        assert!((av[0] - 0.75).abs() < 1e-12 && (av[1] - 0.25).abs() < 1e-12);
        let u = tape.constant(Tensor::col(&[0.4, 0.4]));
        let a = fusion_weights(&mut tape, u, layout, 0.0);
        assert!(tape.value(a).data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
        let u = tape.constant(Tensor::col(&[5.4, 5.4 + 3f64.ln()]));
        let a = fusion_weights(&mut tape, u, layout, 0.0);
        assert!((tape.value(a).data()[0] - 0.75).abs() < 1e-10);
    }

    #[test]
    fn saturated_fallback_ignores_modalities() {
        let s = store(4);
        let layout = Layout::new(1, 2);
        let opts = FusionOptions { force_fallback: Some(1.0), ..Default::default() };
        let run = |f: Tensor| {
            let mut tape = Tape::new();
            let p = s.bind(&mut tape);
            let f = tape.constant(f);
            let u = tape.constant(Tensor::col(&[0.0, 0.2]));
            let h = tape.constant(Tensor::row(&[0.3, -1.0, 2.0, 0.1]));
            let out = fuse(&mut tape, &p, f, u, &Tensor::col(&[0.0]), h, layout, &opts);
            tape.value(out.r).clone()
        };
        let a = run(Tensor::from_rows(&[vec![1.0; 4], vec![2.0; 4]]));
        let b = run(Tensor::from_rows(&[vec![-7.0; 4], vec![9.0; 4]]));
        assert_eq!(a, b);
    }

    #[test]
    fn routing_loss_examples() {
        let layout = Layout::new(3, 1);
        let sq = [1.0, 3.0, 2.0];
        let recon = Tensor::col(&[1.0, 1.0, 1.0]);
        let ne = norm_err(&sq, &recon, layout);
        assert_eq!(ne, vec![0.0, 1.0, 0.5]);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::col(&ne));
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]));
        let l = routing_loss(&mut tape, u, &Tensor::col(&ne), &recon, w, &Tensor::col(&[1.0, 1.0, 1.0]), 0.5);
        assert_eq!(tape.value(l.calibration).item(), 0.0);
        assert!((tape.value(l.balance).item() - 0.5).abs() < 1e-15);
        let w = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75], vec![0.75, 0.25]]));
        let l = routing_loss(&mut tape, u, &Tensor::col(&ne), &recon, w, &Tensor::col(&[1.0, 1.0, 1.0]), 0.5);
        assert!(tape.value(l.balance).item().abs() < 1e-15);
    }

    fn check(variances: Vec<f64>, v_str: f64, uncertainty: Vec<f64>, alpha: f64) -> BoundReport {
        monte_carlo_bound_check(&BoundCheckInput { variances, v_str, uncertainty, alpha, trials: 10_000, seed: 5, dim: 8 }).unwrap()
    }

    #[test]
    fn bound_check_examples() {
        let r = check(vec![1.0; 4], 1.0, vec![0.3; 4], 0.0);
        assert!((r.analytic_bound - 0.5).abs() < 1e-9);
        assert!((r.empirical_mse - 0.25).abs() < 0.02, "{r:?}");
        assert!(r.holds);
        let r = check(vec![3.0, 2.0], 0.7, vec![0.0, 0.0], 1.0);
        assert!((r.empirical_mse - 0.7).abs() < 0.05 && r.holds && (r.analytic_bound - 1.4).abs() < 1e-12);
        let r = check(vec![1.0, 1000.0], 1.0, vec![0.0, 20.0], 0.0);
        assert!(r.weights[1] < 1e-8);
        assert!(r.empirical_mse < 1.1 && r.holds);
        assert!(monte_carlo_bound_check(&BoundCheckInput {
            variances: vec![0.0],
            v_str: 1.0,
            uncertainty: vec![0.0],
            alpha: 0.5,
            trials: 1000,
            seed: 0,
            dim: 2
        })
        .is_err());
    }
}
