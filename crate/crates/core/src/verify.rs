//! Self-checks with JSON reports: finite-difference gradients of the full
//! local objective, the Monte Carlo fusion bound and the metrics oracle.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{theory_sweep, SweepReport};
use crate::generation::build_banks;
use crate::graphdata::{adjacency, generate_sbm_multimodal, sample_artificial_mask, Mask, MultimodalGraph, SbmConfig};
use crate::model::{forward, init_model, Frozen, LocalInputs, ModelConfig, Negatives, TaskTarget, Variant};
use crate::numerics::{grad_check, GradCheckOptions, ParamStore, Tape};
use crate::rng::{domain, mix, stream};
use crate::tasks::metrics::{metrics_oracle, OracleReport};
use crate::tasks::{TaskKind, TaskSpec};

/// Largest admissible relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Smallest admissible fraction of bound checks that hold.
pub const THEORY_MIN_FRACTION: f64 = 0.99;
/// Absolute agreement demanded from the metrics.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

/// One gradient check of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub task: TaskKind,
    pub variant: Variant,
    pub seed: u64,
    /// Parameter prefix restricting the check, empty for all parameters.
    pub scope: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Cases above the tolerance.
    pub failures: Vec<GradCase>,
}

/// Sub-networks checked on their own: encoders, generator, fusion, heads.
pub const SCOPES: [&str; 4] = ["enc.", "gen.", "fus.", "task."];

/// A 6-node, two-modality graph with one naturally missing cell per
/// modality and pairs for retrieval.
pub fn toy_graph(seed: u64) -> Result<MultimodalGraph> {
    let cfg = SbmConfig { blocks: 2, nodes_per_block: 3, p_in: 0.9, p_out: 0.3, d_img: 5, d_txt: 4, latent_dim: 3, noise: 0.3 };
    let mut g = generate_sbm_multimodal(&cfg, seed)?;
    if g.edges.is_empty() {
        g.edges = vec![(0, 1), (1, 2), (3, 4), (4, 5), (2, 3)];
    }
    let mut mask = Mask::filled(6, 2, true);
    mask.set((seed % 6) as usize, 0, false);
    mask.set(((seed + 3) % 6) as usize, 1, false);
    g.set_natural_mask(mask);
    Ok(g)
}

fn toy_model() -> ModelConfig {
    ModelConfig { d: 8, heads: 2, neighbor_cap: 4, warmup_rounds: 4, ..ModelConfig::default() }
}

/// Adds `U(−scale, scale)` noise to every entry. Fresh initialisations put
/// zero biases and null tokens exactly on ReLU kinks, where central
/// differences and the one-sided derivative disagree.
pub fn jitter(params: &mut ParamStore, scale: f64, seed: u64) {
    use rand::Rng;
    let mut rng = stream(&[domain::INIT, seed, 0x5EED]);
    for (_, value, _) in params.iter_mut() {
        for v in value.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Checks one task and variant on the toy graph of `seed`, sampling
/// `sample` entries per scope. The stop-gradient values of the base pass
/// are replayed at every perturbed point.
pub fn grad_cases(task: TaskKind, variant: Variant, seed: u64, sample: usize) -> Result<Vec<GradCase>> {
    let graph = toy_graph(seed)?;
    let cfg = toy_model();
    let spec = TaskSpec { lambda_rec: 0.5, lambda_align: 0.1, lambda_route: 0.2, ..TaskSpec::defaults(task) };
    let dims: Vec<usize> = graph.modalities.iter().map(|m| m.dim()).collect();
    let classes = if task == TaskKind::Lp { 0 } else { graph.num_classes().max(2) };
    let mut params: ParamStore = init_model(variant, &dims, classes, task, &cfg, seed)?;
    jitter(&mut params, 0.05, seed);
    let features: Vec<_> = graph.modalities.iter().map(|m| m.features.clone()).collect();
    let adj = adjacency(graph.num_nodes, &graph.edges);
    let masks = match variant {
        Variant::Full => sample_artificial_mask(&graph.natural_mask, 0.4, mix(&[seed, 11]))?,
        Variant::ZeroFill => crate::graphdata::MaskSet::unmasked(graph.natural_mask.clone()),
    };
    let banks = match variant {
        Variant::Full => build_banks(crate::encoding::Layout::new(6, 2), &adj, &masks.effective, 4, mix(&[seed, 12])),
        Variant::ZeroFill => Vec::new(),
    };
    let inputs = LocalInputs { features: &features, adj: &adj, masks: &masks, banks: &banks, gamma: 0.6 };
    let labels: Vec<usize> = graph.labels.clone().unwrap_or_else(|| vec![0; 6]);
    let nodes = [0, 1, 2, 3, 4];
    let edges_known = graph.edges.iter().copied().collect();
    let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
    let target = match task {
        TaskKind::Nc => TaskTarget::Nc { nodes: &nodes, labels: &labels },
        TaskKind::Lp => TaskTarget::Lp { pos: &graph.edges, neg: Negatives::Hard { edges: &edges_known, seed } },
        TaskKind::Mr => TaskTarget::Mr { pairs: &pairs, labels: Some(&labels) },
    };
    let frozen = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        forward(&mut tape, &bound, variant, &cfg, &spec, &inputs, Some(&target), None)?.frozen
    };
    let objective = |tape: &mut Tape, p: &crate::numerics::Bound| {
        forward(tape, p, variant, &cfg, &spec, &inputs, Some(&target), Some(&frozen as &Frozen)).map(|o| o.loss)
    };
    let mut scopes: Vec<&str> = vec![""];
    scopes.extend(SCOPES.iter().filter(|s| params.names().any(|n| n.starts_with(**s))));
    let mut cases = Vec::new();
    for (i, scope) in scopes.into_iter().enumerate() {
        let opts = GradCheckOptions {
            h: 1e-5,
            sample: Some(sample),
            seed: mix(&[seed, i as u64]),
            prefixes: if scope.is_empty() { Vec::new() } else { vec![scope.to_string()] },
        };
        let r = grad_check(objective, &params, &opts)?;
        cases.push(GradCase {
            task,
            variant,
            seed,
            scope: scope.to_string(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            worst: r.worst,
        });
    }
    Ok(cases)
}

/// The full suite: every task and variant over `seeds` seeds.
pub fn gradcheck_suite(seeds: u64, sample: usize) -> Result<GradSuiteReport> {
    let mut all = Vec::new();
    for seed in 0..seeds {
        for task in [TaskKind::Nc, TaskKind::Lp, TaskKind::Mr] {
            all.extend(grad_cases(task, Variant::Full, seed, sample)?);
        }
        all.extend(grad_cases(TaskKind::Nc, Variant::ZeroFill, seed, sample)?);
    }
    let max_rel_error = all.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failures: Vec<GradCase> = all.iter().filter(|c| !(c.max_rel_error <= GRAD_TOLERANCE)).cloned().collect();
    Ok(GradSuiteReport { cases: all.len(), max_rel_error, tolerance: GRAD_TOLERANCE, passed: failures.is_empty(), failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub trials: usize,
    pub min_fraction: f64,
    pub passed: bool,
    #[serde(flatten)]
    pub sweep: SweepReport,
}

pub fn theory_check(configs: usize, trials: usize, seed: u64) -> Result<TheoryReport> {
    let sweep = theory_sweep(configs, trials, seed)?;
    Ok(TheoryReport { trials, min_fraction: THEORY_MIN_FRACTION, passed: sweep.holds_fraction >= THEORY_MIN_FRACTION, sweep })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub tolerance: f64,
    pub passed: bool,
    #[serde(flatten)]
    pub report: OracleReport,
}

pub fn oracle_check(instances: usize, seed: u64) -> OracleCheck {
    let report = metrics_oracle(instances, seed, ORACLE_TOLERANCE);
    OracleCheck { tolerance: ORACLE_TOLERANCE, passed: report.agreed == report.instances, report }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_of_each_task_passes() {
        let r = gradcheck_suite(1, 60).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.cases, 3 * 5 + 4);
    }

    #[test]
    fn small_theory_and_oracle_runs_pass() {
        assert!(theory_check(20, 1000, 1).unwrap().passed);
        assert!(oracle_check(10, 2).passed);
    }
}
