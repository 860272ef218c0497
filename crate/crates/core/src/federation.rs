//! Simulated federation: client state, local rounds, reliability
//! statistics, reliability-aware aggregation and the round loop.
//!
//! Every random draw comes from a stream keyed by the global seed and the
//! draw's role (client, round, epoch), so results do not depend on the
//! order in which clients run or on the number of worker threads.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FederationConfig, RunMode};
use crate::encoding::Layout;
use crate::error::{invalid, Error, Result};
use crate::generation::{build_banks, warmup_gamma, ContextBank};
use crate::graphdata::{
    adjacency, apply_natural_missingness, epoch_mask_seed, generate_sbm_multimodal, load_graph, missing_fraction, partition_dirichlet,
    sample_artificial_mask_keyed, ClientPartition, Mask, MaskSet, MissingnessConfig, MultimodalGraph,
};
use crate::model::{forward, init_model, Forward, LocalInputs, ModelConfig, Negatives, TaskTarget, Variant};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::rng::{domain, mix, stream};
use crate::tasks::heads::{link_scores_value, uniform_negatives};
use crate::tasks::metrics::{accuracy, average_precision, macro_f1, rank_of, ranking_metrics, roc_auc};
use crate::tasks::{LossBreakdown, MetricsRow, TaskKind, TaskSpec};

/// Cut-off of the retrieval recall.
pub const RECALL_K: usize = 5;

/// Per-client statistics uploaded with the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityStats {
    /// Mean uncertainty over cells the model could not see.
    pub u_bar: f64,
    /// Mean NormErr over artificially masked cells.
    pub e_bar: f64,
    /// Fraction of naturally missing cells.
    pub rho: f64,
    /// Number of client nodes.
    pub size: usize,
}

/// Reliability scales and the weight guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub eta_u: f64,
    pub eta_e: f64,
    pub eta_rho: f64,
    pub eps: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { eta_u: 1.0, eta_e: 1.0, eta_rho: 1.0, eps: 1e-12 }
    }
}

impl From<&FederationConfig> for ServerConfig {
    fn from(f: &FederationConfig) -> Self {
        Self { eta_u: f.eta_u, eta_e: f.eta_e, eta_rho: f.eta_rho, eps: f.eps }
    }
}

/// `s = exp(−η_u·ū − η_e·ē − η_ρ·ρ)`.
pub fn reliability_score(stats: &ReliabilityStats, cfg: &ServerConfig) -> f64 {
    (-(cfg.eta_u * stats.u_bar + cfg.eta_e * stats.e_bar + cfg.eta_rho * stats.rho)).exp()
}

/// `ω_k = |V_k|·s_k / (Σ_j |V_j|·s_j + ε)`.
pub fn aggregation_weights(sizes: &[usize], scores: &[f64], eps: f64) -> Vec<f64> {
    let mass: Vec<f64> = sizes.iter().zip(scores).map(|(&n, &s)| n as f64 * s).collect();
    let total: f64 = mass.iter().sum::<f64>() + eps;
    mass.into_iter().map(|m| m / total).collect()
}

/// Reliability-weighted average of client parameters, reduced in the given
/// (ascending client) order. Returns the global parameters and `ω`.
///
/// The parameters are combined with `ω` rescaled to sum to one, so the ε
/// guard never shrinks them; the reported `ω` keep the guard.
pub fn aggregate(params: &[ParamStore], sizes: &[usize], scores: &[f64], eps: f64) -> Result<(ParamStore, Vec<f64>)> {
    let first = params.first().ok_or_else(|| invalid("aggregation needs at least one client"))?;
    if sizes.len() != params.len() || scores.len() != params.len() {
        return Err(invalid("one size and one score per client required"));
    }
    for p in &params[1..] {
        first.check_compatible(p)?;
    }
    let omega = aggregation_weights(sizes, scores, eps);
    let total: f64 = omega.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("aggregation weights sum to zero"));
    }
    let mut global = first.clone();
    for (name, value, _) in global.iter_mut() {
        value.fill(0.0);
        for (p, w) in params.iter().zip(&omega) {
            value.scaled_add_assign(w / total, p.get(name).expect("checked compatible"));
        }
    }
    global.zero_grads();
    Ok((global, omega))
}

/// Train / validation / test items of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Splits {
    Nodes { train: Vec<usize>, val: Vec<usize>, test: Vec<usize> },
    Edges { train: Vec<(usize, usize)>, val: Vec<(usize, usize)>, test: Vec<(usize, usize)> },
    Pairs { train: Vec<(usize, usize)>, val: Vec<(usize, usize)>, test: Vec<(usize, usize)> },
}

fn split_three<T: Clone>(mut items: Vec<T>, train: f64, val: f64, seed: &[u64]) -> (Vec<T>, Vec<T>, Vec<T>) {
    items.shuffle(&mut stream(seed));
    let n = items.len();
    let n_train = ((train * n as f64).round() as usize).clamp(n.min(1), n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    (items, val, test)
}

/// One client's private data.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Global ids of the client's nodes; local node `i` is `nodes[i]`.
    pub nodes: Vec<usize>,
    /// Induced subgraph with the natural mask installed.
    pub graph: MultimodalGraph,
    /// Message-passing graph (training edges only for link prediction).
    pub adj: Vec<Vec<usize>>,
    /// Every induced edge as `(min, max)`.
    pub edge_set: HashSet<(usize, usize)>,
    pub splits: Splits,
}

impl ClientState {
    pub fn new(id: usize, global: &MultimodalGraph, nodes: &[usize], task: TaskKind, seed: u64) -> Result<Self> {
        let graph = global.induced(nodes);
        let key = [domain::SPLIT, seed, id as u64];
        let splits = match task {
            TaskKind::Nc => {
                if graph.labels.is_none() {
                    return Err(invalid("node classification needs labels"));
                }
                let (train, val, test) = split_three((0..graph.num_nodes).collect(), 0.6, 0.2, &key);
                Splits::Nodes { train, val, test }
            }
            TaskKind::Lp => {
                let (train, val, test) = split_three(graph.edges.clone(), 0.8, 0.1, &key);
                Splits::Edges { train, val, test }
            }
            TaskKind::Mr => {
                if graph.num_modalities() < 2 {
                    return Err(invalid("retrieval needs two modalities"));
                }
                let pairs = graph.pairs.clone().ok_or_else(|| invalid("retrieval needs cross-modal pairs"))?;
                let (train, val, test) = split_three(pairs, 0.8, 0.1, &key);
                Splits::Pairs { train, val, test }
            }
        };
        let adj = match &splits {
            Splits::Edges { train, .. } => adjacency(graph.num_nodes, train),
            _ => graph.adjacency(),
        };
        let edge_set = graph.edges.iter().copied().collect();
        Ok(Self { id, nodes: nodes.to_vec(), graph, adj, edge_set, splits })
    }

    pub fn features(&self) -> Vec<Tensor> {
        self.graph.modalities.iter().map(|m| m.features.clone()).collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.graph.num_nodes, self.graph.num_modalities())
    }

    fn keys(&self) -> Vec<u64> {
        self.nodes.iter().map(|&i| i as u64).collect()
    }

    /// Number of test items.
    pub fn test_size(&self) -> usize {
        match &self.splits {
            Splits::Nodes { test, .. } => test.len(),
            Splits::Edges { test, .. } | Splits::Pairs { test, .. } => test.len(),
        }
    }
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub variant: Variant,
    pub model: ModelConfig,
    pub spec: TaskSpec,
    pub p_mask: f64,
    pub seed: u64,
}

impl RunContext {
    pub fn new(cfg: &ExperimentConfig, variant: Variant) -> Self {
        Self { variant, model: cfg.model.clone(), spec: cfg.model.task_spec(cfg.task), p_mask: cfg.missingness.p_mask, seed: cfg.seed }
    }

    pub fn gamma(&self, round: usize) -> f64 {
        warmup_gamma(round, self.model.warmup_rounds, self.model.gamma_clamp)
    }

    fn banks(&self, client: &ClientState, visible: &Mask, seed: u64) -> Vec<ContextBank> {
        match self.variant {
            Variant::Full => build_banks(client.layout(), &client.adj, visible, self.model.neighbor_cap, seed),
            Variant::ZeroFill => Vec::new(),
        }
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ParamStore,
    pub stats: ReliabilityStats,
    /// Loss breakdown of the final local epoch.
    pub breakdown: LossBreakdown,
}

fn collect_stats(tape: &Tape, out: &Forward, masks: &MaskSet) -> ReliabilityStats {
    let layout = Layout::new(masks.nodes(), masks.modalities());
    let (mut u_sum, mut u_count, mut e_sum, mut e_count) = (0.0, 0usize, 0.0, 0usize);
    let u = out.uncertainty.map(|u| tape.value(u).clone());
    for m in 0..layout.modalities {
        for i in 0..layout.nodes {
            let c = layout.idx(i, m);
            if !masks.effective.get(i, m) {
                u_sum += u.as_ref().map_or(0.0, |u| u.data()[c]);
                u_count += 1;
            }
            if masks.recon.get(i, m) {
                e_sum += out.norm_err.get(c).copied().unwrap_or(0.0);
                e_count += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    ReliabilityStats {
        u_bar: mean(u_sum, u_count),
        e_bar: mean(e_sum, e_count),
        rho: missing_fraction(&masks.natural),
        size: masks.nodes().max(1),
    }
}

fn train_target<'a>(client: &'a ClientState, hard_seed: u64) -> TaskTarget<'a> {
    match &client.splits {
        Splits::Nodes { train, .. } => {
            TaskTarget::Nc { nodes: train, labels: client.graph.labels.as_deref().expect("checked at construction") }
        }
        Splits::Edges { train, .. } => TaskTarget::Lp { pos: train, neg: Negatives::Hard { edges: &client.edge_set, seed: hard_seed } },
        Splits::Pairs { train, .. } => TaskTarget::Mr { pairs: train, labels: client.graph.labels.as_deref() },
    }
}

/// Runs the local epochs of `client` from the global parameters of round `round`.
pub fn client_local_round(client: &ClientState, global: &ParamStore, ctx: &RunContext, round: usize) -> Result<LocalUpdate> {
    let abort = |e: Error| Error::ClientAborted { client: client.id, msg: e.to_string() };
    let mut params = global.clone();
    params.zero_grads();
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig { lr: ctx.model.lr, ..AdamConfig::default() };
    let features = client.features();
    let keys = client.keys();
    let gamma = ctx.gamma(round);
    let mut last = None;
    for epoch in 0..ctx.model.epochs {
        let seed = epoch_mask_seed(ctx.seed, client.id, round, epoch);
        let masks = match ctx.variant {
            Variant::Full => sample_artificial_mask_keyed(&client.graph.natural_mask, ctx.p_mask, seed, &keys)?,
            Variant::ZeroFill => MaskSet::unmasked(client.graph.natural_mask.clone()),
        };
        let banks = ctx.banks(client, &masks.effective, mix(&[seed, 1]));
        let inputs = LocalInputs { features: &features, adj: &client.adj, masks: &masks, banks: &banks, gamma };
        let target = train_target(client, mix(&[seed, 2]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward(&mut tape, &bound, ctx.variant, &ctx.model, &ctx.spec, &inputs, Some(&target), None).map_err(abort)?;
        let stats = collect_stats(&tape, &out, &masks);
        let grads = tape.backward(out.loss);
        params.accumulate_grads(&bound, &grads);
        params.clip_grad_norm(ctx.model.clip);
        adam_step(&mut params, &mut adam, &adam_cfg).map_err(abort)?;
        last = Some((stats, out.breakdown));
    }
    let (stats, breakdown) = last.expect("at least one epoch");
    Ok(LocalUpdate { params, stats, breakdown })
}

/// Inference pass of the global model on a client with `r̃ = r`.
fn infer(params: &ParamStore, ctx: &RunContext, client: &ClientState, round: usize) -> Result<(Tape, Forward)> {
    let features = client.features();
    let masks = MaskSet::unmasked(client.graph.natural_mask.clone());
    let banks = ctx.banks(client, &masks.effective, mix(&[domain::EVAL, ctx.seed, client.id as u64]));
    let inputs = LocalInputs { features: &features, adj: &client.adj, masks: &masks, banks: &banks, gamma: ctx.gamma(round) };
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let out = forward(&mut tape, &bound, ctx.variant, &ctx.model, &ctx.spec, &inputs, None, None)?;
    Ok((tape, out))
}

/// Test-split outcome of one client.
#[derive(Debug, Clone, PartialEq)]
enum ClientEval {
    Labels { pred: Vec<usize>, truth: Vec<usize> },
    Scores { m1: f64, m2: f64, weight: usize },
    Undefined,
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best }).0
}

fn evaluate_client(params: &ParamStore, ctx: &RunContext, client: &ClientState, round: usize) -> Result<ClientEval> {
    if client.test_size() == 0 {
        return Ok(ClientEval::Undefined);
    }
    let (tape, out) = infer(params, ctx, client, round)?;
    match &client.splits {
        Splits::Nodes { test, .. } => {
            let logits = tape.value(out.logits.ok_or_else(|| invalid("model has no classification head"))?);
            let labels = client.graph.labels.as_ref().expect("checked at construction");
            Ok(ClientEval::Labels {
                pred: test.iter().map(|&i| argmax(logits.row_slice(i))).collect(),
                truth: test.iter().map(|&i| labels[i]).collect(),
            })
        }
        Splits::Edges { test, .. } => {
            let r = tape.value(out.refined);
            let mut rng = stream(&[domain::EVAL, ctx.seed, client.id as u64]);
            let negs = uniform_negatives(client.graph.num_nodes, &client.edge_set, test.len(), &mut rng);
            let pos = link_scores_value(r, test);
            let neg = link_scores_value(r, &negs);
            match (roc_auc(&pos, &neg), average_precision(&pos, &neg)) {
                (Ok(auc), Ok(ap)) => Ok(ClientEval::Scores { m1: auc, m2: ap, weight: test.len() }),
                _ => Ok(ClientEval::Undefined),
            }
        }
        Splits::Pairs { test, .. } => {
            let (q, g) = out.retrieval.ok_or_else(|| invalid("model has no retrieval head"))?;
            let (q, g) = (tape.value(q), tape.value(g));
            let ranks: Vec<f64> = test
                .iter()
                .map(|&(a, b)| {
                    let scores: Vec<f64> =
                        (0..g.rows()).map(|j| q.row_slice(a).iter().zip(g.row_slice(j)).map(|(x, y)| x * y).sum()).collect();
                    rank_of(&scores, b)
                })
                .collect();
            let (recall, mrr) = ranking_metrics(&ranks, RECALL_K);
            Ok(ClientEval::Scores { m1: recall, m2: mrr, weight: test.len() })
        }
    }
}

/// Global-model metrics on the clients' test splits: pooled predictions
/// for classification, test-size weighted client means otherwise.
pub fn evaluate(params: &ParamStore, ctx: &RunContext, clients: &[ClientState], round: usize) -> Result<MetricsRow> {
    let evals = clients.iter().map(|c| evaluate_client(params, ctx, c, round)).collect::<Result<Vec<_>>>()?;
    let mut row = MetricsRow { task: ctx.spec.kind, metric_1: 0.0, metric_2: 0.0, support: 0, defined: false };
    if ctx.spec.kind == TaskKind::Nc {
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for e in evals {
            if let ClientEval::Labels { pred: p, truth: t } = e {
                pred.extend(p);
                truth.extend(t);
            }
        }
        if !truth.is_empty() {
            row = MetricsRow { metric_1: accuracy(&pred, &truth), metric_2: macro_f1(&pred, &truth), support: truth.len(), defined: true, ..row };
        }
    } else {
        let (mut s1, mut s2, mut w) = (0.0, 0.0, 0usize);
        for e in evals {
            if let ClientEval::Scores { m1, m2, weight } = e {
                s1 += m1 * weight as f64;
                s2 += m2 * weight as f64;
                w += weight;
            }
        }
        if w > 0 {
            row = MetricsRow { metric_1: s1 / w as f64, metric_2: s2 / w as f64, support: w, defined: true, ..row };
        }
    }
    Ok(row)
}

/// `(u, NormErr)` at the artificially masked cells of one masked pass of
/// the global model over `client`.
pub fn calibration_probe(params: &ParamStore, ctx: &RunContext, client: &ClientState, round: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if ctx.variant != Variant::Full {
        return Ok(Vec::new());
    }
    let masks = sample_artificial_mask_keyed(&client.graph.natural_mask, ctx.p_mask, seed, &client.keys())?;
    let features = client.features();
    let banks = ctx.banks(client, &masks.effective, mix(&[seed, 1]));
    let inputs = LocalInputs { features: &features, adj: &client.adj, masks: &masks, banks: &banks, gamma: ctx.gamma(round) };
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let out = forward(&mut tape, &bound, ctx.variant, &ctx.model, &ctx.spec, &inputs, None, None)?;
    let u = tape.value(out.uncertainty.expect("full variant")).clone();
    let layout = client.layout();
    let mut pairs = Vec::new();
    for m in 0..layout.modalities {
        for i in 0..layout.nodes {
            if masks.recon.get(i, m) {
                let c = layout.idx(i, m);
                pairs.push((u.data()[c], out.norm_err[c]));
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFailure {
    pub client: usize,
    pub message: String,
}

/// One communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Clients whose update entered the aggregate, ascending.
    pub clients: Vec<usize>,
    pub omega: Vec<f64>,
    pub losses: Vec<LossBreakdown>,
    pub stats: Vec<ReliabilityStats>,
    pub failures: Vec<ClientFailure>,
    /// Unweighted mean of the client loss breakdowns.
    pub mean_loss: LossBreakdown,
    pub metrics: MetricsRow,
    /// Sampled clients over all clients.
    pub client_frac: f64,
    /// Wall time of the round, 0 unless timing is enabled.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    pub mode: RunMode,
    pub task: TaskKind,
    pub rounds: Vec<RoundRecord>,
}

/// Data, partition and clients of a run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub graph: MultimodalGraph,
    pub partition: ClientPartition,
    pub clients: Vec<ClientState>,
    pub dims: Vec<usize>,
    pub classes: usize,
}

/// Builds the graph, draws the partition and the natural missingness, and
/// splits every client's data.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Federation> {
    cfg.validate()?;
    let mut graph = match &cfg.data.graph_file {
        Some(path) => load_graph(path)?,
        None => generate_sbm_multimodal(&cfg.data.sbm(), cfg.seed)?,
    };
    let partition = partition_dirichlet(&graph, cfg.federation.clients, cfg.federation.alpha, cfg.seed)?;
    let miss = MissingnessConfig {
        rate: cfg.missingness.rate,
        mode: cfg.missingness.mode,
        seed: cfg.seed,
        client_rates: cfg.missingness.client_rates.clone(),
    };
    let drawn = apply_natural_missingness(graph.num_nodes, graph.num_modalities(), Some(&partition), &miss)?;
    let mut mask = graph.natural_mask.clone();
    for i in 0..graph.num_nodes {
        for m in 0..graph.num_modalities() {
            mask.set(i, m, mask.get(i, m) && drawn.get(i, m));
        }
    }
    graph.set_natural_mask(mask);
    let clients = partition
        .clients()
        .iter()
        .enumerate()
        .map(|(k, nodes)| ClientState::new(k, &graph, nodes, cfg.task, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let dims = graph.modalities.iter().map(|m| m.dim()).collect();
    let classes = if cfg.task == TaskKind::Lp { 0 } else { graph.num_classes() };
    Ok(Federation { graph, partition, clients, dims, classes })
}

/// How client scores are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `s_k` from the reliability statistics.
    Reliability,
    /// `s_k = 1`: data-size weights.
    DataSize,
}

/// Outcome of a run: the history and the final global parameters.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: RoundHistory,
    pub params: ParamStore,
    pub context: RunContext,
}

fn select_clients(k: usize, fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..k).collect();
    }
    let count = ((fraction * k as f64).round() as usize).clamp(1, k);
    let mut picked = sample(&mut stream(&[domain::SERVER, seed, round as u64]), k, count).into_vec();
    picked.sort_unstable();
    picked
}

fn mean_breakdown(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let s = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
    LossBreakdown { task: s(|l| l.task), rec: s(|l| l.rec), align: s(|l| l.align), route: s(|l| l.route), total: s(|l| l.total) }
}

/// The round loop over prepared data with an explicit model variant and
/// client weighting.
pub fn run_with(cfg: &ExperimentConfig, fed: &Federation, variant: Variant, weighting: Weighting) -> Result<RunOutcome> {
    cfg.validate()?;
    let ctx = RunContext::new(cfg, variant);
    let server = ServerConfig::from(&cfg.federation);
    let mut global = init_model(variant, &fed.dims, fed.classes, cfg.task, &cfg.model, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.federation.workers)
        .build()
        .map_err(|e| invalid(format!("worker pool: {e}")))?;
    let k = fed.clients.len();
    let mut rounds = Vec::with_capacity(cfg.federation.rounds);
    for t in 0..cfg.federation.rounds {
        let start = Instant::now();
        let selected = select_clients(k, cfg.federation.fraction, cfg.seed, t);
        let results: Vec<Result<LocalUpdate>> =
            pool.install(|| selected.par_iter().map(|&c| client_local_round(&fed.clients[c], &global, &ctx, t)).collect());
        let (mut ids, mut updates, mut failures) = (Vec::new(), Vec::new(), Vec::new());
        for (&c, r) in selected.iter().zip(results) {
            match r {
                Ok(u) => {
                    ids.push(c);
                    updates.push(u);
                }
                Err(e) => failures.push(ClientFailure { client: c, message: e.to_string() }),
            }
        }
        if updates.is_empty() {
            return Err(Error::FederationAborted { round: t });
        }
        let sizes: Vec<usize> = updates.iter().map(|u| u.stats.size).collect();
        let scores: Vec<f64> = match weighting {
            Weighting::Reliability => updates.iter().map(|u| reliability_score(&u.stats, &server)).collect(),
            Weighting::DataSize => vec![1.0; updates.len()],
        };
        let losses: Vec<LossBreakdown> = updates.iter().map(|u| u.breakdown).collect();
        let stats: Vec<ReliabilityStats> = updates.iter().map(|u| u.stats).collect();
        let params: Vec<ParamStore> = updates.into_iter().map(|u| u.params).collect();
        let (next, omega) = aggregate(&params, &sizes, &scores, server.eps)?;
        global = next;
        let metrics = evaluate(&global, &ctx, &fed.clients, t)?;
        let wall_ms = if cfg.federation.timing { start.elapsed().as_millis() as u64 } else { 0 };
        rounds.push(RoundRecord {
            round: t,
            clients: ids,
            omega,
            mean_loss: mean_breakdown(&losses),
            losses,
            stats,
            failures,
            metrics,
            client_frac: selected.len() as f64 / k as f64,
            wall_ms,
        });
    }
    let history = RoundHistory { mode: cfg.federation.mode, task: cfg.task, rounds };
    Ok(RunOutcome { history, params: global, context: ctx })
}

/// Runs the configured mode end to end.
pub fn run_federation(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let fed = prepare(cfg)?;
    run_prepared(cfg, &fed)
}

/// Runs the configured mode on already prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunOutcome> {
    let weighting = match cfg.federation.mode {
        RunMode::Reliability => Weighting::Reliability,
        RunMode::Fedavg | RunMode::FedavgZero => Weighting::DataSize,
    };
    run_with(cfg, fed, cfg.federation.mode.variant(), weighting)
}

/// The zero-fill baseline with data-size aggregation on the same data
/// pipeline as `cfg`, whatever its mode.
pub fn fedavg_zero_baseline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.federation.mode = RunMode::FedavgZero;
    run_federation(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    fn tiny(task: TaskKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task = task;
        cfg.data.blocks = 2;
        cfg.data.nodes_per_block = 10;
        cfg.data.p_in = 0.4;
        cfg.data.p_out = 0.05;
        cfg.data.d_img = 6;
        cfg.data.d_txt = 5;
        cfg.data.latent_dim = 3;
        cfg.data.noise = 0.5;
        cfg.federation.clients = 2;
        cfg.federation.rounds = 2;
        cfg.model.d = 8;
        cfg.model.heads = 2;
        cfg.model.epochs = 1;
        cfg.model.warmup_rounds = 2;
        cfg
    }

    #[test]
    fn score_examples() {
        let cfg = ServerConfig::default();
        let zero = ReliabilityStats { u_bar: 0.0, e_bar: 0.0, rho: 0.0, size: 3 };
        assert_eq!(reliability_score(&zero, &cfg), 1.0);
        let half = ReliabilityStats { u_bar: 0.5, e_bar: 0.5, rho: 0.5, size: 3 };
        assert!((reliability_score(&half, &cfg) - 0.22313016014842982).abs() < 1e-15);
        let off = ServerConfig { eta_u: 0.0, eta_e: 0.0, eta_rho: 0.0, ..cfg };
        assert_eq!(reliability_score(&half, &off), 1.0);
    }

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_rows(&[vec![v, -2.0 * v]])).unwrap();
        s
    }

    #[test]
    fn aggregation_examples() {
        let (g, omega) = aggregate(&[store(0.7)], &[5], &[0.3], 1e-12).unwrap();
        assert_eq!(g, store(0.7));
        assert!((omega[0] - 1.0).abs() < 1e-12);
        let (g, _) = aggregate(&[store(1.5), store(-1.5)], &[4, 4], &[0.5, 0.5], 1e-12).unwrap();
        assert!(g.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-15));
        let mut bad = ParamStore::new();
        bad.insert("w", Tensor::zeros(2, 1)).unwrap();
        assert!(matches!(aggregate(&[store(1.0), bad], &[1, 1], &[1.0, 1.0], 1e-12), Err(Error::Shape(_))));
    }

    #[test]
    fn lr_zero_returns_global_and_stats_are_ranges() {
        let mut cfg = tiny(TaskKind::Nc);
        cfg.model.lr = 0.0;
        let fed = prepare(&cfg).unwrap();
        let ctx = RunContext::new(&cfg, Variant::Full);
        let global = init_model(Variant::Full, &fed.dims, fed.classes, cfg.task, &cfg.model, cfg.seed).unwrap();
        let up = client_local_round(&fed.clients[0], &global, &ctx, 1).unwrap();
        assert_eq!(up.params.max_abs_diff(&global), 0.0);
        let s = up.stats;
        assert!((0.0..=1.0).contains(&s.u_bar) && (0.0..=1.0).contains(&s.e_bar) && (0.0..=1.0).contains(&s.rho));
        let c = &fed.clients[0];
        let missing = (0..c.graph.num_nodes).flat_map(|i| (0..2).map(move |m| (i, m))).filter(|&(i, m)| !c.graph.natural_mask.get(i, m)).count();
        assert!((s.rho - missing as f64 / (2 * c.graph.num_nodes) as f64).abs() < 1e-12);
    }

    #[test]
    fn every_task_runs_and_is_deterministic() {
        for task in [TaskKind::Nc, TaskKind::Lp, TaskKind::Mr] {
            let cfg = tiny(task);
            let a = run_federation(&cfg).unwrap();
            assert_eq!(a.history.rounds.len(), 2);
            for r in &a.history.rounds {
                assert!((r.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(r.mean_loss.is_finite());
                if r.metrics.defined {
                    assert!((0.0..=1.0).contains(&r.metrics.metric_1) && (0.0..=1.0).contains(&r.metrics.metric_2));
                }
            }
            let b = run_federation(&cfg).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn zero_rounds_return_the_initial_model() {
        let mut cfg = tiny(TaskKind::Nc);
        cfg.federation.rounds = 0;
        let fed = prepare(&cfg).unwrap();
        let out = run_prepared(&cfg, &fed).unwrap();
        assert!(out.history.rounds.is_empty());
        assert_eq!(out.params, init_model(Variant::Full, &fed.dims, fed.classes, cfg.task, &cfg.model, cfg.seed).unwrap());
    }

    #[test]
    fn fraction_sampling_is_seeded() {
        let a = select_clients(10, 0.3, 4, 2);
        assert_eq!(a.len(), 3);
        assert_eq!(a, select_clients(10, 0.3, 4, 2));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
