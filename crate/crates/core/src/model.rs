//! The local model: one forward pass from raw features to the combined
//! objective, for the full pipeline and for the zero-fill baseline.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::encoding::{self, AnchorWeighting, Layout};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionOptions};
use crate::generation::{self, ContextBank};
use crate::graphdata::{node_missing_ratios, MaskSet};
use crate::numerics::nn::{init_layer_norm, layer_norm_named};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};
use crate::rng::{domain, stream};
use crate::tasks::heads;
use crate::tasks::{local_objective, LossBreakdown, LossTerms, TaskKind, TaskSpec};

/// Which network is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Anchors, generation, routing, fallback fusion.
    Full,
    /// Missing cells enter the backbone as zero vectors; the modality
    /// contexts are averaged.
    ZeroFill,
}

/// Architecture and local-optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared hidden width.
    pub d: usize,
    pub heads: usize,
    /// Neighbor tokens per context bank.
    pub neighbor_cap: usize,
    /// Rounds until the generator is fully enabled.
    pub warmup_rounds: usize,
    pub gamma_clamp: Option<(f64, f64)>,
    /// Router temperature.
    pub tau: f64,
    pub gnn_layers: usize,
    pub anchor_weighting: AnchorWeighting,
    pub uncertainty_cap: Option<f64>,
    pub uniform_floor: f64,
    pub lr: f64,
    pub epochs: usize,
    pub clip: f64,
    /// Loss weights; `None` takes the task default.
    pub lambda_rec: Option<f64>,
    pub lambda_align: Option<f64>,
    pub lambda_route: Option<f64>,
    pub lambda_bal: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            heads: 4,
            neighbor_cap: 16,
            warmup_rounds: 30,
            gamma_clamp: None,
            tau: 1.0,
            gnn_layers: 2,
            anchor_weighting: AnchorWeighting::Uniform,
            uncertainty_cap: None,
            uniform_floor: 0.0,
            lr: 0.005,
            epochs: 3,
            clip: 1.0,
            lambda_rec: None,
            lambda_align: None,
            lambda_route: None,
            lambda_bal: None,
        }
    }
}

fn config_error(key: &str, msg: String) -> Error {
    Error::Config { key: format!("model.{key}"), msg }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(config_error("d", format!("hidden width must be ≥ 2, got {}", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(config_error("heads", format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if self.gnn_layers == 0 {
            return Err(config_error("gnn_layers", "at least one layer is required".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(config_error("tau", format!("router temperature must be > 0, got {}", self.tau)));
        }
        if let Some((lo, hi)) = self.gamma_clamp {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(config_error("gamma_clamp", format!("bounds [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1")));
            }
        }
        if let Some(cap) = self.uncertainty_cap {
            if !(cap > 0.0) {
                return Err(config_error("uncertainty_cap", format!("cap must be > 0, got {cap}")));
            }
        }
        if !(0.0..=1.0).contains(&self.uniform_floor) {
            return Err(config_error("uniform_floor", format!("floor must lie in [0, 1], got {}", self.uniform_floor)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config_error("lr", format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(config_error("epochs", "at least one local epoch is required".into()));
        }
        if !(self.clip > 0.0) {
            return Err(config_error("clip", format!("clipping norm must be > 0, got {}", self.clip)));
        }
        let lambdas = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_align", self.lambda_align),
            ("lambda_route", self.lambda_route),
            ("lambda_bal", self.lambda_bal),
        ];
        for (key, v) in lambdas {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(config_error(key, format!("loss weight must be ≥ 0, got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn fusion_options(&self) -> FusionOptions {
        FusionOptions { uncertainty_cap: self.uncertainty_cap, uniform_floor: self.uniform_floor, force_fallback: None }
    }

    /// Task defaults with this config's loss-weight overrides applied.
    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        let base = TaskSpec::defaults(kind);
        TaskSpec {
            lambda_rec: self.lambda_rec.unwrap_or(base.lambda_rec),
            lambda_align: self.lambda_align.unwrap_or(base.lambda_align),
            lambda_route: self.lambda_route.unwrap_or(base.lambda_route),
            lambda_bal: self.lambda_bal.unwrap_or(base.lambda_bal),
            ..base
        }
    }
}

/// Fresh parameters for raw modality widths `dims`.
pub fn init_model(variant: Variant, dims: &[usize], classes: usize, kind: TaskKind, cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = stream(&[domain::INIT, seed]);
    let mut store = ParamStore::new();
    let d = cfg.d;
    match variant {
        Variant::Full => {
            encoding::init_params(&mut store, dims, d, cfg.gnn_layers, true, &mut rng)?;
            generation::init_params(&mut store, dims.len(), d, &mut rng)?;
            fusion::init_params(&mut store, d, fusion::hidden_width(d), &mut rng)?;
        }
        Variant::ZeroFill => {
            encoding::init_params(&mut store, dims, d, cfg.gnn_layers, false, &mut rng)?;
            init_layer_norm(&mut store, "fus.ln", d)?;
        }
    }
    heads::init_params(&mut store, kind, d, classes, &mut rng)?;
    Ok(store)
}

/// Everything one forward pass reads besides parameters.
#[derive(Debug, Clone, Copy)]
pub struct LocalInputs<'a> {
    /// Raw features per modality, zero at naturally missing cells.
    pub features: &'a [Tensor],
    /// Message-passing graph.
    pub adj: &'a [Vec<usize>],
    pub masks: &'a MaskSet,
    /// One bank per stacked cell; unused by the zero-fill variant.
    pub banks: &'a [ContextBank],
    pub gamma: f64,
}

/// Negatives of a link-prediction batch.
#[derive(Debug, Clone, Copy)]
pub enum Negatives<'a> {
    Given(&'a [(usize, usize)]),
    /// Hard negatives mined from the current scores; `edges` holds every
    /// known edge as `(min, max)`.
    Hard { edges: &'a HashSet<(usize, usize)>, seed: u64 },
}

/// Supervision of one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum TaskTarget<'a> {
    Nc { nodes: &'a [usize], labels: &'a [usize] },
    Lp { pos: &'a [(usize, usize)], neg: Negatives<'a> },
    Mr { pairs: &'a [(usize, usize)], labels: Option<&'a [usize]> },
}

/// Stop-gradient values of one pass, replayed when the same objective must
/// be re-evaluated at perturbed parameters (finite differences).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frozen {
    pub rec_target: Option<Tensor>,
    pub norm_err: Option<Tensor>,
    pub negatives: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Refined node representations `r'`.
    pub refined: Var,
    /// Class logits when a classification head exists.
    pub logits: Option<Var>,
    /// Unit-norm query and gallery embeddings for every node (retrieval).
    pub retrieval: Option<(Var, Var)>,
    /// Stacked generated embeddings `ẑ` (full variant).
    pub z_hat: Option<Var>,
    /// Stacked uncertainty `[cells × 1]` (full variant).
    pub uncertainty: Option<Var>,
    /// Stacked NormErr values, zero outside `Δ`.
    pub norm_err: Vec<f64>,
    /// Fallback coefficients `[n × 1]` (full variant).
    pub alpha: Option<Var>,
    pub frozen: Frozen,
}

fn check_inputs(variant: Variant, inputs: &LocalInputs) -> Result<()> {
    let n = inputs.masks.nodes();
    let m = inputs.masks.modalities();
    if inputs.features.len() != m || inputs.features.iter().any(|x| x.rows() != n) || inputs.adj.len() != n {
        return Err(Error::Shape(format!("inputs disagree with a {n}-node, {m}-modality mask")));
    }
    if variant == Variant::Full && inputs.banks.len() != n * m {
        return Err(Error::Shape(format!("{} context banks for {} cells", inputs.banks.len(), n * m)));
    }
    Ok(())
}

/// Records the forward pass of `variant` on `tape`. Without a target the
/// task loss is 0 (inference).
pub fn forward(
    tape: &mut Tape,
    p: &Bound,
    variant: Variant,
    cfg: &ModelConfig,
    spec: &TaskSpec,
    inputs: &LocalInputs,
    target: Option<&TaskTarget>,
    frozen: Option<&Frozen>,
) -> Result<Forward> {
    check_inputs(variant, inputs)?;
    match variant {
        Variant::Full => forward_full(tape, p, cfg, spec, inputs, target, frozen),
        Variant::ZeroFill => forward_zero_fill(tape, p, cfg, spec, inputs, target, frozen),
    }
}

fn forward_full(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    spec: &TaskSpec,
    inputs: &LocalInputs,
    target: Option<&TaskTarget>,
    frozen: Option<&Frozen>,
) -> Result<Forward> {
    let masks = inputs.masks;
    let visible = &masks.effective;
    let layout = Layout::new(masks.nodes(), masks.modalities());
    let adj = inputs.adj;

    let z = encoding::encode_all(tape, p, inputs.features, &masks.natural)?;
    let anchors = encoding::structural_anchors(tape, p, z, adj, visible, cfg.anchor_weighting).anchors;
    let h = encoding::graph_context(tape, p, z, anchors, visible, adj, cfg.gnn_layers);
    let h_excl = encoding::target_exclusive_context(tape, h, visible);
    let query = generation::build_query(tape, p, h_excl, visible);
    let gen = generation::generate(tape, p, query, h, h_excl, anchors, inputs.banks, inputs.gamma, cfg.heads)?;
    let z_hat = gen.z_hat;

    let rec_target = match frozen.and_then(|f| f.rec_target.clone()) {
        Some(t) => t,
        None => tape.value(z).clone(),
    };
    let recon_col = layout.mask_column(&masks.recon);
    let sq = generation::squared_errors(tape, z_hat, &rec_target);
    let rec = generation::reconstruction_from_errors(tape, sq, &recon_col);
    let align = generation::alignment_loss(tape, p, z, z_hat, visible);

    let vis_col = layout.mask_column(visible);
    let u = fusion::estimate_uncertainty(tape, p, z_hat, h_excl, anchors, &vis_col);
    let rho = node_missing_ratios(visible);
    let rho_client = rho.iter().sum::<f64>() / rho.len().max(1) as f64;
    let rho_cells = Tensor::col(&layout.broadcast_index().into_iter().map(|i| rho[i]).collect::<Vec<_>>());
    let weights = fusion::route(tape, p, &vis_col, u, &rho_cells, rho_client, cfg.tau)?;
    let f = fusion::expert_mix(tape, p, z, z_hat, weights, &vis_col);
    let h_str = encoding::structure_only_repr(tape, p, adj, cfg.gnn_layers);
    let fused = fusion::fuse(tape, p, f, u, &Tensor::col(&rho), h_str, layout, &cfg.fusion_options());

    let norm_err = match frozen.and_then(|f| f.norm_err.clone()) {
        Some(t) => t,
        None => Tensor::col(&fusion::norm_err(tape.value(sq).data(), &recon_col, layout)),
    };
    let route = fusion::routing_loss(tape, u, &norm_err, &recon_col, weights, &vis_col, spec.lambda_bal).total;

    let refined = heads::refine(tape, p, fused.r, adj);
    let f_blocks = (tape.gather_rows(f, &layout.block(0)), tape.gather_rows(f, &layout.block(layout.modalities.min(2) - 1)));
    let mut out = finish(tape, p, spec, refined, f_blocks, target, frozen, rec, align, route)?;
    out.z_hat = Some(z_hat);
    out.uncertainty = Some(u);
    out.alpha = Some(fused.alpha);
    out.norm_err = norm_err.data().to_vec();
    out.frozen.rec_target = Some(rec_target);
    out.frozen.norm_err = Some(norm_err);
    Ok(out)
}

fn forward_zero_fill(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    spec: &TaskSpec,
    inputs: &LocalInputs,
    target: Option<&TaskTarget>,
    frozen: Option<&Frozen>,
) -> Result<Forward> {
    let masks = inputs.masks;
    let layout = Layout::new(masks.nodes(), masks.modalities());
    let z = encoding::encode_all(tape, p, inputs.features, &masks.effective)?;
    let h = encoding::adapt_and_propagate(tape, p, z, layout, inputs.adj, cfg.gnn_layers);
    let pooled = tape.weighted_gather(h, layout.node_reduction(1.0 / layout.modalities as f64));
    let r = layer_norm_named(tape, p, "fus.ln", pooled);
    let refined = heads::refine(tape, p, r, inputs.adj);
    let f_blocks = (tape.gather_rows(h, &layout.block(0)), tape.gather_rows(h, &layout.block(layout.modalities.min(2) - 1)));
    let zero = tape.constant(Tensor::scalar(0.0));
    finish(tape, p, spec, refined, f_blocks, target, frozen, zero, zero, zero)
}

/// Heads, task loss and the combined objective.
#[allow(clippy::too_many_arguments)]
fn finish(
    tape: &mut Tape,
    p: &Bound,
    spec: &TaskSpec,
    refined: Var,
    f_blocks: (Var, Var),
    target: Option<&TaskTarget>,
    frozen: Option<&Frozen>,
    rec: Var,
    align: Var,
    route: Var,
) -> Result<Forward> {
    let logits = p.get("task.nc.w").map(|_| heads::classify(tape, p, refined));
    let retrieval = if spec.kind == TaskKind::Mr { Some(heads::retrieval_embeddings(tape, p, f_blocks.0, f_blocks.1)) } else { None };
    let mut used_negatives = None;
    let task = match target {
        None => tape.constant(Tensor::scalar(0.0)),
        Some(TaskTarget::Nc { nodes, labels }) => {
            let logits = logits.ok_or_else(|| crate::error::invalid("model has no classification head"))?;
            heads::classification_loss(tape, logits, nodes, labels)?
        }
        Some(TaskTarget::Lp { pos, neg }) => {
            let negs = match (frozen.and_then(|f| f.negatives.clone()), neg) {
                (Some(n), _) => n,
                (None, Negatives::Given(n)) => n.to_vec(),
                (None, Negatives::Hard { edges, seed }) => {
                    let mut rng = stream(&[*seed]);
                    heads::hard_negatives(tape.value(refined), tape.value(refined).rows(), edges, pos.len(), spec, &mut rng)
                }
            };
            let loss = heads::link_loss(tape, refined, pos, &negs, spec)?;
            used_negatives = Some(negs);
            loss
        }
        Some(TaskTarget::Mr { pairs, labels }) => {
            let (q, g) = retrieval.expect("retrieval head");
            let nce = heads::info_nce(tape, q, g, pairs, spec.tau_nce)?;
            match (labels, logits) {
                (Some(labels), Some(logits)) if spec.lambda_cls > 0.0 => {
                    let mut nodes: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                    nodes.sort_unstable();
                    nodes.dedup();
                    let ce = heads::classification_loss(tape, logits, &nodes, labels)?;
                    let ce = tape.scale(ce, spec.lambda_cls);
                    tape.add(nce, ce)
                }
                _ => nce,
            }
        }
    };
    let (loss, breakdown) = local_objective(tape, LossTerms { task, rec, align, route }, spec);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("local objective {breakdown:?}")));
    }
    Ok(Forward {
        loss,
        breakdown,
        refined,
        logits,
        retrieval,
        z_hat: None,
        uncertainty: None,
        norm_err: Vec::new(),
        alpha: None,
        frozen: Frozen { rec_target: None, norm_err: None, negatives: used_negatives },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::build_banks;
    use crate::graphdata::{sample_artificial_mask, Mask};

    fn toy() -> (Vec<Tensor>, Vec<Vec<usize>>, Mask, Vec<usize>) {
        let x0 = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 0.0, 0.0], vec![0.5, -1.0, 0.0], vec![1.0, 1.0, 1.0]]);
        let x1 = Tensor::from_rows(&[vec![0.3, 0.1], vec![-0.2, 0.4], vec![0.0, 0.0], vec![1.0, -1.0]]);
        let r = Mask::from_rows(&[vec![true, true], vec![false, true], vec![true, false], vec![true, true]]);
        let adj = crate::graphdata::adjacency(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        (vec![x0, x1], adj, r, vec![0, 1, 0, 1])
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { d: 8, heads: 2, ..ModelConfig::default() }
    }

    #[test]
    fn full_forward_is_finite_and_deterministic() {
        let (x, adj, r, labels) = toy();
        let cfg = small_cfg();
        let store = init_model(Variant::Full, &[3, 2], 2, TaskKind::Nc, &cfg, 4).unwrap();
        let masks = sample_artificial_mask(&r, 0.5, 3).unwrap();
        let banks = build_banks(Layout::new(4, 2), &adj, &masks.effective, 16, 5);
        let inputs = LocalInputs { features: &x, adj: &adj, masks: &masks, banks: &banks, gamma: 0.5 };
        let spec = cfg.task_spec(TaskKind::Nc);
        let nodes = [0, 1, 2, 3];
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = forward(&mut tape, &p, Variant::Full, &cfg, &spec, &inputs, Some(&TaskTarget::Nc { nodes: &nodes, labels: &labels }), None).unwrap();
            let u = tape.value(out.uncertainty.unwrap()).clone();
            (out.breakdown, u)
        };
        let (a, u) = run();
        assert!(a.is_finite());
        assert_eq!(a, run().0);
        let layout = Layout::new(4, 2);
        for i in 0..4 {
            for m in 0..2 {
                let v = u.data()[layout.idx(i, m)];
                if masks.effective.get(i, m) {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_fill_has_only_a_task_loss() {
        let (x, adj, r, labels) = toy();
        let cfg = small_cfg();
        let store = init_model(Variant::ZeroFill, &[3, 2], 2, TaskKind::Nc, &cfg, 4).unwrap();
        assert!(!store.contains("gen.w_q.w") && !store.contains("fus.router.0.w"));
        let masks = MaskSet::unmasked(r);
        let inputs = LocalInputs { features: &x, adj: &adj, masks: &masks, banks: &[], gamma: 1.0 };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let spec = cfg.task_spec(TaskKind::Nc);
        let out = forward(&mut tape, &p, Variant::ZeroFill, &cfg, &spec, &inputs, Some(&TaskTarget::Nc { nodes: &[0, 3], labels: &labels }), None).unwrap();
        assert_eq!((out.breakdown.rec, out.breakdown.align, out.breakdown.route), (0.0, 0.0, 0.0));
        assert_eq!(out.breakdown.total, out.breakdown.task);
    }

    #[test]
    fn link_and_retrieval_targets() {
        let (x, adj, r, labels) = toy();
        let cfg = small_cfg();
        let masks = MaskSet::unmasked(r);
        let banks = build_banks(Layout::new(4, 2), &adj, &masks.effective, 16, 5);
        let inputs = LocalInputs { features: &x, adj: &adj, masks: &masks, banks: &banks, gamma: 1.0 };
        let edges: HashSet<(usize, usize)> = [(0, 1), (1, 2), (2, 3), (0, 3)].into_iter().collect();
        let store = init_model(Variant::Full, &[3, 2], 0, TaskKind::Lp, &cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let spec = cfg.task_spec(TaskKind::Lp);
        let target = TaskTarget::Lp { pos: &[(0, 1), (2, 3)], neg: Negatives::Hard { edges: &edges, seed: 9 } };
        let out = forward(&mut tape, &p, Variant::Full, &cfg, &spec, &inputs, Some(&target), None).unwrap();
        let negs = out.frozen.negatives.unwrap();
        assert_eq!(negs.len(), 2);
        assert!(negs.iter().all(|&(a, b)| !edges.contains(&(a.min(b), a.max(b)))));

        let store = init_model(Variant::Full, &[3, 2], 2, TaskKind::Mr, &cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let spec = cfg.task_spec(TaskKind::Mr);
        let pairs = [(0, 0), (1, 1), (3, 3)];
        let out = forward(&mut tape, &p, Variant::Full, &cfg, &spec, &inputs, Some(&TaskTarget::Mr { pairs: &pairs, labels: Some(&labels) }), None).unwrap();
        assert!(out.breakdown.task > 0.0 && out.retrieval.is_some());
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = ModelConfig { tau: 0.0, ..ModelConfig::default() };
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.tau"),
            other => panic!("{other:?}"),
        }
        assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
