//! Experiment driver: runs a configured federation and writes the metrics
//! CSV, the per-round JSONL history and a summary JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunMode};
use crate::error::{Error, Result};
use crate::federation::{run_federation, RoundHistory, RoundRecord};
use crate::graphdata::{generate_sbm_multimodal, save_graph};
use crate::tasks::{MetricsRow, TaskKind};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub const CSV_HEADER: &str = "round,client_frac,omega_min,omega_max,loss_task,loss_rec,loss_align,loss_route,metric_1,metric_2,wall_ms";

/// Metrics of one round as reported in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    #[serde(flatten)]
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: RunMode,
    pub task: TaskKind,
    pub seed: u64,
    pub rounds: usize,
    pub metric_names: (String, String),
    pub last: Option<RoundMetrics>,
    /// Round with the highest first metric; earliest on ties.
    pub best: Option<RoundMetrics>,
    pub final_loss: Option<f64>,
    pub client_failures: usize,
}

impl Summary {
    pub fn from_history(history: &RoundHistory, seed: u64) -> Self {
        let pick = |r: &RoundRecord| RoundMetrics { round: r.round, metrics: r.metrics };
        let best = history
            .rounds
            .iter()
            .filter(|r| r.metrics.defined)
            .fold(None::<&RoundRecord>, |b, r| match b {
                Some(b) if b.metrics.metric_1 >= r.metrics.metric_1 => Some(b),
                _ => Some(r),
            })
            .map(pick);
        let (m1, m2) = history.task.metric_names();
        Self {
            mode: history.mode,
            task: history.task,
            seed,
            rounds: history.rounds.len(),
            metric_names: (m1.into(), m2.into()),
            last: history.rounds.last().map(pick),
            best,
            final_loss: history.rounds.last().map(|r| r.mean_loss.total),
            client_failures: history.rounds.iter().map(|r| r.failures.len()).sum(),
        }
    }
}

/// Shortest round-trip decimal form.
fn num(v: f64) -> String {
    format!("{v:?}")
}

/// The metrics CSV: the header and one row per round.
pub fn metrics_csv(history: &RoundHistory) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &history.rounds {
        let lo = r.omega.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.omega.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = &r.mean_loss;
        let fields = [r.client_frac, lo, hi, l.task, l.rec, l.align, l.route, r.metrics.metric_1, r.metrics.metric_2];
        let _ = write!(out, "{}", r.round + 1);
        for v in fields {
            let _ = write!(out, ",{}", num(v));
        }
        let _ = writeln!(out, ",{}", r.wall_ms);
    }
    out
}

/// One JSON object per round.
pub fn rounds_jsonl(history: &RoundHistory) -> Result<String> {
    let mut out = String::new();
    for r in &history.rounds {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::NonFinite(format!("round {}: {e}", r.round)))?);
        out.push('\n');
    }
    Ok(out)
}

/// Paths of the written artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub rounds: PathBuf,
    pub summary: PathBuf,
}

fn check_finite(history: &RoundHistory) -> Result<()> {
    for r in &history.rounds {
        let l = &r.mean_loss;
        let values = [r.client_frac, l.task, l.rec, l.align, l.route, l.total, r.metrics.metric_1, r.metrics.metric_2];
        if values.iter().chain(&r.omega).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("round {} record", r.round)));
        }
    }
    Ok(())
}

/// Writes the three artifacts of `history` into `dir`.
pub fn write_artifacts(history: &RoundHistory, seed: u64, dir: &Path) -> Result<Artifacts> {
    check_finite(history)?;
    fs::create_dir_all(dir)?;
    let a = Artifacts { metrics: dir.join(METRICS_FILE), rounds: dir.join(ROUNDS_FILE), summary: dir.join(SUMMARY_FILE) };
    fs::write(&a.metrics, metrics_csv(history))?;
    fs::write(&a.rounds, rounds_jsonl(history)?)?;
    let summary = serde_json::to_string_pretty(&Summary::from_history(history, seed)).expect("summary serializes");
    fs::write(&a.summary, summary + "\n")?;
    Ok(a)
}

/// Runs the configured mode and writes its artifacts to `cfg.output`
/// (default `out/`).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Summary, Artifacts)> {
    let outcome = run_federation(cfg)?;
    let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("out"));
    let artifacts = write_artifacts(&outcome.history, cfg.seed, &dir)?;
    Ok((Summary::from_history(&outcome.history, cfg.seed), artifacts))
}

/// Generates the configured synthetic graph and saves it as JSON.
pub fn gen_data(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    cfg.validate()?;
    let graph = generate_sbm_multimodal(&cfg.data.sbm(), cfg.seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_graph(&graph, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.blocks = 2;
        cfg.data.nodes_per_block = 8;
        cfg.data.d_img = 4;
        cfg.data.d_txt = 4;
        cfg.data.latent_dim = 2;
        cfg.federation.clients = 2;
        cfg.federation.rounds = 3;
        cfg.model.d = 8;
        cfg.model.heads = 2;
        cfg.model.epochs = 1;
        cfg
    }

    #[test]
    fn three_rounds_three_rows_and_verbatim_mode() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [RunMode::Fedavg, RunMode::Reliability] {
            let mut cfg = tiny();
            cfg.federation.mode = mode;
            cfg.output = Some(dir.path().join(mode.as_str()));
            let (summary, a) = run_experiment(&cfg).unwrap();
            let csv = fs::read_to_string(&a.metrics).unwrap();
            let lines: Vec<&str> = csv.lines().collect();
            assert_eq!(lines[0], CSV_HEADER);
            assert_eq!(lines.len(), 4);
            assert!(lines[1..].iter().all(|l| l.split(',').count() == 11));
            assert_eq!(fs::read_to_string(&a.rounds).unwrap().lines().count(), 3);
            let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a.summary).unwrap()).unwrap();
            assert_eq!(json["mode"], mode.as_str());
            assert_eq!(summary.rounds, 3);
        }
    }

    #[test]
    fn best_round_prefers_earliest_maximum() {
        let mut cfg = tiny();
        cfg.federation.rounds = 2;
        let out = run_federation(&cfg).unwrap();
        let mut h = out.history;
        h.rounds[0].metrics.metric_1 = 0.5;
        h.rounds[1].metrics.metric_1 = 0.5;
        h.rounds.iter_mut().for_each(|r| r.metrics.defined = true);
        assert_eq!(Summary::from_history(&h, 0).best.unwrap().round, 0);
    }
}
