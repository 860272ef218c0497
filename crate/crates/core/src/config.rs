//! Experiment configuration: TOML sections with documented defaults, range
//! checks that name the offending key, and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{MissingMode, SbmConfig};
use crate::model::{ModelConfig, Variant};
use crate::tasks::TaskKind;

/// Synthetic graph parameters, or a graph file that replaces them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub graph_file: Option<PathBuf>,
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d_img: usize,
    pub d_txt: usize,
    pub latent_dim: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SbmConfig::default();
        Self {
            graph_file: None,
            blocks: s.blocks,
            nodes_per_block: s.nodes_per_block,
            p_in: s.p_in,
            p_out: s.p_out,
            d_img: s.d_img,
            d_txt: s.d_txt,
            latent_dim: s.latent_dim,
            noise: s.noise,
        }
    }
}

impl DataConfig {
    pub fn sbm(&self) -> SbmConfig {
        SbmConfig {
            blocks: self.blocks,
            nodes_per_block: self.nodes_per_block,
            p_in: self.p_in,
            p_out: self.p_out,
            d_img: self.d_img,
            d_txt: self.d_txt,
            latent_dim: self.latent_dim,
            noise: self.noise,
        }
    }
}

/// How the server combines client updates, and which model clients train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Full model, reliability-weighted aggregation.
    Reliability,
    /// Full model, data-size weighted aggregation.
    Fedavg,
    /// Zero-fill baseline, data-size weighted aggregation.
    FedavgZero,
}

impl RunMode {
    pub fn variant(self) -> Variant {
        match self {
            RunMode::FedavgZero => Variant::ZeroFill,
            _ => Variant::Full,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Reliability => "reliability",
            RunMode::Fedavg => "fedavg",
            RunMode::FedavgZero => "fedavg-zero",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reliability" => Ok(RunMode::Reliability),
            "fedavg" => Ok(RunMode::Fedavg),
            "fedavg-zero" => Ok(RunMode::FedavgZero),
            other => Err(Error::Config { key: "federation.mode".into(), msg: format!("unknown mode `{other}`") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    /// Dirichlet concentration of the label split.
    pub alpha: f64,
    pub rounds: usize,
    /// Fraction of clients sampled per round.
    pub fraction: f64,
    pub mode: RunMode,
    pub eta_u: f64,
    pub eta_e: f64,
    pub eta_rho: f64,
    /// Denominator guard of the aggregation weights.
    pub eps: f64,
    /// Worker threads for client training; never changes results.
    pub workers: usize,
    /// Record wall-clock time per round. Off keeps outputs byte-stable.
    pub timing: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            alpha: 0.5,
            rounds: 150,
            fraction: 1.0,
            mode: RunMode::Reliability,
            eta_u: 1.0,
            eta_e: 1.0,
            eta_rho: 1.0,
            eps: 1e-12,
            workers: 1,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingnessSection {
    /// Natural missing rate η.
    pub rate: f64,
    pub mode: MissingMode,
    /// Training-time masking rate of observed cells.
    pub p_mask: f64,
    /// Per-client natural rates overriding `rate`.
    pub client_rates: Option<Vec<f64>>,
}

impl Default for MissingnessSection {
    fn default() -> Self {
        Self { rate: 0.3, mode: MissingMode::NodeLevel, p_mask: 0.3, client_rates: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub missingness: MissingnessSection,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Nc,
            output: None,
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            missingness: MissingnessSection::default(),
            model: ModelConfig::default(),
        }
    }
}

fn range_error(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.into(), msg: msg.into() }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(range_error(key, format!("must lie in [0, 1), got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.graph_file.is_none() {
            if d.blocks == 0 {
                return Err(range_error("data.blocks", "must be ≥ 1"));
            }
            if d.nodes_per_block < 2 {
                return Err(range_error("data.nodes_per_block", format!("must be ≥ 2, got {}", d.nodes_per_block)));
            }
            if !(0.0..=1.0).contains(&d.p_in) {
                return Err(range_error("data.p_in", format!("must lie in [0, 1], got {}", d.p_in)));
            }
            if !(0.0..=d.p_in).contains(&d.p_out) {
                return Err(range_error("data.p_out", format!("must lie in [0, p_in], got {}", d.p_out)));
            }
            for (key, v) in [("data.d_img", d.d_img), ("data.d_txt", d.d_txt), ("data.latent_dim", d.latent_dim)] {
                if v == 0 {
                    return Err(range_error(key, "must be ≥ 1"));
                }
            }
            if !(d.noise >= 0.0) || !d.noise.is_finite() {
                return Err(range_error("data.noise", format!("must be finite and ≥ 0, got {}", d.noise)));
            }
        }
        let f = &self.federation;
        if f.clients == 0 {
            return Err(range_error("federation.clients", "must be ≥ 1"));
        }
        if !(f.alpha > 0.0) || !f.alpha.is_finite() {
            return Err(range_error("federation.alpha", format!("must be > 0, got {}", f.alpha)));
        }
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(range_error("federation.fraction", format!("must lie in (0, 1], got {}", f.fraction)));
        }
        for (key, v) in [("federation.eta_u", f.eta_u), ("federation.eta_e", f.eta_e), ("federation.eta_rho", f.eta_rho)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(range_error(key, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !(f.eps >= 0.0) || !f.eps.is_finite() {
            return Err(range_error("federation.eps", format!("must be finite and ≥ 0, got {}", f.eps)));
        }
        if f.workers == 0 {
            return Err(range_error("federation.workers", "must be ≥ 1"));
        }
        let m = &self.missingness;
        unit_interval("missingness.rate", m.rate)?;
        unit_interval("missingness.p_mask", m.p_mask)?;
        if let Some(rates) = &m.client_rates {
            if rates.len() != f.clients {
                return Err(range_error(
                    "missingness.client_rates",
                    format!("needs one rate per client ({}), got {}", f.clients, rates.len()),
                ));
            }
            for &r in rates {
                unit_interval("missingness.client_rates", r)?;
            }
        }
        self.model.validate()
    }

    /// Parses TOML text; missing keys take their defaults and unknown keys
    /// are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .map_or_else(|| "config".to_string(), str::to_string);
            range_error(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies command-line values, which win over the file.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.output = Some(out.clone());
        }
        if let Some(workers) = o.workers {
            self.federation.workers = workers;
        }
        if let Some(mode) = o.mode {
            self.federation.mode = mode;
        }
        if let Some(task) = o.task {
            self.task = task;
        }
        self.validate()
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub mode: Option<RunMode>,
    pub task: Option<TaskKind>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.missingness.rate, 0.3);
        assert_eq!(cfg.federation.alpha, 0.5);
        assert_eq!((cfg.model.lr, cfg.model.epochs, cfg.model.d), (0.005, 3, 256));
        assert_eq!((cfg.model.tau, cfg.model.warmup_rounds), (1.0, 30));
    }

    #[test]
    fn range_and_unknown_key_errors_name_the_key() {
        match ExperimentConfig::from_toml("[missingness]\nrate = 1.5\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "missingness.rate"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_toml("[model]\nwidth = 3\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "width"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = ExperimentConfig::from_toml("seed = 3\n[federation]\nmode = \"fedavg\"\n").unwrap();
        cfg.apply(&Overrides { seed: Some(9), mode: Some(RunMode::FedavgZero), ..Overrides::default() }).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.federation.mode, RunMode::FedavgZero);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.gamma_clamp = Some((0.55, 0.78));
        cfg.model.lambda_rec = Some(0.1);
        cfg.missingness.client_rates = Some(vec![0.8, 0.1, 0.1, 0.1]);
        cfg.data.noise = 0.1 + 0.2;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
