//! Task heads, losses, the combined local objective and evaluation metrics.

pub mod heads;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Node classification.
    Nc,
    /// Link prediction.
    Lp,
    /// Cross-modal retrieval.
    Mr,
}

impl TaskKind {
    /// Names of the two reported metrics.
    pub fn metric_names(self) -> (&'static str, &'static str) {
        match self {
            TaskKind::Nc => ("accuracy", "macro_f1"),
            TaskKind::Lp => ("auc", "ap"),
            TaskKind::Mr => ("recall@5", "mrr"),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nc" => Ok(TaskKind::Nc),
            "lp" => Ok(TaskKind::Lp),
            "mr" => Ok(TaskKind::Mr),
            other => Err(invalid(format!("unknown task `{other}` (expected nc, lp or mr)"))),
        }
    }
}

/// Loss weights and task-loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub lambda_rec: f64,
    pub lambda_align: f64,
    pub lambda_route: f64,
    /// Load-balancing weight inside the routing term.
    pub lambda_bal: f64,
    pub w_bce: f64,
    pub w_bpr: f64,
    pub w_margin: f64,
    pub margin: f64,
    pub tau_nce: f64,
    pub pool_scale: f64,
    pub pool_min: usize,
    /// Auxiliary classification weight for retrieval when labels exist.
    pub lambda_cls: f64,
}

impl TaskSpec {
    pub fn defaults(kind: TaskKind) -> Self {
        Self {
            kind,
            lambda_rec: if kind == TaskKind::Mr { 0.5 } else { 0.05 },
            lambda_align: 0.01,
            lambda_route: 0.01,
            lambda_bal: 0.5,
            w_bce: 1.0,
            w_bpr: 0.5,
            w_margin: 0.3,
            margin: 0.1,
            tau_nce: 0.07,
            pool_scale: 4.0,
            pool_min: 256,
            lambda_cls: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_rec, self.lambda_align, self.lambda_route, self.lambda_bal, self.lambda_cls];
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(invalid("loss weights must be finite and ≥ 0"));
        }
        if !(self.tau_nce > 0.0) {
            return Err(invalid("InfoNCE temperature must be > 0"));
        }
        Ok(())
    }
}

/// Values of the objective's components on one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub rec: f64,
    pub align: f64,
    pub route: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = task + λ_rec·rec + λ_align·align + λ_route·route`.
    pub fn new(task: f64, rec: f64, align: f64, route: f64, spec: &TaskSpec) -> Self {
        let total = task + spec.lambda_rec * rec + spec.lambda_align * align + spec.lambda_route * route;
        Self { task, rec, align, route, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.task, self.rec, self.align, self.route, self.total].iter().all(|v| v.is_finite())
    }
}

/// Component nodes of the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub task: Var,
    pub rec: Var,
    pub align: Var,
    pub route: Var,
}

/// Records the combined objective on the tape and returns it with the
/// breakdown; the recorded total equals [`LossBreakdown::total`] exactly.
pub fn local_objective(tape: &mut Tape, terms: LossTerms, spec: &TaskSpec) -> (Var, LossBreakdown) {
    let rec = tape.scale(terms.rec, spec.lambda_rec);
    let align = tape.scale(terms.align, spec.lambda_align);
    let route = tape.scale(terms.route, spec.lambda_route);
    let a = tape.add(terms.task, rec);
    let b = tape.add(a, align);
    let total = tape.add(b, route);
    let v = |x: Var| tape.value(x).item();
    let breakdown = LossBreakdown::new(v(terms.task), v(terms.rec), v(terms.align), v(terms.route), spec);
    (total, breakdown)
}

/// Test-split metrics of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: TaskKind,
    pub metric_1: f64,
    pub metric_2: f64,
    /// Number of evaluated test items.
    pub support: usize,
    /// False when a metric was undefined (e.g. single-class AUC); the
    /// values are then 0.
    pub defined: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn objective_identity() {
        let spec = TaskSpec { lambda_rec: 0.5, lambda_align: 0.1, lambda_route: 0.2, ..TaskSpec::defaults(TaskKind::Nc) };
        let mut tape = Tape::new();
        let mut c = |v: f64| tape.constant(Tensor::scalar(v));
        let terms = LossTerms { task: c(1.0), rec: c(2.0), align: c(3.0), route: c(4.0) };
        let (total, b) = local_objective(&mut tape, terms, &spec);
        assert!((b.total - 3.1).abs() < 1e-12);
        assert_eq!(tape.value(total).item(), b.total);
        let zero = TaskSpec { lambda_rec: 0.0, lambda_align: 0.0, lambda_route: 0.0, ..spec };
        assert_eq!(LossBreakdown::new(1.25, 2.0, 3.0, 4.0, &zero).total, 1.25);
    }

    #[test]
    fn documented_defaults() {
        let nc = TaskSpec::defaults(TaskKind::Nc);
        assert_eq!((nc.lambda_rec, nc.lambda_align, nc.lambda_route), (0.05, 0.01, 0.01));
        assert_eq!(TaskSpec::defaults(TaskKind::Mr).lambda_rec, 0.5);
        assert_eq!("lp".parse::<TaskKind>().unwrap(), TaskKind::Lp);
    }
}
