//! Evaluation metrics: accuracy and macro-F1, ROC-AUC and average precision,
//! Recall@K and mean reciprocal rank. Ranks of tied items are the mean rank
//! of their tied block.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(pred.len(), labels.len(), "prediction/label count");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Unweighted mean of per-class F1 over the classes present in either the
/// labels or the predictions.
pub fn macro_f1(pred: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(pred.len(), labels.len(), "prediction/label count");
    let classes = pred.iter().chain(labels).max().map_or(0, |&c| c + 1);
    // confusion[true][pred]
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let tp = confusion[c][c];
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        present += 1;
        total += 2.0 * tp as f64 / (actual + predicted) as f64;
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// ROC-AUC by the rank-sum formula with mid-ranks for ties. Errors when
/// either class is empty.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid("AUC is undefined with a single class"));
    }
    let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[k]] {
            end += 1;
        }
        // ranks k+1..=end+1 share their mean
        let mid = (k + end + 2) as f64 / 2.0;
        rank_sum_pos += mid * idx[k..=end].iter().filter(|&&i| i < pos.len()).count() as f64;
        k = end + 1;
    }
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision `Σ_n (R_n − R_{n−1})·P_n` over the distinct score
/// thresholds in decreasing order. Errors without positives.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(invalid("average precision is undefined without positives"));
    }
    let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let idx = by_score_desc(&scores);
    let total_pos = pos.len() as f64;
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && scores[idx[end + 1]] == scores[idx[k]] {
            end += 1;
        }
        tp += idx[k..=end].iter().filter(|&&i| i < pos.len()).count();
        seen += end - k + 1;
        let recall = tp as f64 / total_pos;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        k = end + 1;
    }
    Ok(ap)
}

/// Rank of item `target` among `scores` (1 = best), ties at their block mean.
pub fn rank_of(scores: &[f64], target: usize) -> f64 {
    let idx = by_score_desc(scores);
    let s = scores[target];
    let start = idx.iter().position(|&i| scores[i] == s).expect("target is scored");
    let tied = idx[start..].iter().take_while(|&&i| scores[i] == s).count();
    start as f64 + (tied as f64 + 1.0) / 2.0
}

/// `(Recall@K, MRR)` over query ranks.
pub fn ranking_metrics(ranks: &[f64], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let recall = ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n;
    let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
    (recall, mrr)
}

/// Brute-force references used to cross-check the metrics above.
pub mod oracle {
    /// Accuracy and macro-F1 by direct per-class counting.
    pub fn classification(pred: &[usize], labels: &[usize]) -> (f64, f64) {
        let n = pred.len();
        let acc = if n == 0 { 0.0 } else { (0..n).filter(|&i| pred[i] == labels[i]).count() as f64 / n as f64 };
        let classes = pred.iter().chain(labels).max().map_or(0, |&c| c + 1);
        let mut f1s = Vec::new();
        for c in 0..classes {
            let tp = (0..n).filter(|&i| pred[i] == c && labels[i] == c).count() as f64;
            let fp = (0..n).filter(|&i| pred[i] == c && labels[i] != c).count() as f64;
            let fneg = (0..n).filter(|&i| pred[i] != c && labels[i] == c).count() as f64;
            if tp + fp + fneg == 0.0 {
                continue;
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            f1s.push(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
        }
        let f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
        (acc, f1)
    }

    /// AUC as the fraction of (positive, negative) pairs ordered correctly,
    /// ties counting one half.
    pub fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0.0;
        for &p in pos {
            for &q in neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    }

    /// AP by recomputing precision and recall at every distinct threshold.
    pub fn average_precision(pos: &[f64], neg: &[f64]) -> Option<f64> {
        if pos.is_empty() {
            return None;
        }
        let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
            let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
            let recall = tp / pos.len() as f64;
            ap += (recall - prev_recall) * tp / (tp + fp);
            prev_recall = recall;
        }
        Some(ap)
    }

    /// Rank by scanning: one plus the items scored strictly higher, plus
    /// half the other items tied with the target.
    pub fn rank(scores: &[f64], target: usize) -> f64 {
        let s = scores[target];
        let higher = scores.iter().filter(|&&x| x > s).count() as f64;
        let ties = scores.iter().enumerate().filter(|&(j, &x)| j != target && x == s).count() as f64;
        1.0 + higher + ties / 2.0
    }

    pub fn recall_mrr(ranks: &[f64], k: usize) -> (f64, f64) {
        let mut hits = 0.0;
        let mut rr = 0.0;
        for &r in ranks {
            if r <= k as f64 {
                hits += 1.0;
            }
            rr += 1.0 / r;
        }
        let n = ranks.len().max(1) as f64;
        (hits / n, rr / n)
    }
}

/// Outcome of comparing the metrics against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub agreed: usize,
    pub max_abs_diff: f64,
    pub failures: Vec<String>,
}

/// Compares every metric with its brute-force reference on `instances`
/// random problems of at most 50 items, with coarse score grids so that
/// ties occur often.
pub fn metrics_oracle(instances: usize, seed: u64, tol: f64) -> OracleReport {
    use rand::Rng;
    let mut rng = crate::rng::stream(&[crate::rng::domain::EVAL, seed, 0x0AC1E]);
    let mut report = OracleReport { instances, agreed: 0, max_abs_diff: 0.0, failures: Vec::new() };
    for case in 0..instances {
        let n = rng.random_range(2..=50);
        let grid = rng.random_range(2..=10) as f64;
        let classes = rng.random_range(2..=5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let score = |rng: &mut rand_chacha::ChaCha8Rng| (rng.random_range(0.0..grid)).floor() / grid;
        let n_pos = rng.random_range(1..n);
        let pos: Vec<f64> = (0..n_pos).map(|_| score(&mut rng)).collect();
        let neg: Vec<f64> = (n_pos..n).map(|_| score(&mut rng)).collect();
        let gallery: Vec<Vec<f64>> = (0..rng.random_range(1..=10)).map(|_| (0..n).map(|_| score(&mut rng)).collect()).collect();
        let targets: Vec<usize> = gallery.iter().map(|_| rng.random_range(0..n)).collect();

        let (acc_o, f1_o) = oracle::classification(&pred, &labels);
        let ranks: Vec<f64> = gallery.iter().zip(&targets).map(|(s, &t)| rank_of(s, t)).collect();
        let ranks_o: Vec<f64> = gallery.iter().zip(&targets).map(|(s, &t)| oracle::rank(s, t)).collect();
        let (r5, mrr) = ranking_metrics(&ranks, 5);
        let (r5_o, mrr_o) = oracle::recall_mrr(&ranks_o, 5);
        let pairs = [
            ("accuracy", accuracy(&pred, &labels), acc_o),
            ("macro_f1", macro_f1(&pred, &labels), f1_o),
            ("auc", roc_auc(&pos, &neg).unwrap_or(f64::NAN), oracle::auc(&pos, &neg).unwrap_or(f64::NAN)),
            ("ap", average_precision(&pos, &neg).unwrap_or(f64::NAN), oracle::average_precision(&pos, &neg).unwrap_or(f64::NAN)),
            ("recall@5", r5, r5_o),
            ("mrr", mrr, mrr_o),
        ];
        let mut ok = true;
        for (name, a, b) in pairs {
            let diff = (a - b).abs();
            if !(diff <= tol) {
                ok = false;
                report.failures.push(format!("case {case}: {name} {a} vs oracle {b}"));
            }
            if diff.is_finite() {
                report.max_abs_diff = report.max_abs_diff.max(diff);
            }
        }
        if ok {
            report.agreed += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        let (_, mrr) = ranking_metrics(&[1.0, 2.0, 4.0], 5);
        assert!((mrr - 1.75 / 3.0).abs() < 1e-12);
        let (r5, _) = ranking_metrics(&[6.0], 5);
        assert_eq!(r5, 0.0);
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert!(roc_auc(&[0.5], &[]).is_err());
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]), 1.0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5, 0.1], 1), 2.0);
    }

    #[test]
    fn oracle_agrees() {
        let r = metrics_oracle(100, 7, 1e-9);
        assert_eq!(r.agreed, 100, "{:?}", r.failures);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(pos in proptest::collection::vec(-5.0f64..5.0, 1..20), neg in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let a = roc_auc(&pos, &neg).unwrap();
            let f = |x: &f64| (x * 0.7).exp() + 3.0;
            let b = roc_auc(&pos.iter().map(f).collect::<Vec<_>>(), &neg.iter().map(f).collect::<Vec<_>>()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            let ap = average_precision(&pos, &neg).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }
}
