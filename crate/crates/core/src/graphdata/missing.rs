//! Natural missingness injection, artificial training masks and missing
//! ratios.
//!
//! Every draw is keyed by `(seed, node key, modality)`, so a mask does not
//! depend on node order: relabeling the nodes and carrying their keys along
//! permutes the mask rows and nothing else.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::Mask;
use super::partition::ClientPartition;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::rng::{domain, keyed_uniform, mix, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingMode {
    /// Each `(node, modality)` cell goes missing independently.
    #[default]
    NodeLevel,
    /// `⌈η·K⌉` clients each lose one whole modality.
    ClientLevel,
    /// Both of the above.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingnessConfig {
    /// Target missing rate η in `[0, 1)`.
    pub rate: f64,
    pub mode: MissingMode,
    pub seed: u64,
    /// Per-client node-level rates overriding `rate`, indexed by client.
    pub client_rates: Option<Vec<f64>>,
}

impl Default for MissingnessConfig {
    fn default() -> Self {
        Self { rate: 0.3, mode: MissingMode::NodeLevel, seed: 0, client_rates: None }
    }
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..1.0).contains(&r);
        if !ok(self.rate) {
            return Err(invalid(format!("missing rate must lie in [0, 1), got {}", self.rate)));
        }
        if let Some(rates) = &self.client_rates {
            if let Some(r) = rates.iter().find(|&&r| !ok(r)) {
                return Err(invalid(format!("client missing rate must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// Draws the natural mask `r` for a graph of `num_nodes` nodes and
/// `modalities` modalities, keying node `i` by `i`.
pub fn apply_natural_missingness(
    num_nodes: usize,
    modalities: usize,
    partition: Option<&ClientPartition>,
    cfg: &MissingnessConfig,
) -> Result<Mask> {
    let keys: Vec<u64> = (0..num_nodes as u64).collect();
    apply_natural_missingness_keyed(&keys, modalities, partition, cfg)
}

/// As [`apply_natural_missingness`], with an explicit stable key per node.
///
/// Client-level and per-client settings need `partition`; it indexes rows of
/// the returned mask.
pub fn apply_natural_missingness_keyed(
    keys: &[u64],
    modalities: usize,
    partition: Option<&ClientPartition>,
    cfg: &MissingnessConfig,
) -> Result<Mask> {
    cfg.validate()?;
    let n = keys.len();
    let mut mask = Mask::filled(n, modalities, true);
    let needs_partition = cfg.mode != MissingMode::NodeLevel || cfg.client_rates.is_some();
    let partition = match partition {
        Some(p) => Some(p),
        None if needs_partition => return Err(invalid("client-level missingness needs a client partition")),
        None => None,
    };
    if let (Some(p), Some(rates)) = (partition, &cfg.client_rates) {
        if rates.len() != p.num_clients() {
            return Err(invalid(format!("{} client rates for {} clients", rates.len(), p.num_clients())));
        }
    }

    if cfg.mode != MissingMode::ClientLevel {
        let mut rate = vec![cfg.rate; n];
        if let (Some(p), Some(rates)) = (partition, &cfg.client_rates) {
            for (k, nodes) in p.clients().iter().enumerate() {
                for &i in nodes {
                    rate[i] = rates[k];
                }
            }
        }
        for (i, &key) in keys.iter().enumerate() {
            for m in 0..modalities {
                if keyed_uniform(&[domain::NATURAL_MASK, cfg.seed, key, m as u64]) < rate[i] {
                    mask.set(i, m, false);
                }
            }
        }
    }

    if cfg.mode != MissingMode::NodeLevel && modalities > 1 {
        let p = partition.expect("checked above");
        let k = p.num_clients();
        let affected = ((cfg.rate * k as f64).ceil() as usize).min(k);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut stream(&[domain::NATURAL_MASK, cfg.seed, u64::MAX]));
        for &c in &order[..affected] {
            let dropped = (keyed_uniform(&[domain::NATURAL_MASK, cfg.seed, u64::MAX, c as u64]) * modalities as f64) as usize;
            for &i in p.client(c) {
                mask.set(i, dropped.min(modalities - 1), false);
            }
        }
    }
    Ok(mask)
}

/// Fraction of missing cells.
pub fn missing_fraction(mask: &Mask) -> f64 {
    let total = mask.nodes() * mask.modalities();
    if total == 0 {
        0.0
    } else {
        1.0 - mask.count() as f64 / total as f64
    }
}

/// Natural mask `r`, artificial keep-mask `r̄`, effective visibility
/// `r̃ = r·r̄` and reconstruction indicator `Δ = r − r̃`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub natural: Mask,
    pub keep: Mask,
    pub effective: Mask,
    pub recon: Mask,
}

impl MaskSet {
    /// Derives `r̃` and `Δ` from `r` and `r̄`.
    pub fn new(natural: Mask, keep: Mask) -> Result<Self> {
        if natural.nodes() != keep.nodes() || natural.modalities() != keep.modalities() {
            return Err(invalid("natural and keep masks differ in shape"));
        }
        let mut effective = natural.clone();
        let mut recon = Mask::filled(natural.nodes(), natural.modalities(), false);
        for i in 0..natural.nodes() {
            for m in 0..natural.modalities() {
                let r = natural.get(i, m);
                let e = r && keep.get(i, m);
                effective.set(i, m, e);
                recon.set(i, m, r && !e);
            }
        }
        Ok(Self { natural, keep, effective, recon })
    }

    /// No artificial masking: `r̃ = r`, `Δ = 0`.
    pub fn unmasked(natural: Mask) -> Self {
        let keep = Mask::filled(natural.nodes(), natural.modalities(), true);
        Self::new(natural, keep).expect("shapes agree")
    }

    pub fn nodes(&self) -> usize {
        self.natural.nodes()
    }

    pub fn modalities(&self) -> usize {
        self.natural.modalities()
    }
}

/// Hides each observed cell with probability `p_mask`, keying node `i` by `i`.
pub fn sample_artificial_mask(r: &Mask, p_mask: f64, seed: u64) -> Result<MaskSet> {
    let keys: Vec<u64> = (0..r.nodes() as u64).collect();
    sample_artificial_mask_keyed(r, p_mask, seed, &keys)
}

/// As [`sample_artificial_mask`], with an explicit stable key per node.
/// Naturally missing cells keep `r̄ = 1`.
pub fn sample_artificial_mask_keyed(r: &Mask, p_mask: f64, seed: u64, keys: &[u64]) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&p_mask) {
        return Err(invalid(format!("p_mask must lie in [0, 1), got {p_mask}")));
    }
    if keys.len() != r.nodes() {
        return Err(invalid("one key per node required"));
    }
    let mut keep = Mask::filled(r.nodes(), r.modalities(), true);
    for (i, &key) in keys.iter().enumerate() {
        for m in 0..r.modalities() {
            if r.get(i, m) && keyed_uniform(&[domain::ARTIFICIAL_MASK, seed, key, m as u64]) < p_mask {
                keep.set(i, m, false);
            }
        }
    }
    MaskSet::new(r.clone(), keep)
}

/// `ρ_i = (M − Σ_m mask_i^(m)) / M` for every node.
pub fn node_missing_ratios(mask: &Mask) -> Vec<f64> {
    let m = mask.modalities().max(1) as f64;
    (0..mask.nodes()).map(|i| mask.row(i).iter().filter(|&&b| !b).count() as f64 / m).collect()
}

/// Node ratios `ρ_i` from the effective mask and the client ratio `ρ_k` as
/// their mean over each client's nodes.
pub fn missing_ratios(masks: &MaskSet, partition: &ClientPartition) -> (Vec<f64>, Vec<f64>) {
    let node = node_missing_ratios(&masks.effective);
    let client = partition
        .clients()
        .iter()
        .map(|c| c.iter().map(|&i| node[i]).sum::<f64>() / c.len() as f64)
        .collect();
    (node, client)
}

/// `[nodes × 1]` column of `ρ_i`.
pub fn ratio_column(mask: &Mask) -> Tensor {
    Tensor::col(&node_missing_ratios(mask))
}

/// Seed of the artificial mask for a client epoch.
pub fn epoch_mask_seed(global: u64, client: usize, round: usize, epoch: usize) -> u64 {
    mix(&[global, client as u64, round as u64, epoch as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mask_truth_table() {
        // (r, r̄) → (r̃, Δ)
        let table = [
            (false, false, false, false),
            (false, true, false, false),
            (true, false, false, true),
            (true, true, true, false),
        ];
        for (r, keep, eff, delta) in table {
            let s = MaskSet::new(Mask::from_rows(&[vec![r]]), Mask::from_rows(&[vec![keep]])).unwrap();
            assert_eq!((s.effective.get(0, 0), s.recon.get(0, 0)), (eff, delta), "r={r} keep={keep}");
        }
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let cfg = MissingnessConfig { rate: 0.0, ..Default::default() };
        let m = apply_natural_missingness(50, 2, None, &cfg).unwrap();
        assert_eq!(m.count(), 100);
    }

    #[test]
    fn node_level_fraction_near_target() {
        let cfg = MissingnessConfig { rate: 0.3, seed: 11, ..Default::default() };
        let m = apply_natural_missingness(1000, 2, None, &cfg).unwrap();
        assert!((missing_fraction(&m) - 0.3).abs() < 0.03, "{}", missing_fraction(&m));
    }

    #[test]
    fn client_level_drops_one_modality() {
        let p = ClientPartition::new(vec![vec![0, 1], vec![2, 3], vec![4, 5]], 6).unwrap();
        let cfg = MissingnessConfig { rate: 0.5, mode: MissingMode::ClientLevel, ..Default::default() };
        let m = apply_natural_missingness(6, 2, Some(&p), &cfg).unwrap();
        // ⌈0.5·3⌉ = 2 clients × 2 nodes × 1 modality
        assert_eq!(m.count(), 12 - 4);
        for i in 0..6 {
            assert!(m.row(i).iter().any(|&b| b));
        }
        assert!(apply_natural_missingness(6, 2, None, &cfg).is_err());
    }

    #[test]
    fn rate_one_rejected() {
        let cfg = MissingnessConfig { rate: 1.0, ..Default::default() };
        assert!(apply_natural_missingness(5, 2, None, &cfg).is_err());
        assert!(sample_artificial_mask(&Mask::filled(2, 2, true), 1.0, 0).is_err());
    }

    #[test]
    fn ratio_examples() {
        let r = Mask::from_rows(&[vec![true, true], vec![true, false], vec![false, false]]);
        let s = MaskSet::unmasked(r);
        let p = ClientPartition::new(vec![vec![0, 1, 2]], 3).unwrap();
        let (node, client) = missing_ratios(&s, &p);
        assert_eq!(node, vec![0.0, 0.5, 1.0]);
        assert_eq!(client, vec![0.5]);
    }

    fn mask_strategy() -> impl Strategy<Value = Mask> {
        (1usize..12, 1usize..4).prop_flat_map(|(n, m)| {
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), m), n).prop_map(|rows| Mask::from_rows(&rows))
        })
    }

    proptest! {
        #[test]
        fn algebra_holds(r in mask_strategy(), p in 0.0f64..0.99, seed in any::<u64>()) {
            let s = sample_artificial_mask(&r, p, seed).unwrap();
            for i in 0..r.nodes() {
                for m in 0..r.modalities() {
                    let (rv, kv, ev, dv) = (s.natural.get(i, m), s.keep.get(i, m), s.effective.get(i, m), s.recon.get(i, m));
                    prop_assert_eq!(ev, rv && kv);
                    prop_assert_eq!(dv, rv && !ev);
                    if !rv {
                        prop_assert!(kv && !ev && !dv);
                    }
                }
            }
        }

        #[test]
        fn ratios_in_unit_interval(r in mask_strategy()) {
            for x in node_missing_ratios(&r) {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn masks_commute_with_relabeling(n in 2usize..20, seed in any::<u64>(), shift in 0usize..20) {
            let keys: Vec<u64> = (0..n as u64).map(|k| k * 7 + 3).collect();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let permuted: Vec<u64> = perm.iter().map(|&i| keys[i]).collect();
            let cfg = MissingnessConfig { rate: 0.4, seed, ..Default::default() };
            let a = apply_natural_missingness_keyed(&keys, 2, None, &cfg).unwrap();
            let b = apply_natural_missingness_keyed(&permuted, 2, None, &cfg).unwrap();
            prop_assert_eq!(b.clone(), a.select(&perm));
            let sa = sample_artificial_mask_keyed(&a, 0.3, seed, &keys).unwrap();
            let sb = sample_artificial_mask_keyed(&b, 0.3, seed, &permuted).unwrap();
            prop_assert_eq!(sb.keep, sa.keep.select(&perm));
        }
    }
}
