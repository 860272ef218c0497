//! Stochastic block model graphs with two linked feature modalities.
//!
//! Each block owns a latent center. The image-like and text-like features of
//! a node are fixed random linear projections of its block's center plus
//! independent Gaussian noise, so either modality can be predicted from the
//! other through the shared latent.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{Mask, Modality, MultimodalGraph};
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::rng::{domain, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d_img: usize,
    pub d_txt: usize,
    pub latent_dim: usize,
    pub noise: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            nodes_per_block: 50,
            p_in: 0.1,
            p_out: 0.01,
            d_img: 512,
            d_txt: 768,
            latent_dim: 16,
            noise: 2.5,
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(invalid("blocks must be ≥ 1"));
        }
        if self.nodes_per_block < 2 {
            return Err(invalid(format!("nodes_per_block must be ≥ 2, got {}", self.nodes_per_block)));
        }
        if !(0.0..=1.0).contains(&self.p_out) || !(0.0..=1.0).contains(&self.p_in) || self.p_out > self.p_in {
            return Err(invalid(format!("need 0 ≤ p_out ≤ p_in ≤ 1, got p_in={} p_out={}", self.p_in, self.p_out)));
        }
        if self.d_img == 0 || self.d_txt == 0 || self.latent_dim == 0 {
            return Err(invalid("feature and latent dims must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(invalid(format!("noise must be a finite value ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Draws an SBM graph with image-like (`d_img`) and text-like (`d_txt`)
/// features. Labels are block ids and every node is paired with itself for
/// cross-modal retrieval. The natural mask starts all-visible.
pub fn generate_sbm_multimodal(cfg: &SbmConfig, seed: u64) -> Result<MultimodalGraph> {
    cfg.validate()?;
    let mut rng = stream(&[domain::SBM, seed]);
    let n = cfg.blocks * cfg.nodes_per_block;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.nodes_per_block).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let centers = gaussian(cfg.blocks, cfg.latent_dim, 1.0, &mut rng);
    let proj_std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let mut modalities = Vec::with_capacity(2);
    for (name, dim) in [("image", cfg.d_img), ("text", cfg.d_txt)] {
        let proj = gaussian(cfg.latent_dim, dim, proj_std, &mut rng);
        let signal = centers.matmul(&proj);
        let mut features = Tensor::zeros(n, dim);
        for i in 0..n {
            let row = features.row_slice_mut(i);
            row.copy_from_slice(signal.row_slice(labels[i]));
            if cfg.noise > 0.0 {
                for x in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += cfg.noise * z;
                }
            }
        }
        modalities.push(Modality { name: name.to_string(), features });
    }

    Ok(MultimodalGraph {
        num_nodes: n,
        modalities,
        edges,
        labels: Some(labels),
        natural_mask: Mask::filled(n, 2, true),
        pairs: Some((0..n).map(|i| (i, i)).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn components(n: usize, adj: &[Vec<usize>]) -> usize {
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn two_cliques() {
        let cfg = SbmConfig { blocks: 2, nodes_per_block: 6, p_in: 1.0, p_out: 0.0, d_img: 4, d_txt: 3, ..Default::default() };
        let g = generate_sbm_multimodal(&cfg, 1).unwrap();
        assert_eq!(components(g.num_nodes, &g.adjacency()), 2);
        assert_eq!(g.edges.len(), 2 * 15);
        g.validate().unwrap();
    }

    #[test]
    fn noiseless_features_are_block_constant() {
        let cfg = SbmConfig { blocks: 3, nodes_per_block: 4, noise: 0.0, d_img: 8, d_txt: 5, ..Default::default() };
        let g = generate_sbm_multimodal(&cfg, 9).unwrap();
        let img = &g.modalities[0].features;
        for i in 0..g.num_nodes {
            let first = (i / 4) * 4;
            assert_eq!(img.row_slice(i), img.row_slice(first));
        }
    }

    #[test]
    fn tiny_blocks_rejected() {
        let cfg = SbmConfig { nodes_per_block: 1, ..Default::default() };
        assert!(generate_sbm_multimodal(&cfg, 0).is_err());
        let cfg = SbmConfig { p_in: 0.1, p_out: 0.2, ..Default::default() };
        assert!(generate_sbm_multimodal(&cfg, 0).is_err());
    }
}
