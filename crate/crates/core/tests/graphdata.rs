//! Statistical and structural properties of the synthetic graphs, the
//! client partitions and the missingness masks.

use fedmm::graphdata::{
    apply_natural_missingness, generate_sbm_multimodal, load_graph, partition_dirichlet, sample_artificial_mask, save_graph, ClientPartition, Mask,
    MissingMode, MissingnessConfig, SbmConfig,
};
use proptest::prelude::*;

fn sbm(blocks: usize, per_block: usize, p_in: f64, p_out: f64) -> SbmConfig {
    SbmConfig { blocks, nodes_per_block: per_block, p_in, p_out, d_img: 4, d_txt: 3, latent_dim: 2, noise: 0.5 }
}

#[test]
fn sbm_edge_densities_match_block_probabilities() {
    let cfg = sbm(4, 50, 0.3, 0.05);
    for seed in 0..10 {
        let g = generate_sbm_multimodal(&cfg, seed).unwrap();
        let labels = g.labels.as_ref().unwrap();
        let within = g.edges.iter().filter(|&&(u, v)| labels[u] == labels[v]).count() as f64;
        let across = g.edges.len() as f64 - within;
        let within_pairs = (4 * 50 * 49 / 2) as f64;
        let across_pairs = (200 * 199 / 2) as f64 - within_pairs;
        assert!((within / within_pairs - 0.3).abs() <= 0.05, "seed {seed}: within density {}", within / within_pairs);
        assert!((across / across_pairs - 0.05).abs() <= 0.05, "seed {seed}: across density {}", across / across_pairs);
    }
}

#[test]
fn large_alpha_gives_near_global_label_mix() {
    let g = generate_sbm_multimodal(&sbm(4, 250, 0.02, 0.002), 3).unwrap();
    let labels = g.labels.as_ref().unwrap();
    let part = partition_dirichlet(&g, 4, 1000.0, 7).unwrap();
    for client in part.clients() {
        let mut hist = [0.0; 4];
        for &i in client {
            hist[labels[i]] += 1.0 / client.len() as f64;
        }
        let tv: f64 = hist.iter().map(|p| (p - 0.25f64).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.1, "total variation {tv}");
    }
}

#[test]
fn graph_files_round_trip_through_disk() {
    let g = generate_sbm_multimodal(&sbm(2, 5, 0.5, 0.1), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    save_graph(&g, &path).unwrap();
    assert_eq!(load_graph(&path).unwrap(), g);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_cover_every_node_once(k in 1usize..6, alpha in 0.05f64..50.0, seed in 0u64..1000) {
        let g = generate_sbm_multimodal(&sbm(3, 6, 0.4, 0.1), seed).unwrap();
        let part = partition_dirichlet(&g, k, alpha, seed).unwrap();
        let mut seen = vec![0; g.num_nodes];
        for client in part.clients() {
            prop_assert!(!client.is_empty());
            for &i in client {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn hidden_cells_are_observed_cells(rate in 0.0f64..0.9, p_mask in 0.0f64..0.9, seed in 0u64..1000, node_level in any::<bool>()) {
        let mode = if node_level { MissingMode::NodeLevel } else { MissingMode::ClientLevel };
        let cfg = MissingnessConfig { rate, mode, seed, client_rates: None };
        let part = ClientPartition::new(vec![(0..8).collect(), (8..20).collect()], 20).unwrap();
        let natural: Mask = apply_natural_missingness(20, 2, Some(&part), &cfg).unwrap();
        let s = sample_artificial_mask(&natural, p_mask, seed).unwrap();
        for i in 0..20 {
            for m in 0..2 {
                prop_assert!(!s.recon.get(i, m) || natural.get(i, m));
                prop_assert_eq!(s.effective.get(i, m), natural.get(i, m) && s.keep.get(i, m));
                prop_assert!(!(s.effective.get(i, m) && s.recon.get(i, m)));
            }
        }
    }
}
