//! Label-skewed client partitions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::graph::MultimodalGraph;
use crate::error::{invalid, Result};
use crate::rng::{domain, stream};

const MAX_DRAWS: usize = 100;

/// Disjoint node sets, one per client, covering every node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    clients: Vec<Vec<usize>>,
}

impl ClientPartition {
    /// Checks the disjoint-cover invariant over `num_nodes` nodes.
    pub fn new(mut clients: Vec<Vec<usize>>, num_nodes: usize) -> Result<Self> {
        let mut owner = vec![false; num_nodes];
        for c in &mut clients {
            if c.is_empty() {
                return Err(invalid("every client needs at least one node"));
            }
            c.sort_unstable();
            for &i in c.iter() {
                if i >= num_nodes || owner[i] {
                    return Err(invalid(format!("node {i} is out of range or assigned twice")));
                }
                owner[i] = true;
            }
        }
        if owner.iter().any(|o| !o) {
            return Err(invalid("partition does not cover every node"));
        }
        Ok(Self { clients })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.clients[k]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    /// Client index owning each node.
    pub fn owners(&self, num_nodes: usize) -> Vec<usize> {
        let mut out = vec![0; num_nodes];
        for (k, c) in self.clients.iter().enumerate() {
            for &i in c {
                out[i] = k;
            }
        }
        out
    }
}

fn dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Splits nodes over `k` clients: for every label class the class members
/// are shared out by proportions drawn from `Dirichlet(alpha · 1_k)`.
///
/// Draws that leave a client empty are redrawn. After repeated failures
/// (tiny `alpha`) the largest client donates nodes to the empty ones.
pub fn partition_dirichlet(graph: &MultimodalGraph, k: usize, alpha: f64, seed: u64) -> Result<ClientPartition> {
    let n = graph.num_nodes;
    if k == 0 {
        return Err(invalid("need at least one client"));
    }
    if k > n {
        return Err(invalid(format!("{k} clients for only {n} nodes")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    let labels = graph.labels.clone().unwrap_or_else(|| vec![0; n]);
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }

    let mut rng = stream(&[domain::PARTITION, seed]);
    let mut clients = vec![Vec::new(); k];
    for _ in 0..MAX_DRAWS {
        clients = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(k, alpha, &mut rng);
            let mut start = 0;
            let mut cum = 0.0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == k { members.len() } else { ((cum * members.len() as f64).round() as usize).min(members.len()) };
                let end = end.max(start);
                clients[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| !c.is_empty()) {
            return ClientPartition::new(clients, n);
        }
    }
    // Repair: hand one node at a time from the largest client to each
    // empty one.
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..k).max_by_key(|&c| (clients[c].len(), std::cmp::Reverse(c))).expect("k ≥ 1");
        let node = clients[donor].pop().expect("donor has nodes since k ≤ n");
        clients[empty].push(node);
    }
    ClientPartition::new(clients, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::sbm::{generate_sbm_multimodal, SbmConfig};

    fn graph() -> MultimodalGraph {
        let cfg = SbmConfig { blocks: 4, nodes_per_block: 25, d_img: 2, d_txt: 2, ..Default::default() };
        generate_sbm_multimodal(&cfg, 5).unwrap()
    }

    #[test]
    fn single_client_owns_everything() {
        let g = graph();
        let p = partition_dirichlet(&g, 1, 0.5, 0).unwrap();
        assert_eq!(p.client(0), (0..g.num_nodes).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn more_clients_than_nodes_rejected() {
        let g = graph();
        assert!(partition_dirichlet(&g, g.num_nodes + 1, 0.5, 0).is_err());
        assert!(partition_dirichlet(&g, 2, 0.0, 0).is_err());
    }

    #[test]
    fn tiny_alpha_still_covers() {
        let g = graph();
        for seed in 0..5 {
            let p = partition_dirichlet(&g, 10, 0.01, seed).unwrap();
            assert!(p.clients().iter().all(|c| !c.is_empty()));
        }
    }

    #[test]
    fn constructor_rejects_overlap() {
        assert!(ClientPartition::new(vec![vec![0, 1], vec![1]], 2).is_err());
        assert!(ClientPartition::new(vec![vec![0]], 2).is_err());
    }
}
