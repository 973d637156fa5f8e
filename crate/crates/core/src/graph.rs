//! Markov network over one transition block and the intimate-neighbor check
//! used by the sparse-mixing assumption.
//!
//! Nodes are `u = (z_{t-1}, x_{t-1}, z_t, x_t)`, each block of size `n`, in
//! that order. Latent transitions and instantaneous latent effects are taken
//! as dense; the mixing edges `z_i -> x_j` come from the mask.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    ZPrev,
    XPrev,
    ZCurr,
    XCurr,
}

fn node_index(n: usize, block: Block, i: usize) -> usize {
    let offset = match block {
        Block::ZPrev => 0,
        Block::XPrev => 1,
        Block::ZCurr => 2,
        Block::XCurr => 3,
    };
    offset * n + i
}

/// Directed acyclic graph over the `4n` transition nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionDag {
    n: usize,
    /// `parents[v]` lists the parents of node `v`.
    parents: Vec<Vec<usize>>,
}

impl TransitionDag {
    pub fn node(&self, block: Block, i: usize) -> usize {
        node_index(self.n, block, i)
    }

    pub fn num_nodes(&self) -> usize {
        4 * self.n
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn build(mask: &[bool], n: usize, obs_edges: bool) -> Result<Self> {
        if mask.len() != n * n {
            return Err(dim_err("check_sparse_mixing_assumption", alloc::format!("{} mask entries", n * n), alloc::format!("{}", mask.len())));
        }
        let nd = |b, i| node_index(n, b, i);
        let mut dag = Self {
            n,
            parents: vec![Vec::new(); 4 * n],
        };
        for i in 0..n {
            let zc = nd(Block::ZCurr, i);
            let zp = nd(Block::ZPrev, i);
            for j in 0..n {
                dag.parents[zc].push(nd(Block::ZPrev, j));
            }
            for j in 0..i {
                dag.parents[zc].push(nd(Block::ZCurr, j));
                dag.parents[zp].push(nd(Block::ZPrev, j));
            }
        }
        for j in 0..n {
            let xc = nd(Block::XCurr, j);
            let xp = nd(Block::XPrev, j);
            for i in 0..n {
                if mask[i * n + j] {
                    dag.parents[xc].push(nd(Block::ZCurr, i));
                    dag.parents[xp].push(nd(Block::ZPrev, i));
                }
            }
            if obs_edges {
                for k in 0..n {
                    dag.parents[xc].push(nd(Block::XPrev, k));
                }
            }
        }
        Ok(dag)
    }

    /// Undirected moral graph: parent-child edges plus edges between every
    /// pair of co-parents.
    pub fn moralize(&self) -> Vec<Vec<bool>> {
        let m = self.num_nodes();
        let mut adj = vec![vec![false; m]; m];
        for (child, ps) in self.parents.iter().enumerate() {
            for (a, &p) in ps.iter().enumerate() {
                adj[p][child] = true;
                adj[child][p] = true;
                for &q in &ps[a + 1..] {
                    adj[p][q] = true;
                    adj[q][p] = true;
                }
            }
        }
        adj
    }
}

/// Neighbors of `v` that are adjacent to every other neighbor of `v`.
pub fn intimate_neighbors(adj: &[Vec<bool>], v: usize) -> Vec<usize> {
    let nbrs: Vec<usize> = (0..adj.len()).filter(|&u| u != v && adj[v][u]).collect();
    nbrs.iter()
        .copied()
        .filter(|&u| nbrs.iter().all(|&w| w == u || adj[u][w]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMixingReport {
    /// Intimate neighbor set of each `z_{t,i}`, as node indices of the DAG.
    pub intimate_sets: Vec<Vec<usize>>,
    pub holds: bool,
    /// Set when the check is vacuous (a single latent).
    pub warning: Option<String>,
}

/// Checks that every current latent has an empty intimate neighbor set.
/// `mask[i * n + j]` is true iff `z_{t,i} -> x_{t,j}`.
pub fn check_sparse_mixing_assumption(mask: &[bool], n: usize, obs_edges: bool) -> Result<SparseMixingReport> {
    let dag = TransitionDag::build(mask, n, obs_edges)?;
    let adj = dag.moralize();
    let intimate_sets: Vec<Vec<usize>> = (0..n).map(|i| intimate_neighbors(&adj, dag.node(Block::ZCurr, i))).collect();
    if n == 1 {
        return Ok(SparseMixingReport {
            intimate_sets,
            holds: true,
            warning: Some("single latent: the assumption is vacuous".into()),
        });
    }
    let holds = intimate_sets.iter().all(Vec::is_empty);
    Ok(SparseMixingReport {
        intimate_sets,
        holds,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diagonal(n: usize) -> Vec<bool> {
        (0..n * n).map(|k| k / n == k % n).collect()
    }

    #[test]
    fn diagonal_mask_holds() {
        for n in 2..6 {
            for obs in [true, false] {
                let r = check_sparse_mixing_assumption(&diagonal(n), n, obs).unwrap();
                assert!(r.holds, "n={n} obs={obs}");
            }
        }
    }

    #[test]
    fn full_mask_fails() {
        let r = check_sparse_mixing_assumption(&[true; 4], 2, true).unwrap();
        assert!(!r.holds);
        assert!(r.intimate_sets.iter().any(|s| !s.is_empty()));
    }

    #[test]
    fn single_latent_is_degenerate() {
        let r = check_sparse_mixing_assumption(&[true], 1, true).unwrap();
        assert!(r.holds);
        assert!(r.warning.is_some());
    }

    #[test]
    fn mask_size_checked() {
        assert!(check_sparse_mixing_assumption(&[true; 3], 2, true).is_err());
    }
}
