//! Variable partitioning: the point-coupling graph, a balanced K-way split of
//! the points, the induced split of the residuals into block-local sets `E_s`
//! and the coupling set `Ê`, and the block-contiguous reordering of a problem.

mod multilevel;
mod reorder;

pub(crate) use multilevel::{bisect, Graph};
pub use reorder::{reorder, Reordered, Reordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Problem;

/// Default balance tolerance: no block may exceed `(1 + τ) · n_points / K`.
pub const DEFAULT_BALANCE_TOL: f64 = 0.05;

/// Undirected point graph; edge weight counts the measurements shared by both endpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariableGraph {
    xadj: Vec<usize>,
    adj: Vec<usize>,
    weights: Vec<u64>,
}

impl VariableGraph {
    pub fn n_vertices(&self) -> usize {
        self.xadj.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.adj.len() / 2
    }

    /// `(neighbor, weight)` pairs of `v`, sorted by neighbor.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let span = self.xadj[v]..self.xadj[v + 1];
        self.adj[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn weight(&self, a: usize, b: usize) -> u64 {
        self.neighbors(a).find(|&(u, _)| u == b).map_or(0, |(_, w)| w)
    }

    /// Total weight of edges whose endpoints lie in different blocks.
    pub fn edge_cut(&self, block_of: &[usize]) -> u64 {
        self.as_graph().edge_cut(block_of)
    }

    /// Builds a graph from `(a, b)` pairs with `a != b`; repeated pairs add weight.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut both: Vec<(usize, usize)> = Vec::new();
        for (a, b) in pairs {
            debug_assert_ne!(a, b, "self loop");
            both.push((a, b));
            both.push((b, a));
        }
        both.sort_unstable();
        let mut xadj = vec![0usize; n + 1];
        let mut adj: Vec<usize> = Vec::new();
        let mut weights: Vec<u64> = Vec::new();
        let mut prev: Option<(usize, usize)> = None;
        for (a, b) in both {
            if prev == Some((a, b)) {
                *weights.last_mut().unwrap() += 1;
            } else {
                adj.push(b);
                weights.push(1);
                xadj[a + 1] += 1;
                prev = Some((a, b));
            }
        }
        for v in 0..n {
            xadj[v + 1] += xadj[v];
        }
        Self { xadj, adj, weights }
    }

    pub(crate) fn as_graph(&self) -> Graph {
        Graph {
            xadj: self.xadj.clone(),
            adj: self.adj.clone(),
            ewgt: self.weights.clone(),
            vwgt: vec![1; self.n_vertices()],
        }
    }
}

/// One vertex per point, one weighted edge per pair of points sharing a measurement.
pub fn build_variable_graph(p: &Problem) -> VariableGraph {
    let mut pairs = Vec::new();
    for m in p.measurements() {
        let pts = m.points();
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                pairs.push((pts[a], pts[b]));
            }
        }
    }
    VariableGraph::from_pairs(p.n_points(), pairs)
}

/// Largest block size permitted for `n` points in `k` blocks.
pub fn max_block_size(n: usize, k: usize, tol: f64) -> usize {
    n.div_ceil(k).max(((1.0 + tol) * n as f64 / k as f64).floor() as usize)
}

/// Assignment of points to blocks `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PointPartition {
    pub k: usize,
    pub block_of: Vec<usize>,
}

/// Balanced K-way split of the graph's vertices that locally minimises the edge cut.
pub fn partition_variables(g: &VariableGraph, k: usize, seed: u64) -> Result<PointPartition> {
    partition_variables_with_tol(g, k, seed, DEFAULT_BALANCE_TOL)
}

pub fn partition_variables_with_tol(g: &VariableGraph, k: usize, seed: u64, tol: f64) -> Result<PointPartition> {
    let n = g.n_vertices();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "K = {k} exceeds the number of points ({n})"
        )));
    }
    if k == 1 {
        return Ok(PointPartition {
            k,
            block_of: vec![0; n],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = max_block_size(n, k, tol);
    let block_of = multilevel::kway(&g.as_graph(), k, tol, cap, &mut rng);
    Ok(PointPartition { k, block_of })
}

/// Variable blocks together with the induced residual partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    k: usize,
    block_of: Vec<usize>,
    points_per_block: Vec<usize>,
    local: Vec<Vec<usize>>,
    coupling: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

/// Sorted, deduplicated blocks touched by a measurement.
fn blocks_of(pts: &[usize], block_of: &[usize]) -> ([usize; 3], usize) {
    let mut b = [usize::MAX; 3];
    let mut len = 0;
    for &p in pts {
        let blk = block_of[p];
        if !b[..len].contains(&blk) {
            b[len] = blk;
            len += 1;
        }
    }
    b[..len].sort_unstable();
    (b, len)
}

/// Fills `E_s`, `Ê` and the neighbour sets `N_i` from a point assignment.
///
/// Measurement `j` lands in `E_s` iff all its points are in block `s`;
/// otherwise it is a coupling residual.
pub fn induce_residual_partition(p: &Problem, assignment: &PointPartition) -> Result<Partition> {
    let k = assignment.k;
    let block_of = &assignment.block_of;
    if block_of.len() != p.n_points() {
        return Err(Error::InvalidArgument(format!(
            "assignment covers {} points, problem has {}",
            block_of.len(),
            p.n_points()
        )));
    }
    if let Some(&b) = block_of.iter().find(|&&b| b >= k) {
        return Err(Error::InvalidArgument(format!(
            "block index {b} out of range for K = {k}"
        )));
    }
    let mut points_per_block = vec![0; k];
    for &b in block_of {
        points_per_block[b] += 1;
    }
    let mut local = vec![Vec::new(); k];
    let mut coupling = Vec::new();
    let mut neighbors = vec![Vec::new(); k];
    for (j, m) in p.measurements().iter().enumerate() {
        let (blocks, len) = blocks_of(&m.points(), block_of);
        if len == 1 {
            local[blocks[0]].push(j);
        } else {
            coupling.push(j);
            for a in 0..len {
                for b in 0..len {
                    if a != b {
                        neighbors[blocks[a]].push(blocks[b]);
                    }
                }
            }
        }
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
        nb.dedup();
    }
    Ok(Partition {
        k,
        block_of: block_of.clone(),
        points_per_block,
        local,
        coupling,
        neighbors,
    })
}

impl Partition {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    /// `E_s`: residual indices depending only on block `s`.
    pub fn local_rows(&self, s: usize) -> &[usize] {
        &self.local[s]
    }

    /// `Ê`: residual indices coupling two or more blocks.
    pub fn coupling_rows(&self) -> &[usize] {
        &self.coupling
    }

    /// `N_i`: blocks sharing at least one coupling residual with block `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn points_in_block(&self, s: usize) -> usize {
        self.points_per_block[s]
    }

    /// `n_s`, the number of scalar variables in each block.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.points_per_block.iter().map(|&c| 2 * c).collect()
    }

    pub fn n_residuals(&self) -> usize {
        self.coupling.len() + self.local.iter().map(Vec::len).sum::<usize>()
    }

    /// `|Ê| / (m - |Ê|)`; infinite when every residual couples blocks.
    pub fn separability_ratio(&self) -> f64 {
        let c = self.coupling.len();
        let rest = self.n_residuals() - c;
        if rest == 0 {
            f64::INFINITY
        } else {
            c as f64 / rest as f64
        }
    }

    pub fn is_separable(&self) -> bool {
        self.coupling.is_empty()
    }

    pub fn stats(&self) -> PartitionStats {
        PartitionStats {
            k: self.k,
            block_sizes: self.block_sizes(),
            coupling_residuals: self.coupling.len(),
            residuals: self.n_residuals(),
            separability_ratio: self.separability_ratio(),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct PartitionStats {
    pub k: usize,
    pub block_sizes: Vec<usize>,
    pub coupling_residuals: usize,
    pub residuals: usize,
    pub separability_ratio: f64,
}
