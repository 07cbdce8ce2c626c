use crate::error::Result;
use crate::model::Problem;

use super::{induce_residual_partition, Partition, PointPartition};

/// Point and residual permutations between an original problem and its
/// block-contiguous reordering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reordering {
    /// `point_order[new] = old`.
    point_order: Vec<usize>,
    /// `point_rank[old] = new`.
    point_rank: Vec<usize>,
    /// `measurement_order[new] = old`.
    measurement_order: Vec<usize>,
}

impl Reordering {
    pub fn point_order(&self) -> &[usize] {
        &self.point_order
    }

    pub fn point_rank(&self) -> &[usize] {
        &self.point_rank
    }

    pub fn measurement_order(&self) -> &[usize] {
        &self.measurement_order
    }

    pub fn is_identity(&self) -> bool {
        self.point_order.iter().enumerate().all(|(a, &b)| a == b)
            && self.measurement_order.iter().enumerate().all(|(a, &b)| a == b)
    }

    /// Original coordinate vector → reordered layout.
    pub fn to_reordered(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for &old in &self.point_order {
            out.push(x[2 * old]);
            out.push(x[2 * old + 1]);
        }
        out
    }

    /// Reordered coordinate vector → original layout.
    pub fn to_original(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (new, &old) in self.point_order.iter().enumerate() {
            out[2 * old] = x[2 * new];
            out[2 * old + 1] = x[2 * new + 1];
        }
        out
    }

    /// Reordered residual vector → original measurement order.
    pub fn residuals_to_original(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r.len()];
        for (new, &old) in self.measurement_order.iter().enumerate() {
            out[old] = r[new];
        }
        out
    }
}

/// A problem whose points are grouped block by block and whose residuals are
/// ordered `E_1, …, E_K, Ê`, with the partition expressed in the new indices.
#[derive(Clone, Debug)]
pub struct Reordered {
    pub problem: Problem,
    pub partition: Partition,
    pub permutation: Reordering,
}

/// Groups variables by block (stable within a block) and residuals as
/// `E_1, …, E_K, Ê` (stable within each set).
pub fn reorder(p: &Problem, part: &Partition) -> Result<Reordered> {
    let k = part.k();
    let mut point_order = Vec::with_capacity(p.n_points());
    for s in 0..k {
        point_order.extend((0..p.n_points()).filter(|&pt| part.block_of()[pt] == s));
    }
    let mut point_rank = vec![0; p.n_points()];
    for (new, &old) in point_order.iter().enumerate() {
        point_rank[old] = new;
    }
    let mut measurement_order: Vec<usize> = Vec::with_capacity(p.m());
    for s in 0..k {
        measurement_order.extend_from_slice(part.local_rows(s));
    }
    measurement_order.extend_from_slice(part.coupling_rows());

    let measurements = measurement_order
        .iter()
        .map(|&j| p.measurements()[j].map_points(|pt| point_rank[pt]))
        .collect();
    let permutation = Reordering {
        point_order,
        point_rank,
        measurement_order,
    };
    let ground_truth = p.ground_truth().map(|gt| permutation.to_reordered(gt));
    let problem = Problem::new(p.n_points(), measurements, ground_truth)?;
    let block_of = permutation
        .point_order
        .iter()
        .map(|&old| part.block_of()[old])
        .collect();
    let partition = induce_residual_partition(&problem, &PointPartition { k, block_of })?;
    Ok(Reordered {
        problem,
        partition,
        permutation,
    })
}
