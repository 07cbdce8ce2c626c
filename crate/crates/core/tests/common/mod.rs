#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pilm::blocks::{build_block_system, BlockLayout, BlockSystem};
use pilm::gen::{generate, AngleUnit, GenConfig};
use pilm::partition::{
    build_variable_graph, induce_residual_partition, partition_variables, Partition, PointPartition,
};
use pilm::runtime::WorkerPool;
use pilm::sparse::CsrMatrix;
use pilm::Problem;

pub fn dense(m: &CsrMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.nrows(), m.ncols(), &m.to_dense())
}

pub fn dense_square(v: Vec<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, &v)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    let a = DVector::from_column_slice(a);
    let b = DVector::from_column_slice(b);
    (&a - &b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Generated instance with moderate standard deviations, so that every
/// quantity stays within a few orders of magnitude of 1.
pub fn desk_problem(n_hat: usize, seed: u64) -> Problem {
    let cfg = GenConfig {
        sigma_dist: 0.5,
        sigma_point_line: 0.5,
        sigma_angle: 0.05,
        angle_unit: AngleUnit::Radians,
        sigma_coord_loose: 1.0,
        sigma_coord_tight: 0.5,
        ..GenConfig::new(n_hat, seed)
    };
    generate(&cfg).unwrap()
}

pub struct Instance {
    pub problem: Problem,
    pub x: Vec<f64>,
    pub part: Partition,
    pub bs: BlockSystem,
    pub j: DMatrix<f64>,
    pub r: Vec<f64>,
}

pub fn partitioned(p: &Problem, k: usize, seed: u64) -> Partition {
    let pp = partition_variables(&build_variable_graph(p), k, seed).unwrap();
    induce_residual_partition(p, &pp).unwrap()
}

pub fn instance_with(p: Problem, x: Vec<f64>, part: Partition, pool: &WorkerPool) -> Instance {
    let jac = p.jacobian(&x).unwrap();
    let r = p.residuals(&x).unwrap();
    let layout = Arc::new(BlockLayout::from_partition(&part));
    let bs = build_block_system(&jac, &r, &part, layout, pool).unwrap();
    Instance {
        j: dense(&jac),
        problem: p,
        x,
        part,
        bs,
        r,
    }
}

pub fn instance(p: Problem, k: usize, seed: u64, pool: &WorkerPool) -> Instance {
    let x = p.initial_guess();
    let part = partitioned(&p, k, seed);
    instance_with(p, x, part, pool)
}

/// Partition from an explicit point-to-block map.
pub fn explicit_partition(p: &Problem, block_of: Vec<usize>) -> Partition {
    let k = block_of.iter().max().map_or(1, |m| m + 1);
    induce_residual_partition(p, &PointPartition { k, block_of }).unwrap()
}

/// `(JᵀJ + µI)⁻¹(−g)` by dense Cholesky.
pub fn dense_lm_direction(j: &DMatrix<f64>, g: &[f64], mu: f64) -> Vec<f64> {
    let n = j.ncols();
    let a = j.transpose() * j + DMatrix::identity(n, n) * mu;
    let chol = a.cholesky().expect("J'J + mu I is positive definite");
    let d = chol.solve(&(-DVector::from_column_slice(g)));
    d.as_slice().to_vec()
}
