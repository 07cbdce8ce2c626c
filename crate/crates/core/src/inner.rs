//! Approximate solution of `(P + µI + B) d = −g` by the block fixed-point
//! iteration
//!
//! ```text
//! y¹     = −(P + µI)⁻¹ g
//! yˡ⁺¹   = −(P + µI)⁻¹ (g + B yˡ)
//! ```
//!
//! Each step is K independent block solves followed by a coupling mat-vec.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blocks::{block_norm, BlockSystem};
use crate::cholesky::{CholeskyFactor, SymbolicCholesky};
use crate::error::{Error, Result};
use crate::runtime::{Phase, WorkerPool};

/// How many inner iterations to run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum InnerIterations {
    /// Exactly `ell` iterations.
    Fixed { ell: usize },
    /// Stop at the first `l` with `‖rˡ‖ ≤ eta·‖g‖^exponent`, or after `max_ell`.
    Adaptive { eta: f64, exponent: f64, max_ell: usize },
}

impl Default for InnerIterations {
    fn default() -> Self {
        InnerIterations::Fixed { ell: 5 }
    }
}

impl InnerIterations {
    pub fn max_iterations(&self) -> usize {
        match *self {
            InnerIterations::Fixed { ell } => ell,
            InnerIterations::Adaptive { max_ell, .. } => max_ell,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InnerIterations::Fixed { ell } => ell >= 1,
            InnerIterations::Adaptive { eta, exponent, max_ell } => {
                max_ell >= 1 && eta > 0.0 && eta.is_finite() && exponent.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid inner iteration setting {self:?}"
            )))
        }
    }
}

/// Symbolic analyses of the block matrices, reused while their patterns
/// stay unchanged.
#[derive(Debug, Default, Clone)]
pub struct SymbolicCache {
    blocks: Vec<Option<Arc<SymbolicCholesky>>>,
}

impl SymbolicCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Factors of `P_i + µI` for every block.
#[derive(Debug, Clone)]
pub struct BlockFactorization {
    factors: Vec<CholeskyFactor>,
    mu: f64,
}

impl BlockFactorization {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn k(&self) -> usize {
        self.factors.len()
    }
}

/// Factors `P_i + µI` for every block on the worker pool.
pub fn factor_blocks(
    bs: &BlockSystem,
    mu: f64,
    pool: &WorkerPool,
    cache: &mut SymbolicCache,
) -> Result<BlockFactorization> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "damping must be positive and finite, got {mu}"
        )));
    }
    let k = bs.k();
    cache.blocks.resize(k, None);
    let cached = &cache.blocks;
    let out = pool.run_phase(Phase::Factor, k, |i| {
        let p = bs.p(i);
        let sym = match &cached[i] {
            Some(s) if s.matches(p) => Arc::clone(s),
            _ => Arc::new(SymbolicCholesky::analyze(p)),
        };
        let f = CholeskyFactor::factor(Arc::clone(&sym), p, mu).map_err(|e| Error::Numerical {
            block: i,
            reason: e.to_string(),
        })?;
        Ok((sym, f))
    })?;
    let mut factors = Vec::with_capacity(k);
    for (i, (sym, f)) in out.into_iter().enumerate() {
        cache.blocks[i] = Some(sym);
        factors.push(f);
    }
    Ok(BlockFactorization { factors, mu })
}

/// Solves `(P_i + µI) y_i = rhs_i`.
pub fn solve_block_rhs(fac: &BlockFactorization, i: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    let y = fac.factors[i].solve(rhs);
    if y.iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(Error::Numerical {
            block: i,
            reason: "non-finite block solution".into(),
        })
    }
}

/// `−(g_i + Σ_{j ∈ N_i} B_ij y_j)`.
pub fn coupling_rhs(bs: &BlockSystem, i: usize, y_prev: &[Vec<f64>]) -> Vec<f64> {
    let by = bs.apply_b_block(i, y_prev);
    neg_sum(bs.g(i), &by)
}

fn neg_sum(g: &[f64], by: &[f64]) -> Vec<f64> {
    g.iter().zip(by).map(|(g, b)| -(g + b)).collect()
}

/// Outcome of one inner solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InnerResult {
    /// Direction `d = y^ℓ` in global variable order.
    pub d: Vec<f64>,
    /// `‖rˡ‖` for `l = 1..=ℓ`, where `rˡ = (JᵀJ + µI) yˡ + g`.
    pub inner_residual_norms: Vec<f64>,
    /// `‖B‖/µ`, an upper bound on the contraction factor, when `‖B‖` is known.
    pub rho_bound: Option<f64>,
    pub iterations_used: usize,
    /// Set when the last inner residual exceeds the first one.
    pub diverged: bool,
}

/// Runs the fixed-point iteration. `b_norm`, if given, fills `rho_bound`.
pub fn fixed_point_solve(
    bs: &BlockSystem,
    fac: &BlockFactorization,
    iters: InnerIterations,
    b_norm: Option<f64>,
    pool: &WorkerPool,
) -> Result<InnerResult> {
    iters.validate()?;
    let k = bs.k();
    let mu = fac.mu;
    let g_norm = bs.grad_norm();
    let target = match iters {
        InnerIterations::Fixed { .. } => None,
        InnerIterations::Adaptive { eta, exponent, .. } => Some(eta * g_norm.powf(exponent)),
    };
    let max_ell = iters.max_iterations();

    let mut y = pool.run_phase(Phase::FirstSolve, k, |i| {
        let rhs: Vec<f64> = bs.g(i).iter().map(|v| -v).collect();
        solve_block_rhs(fac, i, &rhs)
    })?;
    let mut norms = Vec::with_capacity(max_ell);
    for l in 1..=max_ell {
        // (B yˡ)_i and rˡ_i = (P_i + µI) yˡ_i + (B yˡ)_i + g_i, per block
        let yl = &y;
        let coupled = pool.run_phase(Phase::InnerStep, k, |i| {
            let by = bs.apply_b_block(i, yl);
            let mut r = bs.p(i).mul_vec(&yl[i]);
            for t in 0..r.len() {
                r[t] += mu * yl[i][t] + by[t] + bs.g(i)[t];
            }
            Ok((by, r))
        })?;
        let r_norm = block_norm(&coupled.iter().map(|c| c.1.clone()).collect::<Vec<_>>());
        if !r_norm.is_finite() {
            return Err(Error::Numerical {
                block: first_non_finite(&coupled).unwrap_or(0),
                reason: format!("non-finite inner residual at inner iteration {l}"),
            });
        }
        norms.push(r_norm);
        if l == max_ell || target.is_some_and(|t| r_norm <= t) {
            break;
        }
        y = pool.run_phase(Phase::InnerStep, k, |i| {
            solve_block_rhs(fac, i, &neg_sum(bs.g(i), &coupled[i].0))
        })?;
    }
    let diverged = norms.len() > 1 && norms[norms.len() - 1] > norms[0];
    if diverged {
        log::warn!(
            "inner iteration diverging: |r| went from {:.3e} to {:.3e} (mu = {:.3e})",
            norms[0],
            norms[norms.len() - 1],
            mu
        );
    }
    Ok(InnerResult {
        d: bs.layout().gather(&y),
        iterations_used: norms.len(),
        inner_residual_norms: norms,
        rho_bound: b_norm.map(|b| b / mu),
        diverged,
    })
}

fn first_non_finite(c: &[(Vec<f64>, Vec<f64>)]) -> Option<usize> {
    c.iter().position(|(_, r)| r.iter().any(|v| !v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{assemble_blocks, split_jacobian, BlockLayout};
    use crate::model::{Axis, Measurement, Problem};
    use crate::partition::{induce_residual_partition, PointPartition};
    use crate::sparse::CsrMatrix;

    fn toy(coupled: bool) -> (BlockSystem, Vec<f64>, CsrMatrix) {
        let d = |i, j, d| Measurement::Distance { i, j, d, sigma: 0.5 };
        let c = |i, axis, value| Measurement::Coordinate {
            i,
            axis,
            value,
            sigma: 1.0,
        };
        let mut ms = vec![d(0, 1, 1.0), d(2, 3, 1.0)];
        for i in 0..4 {
            ms.push(c(i, Axis::X, i as f64));
            ms.push(c(i, Axis::Y, 0.5 * i as f64));
        }
        if coupled {
            ms.push(d(1, 2, 1.3));
        }
        let p = Problem::new(4, ms, None).unwrap();
        let x = vec![0.1, 0.0, 0.9, 0.6, 2.2, 0.9, 3.0, 1.4];
        let part = induce_residual_partition(
            &p,
            &PointPartition {
                k: 2,
                block_of: vec![0, 0, 1, 1],
            },
        )
        .unwrap();
        let layout = Arc::new(BlockLayout::from_partition(&part));
        let j = p.jacobian(&x).unwrap();
        let blocks = split_jacobian(&j, &part, &layout).unwrap();
        let bs = assemble_blocks(&blocks, &p.residuals(&x).unwrap(), &part, layout).unwrap();
        let g = p.gradient(&x).unwrap();
        (bs, g, j)
    }

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let piv = (c..n)
                .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
                .unwrap();
            for t in 0..n {
                a.swap(c * n + t, piv * n + t);
            }
            b.swap(c, piv);
            for r in c + 1..n {
                let f = a[r * n + c] / a[c * n + c];
                for t in c..n {
                    a[r * n + t] -= f * a[c * n + t];
                }
                b[r] -= f * b[c];
            }
        }
        for c in (0..n).rev() {
            let s: f64 = (c + 1..n).map(|t| a[c * n + t] * b[t]).sum();
            b[c] = (b[c] - s) / a[c * n + c];
        }
        b
    }

    #[test]
    fn coupling_rhs_without_neighbours_is_negative_gradient() {
        let (bs, _, _) = toy(false);
        let y = vec![vec![1.0; 4], vec![2.0; 4]];
        let want: Vec<f64> = bs.g(0).iter().map(|v| -v).collect();
        assert_eq!(coupling_rhs(&bs, 0, &y), want);
    }

    #[test]
    fn coupling_rhs_matches_dense_restriction() {
        let (bs, _, _) = toy(true);
        let (_, db) = bs.to_dense();
        let yg: Vec<f64> = (0..8).map(|t| (t as f64 * 0.7).cos()).collect();
        let y = bs.layout().split(&yg);
        let g = bs.gradient();
        for i in 0..2 {
            let rhs = coupling_rhs(&bs, i, &y);
            for (t, &v) in bs.layout().vars(i).iter().enumerate() {
                let by: f64 = (0..8).map(|c| db[v * 8 + c] * yg[c]).sum();
                assert!((rhs[t] + g[v] + by).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let (bs, _, _) = toy(true);
        let pool = WorkerPool::new(1).unwrap();
        let fac = factor_blocks(&bs, 1.0, &pool, &mut SymbolicCache::new()).unwrap();
        assert_eq!(solve_block_rhs(&fac, 1, &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn separable_first_iterate_is_exact() {
        let (bs, g, j) = toy(false);
        let pool = WorkerPool::new(2).unwrap();
        let mu = 0.3;
        let fac = factor_blocks(&bs, mu, &pool, &mut SymbolicCache::new()).unwrap();
        let res = fixed_point_solve(&bs, &fac, InnerIterations::Fixed { ell: 1 }, None, &pool).unwrap();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res.inner_residual_norms[0] <= 1e-12 * gn);
        let mut a = j.gram().to_dense();
        for t in 0..8 {
            a[t * 8 + t] += mu;
        }
        let want = dense_solve(a, g.iter().map(|v| -v).collect());
        for (x, y) in res.d.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn iterates_converge_to_direct_solution() {
        let (bs, g, j) = toy(true);
        let pool = WorkerPool::new(1).unwrap();
        let mu = 2.0 * bs.estimate_b_norm(50, 3);
        let fac = factor_blocks(&bs, mu, &pool, &mut SymbolicCache::new()).unwrap();
        let mut a = j.gram().to_dense();
        for t in 0..8 {
            a[t * 8 + t] += mu;
        }
        let want = dense_solve(a, g.iter().map(|v| -v).collect());
        let err = |ell| {
            let r = fixed_point_solve(&bs, &fac, InnerIterations::Fixed { ell }, None, &pool).unwrap();
            r.d.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (e1, e20) = (err(1), err(20));
        assert!(e1 > 0.0);
        // contraction at most 1/2 per step with µ = 2‖B‖
        assert!(e20 <= 0.5f64.powi(19) * e1 + 1e-14, "{e1} {e20}");
    }

    #[test]
    fn adaptive_mode_stops_early() {
        let (bs, _, _) = toy(true);
        let pool = WorkerPool::new(1).unwrap();
        let fac = factor_blocks(&bs, 10.0, &pool, &mut SymbolicCache::new()).unwrap();
        let it = InnerIterations::Adaptive {
            eta: 1e-3,
            exponent: 1.0,
            max_ell: 100,
        };
        let r = fixed_point_solve(&bs, &fac, it, Some(1.0), &pool).unwrap();
        assert!(r.iterations_used < 100);
        assert!(*r.inner_residual_norms.last().unwrap() <= 1e-3 * bs.grad_norm());
        assert_eq!(r.rho_bound, Some(0.1));
    }

    #[test]
    fn nonpositive_mu_rejected() {
        let (bs, _, _) = toy(true);
        let pool = WorkerPool::new(1).unwrap();
        assert!(factor_blocks(&bs, 0.0, &pool, &mut SymbolicCache::new()).is_err());
    }
}
