//! The outer Levenberg-Marquardt loop: damping choice, (inexact) direction,
//! nonmonotone backtracking line search and termination.
//!
//! Both solvers share one loop. PILM obtains its direction from the block
//! fixed-point iteration; classical LM factors the full `JᵀJ + µI`.

mod config;

pub use config::{AlphaMode, MuMode, SolverConfig, Termination};

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::blocks::{build_block_system, BlockLayout, BlockSystem, B_NORM_SEED};
use crate::cholesky::{CholeskyFactor, SymbolicCholesky};
use crate::error::{Error, Result};
use crate::inner::{factor_blocks, fixed_point_solve, SymbolicCache};
use crate::model::{half_squared_norm, Problem};
use crate::partition::{
    build_variable_graph, induce_residual_partition, partition_variables_with_tol, reorder, Partition, PartitionStats,
    Reordering,
};
use crate::runtime::{default_workers, WorkerPool};
use crate::sparse::{norm2, CsrMatrix};

/// Which rule stopped a converged run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    SigmaFractions,
    Gradient,
    RelativeGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "criterion")]
pub enum Status {
    Converged(Criterion),
    MaxIters,
    TimeBudget,
    Stalled,
}

impl Status {
    pub fn is_converged(&self) -> bool {
        matches!(self, Status::Converged(_))
    }
}

/// State at iterate `x^k` and the step taken from it. The last record of a
/// run describes the final iterate and has no step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub f: f64,
    pub grad_norm: f64,
    /// Fractions of weighted residuals with `|r| < 1, 2, 3`.
    pub within_sigma: [f64; 3],
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub backtracks: usize,
    /// Times µ was doubled after the line search stalled.
    pub mu_retries: usize,
    pub eps: Option<f64>,
    pub inner_residual_norms: Vec<f64>,
    pub b_norm: Option<f64>,
    pub rho_bound: Option<f64>,
    pub elapsed_s: f64,
}

/// Wall-clock breakdown of a solve, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolveTimings {
    pub total: f64,
    pub partition: f64,
    /// Residual and Jacobian evaluation plus block (or normal-matrix) assembly.
    pub assembly: f64,
    pub factor: f64,
    pub inner_solves: f64,
    pub line_search: f64,
    /// Orchestration between block phases: residual-norm reduction and gathering.
    pub aggregation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    /// Final iterate, in the problem's own variable order.
    pub x: Vec<f64>,
    pub status: Status,
    pub records: Vec<IterationRecord>,
    pub timings: SolveTimings,
    pub partition: Option<PartitionStats>,
    pub workers: usize,
    /// Every iterate `x^0, x^1, …` when requested.
    #[serde(skip)]
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("a run has at least one record")
    }
}

/// Fractions of `r` strictly below 1, 2 and 3 in absolute value.
pub fn sigma_fractions(r: &[f64]) -> [f64; 3] {
    let mut c = [0usize; 3];
    for v in r {
        let a = v.abs();
        for (t, slot) in c.iter_mut().enumerate() {
            if a < (t + 1) as f64 {
                *slot += 1;
            }
        }
    }
    let m = r.len().max(1) as f64;
    c.map(|n| n as f64 / m)
}

/// Convergence test at one iterate. `grad0_norm` is `‖g⁰‖` for the relative rule.
pub fn check_termination(r_weighted: &[f64], grad_norm: f64, grad0_norm: f64, t: &Termination) -> Option<Criterion> {
    if let Some(req) = t.sigma_fractions {
        let f = sigma_fractions(r_weighted);
        if f.iter().zip(&req).all(|(have, need)| have >= need) {
            return Some(Criterion::SigmaFractions);
        }
    }
    if t.grad_tol > 0.0 && grad_norm <= t.grad_tol {
        return Some(Criterion::Gradient);
    }
    if t.grad_rtol > 0.0 && grad_norm <= t.grad_rtol * grad0_norm {
        return Some(Criterion::RelativeGradient);
    }
    None
}

/// Damping for the next direction. `prev` is `(µ, α)` of the previous step;
/// `mu0` the practical-mode starting value.
pub fn choose_mu(mode: &MuMode, b_norm: f64, grad_norm: f64, prev: Option<(f64, f64)>, mu0: f64) -> f64 {
    match *mode {
        MuMode::Theoretical { mu_min, c_mu } => mu_min.max(c_mu * b_norm),
        MuMode::Practical { mu_min, mu_max, .. } => {
            let mu = match prev {
                None => mu0,
                Some((mu, alpha)) if alpha > 0.5 => mu / 2.0,
                Some((mu, _)) => mu * 2.0,
            };
            mu.clamp(mu_min, mu_max)
        }
        MuMode::DeltaSchedule {
            mu_bar,
            delta,
            mu_min,
            mu_max,
        } => (mu_bar * grad_norm.powf(delta)).clamp(mu_min, mu_max),
    }
}

/// Accepted line-search step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub alpha: f64,
    pub f_new: f64,
    pub r_new: Vec<f64>,
    pub x_new: Vec<f64>,
    pub backtracks: usize,
}

fn trial(p: &Problem, x: &[f64], d: &[f64], alpha: f64) -> (Vec<f64>, Option<(f64, Vec<f64>)>) {
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    match p.residuals(&xt) {
        Ok(r) => {
            let f = half_squared_norm(&r);
            (xt, f.is_finite().then_some((f, r)))
        }
        Err(_) => (xt, None),
    }
}

/// Largest `α ∈ {1, β, β², …}` with `F(x + αd) ≤ F(x) − cα²‖g‖² + ε_k`.
///
/// Trial points where the residuals cannot be evaluated count as `F = +∞`.
/// Fails with a stall error once `α` drops below `min_alpha`.
#[allow(clippy::too_many_arguments)]
pub fn line_search(
    p: &Problem,
    x: &[f64],
    f: f64,
    d: &[f64],
    grad_norm: f64,
    c: f64,
    eps_k: f64,
    beta: f64,
    min_alpha: f64,
) -> Result<Step> {
    let g2 = grad_norm * grad_norm;
    let mut alpha = 1.0;
    let mut backtracks = 0;
    while alpha >= min_alpha {
        let (xt, eval) = trial(p, x, d, alpha);
        if let Some((ft, rt)) = eval {
            if ft <= f - c * alpha * alpha * g2 + eps_k {
                return Ok(Step {
                    alpha,
                    f_new: ft,
                    r_new: rt,
                    x_new: xt,
                    backtracks,
                });
            }
        }
        alpha *= beta;
        backtracks += 1;
    }
    Err(Error::Stall {
        min_alpha,
        f,
        grad_norm,
    })
}

enum Engine {
    Blocks {
        part: Partition,
        layout: Arc<BlockLayout>,
        cache: SymbolicCache,
    },
    Full {
        sym: Option<Arc<SymbolicCholesky>>,
    },
}

enum System {
    Blocks(BlockSystem),
    Full { jtj: CsrMatrix, g: Vec<f64> },
}

struct Direction {
    d: Vec<f64>,
    inner_residual_norms: Vec<f64>,
    rho_bound: Option<f64>,
}

impl Engine {
    fn assemble(&self, j: &CsrMatrix, r: &[f64], pool: &WorkerPool) -> Result<System> {
        match self {
            Engine::Blocks { part, layout, .. } => Ok(System::Blocks(build_block_system(
                j,
                r,
                part,
                Arc::clone(layout),
                pool,
            )?)),
            Engine::Full { .. } => Ok(System::Full {
                jtj: pool.install(|| j.gram()),
                g: j.mul_transpose_vec(r),
            }),
        }
    }

    fn direction(
        &mut self,
        sys: &System,
        mu: f64,
        cfg: &SolverConfig,
        b_norm: Option<f64>,
        pool: &WorkerPool,
        t: &mut SolveTimings,
    ) -> Result<Direction> {
        match (self, sys) {
            (Engine::Blocks { cache, .. }, System::Blocks(bs)) => {
                let before = pool.timings();
                let fac = factor_blocks(bs, mu, pool, cache)?;
                let mid = pool.timings();
                let start = Instant::now();
                let res = fixed_point_solve(bs, &fac, cfg.inner, b_norm, pool)?;
                let wall = start.elapsed().as_secs_f64();
                let after = pool.timings();
                let inner = (after.first_solve + after.inner_step - mid.first_solve - mid.inner_step).as_secs_f64();
                t.factor += (mid.factor - before.factor).as_secs_f64();
                t.inner_solves += inner;
                t.aggregation += (wall - inner).max(0.0);
                Ok(Direction {
                    d: res.d,
                    inner_residual_norms: res.inner_residual_norms,
                    rho_bound: res.rho_bound,
                })
            }
            (Engine::Full { sym }, System::Full { jtj, g }) => {
                let start = Instant::now();
                let s = match sym {
                    Some(s) if s.matches(jtj) => Arc::clone(s),
                    _ => Arc::new(SymbolicCholesky::analyze(jtj)),
                };
                *sym = Some(Arc::clone(&s));
                let f = CholeskyFactor::factor(s, jtj, mu).map_err(|e| Error::Numerical {
                    block: 0,
                    reason: e.to_string(),
                })?;
                let mid = Instant::now();
                let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
                let d = f.solve(&rhs);
                t.factor += (mid - start).as_secs_f64();
                t.inner_solves += mid.elapsed().as_secs_f64();
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical {
                        block: 0,
                        reason: "non-finite direction".into(),
                    });
                }
                Ok(Direction {
                    d,
                    inner_residual_norms: Vec::new(),
                    rho_bound: None,
                })
            }
            _ => unreachable!("engine and system kinds always match"),
        }
    }
}

impl System {
    fn gradient(&self) -> Vec<f64> {
        match self {
            System::Blocks(bs) => bs.gradient(),
            System::Full { g, .. } => g.clone(),
        }
    }

    fn b_norm(&self, iters: usize) -> Option<f64> {
        match self {
            System::Blocks(bs) if iters > 0 => Some(bs.estimate_b_norm(iters, B_NORM_SEED)),
            System::Blocks(_) => None,
            System::Full { .. } => Some(0.0),
        }
    }
}

/// PILM from the default starting point (the coordinate observations).
pub fn pilm_solve(p: &Problem, cfg: &SolverConfig) -> Result<SolveResult> {
    pilm_solve_from(p, &p.initial_guess(), cfg)
}

/// PILM from `x0`.
pub fn pilm_solve_from(p: &Problem, x0: &[f64], cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let start = Instant::now();
    let graph = build_variable_graph(p);
    let assignment = partition_variables_with_tol(&graph, cfg.k, cfg.seed, cfg.balance_tol)?;
    let part = induce_residual_partition(p, &assignment)?;
    let re = reorder(p, &part)?;
    let stats = re.partition.stats();
    let layout = Arc::new(BlockLayout::from_partition(&re.partition));
    let engine = Engine::Blocks {
        part: re.partition,
        layout,
        cache: SymbolicCache::new(),
    };
    let partition_time = start.elapsed().as_secs_f64();
    let x0r = re.permutation.to_reordered(x0);
    let mut res = run(&re.problem, &x0r, cfg, engine, Some(&re.permutation), start)?;
    res.timings.partition = partition_time;
    res.partition = Some(stats);
    Ok(res)
}

/// Classical LM (full normal equations, direct factorization) from the
/// default starting point.
pub fn classical_lm_solve(p: &Problem, cfg: &SolverConfig) -> Result<SolveResult> {
    classical_lm_solve_from(p, &p.initial_guess(), cfg)
}

pub fn classical_lm_solve_from(p: &Problem, x0: &[f64], cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let start = Instant::now();
    run(p, x0, cfg, Engine::Full { sym: None }, None, start)
}

fn run(
    p: &Problem,
    x0: &[f64],
    cfg: &SolverConfig,
    mut engine: Engine,
    perm: Option<&Reordering>,
    start: Instant,
) -> Result<SolveResult> {
    if x0.len() != p.n_vars() {
        return Err(Error::InvalidArgument(format!(
            "starting point has length {}, expected {}",
            x0.len(),
            p.n_vars()
        )));
    }
    let workers = cfg.workers.unwrap_or_else(|| default_workers(cfg.k));
    let pool = WorkerPool::new(workers)?;
    let to_original = |x: &[f64]| perm.map_or_else(|| x.to_vec(), |pm| pm.to_original(x));
    let budget = cfg.termination.time_budget_s.map(Duration::from_secs_f64);
    let mut t = SolveTimings::default();

    let mut x = x0.to_vec();
    let eval_start = Instant::now();
    let mut r = pool.install(|| p.residuals(&x)).map_err(|e| e.at_iteration(0))?;
    t.assembly += eval_start.elapsed().as_secs_f64();
    let mut f = half_squared_norm(&r);
    let eps0 = cfg.eps0.unwrap_or(1e-3 * f);
    let mu0 = match cfg.mu_mode {
        MuMode::Practical { mu0: Some(m), .. } => m,
        _ => norm2(&r).max(1.0),
    };
    let mut iterates = cfg.keep_iterates.then(|| vec![to_original(&x)]);
    let mut records = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    let mut grad0 = None;

    let status = 'outer: loop {
        let k = records.len();
        let eval_start = Instant::now();
        let sys = pool
            .install(|| p.jacobian(&x))
            .and_then(|j| engine.assemble(&j, &r, &pool))
            .map_err(|e| e.at_iteration(k))?;
        t.assembly += eval_start.elapsed().as_secs_f64();
        let g = sys.gradient();
        let grad_norm = norm2(&g);
        let g0 = *grad0.get_or_insert(grad_norm);
        let mut rec = IterationRecord {
            k,
            f,
            grad_norm,
            within_sigma: sigma_fractions(&r),
            mu: None,
            alpha: None,
            backtracks: 0,
            mu_retries: 0,
            eps: None,
            inner_residual_norms: Vec::new(),
            b_norm: None,
            rho_bound: None,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        if let Some(c) = check_termination(&r, grad_norm, g0, &cfg.termination) {
            records.push(rec);
            break Status::Converged(c);
        }
        if k >= cfg.termination.max_outer_iters {
            records.push(rec);
            break Status::MaxIters;
        }
        if budget.is_some_and(|b| start.elapsed() >= b) {
            records.push(rec);
            break Status::TimeBudget;
        }

        let b_norm = sys.b_norm(cfg.b_norm_iters);
        let mut mu = choose_mu(&cfg.mu_mode, b_norm.unwrap_or(0.0), grad_norm, prev, mu0);
        let eps_k = eps0 * cfg.gamma.powi(k as i32);
        rec.eps = Some(eps_k);
        rec.b_norm = b_norm;
        let step = loop {
            let dir = engine
                .direction(&sys, mu, cfg, b_norm, &pool, &mut t)
                .map_err(|e| e.at_iteration(k))?;
            rec.inner_residual_norms = dir.inner_residual_norms;
            rec.rho_bound = dir.rho_bound;
            let ls_start = Instant::now();
            let step = match cfg.alpha_mode {
                AlphaMode::FullStep => {
                    let (xt, eval) = trial(p, &x, &dir.d, 1.0);
                    match eval {
                        Some((ft, rt)) => Ok(Step {
                            alpha: 1.0,
                            f_new: ft,
                            r_new: rt,
                            x_new: xt,
                            backtracks: 0,
                        }),
                        None => Err(pool.install(|| p.residuals(&xt)).err().unwrap_or(Error::Numerical {
                            block: 0,
                            reason: "non-finite objective after full step".into(),
                        })),
                    }
                }
                AlphaMode::LineSearch { beta } => {
                    pool.install(|| line_search(p, &x, f, &dir.d, grad_norm, cfg.c, eps_k, beta, cfg.min_alpha))
                }
            };
            t.line_search += ls_start.elapsed().as_secs_f64();
            match step {
                Ok(s) => break s,
                Err(Error::Stall { .. }) if rec.mu_retries == 0 => {
                    log::debug!("line search stalled at iteration {k}; doubling mu {mu:.3e}");
                    rec.mu_retries += 1;
                    mu *= 2.0;
                }
                Err(Error::Stall { .. }) => {
                    rec.mu = Some(mu);
                    records.push(rec);
                    break 'outer Status::Stalled;
                }
                Err(e) => return Err(e.at_iteration(k)),
            }
        };
        rec.mu = Some(mu);
        rec.alpha = Some(step.alpha);
        rec.backtracks = step.backtracks;
        log::debug!(
            "k={k} F={f:.6e} |g|={grad_norm:.3e} mu={mu:.3e} alpha={:.3e} bt={}",
            step.alpha,
            step.backtracks
        );
        records.push(rec);
        prev = Some((mu, step.alpha));
        x = step.x_new;
        r = step.r_new;
        f = step.f_new;
        if let Some(its) = iterates.as_mut() {
            its.push(to_original(&x));
        }
    };

    t.total = start.elapsed().as_secs_f64();
    Ok(SolveResult {
        x: to_original(&x),
        status,
        records,
        timings: t,
        partition: None,
        workers,
        iterates,
    })
}
