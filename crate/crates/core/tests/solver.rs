mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use pilm::gen::{generate, AngleUnit, GenConfig};
use pilm::inner::InnerIterations;
use pilm::outer::{
    choose_mu, classical_lm_solve_from, pilm_solve, pilm_solve_from, AlphaMode, Criterion, MuMode, SolveResult,
    SolverConfig, Status, Termination,
};
use pilm::runtime::{available_cores, WorkerPool};
use pilm::Problem;

fn exact_problem(n_hat: usize, seed: u64) -> Problem {
    let cfg = GenConfig {
        sigma_dist: 0.5,
        sigma_point_line: 0.5,
        sigma_angle: 0.05,
        angle_unit: AngleUnit::Radians,
        sigma_coord_loose: 1.0,
        sigma_coord_tight: 0.5,
        noise_scale: 0.0,
        ..GenConfig::new(n_hat, seed)
    };
    generate(&cfg).unwrap()
}

/// Independent zero-residual clusters, returned with their cluster map.
fn exact_clusters(sizes: &[usize], seed: u64) -> (Problem, Vec<usize>) {
    let mut ms = Vec::new();
    let mut gt = Vec::new();
    let mut block_of = Vec::new();
    let mut offset = 0;
    for (c, &n_hat) in sizes.iter().enumerate() {
        let p = exact_problem(n_hat, seed + c as u64);
        ms.extend(p.measurements().iter().map(|m| m.map_points(|i| i + offset)));
        gt.extend_from_slice(p.ground_truth().unwrap());
        block_of.extend(std::iter::repeat_n(c, p.n_points()));
        offset += p.n_points();
    }
    (Problem::new(offset, ms, Some(gt)).unwrap(), block_of)
}

fn perturbed(x: &[f64], amp: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.iter().map(|v| v + rng.random_range(-amp..amp)).collect()
}

/// `F(x^k) ≤ F(x^0) − c·Σα_j²‖g_j‖² + Σε_j` at every recorded iterate.
fn telescoped_descent_holds(res: &SolveResult, c: f64) -> bool {
    let f0 = res.records[0].f;
    let (mut descent, mut slack) = (0.0, 0.0);
    res.records.windows(2).all(|w| {
        let a = w[0].alpha.unwrap();
        descent += c * a * a * w[0].grad_norm * w[0].grad_norm;
        slack += w[0].eps.unwrap();
        w[1].f <= f0 - descent + slack + 1e-12 * f0.max(1.0)
    })
}

#[test]
fn theoretical_mu_without_coupling_is_the_floor() {
    let pool = WorkerPool::new(1).unwrap();
    let (p, block_of) = exact_clusters(&[16, 16, 4, 4], 3);
    let x = p.initial_guess();
    let part = explicit_partition(&p, block_of);
    let inst = instance_with(p, x, part, &pool);
    let b = inst.bs.estimate_b_norm(50, 1);
    assert_eq!(b, 0.0);
    let mode = MuMode::Theoretical {
        mu_min: 1e-7,
        c_mu: 2.0,
    };
    assert_eq!(choose_mu(&mode, b, inst.bs.grad_norm(), None, 1.0), 1e-7);
}

#[test]
fn separable_zero_residual_instance_converges_with_descent() {
    // 40 points in four clusters, no measurement crosses a cluster; the
    // balanced K = 2 split {16, 4} | {16, 4} cuts nothing
    let (p, _) = exact_clusters(&[16, 4, 16, 4], 3);
    assert_eq!(p.n_points(), 40);
    let truth = p.ground_truth().unwrap().to_vec();
    assert!(p.objective(&truth).unwrap() < 1e-20);
    let x0 = perturbed(&truth, 0.5, 17);
    let cfg = SolverConfig {
        k: 2,
        mu_mode: MuMode::Theoretical {
            mu_min: 1e-6,
            c_mu: 2.0,
        },
        termination: Termination {
            sigma_fractions: None,
            grad_tol: 1e-9,
            max_outer_iters: 100,
            ..Termination::default()
        },
        ..SolverConfig::default()
    };
    let res = pilm_solve_from(&p, &x0, &cfg).unwrap();
    assert_eq!(
        res.status,
        Status::Converged(Criterion::Gradient),
        "{:?}",
        res.final_record()
    );
    assert_eq!(res.partition.as_ref().unwrap().coupling_residuals, 0);
    assert!(res.records[..res.records.len() - 1]
        .iter()
        .all(|r| r.b_norm == Some(0.0)));
    assert!(telescoped_descent_holds(&res, cfg.c));
    assert!(rel_diff_vec(&res.x, &truth) < 1e-6);
}

#[test]
fn single_block_pilm_follows_classical_lm() {
    let p = desk_problem(49, 5);
    for mu_mode in [
        MuMode::practical(),
        MuMode::theoretical(),
        MuMode::delta_schedule(1.0, 1.0),
    ] {
        let cfg = SolverConfig {
            k: 1,
            inner: InnerIterations::Fixed { ell: 1 },
            mu_mode,
            keep_iterates: true,
            termination: Termination {
                max_outer_iters: 15,
                ..Termination::default()
            },
            ..SolverConfig::default()
        };
        let x0 = p.initial_guess();
        let a = pilm_solve_from(&p, &x0, &cfg).unwrap();
        let b = classical_lm_solve_from(&p, &x0, &cfg).unwrap();
        assert_eq!(a.iterations(), b.iterations(), "{mu_mode:?}");
        let (ia, ib) = (a.iterates.unwrap(), b.iterates.unwrap());
        for (k, (xa, xb)) in ia.iter().zip(&ib).enumerate() {
            let d = rel_diff_vec(xa, xb);
            assert!(d <= 1e-10, "{mu_mode:?} iterate {k}: {d:e}");
        }
    }
}

#[test]
fn classical_lm_converges_quadratically_on_zero_residual_problem() {
    let p = exact_problem(36, 8);
    let truth = p.ground_truth().unwrap().to_vec();
    let x0 = perturbed(&truth, 1e-2, 4);
    let cfg = SolverConfig {
        k: 1,
        mu_mode: MuMode::delta_schedule(1.0, 1.0),
        alpha_mode: AlphaMode::FullStep,
        termination: Termination {
            sigma_fractions: None,
            grad_tol: 1e-11,
            max_outer_iters: 20,
            ..Termination::default()
        },
        ..SolverConfig::default()
    };
    let res = classical_lm_solve_from(&p, &x0, &cfg).unwrap();
    assert!(res.status.is_converged(), "{:?}", res.status);
    assert!(res.iterations() <= 6, "{} iterations", res.iterations());
    // every step from a gradient already below 1e-2 at least squares it, up to a modest constant
    let g: Vec<f64> = res.records.iter().map(|r| r.grad_norm).collect();
    let resolved: Vec<f64> = g
        .windows(2)
        .filter(|w| w[0] < 1e-2 && w[1] > 1e-10)
        .map(|w| w[1] / (w[0] * w[0]))
        .collect();
    assert!(!resolved.is_empty(), "gradients {g:?}");
    assert!(resolved.iter().all(|&q| q < 1e3), "{resolved:?} from {g:?}");
}

#[test]
fn more_workers_are_faster_when_cores_allow() {
    let cores = available_cores();
    if cores < 2 {
        eprintln!("skipped: {cores} core available");
        return;
    }
    let p = generate(&GenConfig::new(2500, 2)).unwrap();
    let time = |workers| {
        let cfg = SolverConfig {
            k: 8,
            workers: Some(workers),
            ..SolverConfig::default()
        };
        let t = Instant::now();
        let res = pilm_solve(&p, &cfg).unwrap();
        (t.elapsed().as_secs_f64(), res.iterations())
    };
    let (t1, it1) = time(1);
    let (tn, itn) = time(cores.min(8));
    assert_eq!(it1, itn);
    assert!(tn < t1, "{tn:.2}s with {} workers vs {t1:.2}s with one", cores.min(8));
}

#[test]
fn theoretical_mode_bounds_contraction_and_partial_sums() {
    let p = desk_problem(100, 12);
    let c_mu = 2.5;
    let cfg = SolverConfig {
        k: 3,
        mu_mode: MuMode::Theoretical { mu_min: 1e-10, c_mu },
        termination: Termination {
            max_outer_iters: 25,
            ..Termination::default()
        },
        ..SolverConfig::default()
    };
    let res = pilm_solve(&p, &cfg).unwrap();
    let steps = &res.records[..res.records.len() - 1];
    assert!(!steps.is_empty());
    for r in steps {
        let rho = r.rho_bound.unwrap();
        assert!(rho <= 1.0 / c_mu * (1.0 + 1e-12), "iteration {}: rho {rho}", r.k);
    }
    assert!(telescoped_descent_holds(&res, cfg.c));
    let sum: f64 = steps
        .iter()
        .map(|r| r.alpha.unwrap().powi(2) * r.grad_norm.powi(2))
        .sum();
    let slack: f64 = steps.iter().map(|r| r.eps.unwrap()).sum();
    assert!(cfg.c * sum <= res.records[0].f + slack);
}
