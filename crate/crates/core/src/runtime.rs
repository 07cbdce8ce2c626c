//! Fork-join execution of per-block work.
//!
//! Each phase runs one task per block on a dedicated thread pool and waits
//! for all of them before returning. Outputs are gathered in block order, so
//! results never depend on the number of workers or on scheduling.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::partition::Partition;

/// Per-block phases of one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Assemble,
    Factor,
    FirstSolve,
    InnerStep,
}

/// Wall time accumulated per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimings {
    pub assemble: Duration,
    pub factor: Duration,
    pub first_solve: Duration,
    pub inner_step: Duration,
}

impl PhaseTimings {
    fn slot(&mut self, phase: Phase) -> &mut Duration {
        match phase {
            Phase::Assemble => &mut self.assemble,
            Phase::Factor => &mut self.factor,
            Phase::FirstSolve => &mut self.first_solve,
            Phase::InnerStep => &mut self.inner_step,
        }
    }

    pub fn total(&self) -> Duration {
        self.assemble + self.factor + self.first_solve + self.inner_step
    }
}

/// Thread pool standing in for the K worker nodes.
pub struct WorkerPool {
    pool: rayon::ThreadPool,
    workers: usize,
    timings: Mutex<PhaseTimings>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("workers", &self.workers).finish()
    }
}

/// Number of hardware threads, at least 1.
pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Default worker count for `k` blocks: `min(k, cores)`.
pub fn default_workers(k: usize) -> usize {
    k.clamp(1, available_cores())
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidArgument("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("pilm-worker-{i}"))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            pool,
            workers,
            timings: Mutex::new(PhaseTimings::default()),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `task(i)` for every block `i < k` and returns the outputs in
    /// block order. A failing or panicking task aborts the phase with its
    /// block index; when several fail, the lowest index is reported.
    pub fn run_phase<T, F>(&self, phase: Phase, k: usize, task: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        let start = Instant::now();
        let out: Vec<Result<T>> = self.pool.install(|| {
            (0..k)
                .into_par_iter()
                .with_max_len(1)
                .map(|i| match catch_unwind(AssertUnwindSafe(|| task(i))) {
                    Ok(r) => r,
                    Err(payload) => Err(Error::Task {
                        block: i,
                        reason: panic_message(payload.as_ref()),
                    }),
                })
                .collect()
        });
        let elapsed = start.elapsed();
        *self.timings.lock().unwrap_or_else(|e| e.into_inner()).slot(phase) += elapsed;
        out.into_iter().collect()
    }

    /// Runs `f` inside the pool, so nested data-parallel work (residual
    /// evaluation, for instance) uses this pool's threads.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn timings(&self) -> PhaseTimings {
        self.timings.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "task panicked".to_string()
    }
}

/// Numbers exchanged per strategy over a solve, counted in `f64` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CommunicationVolume {
    /// Every worker receives the full aggregated vector after each inner step.
    pub broadcast_per_step: u64,
    /// Each worker receives only its neighbours' segments.
    pub targeted_per_step: u64,
    pub broadcast_total: u64,
    pub targeted_total: u64,
}

/// Values exchanged in `n_iters` outer iterations of `ell` inner steps each.
///
/// With a single block nothing is exchanged under either strategy.
pub fn simulate_communication_volume(part: &Partition, n_iters: u64, ell: u64) -> CommunicationVolume {
    let k = part.k();
    let sizes = part.block_sizes();
    let n: usize = sizes.iter().sum();
    let broadcast = if k > 1 { (k * n) as u64 } else { 0 };
    let targeted: u64 = (0..k)
        .map(|i| part.neighbors(i).iter().map(|&j| sizes[j] as u64).sum::<u64>())
        .sum();
    let steps = n_iters * ell;
    CommunicationVolume {
        broadcast_per_step: broadcast,
        targeted_per_step: targeted,
        broadcast_total: broadcast * steps,
        targeted_total: targeted * steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Measurement, Problem};
    use crate::partition::{induce_residual_partition, PointPartition};

    fn work(i: usize) -> Result<f64> {
        // deliberately order-sensitive summation inside a task
        Ok((0..1000).map(|t| ((i * 1000 + t) as f64).sqrt()).sum())
    }

    #[test]
    fn outputs_match_sequential_for_any_worker_count() {
        let seq: Vec<f64> = (0..13).map(|i| work(i).unwrap()).collect();
        for w in [1, 2, 8, 32] {
            let pool = WorkerPool::new(w).unwrap();
            let out = pool.run_phase(Phase::InnerStep, 13, work).unwrap();
            assert_eq!(out, seq, "workers = {w}");
        }
    }

    #[test]
    fn panics_report_block_index() {
        let pool = WorkerPool::new(2).unwrap();
        let err = pool
            .run_phase(Phase::Factor, 5, |i| {
                if i == 3 {
                    panic!("boom");
                }
                Ok(i)
            })
            .unwrap_err();
        match err {
            Error::Task { block, reason } => {
                assert_eq!(block, 3);
                assert!(reason.contains("boom"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn errors_keep_lowest_block() {
        let pool = WorkerPool::new(3).unwrap();
        let err = pool
            .run_phase(Phase::Factor, 6, |i| {
                if i >= 2 {
                    Err(Error::Numerical {
                        block: i,
                        reason: "x".into(),
                    })
                } else {
                    Ok(())
                }
            })
            .unwrap_err();
        assert!(matches!(err, Error::Numerical { block: 2, .. }));
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(WorkerPool::new(0).is_err());
    }

    #[test]
    fn timings_accumulate() {
        let pool = WorkerPool::new(1).unwrap();
        pool.run_phase(Phase::Assemble, 2, |_| {
            std::thread::sleep(Duration::from_millis(5));
            Ok(())
        })
        .unwrap();
        let t = pool.timings();
        assert!(t.assemble >= Duration::from_millis(10));
        assert_eq!(t.factor, Duration::ZERO);
    }

    fn two_block_partition() -> Partition {
        // 2 points (4 variables) per block, one distance across
        let d = |i, j| Measurement::Distance {
            i,
            j,
            d: 1.0,
            sigma: 1.0,
        };
        let p = Problem::new(4, vec![d(0, 1), d(2, 3), d(1, 2)], None).unwrap();
        induce_residual_partition(
            &p,
            &PointPartition {
                k: 2,
                block_of: vec![0, 0, 1, 1],
            },
        )
        .unwrap()
    }

    #[test]
    fn communication_volume_by_formula() {
        let part = two_block_partition();
        let v = simulate_communication_volume(&part, 3, 5);
        // each block receives the other's 4 values
        assert_eq!(v.targeted_per_step, 8);
        assert_eq!(v.broadcast_per_step, 2 * 8);
        assert_eq!(v.targeted_total, 8 * 15);
        assert!(v.broadcast_total >= v.targeted_total);
    }

    #[test]
    fn single_block_exchanges_nothing() {
        let d = |i, j| Measurement::Distance {
            i,
            j,
            d: 1.0,
            sigma: 1.0,
        };
        let p = Problem::new(2, vec![d(0, 1)], None).unwrap();
        let part = induce_residual_partition(
            &p,
            &PointPartition {
                k: 1,
                block_of: vec![0, 0],
            },
        )
        .unwrap();
        let v = simulate_communication_volume(&part, 10, 5);
        assert_eq!((v.broadcast_per_step, v.targeted_per_step), (0, 0));
    }
}
