//! Machine-readable run reports.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gen::{coordinate_error, ErrorQuantiles};
use crate::model::Problem;
use crate::outer::{classical_lm_solve, pilm_solve, IterationRecord, SolveResult, SolveTimings, SolverConfig, Status};
use crate::partition::PartitionStats;

/// Bumped whenever a field of [`RunReport`] changes meaning or disappears.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pilm,
    Lm,
}

impl Algorithm {
    pub fn solve(self, p: &Problem, cfg: &SolverConfig) -> Result<SolveResult> {
        match self {
            Algorithm::Pilm => pilm_solve(p, cfg),
            Algorithm::Lm => classical_lm_solve(p, cfg),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    /// The fully resolved configuration the run used.
    pub config: SolverConfig,
    pub n_points: usize,
    pub n_residuals: usize,
    pub status: Status,
    pub iterations: usize,
    pub workers: usize,
    pub timings: SolveTimings,
    pub final_objective: f64,
    pub final_grad_norm: f64,
    pub final_within_sigma: [f64; 3],
    /// Present only when the problem carries ground truth.
    pub initial_error: Option<ErrorQuantiles>,
    pub final_error: Option<ErrorQuantiles>,
    pub partition: Option<PartitionStats>,
    pub records: Vec<IterationRecord>,
}

impl RunReport {
    pub fn new(algorithm: Algorithm, cfg: &SolverConfig, p: &Problem, res: &SolveResult) -> Result<Self> {
        let (initial_error, final_error) = match p.ground_truth() {
            Some(gt) => (
                Some(coordinate_error(&p.initial_guess(), Some(gt))?.quantiles),
                Some(coordinate_error(&res.x, Some(gt))?.quantiles),
            ),
            None => (None, None),
        };
        let last = res.final_record();
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            algorithm,
            config: cfg.clone(),
            n_points: p.n_points(),
            n_residuals: p.m(),
            status: res.status,
            iterations: res.iterations(),
            workers: res.workers,
            timings: res.timings.clone(),
            final_objective: last.f,
            final_grad_norm: last.grad_norm,
            final_within_sigma: last.within_sigma,
            initial_error,
            final_error,
            partition: res.partition.clone(),
            records: res.records.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
