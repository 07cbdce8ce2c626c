use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::InnerIterations;
use crate::partition::DEFAULT_BALANCE_TOL;

/// How the damping parameter µ is chosen at each outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MuMode {
    /// `µ = max(µ_min, C_µ·‖B‖)`, which keeps `‖B‖/µ ≤ 1/C_µ`.
    Theoretical { mu_min: f64, c_mu: f64 },
    /// Halve µ after a step with α > 0.5, double it otherwise, clamped to
    /// `[mu_min, mu_max]`. `mu0 = None` starts from `max(1, ‖R(x⁰)‖)`.
    Practical { mu0: Option<f64>, mu_min: f64, mu_max: f64 },
    /// `µ = µ̄·‖g‖^δ`, clamped to `[mu_min, mu_max]`.
    DeltaSchedule {
        mu_bar: f64,
        delta: f64,
        mu_min: f64,
        mu_max: f64,
    },
}

impl MuMode {
    pub fn theoretical() -> Self {
        MuMode::Theoretical {
            mu_min: 1e-10,
            c_mu: 2.0,
        }
    }

    pub fn practical() -> Self {
        MuMode::Practical {
            mu0: None,
            mu_min: 1e-10,
            mu_max: 1e10,
        }
    }

    pub fn delta_schedule(mu_bar: f64, delta: f64) -> Self {
        MuMode::DeltaSchedule {
            mu_bar,
            delta,
            mu_min: 1e-14,
            mu_max: 1e10,
        }
    }
}

impl Default for MuMode {
    fn default() -> Self {
        MuMode::practical()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AlphaMode {
    /// Backtracking over `α ∈ {1, β, β², …}`.
    LineSearch { beta: f64 },
    /// Always take the full step `α = 1`.
    FullStep,
}

impl Default for AlphaMode {
    fn default() -> Self {
        AlphaMode::LineSearch { beta: 0.5 }
    }
}

/// Stopping rules, checked at every iterate before a step is computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Termination {
    /// Stop when `‖g‖ ≤ grad_tol`; 0 disables.
    pub grad_tol: f64,
    /// Stop when `‖g‖ ≤ grad_rtol·‖g⁰‖`; 0 disables.
    pub grad_rtol: f64,
    /// Required fractions of weighted residuals below 1, 2 and 3; `None` disables.
    pub sigma_fractions: Option<[f64; 3]>,
    pub max_outer_iters: usize,
    pub time_budget_s: Option<f64>,
}

impl Default for Termination {
    fn default() -> Self {
        Self {
            grad_tol: 0.0,
            grad_rtol: 0.0,
            sigma_fractions: Some([0.68, 0.95, 0.995]),
            max_outer_iters: 200,
            time_budget_s: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Number of variable blocks.
    pub k: usize,
    pub inner: InnerIterations,
    /// Line-search constant `c` in `F(x + αd) ≤ F(x) − cα²‖g‖² + ε_k`.
    pub c: f64,
    /// `ε_0`; `None` means `1e-3·F(x⁰)`.
    pub eps0: Option<f64>,
    pub gamma: f64,
    pub mu_mode: MuMode,
    pub alpha_mode: AlphaMode,
    pub termination: Termination,
    /// Smallest step tried before the line search gives up.
    pub min_alpha: f64,
    pub seed: u64,
    /// Worker threads; `None` uses `min(K, cores)`.
    pub workers: Option<usize>,
    pub balance_tol: f64,
    /// Power iterations used for `‖B‖`; 0 skips the estimate (not allowed in
    /// theoretical mode).
    pub b_norm_iters: usize,
    /// Keep every iterate in the result.
    pub keep_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k: 4,
            inner: InnerIterations::default(),
            c: 1e-8,
            eps0: None,
            gamma: 0.9,
            mu_mode: MuMode::default(),
            alpha_mode: AlphaMode::default(),
            termination: Termination::default(),
            min_alpha: 1e-16,
            seed: 0,
            workers: None,
            balance_tol: DEFAULT_BALANCE_TOL,
            b_norm_iters: crate::blocks::B_NORM_ITERS,
            keep_iterates: false,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(bad("K must be at least 1"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(bad("line-search constant c must be positive"));
        }
        if let Some(e) = self.eps0 {
            if !(e > 0.0 && e.is_finite()) {
                return Err(bad("eps0 must be positive"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(bad("gamma must lie in (0, 1)"));
        }
        if !(self.min_alpha > 0.0 && self.min_alpha < 1.0) {
            return Err(bad("min_alpha must lie in (0, 1)"));
        }
        if self.workers == Some(0) {
            return Err(bad("worker count must be at least 1"));
        }
        match self.inner {
            InnerIterations::Fixed { ell } if ell == 0 => return Err(bad("ell must be at least 1")),
            InnerIterations::Adaptive { eta, max_ell, .. } if max_ell == 0 || !(eta > 0.0) => {
                return Err(bad("adaptive inner iterations need eta > 0 and max_ell ≥ 1"))
            }
            _ => {}
        }
        match self.mu_mode {
            MuMode::Theoretical { mu_min, c_mu } => {
                if !(c_mu > 1.0) {
                    return Err(bad("C_mu must exceed 1"));
                }
                if !(mu_min > 0.0) {
                    return Err(bad("mu_min must be positive"));
                }
                if self.b_norm_iters == 0 {
                    return Err(bad("theoretical damping needs b_norm_iters ≥ 1"));
                }
            }
            MuMode::Practical { mu0, mu_min, mu_max } => {
                if !(mu_min > 0.0 && mu_min <= mu_max) {
                    return Err(bad("need 0 < mu_min ≤ mu_max"));
                }
                if mu0.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
                    return Err(bad("mu0 must be positive"));
                }
            }
            MuMode::DeltaSchedule {
                mu_bar,
                delta,
                mu_min,
                mu_max,
            } => {
                if !(mu_bar > 0.0) || !(delta > 0.0 && delta <= 1.0) {
                    return Err(bad("delta schedule needs mu_bar > 0 and delta in (0, 1]"));
                }
                if !(mu_min > 0.0 && mu_min <= mu_max) {
                    return Err(bad("need 0 < mu_min ≤ mu_max"));
                }
            }
        }
        if let AlphaMode::LineSearch { beta } = self.alpha_mode {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(bad("beta must lie in (0, 1)"));
            }
        }
        if let Some(f) = self.termination.sigma_fractions {
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(bad("sigma fractions must lie in [0, 1]"));
            }
        }
        if self.termination.time_budget_s.is_some_and(|t| !(t >= 0.0)) {
            return Err(bad("time budget must be non-negative"));
        }
        Ok(())
    }
}
