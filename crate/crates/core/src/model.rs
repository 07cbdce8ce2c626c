//! Network-adjustment least-squares model.
//!
//! Points live in the plane; point `p` owns variables `2p` (x) and `2p + 1` (y).
//! Every measurement contributes one residual `r = (model(x) - observed) / sigma`,
//! and the objective is `F(x) = ½ ‖R(x)‖²`.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Minimum evaluation chunk handed to a worker when residuals are computed in parallel.
const PAR_MIN_LEN: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn offset(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

/// A single weighted observation.
#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    /// Euclidean distance between `i` and `j`.
    Distance { i: usize, j: usize, d: f64, sigma: f64 },
    /// `atan2(P_k - P_j) - atan2(P_k - P_i)`, wrapped to (−π, π], in radians.
    Angle {
        i: usize,
        j: usize,
        k: usize,
        alpha: f64,
        sigma: f64,
    },
    /// Distance from `k` to the line through `i` and `j`.
    PointLine {
        k: usize,
        i: usize,
        j: usize,
        d: f64,
        sigma: f64,
    },
    /// Direct observation of one coordinate of `i`.
    Coordinate {
        i: usize,
        axis: Axis,
        value: f64,
        sigma: f64,
    },
}

/// Degenerate geometry or a non-finite result while evaluating one measurement.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{0}")]
pub struct Degenerate(pub &'static str);

/// Nonzeros of one Jacobian row, sorted by column. At most three points (six
/// variables) take part in a measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseRow {
    cols: [usize; 6],
    vals: [f64; 6],
    len: usize,
}

impl SparseRow {
    fn from_points(points: &[(usize, [f64; 2])]) -> Self {
        let mut entries = [(0usize, 0.0f64); 6];
        let mut len = 0;
        for &(p, [gx, gy]) in points {
            entries[len] = (2 * p, gx);
            entries[len + 1] = (2 * p + 1, gy);
            len += 2;
        }
        entries[..len].sort_unstable_by_key(|e| e.0);
        let mut cols = [0; 6];
        let mut vals = [0.0; 6];
        for (n, (c, v)) in entries[..len].iter().enumerate() {
            cols[n] = *c;
            vals[n] = *v;
        }
        Self { cols, vals, len }
    }

    fn single(col: usize, val: f64) -> Self {
        let mut cols = [0; 6];
        let mut vals = [0.0; 6];
        cols[0] = col;
        vals[0] = val;
        Self { cols, vals, len: 1 }
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols[..self.len]
    }

    pub fn vals(&self) -> &[f64] {
        &self.vals[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Value at column `c` (zero if absent).
    pub fn get(&self, c: usize) -> f64 {
        self.cols()
            .iter()
            .position(|&k| k == c)
            .map(|p| self.vals[p])
            .unwrap_or(0.0)
    }
}

/// Maps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(TAU);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

#[inline]
fn point(x: &[f64], p: usize) -> [f64; 2] {
    [x[2 * p], x[2 * p + 1]]
}

fn finite(v: f64, what: &'static str) -> std::result::Result<f64, Degenerate> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Degenerate(what))
    }
}

impl Measurement {
    pub fn sigma(&self) -> f64 {
        match *self {
            Measurement::Distance { sigma, .. }
            | Measurement::Angle { sigma, .. }
            | Measurement::PointLine { sigma, .. }
            | Measurement::Coordinate { sigma, .. } => sigma,
        }
    }

    /// Observed value in the measurement's native unit.
    pub fn observed(&self) -> f64 {
        match *self {
            Measurement::Distance { d, .. } | Measurement::PointLine { d, .. } => d,
            Measurement::Angle { alpha, .. } => alpha,
            Measurement::Coordinate { value, .. } => value,
        }
    }

    pub fn with_observed(&self, v: f64) -> Measurement {
        let mut m = self.clone();
        match &mut m {
            Measurement::Distance { d, .. } | Measurement::PointLine { d, .. } => *d = v,
            Measurement::Angle { alpha, .. } => *alpha = v,
            Measurement::Coordinate { value, .. } => *value = v,
        }
        m
    }

    /// Same measurement with every point index passed through `f`.
    pub fn map_points(&self, f: impl Fn(usize) -> usize) -> Measurement {
        match *self {
            Measurement::Distance { i, j, d, sigma } => Measurement::Distance {
                i: f(i),
                j: f(j),
                d,
                sigma,
            },
            Measurement::Angle { i, j, k, alpha, sigma } => Measurement::Angle {
                i: f(i),
                j: f(j),
                k: f(k),
                alpha,
                sigma,
            },
            Measurement::PointLine { k, i, j, d, sigma } => Measurement::PointLine {
                k: f(k),
                i: f(i),
                j: f(j),
                d,
                sigma,
            },
            Measurement::Coordinate { i, axis, value, sigma } => Measurement::Coordinate {
                i: f(i),
                axis,
                value,
                sigma,
            },
        }
    }

    /// Point indices taking part, in declaration order.
    pub fn points(&self) -> PointList {
        match *self {
            Measurement::Distance { i, j, .. } => PointList::two(i, j),
            Measurement::Angle { i, j, k, .. } => PointList::three(i, j, k),
            Measurement::PointLine { k, i, j, .. } => PointList::three(k, i, j),
            Measurement::Coordinate { i, .. } => PointList::one(i),
        }
    }

    /// Unweighted model value `h(x)` so that the raw residual is `h(x) - observed`.
    pub fn model_value(&self, x: &[f64]) -> std::result::Result<f64, Degenerate> {
        let v = match *self {
            Measurement::Distance { i, j, .. } => {
                let [xi, yi] = point(x, i);
                let [xj, yj] = point(x, j);
                (xi - xj).hypot(yi - yj)
            }
            Measurement::Angle { i, j, k, .. } => {
                let [xi, yi] = point(x, i);
                let [xj, yj] = point(x, j);
                let [xk, yk] = point(x, k);
                if (xk == xj && yk == yj) || (xk == xi && yk == yi) {
                    return Err(Degenerate("angle arm has zero length"));
                }
                wrap_angle((yk - yj).atan2(xk - xj) - (yk - yi).atan2(xk - xi))
            }
            Measurement::PointLine { k, i, j, .. } => {
                let [xi, yi] = point(x, i);
                let [xj, yj] = point(x, j);
                let [xk, yk] = point(x, k);
                let len = (xi - xj).hypot(yi - yj);
                if len == 0.0 {
                    return Err(Degenerate("line through coincident points"));
                }
                let cross = (xj - xi) * (yi - yk) - (xi - xk) * (yj - yi);
                cross.abs() / len
            }
            Measurement::Coordinate { i, axis, .. } => x[2 * i + axis.offset()],
        };
        finite(v, "non-finite model value")
    }

    /// Weighted residual `(h(x) - observed) / sigma`.
    pub fn residual(&self, x: &[f64]) -> std::result::Result<f64, Degenerate> {
        let r = (self.model_value(x)? - self.observed()) / self.sigma();
        finite(r, "non-finite residual")
    }

    /// Analytic gradient of [`Measurement::residual`] as a sparse row over
    /// all involved variables (entries are present even when zero).
    pub fn residual_gradient(&self, x: &[f64]) -> std::result::Result<SparseRow, Degenerate> {
        let w = 1.0 / self.sigma();
        let row = match *self {
            Measurement::Distance { i, j, .. } => {
                let [xi, yi] = point(x, i);
                let [xj, yj] = point(x, j);
                let (dx, dy) = (xi - xj, yi - yj);
                let len = dx.hypot(dy);
                if len == 0.0 {
                    return Err(Degenerate("coincident points in distance"));
                }
                let (ux, uy) = (w * dx / len, w * dy / len);
                SparseRow::from_points(&[(i, [ux, uy]), (j, [-ux, -uy])])
            }
            Measurement::Angle { i, j, k, .. } => {
                let [xi, yi] = point(x, i);
                let [xj, yj] = point(x, j);
                let [xk, yk] = point(x, k);
                let (ax, ay) = (xk - xj, yk - yj);
                let (bx, by) = (xk - xi, yk - yi);
                let a2 = ax * ax + ay * ay;
                let b2 = bx * bx + by * by;
                if a2 == 0.0 || b2 == 0.0 {
                    return Err(Degenerate("angle arm has zero length"));
                }
                // d atan2(v) / dv = (-v_y, v_x) / |v|²
                let da = [-ay / a2, ax / a2];
                let db = [-by / b2, bx / b2];
                SparseRow::from_points(&[
                    (i, [w * db[0], w * db[1]]),
                    (j, [-w * da[0], -w * da[1]]),
                    (k, [w * (da[0] - db[0]), w * (da[1] - db[1])]),
                ])
            }
            Measurement::PointLine { k, i, j, .. } => {
                let [xi, yi] = point(x, i);
                let [xj, yj] = point(x, j);
                let [xk, yk] = point(x, k);
                let (lx, ly) = (xi - xj, yi - yj);
                let len = lx.hypot(ly);
                if len == 0.0 {
                    return Err(Degenerate("line through coincident points"));
                }
                let cross = (xj - xi) * (yi - yk) - (xi - xk) * (yj - yi);
                let s = if cross < 0.0 { -1.0 } else { 1.0 };
                let dc_i = [yk - yj, xj - xk];
                let dc_j = [yi - yk, xk - xi];
                let dc_k = [yj - yi, xi - xj];
                let dl_i = [lx / len, ly / len];
                let l2 = len * len;
                let f = |dc: [f64; 2], dl: [f64; 2]| {
                    [
                        w * s * (dc[0] / len - cross * dl[0] / l2),
                        w * s * (dc[1] / len - cross * dl[1] / l2),
                    ]
                };
                SparseRow::from_points(&[
                    (i, f(dc_i, dl_i)),
                    (j, f(dc_j, [-dl_i[0], -dl_i[1]])),
                    (k, f(dc_k, [0.0, 0.0])),
                ])
            }
            Measurement::Coordinate { i, axis, .. } => SparseRow::single(2 * i + axis.offset(), w),
        };
        if row.vals().iter().all(|v| v.is_finite()) {
            Ok(row)
        } else {
            Err(Degenerate("non-finite derivative"))
        }
    }
}

/// Point indices of one measurement; fixed capacity so `points()` does not allocate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointList {
    ids: [usize; 3],
    len: usize,
}

impl PointList {
    fn one(a: usize) -> Self {
        Self { ids: [a, 0, 0], len: 1 }
    }
    fn two(a: usize, b: usize) -> Self {
        Self { ids: [a, b, 0], len: 2 }
    }
    fn three(a: usize, b: usize, c: usize) -> Self {
        Self { ids: [a, b, c], len: 3 }
    }
}

impl std::ops::Deref for PointList {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

/// A weighted nonlinear least-squares network-adjustment problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    n_points: usize,
    measurements: Vec<Measurement>,
    ground_truth: Option<Vec<f64>>,
}

impl Problem {
    pub fn new(n_points: usize, measurements: Vec<Measurement>, ground_truth: Option<Vec<f64>>) -> Result<Self> {
        if measurements.is_empty() {
            return Err(Error::InvalidArgument("problem has no measurements".into()));
        }
        let mut referenced = vec![false; n_points];
        for (idx, m) in measurements.iter().enumerate() {
            let pts = m.points();
            for (a, &p) in pts.iter().enumerate() {
                if p >= n_points {
                    return Err(Error::InvalidArgument(format!(
                        "measurement {idx}: point {p} out of range (n_points = {n_points})"
                    )));
                }
                if pts[..a].contains(&p) {
                    return Err(Error::InvalidArgument(format!("measurement {idx}: point {p} repeated")));
                }
                referenced[p] = true;
            }
            let sigma = m.sigma();
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "measurement {idx}: sigma must be positive and finite, got {sigma}"
                )));
            }
            if !m.observed().is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "measurement {idx}: observed value is not finite"
                )));
            }
        }
        if let Some(p) = referenced.iter().position(|r| !r) {
            return Err(Error::InvalidArgument(format!(
                "point {p} is not referenced by any measurement"
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != 2 * n_points {
                return Err(Error::InvalidArgument(format!(
                    "ground truth has length {}, expected {}",
                    gt.len(),
                    2 * n_points
                )));
            }
        }
        Ok(Self {
            n_points,
            measurements,
            ground_truth,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Number of scalar variables, `2 · n_points`.
    pub fn n_vars(&self) -> usize {
        2 * self.n_points
    }

    /// Number of residuals.
    pub fn m(&self) -> usize {
        self.measurements.len()
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn ground_truth(&self) -> Option<&[f64]> {
        self.ground_truth.as_deref()
    }

    pub fn without_ground_truth(mut self) -> Self {
        self.ground_truth = None;
        self
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_vars() {
            return Err(Error::InvalidArgument(format!(
                "coordinate vector has length {}, expected {}",
                x.len(),
                self.n_vars()
            )));
        }
        Ok(())
    }

    /// Weighted residual vector `R(x)` in measurement order.
    pub fn residuals(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        self.measurements
            .par_iter()
            .with_min_len(PAR_MIN_LEN)
            .enumerate()
            .map(|(idx, m)| m.residual(x).map_err(|e| Error::eval(idx, e.0)))
            .collect()
    }

    /// Sparse Jacobian of `R` with one row per measurement.
    pub fn jacobian(&self, x: &[f64]) -> Result<CsrMatrix> {
        self.check_len(x)?;
        let rows: Vec<SparseRow> = self
            .measurements
            .par_iter()
            .with_min_len(PAR_MIN_LEN)
            .enumerate()
            .map(|(idx, m)| m.residual_gradient(x).map_err(|e| Error::eval(idx, e.0)))
            .collect::<Result<_>>()?;
        let nnz = rows.iter().map(SparseRow::len).sum();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in &rows {
            col_idx.extend_from_slice(row.cols());
            values.extend_from_slice(row.vals());
            row_ptr.push(col_idx.len());
        }
        Ok(CsrMatrix::new(self.m(), self.n_vars(), row_ptr, col_idx, values))
    }

    /// `F(x) = ½ ‖R(x)‖²`.
    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        Ok(half_squared_norm(&self.residuals(x)?))
    }

    /// `g(x) = J(x)ᵀ R(x)`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.residuals(x)?;
        Ok(self.jacobian(x)?.mul_transpose_vec(&r))
    }

    /// Default starting point: the inverse-variance weighted mean of the
    /// coordinate observations of each point and axis, zero where none exist.
    pub fn initial_guess(&self) -> Vec<f64> {
        let mut num = vec![0.0; self.n_vars()];
        let mut den = vec![0.0; self.n_vars()];
        for m in &self.measurements {
            if let Measurement::Coordinate { i, axis, value, sigma } = *m {
                let v = 2 * i + axis.offset();
                let w = 1.0 / (sigma * sigma);
                num[v] += w * value;
                den[v] += w;
            }
        }
        num.iter()
            .zip(&den)
            .map(|(&n, &d)| if d > 0.0 { n / d } else { 0.0 })
            .collect()
    }
}

/// `½ ‖r‖²` with a fixed left-to-right summation order.
pub fn half_squared_norm(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}
