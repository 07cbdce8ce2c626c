//! Synthetic network-adjustment problems with known ground truth.
//!
//! Points are sampled without replacement from a regular `2√n̂ × 2√n̂` grid
//! (25% occupancy) whose spacing is configurable. Observations pick their points with a
//! distance-decaying kernel, so couplings stay local, and carry Gaussian
//! noise around the true value. Each point also gets one coordinate
//! observation per axis.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{wrap_angle, Axis, Measurement, Problem};

/// Angles closer than this to 0 or π are rejected as near-collinear.
const COLLINEAR_MARGIN: f64 = 0.05;
/// Point-line observations whose true distance is below this many grid
/// spacings are rejected (the residual is not differentiable on the line).
const MIN_POINT_LINE_DIST: f64 = 0.5;
/// The selection kernel is truncated at this many decay lengths.
const KERNEL_CUTOFF: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    #[default]
    Degrees,
    Radians,
}

/// Relative frequency of each non-coordinate observation type. The default
/// is distance-heavy, consistent with about two points per observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMix {
    pub distance: f64,
    pub angle: f64,
    pub point_line: f64,
}

impl Default for MeasurementMix {
    fn default() -> Self {
        Self {
            distance: 8.0,
            angle: 1.0,
            point_line: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_hat: usize,
    pub seed: u64,
    /// Distance between neighbouring grid nodes, in the units of the observations.
    pub grid_spacing: f64,
    pub sigma_dist: f64,
    pub sigma_point_line: f64,
    /// In `angle_unit`.
    pub sigma_angle: f64,
    pub angle_unit: AngleUnit,
    pub sigma_coord_loose: f64,
    pub sigma_coord_tight: f64,
    pub tight_fraction: f64,
    /// Stop once the mean number of non-coordinate observations per point reaches this.
    pub avg_obs_per_point: f64,
    pub mix: MeasurementMix,
    /// Decay length λ of the pair-selection kernel `exp(−dist/λ)`, in grid spacings.
    pub decay_length: f64,
    /// Multiplies every noise draw; 0 yields exact observations.
    pub noise_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_hat: 100,
            seed: 0,
            grid_spacing: 20.0,
            sigma_dist: 0.01,
            sigma_point_line: 0.01,
            sigma_angle: 1.0,
            angle_unit: AngleUnit::Degrees,
            sigma_coord_loose: 1.0,
            sigma_coord_tight: 0.01,
            tight_fraction: 0.01,
            avg_obs_per_point: 6.0,
            mix: MeasurementMix::default(),
            decay_length: 2.0,
            noise_scale: 1.0,
        }
    }
}

impl GenConfig {
    pub fn new(n_hat: usize, seed: u64) -> Self {
        Self {
            n_hat,
            seed,
            ..Self::default()
        }
    }

    /// Side of the sampling grid, `2√n̂`.
    pub fn grid_side(&self) -> Result<usize> {
        let root = (self.n_hat as f64).sqrt().round() as usize;
        if self.n_hat < 4 || root * root != self.n_hat {
            return Err(Error::InvalidArgument(format!(
                "n_hat must be a perfect square of at least 4, got {}",
                self.n_hat
            )));
        }
        Ok(2 * root)
    }

    fn validate(&self) -> Result<()> {
        self.grid_side()?;
        let positive = [
            ("sigma_dist", self.sigma_dist),
            ("sigma_point_line", self.sigma_point_line),
            ("sigma_angle", self.sigma_angle),
            ("sigma_coord_loose", self.sigma_coord_loose),
            ("sigma_coord_tight", self.sigma_coord_tight),
            ("decay_length", self.decay_length),
            ("grid_spacing", self.grid_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.tight_fraction) {
            return Err(Error::InvalidArgument("tight_fraction must lie in [0, 1]".into()));
        }
        if !(self.avg_obs_per_point >= 0.0 && self.avg_obs_per_point.is_finite()) {
            return Err(Error::InvalidArgument("avg_obs_per_point must be non-negative".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument("noise_scale must be non-negative".into()));
        }
        let m = self.mix;
        if [m.distance, m.angle, m.point_line]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
            || m.distance + m.angle + m.point_line <= 0.0
        {
            return Err(Error::InvalidArgument(
                "measurement mix weights must be non-negative and not all zero".into(),
            ));
        }
        Ok(())
    }

    fn sigma_angle_radians(&self) -> f64 {
        match self.angle_unit {
            AngleUnit::Degrees => self.sigma_angle.to_radians(),
            AngleUnit::Radians => self.sigma_angle,
        }
    }
}

/// Uniform bucket grid over point positions for radius queries.
struct CellIndex {
    cell: f64,
    dim: usize,
    buckets: Vec<Vec<usize>>,
}

impl CellIndex {
    fn new(pos: &[[f64; 2]], extent: f64, cell: f64) -> Self {
        let dim = ((extent / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); dim * dim];
        for (p, &[x, y]) in pos.iter().enumerate() {
            buckets[Self::coord(x, cell, dim) * dim + Self::coord(y, cell, dim)].push(p);
        }
        Self { cell, dim, buckets }
    }

    fn coord(v: f64, cell: f64, dim: usize) -> usize {
        ((v / cell).floor().max(0.0) as usize).min(dim - 1)
    }

    /// Points within one cell ring of `at`, in a deterministic order.
    fn around(&self, at: [f64; 2], out: &mut Vec<usize>) {
        out.clear();
        let cx = Self::coord(at[0], self.cell, self.dim) as isize;
        let cy = Self::coord(at[1], self.cell, self.dim) as isize;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < self.dim && (y as usize) < self.dim {
                    out.extend_from_slice(&self.buckets[x as usize * self.dim + y as usize]);
                }
            }
        }
    }
}

struct Sampler<'a> {
    pos: &'a [[f64; 2]],
    index: CellIndex,
    decay: f64,
    cutoff: f64,
    scratch: Vec<usize>,
    weights: Vec<f64>,
}

impl Sampler<'_> {
    /// Draws a point other than those in `exclude`, with probability
    /// ∝ exp(−dist(anchor, ·)/λ) inside the cutoff radius.
    fn near(&mut self, anchor: usize, exclude: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
        let a = self.pos[anchor];
        self.index.around(a, &mut self.scratch);
        self.scratch.retain(|p| !exclude.contains(p));
        self.weights.clear();
        let mut total = 0.0;
        for &p in &self.scratch {
            let d = dist(a, self.pos[p]);
            let w = if d <= self.cutoff { (-d / self.decay).exp() } else { 0.0 };
            total += w;
            self.weights.push(total);
        }
        if total <= 0.0 {
            return None;
        }
        let u = rng.random::<f64>() * total;
        let t = self.weights.partition_point(|&c| c <= u).min(self.scratch.len() - 1);
        Some(self.scratch[t])
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Builds a problem according to `cfg`; deterministic in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Problem> {
    cfg.validate()?;
    let side = cfg.grid_side()?;
    let n = cfg.n_hat;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let cells = index::sample(&mut rng, side * side, n);
    let h = cfg.grid_spacing;
    let pos: Vec<[f64; 2]> = cells
        .iter()
        .map(|c| [(c / side) as f64 * h, (c % side) as f64 * h])
        .collect();
    let truth: Vec<f64> = pos.iter().flat_map(|p| [p[0], p[1]]).collect();

    let cutoff = KERNEL_CUTOFF * cfg.decay_length * h;
    let mut sampler = Sampler {
        pos: &pos,
        index: CellIndex::new(&pos, side as f64 * h, cutoff),
        decay: cfg.decay_length * h,
        cutoff,
        scratch: Vec::new(),
        weights: Vec::new(),
    };
    let noise = |rng: &mut ChaCha8Rng, sigma: f64| {
        let z: f64 = StandardNormal.sample(rng);
        cfg.noise_scale * sigma * z
    };
    let sigma_angle = cfg.sigma_angle_radians();
    let kinds = WeightedIndex::new([cfg.mix.distance, cfg.mix.angle, cfg.mix.point_line])
        .map_err(|e| Error::InvalidArgument(format!("measurement mix: {e}")))?;

    let target = cfg.avg_obs_per_point * n as f64;
    let max_attempts = 1000 + 100 * (target.ceil() as usize);
    let mut measurements = Vec::new();
    let mut incidences = 0usize;
    let mut attempts = 0usize;
    while (incidences as f64) < target {
        attempts += 1;
        if attempts > max_attempts {
            log::warn!("generator gave up after {max_attempts} attempts with {incidences} incidences");
            break;
        }
        let i = rng.random_range(0..n);
        let Some(j) = sampler.near(i, &[i], &mut rng) else {
            continue;
        };
        let m = match kinds.sample(&mut rng) {
            0 => {
                let d = dist(pos[i], pos[j]);
                Measurement::Distance {
                    i,
                    j,
                    d: d + noise(&mut rng, cfg.sigma_dist),
                    sigma: cfg.sigma_dist,
                }
            }
            kind => {
                let Some(k) = sampler.near(i, &[i, j], &mut rng) else {
                    continue;
                };
                if kind == 1 {
                    let m = Measurement::Angle {
                        i,
                        j,
                        k,
                        alpha: 0.0,
                        sigma: sigma_angle,
                    };
                    let a = m
                        .model_value(&truth)
                        .map_err(|e| Error::eval(measurements.len(), e.0))?;
                    if a.abs() < COLLINEAR_MARGIN || a.abs() > PI - COLLINEAR_MARGIN {
                        continue;
                    }
                    m.with_observed(wrap_angle(a + noise(&mut rng, sigma_angle)))
                } else {
                    // distance from k to the line through i and j
                    let m = Measurement::PointLine {
                        k,
                        i,
                        j,
                        d: 0.0,
                        sigma: cfg.sigma_point_line,
                    };
                    let d = m
                        .model_value(&truth)
                        .map_err(|e| Error::eval(measurements.len(), e.0))?;
                    if d < MIN_POINT_LINE_DIST * h {
                        continue;
                    }
                    m.with_observed(d + noise(&mut rng, cfg.sigma_point_line))
                }
            }
        };
        incidences += m.points().len();
        measurements.push(m);
    }

    let n_tight = (cfg.tight_fraction * n as f64).round() as usize;
    let mut tight = vec![false; n];
    for p in index::sample(&mut rng, n, n_tight) {
        tight[p] = true;
    }
    for p in 0..n {
        let sigma = if tight[p] {
            cfg.sigma_coord_tight
        } else {
            cfg.sigma_coord_loose
        };
        for axis in [Axis::X, Axis::Y] {
            let value = truth[2 * p + axis.offset()] + noise(&mut rng, sigma);
            measurements.push(Measurement::Coordinate {
                i: p,
                axis,
                value,
                sigma,
            });
        }
    }
    Problem::new(n, measurements, Some(truth))
}

/// Per-type counts of a problem's measurements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MeasurementCounts {
    pub distance: usize,
    pub angle: usize,
    pub point_line: usize,
    pub coordinate: usize,
}

impl MeasurementCounts {
    pub fn of(p: &Problem) -> Self {
        let mut c = Self::default();
        for m in p.measurements() {
            match m {
                Measurement::Distance { .. } => c.distance += 1,
                Measurement::Angle { .. } => c.angle += 1,
                Measurement::PointLine { .. } => c.point_line += 1,
                Measurement::Coordinate { .. } => c.coordinate += 1,
            }
        }
        c
    }
}

/// Mean number of non-coordinate observations each point takes part in.
pub fn mean_incidence(p: &Problem) -> f64 {
    let total: usize = p
        .measurements()
        .iter()
        .filter(|m| !matches!(m, Measurement::Coordinate { .. }))
        .map(|m| m.points().len())
        .sum();
    total as f64 / p.n_points() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorQuantiles {
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateError {
    /// `|x_i − x*_i|` for every variable.
    pub errors: Vec<f64>,
    pub quantiles: ErrorQuantiles,
}

/// Linearly interpolated quantile of sorted data (`q ∈ [0, 1]`).
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Per-variable absolute error against the ground truth, with summary quantiles.
pub fn coordinate_error(x: &[f64], ground_truth: Option<&[f64]>) -> Result<CoordinateError> {
    let gt = ground_truth.ok_or_else(|| Error::Unavailable("ground truth".into()))?;
    if gt.len() != x.len() || x.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "coordinate vector has length {}, ground truth {}",
            x.len(),
            gt.len()
        )));
    }
    let errors: Vec<f64> = x.iter().zip(gt).map(|(a, b)| (a - b).abs()).collect();
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = ErrorQuantiles {
        median: quantile_sorted(&sorted, 0.5),
        p90: quantile_sorted(&sorted, 0.9),
        p99: quantile_sorted(&sorted, 0.99),
        max: sorted[sorted.len() - 1],
    };
    Ok(CoordinateError { errors, quantiles })
}

/// Equal-width histogram of `values` over `[0, max]`: `(lower edge, upper edge, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b as f64 * width, (b + 1) as f64 * width, c))
        .collect()
}
