//! JSON problem files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "n_points": 3,
//!   "measurements": [
//!     {"type": "distance",   "indices": [0, 1],    "value": 5.0,  "sigma": 0.01},
//!     {"type": "angle",      "indices": [0, 1, 2], "value": 0.7,  "sigma": 0.0174},
//!     {"type": "point_line", "indices": [2, 0, 1], "value": 1.2,  "sigma": 0.01},
//!     {"type": "coordinate", "indices": [0], "axis": "x", "value": 3.0, "sigma": 1.0}
//!   ],
//!   "ground_truth": [0.0, 0.0, 3.0, 4.0, 1.0, 2.0]
//! }
//! ```
//!
//! Index order follows the [`Measurement`] fields: `[i, j]` for distances,
//! `[i, j, k]` for angles, `[k, i, j]` for point-line distances. Angles are in
//! radians. `ground_truth` is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Axis, Measurement, Problem};

pub const PROBLEM_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Distance,
    Angle,
    PointLine,
    Coordinate,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementRecord {
    #[serde(rename = "type")]
    kind: Kind,
    indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<Axis>,
    value: f64,
    sigma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    #[serde(default = "default_version")]
    version: u32,
    n_points: usize,
    measurements: Vec<MeasurementRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<Vec<f64>>,
}

fn default_version() -> u32 {
    PROBLEM_SCHEMA_VERSION
}

impl From<&Measurement> for MeasurementRecord {
    fn from(m: &Measurement) -> Self {
        let (kind, axis) = match m {
            Measurement::Distance { .. } => (Kind::Distance, None),
            Measurement::Angle { .. } => (Kind::Angle, None),
            Measurement::PointLine { .. } => (Kind::PointLine, None),
            Measurement::Coordinate { axis, .. } => (Kind::Coordinate, Some(*axis)),
        };
        MeasurementRecord {
            kind,
            indices: m.points().to_vec(),
            axis,
            value: m.observed(),
            sigma: m.sigma(),
        }
    }
}

impl MeasurementRecord {
    fn into_measurement(self, pos: usize) -> Result<Measurement> {
        let want = match self.kind {
            Kind::Distance => 2,
            Kind::Angle | Kind::PointLine => 3,
            Kind::Coordinate => 1,
        };
        if self.indices.len() != want {
            return Err(Error::InvalidArgument(format!(
                "measurement {pos}: {:?} needs {want} indices, got {}",
                self.kind,
                self.indices.len()
            )));
        }
        if (self.kind == Kind::Coordinate) != self.axis.is_some() {
            return Err(Error::InvalidArgument(format!(
                "measurement {pos}: `axis` is required for coordinates and only for them"
            )));
        }
        let ix = &self.indices;
        let (value, sigma) = (self.value, self.sigma);
        Ok(match self.kind {
            Kind::Distance => Measurement::Distance {
                i: ix[0],
                j: ix[1],
                d: value,
                sigma,
            },
            Kind::Angle => Measurement::Angle {
                i: ix[0],
                j: ix[1],
                k: ix[2],
                alpha: value,
                sigma,
            },
            Kind::PointLine => Measurement::PointLine {
                k: ix[0],
                i: ix[1],
                j: ix[2],
                d: value,
                sigma,
            },
            Kind::Coordinate => Measurement::Coordinate {
                i: ix[0],
                axis: self.axis.unwrap(),
                value,
                sigma,
            },
        })
    }
}

pub fn problem_from_json(s: &str) -> Result<Problem> {
    let file: ProblemFile = serde_json::from_str(s)?;
    if file.version != PROBLEM_SCHEMA_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported problem schema version {}",
            file.version
        )));
    }
    let measurements = file
        .measurements
        .into_iter()
        .enumerate()
        .map(|(pos, r)| r.into_measurement(pos))
        .collect::<Result<Vec<_>>>()?;
    Problem::new(file.n_points, measurements, file.ground_truth)
}

pub fn problem_to_json(p: &Problem) -> Result<String> {
    let file = ProblemFile {
        version: PROBLEM_SCHEMA_VERSION,
        n_points: p.n_points(),
        measurements: p.measurements().iter().map(MeasurementRecord::from).collect(),
        ground_truth: p.ground_truth().map(<[f64]>::to_vec),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn read_problem(path: impl AsRef<Path>) -> Result<Problem> {
    problem_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_problem(path: impl AsRef<Path>, p: &Problem) -> Result<()> {
    std::fs::write(path, problem_to_json(p)?)?;
    Ok(())
}
