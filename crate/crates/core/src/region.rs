//! Feasible operating region of the interface flow and trajectory-set
//! audits against it.
//!
//! The region is approximated by support points: for each direction `ϑ`
//! the controller is run with the linear objective `−(cos ϑ, sin ϑ)·s_pcc`
//! until it settles on the boundary. Trajectory sets are the ensemble of
//! interface flows reached at a given iteration by a family of runs from a
//! common start.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::controller::{self, Classification, Objective, OfoConfig, Trajectory};
use crate::geometry::{self, Point};
use crate::plant::{ControlInput, Measurement, Plant};

pub const DEFAULT_VERTICES: usize = 36;
pub const EXACT_TOL: f64 = 1e-6;
/// Safety audits accept points within this fraction of the region diameter.
pub const AUDIT_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("need at least 3 directions, got {0}")]
    TooFewVertices(usize),
    #[error("direction {theta_deg}° did not settle ({classification:?}); region construction needs a stable tuning")]
    UnstableDirection { index: usize, theta_deg: f64, classification: Classification },
    #[error("degenerate polygon with {0} vertices")]
    Degenerate(usize),
    #[error("region has zero area")]
    ZeroArea,
    #[error("empty trajectory ensemble")]
    EmptyEnsemble,
    #[error("polygon CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForPolygon {
    /// Support points, counter-clockwise, one per generating angle.
    pub vertices: Vec<Point>,
    /// Generating angles in radians.
    pub angles: Vec<f64>,
    pub resolution_deg: f64,
}

impl ForPolygon {
    pub fn diameter(&self) -> f64 {
        geometry::diameter(&self.vertices)
    }

    pub fn hull(&self) -> Vec<Point> {
        geometry::convex_hull(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        geometry::area(&self.hull())
    }

    /// Audit tolerance: a fixed fraction of the region diameter.
    pub fn audit_tol(&self) -> f64 {
        AUDIT_FRACTION * self.diameter()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), RegionError> {
        writeln!(w, "theta_deg,p,q")?;
        for (theta, (p, q)) in self.angles.iter().zip(&self.vertices) {
            writeln!(w, "{},{p},{q}", theta.to_degrees())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, RegionError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| RegionError::Csv("empty file".into()))??;
        if header.trim() != "theta_deg,p,q" {
            return Err(RegionError::Csv(format!("unexpected header `{header}`")));
        }
        let mut angles = Vec::new();
        let mut vertices = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| RegionError::Csv(format!("line {}: {e}", i + 2)))?;
            let [theta, p, q] = cells[..] else {
                return Err(RegionError::Csv(format!("line {}: expected 3 columns", i + 2)));
            };
            angles.push(theta.to_radians());
            vertices.push((p, q));
        }
        if vertices.len() < 3 {
            return Err(RegionError::Degenerate(vertices.len()));
        }
        let resolution_deg = 360.0 / vertices.len() as f64;
        Ok(ForPolygon { vertices, angles, resolution_deg })
    }
}

/// Angle of vertex `i` out of `n`, in radians.
pub fn vertex_angle(i: usize, n: usize) -> f64 {
    (i as f64 * 360.0 / n as f64).to_radians()
}

/// Builds the region polygon from `n_vertices` directional runs started at
/// `(u0, y0)`. Runs are independent and evaluated in parallel.
pub fn compute_for_polygon(
    plant: &dyn Plant,
    config: &OfoConfig,
    n_vertices: usize,
    u0: &ControlInput,
    y0: &Measurement,
) -> Result<ForPolygon, RegionError> {
    let (polygon, _) = compute_for_polygon_with_runs(plant, config, n_vertices, u0, y0)?;
    Ok(polygon)
}

/// As [`compute_for_polygon`], also returning the directional runs.
pub fn compute_for_polygon_with_runs(
    plant: &dyn Plant,
    config: &OfoConfig,
    n_vertices: usize,
    u0: &ControlInput,
    y0: &Measurement,
) -> Result<(ForPolygon, Vec<Trajectory>), RegionError> {
    if n_vertices < 3 {
        return Err(RegionError::TooFewVertices(n_vertices));
    }
    let angles: Vec<f64> = (0..n_vertices).map(|i| vertex_angle(i, n_vertices)).collect();
    let runs: Vec<Trajectory> = angles
        .par_iter()
        .map(|&theta| controller::run(plant, config, Objective::Direction { theta }, u0, y0))
        .collect();
    for (index, run) in runs.iter().enumerate() {
        if !run.classification.is_stable() || run.iterations_to_converge.is_none() {
            return Err(RegionError::UnstableDirection {
                index,
                theta_deg: angles[index].to_degrees(),
                classification: run.classification,
            });
        }
    }
    let vertices = runs.iter().map(|r| r.last().pcc()).collect();
    Ok((
        ForPolygon { vertices, angles, resolution_deg: 360.0 / n_vertices as f64 },
        runs,
    ))
}

/// Inside the polygon or within `tol` of its boundary.
pub fn contains(f: &ForPolygon, point: Point, tol: f64) -> Result<bool, RegionError> {
    if f.vertices.len() < 3 {
        return Err(RegionError::Degenerate(f.vertices.len()));
    }
    Ok(geometry::point_in_polygon(&f.vertices, point)
        || geometry::distance_to_boundary(&f.vertices, point) <= tol)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectorySet {
    pub k: usize,
    pub points: Vec<Point>,
    pub hull: Vec<Point>,
}

/// Interface flows of every ensemble member at iteration `k`; members that
/// already terminated contribute their final state.
pub fn trajectory_set_at(trajectories: &[Trajectory], k: usize) -> Result<TrajectorySet, RegionError> {
    if trajectories.is_empty() {
        return Err(RegionError::EmptyEnsemble);
    }
    let points: Vec<Point> = trajectories.iter().map(|t| t.pcc_at(k)).collect();
    let hull = geometry::convex_hull(&points);
    Ok(TrajectorySet { k, points, hull })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SafetyViolation {
    pub member: usize,
    pub k: usize,
    pub point: Point,
    /// Distance outside the region.
    pub excess: f64,
}

/// Checks `E(k) ⊂ F` up to `tol`.
pub fn is_safe(e: &TrajectorySet, f: &ForPolygon, tol: f64) -> Result<(bool, Vec<SafetyViolation>), RegionError> {
    let mut violations = Vec::new();
    for (member, &point) in e.points.iter().enumerate() {
        let finite = point.0.is_finite() && point.1.is_finite();
        if !finite || !contains(f, point, tol)? {
            let excess = if finite {
                geometry::distance_to_region(&f.vertices, point)
            } else {
                f64::INFINITY
            };
            violations.push(SafetyViolation { member, k: e.k, point, excess });
        }
    }
    Ok((violations.is_empty(), violations))
}

/// `area(hull(E) ∩ hull(F)) / area(hull(F))`.
pub fn coverage_fraction(e: &TrajectorySet, f: &ForPolygon) -> Result<f64, RegionError> {
    let region = f.hull();
    let total = geometry::area(&region);
    if total <= 0.0 {
        return Err(RegionError::ZeroArea);
    }
    if e.hull.len() < 3 {
        return Ok(0.0);
    }
    let overlap = geometry::area(&geometry::clip_convex(&e.hull, &region));
    Ok((overlap / total).clamp(0.0, 1.0))
}

/// Number of iterations spanned by the longest member.
pub fn horizon(trajectories: &[Trajectory]) -> usize {
    trajectories.iter().map(|t| t.samples.len()).max().unwrap_or(0)
}
