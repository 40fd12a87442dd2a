//! The controller's inner quadratic program.
//!
//! Each iteration picks the update direction `σ` as
//!
//! ```text
//!     σ = argmin_w  ‖w + G⁻¹ Hᵀ ∇Φ‖²_G
//!         s.t.      A (u + α w)       ≤ b
//!                   C (y + α ∇h w)    ≤ d_out
//! ```
//!
//! which is handed to the dense dual active-set solver in [`dual`] as
//! `½ wᵀ G w + (Hᵀ∇Φ)ᵀ w` over the stacked rows `[αA; αC∇h]`.

pub mod dual;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;

pub use dual::kkt_residual;

pub const DEFAULT_SEGMENTS: usize = 16;
pub const DEFAULT_SOFT_PENALTY: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("weighting matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// How output rows enter the QP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum OutputMode {
    #[default]
    Hard,
    /// Each output row gets a slack penalized by `½ ρ s²`.
    Soft { rho: f64 },
}

/// Which operational limits become QP rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintPolicy {
    pub voltage_band: bool,
    pub pcc_rating: bool,
    pub unit_caps: bool,
    /// Facets used for every apparent-power circle.
    pub segments: usize,
    pub output_mode: OutputMode,
}

impl Default for ConstraintPolicy {
    fn default() -> Self {
        ConstraintPolicy {
            voltage_band: true,
            pcc_rating: true,
            unit_caps: true,
            segments: DEFAULT_SEGMENTS,
            output_mode: OutputMode::Hard,
        }
    }
}

/// Origin of a constraint row, for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RowKind {
    InputUpper { channel: usize },
    InputLower { channel: usize },
    UnitCap { unit: usize, facet: usize },
    VoltageUpper { bus: usize },
    VoltageLower { bus: usize },
    PccRating { facet: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d_out: DVector<f64>,
    pub input_rows: Vec<RowKind>,
    pub output_rows: Vec<RowKind>,
    pub output_mode: OutputMode,
}

impl ConstraintSet {
    /// Kind of stacked row `i` (input rows first).
    pub fn row_kind(&self, i: usize) -> RowKind {
        if i < self.input_rows.len() {
            self.input_rows[i]
        } else {
            self.output_rows[i - self.input_rows.len()]
        }
    }

    /// Largest output-row violation `max(C y − d_out)`, clamped at zero.
    pub fn output_violation(&self, y: &DVector<f64>) -> f64 {
        (&self.c * y - &self.d_out).iter().fold(0.0_f64, |a, &v| a.max(v))
    }
}

/// Half-planes `n_k · (x, y) ≤ radius · cos(π/segments)` whose boundary is
/// the regular polygon inscribed in the circle of `radius`.
pub fn circle_facets(radius: f64, segments: usize) -> Vec<((f64, f64), f64)> {
    let offset = radius * (PI / segments as f64).cos();
    (0..segments)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / segments as f64;
            ((theta.cos(), theta.sin()), offset)
        })
        .collect()
}

/// Encodes the unit boxes and caps as `A u ≤ b`, and the voltage band and
/// interface rating as `C y ≤ d_out`.
pub fn build_constraints(net: &Network, policy: &ConstraintPolicy) -> ConstraintSet {
    let m = net.n_units();
    let n_u = 2 * m;
    let n = net.n_buses();
    let n_y = n + 2;

    let mut a_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut input_rows = Vec::new();
    let bounds = |j: usize| {
        let unit = &net.units[j % m];
        if j < m {
            (unit.p_min, unit.p_max)
        } else {
            (unit.q_min, unit.q_max)
        }
    };
    for channel in 0..n_u {
        let (lo, hi) = bounds(channel);
        a_rows.push((vec![(channel, 1.0)], hi));
        input_rows.push(RowKind::InputUpper { channel });
        a_rows.push((vec![(channel, -1.0)], -lo));
        input_rows.push(RowKind::InputLower { channel });
    }
    if policy.unit_caps {
        for (i, unit) in net.units.iter().enumerate() {
            let Some(s_max) = unit.s_max else { continue };
            for (facet, ((np, nq), off)) in circle_facets(s_max, policy.segments).into_iter().enumerate() {
                a_rows.push((vec![(i, np), (m + i, nq)], off));
                input_rows.push(RowKind::UnitCap { unit: i, facet });
            }
        }
    }

    let mut c_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut output_rows = Vec::new();
    if policy.voltage_band {
        for (i, bus) in net.buses.iter().enumerate() {
            c_rows.push((vec![(i, 1.0)], bus.v_max));
            output_rows.push(RowKind::VoltageUpper { bus: i });
            c_rows.push((vec![(i, -1.0)], -bus.v_min));
            output_rows.push(RowKind::VoltageLower { bus: i });
        }
    }
    if policy.pcc_rating {
        let rating = net.pcc_rating();
        for (facet, ((np, nq), off)) in circle_facets(rating, policy.segments).into_iter().enumerate() {
            c_rows.push((vec![(n, np), (n + 1, nq)], off));
            output_rows.push(RowKind::PccRating { facet });
        }
    }

    let dense = |rows: &[(Vec<(usize, f64)>, f64)], cols: usize| {
        let mut mat = DMatrix::zeros(rows.len(), cols);
        let mut rhs = DVector::zeros(rows.len());
        for (i, (entries, bound)) in rows.iter().enumerate() {
            for &(j, v) in entries {
                mat[(i, j)] = v;
            }
            rhs[i] = *bound;
        }
        (mat, rhs)
    };
    let (a, b) = dense(&a_rows, n_u);
    let (c, d_out) = dense(&c_rows, n_y);
    ConstraintSet { a, b, c, d_out, input_rows, output_rows, output_mode: policy.output_mode }
}

/// `G⁻¹ Hᵀ ∇Φ`.
pub fn grad_term(g: &DMatrix<f64>, h_t: &DMatrix<f64>, grad_phi: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    Ok(chol.solve(&(h_t * grad_phi)))
}

/// One instance of the update-direction QP.
#[derive(Clone, Debug)]
pub struct QpProblem<'a> {
    pub g: &'a DMatrix<f64>,
    pub grad_term: DVector<f64>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub c: &'a DMatrix<f64>,
    pub d_out: &'a DVector<f64>,
    pub alpha: f64,
    pub u: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
    pub nabla_h: &'a DMatrix<f64>,
    pub output_mode: OutputMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub sigma: DVector<f64>,
    pub kkt_residual: f64,
    /// Active rows, indexed into `[A; C]`.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    /// Objective value `‖σ + grad_term‖²_G` (slack penalty included in soft mode).
    pub objective: f64,
}

impl QpProblem<'_> {
    fn check(&self) -> Result<(), QpError> {
        let n_u = self.g.nrows();
        let dim = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(QpError::Dimension(what.to_string()))
            }
        };
        dim("G must be square", self.g.is_square())?;
        dim("grad_term length", self.grad_term.len() == n_u)?;
        dim("A columns", self.a.ncols() == n_u)?;
        dim("b length", self.b.len() == self.a.nrows())?;
        dim("u length", self.u.len() == n_u)?;
        dim("sensitivity shape", self.nabla_h.shape() == (self.y.len(), n_u))?;
        dim("C columns", self.c.ncols() == self.y.len())?;
        dim("d_out length", self.d_out.len() == self.c.nrows())?;
        if (self.g - self.g.transpose()).amax() > 1e-12 * self.g.amax().max(1.0) {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(())
    }
}

pub fn solve_qp(problem: &QpProblem<'_>) -> Result<QpSolution, QpError> {
    problem.check()?;
    let n_u = problem.g.nrows();
    let alpha = problem.alpha;
    let m_in = problem.a.nrows();
    let m_out = problem.c.nrows();
    let n_slack = match problem.output_mode {
        OutputMode::Hard => 0,
        OutputMode::Soft { .. } => m_out,
    };
    let n = n_u + n_slack;

    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (n_u, n_u)).copy_from(problem.g);
    if let OutputMode::Soft { rho } = problem.output_mode {
        for i in 0..n_slack {
            h[(n_u + i, n_u + i)] = rho;
        }
    }
    let mut lin = DVector::zeros(n);
    lin.rows_mut(0, n_u).copy_from(&(problem.g * &problem.grad_term));

    let mut rows = DMatrix::zeros(m_in + m_out, n);
    let mut rhs = DVector::zeros(m_in + m_out);
    rows.view_mut((0, 0), (m_in, n_u)).copy_from(&(problem.a * alpha));
    rhs.rows_mut(0, m_in).copy_from(&(problem.b - problem.a * problem.u));
    rows.view_mut((m_in, 0), (m_out, n_u))
        .copy_from(&(problem.c * problem.nabla_h * alpha));
    rhs.rows_mut(m_in, m_out).copy_from(&(problem.d_out - problem.c * problem.y));
    for i in 0..n_slack {
        rows[(m_in + i, n_u + i)] = -1.0;
    }

    let sol = dual::solve(&h, &lin, &rows, &rhs, 100 * n_u.max(1))
        .ok_or(QpError::NotPositiveDefinite)?;
    let status = match sol.status {
        dual::Status::Optimal => QpStatus::Optimal,
        dual::Status::Infeasible => QpStatus::Infeasible,
        dual::Status::MaxIter => QpStatus::MaxIter,
    };
    let kkt = kkt_residual(&h, &lin, &rows, &rhs, &sol.x, &sol.lambda);
    let sigma = sol.x.rows(0, n_u).into_owned();
    let shifted = &sigma + &problem.grad_term;
    let mut objective = shifted.dot(&(problem.g * &shifted));
    if let OutputMode::Soft { rho } = problem.output_mode {
        objective += rho * sol.x.rows(n_u, n_slack).norm_squared();
    }
    let mut active_set = sol.active;
    active_set.sort_unstable();
    Ok(QpSolution { sigma, kkt_residual: kkt, active_set, status, objective })
}
