//! Closed-loop online feedback optimization.
//!
//! One iteration measures `y(k)`, evaluates `∇Φ`, solves the update QP
//! for `σ(k)` and integrates `u(k+1) = u(k) + α σ(k)`, after which the
//! plant settles to `y(k+1)`.

use std::borrow::Cow;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{ControlInput, Measurement, Plant, PlantError};
use crate::qp::{self, ConstraintSet, QpError, QpProblem, QpSolution, QpStatus};
use crate::sensitivity::{self, SensitivityError, SensitivityModel};

pub const DEFAULT_CONV_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 2000;
pub const CYCLE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchTarget {
    pub p_set: f64,
    pub q_set: f64,
}

/// What the loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Objective {
    /// `Φ = ‖s_set − s_pcc‖²`.
    Track(DispatchTarget),
    /// `Φ = −(cos ϑ p_pcc + sin ϑ q_pcc)`; its minimizer over the feasible
    /// region is the support point in direction `ϑ` (radians).
    Direction { theta: f64 },
}

impl Objective {
    pub fn phi(&self, y: &Measurement) -> f64 {
        let (p, q) = y.pcc();
        match *self {
            Objective::Track(t) => (t.p_set - p).powi(2) + (t.q_set - q).powi(2),
            Objective::Direction { theta } => -(theta.cos() * p + theta.sin() * q),
        }
    }

    /// Distance from the interface flow to the target, if there is one.
    pub fn target_distance(&self, y: &Measurement) -> Option<f64> {
        let (p, q) = y.pcc();
        match *self {
            Objective::Track(t) => Some((t.p_set - p).hypot(t.q_set - q)),
            Objective::Direction { .. } => None,
        }
    }

    /// Stacked gradient `[∂Φ/∂u; ∂Φ/∂y]` of length `n_u + n_y`.
    pub fn gradient(&self, y: &Measurement, n_u: usize) -> DVector<f64> {
        match *self {
            Objective::Track(t) => grad_phi(y, &t, n_u),
            Objective::Direction { theta } => {
                let n_y = y.y.len();
                let mut g = DVector::zeros(n_u + n_y);
                g[n_u + n_y - 2] = -theta.cos();
                g[n_u + n_y - 1] = -theta.sin();
                g
            }
        }
    }
}

/// Gradient of `‖s_set − s_pcc‖²`; only the interface entries are nonzero.
pub fn grad_phi(y: &Measurement, target: &DispatchTarget, n_u: usize) -> DVector<f64> {
    let n_y = y.y.len();
    let (p, q) = y.pcc();
    let mut g = DVector::zeros(n_u + n_y);
    g[n_u + n_y - 2] = -2.0 * (target.p_set - p);
    g[n_u + n_y - 1] = -2.0 * (target.q_set - q);
    g
}

#[derive(Clone, Debug)]
pub struct OfoConfig {
    pub alpha: f64,
    pub g: DMatrix<f64>,
    pub sensitivity: SensitivityModel,
    pub constraints: ConstraintSet,
    pub max_iter: usize,
    pub conv_tol: f64,
    /// Recompute `∇h` at the current input every this many iterations.
    pub relinearize_every: Option<usize>,
    pub sensitivity_step: f64,
    /// Scale above which measurements count as runaway (`10 ×` this).
    pub grid_scale: f64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("gain must be positive and finite, got {0}")]
    Gain(f64),
    #[error("weighting matrix must be symmetric positive definite")]
    Weighting,
    #[error("iteration budget must be at least 1")]
    Budget,
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
}

impl OfoConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ConfigError::Gain(self.alpha));
        }
        let n_u = self.sensitivity.n_inputs();
        if self.g.shape() != (n_u, n_u) {
            return Err(ConfigError::Dimension("G must be n_u × n_u"));
        }
        if (&self.g - self.g.transpose()).amax() > 1e-12 * self.g.amax().max(1.0)
            || self.g.clone().cholesky().is_none()
        {
            return Err(ConfigError::Weighting);
        }
        if self.max_iter < 1 {
            return Err(ConfigError::Budget);
        }
        if self.constraints.a.ncols() != n_u || self.constraints.c.ncols() != self.sensitivity.n_outputs() {
            return Err(ConfigError::Dimension("constraint matrices do not match the sensitivity"));
        }
        Ok(())
    }

    fn tolerances(&self) -> ClassifyTolerances {
        ClassifyTolerances { conv_tol: self.conv_tol, eps_cycle: CYCLE_EPS, grid_scale: self.grid_scale }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    StableConverged,
    StableConstrained,
    Oscillatory,
    Divergent,
}

impl Classification {
    pub fn is_stable(self) -> bool {
        matches!(self, Classification::StableConverged | Classification::StableConstrained)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Classification::StableConverged => "stable-converged",
            Classification::StableConstrained => "stable-constrained",
            Classification::Oscillatory => "oscillatory",
            Classification::Divergent => "divergent",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub k: usize,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub converged: bool,
    pub phi: f64,
    pub target_distance: Option<f64>,
    /// Update direction computed at this state; empty when none was.
    pub sigma: DVector<f64>,
    pub active: Vec<usize>,
    pub qp_status: Option<QpStatus>,
}

impl Sample {
    pub fn pcc(&self) -> (f64, f64) {
        let n = self.y.len();
        (self.y[n - 2], self.y[n - 1])
    }

    pub fn sigma_norm(&self) -> f64 {
        if self.sigma.is_empty() {
            f64::NAN
        } else {
            self.sigma.norm()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub objective: Objective,
    pub samples: Vec<Sample>,
    pub classification: Classification,
    pub iterations_to_converge: Option<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Interface flow at iteration `k`, or the final one if the run ended earlier.
    pub fn pcc_at(&self, k: usize) -> (f64, f64) {
        self.samples.get(k).unwrap_or_else(|| self.last()).pcc()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        let first = &self.samples[0];
        if header {
            let mut cols = vec!["k".to_string()];
            cols.extend((0..first.u.len()).map(|i| format!("u{i}")));
            cols.extend((0..first.y.len()).map(|i| format!("y{i}")));
            cols.extend(["phi", "sigma_norm", "n_active", "classification"].map(String::from));
            writeln!(w, "{}", cols.join(","))?;
        }
        for s in &self.samples {
            write!(w, "{}", s.k)?;
            for v in s.u.iter().chain(s.y.iter()) {
                write!(w, ",{v}")?;
            }
            writeln!(
                w,
                ",{},{},{},{}",
                s.phi,
                s.sigma_norm(),
                s.active.len(),
                self.classification.as_str()
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("update QP returned {status:?}")]
    Qp { status: QpStatus, solution: QpSolution },
    #[error(transparent)]
    QpSetup(#[from] QpError),
    #[error("plant diverged after the update: {source}")]
    Plant {
        u_next: DVector<f64>,
        sigma: DVector<f64>,
        #[source]
        source: PlantError,
    },
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub u_next: ControlInput,
    pub y_next: Measurement,
    pub sigma: DVector<f64>,
    pub qp: QpSolution,
}

/// Solves the update QP at `(u, y)`.
pub fn update_direction(
    u: &ControlInput,
    y: &Measurement,
    config: &OfoConfig,
    sens: &SensitivityModel,
    objective: &Objective,
) -> Result<QpSolution, QpError> {
    let n_u = u.len();
    let grad = objective.gradient(y, n_u);
    let grad_term = qp::grad_term(&config.g, &sens.h_t, &grad)?;
    let cs = &config.constraints;
    let problem = QpProblem {
        g: &config.g,
        grad_term,
        a: &cs.a,
        b: &cs.b,
        c: &cs.c,
        d_out: &cs.d_out,
        alpha: config.alpha,
        u: &u.0,
        y: &y.y,
        nabla_h: &sens.nabla_h,
        output_mode: cs.output_mode,
    };
    qp::solve_qp(&problem)
}

/// One measure → gradient → QP → integrate → settle cycle.
pub fn ofo_step(
    u: &ControlInput,
    y: &Measurement,
    config: &OfoConfig,
    objective: &Objective,
    plant: &dyn Plant,
) -> Result<StepOutcome, StepError> {
    step_with(u, y, config, &config.sensitivity, objective, plant)
}

fn step_with(
    u: &ControlInput,
    y: &Measurement,
    config: &OfoConfig,
    sens: &SensitivityModel,
    objective: &Objective,
    plant: &dyn Plant,
) -> Result<StepOutcome, StepError> {
    let qp = update_direction(u, y, config, sens, objective)?;
    if qp.status != QpStatus::Optimal {
        return Err(StepError::Qp { status: qp.status, solution: qp });
    }
    let sigma = qp.sigma.clone();
    let u_next = ControlInput(&u.0 + config.alpha * &sigma);
    match plant.apply(&u_next) {
        Ok(y_next) => Ok(StepOutcome { u_next, y_next, sigma, qp }),
        Err(source) => Err(StepError::Plant { u_next: u_next.0, sigma, source }),
    }
}

fn sample(k: usize, u: &ControlInput, y: &Measurement, objective: &Objective) -> Sample {
    Sample {
        k,
        u: u.0.clone(),
        y: y.y.clone(),
        converged: y.converged,
        phi: objective.phi(y),
        target_distance: objective.target_distance(y),
        sigma: DVector::zeros(0),
        active: Vec::new(),
        qp_status: None,
    }
}

/// Iterates the loop from `(u0, y0)` until `‖σ‖ ≤ conv_tol`, a failure, or
/// the iteration budget runs out.
pub fn run(
    plant: &dyn Plant,
    config: &OfoConfig,
    objective: Objective,
    u0: &ControlInput,
    y0: &Measurement,
) -> Trajectory {
    let mut samples = Vec::new();
    let mut sens = Cow::Borrowed(&config.sensitivity);
    let mut u = u0.clone();
    let mut y = y0.clone();
    let mut k = 0;

    let finish = |samples: Vec<Sample>, classification, iterations_to_converge| Trajectory {
        objective,
        samples,
        classification,
        iterations_to_converge,
    };

    loop {
        if let Some(every) = config.relinearize_every {
            if k > 0 && every > 0 && k % every == 0 {
                match sensitivity::compute_sensitivity(plant, &u, config.sensitivity_step) {
                    Ok(fresh) => sens = Cow::Owned(fresh),
                    Err(SensitivityError::Plant { .. }) => {
                        samples.push(sample(k, &u, &y, &objective));
                        return finish(samples, Classification::Divergent, None);
                    }
                    Err(e) => panic!("sensitivity step validated with the config: {e}"),
                }
            }
        }

        let mut current = sample(k, &u, &y, &objective);
        match step_with(&u, &y, config, &sens, &objective, plant) {
            Ok(out) => {
                current.sigma = out.sigma;
                current.active = out.qp.active_set;
                current.qp_status = Some(out.qp.status);
                let done = current.sigma.norm() <= config.conv_tol;
                samples.push(current);
                if done {
                    let class = match objective.target_distance(&y) {
                        Some(d) if d <= config.conv_tol => Classification::StableConverged,
                        _ => Classification::StableConstrained,
                    };
                    return finish(samples, class, Some(k));
                }
                if k + 1 > config.max_iter {
                    let class = classify_trajectory(&samples, &config.tolerances())
                        .unwrap_or(Classification::Divergent);
                    return finish(samples, class, None);
                }
                u = out.u_next;
                y = out.y_next;
                k += 1;
            }
            Err(StepError::Plant { u_next, sigma, .. }) => {
                current.sigma = sigma;
                current.qp_status = Some(QpStatus::Optimal);
                samples.push(current);
                let n_y = y.y.len();
                samples.push(Sample {
                    k: k + 1,
                    u: u_next,
                    y: DVector::from_element(n_y, f64::NAN),
                    converged: false,
                    phi: f64::NAN,
                    target_distance: None,
                    sigma: DVector::zeros(0),
                    active: Vec::new(),
                    qp_status: None,
                });
                return finish(samples, Classification::Divergent, None);
            }
            Err(StepError::Qp { status, solution }) => {
                current.active = solution.active_set;
                current.qp_status = Some(status);
                samples.push(current);
                return finish(samples, Classification::Divergent, None);
            }
            Err(StepError::QpSetup(e)) => panic!("validated config produced a malformed QP: {e}"),
        }
    }
}

/// Runs the tracking loop toward `target`.
pub fn run_to_target(
    plant: &dyn Plant,
    config: &OfoConfig,
    target: DispatchTarget,
    u0: &ControlInput,
    y0: &Measurement,
) -> Trajectory {
    run(plant, config, Objective::Track(target), u0, y0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifyTolerances {
    pub conv_tol: f64,
    pub eps_cycle: f64,
    pub grid_scale: f64,
}

#[derive(Debug, Error, PartialEq)]
#[error("classification needs at least 2 samples, got {0}")]
pub struct TooFewSamples(pub usize);

/// Labels a finished sample sequence.
///
/// Divergent if any measurement failed, is non-finite or exceeds ten
/// times the grid scale. Oscillatory if over the last quarter of samples
/// `Φ` spans more than `10 · conv_tol` and the input leaves and then
/// returns to within `eps_cycle` of an earlier tail state. Otherwise
/// stable, converged when the final target distance is within `conv_tol`.
pub fn classify_trajectory(
    samples: &[Sample],
    tol: &ClassifyTolerances,
) -> Result<Classification, TooFewSamples> {
    if samples.len() < 2 {
        return Err(TooFewSamples(samples.len()));
    }
    let runaway = 10.0 * tol.grid_scale;
    let diverged = samples.iter().any(|s| {
        !s.converged
            || !s.y.iter().all(|v| v.is_finite())
            || !s.u.iter().all(|v| v.is_finite())
            || s.y.amax() > runaway
    });
    if diverged {
        return Ok(Classification::Divergent);
    }

    let tail_len = (samples.len() / 4).max(2);
    let tail = &samples[samples.len() - tail_len..];
    let (lo, hi) = tail
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.phi), hi.max(s.phi)));
    if hi - lo > 10.0 * tol.conv_tol && revisits(tail, tol.eps_cycle) {
        return Ok(Classification::Oscillatory);
    }

    let last = samples.last().expect("non-empty");
    Ok(match last.target_distance {
        Some(d) if d <= tol.conv_tol => Classification::StableConverged,
        _ => Classification::StableConstrained,
    })
}

/// True if some state is left by more than `eps` and later re-entered.
fn revisits(tail: &[Sample], eps: f64) -> bool {
    for (i, anchor) in tail.iter().enumerate() {
        let mut left = false;
        for later in &tail[i + 1..] {
            let dist = (&later.u - &anchor.u).amax();
            if dist > eps {
                left = true;
            } else if left {
                return true;
            }
        }
    }
    false
}
