//! The physical plant `y = h(u) + d`: a power-flow evaluation of the grid
//! for given unit set points, observed as bus voltages plus interface flow.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;
use crate::powerflow::{self, AdmittanceMatrix, PowerFlowError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("control input has {got} entries, expected {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("disturbance has {got} entries, expected {expected}")]
    DisturbanceDimension { expected: usize, got: usize },
    #[error("power flow did not converge (mismatch {mismatch:.3e} after {iterations} iterations)")]
    Diverged { iterations: usize, mismatch: f64 },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

/// Stacked unit set points `[p_1..p_m, q_1..q_m]`, load convention.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlInput(pub DVector<f64>);

impl ControlInput {
    pub fn zeros(n_units: usize) -> Self {
        ControlInput(DVector::zeros(2 * n_units))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn p(&self) -> &[f64] {
        &self.0.as_slice()[..self.0.len() / 2]
    }

    pub fn q(&self) -> &[f64] {
        &self.0.as_slice()[self.0.len() / 2..]
    }
}

/// Stacked observation `[v_1..v_n, p_pcc, q_pcc]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub y: DVector<f64>,
    pub converged: bool,
}

impl Measurement {
    pub fn pcc(&self) -> (f64, f64) {
        let n = self.y.len();
        (self.y[n - 2], self.y[n - 1])
    }

    pub fn voltages(&self) -> &[f64] {
        &self.y.as_slice()[..self.y.len() - 2]
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Disturbance(pub DVector<f64>);

impl Disturbance {
    pub fn zeros(n_y: usize) -> Self {
        Disturbance(DVector::zeros(n_y))
    }
}

/// Starting set point policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPolicy {
    #[default]
    Zero,
    Midpoint,
}

/// Anything the controller can actuate and observe.
pub trait Plant: Sync {
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn apply(&self, u: &ControlInput) -> Result<Measurement, PlantError>;
}

/// A validated network evaluated through the AC power flow.
#[derive(Clone, Debug)]
pub struct GridPlant {
    net: Network,
    y_bus: AdmittanceMatrix,
    disturbance: Disturbance,
}

impl GridPlant {
    pub fn new(net: Network) -> Self {
        let n_y = net.n_outputs();
        Self::with_disturbance(net, Disturbance::zeros(n_y)).expect("zero disturbance fits")
    }

    pub fn with_disturbance(net: Network, d: Disturbance) -> Result<Self, PlantError> {
        if d.0.len() != net.n_outputs() {
            return Err(PlantError::DisturbanceDimension {
                expected: net.n_outputs(),
                got: d.0.len(),
            });
        }
        let y_bus = powerflow::build_admittance(&net);
        Ok(GridPlant { net, y_bus, disturbance: d })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn disturbance(&self) -> &Disturbance {
        &self.disturbance
    }
}

impl Plant for GridPlant {
    fn n_inputs(&self) -> usize {
        self.net.n_inputs()
    }

    fn n_outputs(&self) -> usize {
        self.net.n_outputs()
    }

    fn apply(&self, u: &ControlInput) -> Result<Measurement, PlantError> {
        eval(&self.net, &self.y_bus, u, &self.disturbance)
    }
}

fn eval(
    net: &Network,
    y_bus: &AdmittanceMatrix,
    u: &ControlInput,
    d: &Disturbance,
) -> Result<Measurement, PlantError> {
    if u.len() != net.n_inputs() {
        return Err(PlantError::InputDimension { expected: net.n_inputs(), got: u.len() });
    }
    if d.0.len() != net.n_outputs() {
        return Err(PlantError::DisturbanceDimension { expected: net.n_outputs(), got: d.0.len() });
    }
    let s = powerflow::bus_injections(net, u.p(), u.q());
    let sol = powerflow::solve_with_admittance(net, y_bus, &s)?;
    if !sol.converged {
        return Err(PlantError::Diverged { iterations: sol.iterations, mismatch: sol.mismatch });
    }
    let n = net.n_buses();
    let mut y = DVector::zeros(n + 2);
    y.rows_mut(0, n).copy_from_slice(&sol.v_mag);
    y[n] = sol.s_pcc.re;
    y[n + 1] = sol.s_pcc.im;
    y += &d.0;
    Ok(Measurement { y, converged: true })
}

/// Evaluates `h(u) + d` on a network without building a [`GridPlant`].
/// Set points outside the unit boxes are evaluated as given.
pub fn apply_input(
    net: &Network,
    u: &ControlInput,
    d: &Disturbance,
) -> Result<Measurement, PlantError> {
    eval(net, &powerflow::build_admittance(net), u, d)
}

/// The starting set point under `policy`.
pub fn initial_input(net: &Network, policy: InitialPolicy) -> ControlInput {
    let m = net.n_units();
    let mut u = ControlInput::zeros(m);
    if policy == InitialPolicy::Midpoint {
        for (i, unit) in net.units.iter().enumerate() {
            u.0[i] = 0.5 * (unit.p_min + unit.p_max);
            u.0[m + i] = 0.5 * (unit.q_min + unit.q_max);
        }
    }
    u
}

pub fn initial_state(
    plant: &GridPlant,
    policy: InitialPolicy,
) -> Result<(ControlInput, Measurement), PlantError> {
    let u0 = initial_input(plant.network(), policy);
    let y0 = plant.apply(&u0)?;
    Ok((u0, y0))
}

/// Affine test double `y = M u + c`.
#[derive(Clone, Debug)]
pub struct LinearPlant {
    pub m: nalgebra::DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Plant for LinearPlant {
    fn n_inputs(&self) -> usize {
        self.m.ncols()
    }

    fn n_outputs(&self) -> usize {
        self.m.nrows()
    }

    fn apply(&self, u: &ControlInput) -> Result<Measurement, PlantError> {
        if u.len() != self.m.ncols() {
            return Err(PlantError::InputDimension { expected: self.m.ncols(), got: u.len() });
        }
        Ok(Measurement { y: &self.m * &u.0 + &self.c, converged: true })
    }
}
