//! Newton–Raphson AC power flow in polar coordinates.
//!
//! The slack-pcc bus is held at 1.0∠0; every other bus is a PQ bus.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::grid::Network;

pub const MISMATCH_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("singular Jacobian at Newton iteration {0}")]
    SingularJacobian(usize),
    #[error("injection vector has {got} entries, network has {expected} buses")]
    Dimension { expected: usize, got: usize },
    #[error("interface flow requested from a non-converged solution")]
    NotConverged,
}

/// Dense nodal admittance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceMatrix(pub DMatrix<Complex64>);

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

/// Complex power entering the branch at each terminal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchFlow {
    pub from: Complex64,
    pub to: Complex64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub branch_flows: Vec<BranchFlow>,
    /// Interface flow, positive when exported from the flexible system
    /// towards the slack side.
    pub s_pcc: Complex64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute power mismatch at the last iterate.
    pub mismatch: f64,
}

impl PowerFlowSolution {
    /// Interface flow `(p_pcc, q_pcc)`; only defined on converged solutions.
    pub fn pcc_flow(&self) -> Result<(f64, f64), PowerFlowError> {
        if !self.converged {
            return Err(PowerFlowError::NotConverged);
        }
        Ok((self.s_pcc.re, self.s_pcc.im))
    }

    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }
}

/// Series admittance and half line charging of one π-branch.
fn branch_admittance(r: f64, x: f64, b_shunt: f64) -> (Complex64, Complex64) {
    let ys = Complex64::new(1.0, 0.0) / Complex64::new(r, x);
    (ys, Complex64::new(0.0, b_shunt / 2.0))
}

pub fn build_admittance(net: &Network) -> AdmittanceMatrix {
    let n = net.n_buses();
    let index = net.bus_index();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in &net.branches {
        let (f, t) = (index[&br.from_bus], index[&br.to_bus]);
        let (ys, ysh) = branch_admittance(br.r, br.x, br.b_shunt);
        y[(f, f)] += ys + ysh;
        y[(t, t)] += ys + ysh;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    AdmittanceMatrix(y)
}

/// Net complex injection per bus (generation positive) for the given
/// unit consumptions, in bus order.
pub fn bus_injections(net: &Network, unit_p: &[f64], unit_q: &[f64]) -> Vec<Complex64> {
    let index = net.bus_index();
    let mut s = vec![Complex64::new(0.0, 0.0); net.n_buses()];
    for load in &net.fixed_loads {
        s[index[&load.bus]] -= Complex64::new(load.p, load.q);
    }
    for (u, (&p, &q)) in net.units.iter().zip(unit_p.iter().zip(unit_q)) {
        s[index[&u.bus]] -= Complex64::new(p, q);
    }
    s
}

/// Computed complex injections `V ∘ conj(Y V)`.
pub fn calc_injections(y: &AdmittanceMatrix, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let current: Complex64 = (0..n).map(|k| y.0[(i, k)] * v[k]).sum();
            v[i] * current.conj()
        })
        .collect()
}

/// Stacked mismatch `[ΔP; ΔQ]` over the non-slack buses.
pub fn mismatch(
    y: &AdmittanceMatrix,
    v: &[Complex64],
    s_spec: &[Complex64],
    pq: &[usize],
) -> DVector<f64> {
    let s_calc = calc_injections(y, v);
    let m = pq.len();
    let mut f = DVector::zeros(2 * m);
    for (k, &i) in pq.iter().enumerate() {
        let d = s_spec[i] - s_calc[i];
        f[k] = d.re;
        f[m + k] = d.im;
    }
    f
}

/// Jacobian of the calculated injections with respect to `[θ_pq; |V|_pq]`.
pub fn jacobian(y: &AdmittanceMatrix, v: &[Complex64], pq: &[usize]) -> DMatrix<f64> {
    let n = v.len();
    let m = pq.len();
    let current: Vec<Complex64> = (0..n)
        .map(|i| (0..n).map(|k| y.0[(i, k)] * v[k]).sum())
        .collect();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    let j = Complex64::new(0.0, 1.0);
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pq.iter().enumerate() {
            // dS_i/dθ_k and dS_i/d|V|_k
            let vk_unit = v[k] / v[k].norm();
            let mut ds_dth = -j * v[i] * (y.0[(i, k)] * v[k]).conj();
            let mut ds_dvm = v[i] * (y.0[(i, k)] * vk_unit).conj();
            if i == k {
                ds_dth += j * v[i] * current[i].conj();
                ds_dvm += vk_unit * current[i].conj();
            }
            jac[(r, c)] = ds_dth.re;
            jac[(r, m + c)] = ds_dvm.re;
            jac[(m + r, c)] = ds_dth.im;
            jac[(m + r, m + c)] = ds_dvm.im;
        }
    }
    jac
}

/// Solves the power flow from a flat start.
///
/// `injections` are net complex bus injections (generation positive); the
/// entry at the slack bus is ignored.
pub fn solve_powerflow(
    net: &Network,
    injections: &[Complex64],
) -> Result<PowerFlowSolution, PowerFlowError> {
    let y = build_admittance(net);
    solve_with_admittance(net, &y, injections)
}

pub fn solve_with_admittance(
    net: &Network,
    y: &AdmittanceMatrix,
    injections: &[Complex64],
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = net.n_buses();
    if injections.len() != n {
        return Err(PowerFlowError::Dimension { expected: n, got: injections.len() });
    }
    let slack = net.slack_index();
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();

    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    let polar = |vm: &[f64], va: &[f64]| -> Vec<Complex64> {
        vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
    };

    let mut v = polar(&vm, &va);
    let mut f = mismatch(y, &v, injections, &pq);
    let mut norm = f.amax();
    let mut converged = norm.is_finite() && norm <= MISMATCH_TOL;
    let mut iterations = 0;

    while !converged && iterations < MAX_ITER && norm.is_finite() {
        iterations += 1;
        let jac = jacobian(y, &v, &pq);
        let dx = jac
            .lu()
            .solve(&f)
            .ok_or(PowerFlowError::SingularJacobian(iterations))?;
        for (k, &i) in pq.iter().enumerate() {
            va[i] += dx[k];
            vm[i] += dx[m + k];
        }
        v = polar(&vm, &va);
        f = mismatch(y, &v, injections, &pq);
        norm = f.amax();
        converged = norm.is_finite() && norm <= MISMATCH_TOL;
    }
    if converged && vm.iter().any(|&x| x <= 0.0) {
        converged = false;
    }

    let branch_flows = branch_flows(net, &v);
    let s_pcc = interface_flow(net, &branch_flows);
    Ok(PowerFlowSolution {
        v_mag: vm,
        v_ang: va,
        branch_flows,
        s_pcc,
        iterations,
        converged,
        mismatch: norm,
    })
}

fn branch_flows(net: &Network, v: &[Complex64]) -> Vec<BranchFlow> {
    let index = net.bus_index();
    net.branches
        .iter()
        .map(|br| {
            let (f, t) = (index[&br.from_bus], index[&br.to_bus]);
            let (ys, ysh) = branch_admittance(br.r, br.x, br.b_shunt);
            let i_from = (v[f] - v[t]) * ys + v[f] * ysh;
            let i_to = (v[t] - v[f]) * ys + v[t] * ysh;
            BranchFlow { from: v[f] * i_from.conj(), to: v[t] * i_to.conj() }
        })
        .collect()
}

/// Power delivered into the slack bus through the interface branches.
fn interface_flow(net: &Network, flows: &[BranchFlow]) -> Complex64 {
    let slack_id = net.buses[net.slack_index()].id;
    net.pcc_branches()
        .into_iter()
        .map(|i| {
            if net.branches[i].from_bus == slack_id {
                -flows[i].from
            } else {
                -flows[i].to
            }
        })
        .sum()
}

/// Interface flow of a converged solution, `(p_pcc, q_pcc)`.
pub fn pcc_flow(sol: &PowerFlowSolution) -> Result<(f64, f64), PowerFlowError> {
    sol.pcc_flow()
}
