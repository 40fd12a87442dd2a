//! Online feedback optimization (OFO) for flexibility provision at the
//! interface between a flexible grid and its upstream system.
//!
//! The crate is organized along the control loop:
//!
//! - [`grid`]: per-unit network model, limits and grid documents
//! - [`powerflow`]: Newton–Raphson AC power flow
//! - [`plant`]: the measured map `y = h(u) + d`
//! - [`sensitivity`]: finite-difference `∇h` and `Hᵀ = [I | ∇hᵀ]`
//! - [`qp`]: constraint assembly and the dual active-set update QP
//! - [`controller`]: the closed loop, trajectories and their classification
//! - [`region`] / [`geometry`]: feasible operating region, trajectory sets,
//!   safety audits and coverage
//! - [`harness`]: scenarios, vertex sweeps, gain studies and exports

pub mod controller;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod plant;
pub mod powerflow;
pub mod qp;
pub mod region;
pub mod sensitivity;
