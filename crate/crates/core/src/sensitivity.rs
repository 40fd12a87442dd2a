//! Steady-state input–output sensitivity `∇h(u)` by central differences,
//! and the stacked map `Hᵀ = [I | ∇hᵀ]` used by the controller's QP.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::plant::{ControlInput, Plant, PlantError};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("perturbation step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("plant evaluation failed at input channel {column}: {source}")]
    Plant {
        column: usize,
        #[source]
        source: PlantError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityModel {
    /// `n_y × n_u`, entry `(i, j) = ∂h_i/∂u_j`.
    pub nabla_h: DMatrix<f64>,
    pub linearization_point: ControlInput,
    /// `n_u × (n_u + n_y)`, `[I | ∇hᵀ]`.
    pub h_t: DMatrix<f64>,
}

impl SensitivityModel {
    pub fn from_matrix(nabla_h: DMatrix<f64>, linearization_point: ControlInput) -> Self {
        let h_t = assemble_h(&nabla_h);
        SensitivityModel { nabla_h, linearization_point, h_t }
    }

    pub fn n_inputs(&self) -> usize {
        self.nabla_h.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.nabla_h.nrows()
    }

    /// Writes `∇h` as CSV, one row per output.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SensitivityError> {
        let header: Vec<String> = (0..self.n_inputs()).map(|j| format!("u{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.nabla_h.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Central-difference Jacobian of the plant at `u0`.
pub fn compute_sensitivity(
    plant: &dyn Plant,
    u0: &ControlInput,
    step: f64,
) -> Result<SensitivityModel, SensitivityError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(SensitivityError::BadStep(step));
    }
    let n_u = plant.n_inputs();
    let n_y = plant.n_outputs();
    let mut nabla_h = DMatrix::zeros(n_y, n_u);
    for j in 0..n_u {
        let eval = |sign: f64| {
            let mut u = u0.clone();
            u.0[j] += sign * step;
            plant
                .apply(&u)
                .map_err(|source| SensitivityError::Plant { column: j, source })
        };
        let plus = eval(1.0)?;
        let minus = eval(-1.0)?;
        let col = (plus.y - minus.y) / (2.0 * step);
        nabla_h.set_column(j, &col);
    }
    Ok(SensitivityModel::from_matrix(nabla_h, u0.clone()))
}

/// `[I_{n_u} | ∇hᵀ]`.
pub fn assemble_h(nabla_h: &DMatrix<f64>) -> DMatrix<f64> {
    let (n_y, n_u) = nabla_h.shape();
    let mut h_t = DMatrix::zeros(n_u, n_u + n_y);
    h_t.view_mut((0, 0), (n_u, n_u)).fill_with_identity();
    h_t.view_mut((0, n_u), (n_u, n_y)).copy_from(&nabla_h.transpose());
    h_t
}
