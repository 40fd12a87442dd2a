//! Dense dual active-set solver (Goldfarb–Idnani) for strictly convex QPs
//!
//! ```text
//!     minimize    ½ xᵀ H x + cᵀ x
//!     subject to  M x ≤ r
//! ```
//!
//! Starts from the unconstrained minimizer and adds the most violated
//! constraint at each outer step, keeping dual feasibility throughout.
//! Ties between equally violated constraints go to the lowest row index.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    /// One multiplier per row of `M`; zero for inactive rows.
    pub lambda: DVector<f64>,
    pub active: Vec<usize>,
    pub status: Status,
    pub iterations: usize,
}

/// Largest of the stationarity, primal, dual and complementarity residuals.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    m: &DMatrix<f64>,
    r: &DVector<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let stationarity = (h * x + c + m.transpose() * lambda).amax();
    let slack = r - m * x;
    let primal = slack.iter().fold(0.0_f64, |acc, &s| acc.max(-s));
    let dual = lambda.iter().fold(0.0_f64, |acc, &l| acc.max(-l));
    let comp = slack
        .iter()
        .zip(lambda.iter())
        .fold(0.0_f64, |acc, (&s, &l)| acc.max((s * l).abs()));
    stationarity.max(primal).max(dual).max(comp)
}

pub fn solve(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    m: &DMatrix<f64>,
    r: &DVector<f64>,
    max_iter: usize,
) -> Option<DenseSolution> {
    let n_rows = m.nrows();
    let h_inv = h.clone().cholesky()?.inverse();

    let mut x = -(&h_inv * c);
    let mut active: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let mut iterations = 0;

    let row = |j: usize| -> DVector<f64> { m.row(j).transpose() };
    let viol_tol = |j: usize| 1e-12 * (1.0 + r[j].abs());

    let finish = |x: DVector<f64>, active: Vec<usize>, lam: Vec<f64>, status, iterations| {
        let mut lambda = DVector::zeros(n_rows);
        for (&j, &l) in active.iter().zip(&lam) {
            lambda[j] = l;
        }
        DenseSolution { x, lambda, active, status, iterations }
    };

    loop {
        // most violated constraint, lowest index first on ties
        let mut pick: Option<(usize, f64)> = None;
        for j in 0..n_rows {
            if active.contains(&j) {
                continue;
            }
            let s = r[j] - m.row(j).dot(&x.transpose());
            if s < -viol_tol(j) && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((j, s));
            }
        }
        let Some((p, _)) = pick else {
            let (x, lam) = polish(h, c, m, r, &active).unwrap_or((x, lam));
            return Some(finish(x, active, lam, Status::Optimal, iterations));
        };

        // normals in `n·x ≥ b` form
        let n_p = -row(p);
        let mut lam_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Some(finish(x, active, lam, Status::MaxIter, iterations));
            }
            let (z, rvec) = directions(&h_inv, m, &active, &n_p)?;

            // dual step limit: first active multiplier driven to zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in rvec.iter().enumerate() {
                if rk > 0.0 {
                    let t = lam[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }

            let curvature = z.dot(&n_p);
            let scale = n_p.dot(&(&h_inv * &n_p));
            let t2 = if curvature > 1e-13 * scale {
                // violation of row p along the full step
                (m.row(p).dot(&x.transpose()) - r[p]) / curvature
            } else {
                f64::INFINITY
            };

            let t = t1.min(t2);
            if !t.is_finite() {
                return Some(finish(x, active, lam, Status::Infeasible, iterations));
            }
            for (l, rk) in lam.iter_mut().zip(rvec.iter()) {
                *l -= t * rk;
            }
            lam_p += t;
            if t2.is_finite() {
                x += t * &z;
            }
            if t2 <= t1 {
                active.push(p);
                lam.push(lam_p);
                break;
            }
            let k = drop.expect("finite t1 has a blocking multiplier");
            active.remove(k);
            lam.remove(k);
        }
    }
}

/// Primal step direction in the null space of the active normals and the
/// matching change of the active multipliers.
fn directions(
    h_inv: &DMatrix<f64>,
    m: &DMatrix<f64>,
    active: &[usize],
    n_p: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let hn = h_inv * n_p;
    if active.is_empty() {
        return Some((hn, DVector::zeros(0)));
    }
    let n = m.ncols();
    let mut big_n = DMatrix::zeros(n, active.len());
    for (k, &j) in active.iter().enumerate() {
        big_n.set_column(k, &(-m.row(j).transpose()));
    }
    let hinv_n = h_inv * &big_n;
    let gram = big_n.transpose() * &hinv_n;
    let rvec = gram.lu().solve(&(big_n.transpose() * &hn))?;
    let z = hn - hinv_n * &rvec;
    Some((z, rvec))
}

/// Re-solves the equality-constrained KKT system on the final active set.
fn polish(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    m: &DMatrix<f64>,
    r: &DVector<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = h.nrows();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-c));
    for (i, &j) in active.iter().enumerate() {
        let row = m.row(j);
        kkt.view_mut((n + i, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + i), (n, 1)).copy_from(&row.transpose());
        rhs[n + i] = r[j];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let x = sol.rows(0, n).into_owned();
    let lam: Vec<f64> = sol.rows(n, k).iter().copied().collect();
    if lam.iter().any(|&l| l < -1e-10) || !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let lam = lam.into_iter().map(|l| l.max(0.0)).collect();
    Some((x, lam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn quadprog_reference_problem() {
        // min ½x² + ½y² + x  s.t.  x + 2y ≥ 1
        let h = DMatrix::identity(2, 2);
        let c = dvector![1.0, 0.0];
        let m = dmatrix![-1.0, -2.0];
        let r = dvector![-1.0];
        let sol = solve(&h, &c, &m, &r, 100).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert!((&sol.x - dvector![-0.6, 0.8]).amax() < 1e-14);
        assert_eq!(sol.active, vec![0]);
        assert!(kkt_residual(&h, &c, &m, &r, &sol.x, &sol.lambda) < 1e-14);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let h = DMatrix::identity(1, 1);
        let c = dvector![0.0];
        let m = dmatrix![1.0; -1.0];
        let r = dvector![-1.0, -1.0]; // x ≤ -1 and x ≥ 1
        let sol = solve(&h, &c, &m, &r, 100).unwrap();
        assert_eq!(sol.status, Status::Infeasible);
    }

    #[test]
    fn dependent_rows_are_handled() {
        // x ≤ 1 written twice plus x + y ≤ 1
        let h = DMatrix::identity(2, 2);
        let c = dvector![-3.0, -3.0];
        let m = dmatrix![1.0, 0.0; 1.0, 0.0; 1.0, 1.0];
        let r = dvector![1.0, 1.0, 1.0];
        let sol = solve(&h, &c, &m, &r, 100).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert!((&sol.x - dvector![0.5, 0.5]).amax() < 1e-12);
        assert!(kkt_residual(&h, &c, &m, &r, &sol.x, &sol.lambda) < 1e-12);
    }

    #[test]
    fn tie_breaking_prefers_lowest_index() {
        let h = DMatrix::identity(2, 2);
        let c = dvector![-2.0, -2.0];
        let m = dmatrix![1.0, 0.0; 0.0, 1.0];
        let r = dvector![1.0, 1.0];
        let sol = solve(&h, &c, &m, &r, 100).unwrap();
        assert_eq!(sol.active, vec![0, 1]);
    }

    #[test]
    fn iteration_guard() {
        let h = DMatrix::identity(2, 2);
        let c = dvector![-2.0, -2.0];
        let m = dmatrix![1.0, 0.0; 0.0, 1.0];
        let r = dvector![1.0, 1.0];
        let sol = solve(&h, &c, &m, &r, 1).unwrap();
        assert_eq!(sol.status, Status::MaxIter);
    }
}
