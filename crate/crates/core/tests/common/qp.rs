//! Random QP instances and independent optimality oracles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ofo_flex::qp::{OutputMode, QpProblem};
use rand::rngs::StdRng;
use rand::Rng;

pub struct Instance {
    pub g: DMatrix<f64>,
    pub grad_term: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d_out: DVector<f64>,
    pub alpha: f64,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub nabla_h: DMatrix<f64>,
}

impl Instance {
    pub fn problem(&self, mode: OutputMode) -> QpProblem<'_> {
        QpProblem {
            g: &self.g,
            grad_term: self.grad_term.clone(),
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d_out: &self.d_out,
            alpha: self.alpha,
            u: &self.u,
            y: &self.y,
            nabla_h: &self.nabla_h,
            output_mode: mode,
        }
    }

    /// `‖w + grad_term‖²_G`
    pub fn cost(&self, w: &DVector<f64>) -> f64 {
        let s = w + &self.grad_term;
        s.dot(&(&self.g * &s))
    }

    /// All rows as `normal · w ≤ rhs` in the decision variable.
    pub fn rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let top = &self.a * self.alpha;
        let bottom = &self.c * &self.nabla_h * self.alpha;
        let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), self.g.nrows());
        m.rows_mut(0, top.nrows()).copy_from(&top);
        m.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
        let mut r = DVector::zeros(m.nrows());
        r.rows_mut(0, top.nrows()).copy_from(&(&self.b - &self.a * &self.u));
        r.rows_mut(top.nrows(), bottom.nrows()).copy_from(&(&self.d_out - &self.c * &self.y));
        (m, r)
    }
}

pub fn uniform(rng: &mut StdRng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn spd(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
    let b = uniform(rng, n, n, -1.0, 1.0);
    b.transpose() * &b + DMatrix::identity(n, n) * 0.3
}

/// Random instance whose current `(u, y)` strictly satisfies every row, so
/// `w = 0` is feasible.
pub fn random_instance(rng: &mut StdRng) -> Instance {
    let n_u = rng.random_range(1..=6);
    let n_y = rng.random_range(1..=5);
    let m_in = rng.random_range(0..=8);
    let m_out = rng.random_range(0..=6);
    let u = uniform(rng, n_u, 1, -1.0, 1.0).column(0).into_owned();
    let y = uniform(rng, n_y, 1, -1.0, 1.0).column(0).into_owned();
    let a = uniform(rng, m_in, n_u, -1.0, 1.0);
    let c = uniform(rng, m_out, n_y, -1.0, 1.0);
    let b = &a * &u + uniform(rng, m_in, 1, 0.05, 1.0).column(0);
    let d_out = &c * &y + uniform(rng, m_out, 1, 0.05, 1.0).column(0);
    Instance {
        g: spd(rng, n_u),
        grad_term: uniform(rng, n_u, 1, -3.0, 3.0).column(0).into_owned(),
        a,
        b,
        c,
        d_out,
        alpha: rng.random_range(0.01..1.0),
        u,
        y,
        nabla_h: uniform(rng, n_y, n_u, -1.5, 1.5),
    }
}

/// Independent optimality check: recover multipliers on the reported
/// active set by least squares and test the four KKT conditions.
pub fn kkt_check(inst: &Instance, sigma: &DVector<f64>, active: &[usize]) -> f64 {
    let (m, r) = inst.rows();
    let grad = &inst.g * (sigma + &inst.grad_term);
    let slack = &r - &m * sigma;
    let primal = slack.iter().fold(0.0_f64, |acc, &s| acc.max(-s));
    if active.is_empty() {
        return grad.amax().max(primal);
    }
    let mut n_act = DMatrix::zeros(sigma.len(), active.len());
    for (k, &i) in active.iter().enumerate() {
        n_act.set_column(k, &m.row(i).transpose());
    }
    let lambda = n_act.clone().svd(true, true).solve(&(-&grad), 1e-12).unwrap();
    let stationarity = (&grad + &n_act * &lambda).amax();
    let dual = lambda.iter().fold(0.0_f64, |acc, &l| acc.max(-l));
    let comp = active.iter().fold(0.0_f64, |acc, &i| acc.max(slack[i].abs()));
    stationarity.max(primal).max(dual).max(comp)
}

/// Outcome of comparing the solver against an exhaustive grid search.
pub struct BruteForce {
    pub f_star: f64,
    pub f_grid: f64,
    pub gap_bound: f64,
    pub dist: f64,
    pub dist_bound: f64,
}

impl BruteForce {
    pub fn ok(&self) -> bool {
        self.f_star <= self.f_grid + 1e-12 && self.f_grid - self.f_star <= self.gap_bound && self.dist <= self.dist_bound
    }
}

/// Random 2-D instance: the box `|w_i| ≤ 1` plus two half-planes that keep
/// the origin feasible.
pub fn random_planar(rng: &mut StdRng) -> (Instance, Vec<[f64; 2]>, Vec<f64>) {
    let g = spd(rng, 2);
    let mut rows = vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let mut rhs = vec![1.0; 4];
    for _ in 0..2 {
        let t: f64 = rng.random_range(0.0..2.0 * PI);
        rows.push([t.cos(), t.sin()]);
        rhs.push(rng.random_range(0.1..0.8));
    }
    let a = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    let inst = Instance {
        g,
        grad_term: uniform(rng, 2, 1, -2.0, 2.0).column(0).into_owned(),
        a,
        b: DVector::from_vec(rhs.clone()),
        c: DMatrix::zeros(0, 1),
        d_out: DVector::zeros(0),
        alpha: 1.0,
        u: DVector::zeros(2),
        y: DVector::zeros(1),
        nabla_h: DMatrix::zeros(1, 2),
    };
    (inst, rows, rhs)
}

/// Grid search over `[-1, 1]²` with `n` points per axis, compared to `sigma`.
pub fn brute_force(inst: &Instance, rows: &[[f64; 2]], rhs: &[f64], sigma: &DVector<f64>, n: usize) -> BruteForce {
    let h = 2.0 / (n - 1) as f64;
    let (g, t) = (&inst.g, &inst.grad_term);
    let cost = |w0: f64, w1: f64| {
        let (s0, s1) = (w0 + t[0], w1 + t[1]);
        g[(0, 0)] * s0 * s0 + 2.0 * g[(0, 1)] * s0 * s1 + g[(1, 1)] * s1 * s1
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..n {
        let w0 = -1.0 + i as f64 * h;
        for j in 0..n {
            let w1 = -1.0 + j as f64 * h;
            if rows.iter().zip(rhs).all(|(row, &r)| row[0] * w0 + row[1] * w1 <= r) {
                let f = cost(w0, w1);
                if f < best.0 {
                    best = (f, w0, w1);
                }
            }
        }
    }
    let f_star = inst.cost(sigma);
    let eig = inst.g.clone().symmetric_eigen().eigenvalues;
    let (lmin, lmax) = (eig.min(), eig.max());
    let slope = 2.0 * (&inst.g * (sigma + &inst.grad_term)).norm();
    // a feasible grid point lies within a few cells of the optimum
    let d = 5.0 * h;
    let dist = (sigma - DVector::from_vec(vec![best.1, best.2])).norm();
    BruteForce {
        f_star,
        f_grid: best.0,
        gap_bound: slope * d + lmax * d * d,
        dist,
        dist_bound: ((best.0 - f_star).max(0.0) / lmin).sqrt() + 1e-9,
    }
}
