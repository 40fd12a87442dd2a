//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ofo_flex::controller::Classification;
use ofo_flex::geometry::{self, Point};
use ofo_flex::grid::builtin_grid;
use ofo_flex::harness::{export_plot_data, run_vertex_sweep, Experiment, Scenario, EXPORT_FILES, HIGH_GAIN, LOW_GAIN};
use ofo_flex::plant::{ControlInput, GridPlant, LinearPlant, Plant};
use ofo_flex::powerflow::{bus_injections, solve_powerflow};
use ofo_flex::qp::{grad_term, solve_qp, OutputMode, QpStatus};
use ofo_flex::region::compute_for_polygon;
use ofo_flex::sensitivity::{compute_sensitivity, DEFAULT_STEP};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::qp::{brute_force, kkt_check, random_instance, random_planar, uniform};
use common::{two_bus, two_bus_closed_form, two_bus_derivatives};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn powerflow_oracle() -> Outcome {
    let start = Instant::now();
    let (r, x) = (0.02, 0.06);
    let mut worst = 0.0_f64;
    for (p, q) in [(0.5, 0.1), (0.1, 0.0), (0.9, 0.3), (-0.4, 0.2), (0.3, -0.5), (1.5, 0.2)] {
        let net = two_bus(r, x, Some((p, q)), None);
        let sol = solve_powerflow(&net, &bus_injections(&net, &[], &[])).map_err(|e| e.to_string())?;
        ensure(sol.converged, || format!("two-bus load ({p}, {q}) did not converge"))?;
        let (v2, p_pcc, q_pcc) = two_bus_closed_form(r, x, p, q).ok_or("no closed-form solution")?;
        worst = worst
            .max((sol.v_mag[1] - v2).abs())
            .max((sol.s_pcc.re - p_pcc).abs())
            .max((sol.s_pcc.im - q_pcc).abs());
    }
    ensure(worst <= 1e-8, || format!("two-bus error {worst:.2e} > 1e-8"))?;

    let net = builtin_grid("meshed-10").map_err(|e| e.to_string())?;
    let m = net.n_units();
    let export: Vec<f64> = net.units.iter().map(|u| u.p_min).collect();
    let mut iterations = 0;
    for p in [vec![0.0; m], export] {
        let sol = solve_powerflow(&net, &bus_injections(&net, &p, &vec![0.0; m])).map_err(|e| e.to_string())?;
        ensure(sol.converged, || "meshed-10 did not converge".into())?;
        iterations = iterations.max(sol.iterations);
    }
    ensure(iterations <= 10, || format!("meshed-10 took {iterations} iterations"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("runtime {secs:.3} s"))?;
    Ok(format!("two-bus max error {worst:.1e}, meshed-10 {iterations} iterations, {secs:.3} s"))
}

fn sensitivity_check() -> Outcome {
    let m = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7 + (i * j) as f64 * 0.05);
    let linear = LinearPlant { m: m.clone(), c: DVector::from_element(5, 0.25) };
    let u0 = ControlInput(DVector::from_vec(vec![0.1, -0.2, 0.3]));
    let lin_err = (compute_sensitivity(&linear, &u0, DEFAULT_STEP).map_err(|e| e.to_string())?.nabla_h - &m).amax();
    ensure(lin_err <= 1e-10, || format!("linear plant error {lin_err:.2e}"))?;

    let (r, x) = (0.01, 0.1);
    let toy = GridPlant::new(two_bus(r, x, None, Some(((-1.0, 1.0), (-1.0, 1.0)))));
    let mut worst_rel = 0.0_f64;
    for (p, q) in [(0.0, 0.0), (0.3, 0.1), (-0.5, 0.2), (0.6, -0.4)] {
        let u = ControlInput(DVector::from_vec(vec![p, q]));
        let fd = compute_sensitivity(&toy, &u, DEFAULT_STEP).map_err(|e| e.to_string())?.nabla_h;
        for (row, d) in two_bus_derivatives(r, x, p, q).iter().enumerate() {
            for (j, dj) in d.iter().enumerate() {
                worst_rel = worst_rel.max((fd[(row + 1, j)] - dj).abs() / dj.abs().max(1e-3));
            }
        }
    }
    ensure(worst_rel <= 1e-4, || format!("two-bus relative error {worst_rel:.2e}"))?;

    let u = ControlInput(DVector::from_vec(vec![0.4, 0.2]));
    let exact = two_bus_derivatives(r, x, 0.4, 0.2);
    let errors: Vec<DMatrix<f64>> = [0.08, 0.04, 0.02]
        .iter()
        .map(|&h| {
            let fd = compute_sensitivity(&toy, &u, h).unwrap().nabla_h;
            DMatrix::from_fn(3, 2, |i, j| fd[(i + 1, j)] - exact[i][j])
        })
        .collect();
    let mut ratios = Vec::new();
    for i in 0..3 {
        for j in 0..2 {
            if errors[0][(i, j)].abs() >= 1e-9 {
                ratios.push(errors[0][(i, j)] / errors[1][(i, j)]);
                ratios.push(errors[1][(i, j)] / errors[2][(i, j)]);
            }
        }
    }
    ensure(!ratios.is_empty(), || "no measurable truncation error".into())?;
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    ensure(lo >= 3.5 && hi <= 4.5, || format!("halving ratios span [{lo:.2}, {hi:.2}]"))?;
    Ok(format!("linear {lin_err:.1e}, two-bus rel {worst_rel:.1e}, halving ratios [{lo:.2}, {hi:.2}]"))
}

fn qp_correctness() -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for case in 0..1000 {
        let inst = random_instance(&mut rng);
        let sol = solve_qp(&inst.problem(OutputMode::Hard)).map_err(|e| e.to_string())?;
        ensure(sol.status == QpStatus::Optimal, || format!("instance {case} not optimal"))?;
        worst = worst.max(sol.kkt_residual).max(kkt_check(&inst, &sol.sigma, &sol.active_set));
    }
    ensure(worst <= 1e-8, || format!("KKT residual {worst:.2e}"))?;

    let mut rng = StdRng::seed_from_u64(11);
    for case in 0..100 {
        let (inst, rows, rhs) = random_planar(&mut rng);
        let sol = solve_qp(&inst.problem(OutputMode::Hard)).map_err(|e| e.to_string())?;
        let bf = brute_force(&inst, &rows, &rhs, &sol.sigma, 2001);
        ensure(bf.ok(), || format!("2-D instance {case}: solver {} vs grid {}", bf.f_star, bf.f_grid))?;
    }

    let mut rng = StdRng::seed_from_u64(3);
    for case in 0..50 {
        let (n_u, n_y) = (rng.random_range(1..=8), rng.random_range(1..=12));
        let g = DMatrix::identity(n_u, n_u);
        let nabla_h = uniform(&mut rng, n_y, n_u, -1.0, 1.0);
        let h_t = ofo_flex::sensitivity::assemble_h(&nabla_h);
        let grad_phi = uniform(&mut rng, n_u + n_y, 1, -2.0, 2.0).column(0).into_owned();
        let term = grad_term(&g, &h_t, &grad_phi).map_err(|e| e.to_string())?;
        let mut inst = random_instance(&mut rng);
        inst.g = g;
        inst.grad_term = term.clone();
        inst.a = DMatrix::zeros(0, n_u);
        inst.b = DVector::zeros(0);
        inst.u = DVector::zeros(n_u);
        inst.y = DVector::zeros(n_y);
        inst.c = DMatrix::zeros(0, n_y);
        inst.d_out = DVector::zeros(0);
        inst.nabla_h = nabla_h;
        let sol = solve_qp(&inst.problem(OutputMode::Hard)).map_err(|e| e.to_string())?;
        ensure(sol.sigma == -&term, || format!("unconstrained case {case} differs from -grad_term"))?;
    }
    Ok(format!("1000 instances KKT {worst:.1e}, 100 planar instances within grid bounds, unconstrained exact"))
}

fn sweep(alphas: &[f64]) -> Result<ofo_flex::harness::SweepReport, String> {
    run_vertex_sweep(Scenario { alpha_values: alphas.to_vec(), ..Default::default() }).map_err(|e| e.to_string())
}

fn stable_tuning() -> Outcome {
    let start = Instant::now();
    let report = sweep(&[LOW_GAIN])?;
    let secs = start.elapsed().as_secs_f64();
    let low = &report.alphas[0];
    ensure(low.runs.len() == 36, || format!("{} runs", low.runs.len()))?;
    let stable = low.count(Classification::is_stable);
    ensure(stable == 36, || format!("only {stable}/36 stable"))?;
    for t in &low.trajectories {
        for k in 2..t.samples.len() {
            let (prev, cur) = (t.samples[k - 1].phi, t.samples[k].phi);
            ensure(cur <= prev + 1e-9, || format!("phi rises at k={k}: {prev} -> {cur}"))?;
        }
    }
    let worst = low.runs.iter().map(|r| r.final_distance).fold(0.0, f64::max);
    ensure(worst <= 1e-3, || format!("final distance {worst:.2e}"))?;
    ensure(low.safe, || format!("unsafe, worst excess {:.2e}", low.max_excess()))?;
    ensure(secs < 60.0, || format!("sweep took {secs:.1} s"))?;
    Ok(format!("alpha {LOW_GAIN}: 36/36 stable, max final distance {worst:.1e}, safe at every k, sweep {secs:.2} s"))
}

fn unstable_tuning() -> Outcome {
    let report = sweep(&[HIGH_GAIN])?;
    let high = &report.alphas[0];
    let osc = high.count(|c| c == Classification::Oscillatory);
    ensure(osc >= 1, || "no oscillatory trajectory".into())?;
    ensure(!high.safe, || "ensemble stayed inside the region".into())?;
    Ok(format!(
        "alpha {HIGH_GAIN}: {osc}/36 oscillatory, {} out-of-region states, worst excess {:.3}",
        high.violations.len(),
        high.max_excess()
    ))
}

fn region_oracle() -> Outcome {
    let exp = Experiment::new(Scenario { grid: "two-bus".into(), ..Default::default() }).map_err(|e| e.to_string())?;
    let polygon = compute_for_polygon(&exp.plant, &exp.config(LOW_GAIN), 36, &exp.u0, &exp.y0).map_err(|e| e.to_string())?;
    let unit = &exp.plant.network().units[0];
    let n = 101;
    let mut cloud: Vec<Point> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let p = unit.p_min + (unit.p_max - unit.p_min) * i as f64 / (n - 1) as f64;
            let q = unit.q_min + (unit.q_max - unit.q_min) * j as f64 / (n - 1) as f64;
            let y = exp.plant.apply(&ControlInput(DVector::from_vec(vec![p, q]))).map_err(|e| e.to_string())?;
            cloud.push(y.pcc());
        }
    }
    let d = geometry::hausdorff(&polygon.hull(), &geometry::convex_hull(&cloud));
    let ratio = d / polygon.diameter();
    ensure(ratio <= 0.02, || format!("Hausdorff {:.2}% of diameter", 100.0 * ratio))?;
    Ok(format!("{} samples, Hausdorff {:.3}% of diameter", cloud.len(), 100.0 * ratio))
}

fn coverage_monotone() -> Outcome {
    let report = sweep(&[LOW_GAIN])?;
    let cov = &report.alphas[0].coverage;
    let last = *cov.last().ok_or("empty coverage curve")?;
    for k in 1..cov.len() {
        ensure(cov[k] >= cov[k - 1] - 1e-9, || format!("coverage drops at k={k}: {} -> {}", cov[k - 1], cov[k]))?;
    }
    let reach = cov.iter().position(|&c| c >= 0.95 * last).unwrap_or(cov.len());
    ensure(last >= 0.95, || format!("final coverage {last:.4} < 0.95"))?;
    Ok(format!("non-decreasing over {} iterations, 95% of final at k={reach}, final {last:.4}", cov.len()))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        let mut report = sweep(&[LOW_GAIN, HIGH_GAIN])?;
        export_plot_data(&mut report, dir.path()).map_err(|e| e.to_string())?;
    }
    let mut bytes = 0;
    for name in EXPORT_FILES {
        let a = fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs"))?;
        bytes += a.len();
    }
    Ok(format!("{} files, {bytes} bytes identical", EXPORT_FILES.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("power-flow oracle", powerflow_oracle),
        ("sensitivity check", sensitivity_check),
        ("QP correctness", qp_correctness),
        ("stable tuning", stable_tuning),
        ("unstable tuning", unstable_tuning),
        ("region oracle", region_oracle),
        ("coverage monotonicity", coverage_monotone),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.2} s]", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL {} {name}: {reason} [{secs:.2} s]", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
