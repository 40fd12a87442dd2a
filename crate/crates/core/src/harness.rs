//! Experiment driver: scenario documents, vertex sweeps, gain studies and
//! plot-data export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{self, Classification, DispatchTarget, OfoConfig, Trajectory};
use crate::grid::{self, GridError, Network};
use crate::plant::{ControlInput, Disturbance, GridPlant, InitialPolicy, Measurement, PlantError};
use crate::qp::{self, ConstraintPolicy, ConstraintSet};
use crate::region::{self, ForPolygon, RegionError, SafetyViolation};
use crate::sensitivity::{self, SensitivityError, SensitivityModel};

/// Gain at which every vertex run on `meshed-10` settles smoothly.
pub const LOW_GAIN: f64 = 0.008;
/// Gain at which `meshed-10` vertex runs start to oscillate.
pub const HIGH_GAIN: f64 = 0.3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("scenario document: {0}")]
    ScenarioParse(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("initial operating point: {0}")]
    Initial(#[from] PlantError),
    #[error("sensitivity: {0}")]
    Sensitivity(#[from] SensitivityError),
    #[error("feasible region: {0}")]
    Region(#[from] RegionError),
    #[error("report has no results to export")]
    EmptyReport,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Validation problems exit with 1, runtime failures with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Scenario(_) | HarnessError::ScenarioParse(_) | HarnessError::Grid(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GSpec {
    Identity,
    Diagonal(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Built-in grid name or path to a grid document.
    pub grid: String,
    pub alpha_values: Vec<f64>,
    #[serde(rename = "G_spec", alias = "g_spec")]
    pub g_spec: GSpec,
    pub n_vertices: usize,
    pub conv_tol: f64,
    pub max_iter: usize,
    pub sensitivity_step: f64,
    pub constraints: ConstraintPolicy,
    /// Constant additive disturbance on `y`; zero when absent.
    pub disturbance: Option<Vec<f64>>,
    pub deterministic: bool,
    pub initial: InitialPolicy,
    pub relinearize_every: Option<usize>,
    /// Cached region polygon (CSV) to reuse instead of recomputing.
    pub for_polygon: Option<String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            grid: "meshed-10".to_string(),
            alpha_values: vec![LOW_GAIN, HIGH_GAIN],
            g_spec: GSpec::Identity,
            n_vertices: region::DEFAULT_VERTICES,
            conv_tol: controller::DEFAULT_CONV_TOL,
            max_iter: controller::DEFAULT_MAX_ITER,
            sensitivity_step: sensitivity::DEFAULT_STEP,
            constraints: ConstraintPolicy::default(),
            disturbance: None,
            deterministic: true,
            initial: InitialPolicy::Zero,
            relinearize_every: None,
            for_polygon: None,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads a scenario; relative grid and polygon paths resolve against
    /// the scenario's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut scenario = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let candidate = base.join(p);
            if Path::new(p).is_relative() && candidate.exists() {
                candidate.to_string_lossy().into_owned()
            } else {
                p.to_string()
            }
        };
        if !grid::BUILTIN_GRIDS.contains(&scenario.grid.as_str()) {
            scenario.grid = resolve(&scenario.grid);
        }
        scenario.for_polygon = scenario.for_polygon.as_deref().map(resolve);
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Scenario(msg));
        if self.alpha_values.is_empty() {
            return bad("alpha_values must not be empty".into());
        }
        if let Some(a) = self.alpha_values.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return bad(format!("gain {a} is not positive"));
        }
        if self.n_vertices < 8 {
            return bad(format!("n_vertices must be at least 8, got {}", self.n_vertices));
        }
        if self.conv_tol.is_nan() || self.conv_tol <= 0.0 {
            return bad("conv_tol must be positive".into());
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1".into());
        }
        if self.sensitivity_step.is_nan() || self.sensitivity_step <= 0.0 {
            return bad("sensitivity_step must be positive".into());
        }
        if self.constraints.segments < 3 {
            return bad("constraint polygons need at least 3 segments".into());
        }
        if !self.deterministic {
            return bad("only deterministic runs are supported".into());
        }
        if let GSpec::Diagonal(d) = &self.g_spec {
            if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("G diagonal entries must be positive".into());
            }
        }
        Ok(())
    }

    pub fn smallest_alpha(&self) -> f64 {
        self.alpha_values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Loads a built-in grid by name, or a grid document from disk.
pub fn resolve_grid(spec: &str) -> Result<Network, HarnessError> {
    if grid::BUILTIN_GRIDS.contains(&spec) {
        return Ok(grid::builtin_grid(spec)?);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(GridError::UnknownBuiltin(spec.to_string()).into());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(grid::load_network(&text)?)
}

/// Everything shared by the runs of one scenario.
pub struct Experiment {
    pub scenario: Scenario,
    pub plant: GridPlant,
    pub u0: ControlInput,
    pub y0: Measurement,
    pub sensitivity: SensitivityModel,
    pub constraints: ConstraintSet,
    pub g: DMatrix<f64>,
}

impl Experiment {
    pub fn new(scenario: Scenario) -> Result<Self, HarnessError> {
        scenario.validate()?;
        let net = resolve_grid(&scenario.grid)?;
        let n_u = net.n_inputs();
        let n_y = net.n_outputs();
        let d = match &scenario.disturbance {
            Some(d) if d.len() != n_y => {
                return Err(HarnessError::Scenario(format!(
                    "disturbance has {} entries, grid has {n_y} outputs",
                    d.len()
                )))
            }
            Some(d) => Disturbance(DVector::from_vec(d.clone())),
            None => Disturbance::zeros(n_y),
        };
        let g = match &scenario.g_spec {
            GSpec::Identity => DMatrix::identity(n_u, n_u),
            GSpec::Diagonal(diag) if diag.len() == n_u => DMatrix::from_diagonal(&DVector::from_vec(diag.clone())),
            GSpec::Diagonal(diag) => {
                return Err(HarnessError::Scenario(format!(
                    "G diagonal has {} entries, grid has {n_u} inputs",
                    diag.len()
                )))
            }
        };
        let constraints = qp::build_constraints(&net, &scenario.constraints);
        let plant = GridPlant::with_disturbance(net, d)?;
        let (u0, y0) = crate::plant::initial_state(&plant, scenario.initial)?;
        let sensitivity = sensitivity::compute_sensitivity(&plant, &u0, scenario.sensitivity_step)?;
        Ok(Experiment { scenario, plant, u0, y0, sensitivity, constraints, g })
    }

    pub fn config(&self, alpha: f64) -> OfoConfig {
        OfoConfig {
            alpha,
            g: self.g.clone(),
            sensitivity: self.sensitivity.clone(),
            constraints: self.constraints.clone(),
            max_iter: self.scenario.max_iter,
            conv_tol: self.scenario.conv_tol,
            relinearize_every: self.scenario.relinearize_every,
            sensitivity_step: self.scenario.sensitivity_step,
            grid_scale: self.plant.network().scale(),
        }
    }

    /// Region polygon from the cache file if given, otherwise built with
    /// the most conservative gain.
    pub fn for_polygon(&self) -> Result<ForPolygon, HarnessError> {
        if let Some(path) = &self.scenario.for_polygon {
            let path = Path::new(path);
            let file = fs::File::open(path).map_err(io_err(path))?;
            return Ok(ForPolygon::read_csv(std::io::BufReader::new(file))?);
        }
        let config = self.config(self.scenario.smallest_alpha());
        Ok(region::compute_for_polygon(
            &self.plant,
            &config,
            self.scenario.n_vertices,
            &self.u0,
            &self.y0,
        )?)
    }

    /// One tracking run per polygon vertex, in vertex order.
    pub fn vertex_runs(&self, alpha: f64, polygon: &ForPolygon) -> Vec<Trajectory> {
        let config = self.config(alpha);
        polygon
            .vertices
            .par_iter()
            .map(|&(p_set, q_set)| {
                controller::run_to_target(&self.plant, &config, DispatchTarget { p_set, q_set }, &self.u0, &self.y0)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub vertex: usize,
    pub target: (f64, f64),
    pub classification: Classification,
    pub iterations_to_converge: Option<usize>,
    pub samples: usize,
    pub final_distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlphaReport {
    pub alpha: f64,
    pub runs: Vec<RunSummary>,
    /// Coverage fraction per iteration.
    pub coverage: Vec<f64>,
    pub safe: bool,
    pub violations: Vec<SafetyViolation>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

impl AlphaReport {
    pub fn count(&self, pred: impl Fn(Classification) -> bool) -> usize {
        self.runs.iter().filter(|r| pred(r.classification)).count()
    }

    /// Worst distance outside the region over all members and iterations.
    pub fn max_excess(&self) -> f64 {
        self.violations.iter().map(|v| v.excess).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub scenario: Scenario,
    pub polygon: ForPolygon,
    pub audit_tol: f64,
    pub alphas: Vec<AlphaReport>,
    pub manifest: Vec<String>,
}

/// Audits an ensemble at every iteration: coverage curve and `E(k) ⊂ F`.
pub fn audit_ensemble(
    trajectories: &[Trajectory],
    polygon: &ForPolygon,
    tol: f64,
) -> Result<(Vec<f64>, Vec<SafetyViolation>), RegionError> {
    let horizon = region::horizon(trajectories);
    let mut coverage = Vec::with_capacity(horizon);
    let mut violations = Vec::new();
    for k in 0..horizon {
        let set = region::trajectory_set_at(trajectories, k)?;
        coverage.push(region::coverage_fraction(&set, polygon)?);
        // members that already stopped are audited once, at their last sample
        let (_, mut v) = region::is_safe(&set, polygon, tol)?;
        v.retain(|viol| k < trajectories[viol.member].samples.len());
        violations.extend(v);
    }
    Ok((coverage, violations))
}

pub fn run_vertex_sweep(scenario: Scenario) -> Result<SweepReport, HarnessError> {
    let experiment = Experiment::new(scenario)?;
    let polygon = experiment.for_polygon()?;
    let audit_tol = polygon.audit_tol();
    let mut alphas = Vec::new();
    for &alpha in &experiment.scenario.alpha_values {
        let trajectories = experiment.vertex_runs(alpha, &polygon);
        let runs = trajectories
            .iter()
            .enumerate()
            .map(|(vertex, t)| {
                let last = t.last();
                let target = polygon.vertices[vertex];
                let (p, q) = last.pcc();
                RunSummary {
                    vertex,
                    target,
                    classification: t.classification,
                    iterations_to_converge: t.iterations_to_converge,
                    samples: t.samples.len(),
                    final_distance: (p - target.0).hypot(q - target.1),
                }
            })
            .collect();
        let (coverage, violations) = audit_ensemble(&trajectories, &polygon, audit_tol)?;
        alphas.push(AlphaReport {
            alpha,
            runs,
            coverage,
            safe: violations.is_empty(),
            violations,
            trajectories,
        });
    }
    Ok(SweepReport {
        scenario: experiment.scenario,
        polygon,
        audit_tol,
        alphas,
        manifest: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainRow {
    pub alpha: f64,
    pub stable: usize,
    pub oscillatory: usize,
    pub divergent: usize,
    /// Median iterations to converge among stable runs that converged.
    pub median_iterations: Option<f64>,
    pub safe: bool,
}

pub fn median(values: &mut [usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2]) as f64
    })
}

pub fn gain_table(report: &SweepReport) -> Vec<GainRow> {
    report
        .alphas
        .iter()
        .map(|a| {
            let mut iters: Vec<usize> = a
                .runs
                .iter()
                .filter(|r| r.classification.is_stable())
                .filter_map(|r| r.iterations_to_converge)
                .collect();
            GainRow {
                alpha: a.alpha,
                stable: a.count(Classification::is_stable),
                oscillatory: a.count(|c| c == Classification::Oscillatory),
                divergent: a.count(|c| c == Classification::Divergent),
                median_iterations: median(&mut iters),
                safe: a.safe,
            }
        })
        .collect()
}

/// Runs the sweep for every gain and tabulates the outcome per gain.
pub fn run_gain_study(scenario: Scenario) -> Result<(SweepReport, Vec<GainRow>), HarnessError> {
    if scenario.alpha_values.len() < 2 {
        return Err(HarnessError::Scenario("a gain study needs at least two gains".into()));
    }
    let report = run_vertex_sweep(scenario)?;
    let table = gain_table(&report);
    Ok((report, table))
}

pub fn format_gain_table(rows: &[GainRow]) -> String {
    let mut out = String::from("alpha      stable  oscillatory  divergent  median_iter  safe\n");
    for r in rows {
        let median = r.median_iterations.map_or("-".to_string(), |m| format!("{m}"));
        out.push_str(&format!(
            "{:<10} {:>6}  {:>11}  {:>9}  {:>11}  {}\n",
            r.alpha, r.stable, r.oscillatory, r.divergent, median, r.safe
        ));
    }
    out
}

pub fn write_gain_csv(rows: &[GainRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let mut body = String::from("alpha,stable,oscillatory,divergent,median_iterations,safe\n");
    for r in rows {
        let median = r.median_iterations.map_or(String::new(), |m| m.to_string());
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.alpha, r.stable, r.oscillatory, r.divergent, median, r.safe
        ));
    }
    w.write_all(body.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, HarnessError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a Scenario,
    audit_tol: f64,
    polygon_area: f64,
    polygon_diameter: f64,
    gains: Vec<GainSummary<'a>>,
    files: Vec<&'static str>,
}

#[derive(Serialize)]
struct GainSummary<'a> {
    alpha: f64,
    safe: bool,
    n_violations: usize,
    max_excess: f64,
    final_coverage: f64,
    table: GainRow,
    runs: &'a [RunSummary],
}

pub const EXPORT_FILES: [&str; 5] = [
    "trajectories.csv",
    "for_polygon.csv",
    "trajectory_sets.csv",
    "coverage.csv",
    "summary.json",
];

/// Writes the plot data for a finished sweep into `out_dir`.
pub fn export_plot_data(report: &mut SweepReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if report.alphas.is_empty() || report.alphas.iter().all(|a| a.trajectories.is_empty()) {
        return Err(HarnessError::EmptyReport);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let paths: Vec<PathBuf> = EXPORT_FILES.iter().map(|f| out_dir.join(f)).collect();

    let mut w = create(&paths[0])?;
    let first = &report.alphas[0].trajectories[0].samples[0];
    let mut header = vec!["alpha".to_string(), "member".to_string(), "k".to_string()];
    header.extend((0..first.u.len()).map(|i| format!("u{i}")));
    header.extend((0..first.y.len()).map(|i| format!("y{i}")));
    header.extend(["phi", "sigma_norm", "n_active", "classification"].map(String::from));
    writeln!(w, "{}", header.join(",")).map_err(io_err(&paths[0]))?;
    for a in &report.alphas {
        for (member, t) in a.trajectories.iter().enumerate() {
            let mut buf = Vec::new();
            t.write_csv(&mut buf, false).map_err(io_err(&paths[0]))?;
            for line in String::from_utf8_lossy(&buf).lines() {
                writeln!(w, "{},{member},{line}", a.alpha).map_err(io_err(&paths[0]))?;
            }
        }
    }
    w.flush().map_err(io_err(&paths[0]))?;

    let mut w = create(&paths[1])?;
    report.polygon.write_csv(&mut w)?;
    w.flush().map_err(io_err(&paths[1]))?;

    let mut w = create(&paths[2])?;
    writeln!(w, "alpha,k,member,p,q").map_err(io_err(&paths[2]))?;
    for a in &report.alphas {
        for k in 0..region::horizon(&a.trajectories) {
            let set = region::trajectory_set_at(&a.trajectories, k)?;
            for (member, (p, q)) in set.points.iter().enumerate() {
                writeln!(w, "{},{k},{member},{p},{q}", a.alpha).map_err(io_err(&paths[2]))?;
            }
        }
    }
    w.flush().map_err(io_err(&paths[2]))?;

    let mut w = create(&paths[3])?;
    writeln!(w, "alpha,k,fraction").map_err(io_err(&paths[3]))?;
    for a in &report.alphas {
        for (k, c) in a.coverage.iter().enumerate() {
            writeln!(w, "{},{k},{c}", a.alpha).map_err(io_err(&paths[3]))?;
        }
    }
    w.flush().map_err(io_err(&paths[3]))?;

    let table = gain_table(report);
    let summary = Summary {
        scenario: &report.scenario,
        audit_tol: report.audit_tol,
        polygon_area: report.polygon.area(),
        polygon_diameter: report.polygon.diameter(),
        gains: report
            .alphas
            .iter()
            .zip(table)
            .map(|(a, row)| GainSummary {
                alpha: a.alpha,
                safe: a.safe,
                n_violations: a.violations.len(),
                max_excess: a.max_excess(),
                final_coverage: a.coverage.last().copied().unwrap_or(0.0),
                table: row,
                runs: &a.runs,
            })
            .collect(),
        files: EXPORT_FILES.to_vec(),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(&paths[4], json + "\n").map_err(io_err(&paths[4]))?;

    report.manifest = EXPORT_FILES.iter().map(|s| s.to_string()).collect();
    Ok(paths)
}
