//! Command-line driver for interface-flexibility experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ofo_flex::grid;
use ofo_flex::harness::{self, Experiment, HarnessError, Scenario};
use ofo_flex::plant::initial_input;
use ofo_flex::powerflow;

#[derive(Parser)]
#[command(name = "ofo-flex", version, about = "Feedback-optimization flexibility experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario document and the grid it refers to.
    Validate(Common),
    /// Solve the power flow at the scenario's initial set point.
    Powerflow(Common),
    /// Build the feasible-region polygon of the interface flow.
    For(Common),
    /// Run one tracking trajectory per region vertex for every gain.
    Sweep(Common),
    /// Compare gains: stable/oscillatory/divergent counts and safety.
    GainStudy(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario document (JSON); defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Built-in grid name or grid document path; overrides the scenario.
    #[arg(long)]
    grid: Option<String>,
}

impl Common {
    fn scenario(&self) -> Result<Scenario> {
        let mut scenario = match &self.scenario {
            Some(path) => Scenario::load(path)?,
            None => Scenario::default(),
        };
        if let Some(g) = &self.grid {
            scenario.grid = g.clone();
        }
        Ok(scenario)
    }

    fn out_dir(&self) -> Result<Option<&Path>> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(self.out.as_deref())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<HarnessError>() {
        Some(h) => h.exit_code() as u8,
        None => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate(c) => validate(&c),
        Command::Powerflow(c) => solve_powerflow(&c),
        Command::For(c) => build_region(&c),
        Command::Sweep(c) => sweep(&c),
        Command::GainStudy(c) => gain_study(&c),
    }
}

fn validate(c: &Common) -> Result<()> {
    let scenario = c.scenario()?;
    scenario.validate()?;
    let net = harness::resolve_grid(&scenario.grid)?;
    println!(
        "ok: grid `{}` ({} buses, {} branches, {} units), {} gains, {} vertices",
        scenario.grid,
        net.n_buses(),
        net.branches.len(),
        net.n_units(),
        scenario.alpha_values.len(),
        scenario.n_vertices
    );
    if let Some(dir) = c.out_dir()? {
        let text = serde_json::to_string_pretty(&scenario)?;
        write(&dir.join("scenario.json"), &text)?;
    }
    Ok(())
}

fn solve_powerflow(c: &Common) -> Result<()> {
    let scenario = c.scenario()?;
    scenario.validate()?;
    let net = harness::resolve_grid(&scenario.grid)?;
    let u = initial_input(&net, scenario.initial);
    let injections = powerflow::bus_injections(&net, u.p(), u.q());
    let sol = powerflow::solve_powerflow(&net, &injections)?;
    if !sol.converged {
        bail!(
            "power flow did not converge after {} iterations (mismatch {:.3e})",
            sol.iterations,
            sol.mismatch
        );
    }
    let buses: Vec<_> = net
        .buses
        .iter()
        .zip(sol.v_mag.iter().zip(&sol.v_ang))
        .map(|(b, (m, a))| json!({ "bus": b.id, "v_mag": m, "v_ang_deg": a.to_degrees() }))
        .collect();
    let doc = json!({
        "grid": scenario.grid,
        "iterations": sol.iterations,
        "mismatch": sol.mismatch,
        "p_pcc": sol.s_pcc.re,
        "q_pcc": sol.s_pcc.im,
        "p_pcc_mw": grid::to_mva(sol.s_pcc.re, net.s_base),
        "q_pcc_mvar": grid::to_mva(sol.s_pcc.im, net.s_base),
        "buses": buses,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match c.out_dir()? {
        Some(dir) => write(&dir.join("powerflow.json"), &text)?,
        None => println!("{text}"),
    }
    println!(
        "converged in {} iterations, s_pcc = {:.6} + j{:.6} p.u.",
        sol.iterations, sol.s_pcc.re, sol.s_pcc.im
    );
    Ok(())
}

fn build_region(c: &Common) -> Result<()> {
    let mut scenario = c.scenario()?;
    // always rebuild here
    scenario.for_polygon = None;
    let experiment = Experiment::new(scenario)?;
    let polygon = experiment.for_polygon()?;
    let mut buf = Vec::new();
    polygon.write_csv(&mut buf).map_err(HarnessError::from)?;
    match c.out_dir()? {
        Some(dir) => write(&dir.join("for_polygon.csv"), std::str::from_utf8(&buf)?)?,
        None => print!("{}", String::from_utf8(buf)?),
    }
    println!(
        "{} vertices, area {:.6}, diameter {:.6}",
        polygon.vertices.len(),
        polygon.area(),
        polygon.diameter()
    );
    Ok(())
}

fn default_out(c: &Common) -> Result<PathBuf> {
    Ok(c.out_dir()?.map_or_else(|| PathBuf::from("out"), Path::to_path_buf))
}

fn sweep(c: &Common) -> Result<()> {
    let out = default_out(c)?;
    let mut report = harness::run_vertex_sweep(c.scenario()?)?;
    let files = harness::export_plot_data(&mut report, &out)?;
    print!("{}", harness::format_gain_table(&harness::gain_table(&report)));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn gain_study(c: &Common) -> Result<()> {
    let out = default_out(c)?;
    let (mut report, rows) = harness::run_gain_study(c.scenario()?)?;
    let mut files = harness::export_plot_data(&mut report, &out)?;
    let table = out.join("gain_study.csv");
    harness::write_gain_csv(&rows, &table)?;
    files.push(table);
    print!("{}", harness::format_gain_table(&rows));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
