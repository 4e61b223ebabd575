//! Command line front end: validation, single solves, approximation runs,
//! ε-sweeps and plot data.

use clap::{Parser, Subcommand};
use junction::cell_solver::CellSet;
use junction::eps_solver::{self, write_checkpoint, EpsSolver};
use junction::geometry::{build_layout, StructuredMesh};
use junction::harness::{self, Config, HarnessError, RunManifest};
use junction::homogenized::{self, check_transmission, HomGrid, HomResolution, HomSolver};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "junction", version, about = "Homogenization verification for thick fractal junctions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Sweep entries run concurrently.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Reporting parameter ρ of the ε^{1−ρ} bound.
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a config.
    Validate { config: PathBuf },
    /// Solve the cell problems and write their far-field data.
    Cells { config: PathBuf },
    /// Solve the ε-problem for the configured N.
    SolveEps { config: PathBuf },
    /// Solve the homogenized problem.
    SolveHom { config: PathBuf },
    /// Compare R_ε with the ε-solution for the configured N.
    Approx { config: PathBuf },
    /// Run the ε-sweep and fit rates.
    Sweep { config: PathBuf },
    /// Curve files and an SVG from an error CSV.
    Plot { csv: PathBuf },
}

fn load(cli: &Cli, path: &Path) -> Result<Config, HarnessError> {
    let mut cfg = Config::load(path)?;
    if let Some(w) = cli.workers {
        cfg.sweep.workers = w;
    }
    if let Some(r) = cli.rho {
        cfg.sweep.rho = r;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(cfg: &Config, out: &Path, files: &[(&str, String)]) -> Result<(), HarnessError> {
    let mut artifacts = Vec::new();
    for (name, contents) in files {
        std::fs::write(out.join(name), contents)?;
        artifacts.push((name.to_string(), file_hash(&out.join(name))?));
    }
    RunManifest::new(cfg, artifacts).write(out)?;
    Ok(())
}

fn file_hash(path: &Path) -> std::io::Result<String> {
    use sha2::{Digest, Sha256};
    Ok(homogenized::hex(&Sha256::digest(std::fs::read(path)?)))
}

fn run(cli: &Cli) -> Result<ExitCode, HarnessError> {
    let out = &cli.out;
    match &cli.command {
        Command::Validate { config } => {
            let cfg = load(cli, config)?;
            let certs = cfg.problem_data().certify_all(10.0)?;
            println!("config ok: hash {}", cfg.hash());
            for c in certs {
                println!("  {c:?}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Cells { config } => {
            let cfg = load(cli, config)?;
            std::fs::create_dir_all(out)?;
            let p = cfg.params(cfg.geometry.n);
            let layout = build_layout(&p.validate()?);
            let mesh = StructuredMesh::build(&layout, &cfg.mesh_resolution())?;
            let cells = CellSet::solve(&p, &mesh.template, cfg.mesh.grading, cfg.cells.length)?;
            let mut csv = String::from("cell,field,exit,slope,expected_slope,constant,decay_rate,expected_rate,fit_residual\n");
            let all = [&cells.z01, &cells.z02]
                .into_iter()
                .chain(cells.branch.iter().flat_map(|(a, b, c)| [a, b, c]));
            for sol in all {
                for e in &sol.exits {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                        sol.mesh.spec.kind.name(),
                        sol.field.name(),
                        e.label,
                        e.slope,
                        e.expected_slope,
                        e.constant,
                        e.decay_rate,
                        e.expected_rate,
                        e.fit_residual
                    );
                }
            }
            print!("{csv}");
            finish(&cfg, out, &[("cells.csv", csv)])?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SolveEps { config } => {
            let cfg = load(cli, config)?;
            std::fs::create_dir_all(out)?;
            let n = cfg.geometry.n;
            let p = cfg.params(n);
            let data = cfg.problem_data();
            let solver = |source| HarnessError::Solver { n, source };
            let mesh = Arc::new(StructuredMesh::build(&build_layout(&p.validate()?), &cfg.mesh_resolution())?);
            let tg = cfg.time_grid(n, data.t_final);
            let mut s = EpsSolver::new(eps_solver::assemble(mesh, &data).map_err(solver)?, cfg.newton).map_err(solver)?;
            let traj = s.solve(&tg).map_err(solver)?;
            write_checkpoint(&out.join("eps_trajectory.bin"), &traj)?;
            let iters: usize = traj.diagnostics.iter().map(|d| d.iterations).sum();
            let summary = format!(
                "N = {n}\nnodes = {}\nsteps = {}\nnewton_iterations = {iters}\n",
                s.system.num_nodes(),
                tg.steps()
            );
            print!("{summary}");
            finish(&cfg, out, &[("eps_summary.toml", summary)])?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SolveHom { config } => {
            let cfg = load(cli, config)?;
            std::fs::create_dir_all(out)?;
            let n = cfg.geometry.n;
            let p = cfg.params(n);
            let data = cfg.problem_data();
            let solver = |source| HarnessError::Solver { n, source };
            let grid = Arc::new(HomGrid::new(&p, &HomResolution::uniform(&p, cfg.hom.h)).map_err(solver)?);
            let mut hs = HomSolver::new(homogenized::assemble(grid, &data).map_err(solver)?, cfg.newton, cfg.hom.mode);
            let traj = hs.solve(&cfg.time_grid(n, data.t_final)).map_err(solver)?;
            let field = hs.system.field(traj.states.last().expect("trajectory has a final state"));
            field.save(&out.join("hom_final.bin"))?;
            field.export_interface_csv(&out.join("hom_interfaces.csv"))?;
            let tr = check_transmission(&field);
            let summary = format!(
                "dofs = {}\nsteps = {}\nkirchhoff_defect = {:?}\ntrace_mismatch = {:e}\n",
                hs.system.num_dofs(),
                traj.times.len() - 1,
                tr.max_defect,
                field.trace_mismatch()
            );
            print!("{summary}");
            finish(&cfg, out, &[("hom_summary.toml", summary)])?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Approx { config } => {
            let cfg = load(cli, config)?;
            std::fs::create_dir_all(out)?;
            let r = harness::run_entry(&cfg, cfg.geometry.n)?;
            let csv = format!("{}\n{}\n", junction::corrector::ErrorRecord::CSV_HEADER, r.record.csv_row());
            print!("{csv}");
            println!("{:?}", r.stats);
            finish(&cfg, out, &[("errors.csv", csv)])?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config } => {
            let cfg = load(cli, config)?;
            let report = harness::run_sweep(&cfg)?;
            harness::write_sweep(&cfg, &report, out)?;
            harness::emit_plotdata(&out.join("errors.csv"), &out.join("plot"))?;
            print!("{}", report.csv());
            let (ok, line) = report.summary.verdict(cfg.sweep.rho);
            println!("{} {line}", if ok { "PASS" } else { "FAIL" });
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(4) })
        }
        Command::Plot { csv } => {
            let plot = harness::emit_plotdata(csv, out)?;
            for f in &plot.files {
                println!("{}", f.display());
            }
            println!("slope = {:.6}", plot.slope);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
