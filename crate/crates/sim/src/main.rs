use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relsym_sim::error::{Result, SimError};
use relsym_sim::{fdcheck, output, SimConfig};

#[derive(Parser)]
#[command(name = "relsym", version, about = "Run, verify and inspect relsym demo scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate and write trajectory.txt and stats.csv.
    Run {
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Overrides the configured frame count.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Compare assembled derivatives against central differences.
    FdCheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Print the compiled plan of an attribute path or an energy name.
    DumpPlan {
        config: PathBuf,
        #[arg(long)]
        attr: String,
    },
    /// Write the projected global Hessian after `k` frames, at the next
    /// predicted state, as upper-triangle COO.
    ExportMatrix {
        config: PathBuf,
        #[arg(long)]
        frame: usize,
        /// Defaults to `<output>/hessian_<k>.coo`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Run { config, output, frames } => {
            let mut cfg = SimConfig::load(&config)?;
            if let Some(f) = frames {
                cfg.frames = f;
            }
            let out = output.unwrap_or_else(|| cfg.output.clone());
            let reports = output::run(&cfg, &out)?;
            let newton: usize = reports.iter().map(|r| r.steps.len()).sum();
            let pcg: usize = reports.iter().map(|r| r.pcg_iterations).sum();
            let unconverged = reports.iter().filter(|r| !r.converged).count();
            println!(
                "{}: {} frames, {newton} Newton iterations, {pcg} PCG iterations, {unconverged} frames hit the Newton limit; wrote {}",
                cfg.scene,
                reports.len(),
                out.display()
            );
            Ok(0)
        }
        Cmd::FdCheck { config, step } => {
            if !(step > 0.0) {
                return Err(SimError::Config(format!("--step must be positive, got {step}")));
            }
            let cfg = SimConfig::load(&config)?;
            let mut sim = relsym_sim::Sim::new(&cfg)?;
            let report = fdcheck::fd_check(&mut sim, step)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { 3 })
        }
        Cmd::DumpPlan { config, attr } => {
            let cfg = SimConfig::load(&config)?;
            let sim = relsym_sim::Sim::new(&cfg)?;
            println!("{}", relsym_sim::inspect::dump_plan(&sim, &attr)?);
            Ok(0)
        }
        Cmd::ExportMatrix { config, frame, output } => {
            let cfg = SimConfig::load(&config)?;
            let mut sim = relsym_sim::Sim::new(&cfg)?;
            let coo = relsym_sim::inspect::matrix_at_frame(&mut sim, &cfg, frame)?;
            let path = output.unwrap_or_else(|| cfg.output.join(format!("hessian_{frame}.coo")));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
            }
            std::fs::write(&path, coo).map_err(|e| SimError::io(&path, e))?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}
