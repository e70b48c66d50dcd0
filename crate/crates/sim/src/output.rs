//! Run driver and text output.
//!
//! `trajectory.txt` holds one block per frame (frame 0 is the initial
//! state):
//!
//! ```text
//! frame <k> time <t>
//! attr <mesh.domain.attr> <instances> <rows>x<cols>
//! <one instance per line, row-major, space separated>
//! ```
//!
//! Numbers use Rust's shortest round-trip `{:e}` formatting, so reruns are
//! byte-comparable.  `stats.csv` has one row per frame; `timing.csv` holds
//! wall-clock seconds and is only written outside deterministic mode.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::SimConfig;
use crate::demos::Sim;
use crate::error::{Result, SimError};
use crate::newton::{step_frame, FrameReport};

pub const STATS_HEADER: &str = "frame,newton_iterations,pcg_iterations,max_pcg_residual,line_search_halvings,energy_start,energy_end,active_pairs,last_step_over_dt,converged";
pub const TIMING_HEADER: &str = "frame,solve_seconds,line_search_seconds";

struct Sink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Sink {
    fn create(dir: &Path, name: &str) -> Result<Sink> {
        let path = dir.join(name);
        let f = File::create(&path).map_err(|e| SimError::io(&path, e))?;
        Ok(Sink { path, out: BufWriter::new(f) })
    }

    fn write(&mut self, s: &str) -> Result<()> {
        self.out.write_all(s.as_bytes()).map_err(|e| SimError::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| SimError::io(&self.path, e))
    }
}

pub fn format_frame(sim: &Sim, time: f64) -> Result<String> {
    use std::fmt::Write as _;
    let mut s = String::new();
    writeln!(s, "frame {} time {:e}", sim.frame, time).unwrap();
    for (path, v) in sim.output_values()? {
        writeln!(s, "attr {path} {} {}x{}", v.count(), v.shape.rows, v.shape.cols).unwrap();
        for i in 0..v.count() {
            let line: Vec<String> = v.instance(i).iter().map(|x| format!("{x:e}")).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
    }
    Ok(s)
}

pub fn format_stats(r: &FrameReport) -> String {
    format!(
        "{},{},{},{:e},{},{:e},{:e},{},{:e},{}\n",
        r.frame,
        r.steps.len(),
        r.pcg_iterations,
        r.max_pcg_residual,
        r.halvings(),
        r.energy_start,
        r.energy_end,
        r.pairs,
        r.last_step_over_dt,
        r.converged as u8
    )
}

/// Simulates `cfg.frames` frames, writing outputs into `out`.
pub fn run(cfg: &SimConfig, out: &Path) -> Result<Vec<FrameReport>> {
    let mut sim = Sim::new(cfg)?;
    run_sim(&mut sim, cfg, out)
}

pub fn run_sim(sim: &mut Sim, cfg: &SimConfig, out: &Path) -> Result<Vec<FrameReport>> {
    std::fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    let mut traj = Sink::create(out, "trajectory.txt")?;
    let mut stats = Sink::create(out, "stats.csv")?;
    let mut timing = if cfg.deterministic { None } else { Some(Sink::create(out, "timing.csv")?) };
    stats.write(&format!("{STATS_HEADER}\n"))?;
    if let Some(t) = &mut timing {
        t.write(&format!("{TIMING_HEADER}\n"))?;
    }
    traj.write(&format_frame(sim, sim.frame as f64 * cfg.dt)?)?;
    let mut reports = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let r = step_frame(sim, cfg)?;
        traj.write(&format_frame(sim, sim.frame as f64 * cfg.dt)?)?;
        stats.write(&format_stats(&r))?;
        if let Some(t) = &mut timing {
            t.write(&format!("{},{:e},{:e}\n", r.frame, r.solve_seconds, r.line_search_seconds))?;
        }
        reports.push(r);
    }
    traj.finish()?;
    stats.finish()?;
    if let Some(t) = timing {
        t.finish()?;
    }
    Ok(reports)
}
