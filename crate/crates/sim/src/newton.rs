//! One implicit Euler frame: Newton iterations on the incremental potential
//! with a backtracking line search.

use std::time::Instant;

use crate::config::SimConfig;
use crate::demos::Sim;
use crate::error::{Result, SimError};

/// One accepted Newton step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub energy_before: f64,
    pub energy_after: f64,
    pub alpha: f64,
    pub halvings: usize,
    pub pcg_iterations: usize,
    pub pcg_residual: f64,
    pub step_over_dt: f64,
}

#[derive(Clone, Debug)]
pub struct FrameReport {
    /// 1-based index of the frame just computed.
    pub frame: usize,
    pub steps: Vec<StepRecord>,
    /// PCG iterations over every solve, including the final converged one.
    pub pcg_iterations: usize,
    pub max_pcg_residual: f64,
    pub converged: bool,
    pub energy_start: f64,
    pub energy_end: f64,
    /// `max |dx| / dt` of the last solve.
    pub last_step_over_dt: f64,
    pub pairs: usize,
    pub solve_seconds: f64,
    pub line_search_seconds: f64,
}

impl FrameReport {
    pub fn halvings(&self) -> usize {
        self.steps.iter().map(|s| s.halvings).sum()
    }
}

fn finite(frame: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SimError::NonFinite { frame, what: what.to_string() })
    }
}

/// Advances `sim` by one time step.
pub fn step_frame(sim: &mut Sim, cfg: &SimConfig) -> Result<FrameReport> {
    let frame = sim.frame + 1;
    let start = sim.dofs();
    sim.predict()?;
    sim.refresh_pairs()?;
    let mut energy = finite(frame, "initial energy", sim.minimizer.energy(&sim.scene)?)?;
    let mut report = FrameReport {
        frame,
        steps: Vec::new(),
        pcg_iterations: 0,
        max_pcg_residual: 0.0,
        converged: false,
        energy_start: energy,
        energy_end: energy,
        last_step_over_dt: f64::INFINITY,
        pairs: 0,
        solve_seconds: 0.0,
        line_search_seconds: 0.0,
    };
    for iteration in 0..cfg.newton.max_iter {
        let t0 = Instant::now();
        let step = sim.minimizer.minimize_step(&sim.scene)?;
        report.solve_seconds += t0.elapsed().as_secs_f64();
        report.pcg_iterations += step.pcg.iterations;
        report.max_pcg_residual = report.max_pcg_residual.max(step.pcg.residual);
        let dmax = step.delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ratio = finite(frame, "Newton step", dmax)? / sim.dt;
        report.last_step_over_dt = ratio;
        if ratio < cfg.newton.tol {
            report.converged = true;
            break;
        }

        let t1 = Instant::now();
        let x = sim.dofs();
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut trial_energy = f64::NAN;
        for halvings in 0..=cfg.line_search.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&step.delta).map(|(x, d)| x - alpha * d).collect();
            sim.set_dofs(&trial)?;
            sim.refresh_pairs()?;
            trial_energy = sim.minimizer.energy(&sim.scene)?;
            if trial_energy <= energy {
                accepted = Some(halvings);
                break;
            }
            alpha *= 0.5;
        }
        report.line_search_seconds += t1.elapsed().as_secs_f64();
        let Some(halvings) = accepted else {
            sim.set_dofs(&x)?;
            sim.refresh_pairs()?;
            return Err(SimError::LineSearch {
                frame,
                iteration,
                halvings: cfg.line_search.max_halvings,
                energy,
                trial: trial_energy,
            });
        };
        report.steps.push(StepRecord {
            energy_before: energy,
            energy_after: trial_energy,
            alpha,
            halvings,
            pcg_iterations: step.pcg.iterations,
            pcg_residual: step.pcg.residual,
            step_over_dt: ratio,
        });
        energy = trial_energy;
    }
    report.energy_end = energy;
    report.pairs = sim.active_pairs();
    let end = sim.dofs();
    sim.velocity = end.iter().zip(&start).map(|(e, s)| (e - s) / sim.dt).collect();
    sim.frame = frame;
    Ok(report)
}
