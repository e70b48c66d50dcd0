//! Central-difference verification of assembled gradients and unprojected
//! Hessians.

use std::fmt;

use relsym::assembly::AssemblyOptions;

use crate::demos::Sim;
use crate::error::Result;

pub const GRADIENT_TOL: f64 = 1e-5;
pub const HESSIAN_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct TargetError {
    pub name: String,
    pub gradient: f64,
    pub hessian: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub scene: String,
    pub step: f64,
    pub dofs: usize,
    pub targets: Vec<TargetError>,
    /// Gradient error of each energy against its own FD, relative to the
    /// larger of its gradient and the total gradient.
    pub energies: Vec<(String, f64)>,
}

impl FdReport {
    pub fn max_gradient(&self) -> f64 {
        self.targets.iter().map(|t| t.gradient).fold(0.0, f64::max)
    }

    pub fn max_hessian(&self) -> f64 {
        self.targets.iter().map(|t| t.hessian).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_gradient() <= GRADIENT_TOL && self.max_hessian() <= HESSIAN_TOL
    }
}

impl fmt::Display for FdReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fd-check scene={} step={:e} dofs={}", self.scene, self.step, self.dofs)?;
        for t in &self.targets {
            writeln!(f, "target {} gradient_rel_err={:.3e} hessian_rel_err={:.3e}", t.name, t.gradient, t.hessian)?;
        }
        for (name, e) in &self.energies {
            writeln!(f, "energy {name} gradient_rel_err={e:.3e}")?;
        }
        write!(
            f,
            "max gradient_rel_err={:.3e} (tol {GRADIENT_TOL:e}) hessian_rel_err={:.3e} (tol {HESSIAN_TOL:e}) {}",
            self.max_gradient(),
            self.max_hessian(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a.iter().zip(b).map(|(x, y)| x - y));
    let s = norm(a.iter().copied()).max(norm(b.iter().copied()));
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

fn scaled_err(a: &[f64], b: &[f64], scale: f64) -> f64 {
    let d = norm(a.iter().zip(b).map(|(x, y)| x - y));
    let s = norm(a.iter().copied()).max(norm(b.iter().copied())).max(scale);
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

/// Compares derivatives at the current state with the pair set frozen;
/// pairs outside the activation distance contribute nothing, so the
/// energy is the same function either way.
pub fn fd_check(sim: &mut Sim, h: f64) -> Result<FdReport> {
    sim.minimizer.refresh(&sim.scene)?;
    let parallel = sim.minimizer.config.assembly.parallel;
    let x0 = sim.dofs();
    let n = x0.len();
    let asm = &mut sim.minimizer.assembler;
    let ne = asm.energies.len();
    let mut grads = Vec::with_capacity(ne);
    for k in 0..ne {
        grads.push(asm.energy_gradient(&sim.scene, k, parallel)?.1);
    }
    let grad: Vec<f64> = (0..n).map(|i| grads.iter().map(|g| g[i]).sum()).collect();
    asm.assemble(&sim.scene, AssemblyOptions { parallel, project: false })?;
    let hess = asm.dense_hessian();

    let mut fd_e = vec![vec![0.0; n]; ne];
    let mut fd_h = vec![0.0; n * n];
    for i in 0..n {
        let side = |s: f64, sim: &mut Sim| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut x = x0.clone();
            x[i] += s * h;
            sim.set_dofs(&x)?;
            let asm = &mut sim.minimizer.assembler;
            let vals = asm.energy_values(&sim.scene)?;
            asm.assemble_gradient(&sim.scene, parallel)?;
            Ok((vals, asm.gradient.clone()))
        };
        let (vp, gp) = side(1.0, sim)?;
        let (vm, gm) = side(-1.0, sim)?;
        for k in 0..ne {
            fd_e[k][i] = (vp[k] - vm[k]) / (2.0 * h);
        }
        for r in 0..n {
            fd_h[r * n + i] = (gp[r] - gm[r]) / (2.0 * h);
        }
    }
    sim.set_dofs(&x0)?;
    let fd_g: Vec<f64> = (0..n).map(|i| fd_e.iter().map(|g| g[i]).sum()).collect();

    let layout = &sim.minimizer.assembler.layout;
    let mut targets = Vec::new();
    for &t in sim.scene.targets() {
        let s = layout.start(t).unwrap();
        let r = s..s + sim.scene.values(t).len();
        let rows = r.start * n..r.end * n;
        targets.push(TargetError {
            name: sim.scene.attr_path(t),
            gradient: rel_err(&grad[r.clone()], &fd_g[r]),
            hessian: rel_err(&hess[rows.clone()], &fd_h[rows]),
        });
    }
    let scale = norm(grad.iter().copied()).max(norm(fd_g.iter().copied()));
    let energies = sim
        .minimizer
        .assembler
        .energies
        .iter()
        .zip(&grads)
        .zip(&fd_e)
        .map(|((e, g), f)| (e.name.clone(), scaled_err(g, f, scale)))
        .collect();
    Ok(FdReport { scene: sim.name.clone(), step: h, dofs: n, targets, energies })
}
