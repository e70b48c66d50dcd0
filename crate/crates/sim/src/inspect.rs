//! Plan dumps and matrix export.

use std::collections::BTreeMap;
use std::fmt::Write;

use relsym::eval::ModuleCache;

use crate::config::SimConfig;
use crate::demos::Sim;
use crate::error::{Result, SimError};
use crate::newton::step_frame;

/// Program dump of an attribute (`mesh.domain.attr`) or of every
/// derivative plan of a named energy.
pub fn dump_plan(sim: &Sim, name: &str) -> Result<String> {
    if let Some(e) = sim.minimizer.assembler.energies.iter().find(|e| e.name == name) {
        return Ok(e.program_dump());
    }
    let Some(attr) = sim.scene.lookup(name) else {
        let energies: Vec<&str> = sim.minimizer.assembler.energies.iter().map(|e| e.name.as_str()).collect();
        return Err(SimError::Config(format!("no attribute or energy named '{name}' (energies: {})", energies.join(", "))));
    };
    let node = sim.scene.node(attr)?;
    Ok(ModuleCache::new().program(&sim.scene.expr, &[node])?.dump())
}

/// Upper triangle of the static plus dynamic Hessian, 0-based `row col
/// value` lines after a `rows cols nnz` line.
pub fn global_coo(sim: &Sim) -> String {
    let asm = &sim.minimizer.assembler;
    let mut t: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for h in asm.hessians() {
        h.for_each_block(|r, c, nr, nc, b| {
            for i in 0..nr {
                for j in 0..nc {
                    let (gi, gj) = (r + i, c + j);
                    if gi <= gj {
                        *t.entry((gi, gj)).or_default() += b[i * nc + j];
                    }
                }
            }
        });
    }
    t.retain(|_, v| *v != 0.0);
    let n = asm.dim();
    let mut s = String::from("% upper triangle, 0-based\n");
    let _ = writeln!(s, "{n} {n} {}", t.len());
    for ((i, j), v) in t {
        let _ = writeln!(s, "{i} {j} {v:e}");
    }
    s
}

/// Simulates `frame` frames, then assembles the projected Hessian of the
/// next frame's initial state.
pub fn matrix_at_frame(sim: &mut Sim, cfg: &SimConfig, frame: usize) -> Result<String> {
    for _ in 0..frame {
        step_frame(sim, cfg)?;
    }
    sim.predict()?;
    sim.refresh_pairs()?;
    sim.minimizer.refresh(&sim.scene)?;
    let opts = sim.minimizer.config.assembly;
    sim.minimizer.assembler.assemble(&sim.scene, opts)?;
    Ok(global_coo(sim))
}
