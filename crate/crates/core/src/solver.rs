//! Symmetric block SpMV, block-Jacobi preconditioning and PCG.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::assembly::{Assembler, AssemblyOptions, AssemblyStats, BlockSparseHessian, DiagonalLayout};
use crate::error::{Error, Result};
use crate::scene::Scene;

/// Blocks per SpMV shard.  Fixed so results do not depend on thread count.
const SHARD_BLOCKS: usize = 512;

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()>;
}

#[inline(always)]
fn block_fixed<const R: usize, const C: usize>(b: &[f64], r: usize, c: usize, x: &[f64], y: &mut [f64]) {
    let b = &b[..R * C];
    let xc: &[f64; C] = x[c..c + C].try_into().unwrap();
    for i in 0..R {
        let mut s = 0.0;
        for j in 0..C {
            s += b[i * C + j] * xc[j];
        }
        y[r + i] += s;
    }
    if r != c {
        let xr: &[f64; R] = x[r..r + R].try_into().unwrap();
        for j in 0..C {
            let mut s = 0.0;
            for i in 0..R {
                s += b[i * C + j] * xr[i];
            }
            y[c + j] += s;
        }
    }
}

fn block_generic(b: &[f64], nr: usize, nc: usize, r: usize, c: usize, x: &[f64], y: &mut [f64]) {
    for i in 0..nr {
        let mut s = 0.0;
        for j in 0..nc {
            s += b[i * nc + j] * x[c + j];
        }
        y[r + i] += s;
    }
    if r != c {
        for j in 0..nc {
            let mut s = 0.0;
            for i in 0..nr {
                s += b[i * nc + j] * x[r + i];
            }
            y[c + j] += s;
        }
    }
}

macro_rules! dispatch {
    ($nr:expr, $nc:expr, $run:ident, $fallback:expr; $(($r:literal, $c:literal)),*) => {
        match ($nr, $nc) {
            $(($r, $c) => $run!($r, $c),)*
            _ => $fallback,
        }
    };
}

/// Runs blocks `[lo, hi)` of one shape group.
fn group_range(h: &BlockSparseHessian, gi: usize, lo: usize, hi: usize, x: &[f64], y: &mut [f64]) {
    let g = &h.groups[gi];
    let (nr, nc) = (g.rows, g.cols);
    let sz = nr * nc;
    macro_rules! run {
        ($r:literal, $c:literal) => {
            for k in lo..hi {
                let b = g.block_start + k;
                let off = g.data_start + k * sz;
                block_fixed::<$r, $c>(&h.hessian_blocks[off..off + sz], h.row_coordinate[b], h.col_coordinate[b], x, y);
            }
        };
    }
    dispatch!(nr, nc, run, {
        for k in lo..hi {
            let b = g.block_start + k;
            let off = g.data_start + k * sz;
            block_generic(&h.hessian_blocks[off..off + sz], nr, nc, h.row_coordinate[b], h.col_coordinate[b], x, y);
        }
    }; (1, 1), (1, 3), (1, 9), (1, 12), (3, 1), (3, 3), (3, 9), (3, 12), (9, 1), (9, 3), (9, 9), (9, 12),
       (12, 1), (12, 3), (12, 9), (12, 12))
}

/// `y += H x` with `H` the symmetric expansion of the block store.
pub fn spmv_add(h: &BlockSparseHessian, x: &[f64], y: &mut [f64], parallel: bool) -> Result<()> {
    if x.len() != h.dim || y.len() != h.dim {
        return Err(Error::Validation(format!("spmv on {} DoFs with vectors of {} and {}", h.dim, x.len(), y.len())));
    }
    let mut shards: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, g) in h.groups.iter().enumerate() {
        let mut lo = 0;
        while lo < g.count {
            let hi = (lo + SHARD_BLOCKS).min(g.count);
            shards.push((gi, lo, hi));
            lo = hi;
        }
    }
    if !parallel || shards.len() <= 1 {
        for &(gi, lo, hi) in &shards {
            group_range(h, gi, lo, hi, x, y);
        }
        return Ok(());
    }
    let parts: Vec<Vec<f64>> = shards
        .par_iter()
        .map(|&(gi, lo, hi)| {
            let mut part = vec![0.0; h.dim];
            group_range(h, gi, lo, hi, x, &mut part);
            part
        })
        .collect();
    for p in parts {
        for (a, b) in y.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(())
}

pub fn spmv(h: &BlockSparseHessian, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = vec![0.0; h.dim];
    spmv_add(h, x, &mut y, true)?;
    Ok(y)
}

impl LinearOperator for BlockSparseHessian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        y.iter_mut().for_each(|v| *v = 0.0);
        spmv_add(self, x, y, true)
    }
}

/// Sum of several block stores over the same DoFs (static + dynamic).
pub struct SumOperator<'a> {
    pub parts: Vec<&'a BlockSparseHessian>,
    pub parallel: bool,
}

impl LinearOperator for SumOperator<'_> {
    fn dim(&self) -> usize {
        self.parts[0].dim
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        y.iter_mut().for_each(|v| *v = 0.0);
        for p in &self.parts {
            spmv_add(p, x, y, self.parallel)?;
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        for i in 0..self.n {
            y[i] = self.data[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Preconditioner {
    Identity,
    BlockJacobi(BlockJacobi),
}

impl Preconditioner {
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Identity => z.copy_from_slice(r),
            Preconditioner::BlockJacobi(b) => b.apply(r, z),
        }
    }
}

/// Inverted diagonal blocks, one per target instance.
#[derive(Clone, Debug)]
pub struct BlockJacobi {
    pub blocks: Vec<(usize, usize)>,
    pub inverses: Vec<Vec<f64>>,
    /// Blocks that needed regularisation, by start DoF.
    pub regularized: Vec<usize>,
}

impl BlockJacobi {
    pub fn from_diagonal(layout: &DiagonalLayout, diag: &[f64]) -> Result<BlockJacobi> {
        let mut inverses = Vec::with_capacity(layout.blocks.len());
        let mut regularized = Vec::new();
        for (k, &(start, m)) in layout.blocks.iter().enumerate() {
            let off = layout.offsets[k];
            let d = DMatrix::from_row_slice(m, m, &diag[off..off + m * m]);
            let inv = match invert(&d) {
                Some(inv) => inv,
                None => {
                    let tr = d.trace();
                    let eps = if tr > 0.0 { 1e-12 * tr / m as f64 } else { 1.0 };
                    regularized.push(start);
                    let reg = &d + DMatrix::identity(m, m) * eps;
                    invert(&reg).ok_or_else(|| {
                        Error::Numerical(format!("diagonal block at DoFs [{start}, {}) is singular", start + m))
                    })?
                }
            };
            inverses.push(inv);
        }
        Ok(BlockJacobi { blocks: layout.blocks.clone(), inverses, regularized })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        for (k, &(s, m)) in self.blocks.iter().enumerate() {
            let inv = &self.inverses[k];
            for i in 0..m {
                z[s + i] = (0..m).map(|j| inv[i * m + j] * r[s + j]).sum();
            }
        }
    }
}

fn invert(d: &DMatrix<f64>) -> Option<Vec<f64>> {
    let m = d.nrows();
    if d.iter().all(|&v| v == 0.0) {
        return None;
    }
    let inv = d.clone().try_inverse()?;
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((0..m * m).map(|k| inv[(k / m, k % m)]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Relative residual after each iteration.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pcg(a: &dyn LinearOperator, g: &[f64], m: &Preconditioner, tol: f64, max_iter: usize) -> Result<PcgResult> {
    pcg_observed(a, g, m, tol, max_iter, |_, _| {})
}

/// PCG with a per-iteration observer receiving `(iteration, x)`.
pub fn pcg_observed(
    a: &dyn LinearOperator,
    g: &[f64],
    m: &Preconditioner,
    tol: f64,
    max_iter: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<PcgResult> {
    let n = a.dim();
    if g.len() != n {
        return Err(Error::Validation(format!("right-hand side has {} entries, system has {n}", g.len())));
    }
    let gn = dot(g, g).sqrt();
    let mut x = vec![0.0; n];
    if !gn.is_finite() {
        return Err(Error::Numerical("non-finite right-hand side".into()));
    }
    if gn == 0.0 {
        return Ok(PcgResult { x, iterations: 0, residual: 0.0, converged: true, history: Vec::new() });
    }
    let mut r = g.to_vec();
    let mut z = vec![0.0; n];
    m.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut history = Vec::new();
    let mut res = 1.0;
    for it in 1..=max_iter {
        a.apply(&p, &mut q)?;
        let pq = dot(&p, &q);
        if !pq.is_finite() || !rz.is_finite() {
            return Err(Error::Numerical(format!("PCG diverged at iteration {it}")));
        }
        if pq <= 0.0 {
            return Err(Error::Numerical(format!("PCG hit non-positive curvature {pq:e} at iteration {it}")));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = dot(&r, &r).sqrt() / gn;
        history.push(res);
        observe(it, &x);
        if !res.is_finite() {
            return Err(Error::Numerical(format!("PCG diverged at iteration {it}")));
        }
        if res <= tol {
            return Ok(PcgResult { x, iterations: it, residual: res, converged: true, history });
        }
        m.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(PcgResult { x, iterations: max_iter, residual: res, converged: false, history })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PreconditionerKind {
    Identity,
    BlockJacobi,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub tol: f64,
    /// Defaults to the number of DoFs.
    pub max_iter: Option<usize>,
    pub preconditioner: PreconditionerKind,
    pub assembly: AssemblyOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-6, max_iter: None, preconditioner: PreconditionerKind::BlockJacobi, assembly: AssemblyOptions::default() }
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    /// Unnegated `H^{-1} g`, one array per target in registration order.
    pub updates: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    pub pcg: PcgResult,
    pub assembly: AssemblyStats,
    pub gradient_norm: f64,
}

/// Compiled energies plus solver state; compilation happens once in `new`.
pub struct Minimizer {
    pub assembler: Assembler,
    pub config: SolverConfig,
}

impl Minimizer {
    pub fn new(scene: &mut Scene, config: SolverConfig) -> Result<Minimizer> {
        Ok(Minimizer { assembler: Assembler::new(scene)?, config })
    }

    pub fn energy(&self, scene: &Scene) -> Result<f64> {
        self.assembler.energy(scene)
    }

    pub fn refresh(&mut self, scene: &Scene) -> Result<()> {
        if self.assembler.is_stale(scene) {
            self.assembler.rebuild_dynamic(scene)?;
        }
        Ok(())
    }

    /// Assembles and solves `H dx = g`.
    pub fn minimize_step(&mut self, scene: &Scene) -> Result<StepResult> {
        self.refresh(scene)?;
        let assembly = self.assembler.assemble(scene, self.config.assembly)?;
        let a = &self.assembler;
        let pre = match self.config.preconditioner {
            PreconditionerKind::Identity => Preconditioner::Identity,
            PreconditionerKind::BlockJacobi => Preconditioner::BlockJacobi(BlockJacobi::from_diagonal(&a.diag_layout, &a.diagonal)?),
        };
        let op = SumOperator { parts: a.hessians().to_vec(), parallel: self.config.assembly.parallel };
        let max_iter = self.config.max_iter.unwrap_or(a.dim().max(1));
        let res = pcg(&op, &a.gradient, &pre, self.config.tol, max_iter)?;
        let gradient_norm = dot(&a.gradient, &a.gradient).sqrt();
        Ok(StepResult { updates: a.layout.split(&res.x), delta: res.x.clone(), pcg: res, assembly, gradient_norm })
    }
}
