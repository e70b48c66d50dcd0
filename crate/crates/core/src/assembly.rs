//! Global block-sparse Hessian assembly.
//!
//! Each energy instance produces a local gradient and Hessian over its
//! placement slots.  The local Hessian is compressed (duplicate blocks merged,
//! padding dropped), optionally PSD-projected, and scattered block by block
//! into a symmetric upper-triangular block store.  Instances are evaluated in
//! parallel; scatter is serial in instance order so results are bitwise
//! reproducible.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::diff::{DerivativeBundle, Differentiator, ProjectionMode};
use crate::error::{Error, Result};
use crate::eval::{Ctx, Executor, ModuleCache, Program};
use crate::index::{partition_static_dynamic, GradientLayout, PlacementIndices, Slot};
use crate::kernels::psd_project;
use crate::scene::{HostId, Scene};

const UNMAPPED: u32 = u32::MAX;

/// Merge rule from local parameter columns to the compressed local space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CompressionPattern {
    /// Unique global blocks `(start, len)`, sorted by start.
    pub blocks: Vec<(usize, usize)>,
    /// Compressed offset of each block.
    pub offsets: Vec<usize>,
    /// Local column to compressed index, `UNMAPPED` for padding.
    pub map: Vec<u32>,
    pub m: usize,
}

impl CompressionPattern {
    pub fn from_slots(slots: &[Slot], q: usize) -> CompressionPattern {
        let mut blocks: Vec<(usize, usize)> =
            slots.iter().filter(|s| s.is_active()).map(|s| (s.start(), s.len as usize)).collect();
        blocks.sort_unstable();
        blocks.dedup();
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut m = 0;
        for b in &blocks {
            offsets.push(m);
            m += b.1;
        }
        let mut map = vec![UNMAPPED; q];
        for s in slots.iter().filter(|s| s.is_active()) {
            let b = blocks.binary_search(&(s.start(), s.len as usize)).unwrap();
            for t in 0..s.len as usize {
                map[s.col as usize + t] = (offsets[b] + t) as u32;
            }
        }
        CompressionPattern { blocks, offsets, map, m }
    }

    pub fn is_identity(&self) -> bool {
        self.map.len() == self.m && self.map.iter().enumerate().all(|(i, &c)| c as usize == i)
    }

    /// `P^T H P`, symmetrised so the result is exactly symmetric.
    pub fn compress(&self, h: &[f64]) -> Vec<f64> {
        let (q, m) = (self.map.len(), self.m);
        let mut acc = vec![0.0; m * m];
        for a in 0..q {
            let ca = self.map[a];
            if ca == UNMAPPED {
                continue;
            }
            for b in 0..q {
                let cb = self.map[b];
                if cb != UNMAPPED {
                    acc[ca as usize * m + cb as usize] += h[a * q + b];
                }
            }
        }
        symmetric_from(&acc, m)
    }

    /// `J P` for a `rows x q` matrix.
    pub fn compress_cols(&self, j: &[f64], rows: usize) -> Vec<f64> {
        let (q, m) = (self.map.len(), self.m);
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            for a in 0..q {
                let c = self.map[a];
                if c != UNMAPPED {
                    out[r * m + c as usize] += j[r * q + a];
                }
            }
        }
        out
    }

    /// Local vector `v[a] = w[map[a]]` (zero on padding).
    pub fn lift_vector(&self, w: &[f64]) -> Vec<f64> {
        self.map.iter().map(|&c| if c == UNMAPPED { 0.0 } else { w[c as usize] }).collect()
    }
}

fn symmetric_from(acc: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = acc[i * m + i];
        for j in i + 1..m {
            let v = 0.5 * (acc[i * m + j] + acc[j * m + i]);
            out[i * m + j] = v;
            out[j * m + i] = v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShapeGroup {
    pub rows: usize,
    pub cols: usize,
    /// First block of this group in the coordinate arrays.
    pub block_start: usize,
    pub count: usize,
    /// First scalar of this group in `hessian_blocks`.
    pub data_start: usize,
}

/// Upper-triangular block store, blocks grouped by shape.
#[derive(Clone, Debug)]
pub struct BlockSparseHessian {
    pub dim: usize,
    pub groups: Vec<ShapeGroup>,
    pub row_coordinate: Vec<usize>,
    pub col_coordinate: Vec<usize>,
    pub hessian_blocks: Vec<f64>,
}

impl BlockSparseHessian {
    /// Builds the structure from `(row, col, rows, cols)` block descriptors
    /// (duplicates allowed).  Returns the structure and, per descriptor, its
    /// data offset.
    pub fn build(dim: usize, blocks: &[(usize, usize, usize, usize)]) -> Result<(BlockSparseHessian, HashMap<(usize, usize), usize>)> {
        let mut keys: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(blocks.len());
        for &(r, c, nr, nc) in blocks {
            if r > c {
                return Err(Error::Internal(format!("block ({r}, {c}) below the diagonal")));
            }
            if r + nr > dim || c + nc > dim {
                return Err(Error::Range(format!("block ({r}, {c}) of {nr}x{nc} outside {dim}x{dim}")));
            }
            keys.push((nr, nc, r, c));
        }
        keys.sort_unstable();
        keys.dedup();
        let mut groups: Vec<ShapeGroup> = Vec::new();
        let mut row_coordinate = Vec::with_capacity(keys.len());
        let mut col_coordinate = Vec::with_capacity(keys.len());
        let mut lookup = HashMap::with_capacity(keys.len());
        let mut data = 0;
        for (k, &(nr, nc, r, c)) in keys.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.rows == nr && g.cols == nc => g.count += 1,
                _ => groups.push(ShapeGroup { rows: nr, cols: nc, block_start: k, count: 1, data_start: data }),
            }
            row_coordinate.push(r);
            col_coordinate.push(c);
            lookup.insert((r, c), data);
            data += nr * nc;
        }
        let h = BlockSparseHessian { dim, groups, row_coordinate, col_coordinate, hessian_blocks: vec![0.0; data] };
        Ok((h, lookup))
    }

    pub fn empty(dim: usize) -> BlockSparseHessian {
        BlockSparseHessian::build(dim, &[]).unwrap().0
    }

    pub fn num_blocks(&self) -> usize {
        self.row_coordinate.len()
    }

    /// Visits `(row, col, rows, cols, data)` for every block.
    pub fn for_each_block(&self, mut f: impl FnMut(usize, usize, usize, usize, &[f64])) {
        for g in &self.groups {
            for k in 0..g.count {
                let b = g.block_start + k;
                let off = g.data_start + k * g.rows * g.cols;
                f(self.row_coordinate[b], self.col_coordinate[b], g.rows, g.cols, &self.hessian_blocks[off..off + g.rows * g.cols]);
            }
        }
    }

    /// Symmetric dense expansion, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut d = vec![0.0; n * n];
        self.add_to_dense(&mut d);
        d
    }

    pub fn add_to_dense(&self, d: &mut [f64]) {
        let n = self.dim;
        self.for_each_block(|r, c, nr, nc, b| {
            for i in 0..nr {
                for j in 0..nc {
                    d[(r + i) * n + c + j] += b[i * nc + j];
                    if r != c {
                        d[(c + j) * n + r + i] += b[i * nc + j];
                    }
                }
            }
        });
    }

    /// Scalar triplets `row col value` of the upper triangle, 0-based.
    pub fn to_coo(&self) -> String {
        let mut t: Vec<(usize, usize, f64)> = Vec::new();
        self.for_each_block(|r, c, nr, nc, b| {
            for i in 0..nr {
                for j in 0..nc {
                    let (gi, gj) = (r + i, c + j);
                    if gi <= gj && b[i * nc + j] != 0.0 {
                        t.push((gi, gj, b[i * nc + j]));
                    }
                }
            }
        });
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut s = String::new();
        let _ = writeln!(s, "% upper triangle, 0-based");
        let _ = writeln!(s, "{} {} {}", self.dim, self.dim, t.len());
        for (i, j, v) in t {
            let _ = writeln!(s, "{i} {j} {v:e}");
        }
        s
    }

    pub fn structure_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dim.hash(&mut h);
        self.groups.hash(&mut h);
        self.row_coordinate.hash(&mut h);
        self.col_coordinate.hash(&mut h);
        h.finish()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each_block(|r, c, _, _, b| {
            let w = if r == c { 1.0 } else { 2.0 };
            s += w * b.iter().map(|x| x * x).sum::<f64>();
        });
        s.sqrt()
    }
}

/// One energy with its compiled programs.
pub struct CompiledEnergy {
    pub name: String,
    pub host: HostId,
    pub dynamic: bool,
    pub bundle: DerivativeBundle,
    value: Program,
    first: Option<Program>,
    second: Option<Program>,
    raw: Option<Program>,
}

impl CompiledEnergy {
    pub fn mode(&self) -> ProjectionMode {
        self.bundle.mode
    }

    /// Scalars materialised per instance for the local Hessian.
    pub fn materialized_entries(&self) -> usize {
        let (q, p) = (self.bundle.dim, self.bundle.inner_dim);
        match self.bundle.mode {
            ProjectionMode::SeparatedJacobian => p * p + p * q,
            _ => q * q,
        }
    }

    fn hessian_program(&self, project: bool) -> Option<&Program> {
        if project {
            self.second.as_ref()
        } else {
            self.raw.as_ref()
        }
    }

    pub fn program_dump(&self) -> String {
        let mut s = self.value.dump();
        for p in [&self.first, &self.second].into_iter().flatten() {
            s.push('\n');
            s.push_str(&p.dump());
        }
        s
    }
}

/// Evaluated contribution of a single instance.
#[derive(Clone, Debug)]
pub struct Local {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Compressed `m x m` Hessian, after projection if requested.
    pub hessian: Vec<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AssemblyOptions {
    pub parallel: bool,
    /// Apply the energy's projection mode; `false` assembles the exact Hessian.
    pub project: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions { parallel: true, project: true }
    }
}

/// Structure of one energy group.
#[derive(Clone, Debug)]
pub struct GroupStructure {
    pub energies: Vec<usize>,
    pub indices: Vec<PlacementIndices>,
    pub patterns: Vec<Vec<CompressionPattern>>,
    /// Per energy, per instance: data offsets of the instance's block pairs
    /// `(a, b)`, `a <= b`, row-major over the upper triangle.
    pub position_in_data: Vec<Vec<Vec<usize>>>,
    pub hessian: BlockSparseHessian,
    pub epoch: u64,
}

impl GroupStructure {
    fn build(scene: &Scene, layout: &GradientLayout, energies: &[CompiledEnergy], members: &[usize], parallel: bool) -> Result<GroupStructure> {
        let mut indices = Vec::new();
        let mut patterns = Vec::new();
        let mut descriptors = Vec::new();
        for &k in members {
            let e = &energies[k];
            let count = scene.host_count(e.host);
            let idx = PlacementIndices::compute(scene, layout, &e.bundle.param, count, parallel)?;
            let q = e.bundle.dim;
            let pats: Vec<CompressionPattern> =
                (0..count).map(|i| CompressionPattern::from_slots(idx.instance(i), q)).collect();
            for p in &pats {
                for a in 0..p.blocks.len() {
                    for b in a..p.blocks.len() {
                        descriptors.push((p.blocks[a].0, p.blocks[b].0, p.blocks[a].1, p.blocks[b].1));
                    }
                }
            }
            indices.push(idx);
            patterns.push(pats);
        }
        let (hessian, lookup) = BlockSparseHessian::build(layout.total_dofs, &descriptors)?;
        let position_in_data = patterns
            .iter()
            .map(|pats| {
                pats.iter()
                    .map(|p| {
                        let mut v = Vec::new();
                        for a in 0..p.blocks.len() {
                            for b in a..p.blocks.len() {
                                v.push(lookup[&(p.blocks[a].0, p.blocks[b].0)]);
                            }
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        Ok(GroupStructure {
            energies: members.to_vec(),
            indices,
            patterns,
            position_in_data,
            hessian,
            epoch: scene.dynamic_epoch(),
        })
    }

    /// Hash over index tables, patterns and block coordinates.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.energies.hash(&mut h);
        for idx in &self.indices {
            idx.capacity.hash(&mut h);
            idx.slots.hash(&mut h);
        }
        self.patterns.hash(&mut h);
        self.position_in_data.hash(&mut h);
        self.hessian.structure_checksum().hash(&mut h);
        h.finish()
    }
}

/// Offsets of the per-DoF-block diagonal accumulator.
#[derive(Clone, Debug)]
pub struct DiagonalLayout {
    pub blocks: Vec<(usize, usize)>,
    pub offsets: Vec<usize>,
    starts: HashMap<usize, usize>,
    pub len: usize,
}

impl DiagonalLayout {
    pub fn new(layout: &GradientLayout) -> DiagonalLayout {
        let blocks = layout.dof_blocks();
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut starts = HashMap::with_capacity(blocks.len());
        let mut len = 0;
        for (k, &(s, l)) in blocks.iter().enumerate() {
            offsets.push(len);
            starts.insert(s, k);
            len += l * l;
        }
        DiagonalLayout { blocks, offsets, starts, len }
    }

    pub fn block_of(&self, start: usize) -> Option<usize> {
        self.starts.get(&start).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssemblyStats {
    pub energy: f64,
    pub per_energy: Vec<f64>,
    pub instances: usize,
    pub projected_sizes: Vec<usize>,
}

/// Owns compiled energies, group structures and the assembled system.
pub struct Assembler {
    pub layout: GradientLayout,
    pub energies: Vec<CompiledEnergy>,
    pub static_group: GroupStructure,
    pub dynamic_group: GroupStructure,
    pub diag_layout: DiagonalLayout,
    pub gradient: Vec<f64>,
    pub diagonal: Vec<f64>,
    pub parallel_build: bool,
}

impl Assembler {
    /// Differentiates and compiles every declared energy, then builds both
    /// group structures.
    pub fn new(scene: &mut Scene) -> Result<Assembler> {
        let targets = scene.targets().to_vec();
        let layout = GradientLayout::build(scene, &targets)?;
        let decls = scene.energies().to_vec();
        let mut diff = Differentiator::new(&targets);
        let mut cache = ModuleCache::new();
        let mut energies = Vec::with_capacity(decls.len());
        for d in &decls {
            let root = scene.node(d.root)?;
            let bundle = diff.bundle(&mut scene.expr, root, d.projection)?;
            let g = &scene.expr;
            let host = scene.attribute(d.root).host;
            let value = cache.program(g, &[bundle.value])?;
            let (first, second, raw) = match bundle.gradient {
                None => (None, None, None),
                Some(grad) => {
                    let first = cache.program(g, &[bundle.value, grad])?;
                    let second = match bundle.mode {
                        ProjectionMode::SeparatedJacobian => cache.program(
                            g,
                            &[bundle.value, grad, bundle.jacobian.unwrap(), bundle.inner_hessian.unwrap()],
                        )?,
                        _ => cache.program(g, &[bundle.value, grad, bundle.hessian.unwrap()])?,
                    };
                    let raw = cache.program(g, &[bundle.value, grad, bundle.raw_hessian.unwrap()])?;
                    (Some(first), Some(second), Some(raw))
                }
            };
            energies.push(CompiledEnergy { name: d.name.clone(), host, dynamic: d.dynamic_instances, bundle, value, first, second, raw });
        }
        let (st, dy) = partition_static_dynamic(&decls);
        let static_group = GroupStructure::build(scene, &layout, &energies, &st, true)?;
        let dynamic_group = GroupStructure::build(scene, &layout, &energies, &dy, true)?;
        let diag_layout = DiagonalLayout::new(&layout);
        let n = layout.total_dofs;
        Ok(Assembler {
            gradient: vec![0.0; n],
            diagonal: vec![0.0; diag_layout.len],
            layout,
            energies,
            static_group,
            dynamic_group,
            diag_layout,
            parallel_build: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dofs
    }

    /// Recomputes the dynamic group after a resize.
    pub fn rebuild_dynamic(&mut self, scene: &Scene) -> Result<()> {
        let members = self.dynamic_group.energies.clone();
        self.dynamic_group = GroupStructure::build(scene, &self.layout, &self.energies, &members, self.parallel_build)?;
        Ok(())
    }

    pub fn is_stale(&self, scene: &Scene) -> bool {
        !self.dynamic_group.energies.is_empty() && self.dynamic_group.epoch != scene.dynamic_epoch()
    }

    fn check_fresh(&self, scene: &Scene) -> Result<()> {
        if self.is_stale(scene) {
            return Err(Error::Stale(format!(
                "dynamic structure built at epoch {} but scene is at epoch {}; rebuild before assembling",
                self.dynamic_group.epoch,
                scene.dynamic_epoch()
            )));
        }
        Ok(())
    }

    pub fn hessians(&self) -> [&BlockSparseHessian; 2] {
        [&self.static_group.hessian, &self.dynamic_group.hessian]
    }

    /// Dense sum of both groups.
    pub fn dense_hessian(&self) -> Vec<f64> {
        let n = self.dim();
        let mut d = vec![0.0; n * n];
        for h in self.hessians() {
            h.add_to_dense(&mut d);
        }
        d
    }

    fn group(&self, dynamic: bool) -> &GroupStructure {
        if dynamic {
            &self.dynamic_group
        } else {
            &self.static_group
        }
    }

    /// Placement slots and compression pattern of one energy instance.
    pub fn pattern(&self, energy: usize, instance: usize) -> (&[Slot], &CompressionPattern) {
        let grp = self.group(self.energies[energy].dynamic);
        let pos = grp.energies.iter().position(|&k| k == energy).unwrap();
        (grp.indices[pos].instance(instance), &grp.patterns[pos][instance])
    }

    /// Total energy only.
    pub fn energy(&self, scene: &Scene) -> Result<f64> {
        let mut total = 0.0;
        for e in &self.energies {
            total += sum_values(scene, e, &e.value, true)?;
        }
        Ok(total)
    }

    /// Evaluates one instance with the assembly's compression and projection.
    pub fn local(&self, scene: &Scene, energy: usize, instance: usize, opts: AssemblyOptions) -> Result<Local> {
        let e = &self.energies[energy];
        let (_, pat) = self.pattern(energy, instance);
        let Some(prog) = e.hessian_program(opts.project) else {
            let mut ex = Executor::new(&e.value);
            ex.run(&e.value, scene, Ctx { host: e.host, instance })?;
            return Ok(Local { value: ex.output(&e.value, 0)[0], gradient: Vec::new(), hessian: Vec::new() });
        };
        local_eval(scene, e, prog, pat, instance, opts, &mut Executor::new(prog))
    }

    /// Value of each energy in registration order.
    pub fn energy_values(&self, scene: &Scene) -> Result<Vec<f64>> {
        self.energies.iter().map(|e| sum_values(scene, e, &e.value, true)).collect()
    }

    /// Value and assembled gradient of energy `k` alone.
    pub fn energy_gradient(&self, scene: &Scene, k: usize, parallel: bool) -> Result<(f64, Vec<f64>)> {
        self.check_fresh(scene)?;
        let mut grad = vec![0.0; self.dim()];
        let v = self.add_gradient(scene, k, parallel, &mut grad)?;
        Ok((v, grad))
    }

    fn add_gradient(&self, scene: &Scene, k: usize, parallel: bool, grad: &mut [f64]) -> Result<f64> {
        let e = &self.energies[k];
        let Some(first) = &e.first else {
            return sum_values(scene, e, &e.value, parallel);
        };
        let grp = self.group(e.dynamic);
        let pos = grp.energies.iter().position(|&x| x == k).unwrap();
        let idx = &grp.indices[pos];
        let locals = run_instances(idx.count(), parallel, first, |ex, i| {
            ex.run(first, scene, Ctx { host: e.host, instance: i })?;
            Ok((ex.output(first, 0)[0], ex.output(first, 1).to_vec()))
        })?;
        let mut total = 0.0;
        for (i, (v, g)) in locals.into_iter().enumerate() {
            total += v;
            scatter_gradient(grad, idx.instance(i), &g);
        }
        Ok(total)
    }

    /// Energy and gradient without touching the Hessian.
    pub fn assemble_gradient(&mut self, scene: &Scene, parallel: bool) -> Result<f64> {
        self.check_fresh(scene)?;
        let mut grad = vec![0.0; self.dim()];
        let mut total = 0.0;
        for k in 0..self.energies.len() {
            total += self.add_gradient(scene, k, parallel, &mut grad)?;
        }
        self.gradient = grad;
        Ok(total)
    }

    /// Full assembly of energy, gradient, Hessian and diagonal accumulator.
    pub fn assemble(&mut self, scene: &Scene, opts: AssemblyOptions) -> Result<AssemblyStats> {
        self.check_fresh(scene)?;
        let mut stats = AssemblyStats::default();
        let mut grad = vec![0.0; self.dim()];
        let mut diag = vec![0.0; self.diag_layout.len];
        let mut blocks = [
            vec![0.0; self.static_group.hessian.hessian_blocks.len()],
            vec![0.0; self.dynamic_group.hessian.hessian_blocks.len()],
        ];
        let mut sizes = Vec::new();
        for (k, e) in self.energies.iter().enumerate() {
            let Some(prog) = e.hessian_program(opts.project) else {
                let v = sum_values(scene, e, &e.value, opts.parallel)?;
                stats.per_energy.push(v);
                stats.energy += v;
                continue;
            };
            let grp = self.group(e.dynamic);
            let pos = grp.energies.iter().position(|&x| x == k).unwrap();
            let pats = &grp.patterns[pos];
            let locals =
                run_instances(pats.len(), opts.parallel, prog, |ex, i| local_eval(scene, e, prog, &pats[i], i, opts, ex))?;
            let hb = &mut blocks[e.dynamic as usize];
            let mut sum = 0.0;
            for (i, l) in locals.iter().enumerate() {
                sum += l.value;
                scatter_gradient(&mut grad, grp.indices[pos].instance(i), &l.gradient);
                let pat = &pats[i];
                scatter_hessian(hb, &mut diag, &self.diag_layout, pat, &grp.position_in_data[pos][i], &l.hessian);
                if !sizes.contains(&pat.m) {
                    sizes.push(pat.m);
                }
            }
            stats.instances += pats.len();
            stats.per_energy.push(sum);
            stats.energy += sum;
        }
        let [st, dy] = blocks;
        self.static_group.hessian.hessian_blocks = st;
        self.dynamic_group.hessian.hessian_blocks = dy;
        self.gradient = grad;
        self.diagonal = diag;
        sizes.sort_unstable();
        stats.projected_sizes = sizes;
        Ok(stats)
    }
}

fn run_instances<T: Send>(
    count: usize,
    parallel: bool,
    prog: &Program,
    f: impl Fn(&mut Executor, usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel && count > 16 {
        (0..count).into_par_iter().map_init(|| Executor::new(prog), |ex, i| f(ex, i)).collect()
    } else {
        let mut ex = Executor::new(prog);
        (0..count).map(|i| f(&mut ex, i)).collect()
    }
}

fn sum_values(scene: &Scene, e: &CompiledEnergy, p: &Program, parallel: bool) -> Result<f64> {
    let count = scene.host_count(e.host);
    let vals = run_instances(count, parallel, p, |ex, i| {
        ex.run(p, scene, Ctx { host: e.host, instance: i })?;
        Ok(ex.output(p, 0)[0])
    })?;
    Ok(vals.into_iter().sum())
}

fn local_eval(
    scene: &Scene,
    e: &CompiledEnergy,
    prog: &Program,
    pat: &CompressionPattern,
    i: usize,
    opts: AssemblyOptions,
    ex: &mut Executor,
) -> Result<Local> {
    ex.run(prog, scene, Ctx { host: e.host, instance: i })?;
    let value = ex.output(prog, 0)[0];
    let gradient = ex.output(prog, 1).to_vec();
    let m = pat.m;
    let separated = opts.project && e.bundle.mode == ProjectionMode::SeparatedJacobian;
    let hessian = if separated {
        let p = e.bundle.inner_dim;
        let jt = pat.compress_cols(ex.output(prog, 2), p);
        let hin = ex.output(prog, 3);
        let mut w = vec![0.0; p * m];
        crate::kernels::matmul(hin, crate::scene::Shape::new(p, p), &jt, crate::scene::Shape::new(p, m), &mut w);
        let mut h = vec![0.0; m * m];
        for a in 0..m {
            for b in a..m {
                let mut s = 0.0;
                for r in 0..p {
                    s += jt[r * m + a] * w[r * m + b];
                }
                h[a * m + b] = s;
                h[b * m + a] = s;
            }
        }
        h
    } else {
        let hc = pat.compress(ex.output(prog, 2));
        if opts.project && e.bundle.mode == ProjectionMode::FullProject {
            let mut out = vec![0.0; m * m];
            psd_project(&hc, m, &mut out)?;
            out
        } else {
            hc
        }
    };
    if value.is_nan() || gradient.iter().chain(&hessian).any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite contribution from '{}' instance {i}", e.name)));
    }
    Ok(Local { value, gradient, hessian })
}

fn scatter_gradient(grad: &mut [f64], slots: &[Slot], g: &[f64]) {
    for s in slots.iter().filter(|s| s.is_active()) {
        let (st, c) = (s.start(), s.col as usize);
        for t in 0..s.len as usize {
            grad[st + t] += g[c + t];
        }
    }
}

fn scatter_hessian(
    data: &mut [f64],
    diag: &mut [f64],
    dl: &DiagonalLayout,
    pat: &CompressionPattern,
    positions: &[usize],
    h: &[f64],
) {
    let m = pat.m;
    let mut k = 0;
    for a in 0..pat.blocks.len() {
        let (sa, la) = pat.blocks[a];
        let oa = pat.offsets[a];
        for b in a..pat.blocks.len() {
            let lb = pat.blocks[b].1;
            let ob = pat.offsets[b];
            let dst = positions[k];
            k += 1;
            for i in 0..la {
                for j in 0..lb {
                    data[dst + i * lb + j] += h[(oa + i) * m + ob + j];
                }
            }
            if a == b {
                if let Some(d) = dl.block_of(sa) {
                    let off = dl.offsets[d];
                    for i in 0..la {
                        for j in 0..la {
                            diag[off + i * la + j] += h[(oa + i) * m + oa + j];
                        }
                    }
                }
            }
        }
    }
}
