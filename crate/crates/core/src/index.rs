//! Global gradient layout and per-instance placement indices.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::scene::{AttrId, ConnId, DomainId, EnergyDecl, HostId, Scene};

/// Contiguous DoF blocks, one per target attribute, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientLayout {
    pub targets: Vec<AttrId>,
    pub boundaries: Vec<usize>,
    /// Per target: flattened size of one instance.
    pub block_len: Vec<usize>,
    pub total_dofs: usize,
}

impl GradientLayout {
    pub fn build(scene: &Scene, targets: &[AttrId]) -> Result<GradientLayout> {
        if targets.is_empty() {
            return invalid("gradient layout needs at least one target");
        }
        let mut boundaries = vec![0];
        let mut block_len = Vec::new();
        for (k, t) in targets.iter().enumerate() {
            if targets[..k].contains(t) {
                return invalid(format!("duplicate target '{}'", scene.attr_path(*t)));
            }
            let a = scene.attribute(*t);
            if !a.is_differentiable() {
                return invalid(format!("target '{}' is not differentiable data", scene.attr_path(*t)));
            }
            let n = scene.host_count(a.host) * a.shape.size();
            boundaries.push(boundaries.last().unwrap() + n);
            block_len.push(a.shape.size());
        }
        let total_dofs = *boundaries.last().unwrap();
        Ok(GradientLayout { targets: targets.to_vec(), boundaries, block_len, total_dofs })
    }

    pub fn position(&self, attr: AttrId) -> Option<usize> {
        self.targets.iter().position(|t| *t == attr)
    }

    pub fn start(&self, attr: AttrId) -> Option<usize> {
        self.position(attr).map(|k| self.boundaries[k])
    }

    /// Every DoF block `(start, len)` in global order.
    pub fn dof_blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.targets.len() {
            let len = self.block_len[k];
            let mut s = self.boundaries[k];
            while s < self.boundaries[k + 1] {
                out.push((s, len));
                s += len;
            }
        }
        out
    }

    /// Splits a global vector into per-target slices.
    pub fn split(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.targets.len()).map(|k| v[self.boundaries[k]..self.boundaries[k + 1]].to_vec()).collect()
    }

    pub fn gather(&self, scene: &Scene) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.total_dofs);
        for t in &self.targets {
            v.extend_from_slice(scene.values(*t));
        }
        v
    }

    pub fn scatter(&self, scene: &mut Scene, v: &[f64]) -> Result<()> {
        for (k, t) in self.targets.iter().enumerate() {
            scene.update_value(*t, &v[self.boundaries[k]..self.boundaries[k + 1]])?;
        }
        Ok(())
    }
}

/// Shape of the local parameter vector of a boundary node, mirroring the
/// capacity rules: data is one slot, JOIN repeats its child `k` times, UNION
/// pads its branches to the widest one, computations concatenate.
#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Data { attr: AttrId, len: usize },
    Join { conn: ConnId, arity: usize, child: Box<Param> },
    Union { domain: DomainId, branches: Vec<Option<Param>> },
    Concat(Vec<Param>),
}

impl Param {
    /// Local parameter dimension.
    pub fn dim(&self) -> usize {
        match self {
            Param::Data { len, .. } => *len,
            Param::Join { arity, child, .. } => arity * child.dim(),
            Param::Union { branches, .. } => branches.iter().map(|b| b.as_ref().map_or(0, |p| p.dim())).max().unwrap_or(0),
            Param::Concat(ps) => ps.iter().map(|p| p.dim()).sum(),
        }
    }

    /// Worst-case slot count.
    pub fn capacity(&self) -> usize {
        match self {
            Param::Data { .. } => 1,
            Param::Join { arity, child, .. } => arity * child.capacity(),
            Param::Union { branches, .. } => {
                branches.iter().map(|b| b.as_ref().map_or(0, |p| p.capacity())).max().unwrap_or(0)
            }
            Param::Concat(ps) => ps.iter().map(|p| p.capacity()).sum(),
        }
    }

    /// Every data attribute addressed by this tree.
    pub fn attributes(&self, out: &mut Vec<AttrId>) {
        match self {
            Param::Data { attr, .. } => {
                if !out.contains(attr) {
                    out.push(*attr)
                }
            }
            Param::Join { child, .. } => child.attributes(out),
            Param::Union { branches, .. } => branches.iter().flatten().for_each(|p| p.attributes(out)),
            Param::Concat(ps) => ps.iter().for_each(|p| p.attributes(out)),
        }
    }

    /// Whether any connectivity or union in the tree touches a dynamic domain.
    pub fn conns(&self, out: &mut Vec<ConnId>) {
        match self {
            Param::Data { .. } => {}
            Param::Join { conn, child, .. } => {
                out.push(*conn);
                child.conns(out)
            }
            Param::Union { branches, .. } => branches.iter().flatten().for_each(|p| p.conns(out)),
            Param::Concat(ps) => ps.iter().for_each(|p| p.conns(out)),
        }
    }

    fn fill(&self, scene: &Scene, layout: &GradientLayout, instance: usize, col: usize, out: &mut Vec<Slot>) -> Result<()> {
        match self {
            Param::Data { attr, len } => {
                let a = scene.attribute(*attr);
                let inst = match a.host {
                    HostId::Domain(_) => instance,
                    _ => 0,
                };
                let start = layout
                    .start(*attr)
                    .ok_or_else(|| Error::Internal(format!("'{}' is not a target", scene.attr_path(*attr))))?;
                out.push(Slot { index: (start + len * inst + 1) as u32, len: *len as u32, col: col as u32 });
            }
            Param::Join { conn, arity, child } => {
                let c = scene.connectivity(*conn);
                let n_to = scene.domain(c.to).count();
                if (instance + 1) * arity > c.indices.len() {
                    return Err(Error::Range(format!("instance {instance} beyond connectivity '{}'", c.name)));
                }
                let q = child.dim();
                for l in 0..*arity {
                    let j = c.indices[instance * arity + l];
                    if j >= n_to {
                        return Err(Error::Range(format!("connectivity '{}' entry {j} >= {n_to}", c.name)));
                    }
                    child.fill(scene, layout, j, col + l * q, out)?;
                }
            }
            Param::Union { domain, branches } => {
                let (j, i) = scene.union_decode(*domain, instance)?;
                let before = out.len();
                if let Some(p) = &branches[j] {
                    p.fill(scene, layout, i, col, out)?;
                }
                let cap = self.capacity();
                while out.len() < before + cap {
                    out.push(Slot::EMPTY);
                }
            }
            Param::Concat(ps) => {
                let mut c = col;
                for p in ps {
                    p.fill(scene, layout, instance, c, out)?;
                    c += p.dim();
                }
            }
        }
        Ok(())
    }

    /// Slots for one instance of the owning domain, exactly `capacity()` long.
    pub fn slots(&self, scene: &Scene, layout: &GradientLayout, instance: usize) -> Result<Vec<Slot>> {
        let mut out = Vec::with_capacity(self.capacity());
        self.fill(scene, layout, instance, 0, &mut out)?;
        debug_assert_eq!(out.len(), self.capacity());
        Ok(out)
    }
}

/// One placement slot: 1-based global start (`0` = inactive), block length and
/// the first local column it covers.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub index: u32,
    pub len: u32,
    pub col: u32,
}

impl Slot {
    pub const EMPTY: Slot = Slot { index: 0, len: 0, col: 0 };

    pub fn is_active(&self) -> bool {
        self.index != 0
    }

    /// Zero-based global start.
    pub fn start(&self) -> usize {
        self.index as usize - 1
    }
}

/// Fixed-capacity slot table for every instance of an energy.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementIndices {
    pub capacity: usize,
    pub slots: Vec<Slot>,
}

impl PlacementIndices {
    pub fn compute(
        scene: &Scene,
        layout: &GradientLayout,
        param: &Param,
        count: usize,
        parallel: bool,
    ) -> Result<PlacementIndices> {
        let capacity = param.capacity();
        let mut slots = vec![Slot::EMPTY; count * capacity];
        if capacity == 0 {
            return Ok(PlacementIndices { capacity, slots });
        }
        let work = |(i, chunk): (usize, &mut [Slot])| -> Result<()> {
            let s = param.slots(scene, layout, i)?;
            chunk.copy_from_slice(&s);
            Ok(())
        };
        if parallel {
            slots.par_chunks_mut(capacity).enumerate().try_for_each(work)?;
        } else {
            slots.chunks_mut(capacity).enumerate().try_for_each(work)?;
        }
        Ok(PlacementIndices { capacity, slots })
    }

    pub fn count(&self) -> usize {
        if self.capacity == 0 {
            0
        } else {
            self.slots.len() / self.capacity
        }
    }

    pub fn instance(&self, i: usize) -> &[Slot] {
        &self.slots[i * self.capacity..(i + 1) * self.capacity]
    }

    /// One row per instance: `instance,index:len,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,slots\n");
        for i in 0..self.count() {
            let row: Vec<String> = self.instance(i).iter().map(|x| format!("{}:{}", x.index, x.len)).collect();
            let _ = writeln!(s, "{i},{}", row.join(" "));
        }
        s
    }
}

/// Splits energies into the static group and the dynamic (resizable) group.
pub fn partition_static_dynamic(energies: &[EnergyDecl]) -> (Vec<usize>, Vec<usize>) {
    let mut st = Vec::new();
    let mut dy = Vec::new();
    for (k, e) in energies.iter().enumerate() {
        if e.dynamic_instances {
            dy.push(k)
        } else {
            st.push(k)
        }
    }
    (st, dy)
}
