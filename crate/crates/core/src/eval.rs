//! Plan compiler and executor.
//!
//! A plan is a topologically ordered list of matrix-granularity instructions
//! over append-only registers.  JOIN, UNION and named attributes are cut out
//! into their own cached modules and invoked through call instructions; the
//! children of JOIN and UNION are modules too because they run in another
//! instance context.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{ExprGraph, NodeId, Op};
use crate::kernels;
use crate::scene::{AttrId, ConnId, DomainId, HostId, Scene, Shape};

#[derive(Clone, Debug)]
pub enum Instr {
    Kernel { op: Op, inputs: Vec<u32>, out: u32 },
    Load { attr: AttrId, out: u32 },
    /// Runs module `slot` in the current instance context.
    Call { slot: u32, out: u32 },
    /// Runs module `slot` once per connected instance and stacks the rows.
    Join { conn: ConnId, slot: u32, out: u32 },
    /// Dispatches on the decoded (branch, local) pair.
    Union { domain: DomainId, slots: Vec<u32>, out: u32 },
}

#[derive(Clone, Debug)]
pub struct Reg {
    pub offset: usize,
    pub shape: Shape,
    /// Constant pool entry, written once when scratch is allocated.
    pub init: Option<Arc<[f64]>>,
}

#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub roots: Vec<NodeId>,
    pub instrs: Vec<Instr>,
    pub regs: Vec<Reg>,
    pub outputs: Vec<u32>,
    /// Call slots: the module root node each slot refers to.
    pub modules: Vec<NodeId>,
    pub data_bindings: Vec<AttrId>,
    pub scratch_len: usize,
}

impl EvalPlan {
    pub fn num_instructions(&self) -> usize {
        self.instrs.len()
    }

    pub fn output_shape(&self, k: usize) -> Shape {
        self.regs[self.outputs[k] as usize].shape
    }

    /// Human-readable listing, stable across rebuilds of the same graph.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let roots: Vec<String> = self.roots.iter().map(|r| format!("n{}", r.0)).collect();
        let _ = writeln!(s, "plan {}:", roots.join(","));
        for (i, r) in self.regs.iter().enumerate() {
            if let Some(v) = &r.init {
                let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(s, "  r{i}:{} = imm [{}]", r.shape, vals.join(", "));
            }
        }
        for ins in &self.instrs {
            let line = match ins {
                Instr::Kernel { op, inputs, out } => {
                    let args: Vec<String> = inputs.iter().map(|r| format!("r{r}")).collect();
                    let extra = match op {
                        Op::Row(i) | Op::Col(i) | Op::Index(i) => format!(" #{i}"),
                        Op::Select(c) => format!(" {c:?}"),
                        Op::Gather(p) => format!(" ({} picks)", p.len()),
                        _ => String::new(),
                    };
                    format!("r{out}:{} = {}{} {}", self.regs[*out as usize].shape, op.name(), extra, args.join(", "))
                }
                Instr::Load { attr, out } => format!("r{out}:{} = load a{}", self.regs[*out as usize].shape, attr.0),
                Instr::Call { slot, out } => {
                    format!("r{out}:{} = call n{}", self.regs[*out as usize].shape, self.modules[*slot as usize].0)
                }
                Instr::Join { conn, slot, out } => format!(
                    "r{out}:{} = join c{} n{}",
                    self.regs[*out as usize].shape,
                    conn.0,
                    self.modules[*slot as usize].0
                ),
                Instr::Union { domain, slots, out } => {
                    let m: Vec<String> = slots.iter().map(|k| format!("n{}", self.modules[*k as usize].0)).collect();
                    format!("r{out}:{} = union d{} [{}]", self.regs[*out as usize].shape, domain.0, m.join(", "))
                }
            };
            let _ = writeln!(s, "  {line}");
        }
        let outs: Vec<String> = self.outputs.iter().map(|r| format!("r{r}")).collect();
        let _ = writeln!(s, "  ret {}", outs.join(", "));
        s
    }
}

fn is_important(g: &ExprGraph, n: NodeId) -> bool {
    matches!(g.node(n).op, Op::Join(_) | Op::Union(_)) || g.name_of(n).is_some()
}

struct Builder<'g> {
    g: &'g ExprGraph,
    plan: EvalPlan,
    reg_of: HashMap<NodeId, u32>,
    slot_of: HashMap<NodeId, u32>,
}

impl<'g> Builder<'g> {
    fn new_reg(&mut self, shape: Shape, init: Option<Arc<[f64]>>) -> u32 {
        let r = self.plan.regs.len() as u32;
        self.plan.regs.push(Reg { offset: self.plan.scratch_len, shape, init });
        self.plan.scratch_len += shape.size();
        r
    }

    fn slot(&mut self, n: NodeId) -> u32 {
        if let Some(&s) = self.slot_of.get(&n) {
            return s;
        }
        let s = self.plan.modules.len() as u32;
        self.plan.modules.push(n);
        self.slot_of.insert(n, s);
        s
    }

    /// Emits the instruction computing `n` itself, its operands being ready.
    fn emit_node(&mut self, n: NodeId, as_root: bool) -> u32 {
        let node = self.g.node(n);
        let shape = node.shape;
        if !as_root && is_important(self.g, n) {
            let slot = self.slot(n);
            let out = self.new_reg(shape, None);
            self.plan.instrs.push(Instr::Call { slot, out });
            return out;
        }
        match &node.op {
            Op::Const(_) | Op::Literal(_) | Op::Zero => {
                let v = self.g.constant_values(n).unwrap();
                self.new_reg(shape, Some(v.into()))
            }
            Op::Data(a) | Op::Constant(a) => {
                if !self.plan.data_bindings.contains(a) {
                    self.plan.data_bindings.push(*a);
                }
                let out = self.new_reg(shape, None);
                self.plan.instrs.push(Instr::Load { attr: *a, out });
                out
            }
            Op::Join(conn) => {
                let slot = self.slot(node.children[0]);
                let out = self.new_reg(shape, None);
                self.plan.instrs.push(Instr::Join { conn: *conn, slot, out });
                out
            }
            Op::Union(d) => {
                let slots = node.children.clone().into_iter().map(|c| self.slot(c)).collect();
                let out = self.new_reg(shape, None);
                self.plan.instrs.push(Instr::Union { domain: *d, slots, out });
                out
            }
            op => {
                let inputs = node.children.iter().map(|c| self.reg_of[c]).collect();
                let out = self.new_reg(shape, None);
                self.plan.instrs.push(Instr::Kernel { op: op.clone(), inputs, out });
                out
            }
        }
    }

    /// Iterative post-order walk; does not descend below module boundaries.
    fn visit(&mut self, root: NodeId) {
        let mut stack: Vec<(NodeId, bool, bool)> = vec![(root, false, true)];
        while let Some((n, expanded, as_root)) = stack.pop() {
            if self.reg_of.contains_key(&n) {
                continue;
            }
            let node = self.g.node(n);
            let opaque = (!as_root && is_important(self.g, n))
                || matches!(node.op, Op::Join(_) | Op::Union(_))
                || node.children.is_empty();
            if expanded || opaque {
                let r = self.emit_node(n, as_root);
                self.reg_of.insert(n, r);
                continue;
            }
            stack.push((n, true, as_root));
            for c in node.children.iter().rev() {
                if !self.reg_of.contains_key(c) {
                    stack.push((*c, false, false));
                }
            }
        }
    }
}

/// Compiles `roots` into one plan.  Every root is expanded inline even when
/// it is itself a named attribute.
pub fn build_plan(g: &ExprGraph, roots: &[NodeId]) -> EvalPlan {
    let mut b = Builder {
        g,
        plan: EvalPlan {
            roots: roots.to_vec(),
            instrs: Vec::new(),
            regs: Vec::new(),
            outputs: Vec::new(),
            modules: Vec::new(),
            data_bindings: Vec::new(),
            scratch_len: 0,
        },
        reg_of: HashMap::new(),
        slot_of: HashMap::new(),
    };
    for r in roots {
        b.visit(*r);
        let out = b.reg_of[r];
        b.plan.outputs.push(out);
    }
    b.plan
}

/// Compiled modules keyed by their root node.
#[derive(Default, Clone)]
pub struct ModuleCache {
    modules: HashMap<NodeId, Arc<EvalPlan>>,
}

impl ModuleCache {
    pub fn new() -> ModuleCache {
        ModuleCache::default()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn get(&self, n: NodeId) -> Option<&Arc<EvalPlan>> {
        self.modules.get(&n)
    }

    /// Compiles (or fetches) the module rooted at `n` and every module it
    /// references.
    pub fn module(&mut self, g: &ExprGraph, n: NodeId) -> Arc<EvalPlan> {
        let mut pending = vec![n];
        while let Some(m) = pending.pop() {
            if self.modules.contains_key(&m) {
                continue;
            }
            let plan = Arc::new(build_plan(g, &[m]));
            pending.extend(plan.modules.iter().copied());
            self.modules.insert(m, plan);
        }
        self.modules[&n].clone()
    }

    /// Resolves module slots of `plan` (transitively) into an executable
    /// program whose entry is index 0.
    pub fn link(&mut self, g: &ExprGraph, plan: EvalPlan) -> Result<Program> {
        for m in plan.modules.clone() {
            self.module(g, m);
        }
        let mut plans: Vec<Arc<EvalPlan>> = vec![Arc::new(plan)];
        let mut index: HashMap<NodeId, usize> = HashMap::new();
        let mut links: Vec<Vec<usize>> = Vec::new();
        let mut i = 0;
        while i < plans.len() {
            let p = plans[i].clone();
            let mut l = Vec::with_capacity(p.modules.len());
            for m in &p.modules {
                let idx = match index.get(m) {
                    Some(&k) => k,
                    None => {
                        let mp = self
                            .modules
                            .get(m)
                            .ok_or_else(|| Error::Internal(format!("unresolved module n{}", m.0)))?
                            .clone();
                        plans.push(mp);
                        index.insert(*m, plans.len() - 1);
                        plans.len() - 1
                    }
                };
                l.push(idx);
            }
            links.push(l);
            i += 1;
        }
        Ok(Program { plans, links })
    }

    /// Convenience: plan + link for `roots`.
    pub fn program(&mut self, g: &ExprGraph, roots: &[NodeId]) -> Result<Program> {
        let plan = build_plan(g, roots);
        self.link(g, plan)
    }
}

/// A linked plan: entry is `plans[0]`; `links[m][slot]` is the program index
/// of the module called through `slot` of plan `m`.
#[derive(Clone, Debug)]
pub struct Program {
    pub plans: Vec<Arc<EvalPlan>>,
    pub links: Vec<Vec<usize>>,
}

impl Program {
    pub fn entry(&self) -> &EvalPlan {
        &self.plans[0]
    }

    pub fn num_outputs(&self) -> usize {
        self.plans[0].outputs.len()
    }

    pub fn dump(&self) -> String {
        self.plans.iter().map(|p| p.dump()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Ctx {
    pub host: HostId,
    pub instance: usize,
}

/// Per-thread scratch space for running a program.
pub struct Executor {
    scratch: Vec<Vec<f64>>,
}

impl Executor {
    pub fn new(p: &Program) -> Executor {
        let scratch = p
            .plans
            .iter()
            .map(|plan| {
                let mut buf = vec![0.0; plan.scratch_len];
                for r in &plan.regs {
                    if let Some(v) = &r.init {
                        buf[r.offset..r.offset + v.len()].copy_from_slice(v);
                    }
                }
                buf
            })
            .collect();
        Executor { scratch }
    }

    /// Runs the entry plan at `ctx`; results are read with [`Executor::output`].
    pub fn run(&mut self, p: &Program, scene: &Scene, ctx: Ctx) -> Result<()> {
        self.exec(p, scene, 0, ctx)
    }

    pub fn output<'a>(&'a self, p: &Program, k: usize) -> &'a [f64] {
        let plan = &p.plans[0];
        let r = &plan.regs[plan.outputs[k] as usize];
        &self.scratch[0][r.offset..r.offset + r.shape.size()]
    }

    fn exec(&mut self, p: &Program, scene: &Scene, m: usize, ctx: Ctx) -> Result<()> {
        let plan = p.plans[m].clone();
        let mut buf = std::mem::take(&mut self.scratch[m]);
        let res = self.exec_into(p, scene, m, &plan, &mut buf, ctx);
        self.scratch[m] = buf;
        res
    }

    fn module_output(&self, p: &Program, m: usize) -> &[f64] {
        let plan = &p.plans[m];
        let r = &plan.regs[plan.outputs[0] as usize];
        &self.scratch[m][r.offset..r.offset + r.shape.size()]
    }

    fn exec_into(&mut self, p: &Program, scene: &Scene, m: usize, plan: &EvalPlan, buf: &mut [f64], ctx: Ctx) -> Result<()> {
        let mut in_shapes: Vec<Shape> = Vec::with_capacity(4);
        for ins in &plan.instrs {
            match ins {
                Instr::Kernel { op, inputs, out } => {
                    let o = &plan.regs[*out as usize];
                    let (lo, hi) = buf.split_at_mut(o.offset);
                    in_shapes.clear();
                    let mut refs: Vec<&[f64]> = Vec::with_capacity(inputs.len());
                    for r in inputs {
                        let reg = &plan.regs[*r as usize];
                        in_shapes.push(reg.shape);
                        refs.push(&lo[reg.offset..reg.offset + reg.shape.size()]);
                    }
                    kernels::apply(op, o.shape, &refs, &in_shapes, &mut hi[..o.shape.size()])?;
                }
                Instr::Load { attr, out } => {
                    let a = scene.attribute(*attr);
                    let inst = match a.host {
                        HostId::Domain(_) => ctx.instance,
                        _ => 0,
                    };
                    let n = a.shape.size();
                    let vals = a.values();
                    if (inst + 1) * n > vals.len() {
                        return Err(Error::Runtime(format!(
                            "instance {inst} out of range reading '{}'",
                            scene.attr_path(*attr)
                        )));
                    }
                    let o = &plan.regs[*out as usize];
                    buf[o.offset..o.offset + n].copy_from_slice(&vals[inst * n..(inst + 1) * n]);
                }
                Instr::Call { slot, out } => {
                    let callee = p.links[m][*slot as usize];
                    self.exec(p, scene, callee, ctx)?;
                    let o = &plan.regs[*out as usize];
                    let n = o.shape.size();
                    buf[o.offset..o.offset + n].copy_from_slice(self.module_output(p, callee));
                }
                Instr::Join { conn, slot, out } => {
                    let c = scene.connectivity(*conn);
                    let n_from = scene.domain(c.from).count();
                    if c.indices.len() != n_from * c.arity {
                        return Err(Error::Runtime(format!("connectivity '{}' is not populated", c.name)));
                    }
                    if ctx.instance >= n_from {
                        return Err(Error::Runtime(format!("instance {} out of range for '{}'", ctx.instance, c.name)));
                    }
                    let callee = p.links[m][*slot as usize];
                    let o = plan.regs[*out as usize].clone();
                    let w = o.shape.cols;
                    for l in 0..c.arity {
                        let j = c.indices[ctx.instance * c.arity + l];
                        self.exec(p, scene, callee, Ctx { host: HostId::Domain(c.to), instance: j })?;
                        buf[o.offset + l * w..o.offset + (l + 1) * w].copy_from_slice(self.module_output(p, callee));
                    }
                }
                Instr::Union { domain, slots, out } => {
                    let (children, offsets) = scene.union_offsets(*domain);
                    let total = scene.domain(*domain).count();
                    if ctx.instance >= total {
                        return Err(Error::Runtime(format!("union index {} >= {total}", ctx.instance)));
                    }
                    let (j, i) = crate::scene::decode_offsets(offsets, ctx.instance);
                    let callee = p.links[m][slots[j] as usize];
                    self.exec(p, scene, callee, Ctx { host: HostId::Domain(children[j]), instance: i })?;
                    let o = &plan.regs[*out as usize];
                    let n = o.shape.size();
                    buf[o.offset..o.offset + n].copy_from_slice(self.module_output(p, callee));
                }
            }
        }
        Ok(())
    }
}

/// Whole-attribute result: instance `i` occupies `[i*rc, (i+1)*rc)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTensor {
    pub host: HostId,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl InstanceTensor {
    pub fn count(&self) -> usize {
        self.data.len() / self.shape.size()
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        let n = self.shape.size();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Runs a single-output program over every instance of `host`.
pub fn run_over_host(p: &Program, scene: &Scene, host: HostId, parallel: bool) -> Result<Vec<f64>> {
    let count = scene.host_count(host);
    let n = p.entry().output_shape(0).size();
    let mut data = vec![0.0; count * n];
    if parallel && count > 64 {
        data.par_chunks_mut(n).enumerate().try_for_each_init(
            || Executor::new(p),
            |ex, (i, chunk)| -> Result<()> {
                ex.run(p, scene, Ctx { host, instance: i })?;
                chunk.copy_from_slice(ex.output(p, 0));
                Ok(())
            },
        )?;
    } else {
        let mut ex = Executor::new(p);
        for (i, chunk) in data.chunks_mut(n).enumerate() {
            ex.run(p, scene, Ctx { host, instance: i })?;
            chunk.copy_from_slice(ex.output(p, 0));
        }
    }
    Ok(data)
}

/// Evaluates an expression over its host's instances.
pub fn evaluate_node(scene: &Scene, cache: &mut ModuleCache, node: NodeId) -> Result<InstanceTensor> {
    let p = cache.program(&scene.expr, &[node])?;
    let host = scene.expr.host(node);
    let data = run_over_host(&p, scene, host, true)?;
    Ok(InstanceTensor { host, shape: scene.expr.shape(node), data })
}

/// Evaluates an attribute with a throwaway module cache.
pub fn evaluate(scene: &Scene, attr: AttrId) -> Result<InstanceTensor> {
    let node = scene.node(attr)?;
    evaluate_node(scene, &mut ModuleCache::new(), node)
}
