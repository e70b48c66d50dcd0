//! Symbolic differentiation over boundary regions.
//!
//! The energy DAG is cut at boundary nodes (JOIN, UNION, target data).  Each
//! region between a boundary node and its boundary successors is
//! differentiated locally with forward-over-forward tangents, and the local
//! results are composed with the second-order chain rule.  JOIN and UNION
//! lift their children's derivatives instead of differentiating themselves.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::expr::{pick, ExprGraph, NodeId, Op, ZERO_PICK};
use crate::index::Param;
use crate::scene::{AttrId, HostId, Scene, Shape};

/// What an energy asks for when its Hessian is projected.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum ProjectionRequest {
    /// Reduced projection when the inner map is linear, full otherwise.
    #[default]
    Auto,
    Full,
    Reduced,
    Separated,
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    None,
    FullProject,
    ReducedProject,
    SeparatedJacobian,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Root,
    Join,
    Union,
    Data,
}

#[derive(Clone, Debug, Default)]
pub struct BoundaryGraph {
    pub root: NodeId,
    /// Boundary successors of the root region, left to right.
    pub root_succ: Vec<NodeId>,
    /// Successors of each JOIN region.
    pub succ: HashMap<NodeId, Vec<NodeId>>,
    /// Successors of each UNION branch region.
    pub branch_succ: HashMap<NodeId, Vec<Vec<NodeId>>>,
    /// Every boundary node below the root, in discovery order.
    pub nodes: Vec<NodeId>,
    pub kinds: HashMap<NodeId, BoundaryKind>,
}

impl BoundaryGraph {
    pub fn is_empty(&self) -> bool {
        self.root_succ.is_empty()
    }

    /// Number of (boundary node, successor) edges.
    pub fn num_edges(&self) -> usize {
        self.root_succ.len()
            + self.succ.values().map(|s| s.len()).sum::<usize>()
            + self.branch_succ.values().flatten().map(|s| s.len()).sum::<usize>()
    }

    pub fn dump(&self, g: &ExprGraph) -> String {
        let name = |n: &NodeId| format!("n{}:{}{}", n.0, g.node(*n).op.name(), g.shape(*n));
        let list = |v: &[NodeId]| v.iter().map(name).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "root {} -> [{}]", name(&self.root), list(&self.root_succ));
        for n in &self.nodes {
            match self.kinds[n] {
                BoundaryKind::Join => {
                    let _ = writeln!(s, "join {} -> [{}]", name(n), list(&self.succ[n]));
                }
                BoundaryKind::Union => {
                    for (j, b) in self.branch_succ[n].iter().enumerate() {
                        let _ = writeln!(s, "union {} #{j} -> [{}]", name(n), list(b));
                    }
                }
                _ => {}
            }
        }
        s
    }
}

/// Tracks which nodes depend on a target attribute.
struct Deps<'t> {
    targets: &'t [AttrId],
    memo: HashMap<NodeId, bool>,
}

impl<'t> Deps<'t> {
    fn new(targets: &'t [AttrId]) -> Deps<'t> {
        Deps { targets, memo: HashMap::new() }
    }

    fn get(&mut self, g: &ExprGraph, n: NodeId) -> bool {
        if let Some(&d) = self.memo.get(&n) {
            return d;
        }
        for m in g.topo_order(&[n]) {
            if self.memo.contains_key(&m) {
                continue;
            }
            let node = g.node(m);
            let d = match node.op {
                Op::Data(a) => self.targets.contains(&a),
                _ => node.children.iter().any(|c| self.memo[c]),
            };
            self.memo.insert(m, d);
        }
        self.memo[&n]
    }

    fn is_boundary(&mut self, g: &ExprGraph, n: NodeId) -> bool {
        matches!(g.node(n).op, Op::Join(_) | Op::Union(_) | Op::Data(_)) && self.get(g, n)
    }
}

/// Boundary nodes reachable from `start` without crossing another boundary.
fn region_succ(g: &ExprGraph, deps: &mut Deps, start: NodeId) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        if !visited.insert(n) || !deps.get(g, n) {
            continue;
        }
        if deps.is_boundary(g, n) {
            out.push(n);
            continue;
        }
        for c in g.node(n).children.iter().rev() {
            stack.push(*c);
        }
    }
    out
}

/// Cuts the DAG under `root` into boundary regions.
pub fn find_boundary_pairs(g: &ExprGraph, root: NodeId, targets: &[AttrId]) -> BoundaryGraph {
    let mut deps = Deps::new(targets);
    boundary_graph(g, &mut deps, root)
}

fn boundary_graph(g: &ExprGraph, deps: &mut Deps, root: NodeId) -> BoundaryGraph {
    let mut bg = BoundaryGraph { root, ..Default::default() };
    bg.root_succ = region_succ(g, deps, root);
    let mut queue: Vec<NodeId> = bg.root_succ.clone();
    let mut seen: HashSet<NodeId> = HashSet::new();
    let mut qi = 0;
    while qi < queue.len() {
        let n = queue[qi];
        qi += 1;
        if !seen.insert(n) {
            continue;
        }
        bg.nodes.push(n);
        let node = g.node(n);
        match node.op {
            Op::Join(_) => {
                bg.kinds.insert(n, BoundaryKind::Join);
                let s = region_succ(g, deps, node.children[0]);
                queue.extend(s.iter().copied());
                bg.succ.insert(n, s);
            }
            Op::Union(_) => {
                bg.kinds.insert(n, BoundaryKind::Union);
                let mut per = Vec::new();
                for c in &node.children {
                    let s = region_succ(g, deps, *c);
                    queue.extend(s.iter().copied());
                    per.push(s);
                }
                bg.branch_succ.insert(n, per);
            }
            _ => {
                bg.kinds.insert(n, BoundaryKind::Data);
            }
        }
    }
    bg
}

/// Jacobian `p x q` and stacked component Hessians `(p*q) x q` of a region
/// output with respect to its merged boundary successors.
#[derive(Clone, Debug)]
pub struct LocalDerivative {
    pub of: NodeId,
    pub wrt: Vec<NodeId>,
    pub jacobian: NodeId,
    pub hessian: NodeId,
    pub p: usize,
    pub q: usize,
}

/// Derivative of a boundary node with respect to the target parameters it
/// reaches, with the parameter tree describing its local columns.
#[derive(Clone, Debug)]
pub struct Lifted {
    pub jacobian: NodeId,
    pub hessian: NodeId,
    pub param: Param,
}

/// Compiled derivative of one energy.
#[derive(Clone, Debug)]
pub struct DerivativeBundle {
    pub root: NodeId,
    pub host: HostId,
    pub value: NodeId,
    /// `1 x dim`; `None` when the energy does not depend on any target.
    pub gradient: Option<NodeId>,
    /// `dim x dim`, unnegated.  Under the reduced modes this is already
    /// `J^T Project(H_inner) J`.
    pub hessian: Option<NodeId>,
    /// Unprojected `dim x dim` Hessian regardless of mode.
    pub raw_hessian: Option<NodeId>,
    /// Inner Jacobian `inner_dim x dim` (block diagonal over root successors).
    pub jacobian: Option<NodeId>,
    /// `inner_dim x inner_dim`, projected in the reduced modes.
    pub inner_hessian: Option<NodeId>,
    pub mode: ProjectionMode,
    pub param: Param,
    pub dim: usize,
    pub inner_dim: usize,
    pub linear: bool,
}

impl DerivativeBundle {
    pub fn capacity(&self) -> usize {
        self.param.capacity()
    }

    pub fn dump(&self, g: &ExprGraph) -> String {
        let sh = |n: Option<NodeId>| n.map(|n| g.shape(n).to_string()).unwrap_or_else(|| "-".into());
        format!(
            "mode {:?} dim {} inner {} capacity {} gradient {} hessian {} jacobian {} inner_hessian {}\n",
            self.mode,
            self.dim,
            self.inner_dim,
            self.capacity(),
            sh(self.gradient),
            sh(self.hessian),
            sh(self.jacobian),
            sh(self.inner_hessian)
        )
    }
}

/// Forward tangents for one region: seeds are unit literals on the
/// successor nodes, one direction per merged parameter entry.
struct Tangents<'a> {
    seeds: &'a HashMap<NodeId, (usize, usize)>,
    memo: HashMap<(NodeId, usize), NodeId>,
}

impl<'a> Tangents<'a> {
    fn get(&mut self, g: &mut ExprGraph, deps: &mut Deps, n: NodeId, dir: usize) -> Result<NodeId> {
        if let Some(&t) = self.memo.get(&(n, dir)) {
            return Ok(t);
        }
        // Iterative over an explicit stack: nested tangent expressions can
        // be deep.
        let mut stack = vec![(n, false)];
        while let Some((m, ready)) = stack.pop() {
            if self.memo.contains_key(&(m, dir)) {
                continue;
            }
            let shape = g.shape(m);
            if let Some(&(off, len)) = self.seeds.get(&m) {
                let t = if dir >= off && dir < off + len { g.basis(shape, dir - off) } else { g.zero(shape) };
                self.memo.insert((m, dir), t);
                continue;
            }
            if !deps.get(g, m) {
                let z = g.zero(shape);
                self.memo.insert((m, dir), z);
                continue;
            }
            let children = g.node(m).children.clone();
            if !ready {
                if matches!(g.node(m).op, Op::Join(_) | Op::Union(_) | Op::Data(_)) {
                    return Err(Error::Internal(format!("boundary node n{} missing from region seeds", m.0)));
                }
                stack.push((m, true));
                for c in children.iter().rev() {
                    if !self.memo.contains_key(&(*c, dir)) {
                        stack.push((*c, false));
                    }
                }
                continue;
            }
            let t: Vec<NodeId> = children.iter().map(|c| self.memo[&(*c, dir)]).collect();
            let r = rule(g, m, &children, &t)?;
            self.memo.insert((m, dir), r);
        }
        Ok(self.memo[&(n, dir)])
    }
}

fn rule(g: &mut ExprGraph, n: NodeId, a: &[NodeId], t: &[NodeId]) -> Result<NodeId> {
    let op = g.node(n).op.clone();
    let shape = g.shape(n);
    Ok(match op {
        Op::Const(_) | Op::Literal(_) | Op::Zero | Op::Constant(_) => g.zero(shape),
        Op::Add => g.add(t[0], t[1])?,
        Op::Sub => g.sub(t[0], t[1])?,
        Op::Neg => g.neg(t[0])?,
        Op::Mul => {
            let x = g.mul(t[0], a[1])?;
            let y = g.mul(a[0], t[1])?;
            g.add(x, y)?
        }
        Op::Div => {
            let x = g.div(t[0], a[1])?;
            let nt = g.mul(n, t[1])?;
            let y = g.div(nt, a[1])?;
            g.sub(x, y)?
        }
        Op::MatMul => {
            let x = g.matmul(t[0], a[1])?;
            let y = g.matmul(a[0], t[1])?;
            g.add(x, y)?
        }
        Op::Dot => {
            let x = g.dot(t[0], a[1])?;
            let y = g.dot(a[0], t[1])?;
            g.add(x, y)?
        }
        Op::Cross => {
            let x = g.cross(t[0], a[1])?;
            let y = g.cross(a[0], t[1])?;
            g.add(x, y)?
        }
        Op::Norm => {
            let d = g.dot(a[0], t[0])?;
            g.div(d, n)?
        }
        Op::Det => {
            let inv = g.inverse(a[0])?;
            let m = g.matmul(inv, t[0])?;
            let tr = g.trace(m)?;
            g.mul(n, tr)?
        }
        Op::Inverse => {
            let x = g.matmul(n, t[0])?;
            let y = g.matmul(x, n)?;
            g.neg(y)?
        }
        Op::Transpose => g.transpose(t[0])?,
        Op::Trace => g.trace(t[0])?,
        Op::Reshape => g.reshape(t[0], shape)?,
        Op::Row(i) => g.row(t[0], i)?,
        Op::Col(j) => g.col(t[0], j)?,
        Op::Index(i) => g.build_raw(Op::Index(i), vec![t[0]], shape)?,
        Op::Stack => g.build_raw(Op::Stack, t.to_vec(), shape)?,
        Op::Sqrt => {
            let d = g.scale(2.0, n)?;
            g.div(t[0], d)?
        }
        Op::Log => g.div(t[0], a[0])?,
        Op::Exp => g.mul(n, t[0])?,
        Op::Sin => {
            let c = g.cos(a[0])?;
            g.mul(c, t[0])?
        }
        Op::Cos => {
            let s = g.sin(a[0])?;
            let m = g.mul(s, t[0])?;
            g.neg(m)?
        }
        Op::Select(cmp) => g.select(cmp, a[0], a[1], t[2], t[3])?,
        Op::Gather(picks) => g.gather(shape, t, &picks)?,
        Op::Project | Op::Data(_) | Op::Join(_) | Op::Union(_) => {
            return Err(Error::Unsupported(format!("cannot differentiate n{} ({})", n.0, op.name())));
        }
    })
}

/// Whether `expr` is affine in the targets along every path.  Conservative.
pub fn detect_linearity(g: &ExprGraph, expr: NodeId, targets: &[AttrId]) -> bool {
    let mut deps = Deps::new(targets);
    linear_in(g, &mut deps, expr)
}

fn linear_in(g: &ExprGraph, deps: &mut Deps, expr: NodeId) -> bool {
    let mut lin: HashMap<NodeId, bool> = HashMap::new();
    for n in g.topo_order(&[expr]) {
        let node = g.node(n);
        let v = if !deps.get(g, n) {
            true
        } else {
            let ch = &node.children;
            let all = |lin: &HashMap<NodeId, bool>| ch.iter().all(|c| lin[c]);
            match node.op {
                Op::Data(_) => true,
                Op::Add
                | Op::Sub
                | Op::Neg
                | Op::Reshape
                | Op::Row(_)
                | Op::Col(_)
                | Op::Index(_)
                | Op::Stack
                | Op::Transpose
                | Op::Trace
                | Op::Gather(_)
                | Op::Join(_)
                | Op::Union(_) => all(&lin),
                Op::Mul | Op::MatMul => {
                    let (d0, d1) = (deps.get(g, ch[0]), deps.get(g, ch[1]));
                    !(d0 && d1) && all(&lin)
                }
                Op::Div => !deps.get(g, ch[1]) && lin[&ch[0]],
                _ => false,
            }
        };
        lin.insert(n, v);
    }
    lin[&expr]
}

/// Per-target-set differentiation state with local derivative and lift
/// caches.
pub struct Differentiator {
    targets: Vec<AttrId>,
    deps_memo: HashMap<NodeId, bool>,
    local: HashMap<(HostId, NodeId, Vec<NodeId>), LocalDerivative>,
    lifts: HashMap<NodeId, Lifted>,
}

impl Differentiator {
    pub fn new(targets: &[AttrId]) -> Differentiator {
        Differentiator { targets: targets.to_vec(), deps_memo: HashMap::new(), local: HashMap::new(), lifts: HashMap::new() }
    }

    pub fn num_cached_pairs(&self) -> usize {
        self.local.len()
    }

    fn with_deps<T>(&mut self, f: impl FnOnce(&mut Self, &mut Deps) -> T) -> T {
        let targets = std::mem::take(&mut self.targets);
        let mut deps = Deps { targets: &targets, memo: std::mem::take(&mut self.deps_memo) };
        let out = f(self, &mut deps);
        self.deps_memo = deps.memo;
        self.targets = targets;
        out
    }

    pub fn boundary_graph(&mut self, g: &ExprGraph, root: NodeId) -> BoundaryGraph {
        self.with_deps(|_, deps| boundary_graph(g, deps, root))
    }

    /// Local `(J, H)` of `v` with respect to the merged nodes `u`.
    pub fn differentiate_pair(&mut self, g: &mut ExprGraph, v: NodeId, u: &[NodeId]) -> Result<LocalDerivative> {
        self.with_deps(|me, deps| me.pair(g, deps, v, u))
    }

    fn pair(&mut self, g: &mut ExprGraph, deps: &mut Deps, v: NodeId, u: &[NodeId]) -> Result<LocalDerivative> {
        let mut key_u = u.to_vec();
        key_u.sort();
        let key = (g.host(v), v, key_u);
        if let Some(ld) = self.local.get(&key) {
            if ld.wrt == u {
                return Ok(ld.clone());
            }
        }
        let p = g.shape(v).size();
        let mut seeds = HashMap::new();
        let mut q = 0;
        for n in u {
            let len = g.shape(*n).size();
            seeds.insert(*n, (q, len));
            q += len;
        }
        if q == 0 {
            return Err(Error::Internal("local derivative with empty parameter set".into()));
        }
        let mut tan = Tangents { seeds: &seeds, memo: HashMap::new() };
        let mut t1 = Vec::with_capacity(q);
        for k in 0..q {
            t1.push(tan.get(g, deps, v, k)?);
        }
        let mut jp = vec![ZERO_PICK; p * q];
        for c in 0..p {
            for k in 0..q {
                jp[c * q + k] = pick(k, c);
            }
        }
        let jacobian = g.gather(Shape::new(p, q), &t1, &jp)?;

        let mut t2: Vec<NodeId> = Vec::with_capacity(q * (q + 1) / 2);
        let mut tri = vec![0usize; q * q];
        for k in 0..q {
            for j in 0..=k {
                tri[j * q + k] = t2.len();
                tri[k * q + j] = t2.len();
                t2.push(tan.get(g, deps, t1[k], j)?);
            }
        }
        let mut hp = vec![ZERO_PICK; p * q * q];
        for c in 0..p {
            for j in 0..q {
                for k in 0..q {
                    hp[(c * q + j) * q + k] = pick(tri[j * q + k], c);
                }
            }
        }
        let hessian = g.gather(Shape::new(p * q, q), &t2, &hp)?;
        let ld = LocalDerivative { of: v, wrt: u.to_vec(), jacobian, hessian, p, q };
        self.local.insert(key, ld.clone());
        Ok(ld)
    }

    fn lift(&mut self, g: &mut ExprGraph, deps: &mut Deps, bg: &BoundaryGraph, v: NodeId) -> Result<Lifted> {
        if let Some(l) = self.lifts.get(&v) {
            return Ok(l.clone());
        }
        let node = g.node(v).clone();
        let out = match node.op {
            Op::Data(attr) => {
                let len = node.shape.size();
                let jacobian = g.identity(len);
                let hessian = g.zero(Shape::new(len * len, len));
                Lifted { jacobian, hessian, param: Param::Data { attr, len } }
            }
            Op::Join(conn) => {
                let c = node.children[0];
                let inner = self.inner(g, deps, bg, c, &bg.succ[&v])?;
                let k = node.shape.rows;
                let su = g.shape(c).size();
                let qc = inner.param.dim();
                let (p, q) = (k * su, k * qc);
                let jj = g.join(conn, inner.jacobian)?;
                let mut jp = vec![ZERO_PICK; p * q];
                for l in 0..k {
                    for r in 0..su {
                        for a in 0..qc {
                            jp[(l * su + r) * q + l * qc + a] = pick(0, l * su * qc + r * qc + a);
                        }
                    }
                }
                let jacobian = g.gather(Shape::new(p, q), &[jj], &jp)?;
                let hessian = if g.is_zero(inner.hessian) {
                    g.zero(Shape::new(p * q, q))
                } else {
                    let hj = g.join(conn, inner.hessian)?;
                    let mut hp = vec![ZERO_PICK; p * q * q];
                    let blk = su * qc * qc;
                    for l in 0..k {
                        for r in 0..su {
                            for a in 0..qc {
                                for b in 0..qc {
                                    hp[((l * su + r) * q + l * qc + a) * q + l * qc + b] =
                                        pick(0, l * blk + (r * qc + a) * qc + b);
                                }
                            }
                        }
                    }
                    g.gather(Shape::new(p * q, q), &[hj], &hp)?
                };
                Lifted { jacobian, hessian, param: Param::Join { conn, arity: k, child: Box::new(inner.param) } }
            }
            Op::Union(domain) => {
                let p = node.shape.size();
                let mut inners: Vec<Option<Lifted>> = Vec::new();
                for (j, c) in node.children.iter().enumerate() {
                    let s = &bg.branch_succ[&v][j];
                    inners.push(if s.is_empty() { None } else { Some(self.inner(g, deps, bg, *c, s)?) });
                }
                let ql = inners.iter().flatten().map(|l| l.param.dim()).max().unwrap_or(0);
                let mut js = Vec::new();
                let mut hs = Vec::new();
                for l in &inners {
                    match l {
                        None => {
                            js.push(g.zero(Shape::new(p, ql)));
                            hs.push(g.zero(Shape::new(p * ql, ql)));
                        }
                        Some(l) => {
                            let qc = l.param.dim();
                            js.push(g.pad(l.jacobian, Shape::new(p, ql))?);
                            let mut hp = vec![ZERO_PICK; p * ql * ql];
                            for c in 0..p {
                                for a in 0..qc {
                                    for b in 0..qc {
                                        hp[(c * ql + a) * ql + b] = pick(0, (c * qc + a) * qc + b);
                                    }
                                }
                            }
                            hs.push(g.gather(Shape::new(p * ql, ql), &[l.hessian], &hp)?);
                        }
                    }
                }
                let jacobian = g.union(domain, &js)?;
                let hessian = g.union(domain, &hs)?;
                let branches = inners.into_iter().map(|l| l.map(|l| l.param)).collect();
                Lifted { jacobian, hessian, param: Param::Union { domain, branches } }
            }
            _ => return Err(Error::Internal(format!("n{} is not a boundary node", v.0))),
        };
        self.lifts.insert(v, out.clone());
        Ok(out)
    }

    /// Derivative of a region output `e` through its successors.
    fn inner(&mut self, g: &mut ExprGraph, deps: &mut Deps, bg: &BoundaryGraph, e: NodeId, succ: &[NodeId]) -> Result<Lifted> {
        if succ.len() == 1 && succ[0] == e {
            return self.lift(g, deps, bg, e);
        }
        let c = self.compose(g, deps, bg, e, succ)?;
        Ok(Lifted { jacobian: c.jacobian, hessian: c.hessian, param: c.param })
    }

    fn compose(
        &mut self,
        g: &mut ExprGraph,
        deps: &mut Deps,
        bg: &BoundaryGraph,
        e: NodeId,
        succ: &[NodeId],
    ) -> Result<Composed> {
        let ld = self.pair(g, deps, e, succ)?;
        let mut lifts = Vec::with_capacity(succ.len());
        for s in succ {
            lifts.push(self.lift(g, deps, bg, *s)?);
        }
        let (p, u) = (ld.p, ld.q);
        let jg = {
            let parts: Vec<NodeId> = lifts.iter().map(|l| l.jacobian).collect();
            g.block_diag(&parts)?
        };
        let q = g.shape(jg).cols;
        let jacobian = g.matmul(ld.jacobian, jg)?;
        let jgt = g.transpose(jg)?;
        let curvature = lifts.iter().any(|l| !g.is_zero(l.hessian));
        let mut comps = Vec::with_capacity(p);
        for c in 0..p {
            let hf = g.slice(ld.hessian, c * u, u, 0, u)?;
            let a = g.matmul(jgt, hf)?;
            let mut hc = g.matmul(a, jg)?;
            if curvature {
                let mut blocks = Vec::with_capacity(lifts.len());
                let mut off = 0;
                for l in &lifts {
                    let su = g.shape(l.jacobian).rows;
                    let qt = l.param.dim();
                    let mut acc = g.zero(Shape::new(qt, qt));
                    if !g.is_zero(l.hessian) {
                        for r in 0..su {
                            let w = g.slice(ld.jacobian, c, 1, off + r, 1)?;
                            let hr = g.slice(l.hessian, r * qt, qt, 0, qt)?;
                            let t = g.mul(w, hr)?;
                            acc = g.add(acc, t)?;
                        }
                    }
                    blocks.push(acc);
                    off += su;
                }
                let second = g.block_diag(&blocks)?;
                hc = g.add(hc, second)?;
            }
            comps.push(hc);
        }
        let hessian = g.vconcat(&comps)?;
        let param = Param::Concat(lifts.iter().map(|l| l.param.clone()).collect());
        debug_assert_eq!(param.dim(), q);
        Ok(Composed { local: ld, jg, jacobian, hessian, param, curvature })
    }

    /// Full derivative bundle of an energy root.
    pub fn bundle(&mut self, g: &mut ExprGraph, root: NodeId, request: ProjectionRequest) -> Result<DerivativeBundle> {
        if g.shape(root) != Shape::SCALAR {
            return Err(Error::Validation(format!("energy root has shape {}, expected 1x1", g.shape(root))));
        }
        self.with_deps(|me, deps| me.bundle_in(g, deps, root, request))
    }

    fn bundle_in(&mut self, g: &mut ExprGraph, deps: &mut Deps, root: NodeId, request: ProjectionRequest) -> Result<DerivativeBundle> {
        let bg = boundary_graph(g, deps, root);
        let host = g.host(root);
        if bg.is_empty() {
            return Ok(DerivativeBundle {
                root,
                host,
                value: root,
                gradient: None,
                hessian: None,
                raw_hessian: None,
                jacobian: None,
                inner_hessian: None,
                mode: ProjectionMode::None,
                param: Param::Concat(Vec::new()),
                dim: 0,
                inner_dim: 0,
                linear: true,
            });
        }
        let c = self.compose(g, deps, &bg, root, &bg.root_succ.clone())?;
        let linear = !c.curvature && bg.root_succ.iter().all(|s| linear_in(g, deps, *s));
        let mut b = DerivativeBundle {
            root,
            host,
            value: root,
            gradient: Some(c.jacobian),
            hessian: Some(c.hessian),
            raw_hessian: Some(c.hessian),
            jacobian: Some(c.jg),
            inner_hessian: Some(c.local.hessian),
            mode: ProjectionMode::None,
            dim: c.param.dim(),
            inner_dim: c.local.q,
            param: c.param,
            linear,
        };
        b = apply_projection_rewrite(g, &b, request)?;
        Ok(b)
    }
}

struct Composed {
    local: LocalDerivative,
    jg: NodeId,
    jacobian: NodeId,
    hessian: NodeId,
    param: Param,
    curvature: bool,
}

/// Chooses the projection mode and rewrites the Hessian expression.
pub fn apply_projection_rewrite(g: &mut ExprGraph, b: &DerivativeBundle, request: ProjectionRequest) -> Result<DerivativeBundle> {
    let mut out = b.clone();
    let (Some(raw), Some(jg), Some(hin)) = (b.raw_hessian, b.jacobian, b.inner_hessian) else {
        return Ok(out);
    };
    let mode = match request {
        ProjectionRequest::None => ProjectionMode::None,
        ProjectionRequest::Full => ProjectionMode::FullProject,
        ProjectionRequest::Auto => {
            if b.linear {
                ProjectionMode::ReducedProject
            } else {
                ProjectionMode::FullProject
            }
        }
        ProjectionRequest::Reduced | ProjectionRequest::Separated => {
            if !b.linear {
                return Err(Error::Rejected(format!(
                    "{request:?} projection needs a linear inner map, but the parameterization of n{} has curvature",
                    b.root.0
                )));
            }
            if request == ProjectionRequest::Reduced {
                ProjectionMode::ReducedProject
            } else {
                ProjectionMode::SeparatedJacobian
            }
        }
    };
    out.mode = mode;
    match mode {
        ProjectionMode::None | ProjectionMode::FullProject => {
            out.hessian = Some(raw);
            out.inner_hessian = Some(hin);
        }
        ProjectionMode::ReducedProject | ProjectionMode::SeparatedJacobian => {
            let ph = g.project(hin)?;
            let jt = g.transpose(jg)?;
            let a = g.matmul(jt, ph)?;
            out.hessian = Some(g.matmul(a, jg)?);
            out.inner_hessian = Some(ph);
        }
    }
    Ok(out)
}

/// Parameter tree of an energy root without building any derivative.
pub fn param_tree(g: &ExprGraph, root: NodeId, targets: &[AttrId]) -> Param {
    let mut deps = Deps::new(targets);
    let bg = boundary_graph(g, &mut deps, root);
    fn of(g: &ExprGraph, bg: &BoundaryGraph, n: NodeId) -> Param {
        let node = g.node(n);
        match node.op {
            Op::Data(attr) => Param::Data { attr, len: node.shape.size() },
            Op::Join(conn) => {
                let s = &bg.succ[&n];
                let c = node.children[0];
                let child = if s.len() == 1 && s[0] == c { of(g, bg, c) } else { Param::Concat(s.iter().map(|x| of(g, bg, *x)).collect()) };
                Param::Join { conn, arity: node.shape.rows, child: Box::new(child) }
            }
            Op::Union(domain) => {
                let branches = node
                    .children
                    .iter()
                    .zip(&bg.branch_succ[&n])
                    .map(|(c, s)| {
                        if s.is_empty() {
                            None
                        } else if s.len() == 1 && s[0] == *c {
                            Some(of(g, bg, *c))
                        } else {
                            Some(Param::Concat(s.iter().map(|x| of(g, bg, *x)).collect()))
                        }
                    })
                    .collect();
                Param::Union { domain, branches }
            }
            _ => Param::Concat(Vec::new()),
        }
    }
    Param::Concat(bg.root_succ.iter().map(|s| of(g, &bg, *s)).collect())
}

/// Worst-case placement slot count of an energy.
pub fn index_capacity(g: &ExprGraph, root: NodeId, targets: &[AttrId]) -> usize {
    param_tree(g, root, targets).capacity()
}

/// Bundles for every declared energy of a scene, sharing one cache.
pub fn differentiate_scene(scene: &mut Scene) -> Result<Vec<DerivativeBundle>> {
    let targets = scene.targets().to_vec();
    let decls: Vec<_> = scene.energies().to_vec();
    let mut d = Differentiator::new(&targets);
    let mut out = Vec::with_capacity(decls.len());
    for e in decls {
        let root = scene.node(e.root)?;
        out.push(d.bundle(&mut scene.expr, root, e.projection)?);
    }
    Ok(out)
}
