//! Attribute expression DAG.  Nodes are hash-consed: building the same
//! expression twice returns the same id, which is what the plan compiler's CSE
//! relies on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scene::{AttrId, ConnId, DomainId, HostId, MeshId, Shape};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Clone, Debug)]
pub enum Op {
    Const(f64),
    /// Constant matrix, row-major.
    Literal(Arc<[f64]>),
    /// Structural zero of the node's shape.
    Zero,
    Data(AttrId),
    Constant(AttrId),
    Add,
    Sub,
    Neg,
    /// Elementwise, or scalar times matrix when one side is 1x1.
    Mul,
    Div,
    MatMul,
    Dot,
    Cross,
    Norm,
    Det,
    Inverse,
    Transpose,
    Trace,
    Reshape,
    Row(usize),
    Col(usize),
    /// Contiguous chunk `i` of the child's flat data, sized by the node shape.
    Index(usize),
    /// Matrix of the node's shape filled row-major from 1x1 children.
    Stack,
    Sqrt,
    Log,
    Exp,
    Sin,
    Cos,
    /// `children = [a, b, x, y]`: x if `a cmp b` else y.
    Select(Cmp),
    Join(ConnId),
    Union(DomainId),
    /// Entry-wise selection from the children; see [`pick`].
    Gather(Arc<[u64]>),
    /// Symmetric PSD projection (negative eigenvalues clamped to zero).
    Project,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Literal(_) => "literal",
            Op::Zero => "zero",
            Op::Data(_) => "data",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Neg => "neg",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Dot => "dot",
            Op::Cross => "cross",
            Op::Norm => "norm",
            Op::Det => "det",
            Op::Inverse => "inverse",
            Op::Transpose => "transpose",
            Op::Trace => "trace",
            Op::Reshape => "reshape",
            Op::Row(_) => "row",
            Op::Col(_) => "col",
            Op::Index(_) => "index",
            Op::Stack => "stack",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Select(_) => "select",
            Op::Join(_) => "join",
            Op::Union(_) => "union",
            Op::Gather(_) => "gather",
            Op::Project => "project",
        }
    }

    fn key(&self) -> (u8, Vec<u64>) {
        match self {
            Op::Const(v) => (0, vec![v.to_bits()]),
            Op::Literal(v) => (1, v.iter().map(|x| x.to_bits()).collect()),
            Op::Zero => (2, vec![]),
            Op::Data(a) => (3, vec![a.0 as u64]),
            Op::Constant(a) => (4, vec![a.0 as u64]),
            Op::Add => (5, vec![]),
            Op::Sub => (6, vec![]),
            Op::Neg => (7, vec![]),
            Op::Mul => (8, vec![]),
            Op::Div => (9, vec![]),
            Op::MatMul => (10, vec![]),
            Op::Dot => (11, vec![]),
            Op::Cross => (12, vec![]),
            Op::Norm => (13, vec![]),
            Op::Det => (14, vec![]),
            Op::Inverse => (15, vec![]),
            Op::Transpose => (16, vec![]),
            Op::Trace => (17, vec![]),
            Op::Reshape => (18, vec![]),
            Op::Row(i) => (19, vec![*i as u64]),
            Op::Col(i) => (20, vec![*i as u64]),
            Op::Index(i) => (21, vec![*i as u64]),
            Op::Stack => (22, vec![]),
            Op::Sqrt => (23, vec![]),
            Op::Log => (24, vec![]),
            Op::Exp => (25, vec![]),
            Op::Sin => (26, vec![]),
            Op::Cos => (27, vec![]),
            Op::Select(c) => (28, vec![*c as u64]),
            Op::Join(c) => (29, vec![c.0 as u64]),
            Op::Union(d) => (30, vec![d.0 as u64]),
            Op::Gather(p) => (31, p.to_vec()),
            Op::Project => (32, vec![]),
        }
    }

    /// Ops whose value does not depend on an evaluation context.
    fn is_pure(&self) -> bool {
        !matches!(self, Op::Data(_) | Op::Constant(_) | Op::Join(_) | Op::Union(_))
    }

    pub fn is_constant_leaf(&self) -> bool {
        matches!(self, Op::Const(_) | Op::Literal(_) | Op::Zero)
    }
}

pub const ZERO_PICK: u64 = u64::MAX;

/// Encodes "entry `flat` of child `child`" for a gather node.
pub fn pick(child: usize, flat: usize) -> u64 {
    ((child as u64) << 32) | flat as u64
}

pub fn unpick(p: u64) -> (usize, usize) {
    ((p >> 32) as usize, (p & 0xffff_ffff) as usize)
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub children: Vec<NodeId>,
    pub shape: Shape,
    pub host: HostId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConnMeta {
    pub from: DomainId,
    pub to: DomainId,
    pub arity: usize,
}

/// Ancestry information needed to validate lineage while building nodes.
#[derive(Clone, Debug, Default)]
pub struct Lineage {
    domain_mesh: Vec<MeshId>,
    union_children: Vec<Option<Vec<DomainId>>>,
    pub(crate) conns: Vec<ConnMeta>,
}

impl Lineage {
    pub(crate) fn register_domain(&mut self, mesh: MeshId, union_children: Option<Vec<DomainId>>) {
        self.domain_mesh.push(mesh);
        self.union_children.push(union_children);
    }

    pub(crate) fn register_conn(&mut self, from: DomainId, to: DomainId, arity: usize) {
        self.conns.push(ConnMeta { from, to, arity });
    }

    /// `h` equals `deep` or lies on its ancestor chain.
    pub fn is_ancestor_or_self(&self, h: HostId, deep: HostId) -> bool {
        match (h, deep) {
            (HostId::Scene, _) => true,
            (HostId::Mesh(a), HostId::Mesh(b)) => a == b,
            (HostId::Mesh(a), HostId::Domain(d)) => self.domain_mesh[d.index()] == a,
            (HostId::Domain(a), HostId::Domain(b)) => a == b,
            _ => false,
        }
    }

    pub fn deepest_common(&self, hosts: &[HostId]) -> std::result::Result<HostId, (HostId, HostId)> {
        let mut deepest = HostId::Scene;
        for &h in hosts {
            if h.depth() > deepest.depth() {
                deepest = h;
            }
        }
        for &h in hosts {
            if !self.is_ancestor_or_self(h, deepest) {
                return Err((h, deepest));
            }
        }
        Ok(deepest)
    }

    pub(crate) fn union_children(&self, d: DomainId) -> Option<&[DomainId]> {
        self.union_children[d.index()].as_deref()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct NodeKey {
    tag: u8,
    payload: Vec<u64>,
    children: Vec<NodeId>,
    shape: Shape,
}

#[derive(Clone, Debug, Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    dedup: HashMap<NodeKey, NodeId>,
    names: HashMap<NodeId, AttrId>,
    pub lineage: Lineage,
}

fn shape_err<T>(op: &'static str, a: Shape, b: impl ToString) -> Result<T> {
    Err(Error::Shape { op, lhs: a.to_string(), rhs: b.to_string() })
}

impl ExprGraph {
    pub fn new() -> ExprGraph {
        ExprGraph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.index()].shape
    }

    pub fn host(&self, id: NodeId) -> HostId {
        self.nodes[id.index()].host
    }

    pub fn name_of(&self, id: NodeId) -> Option<AttrId> {
        self.names.get(&id).copied()
    }

    pub(crate) fn set_name(&mut self, id: NodeId, attr: AttrId) {
        self.names.entry(id).or_insert(attr);
    }

    pub fn is_zero(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.index()].op, Op::Zero)
    }

    /// Values of a context-free constant node.
    pub fn constant_values(&self, id: NodeId) -> Option<Vec<f64>> {
        let n = &self.nodes[id.index()];
        match &n.op {
            Op::Const(v) => Some(vec![*v]),
            Op::Literal(v) => Some(v.to_vec()),
            Op::Zero => Some(vec![0.0; n.shape.size()]),
            _ => None,
        }
    }

    fn is_const(&self, id: NodeId) -> bool {
        self.nodes[id.index()].op.is_constant_leaf()
    }

    fn is_identity(&self, id: NodeId) -> bool {
        let n = &self.nodes[id.index()];
        if !n.shape.is_square() {
            return false;
        }
        match &n.op {
            Op::Const(v) => *v == 1.0,
            Op::Literal(v) => {
                let k = n.shape.rows;
                v.iter().enumerate().all(|(i, &x)| x == if i / k == i % k { 1.0 } else { 0.0 })
            }
            _ => false,
        }
    }

    fn intern(&mut self, op: Op, children: Vec<NodeId>, shape: Shape, host: HostId) -> NodeId {
        let (tag, payload) = op.key();
        let key = NodeKey { tag, payload, children: children.clone(), shape };
        if let Some(&id) = self.dedup.get(&key) {
            return id;
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, children, shape, host });
        self.dedup.insert(key, id);
        id
    }

    fn common_host(&self, children: &[NodeId]) -> Result<HostId> {
        let hosts: Vec<HostId> = children.iter().map(|c| self.host(*c)).collect();
        self.lineage.deepest_common(&hosts).map_err(|(a, b)| Error::Lineage {
            a: format!("{a:?}"),
            b: format!("{b:?}"),
        })
    }

    /// Host resolution, constant folding, structural-zero pruning, then
    /// hash-consing.
    fn finish(&mut self, op: Op, children: Vec<NodeId>, shape: Shape) -> Result<NodeId> {
        let host = self.common_host(&children)?;
        if op.is_pure() && !children.is_empty() && children.iter().all(|c| self.is_const(*c)) {
            return self.fold(&op, &children, shape);
        }
        if let Some(id) = self.prune(&op, &children, shape)? {
            return Ok(id);
        }
        Ok(self.intern(op, children, shape, host))
    }

    fn fold(&mut self, op: &Op, children: &[NodeId], shape: Shape) -> Result<NodeId> {
        let vals: Vec<Vec<f64>> = children.iter().map(|c| self.constant_values(*c).unwrap()).collect();
        let shapes: Vec<Shape> = children.iter().map(|c| self.shape(*c)).collect();
        let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
        let mut out = vec![0.0; shape.size()];
        kernels::apply(op, shape, &refs, &shapes, &mut out)?;
        Ok(self.literal(shape, &out))
    }

    fn prune(&mut self, op: &Op, ch: &[NodeId], shape: Shape) -> Result<Option<NodeId>> {
        let z = |g: &ExprGraph, i: usize| g.is_zero(ch[i]);
        let any_zero = ch.iter().any(|c| self.is_zero(*c));
        let out = match op {
            Op::Add => {
                if z(self, 0) {
                    Some(ch[1])
                } else if z(self, 1) {
                    Some(ch[0])
                } else {
                    None
                }
            }
            Op::Sub => {
                if z(self, 1) {
                    Some(ch[0])
                } else if z(self, 0) {
                    Some(self.neg(ch[1])?)
                } else {
                    None
                }
            }
            Op::Neg => match self.node(ch[0]).op {
                Op::Neg => Some(self.node(ch[0]).children[0]),
                _ => None,
            },
            Op::Mul => {
                if any_zero {
                    Some(self.zero(shape))
                } else if self.is_identity(ch[0]) && self.shape(ch[0]).is_scalar() && self.shape(ch[1]) == shape {
                    Some(ch[1])
                } else if self.is_identity(ch[1]) && self.shape(ch[1]).is_scalar() && self.shape(ch[0]) == shape {
                    Some(ch[0])
                } else {
                    None
                }
            }
            Op::Div => {
                if z(self, 0) {
                    Some(self.zero(shape))
                } else {
                    None
                }
            }
            Op::MatMul => {
                if any_zero {
                    Some(self.zero(shape))
                } else if self.is_identity(ch[0]) {
                    Some(ch[1])
                } else if self.is_identity(ch[1]) {
                    Some(ch[0])
                } else {
                    None
                }
            }
            Op::Dot | Op::Cross | Op::Trace | Op::Row(_) | Op::Col(_) | Op::Index(_) | Op::Join(_) => {
                if any_zero {
                    Some(self.zero(shape))
                } else {
                    None
                }
            }
            Op::Transpose => {
                if any_zero {
                    Some(self.zero(shape))
                } else if matches!(self.node(ch[0]).op, Op::Transpose) {
                    Some(self.node(ch[0]).children[0])
                } else {
                    None
                }
            }
            Op::Reshape => {
                if any_zero {
                    Some(self.zero(shape))
                } else if self.shape(ch[0]) == shape {
                    Some(ch[0])
                } else {
                    None
                }
            }
            Op::Select(_) => {
                if z(self, 2) && z(self, 3) {
                    Some(self.zero(shape))
                } else {
                    None
                }
            }
            Op::Union(_) => {
                if ch.iter().all(|c| self.is_zero(*c)) {
                    Some(self.zero(shape))
                } else {
                    None
                }
            }
            _ => None,
        };
        Ok(out)
    }

    // ---- leaves and constants ------------------------------------------

    pub(crate) fn leaf(&mut self, attr: AttrId, host: HostId, shape: Shape, differentiable: bool) -> NodeId {
        let op = if differentiable { Op::Data(attr) } else { Op::Constant(attr) };
        self.intern(op, vec![], shape, host)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        if v == 0.0 {
            return self.zero(Shape::SCALAR);
        }
        self.intern(Op::Const(v), vec![], Shape::SCALAR, HostId::Scene)
    }

    pub fn zero(&mut self, shape: Shape) -> NodeId {
        self.intern(Op::Zero, vec![], shape, HostId::Scene)
    }

    pub fn literal(&mut self, shape: Shape, values: &[f64]) -> NodeId {
        assert_eq!(values.len(), shape.size(), "literal length mismatch");
        if values.iter().all(|&v| v == 0.0) {
            return self.zero(shape);
        }
        if shape.is_scalar() {
            return self.intern(Op::Const(values[0]), vec![], shape, HostId::Scene);
        }
        self.intern(Op::Literal(values.into()), vec![], shape, HostId::Scene)
    }

    pub fn identity(&mut self, n: usize) -> NodeId {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        self.literal(Shape::new(n, n), &v)
    }

    /// Unit matrix with a single 1 at flat position `k`.
    pub fn basis(&mut self, shape: Shape, k: usize) -> NodeId {
        let mut v = vec![0.0; shape.size()];
        v[k] = 1.0;
        self.literal(shape, &v)
    }

    // ---- arithmetic ------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("add", sa, sb);
        }
        self.finish(Op::Add, vec![a, b], sa)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("sub", sa, sb);
        }
        self.finish(Op::Sub, vec![a, b], sa)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        self.finish(Op::Neg, vec![a], s)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let s = if sa == sb || sb.is_scalar() {
            sa
        } else if sa.is_scalar() {
            sb
        } else {
            return shape_err("mul", sa, sb);
        };
        self.finish(Op::Mul, vec![a, b], s)
    }

    pub fn scale(&mut self, k: f64, a: NodeId) -> Result<NodeId> {
        let c = self.constant(k);
        self.mul(c, a)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let s = if sa == sb || sb.is_scalar() {
            sa
        } else if sa.is_scalar() {
            sb
        } else {
            return shape_err("div", sa, sb);
        };
        self.finish(Op::Div, vec![a, b], s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return shape_err("matmul", sa, sb);
        }
        self.finish(Op::MatMul, vec![a, b], Shape::new(sa.rows, sb.cols))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("dot", sa, sb);
        }
        self.finish(Op::Dot, vec![a, b], Shape::SCALAR)
    }

    pub fn cross(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.size() != 3 || (sa.rows != 1 && sa.cols != 1) {
            return shape_err("cross", sa, sb);
        }
        self.finish(Op::Cross, vec![a, b], sa)
    }

    pub fn norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.finish(Op::Norm, vec![a], Shape::SCALAR)
    }

    pub fn det(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if !s.is_square() {
            return shape_err("det", s, "square");
        }
        self.finish(Op::Det, vec![a], Shape::SCALAR)
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if !s.is_square() {
            return shape_err("inverse", s, "square");
        }
        self.finish(Op::Inverse, vec![a], s)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).transposed();
        self.finish(Op::Transpose, vec![a], s)
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if !s.is_square() {
            return shape_err("trace", s, "square");
        }
        self.finish(Op::Trace, vec![a], Shape::SCALAR)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        self.finish(Op::Sqrt, vec![a], s)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        self.finish(Op::Log, vec![a], s)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        self.finish(Op::Exp, vec![a], s)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        self.finish(Op::Sin, vec![a], s)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        self.finish(Op::Cos, vec![a], s)
    }

    pub fn select(&mut self, cmp: Cmp, a: NodeId, b: NodeId, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.is_scalar() || !sb.is_scalar() {
            return shape_err("select condition", sa, sb);
        }
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx != sy {
            return shape_err("select branches", sx, sy);
        }
        self.finish(Op::Select(cmp), vec![a, b, x, y], sx)
    }

    pub fn project(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if !s.is_square() {
            return shape_err("project", s, "square");
        }
        self.finish(Op::Project, vec![a], s)
    }

    /// Builds a node with an explicitly given shape, bypassing operand
    /// checks.  Used by the differentiator for chunked `Index` and `Stack`.
    pub(crate) fn build_raw(&mut self, op: Op, children: Vec<NodeId>, shape: Shape) -> Result<NodeId> {
        self.finish(op, children, shape)
    }

    // ---- structural ------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId> {
        let s = self.shape(a);
        if s.size() != shape.size() {
            return shape_err("reshape", s, shape);
        }
        self.finish(Op::Reshape, vec![a], shape)
    }

    /// Reshape to a column vector.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.shape(a).size();
        self.reshape(a, Shape::new(n, 1))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if i >= s.rows {
            return shape_err("row", s, format!("row {i}"));
        }
        self.finish(Op::Row(i), vec![a], Shape::new(1, s.cols))
    }

    pub fn col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if j >= s.cols {
            return shape_err("col", s, format!("col {j}"));
        }
        self.finish(Op::Col(j), vec![a], Shape::new(s.rows, 1))
    }

    /// On a JOIN result, row `i` reshaped to the source shape; otherwise the
    /// flat element `i` as a scalar.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let n = self.node(a);
        let out = match n.op {
            Op::Join(_) => {
                if i >= n.shape.rows {
                    return shape_err("index", n.shape, format!("entry {i}"));
                }
                self.shape(n.children[0])
            }
            _ => {
                if i >= n.shape.size() {
                    return shape_err("index", n.shape, format!("entry {i}"));
                }
                Shape::SCALAR
            }
        };
        self.finish(Op::Index(i), vec![a], out)
    }

    /// Builds a matrix of `shape` from scalar expressions in row-major order.
    pub fn stack(&mut self, shape: Shape, scalars: &[NodeId]) -> Result<NodeId> {
        if scalars.len() != shape.size() {
            return shape_err("stack", shape, format!("{} entries", scalars.len()));
        }
        for s in scalars {
            if !self.shape(*s).is_scalar() {
                return shape_err("stack entry", self.shape(*s), "1x1");
            }
        }
        self.finish(Op::Stack, scalars.to_vec(), shape)
    }

    pub fn join(&mut self, conn: ConnId, child: NodeId) -> Result<NodeId> {
        let meta = *self
            .lineage
            .conns
            .get(conn.index())
            .ok_or_else(|| Error::Validation(format!("unknown connectivity id {}", conn.0)))?;
        let ch = self.host(child);
        if !self.lineage.is_ancestor_or_self(ch, HostId::Domain(meta.to)) {
            return Err(Error::Lineage { a: format!("{ch:?}"), b: format!("connectivity target {:?}", meta.to) });
        }
        let shape = Shape::new(meta.arity, self.shape(child).size());
        if self.is_zero(child) {
            return Ok(self.zero(shape));
        }
        if let Some(v) = self.constant_values(child) {
            let rep: Vec<f64> = (0..meta.arity).flat_map(|_| v.iter().copied()).collect();
            return Ok(self.literal(shape, &rep));
        }
        Ok(self.intern(Op::Join(conn), vec![child], shape, HostId::Domain(meta.from)))
    }

    /// UNION over per-branch expressions, one per child domain of `union`.
    pub fn union(&mut self, union: DomainId, children: &[NodeId]) -> Result<NodeId> {
        let doms = self
            .lineage
            .union_children(union)
            .ok_or_else(|| Error::Declaration(format!("domain {} is not a primitive union", union.0)))?
            .to_vec();
        if doms.len() != children.len() {
            return Err(Error::Declaration(format!(
                "union expects {} branches, got {}",
                doms.len(),
                children.len()
            )));
        }
        let shape = self.shape(children[0]);
        for (d, c) in doms.iter().zip(children) {
            if self.shape(*c) != shape {
                return shape_err("union", shape, self.shape(*c));
            }
            let h = self.host(*c);
            if !self.lineage.is_ancestor_or_self(h, HostId::Domain(*d)) {
                return Err(Error::Lineage { a: format!("{h:?}"), b: format!("union branch {d:?}") });
            }
        }
        if children.iter().all(|c| self.is_zero(*c)) {
            return Ok(self.zero(shape));
        }
        Ok(self.intern(Op::Union(union), children.to_vec(), shape, HostId::Domain(union)))
    }

    /// General entry selection; `picks[k]` addresses output flat entry `k`.
    pub fn gather(&mut self, shape: Shape, children: &[NodeId], picks: &[u64]) -> Result<NodeId> {
        assert_eq!(picks.len(), shape.size(), "gather pick count mismatch");
        // Drop zero children and renumber.
        let mut remap = vec![usize::MAX; children.len()];
        let mut kept: Vec<NodeId> = Vec::new();
        let mut new_picks = Vec::with_capacity(picks.len());
        for &p in picks {
            if p == ZERO_PICK {
                new_picks.push(ZERO_PICK);
                continue;
            }
            let (c, f) = unpick(p);
            if self.is_zero(children[c]) {
                new_picks.push(ZERO_PICK);
                continue;
            }
            if remap[c] == usize::MAX {
                let pos = kept.iter().position(|k| *k == children[c]).unwrap_or_else(|| {
                    kept.push(children[c]);
                    kept.len() - 1
                });
                remap[c] = pos;
            }
            new_picks.push(pick(remap[c], f));
        }
        if kept.is_empty() {
            return Ok(self.zero(shape));
        }
        if kept.len() == 1 && self.shape(kept[0]).size() == shape.size() {
            let pass = new_picks.iter().enumerate().all(|(k, &p)| p != ZERO_PICK && unpick(p) == (0, k));
            if pass {
                return if self.shape(kept[0]) == shape { Ok(kept[0]) } else { self.reshape(kept[0], shape) };
            }
        }
        self.finish(Op::Gather(new_picks.into()), kept, shape)
    }

    pub fn hconcat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.rows != rows {
                return shape_err("hconcat", self.shape(parts[0]), s);
            }
            cols += s.cols;
        }
        let mut picks = vec![0u64; rows * cols];
        let mut c0 = 0;
        for (k, p) in parts.iter().enumerate() {
            let s = self.shape(*p);
            for i in 0..rows {
                for j in 0..s.cols {
                    picks[i * cols + c0 + j] = pick(k, i * s.cols + j);
                }
            }
            c0 += s.cols;
        }
        self.gather(Shape::new(rows, cols), parts, &picks)
    }

    pub fn vconcat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.shape(parts[0]).cols;
        let mut picks = Vec::new();
        for (k, p) in parts.iter().enumerate() {
            let s = self.shape(*p);
            if s.cols != cols {
                return shape_err("vconcat", self.shape(parts[0]), s);
            }
            picks.extend((0..s.size()).map(|f| pick(k, f)));
        }
        let rows = picks.len() / cols;
        self.gather(Shape::new(rows, cols), parts, &picks)
    }

    pub fn block_diag(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows: usize = parts.iter().map(|p| self.shape(*p).rows).sum();
        let cols: usize = parts.iter().map(|p| self.shape(*p).cols).sum();
        let mut picks = vec![ZERO_PICK; rows * cols];
        let (mut r0, mut c0) = (0, 0);
        for (k, p) in parts.iter().enumerate() {
            let s = self.shape(*p);
            for i in 0..s.rows {
                for j in 0..s.cols {
                    picks[(r0 + i) * cols + c0 + j] = pick(k, i * s.cols + j);
                }
            }
            r0 += s.rows;
            c0 += s.cols;
        }
        self.gather(Shape::new(rows, cols), parts, &picks)
    }

    pub fn slice(&mut self, a: NodeId, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if r0 + rows > s.rows || c0 + cols > s.cols {
            return shape_err("slice", s, format!("[{r0}+{rows}, {c0}+{cols}]"));
        }
        let mut picks = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                picks.push(pick(0, (r0 + i) * s.cols + c0 + j));
            }
        }
        self.gather(Shape::new(rows, cols), &[a], &picks)
    }

    /// Places `a` in the top-left corner of a zero matrix of `shape`.
    pub fn pad(&mut self, a: NodeId, shape: Shape) -> Result<NodeId> {
        let s = self.shape(a);
        if s.rows > shape.rows || s.cols > shape.cols {
            return shape_err("pad", s, shape);
        }
        let mut picks = vec![ZERO_PICK; shape.size()];
        for i in 0..s.rows {
            for j in 0..s.cols {
                picks[i * shape.cols + j] = pick(0, i * s.cols + j);
            }
        }
        self.gather(shape, &[a], &picks)
    }

    // ---- inspection ------------------------------------------------------

    /// Nodes reachable from `roots`, children before parents.
    pub fn topo_order(&self, roots: &[NodeId]) -> Vec<NodeId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        let mut stack: Vec<(NodeId, bool)> = roots.iter().rev().map(|r| (*r, false)).collect();
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                out.push(n);
                continue;
            }
            if seen[n.index()] {
                continue;
            }
            seen[n.index()] = true;
            stack.push((n, true));
            for c in self.nodes[n.index()].children.iter().rev() {
                if !seen[c.index()] {
                    stack.push((*c, false));
                }
            }
        }
        out
    }

    /// Graphviz export of the sub-DAG under `root`.
    pub fn to_dot(&self, root: NodeId) -> String {
        let mut s = String::from("digraph expr {\n  node [shape=box];\n");
        for n in self.topo_order(&[root]) {
            let node = self.node(n);
            let name = self.name_of(n).map(|a| format!(" \\\"a{}\\\"", a.0)).unwrap_or_default();
            let _ = writeln!(
                s,
                "  n{} [label=\"{} {} {:?}{}\"];",
                n.0,
                node.op.name(),
                node.shape,
                node.host,
                name
            );
            for c in &node.children {
                let _ = writeln!(s, "  n{} -> n{};", n.0, c.0);
            }
        }
        s.push_str("}\n");
        s
    }
}
