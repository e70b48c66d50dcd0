//! Relational scene model: meshes, primitive types, unions, connectivities and
//! attribute declarations.

use std::collections::HashMap;
use std::fmt;

use crate::diff::ProjectionRequest;
use crate::error::{decl, invalid, Error, Result};
use crate::expr::{ExprGraph, NodeId};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Shape {
        assert!(rows >= 1 && cols >= 1, "shape dimensions must be positive");
        Shape { rows, cols }
    }

    pub fn try_new(rows: usize, cols: usize) -> Result<Shape> {
        if rows == 0 || cols == 0 {
            return invalid(format!("shape {rows}x{cols} has a zero dimension"));
        }
        Ok(Shape { rows, cols })
    }

    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn vec3() -> Shape {
        Shape::new(3, 1)
    }

    pub fn size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transposed(&self) -> Shape {
        Shape { rows: self.cols, cols: self.rows }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u32);
        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_type!(MeshId);
id_type!(DomainId);
id_type!(AttrId);
id_type!(ConnId);

/// Where an attribute or expression lives.  Scene and mesh hosts carry exactly
/// one instance.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HostId {
    Scene,
    Mesh(MeshId),
    Domain(DomainId),
}

impl HostId {
    pub fn depth(self) -> u8 {
        match self {
            HostId::Scene => 0,
            HostId::Mesh(_) => 1,
            HostId::Domain(_) => 2,
        }
    }
}

impl From<DomainId> for HostId {
    fn from(d: DomainId) -> HostId {
        HostId::Domain(d)
    }
}

impl From<MeshId> for HostId {
    fn from(m: MeshId) -> HostId {
        HostId::Mesh(m)
    }
}

#[derive(Clone, Debug)]
pub enum DomainKind {
    Primitive { count: usize, dynamic: bool },
    Union { children: Vec<DomainId>, offsets: Vec<usize>, total: usize },
}

#[derive(Clone, Debug)]
pub struct Domain {
    pub name: String,
    pub mesh: MeshId,
    pub kind: DomainKind,
    attrs: Vec<AttrId>,
    conns: Vec<ConnId>,
}

impl Domain {
    pub fn count(&self) -> usize {
        match &self.kind {
            DomainKind::Primitive { count, .. } => *count,
            DomainKind::Union { total, .. } => *total,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self.kind, DomainKind::Primitive { dynamic: true, .. })
    }

    pub fn is_union(&self) -> bool {
        matches!(self.kind, DomainKind::Union { .. })
    }

    pub fn attributes(&self) -> &[AttrId] {
        &self.attrs
    }

    pub fn connectivities(&self) -> &[ConnId] {
        &self.conns
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub name: String,
    domains: Vec<DomainId>,
    attrs: Vec<AttrId>,
}

impl Mesh {
    pub fn domains(&self) -> &[DomainId] {
        &self.domains
    }
}

#[derive(Clone, Debug)]
pub struct Connectivity {
    pub name: String,
    pub from: DomainId,
    pub to: DomainId,
    pub arity: usize,
    pub indices: Vec<usize>,
}

impl Connectivity {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.arity..(i + 1) * self.arity]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrKind {
    Data { differentiable: bool },
    Computed,
    Joined { conn: ConnId, source: AttrId },
    Unioned { child_name: String },
}

#[derive(Clone, Debug)]
pub struct Attribute {
    pub name: String,
    pub host: HostId,
    pub shape: Shape,
    pub kind: AttrKind,
    pub node: NodeId,
    values: Vec<f64>,
}

impl Attribute {
    pub fn is_data(&self) -> bool {
        matches!(self.kind, AttrKind::Data { .. })
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self.kind, AttrKind::Data { differentiable: true })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub struct EnergyDecl {
    pub name: String,
    pub root: AttrId,
    pub dynamic_instances: bool,
    pub projection: ProjectionRequest,
}

impl EnergyDecl {
    pub fn new(name: impl Into<String>, root: AttrId) -> EnergyDecl {
        EnergyDecl {
            name: name.into(),
            root,
            dynamic_instances: false,
            projection: ProjectionRequest::Auto,
        }
    }

    pub fn dynamic(mut self, yes: bool) -> EnergyDecl {
        self.dynamic_instances = yes;
        self
    }

    pub fn projection(mut self, p: ProjectionRequest) -> EnergyDecl {
        self.projection = p;
        self
    }
}

pub struct Scene {
    pub name: String,
    meshes: Vec<Mesh>,
    domains: Vec<Domain>,
    attrs: Vec<Attribute>,
    conns: Vec<Connectivity>,
    scene_attrs: Vec<AttrId>,
    energies: Vec<EnergyDecl>,
    targets: Vec<AttrId>,
    /// Expression arena shared by every computed attribute of this scene.
    pub expr: ExprGraph,
    dynamic_epoch: u64,
}

impl Scene {
    pub fn new(name: impl Into<String>) -> Scene {
        Scene {
            name: name.into(),
            meshes: Vec::new(),
            domains: Vec::new(),
            attrs: Vec::new(),
            conns: Vec::new(),
            scene_attrs: Vec::new(),
            energies: Vec::new(),
            targets: Vec::new(),
            expr: ExprGraph::new(),
            dynamic_epoch: 0,
        }
    }

    // ---- structure -------------------------------------------------------

    pub fn add_mesh(&mut self, name: &str) -> Result<MeshId> {
        if self.meshes.iter().any(|m| m.name == name) {
            return decl(format!("mesh '{name}' already exists in scene '{}'", self.name));
        }
        let id = MeshId(self.meshes.len() as u32);
        self.meshes.push(Mesh { name: name.to_string(), domains: Vec::new(), attrs: Vec::new() });
        Ok(id)
    }

    fn check_domain_name(&self, mesh: MeshId, name: &str) -> Result<()> {
        let m = self.mesh_checked(mesh)?;
        if m.domains.iter().any(|d| self.domains[d.index()].name == name) {
            return decl(format!("'{name}' already declared on mesh '{}'", m.name));
        }
        Ok(())
    }

    pub fn add_primitive(&mut self, mesh: MeshId, name: &str, count: usize, dynamic: bool) -> Result<DomainId> {
        self.check_domain_name(mesh, name)?;
        let id = DomainId(self.domains.len() as u32);
        self.domains.push(Domain {
            name: name.to_string(),
            mesh,
            kind: DomainKind::Primitive { count, dynamic },
            attrs: Vec::new(),
            conns: Vec::new(),
        });
        self.meshes[mesh.index()].domains.push(id);
        self.expr.lineage.register_domain(mesh, None);
        Ok(id)
    }

    pub fn add_primitive_union(&mut self, mesh: MeshId, name: &str, children: &[DomainId]) -> Result<DomainId> {
        self.check_domain_name(mesh, name)?;
        if children.is_empty() {
            return decl(format!("primitive union '{name}' needs at least one child"));
        }
        for c in children {
            self.domain_checked(*c)?;
        }
        let (offsets, total) = self.prefix_offsets(children);
        let id = DomainId(self.domains.len() as u32);
        self.domains.push(Domain {
            name: name.to_string(),
            mesh,
            kind: DomainKind::Union { children: children.to_vec(), offsets, total },
            attrs: Vec::new(),
            conns: Vec::new(),
        });
        self.meshes[mesh.index()].domains.push(id);
        self.expr.lineage.register_domain(mesh, Some(children.to_vec()));
        Ok(id)
    }

    fn prefix_offsets(&self, children: &[DomainId]) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(children.len());
        let mut acc = 0;
        for c in children {
            offsets.push(acc);
            acc += self.domains[c.index()].count();
        }
        (offsets, acc)
    }

    pub fn add_connectivity(
        &mut self,
        from: DomainId,
        name: &str,
        to: DomainId,
        indices: Vec<usize>,
        arity: usize,
    ) -> Result<ConnId> {
        self.domain_checked(from)?;
        self.domain_checked(to)?;
        if arity == 0 {
            return invalid(format!("connectivity '{name}' must have positive arity"));
        }
        let d = &self.domains[from.index()];
        if d.conns.iter().any(|c| self.conns[c.index()].name == name) {
            return decl(format!("connectivity '{name}' already declared on '{}'", d.name));
        }
        self.validate_indices(name, d.count(), to, arity, &indices)?;
        let id = ConnId(self.conns.len() as u32);
        self.conns.push(Connectivity { name: name.to_string(), from, to, arity, indices });
        self.domains[from.index()].conns.push(id);
        self.expr.lineage.register_conn(from, to, arity);
        Ok(id)
    }

    fn validate_indices(&self, name: &str, n_from: usize, to: DomainId, arity: usize, indices: &[usize]) -> Result<()> {
        if indices.len() != n_from * arity {
            return invalid(format!(
                "connectivity '{name}': expected {} indices ({} x {}), got {}",
                n_from * arity,
                n_from,
                arity,
                indices.len()
            ));
        }
        let n_to = self.domains[to.index()].count();
        if let Some(pos) = indices.iter().position(|&j| j >= n_to) {
            return invalid(format!(
                "connectivity '{name}': index {} at position {pos} out of range for '{}' with {n_to} instances",
                indices[pos],
                self.domains[to.index()].name
            ));
        }
        Ok(())
    }

    // ---- attributes ------------------------------------------------------

    fn host_attr_list(&self, host: HostId) -> &[AttrId] {
        match host {
            HostId::Scene => &self.scene_attrs,
            HostId::Mesh(m) => &self.meshes[m.index()].attrs,
            HostId::Domain(d) => &self.domains[d.index()].attrs,
        }
    }

    fn check_host(&self, host: HostId) -> Result<()> {
        match host {
            HostId::Scene => Ok(()),
            HostId::Mesh(m) => self.mesh_checked(m).map(|_| ()),
            HostId::Domain(d) => self.domain_checked(d).map(|_| ()),
        }
    }

    fn check_attr_name(&self, host: HostId, name: &str) -> Result<()> {
        self.check_host(host)?;
        if self.host_attr_list(host).iter().any(|a| self.attrs[a.index()].name == name) {
            return decl(format!("attribute '{name}' already declared on {}", self.host_name(host)));
        }
        Ok(())
    }

    fn push_attr(&mut self, attr: Attribute) -> AttrId {
        let id = AttrId(self.attrs.len() as u32);
        let host = attr.host;
        self.attrs.push(attr);
        match host {
            HostId::Scene => self.scene_attrs.push(id),
            HostId::Mesh(m) => self.meshes[m.index()].attrs.push(id),
            HostId::Domain(d) => self.domains[d.index()].attrs.push(id),
        }
        id
    }

    /// Declares a data attribute (zero-initialised).  `differentiable = false`
    /// gives a constant that never participates in differentiation.
    pub fn add_data(&mut self, host: impl Into<HostId>, name: &str, shape: Shape, differentiable: bool) -> Result<AttrId> {
        let host = host.into();
        self.check_attr_name(host, name)?;
        let n = self.host_count(host);
        let id = AttrId(self.attrs.len() as u32);
        let node = self.expr.leaf(id, host, shape, differentiable);
        Ok(self.push_attr(Attribute {
            name: name.to_string(),
            host,
            shape,
            kind: AttrKind::Data { differentiable },
            node,
            values: vec![0.0; n * shape.size()],
        }))
    }

    pub fn add_constant(&mut self, host: impl Into<HostId>, name: &str, shape: Shape, values: &[f64]) -> Result<AttrId> {
        let a = self.add_data(host, name, shape, false)?;
        self.update_value(a, values)?;
        Ok(a)
    }

    /// Registers `node` as a named computed attribute on its lineage host.
    pub fn add_computed(&mut self, name: &str, node: NodeId) -> Result<AttrId> {
        let host = self.expr.host(node);
        let shape = self.expr.shape(node);
        self.check_attr_name(host, name)?;
        let id = AttrId(self.attrs.len() as u32);
        self.expr.set_name(node, id);
        Ok(self.push_attr(Attribute {
            name: name.to_string(),
            host,
            shape,
            kind: AttrKind::Computed,
            node,
            values: Vec::new(),
        }))
    }

    /// Declares `from_domain.name = JOIN_conn(source)`.
    pub fn add_joined(&mut self, name: &str, conn: ConnId, source: AttrId) -> Result<AttrId> {
        let c = self.conn_checked(conn)?.clone();
        let src = self.node(source)?;
        let node = self.expr.join(conn, src)?;
        self.check_attr_name(HostId::Domain(c.from), name)?;
        let id = AttrId(self.attrs.len() as u32);
        self.expr.set_name(node, id);
        let shape = self.expr.shape(node);
        Ok(self.push_attr(Attribute {
            name: name.to_string(),
            host: HostId::Domain(c.from),
            shape,
            kind: AttrKind::Joined { conn, source },
            node,
            values: Vec::new(),
        }))
    }

    /// Declares `union.name = UNION(child_1.name, ..., child_m.name)`.
    pub fn add_unioned(&mut self, union: DomainId, name: &str) -> Result<AttrId> {
        let node = self.union_node(union, name)?;
        self.check_attr_name(HostId::Domain(union), name)?;
        let id = AttrId(self.attrs.len() as u32);
        self.expr.set_name(node, id);
        let shape = self.expr.shape(node);
        Ok(self.push_attr(Attribute {
            name: name.to_string(),
            host: HostId::Domain(union),
            shape,
            kind: AttrKind::Unioned { child_name: name.to_string() },
            node,
            values: Vec::new(),
        }))
    }

    /// Builds the UNION expression of the attribute `name` over the children
    /// of `union`, without registering it.
    pub fn union_node(&mut self, union: DomainId, name: &str) -> Result<NodeId> {
        let children = match &self.domain_checked(union)?.kind {
            DomainKind::Union { children, .. } => children.clone(),
            _ => return decl(format!("'{}' is not a primitive union", self.domains[union.index()].name)),
        };
        let mut nodes = Vec::with_capacity(children.len());
        let mut shape: Option<Shape> = None;
        for c in &children {
            let Some(a) = self.attr(HostId::Domain(*c), name) else {
                return decl(format!(
                    "union '{}': child '{}' has no attribute '{name}'",
                    self.domains[union.index()].name,
                    self.domains[c.index()].name
                ));
            };
            let s = self.attrs[a.index()].shape;
            if let Some(prev) = shape {
                if prev != s {
                    return decl(format!(
                        "union '{}': attribute '{name}' has shape {prev} on one child and {s} on '{}'",
                        self.domains[union.index()].name,
                        self.domains[c.index()].name
                    ));
                }
            }
            shape = Some(s);
            nodes.push(self.attrs[a.index()].node);
        }
        self.expr.union(union, &nodes)
    }

    pub fn update_value(&mut self, attr: AttrId, values: &[f64]) -> Result<()> {
        let a = self.attr_checked_mut(attr)?;
        if !a.is_data() {
            return invalid(format!("attribute '{}' is computed and cannot be written", a.name));
        }
        if values.len() != a.values.len() {
            return invalid(format!(
                "attribute '{}': expected {} values, got {}",
                a.name,
                a.values.len(),
                values.len()
            ));
        }
        a.values.copy_from_slice(values);
        Ok(())
    }

    /// Mutable view of a data attribute's storage (length never changes).
    pub fn values_mut(&mut self, attr: AttrId) -> Result<&mut [f64]> {
        let a = self.attr_checked_mut(attr)?;
        if !a.is_data() {
            return invalid(format!("attribute '{}' is computed and cannot be written", a.name));
        }
        Ok(&mut a.values)
    }

    pub fn values(&self, attr: AttrId) -> &[f64] {
        &self.attrs[attr.index()].values
    }

    /// Expression node standing for an attribute (a leaf for data, the root
    /// otherwise).
    pub fn node(&self, attr: AttrId) -> Result<NodeId> {
        Ok(self.attr_checked(attr)?.node)
    }

    /// JOIN expression of `source` across `conn` (unregistered).
    pub fn join(&mut self, conn: ConnId, source: AttrId) -> Result<NodeId> {
        let n = self.node(source)?;
        self.expr.join(conn, n)
    }

    // ---- dynamic instances -----------------------------------------------

    /// Changes the instance count of a dynamic primitive and replaces every
    /// connectivity leaving it.  Connectivities not listed in `updates` must
    /// be empty afterwards, so they may only be omitted when `count == 0`.
    pub fn resize_dynamic(&mut self, domain: DomainId, count: usize, updates: &[(ConnId, Vec<usize>)]) -> Result<()> {
        let d = self.domain_checked(domain)?;
        if !d.is_dynamic() {
            return invalid(format!("primitive '{}' is not dynamic and cannot be resized", d.name));
        }
        let outgoing = d.conns.clone();
        for (c, idx) in updates {
            let conn = self.conn_checked(*c)?;
            if conn.from != domain {
                return invalid(format!("connectivity '{}' does not start at '{}'", conn.name, d.name));
            }
            self.validate_indices(&conn.name, count, conn.to, conn.arity, idx)?;
        }
        for c in &outgoing {
            if count > 0 && !updates.iter().any(|(u, _)| u == c) {
                return invalid(format!(
                    "resize of '{}' to {count} instances is missing connectivity '{}'",
                    d.name,
                    self.conns[c.index()].name
                ));
            }
        }
        for c in &outgoing {
            let idx = updates.iter().find(|(u, _)| u == c).map(|(_, v)| v.clone()).unwrap_or_default();
            self.conns[c.index()].indices = idx;
        }
        if let DomainKind::Primitive { count: n, .. } = &mut self.domains[domain.index()].kind {
            *n = count;
        }
        let attrs = self.domains[domain.index()].attrs.clone();
        for a in attrs {
            let at = &mut self.attrs[a.index()];
            if at.is_data() {
                at.values = vec![0.0; count * at.shape.size()];
            }
        }
        self.refresh_unions();
        self.dynamic_epoch += 1;
        Ok(())
    }

    fn refresh_unions(&mut self) {
        // Unions are declared after their children, so one forward pass
        // settles nested unions too.
        for i in 0..self.domains.len() {
            let children = match &self.domains[i].kind {
                DomainKind::Union { children, .. } => children.clone(),
                _ => continue,
            };
            let (o, t) = self.prefix_offsets(&children);
            if let DomainKind::Union { offsets, total, .. } = &mut self.domains[i].kind {
                *offsets = o;
                *total = t;
            }
        }
    }

    /// Incremented by every `resize_dynamic`; dynamic structures record the
    /// epoch they were built at.
    pub fn dynamic_epoch(&self) -> u64 {
        self.dynamic_epoch
    }

    // ---- unions ----------------------------------------------------------

    pub fn union_encode(&self, union: DomainId, branch: usize, local: usize) -> Result<usize> {
        match &self.domain_checked(union)?.kind {
            DomainKind::Union { children, offsets, .. } => {
                if branch >= children.len() {
                    return Err(Error::Range(format!("branch {branch} >= {}", children.len())));
                }
                let n = self.domains[children[branch].index()].count();
                if local >= n {
                    return Err(Error::Range(format!("local index {local} >= {n} instances of branch {branch}")));
                }
                Ok(offsets[branch] + local)
            }
            _ => invalid("union_encode on a primitive type"),
        }
    }

    pub fn union_decode(&self, union: DomainId, global: usize) -> Result<(usize, usize)> {
        match &self.domain_checked(union)?.kind {
            DomainKind::Union { offsets, total, .. } => {
                if global >= *total {
                    return Err(Error::Range(format!("union index {global} >= total {total}")));
                }
                Ok(decode_offsets(offsets, global))
            }
            _ => invalid("union_decode on a primitive type"),
        }
    }

    // ---- energies and targets --------------------------------------------

    pub fn add_energy(&mut self, e: EnergyDecl) -> Result<usize> {
        let a = self.attr_checked(e.root)?;
        if a.shape != Shape::SCALAR {
            return decl(format!("energy '{}' must be 1x1 per instance, got {}", e.name, a.shape));
        }
        if self.energies.iter().any(|x| x.name == e.name) {
            return decl(format!("energy '{}' already registered", e.name));
        }
        let dynamic_host = match a.host {
            HostId::Domain(d) => self.domain_is_dynamic_rooted(d),
            _ => false,
        };
        if e.dynamic_instances && !dynamic_host {
            return decl(format!("energy '{}' flagged dynamic but its host is static", e.name));
        }
        if !e.dynamic_instances && dynamic_host {
            return decl(format!("energy '{}' lives on a dynamic primitive and must be flagged dynamic", e.name));
        }
        self.energies.push(e);
        Ok(self.energies.len() - 1)
    }

    fn domain_is_dynamic_rooted(&self, d: DomainId) -> bool {
        match &self.domains[d.index()].kind {
            DomainKind::Primitive { dynamic, .. } => *dynamic,
            DomainKind::Union { children, .. } => children.iter().any(|c| self.domain_is_dynamic_rooted(*c)),
        }
    }

    pub fn add_minimize_target(&mut self, attr: AttrId) -> Result<()> {
        let a = self.attr_checked(attr)?;
        if !a.is_differentiable() {
            return invalid(format!("minimize target '{}' is not a differentiable data attribute", a.name));
        }
        if self.targets.contains(&attr) {
            return invalid(format!("minimize target '{}' registered twice", a.name));
        }
        if let HostId::Domain(d) = a.host {
            if self.domains[d.index()].is_dynamic() {
                return invalid(format!("minimize target '{}' lives on a dynamic primitive", a.name));
            }
        }
        self.targets.push(attr);
        Ok(())
    }

    pub fn energies(&self) -> &[EnergyDecl] {
        &self.energies
    }

    pub fn targets(&self) -> &[AttrId] {
        &self.targets
    }

    // ---- lookups ---------------------------------------------------------

    pub fn mesh(&self, id: MeshId) -> &Mesh {
        &self.meshes[id.index()]
    }

    pub fn meshes(&self) -> impl Iterator<Item = (MeshId, &Mesh)> {
        self.meshes.iter().enumerate().map(|(i, m)| (MeshId(i as u32), m))
    }

    pub fn domain(&self, id: DomainId) -> &Domain {
        &self.domains[id.index()]
    }

    pub fn attribute(&self, id: AttrId) -> &Attribute {
        &self.attrs[id.index()]
    }

    pub fn attributes(&self) -> impl Iterator<Item = (AttrId, &Attribute)> {
        self.attrs.iter().enumerate().map(|(i, a)| (AttrId(i as u32), a))
    }

    pub fn connectivity(&self, id: ConnId) -> &Connectivity {
        &self.conns[id.index()]
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn find_mesh(&self, name: &str) -> Option<MeshId> {
        self.meshes.iter().position(|m| m.name == name).map(|i| MeshId(i as u32))
    }

    pub fn find_domain(&self, mesh: MeshId, name: &str) -> Option<DomainId> {
        self.meshes[mesh.index()].domains.iter().copied().find(|d| self.domains[d.index()].name == name)
    }

    pub fn attr(&self, host: HostId, name: &str) -> Option<AttrId> {
        self.host_attr_list(host).iter().copied().find(|a| self.attrs[a.index()].name == name)
    }

    pub fn find_connectivity(&self, from: DomainId, name: &str) -> Option<ConnId> {
        self.domains[from.index()].conns.iter().copied().find(|c| self.conns[c.index()].name == name)
    }

    /// Resolves dotted paths `attr`, `mesh.attr` or `mesh.domain.attr`.
    pub fn lookup(&self, path: &str) -> Option<AttrId> {
        let parts: Vec<&str> = path.split('.').collect();
        match parts.as_slice() {
            [a] => self.attr(HostId::Scene, a),
            [m, a] => self.attr(HostId::Mesh(self.find_mesh(m)?), a),
            [m, d, a] => {
                let mid = self.find_mesh(m)?;
                self.attr(HostId::Domain(self.find_domain(mid, d)?), a)
            }
            _ => None,
        }
    }

    pub fn host_count(&self, host: HostId) -> usize {
        match host {
            HostId::Domain(d) => self.domains[d.index()].count(),
            _ => 1,
        }
    }

    pub fn host_name(&self, host: HostId) -> String {
        match host {
            HostId::Scene => format!("scene '{}'", self.name),
            HostId::Mesh(m) => format!("mesh '{}'", self.meshes[m.index()].name),
            HostId::Domain(d) => {
                let dom = &self.domains[d.index()];
                format!("'{}.{}'", self.meshes[dom.mesh.index()].name, dom.name)
            }
        }
    }

    pub fn attr_path(&self, attr: AttrId) -> String {
        let a = &self.attrs[attr.index()];
        match a.host {
            HostId::Scene => a.name.clone(),
            HostId::Mesh(m) => format!("{}.{}", self.meshes[m.index()].name, a.name),
            HostId::Domain(d) => {
                let dom = &self.domains[d.index()];
                format!("{}.{}.{}", self.meshes[dom.mesh.index()].name, dom.name, a.name)
            }
        }
    }

    pub fn deepest_common_host(&self, hosts: &[HostId]) -> Result<HostId> {
        if hosts.is_empty() {
            return invalid("deepest_common_host of an empty set");
        }
        self.expr.lineage.deepest_common(hosts).map_err(|(a, b)| Error::Lineage {
            a: self.host_name(a),
            b: self.host_name(b),
        })
    }

    fn mesh_checked(&self, id: MeshId) -> Result<&Mesh> {
        self.meshes.get(id.index()).ok_or_else(|| Error::Validation(format!("unknown mesh id {}", id.0)))
    }

    fn domain_checked(&self, id: DomainId) -> Result<&Domain> {
        self.domains.get(id.index()).ok_or_else(|| Error::Validation(format!("unknown domain id {}", id.0)))
    }

    fn conn_checked(&self, id: ConnId) -> Result<&Connectivity> {
        self.conns.get(id.index()).ok_or_else(|| Error::Validation(format!("unknown connectivity id {}", id.0)))
    }

    fn attr_checked(&self, id: AttrId) -> Result<&Attribute> {
        self.attrs.get(id.index()).ok_or_else(|| Error::Validation(format!("unknown attribute id {}", id.0)))
    }

    fn attr_checked_mut(&mut self, id: AttrId) -> Result<&mut Attribute> {
        self.attrs.get_mut(id.index()).ok_or_else(|| Error::Validation(format!("unknown attribute id {}", id.0)))
    }

    /// Per-domain instance counts, used by evaluation to bounds-check reads.
    pub(crate) fn union_offsets(&self, union: DomainId) -> (&[DomainId], &[usize]) {
        match &self.domains[union.index()].kind {
            DomainKind::Union { children, offsets, .. } => (children, offsets),
            _ => (&[], &[]),
        }
    }

    /// Name lookup table for every attribute, keyed by dotted path.
    pub fn attribute_paths(&self) -> HashMap<String, AttrId> {
        (0..self.attrs.len()).map(|i| (self.attr_path(AttrId(i as u32)), AttrId(i as u32))).collect()
    }
}

/// Binary search of a prefix-sum table: the last branch whose offset is <= g.
pub(crate) fn decode_offsets(offsets: &[usize], g: usize) -> (usize, usize) {
    let j = offsets.partition_point(|&o| o <= g) - 1;
    (j, g - offsets[j])
}
