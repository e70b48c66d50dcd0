//! Bundled energies, written only against the public scene and expression
//! API.  Each builder registers the per-instance energy expression as a
//! computed attribute and returns the declaration; the caller adds it with
//! [`Scene::add_energy`].

use crate::diff::ProjectionRequest;
use crate::error::{Error, Result};
use crate::expr::{Cmp, NodeId};
use crate::kernels;
use crate::scene::{AttrId, ConnId, DomainId, EnergyDecl, HostId, Scene, Shape};

/// Elements of `domain` reaching points through `conn`, whose position
/// attribute is `pos` (3x1 per point).
#[derive(Copy, Clone, Debug)]
pub struct Elements {
    pub domain: DomainId,
    pub conn: ConnId,
    pub pos: AttrId,
}

impl Elements {
    fn check(&self, scene: &Scene, arity: usize, what: &str) -> Result<()> {
        let c = scene.connectivity(self.conn);
        if c.from != self.domain {
            return Err(Error::Declaration(format!("{what}: connectivity '{}' does not start at the element domain", c.name)));
        }
        if c.arity != arity {
            return Err(Error::Declaration(format!("{what}: expected arity {arity}, connectivity '{}' has {}", c.name, c.arity)));
        }
        let a = scene.attribute(self.pos);
        if a.host != HostId::Domain(c.to) {
            return Err(Error::Declaration(format!(
                "{what}: position attribute '{}' is not declared on the connectivity target",
                scene.attr_path(self.pos)
            )));
        }
        if a.shape != Shape::vec3() {
            return Err(Error::Declaration(format!("{what}: positions must be 3x1, got {}", a.shape)));
        }
        Ok(())
    }

    /// Row `k` of the joined positions as 3x1 expressions.
    fn points(&self, scene: &mut Scene, n: usize) -> Result<Vec<NodeId>> {
        let j = scene.join(self.conn, self.pos)?;
        (0..n).map(|k| scene.expr.index(j, k)).collect()
    }

    /// Rest coordinates of the element's points from a flat per-point array.
    fn rest_points(&self, scene: &Scene, rest: &[f64], i: usize) -> Result<Vec<[f64; 3]>> {
        let c = scene.connectivity(self.conn);
        let n_to = scene.domain(c.to).count();
        if rest.len() != 3 * n_to {
            return Err(Error::Declaration(format!("rest positions: expected {} values, got {}", 3 * n_to, rest.len())));
        }
        Ok(c.row(i).iter().map(|&v| [rest[3 * v], rest[3 * v + 1], rest[3 * v + 2]]).collect())
    }
}

fn finish(scene: &mut Scene, name: &str, host: DomainId, e: NodeId, scale: f64) -> Result<AttrId> {
    let e = if scale == 1.0 { e } else { scene.expr.scale(scale, e)? };
    // A constant root still needs to live on the element domain.
    let e = if scene.expr.host(e) == HostId::Domain(host) {
        e
    } else {
        let z = domain_zero(scene, host)?;
        scene.expr.add(e, z)?
    };
    scene.add_computed(name, e)
}

fn domain_zero(scene: &mut Scene, host: DomainId) -> Result<NodeId> {
    let name = "__zero";
    let a = match scene.attr(HostId::Domain(host), name) {
        Some(a) => a,
        None => {
            let n = scene.domain(host).count();
            scene.add_constant(host, name, Shape::SCALAR, &vec![0.0; n])?
        }
    };
    scene.node(a)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// `scale / |p1 - p0|` over point pairs.
pub fn repulsive(scene: &mut Scene, name: &str, el: Elements, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 2, name)?;
    let p = el.points(scene, 2)?;
    let g = &mut scene.expr;
    let d = g.sub(p[1], p[0])?;
    let n = g.norm(d)?;
    let one = g.constant(1.0);
    let e = g.div(one, n)?;
    let root = finish(scene, name, el.domain, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

/// Point-point barrier `kappa (d - dhat)^2 log^2(d / dhat)` for `d < dhat`,
/// with `d` the squared distance and `dhat` in the same squared units.
pub fn barrier(scene: &mut Scene, name: &str, el: Elements, kappa: f64, dhat: f64, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 2, name)?;
    if dhat <= 0.0 || kappa <= 0.0 {
        return Err(Error::Validation(format!("{name}: kappa and dhat must be positive")));
    }
    let p = el.points(scene, 2)?;
    let g = &mut scene.expr;
    let r = g.sub(p[1], p[0])?;
    let d = g.dot(r, r)?;
    let dh = g.constant(dhat);
    let gap = g.sub(d, dh)?;
    let gap2 = g.mul(gap, gap)?;
    let ratio = g.div(d, dh)?;
    let l = g.log(ratio)?;
    let l2 = g.mul(l, l)?;
    let b = g.mul(gap2, l2)?;
    let b = g.scale(kappa, b)?;
    let zero = g.zero(Shape::SCALAR);
    let e = g.select(Cmp::Lt, d, dh, b, zero)?;
    let root = finish(scene, name, el.domain, e, scale)?;
    let dynamic = scene.domain(el.domain).is_dynamic();
    Ok(EnergyDecl::new(name, root).dynamic(dynamic))
}

/// `scale * k/2 (|p1 - p0| - rest)^2`, rest lengths taken from `rest`.
pub fn spring(scene: &mut Scene, name: &str, el: Elements, rest: &[f64], k: f64, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 2, name)?;
    let n = scene.domain(el.domain).count();
    let mut len = Vec::with_capacity(n);
    for i in 0..n {
        let r = el.rest_points(scene, rest, i)?;
        let d = sub3(r[1], r[0]);
        len.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
    }
    let l0 = scene.add_constant(el.domain, &format!("{name}_rest_length"), Shape::SCALAR, &len)?;
    let l0 = scene.node(l0)?;
    let p = el.points(scene, 2)?;
    let g = &mut scene.expr;
    let d = g.sub(p[1], p[0])?;
    let nrm = g.norm(d)?;
    let s = g.sub(nrm, l0)?;
    let s2 = g.mul(s, s)?;
    let e = g.scale(0.5 * k, s2)?;
    let root = finish(scene, name, el.domain, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

/// Columns `x1 - x0, x2 - x0, x3 - x0`.
fn edge_matrix(scene: &mut Scene, p: &[NodeId]) -> Result<NodeId> {
    let g = &mut scene.expr;
    let e1 = g.sub(p[1], p[0])?;
    let e2 = g.sub(p[2], p[0])?;
    let e3 = g.sub(p[3], p[0])?;
    g.hconcat(&[e1, e2, e3])
}

/// Per-tet rest volume and inverse rest edge matrix.
fn tet_rest(scene: &Scene, el: &Elements, rest: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = scene.domain(el.domain).count();
    let mut vols = Vec::with_capacity(n);
    let mut inv = Vec::with_capacity(9 * n);
    for i in 0..n {
        let r = el.rest_points(scene, rest, i)?;
        let cols = [sub3(r[1], r[0]), sub3(r[2], r[0]), sub3(r[3], r[0])];
        let mut dm = [0.0; 9];
        for row in 0..3 {
            for c in 0..3 {
                dm[row * 3 + c] = cols[c][row];
            }
        }
        let det = kernels::det(&dm, 3);
        if det.abs() < 1e-14 {
            return Err(Error::Declaration(format!("tet {i} is degenerate in the rest configuration")));
        }
        let mut out = [0.0; 9];
        kernels::inverse(&dm, 3, &mut out)?;
        vols.push(det.abs() / 6.0);
        inv.extend_from_slice(&out);
    }
    Ok((vols, inv))
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Lame {
    pub mu: f64,
    pub lambda: f64,
}

impl Lame {
    pub fn from_young_poisson(e: f64, nu: f64) -> Lame {
        Lame { mu: e / (2.0 * (1.0 + nu)), lambda: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)) }
    }
}

/// `V [mu/2 (I_C - 3) - mu/2 log(I_C + 1) + lambda/2 (J - alpha)^2]` of a
/// deformation gradient expression.
fn stable_nh_density(scene: &mut Scene, f: NodeId, vol: NodeId, m: Lame) -> Result<NodeId> {
    let alpha = 1.0 + 3.0 * m.mu / (4.0 * m.lambda);
    let g = &mut scene.expr;
    let ic = g.dot(f, f)?;
    let j = g.det(f)?;
    let three = g.constant(3.0);
    let t1 = g.sub(ic, three)?;
    let t1 = g.scale(0.5 * m.mu, t1)?;
    let one = g.constant(1.0);
    let ic1 = g.add(ic, one)?;
    let lg = g.log(ic1)?;
    let t2 = g.scale(0.5 * m.mu, lg)?;
    let a = g.constant(alpha);
    let ja = g.sub(j, a)?;
    let ja2 = g.mul(ja, ja)?;
    let t3 = g.scale(0.5 * m.lambda, ja2)?;
    let s = g.sub(t1, t2)?;
    let s = g.add(s, t3)?;
    g.mul(vol, s)
}

/// Stable Neo-Hookean over tets, differentiated directly in positions.
pub fn stable_neo_hookean(scene: &mut Scene, name: &str, el: Elements, rest: &[f64], m: Lame, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 4, name)?;
    let (vols, inv) = tet_rest(scene, &el, rest)?;
    let vol = scene.add_constant(el.domain, &format!("{name}_volume"), Shape::SCALAR, &vols)?;
    let dminv = scene.add_constant(el.domain, &format!("{name}_dm_inv"), Shape::new(3, 3), &inv)?;
    let (vol, dminv) = (scene.node(vol)?, scene.node(dminv)?);
    let p = el.points(scene, 4)?;
    let ds = edge_matrix(scene, &p)?;
    let f = scene.expr.matmul(ds, dminv)?;
    let e = stable_nh_density(scene, f, vol, m)?;
    let root = finish(scene, name, el.domain, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

/// Stable Neo-Hookean through a named deformation gradient joined onto a
/// one-to-one proxy primitive, so the projected block is 9x9.
pub fn stable_neo_hookean_f(scene: &mut Scene, name: &str, el: Elements, rest: &[f64], m: Lame, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 4, name)?;
    let (vols, inv) = tet_rest(scene, &el, rest)?;
    let dminv = scene.add_constant(el.domain, &format!("{name}_dm_inv"), Shape::new(3, 3), &inv)?;
    let dminv = scene.node(dminv)?;
    let p = el.points(scene, 4)?;
    let ds = edge_matrix(scene, &p)?;
    let f = scene.expr.matmul(ds, dminv)?;
    let fa = scene.add_computed(&format!("{name}_F"), f)?;
    let n = scene.domain(el.domain).count();
    let mesh = scene.domain(el.domain).mesh;
    let proxy = scene.add_primitive(mesh, &format!("{name}_proxy"), n, false)?;
    let conn = scene.add_connectivity(proxy, "tet", el.domain, (0..n).collect(), 1)?;
    let vol = scene.add_constant(proxy, &format!("{name}_volume"), Shape::SCALAR, &vols)?;
    let vol = scene.node(vol)?;
    let fj = scene.join(conn, fa)?;
    let fp = scene.expr.reshape(fj, Shape::new(3, 3))?;
    let e = stable_nh_density(scene, fp, vol, m)?;
    let root = finish(scene, name, proxy, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

/// `stiffness / 2 |A^T A - I|_F^2` per affine body.
pub fn affine_orthogonality(scene: &mut Scene, name: &str, a: AttrId, stiffness: f64, scale: f64) -> Result<EnergyDecl> {
    let at = scene.attribute(a);
    let HostId::Domain(host) = at.host else {
        return Err(Error::Declaration(format!("{name}: affine matrix must live on a primitive")));
    };
    if at.shape != Shape::new(3, 3) {
        return Err(Error::Declaration(format!("{name}: affine matrix must be 3x3, got {}", at.shape)));
    }
    let an = scene.node(a)?;
    let g = &mut scene.expr;
    let att = g.transpose(an)?;
    let ata = g.matmul(att, an)?;
    let id = g.identity(3);
    let d = g.sub(ata, id)?;
    let d2 = g.dot(d, d)?;
    let e = g.scale(0.5 * stiffness, d2)?;
    let root = finish(scene, name, host, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

fn unit_normal(scene: &mut Scene, a: NodeId, b: NodeId, c: NodeId) -> Result<NodeId> {
    let g = &mut scene.expr;
    let u = g.sub(b, a)?;
    let v = g.sub(c, a)?;
    let n = g.cross(u, v)?;
    let l = g.norm(n)?;
    g.div(n, l)
}

/// `stiffness * l_init |N1 - N2|` over hinges `(v0, v1, v2, v3)` with
/// triangles `(v0, v1, v2)` and `(v1, v0, v3)`.
pub fn bending(scene: &mut Scene, name: &str, el: Elements, rest: &[f64], stiffness: f64, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 4, name)?;
    let n = scene.domain(el.domain).count();
    let mut len = Vec::with_capacity(n);
    for i in 0..n {
        let r = el.rest_points(scene, rest, i)?;
        let d = sub3(r[1], r[0]);
        len.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
    }
    let l0 = scene.add_constant(el.domain, &format!("{name}_edge_length"), Shape::SCALAR, &len)?;
    let l0 = scene.node(l0)?;
    let p = el.points(scene, 4)?;
    let n1 = unit_normal(scene, p[0], p[1], p[2])?;
    let n2 = unit_normal(scene, p[1], p[0], p[3])?;
    let g = &mut scene.expr;
    let d = g.sub(n1, n2)?;
    let dn = g.norm(d)?;
    let e = g.mul(l0, dn)?;
    let e = g.scale(stiffness, e)?;
    let root = finish(scene, name, el.domain, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

/// `k/2 (theta_b - theta_a - rest)^2` over pairs of scalar angles joined by
/// `conn` (arity 2) from `domain`.
pub fn angular_spring(
    scene: &mut Scene,
    name: &str,
    domain: DomainId,
    conn: ConnId,
    angle: AttrId,
    rest: &[f64],
    k: f64,
    scale: f64,
) -> Result<EnergyDecl> {
    let c = scene.connectivity(conn);
    if c.from != domain || c.arity != 2 {
        return Err(Error::Declaration(format!("{name}: expected an arity-2 connectivity from the spring domain")));
    }
    if scene.attribute(angle).shape != Shape::SCALAR {
        return Err(Error::Declaration(format!("{name}: angles must be 1x1")));
    }
    let r = scene.add_constant(domain, &format!("{name}_rest_angle"), Shape::SCALAR, rest)?;
    let r = scene.node(r)?;
    let j = scene.join(conn, angle)?;
    let g = &mut scene.expr;
    let a = g.index(j, 0)?;
    let b = g.index(j, 1)?;
    let d = g.sub(b, a)?;
    let d = g.sub(d, r)?;
    let d2 = g.mul(d, d)?;
    let e = g.scale(0.5 * k, d2)?;
    let root = finish(scene, name, domain, e, scale)?;
    Ok(EnergyDecl::new(name, root))
}

/// `m/2 |x - x_tilde|^2` per instance; `x` may be any (possibly computed)
/// attribute on `domain`, `x_tilde` and `mass` are non-differentiable data.
pub fn inertia(scene: &mut Scene, name: &str, x: AttrId, x_tilde: AttrId, mass: AttrId) -> Result<EnergyDecl> {
    let host = scene.attribute(x).host;
    let HostId::Domain(d) = host else {
        return Err(Error::Declaration(format!("{name}: inertia needs a per-instance attribute")));
    };
    for (a, what) in [(x_tilde, "predicted state"), (mass, "mass")] {
        let at = scene.attribute(a);
        if at.host != host {
            return Err(Error::Declaration(format!("{name}: {what} '{}' must share the host of x", scene.attr_path(a))));
        }
        if at.is_differentiable() {
            return Err(Error::Declaration(format!("{name}: {what} must be non-differentiable")));
        }
    }
    if scene.attribute(x_tilde).shape != scene.attribute(x).shape || scene.attribute(mass).shape != Shape::SCALAR {
        return Err(Error::Declaration(format!("{name}: shape mismatch between x, x_tilde and mass")));
    }
    let (xn, tn, mn) = (scene.node(x)?, scene.node(x_tilde)?, scene.node(mass)?);
    let g = &mut scene.expr;
    let r = g.sub(xn, tn)?;
    let r2 = g.dot(r, r)?;
    let e = g.mul(mn, r2)?;
    let e = g.scale(0.5, e)?;
    let root = finish(scene, name, d, e, 1.0)?;
    Ok(EnergyDecl::new(name, root))
}

/// `-scale * m g . x` per instance.
pub fn gravity(scene: &mut Scene, name: &str, x: AttrId, mass: AttrId, accel: [f64; 3], scale: f64) -> Result<EnergyDecl> {
    let HostId::Domain(d) = scene.attribute(x).host else {
        return Err(Error::Declaration(format!("{name}: gravity needs a per-instance attribute")));
    };
    let (xn, mn) = (scene.node(x)?, scene.node(mass)?);
    let g = &mut scene.expr;
    let gv = g.literal(Shape::vec3(), &accel);
    let w = g.dot(gv, xn)?;
    let e = g.mul(mn, w)?;
    let e = g.scale(-scale, e)?;
    let root = finish(scene, name, d, e, 1.0)?;
    Ok(EnergyDecl::new(name, root))
}

/// Trilinear weights of the 8 cube corners (ordered by bits x, y, z) at
/// local coordinates `(u, v, w)`.
pub fn trilinear_weights(u: f64, v: f64, w: f64) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (k, o) in out.iter_mut().enumerate() {
        let fx = if k & 1 == 1 { u } else { 1.0 - u };
        let fy = if k & 2 == 2 { v } else { 1.0 - v };
        let fz = if k & 4 == 4 { w } else { 1.0 - w };
        *o = fx * fy * fz;
    }
    out
}

/// Declares `sample.name = sum_k w_k JOIN_conn(pos)[k]` with per-sample
/// blend weights (8 per sample).
pub fn cage_blend(scene: &mut Scene, name: &str, samples: DomainId, conn: ConnId, pos: AttrId, weights: &[f64]) -> Result<AttrId> {
    let c = scene.connectivity(conn);
    if c.from != samples || c.arity != 8 {
        return Err(Error::Declaration(format!("{name}: cage blend needs an arity-8 connectivity from the sample domain")));
    }
    let w = scene.add_constant(samples, &format!("{name}_weights"), Shape::new(8, 1), weights)?;
    let wn = scene.node(w)?;
    let j = scene.join(conn, pos)?;
    let g = &mut scene.expr;
    let mut acc = g.zero(Shape::vec3());
    for k in 0..8 {
        let p = g.index(j, k)?;
        let wk = g.index(wn, k)?;
        let t = g.mul(wk, p)?;
        acc = g.add(acc, t)?;
    }
    scene.add_computed(name, acc)
}

/// Sum of `scale / |s_a - s_b|` over the 6 pairs of a 4-point stencil.
pub fn stencil_repulsion(scene: &mut Scene, name: &str, el: Elements, scale: f64) -> Result<EnergyDecl> {
    el.check(scene, 4, name)?;
    let p = el.points(scene, 4)?;
    let g = &mut scene.expr;
    let one = g.constant(1.0);
    let mut acc = g.zero(Shape::SCALAR);
    for a in 0..4 {
        for b in a + 1..4 {
            let d = g.sub(p[b], p[a])?;
            let n = g.norm(d)?;
            let t = g.div(one, n)?;
            acc = g.add(acc, t)?;
        }
    }
    let root = finish(scene, name, el.domain, acc, scale)?;
    Ok(EnergyDecl::new(name, root).projection(ProjectionRequest::Separated))
}
