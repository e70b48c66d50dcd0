//! Bundled demo scenes.  Every object is split into a free primitive (the
//! minimization target) and a fixed primitive of constant positions, joined
//! by a primitive union that element connectivities point into.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relsym::assembly::AssemblyOptions;
use relsym::energy::{self, Elements, Lame};
use relsym::eval::evaluate;
use relsym::solver::{Minimizer, PreconditionerKind, SolverConfig};
use relsym::{AttrId, DomainId, MeshId, Scene, Shape};

use crate::config::SimConfig;
use crate::contact::Contact;
use crate::error::Result;

pub const SCENES: &[&str] = &["mass_spring", "abd_contact", "tet_on_cloth"];

/// How the inertia target `x_tilde` is predicted from the DoFs.
#[derive(Clone, Debug)]
pub enum Predictor {
    Free { x: AttrId, x_tilde: AttrId },
    /// Vertices at `A rest + t` in a frame centered on the body.
    Affine { a: AttrId, t: AttrId, rest: Vec<f64>, x_tilde: AttrId },
}

pub struct Sim {
    pub name: String,
    pub scene: Scene,
    pub minimizer: Minimizer,
    pub contact: Option<Contact>,
    pub predictors: Vec<Predictor>,
    /// DoF velocities in gradient layout order.
    pub velocity: Vec<f64>,
    /// Position-like attributes written to the trajectory.
    pub outputs: Vec<AttrId>,
    pub dt: f64,
    pub frame: usize,
}

/// Scene description before compilation.
pub struct Built {
    pub scene: Scene,
    pub contact: Option<Contact>,
    pub predictors: Vec<Predictor>,
    pub initial_velocity: Vec<(AttrId, Vec<f64>)>,
    pub outputs: Vec<AttrId>,
}

impl Sim {
    pub fn new(cfg: &SimConfig) -> Result<Sim> {
        let built = build_scene(cfg)?;
        Sim::from_built(cfg, built)
    }

    pub fn from_built(cfg: &SimConfig, built: Built) -> Result<Sim> {
        let Built { mut scene, contact, predictors, initial_velocity, outputs } = built;
        if let Some(c) = &contact {
            c.refresh(&mut scene)?;
        }
        let solver = SolverConfig {
            tol: cfg.pcg.tol,
            max_iter: (cfg.pcg.max_iter > 0).then_some(cfg.pcg.max_iter),
            preconditioner: match cfg.pcg.preconditioner.as_str() {
                "identity" => PreconditionerKind::Identity,
                _ => PreconditionerKind::BlockJacobi,
            },
            assembly: AssemblyOptions { parallel: cfg.parallel, project: true },
        };
        let minimizer = Minimizer::new(&mut scene, solver)?;
        let layout = &minimizer.assembler.layout;
        let mut velocity = vec![0.0; minimizer.assembler.dim()];
        for (attr, v) in &initial_velocity {
            let start = layout.start(*attr).expect("initial velocity on a non-target attribute");
            velocity[start..start + v.len()].copy_from_slice(v);
        }
        let mut sim = Sim { name: cfg.scene.clone(), scene, minimizer, contact, predictors, velocity, outputs, dt: cfg.dt, frame: 0 };
        sim.predict()?;
        Ok(sim)
    }

    pub fn dofs(&self) -> Vec<f64> {
        self.minimizer.assembler.layout.gather(&self.scene)
    }

    pub fn set_dofs(&mut self, x: &[f64]) -> Result<()> {
        self.minimizer.assembler.layout.scatter(&mut self.scene, x)?;
        Ok(())
    }

    /// Writes `x_tilde = x + dt v` for every inertia term.
    pub fn predict(&mut self) -> Result<()> {
        let layout = &self.minimizer.assembler.layout;
        let x = layout.gather(&self.scene);
        let y: Vec<f64> = x.iter().zip(&self.velocity).map(|(x, v)| x + self.dt * v).collect();
        let range = |attr: AttrId, scene: &Scene| {
            let s = layout.start(attr).expect("predictor on a non-target attribute");
            s..s + scene.values(attr).len()
        };
        let mut writes = Vec::new();
        for p in &self.predictors {
            match p {
                Predictor::Free { x, x_tilde } => writes.push((*x_tilde, y[range(*x, &self.scene)].to_vec())),
                Predictor::Affine { a, t, rest, x_tilde } => {
                    let am = &y[range(*a, &self.scene)];
                    let tv = &y[range(*t, &self.scene)];
                    let mut out = Vec::with_capacity(rest.len());
                    for r in rest.chunks(3) {
                        for i in 0..3 {
                            out.push(am[3 * i] * r[0] + am[3 * i + 1] * r[1] + am[3 * i + 2] * r[2] + tv[i]);
                        }
                    }
                    writes.push((*x_tilde, out));
                }
            }
        }
        for (attr, v) in writes {
            self.scene.update_value(attr, &v)?;
        }
        Ok(())
    }

    /// Refreshes contact pairs and the dynamic assembly structure.
    pub fn refresh_pairs(&mut self) -> Result<usize> {
        let n = match &self.contact {
            Some(c) => c.refresh(&mut self.scene)?,
            None => 0,
        };
        Ok(n)
    }

    pub fn active_pairs(&self) -> usize {
        self.contact.as_ref().map_or(0, |c| c.active_pairs(&self.scene))
    }

    /// Current values of every output attribute.
    pub fn output_values(&self) -> Result<Vec<(String, relsym::eval::InstanceTensor)>> {
        let mut out = Vec::new();
        for &a in &self.outputs {
            out.push((self.scene.attr_path(a), evaluate(&self.scene, a)?));
        }
        Ok(out)
    }
}

pub fn build_scene(cfg: &SimConfig) -> Result<Built> {
    match cfg.scene.as_str() {
        "mass_spring" => mass_spring(cfg),
        "abd_contact" => abd_contact(cfg),
        "tet_on_cloth" => tet_on_cloth(cfg),
        other => Err(crate::SimError::Config(format!("unknown scene '{other}'"))),
    }
}

/// Kuhn subdivision of an `n^3` cell grid, 6 tets per cell.
pub fn tet_grid(n: usize, h: f64, origin: [f64; 3]) -> (Vec<f64>, Vec<usize>) {
    let id = |i: usize, j: usize, k: usize| i + (n + 1) * (j + (n + 1) * k);
    let mut pts = Vec::new();
    for k in 0..=n {
        for j in 0..=n {
            for i in 0..=n {
                pts.extend_from_slice(&[origin[0] + i as f64 * h, origin[1] + j as f64 * h, origin[2] + k as f64 * h]);
            }
        }
    }
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for p in perms {
                    let mut c = [0usize; 3];
                    tets.push(id(i, j, k));
                    for ax in p {
                        c[ax] = 1;
                        tets.push(id(i + c[0], j + c[1], k + c[2]));
                    }
                }
            }
        }
    }
    (pts, tets)
}

/// Square sheet in the `xz` plane: vertex `(i, j)` sits at `(i h, 0, j h)`
/// with index `i + (n + 1) j`.
pub fn cloth_grid(n: usize, h: f64, origin: [f64; 3]) -> (Vec<f64>, Vec<[usize; 3]>) {
    let id = |i: usize, j: usize| i + (n + 1) * j;
    let mut pts = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            pts.extend_from_slice(&[origin[0] + i as f64 * h, origin[1], origin[2] + j as f64 * h]);
        }
    }
    let mut tris = Vec::new();
    for j in 0..n {
        for i in 0..n {
            tris.push([id(i, j), id(i + 1, j + 1), id(i + 1, j)]);
            tris.push([id(i, j), id(i, j + 1), id(i + 1, j + 1)]);
        }
    }
    (pts, tris)
}

/// Structural and both shear diagonals of every grid cell.
pub fn cloth_springs(n: usize) -> Vec<usize> {
    let id = |i: usize, j: usize| i + (n + 1) * j;
    let mut e = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            if i < n {
                e.extend_from_slice(&[id(i, j), id(i + 1, j)]);
            }
            if j < n {
                e.extend_from_slice(&[id(i, j), id(i, j + 1)]);
            }
            if i < n && j < n {
                e.extend_from_slice(&[id(i, j), id(i + 1, j + 1), id(i + 1, j), id(i, j + 1)]);
            }
        }
    }
    e
}

/// Hinges `(v0, v1, v2, v3)` over interior edges, triangles `(v0, v1, v2)`
/// and `(v1, v0, v3)` sharing edge `v0-v1` with consistent orientation.
pub fn hinges(tris: &[[usize; 3]]) -> Vec<usize> {
    let mut open: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
    let mut out = Vec::new();
    for t in tris {
        for e in 0..3 {
            let (a, b, c) = (t[e], t[(e + 1) % 3], t[(e + 2) % 3]);
            if let Some(opp) = open.remove(&(b, a)) {
                out.extend_from_slice(&[a, b, c, opp]);
            } else {
                open.insert((a, b), c);
            }
        }
    }
    out
}

/// Free and fixed vertex primitives of one object plus their union.
pub struct Object {
    pub mesh: MeshId,
    pub free: DomainId,
    pub free_pos: AttrId,
    pub fixed: Option<(DomainId, AttrId)>,
    pub all: DomainId,
    pub all_pos: AttrId,
    /// Union index of every original vertex.
    pub map: Vec<usize>,
    /// Original positions in union order.
    pub rest: Vec<f64>,
    pub free_orig: Vec<usize>,
}

impl Object {
    pub fn new(scene: &mut Scene, name: &str, pts: &[f64], fixed: &[bool]) -> Result<Object> {
        let n = pts.len() / 3;
        let mesh = scene.add_mesh(name)?;
        let free_orig: Vec<usize> = (0..n).filter(|&v| !fixed[v]).collect();
        let fixed_orig: Vec<usize> = (0..n).filter(|&v| fixed[v]).collect();
        let gather = |ids: &[usize]| -> Vec<f64> { ids.iter().flat_map(|&v| pts[3 * v..3 * v + 3].to_vec()).collect() };
        let free = scene.add_primitive(mesh, "free", free_orig.len(), false)?;
        let free_pos = scene.add_data(free, "position", Shape::vec3(), true)?;
        scene.update_value(free_pos, &gather(&free_orig))?;
        scene.add_minimize_target(free_pos)?;
        let mut children = vec![free];
        let fixed_dom = if fixed_orig.is_empty() {
            None
        } else {
            let d = scene.add_primitive(mesh, "fixed", fixed_orig.len(), false)?;
            let p = scene.add_constant(d, "position", Shape::vec3(), &gather(&fixed_orig))?;
            children.push(d);
            Some((d, p))
        };
        let all = scene.add_primitive_union(mesh, "all", &children)?;
        let all_pos = scene.add_unioned(all, "position")?;
        let mut map = vec![0; n];
        for (k, &v) in free_orig.iter().chain(&fixed_orig).enumerate() {
            map[v] = k;
        }
        let order: Vec<usize> = free_orig.iter().chain(&fixed_orig).copied().collect();
        Ok(Object { mesh, free, free_pos, fixed: fixed_dom, all, all_pos, map, rest: gather(&order), free_orig })
    }

    /// Element primitive over the union with original vertex indices.
    pub fn elements(&self, scene: &mut Scene, name: &str, idx: &[usize], arity: usize) -> Result<Elements> {
        let d = scene.add_primitive(self.mesh, name, idx.len() / arity, false)?;
        let remapped: Vec<usize> = idx.iter().map(|&v| self.map[v]).collect();
        let conn = scene.add_connectivity(d, "vertices", self.all, remapped, arity)?;
        Ok(Elements { domain: d, conn, pos: self.all_pos })
    }

    /// Inertia and gravity on the free vertices from per-vertex masses.
    pub fn dynamics(&self, scene: &mut Scene, mass: &[f64], gravity: f64, dt: f64) -> Result<Predictor> {
        let m: Vec<f64> = self.free_orig.iter().map(|&v| mass[v]).collect();
        let ma = scene.add_constant(self.free, "mass", Shape::SCALAR, &m)?;
        let x0 = scene.values(self.free_pos).to_vec();
        let xt = scene.add_constant(self.free, "x_tilde", Shape::vec3(), &x0)?;
        let name = &scene.mesh(self.mesh).name.clone();
        let e = energy::inertia(scene, &format!("{name}_inertia"), self.free_pos, xt, ma)?;
        scene.add_energy(e)?;
        if gravity != 0.0 {
            let e = energy::gravity(scene, &format!("{name}_gravity"), self.free_pos, ma, [0.0, -gravity, 0.0], dt * dt)?;
            scene.add_energy(e)?;
        }
        Ok(Predictor::Free { x: self.free_pos, x_tilde: xt })
    }

    pub fn outputs(&self) -> Vec<AttrId> {
        let mut v = vec![self.free_pos];
        v.extend(self.fixed.map(|f| f.1));
        v
    }

    /// Union children with their fixed flags.
    pub fn contact_children(&self) -> Vec<(DomainId, bool)> {
        let mut v = vec![(self.free, false)];
        v.extend(self.fixed.map(|f| (f.0, true)));
        v
    }
}

/// Affine body whose vertices sit at `A rest + t`, `rest` relative to the
/// body center.
pub struct AffineBody {
    pub a: AttrId,
    pub t: AttrId,
    pub verts: DomainId,
    pub pos: AttrId,
    pub rest: Vec<f64>,
}

impl AffineBody {
    pub fn new(scene: &mut Scene, name: &str, pts: &[f64]) -> Result<AffineBody> {
        let n = pts.len() / 3;
        let mut c = [0.0; 3];
        for p in pts.chunks(3) {
            for k in 0..3 {
                c[k] += p[k] / n as f64;
            }
        }
        let rest: Vec<f64> = pts.chunks(3).flat_map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
        let mesh = scene.add_mesh(name)?;
        let body = scene.add_primitive(mesh, "body", 1, false)?;
        let a = scene.add_data(body, "affine", Shape::new(3, 3), true)?;
        let t = scene.add_data(body, "translation", Shape::vec3(), true)?;
        scene.update_value(a, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
        scene.update_value(t, &c)?;
        scene.add_minimize_target(a)?;
        scene.add_minimize_target(t)?;
        let verts = scene.add_primitive(mesh, "vertices", n, false)?;
        let rp = scene.add_constant(verts, "rest_position", Shape::vec3(), &rest)?;
        let vb = scene.add_connectivity(verts, "body", body, vec![0; n], 1)?;
        let ja = scene.join(vb, a)?;
        let jt = scene.join(vb, t)?;
        let rpn = scene.node(rp)?;
        let g = &mut scene.expr;
        let am = g.reshape(ja, Shape::new(3, 3))?;
        let tt = g.reshape(jt, Shape::vec3())?;
        let ar = g.matmul(am, rpn)?;
        let p = g.add(ar, tt)?;
        let pos = scene.add_computed("position", p)?;
        Ok(AffineBody { a, t, verts, pos, rest })
    }

    /// Per-vertex inertia on the computed vertex positions.
    pub fn dynamics(&self, scene: &mut Scene, name: &str, vertex_mass: f64) -> Result<Predictor> {
        let n = self.rest.len() / 3;
        let ma = scene.add_constant(self.verts, "mass", Shape::SCALAR, &vec![vertex_mass; n])?;
        let x0 = evaluate(scene, self.pos)?.data;
        let xt = scene.add_constant(self.verts, "x_tilde", Shape::vec3(), &x0)?;
        let e = energy::inertia(scene, &format!("{name}_inertia"), self.pos, xt, ma)?;
        scene.add_energy(e)?;
        Ok(Predictor::Affine { a: self.a, t: self.t, rest: self.rest.clone(), x_tilde: xt })
    }
}

/// Contact union over `(domain, object, fixed)` members with a dynamic pair
/// primitive and its barrier.
pub fn contact(scene: &mut Scene, members: &[(DomainId, usize, bool)], kappa: f64, dhat: f64, dt: f64) -> Result<Contact> {
    let mesh = scene.add_mesh("contact")?;
    let children: Vec<DomainId> = members.iter().map(|m| m.0).collect();
    let union = scene.add_primitive_union(mesh, "points", &children)?;
    let pos = scene.add_unioned(union, "position")?;
    let mut object = Vec::new();
    let mut fixed = Vec::new();
    for &(d, o, f) in members {
        let n = scene.domain(d).count();
        object.extend(std::iter::repeat(o).take(n));
        fixed.extend(std::iter::repeat(f).take(n));
    }
    let pairs = scene.add_primitive(mesh, "pairs", 0, true)?;
    let conn = scene.add_connectivity(pairs, "points", union, Vec::new(), 2)?;
    let e = energy::barrier(scene, "barrier", Elements { domain: pairs, conn, pos }, kappa, dhat * dhat, dt * dt)?;
    scene.add_energy(e)?;
    Ok(Contact { union, pos, pairs, conn, object, fixed, dhat })
}

fn tet_masses(pts: &[f64], tets: &[usize], density: f64) -> Vec<f64> {
    let mut m = vec![0.0; pts.len() / 3];
    for t in tets.chunks(4) {
        let p = |k: usize| &pts[3 * t[k]..3 * t[k] + 3];
        let e: Vec<[f64; 3]> = (1..4).map(|k| [p(k)[0] - p(0)[0], p(k)[1] - p(0)[1], p(k)[2] - p(0)[2]]).collect();
        let det = e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1]) - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0])
            + e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0]);
        for &v in t {
            m[v] += density * det.abs() / 24.0;
        }
    }
    m
}

fn tri_masses(pts: &[f64], tris: &[[usize; 3]], areal: f64) -> Vec<f64> {
    let mut m = vec![0.0; pts.len() / 3];
    for t in tris {
        let p = |k: usize| &pts[3 * t[k]..3 * t[k] + 3];
        let u: Vec<f64> = (0..3).map(|i| p(1)[i] - p(0)[i]).collect();
        let v: Vec<f64> = (0..3).map(|i| p(2)[i] - p(0)[i]).collect();
        let c = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let area = 0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        for &k in t {
            m[k] += areal * area / 3.0;
        }
    }
    m
}

/// Seeded uniform perturbation in `[-amp, amp]` on every coordinate, or in
/// `[-amp, 0]` on `axis` alone.
fn jitter(pts: &mut [f64], seed: u64, amp: f64, axis: Option<usize>) {
    if amp == 0.0 {
        return;
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in pts.chunks_mut(3) {
        for (k, c) in p.iter_mut().enumerate() {
            match axis {
                Some(a) if a == k => *c -= r.gen_range(0.0..amp),
                Some(_) => {}
                None => *c += r.gen_range(-amp..amp),
            }
        }
    }
}

/// Hanging sheet of springs pinned at two corners.
fn mass_spring(cfg: &SimConfig) -> Result<Built> {
    let p = &cfg.params;
    let n = p.resolution.unwrap_or(10);
    let h = p.spacing.unwrap_or(1.0 / n as f64);
    let (mut pts, tris) = cloth_grid(n, h, [0.0; 3]);
    let rest = pts.clone();
    jitter(&mut pts, cfg.seed, p.jitter.unwrap_or(0.0), None);
    let mut scene = Scene::new("mass_spring");
    let mut fixed = vec![false; pts.len() / 3];
    fixed[0] = true;
    fixed[n] = true;
    let cloth = Object::new(&mut scene, "sheet", &pts, &fixed)?;
    let springs = cloth_springs(n);
    let el = cloth.elements(&mut scene, "springs", &springs, 2)?;
    let k = p.spring_stiffness.unwrap_or(1e3);
    let e = energy::spring(&mut scene, "springs", el, &union_rest(&cloth, &rest), k, cfg.dt * cfg.dt)?;
    scene.add_energy(e)?;
    let mass = tri_masses(&rest, &tris, p.density.unwrap_or(1.0));
    let pred = cloth.dynamics(&mut scene, &mass, p.gravity.unwrap_or(9.81), cfg.dt)?;
    Ok(Built { scene, contact: None, predictors: vec![pred], initial_velocity: Vec::new(), outputs: cloth.outputs() })
}

fn union_rest(o: &Object, rest: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rest.len()];
    for (v, &u) in o.map.iter().enumerate() {
        out[3 * u..3 * u + 3].copy_from_slice(&rest[3 * v..3 * v + 3]);
    }
    out
}

/// An affine cube moving head-on into a soft block whose back face is
/// fixed; the facing vertex lattices are aligned and start inside the
/// activation distance.
fn abd_contact(cfg: &SimConfig) -> Result<Built> {
    let p = &cfg.params;
    let n = p.block_resolution.unwrap_or(2);
    let h = p.spacing.unwrap_or(0.1);
    // Point-point contact only: a distance below the lattice spacing lets
    // vertices slip between their neighbors.
    let dhat = p.dhat.unwrap_or(h);
    let density = p.density.unwrap_or(1000.0);
    let dt2 = cfg.dt * cfg.dt;
    let mut scene = Scene::new("abd_contact");

    let (rest, tets) = tet_grid(n, h, [0.0; 3]);
    let mut pts = rest.clone();
    jitter(&mut pts, cfg.seed, p.jitter.unwrap_or(0.0), None);
    let fixed: Vec<bool> = rest.chunks(3).map(|q| q[0] == 0.0).collect();
    let soft = Object::new(&mut scene, "soft", &pts, &fixed)?;
    let el = soft.elements(&mut scene, "tets", &tets, 4)?;
    let lame = Lame::from_young_poisson(p.young.unwrap_or(2e5), p.poisson.unwrap_or(0.3));
    let e = energy::stable_neo_hookean(&mut scene, "soft_elasticity", el, &union_rest(&soft, &rest), lame, dt2)?;
    scene.add_energy(e)?;
    let pred_soft = soft.dynamics(&mut scene, &tet_masses(&rest, &tets, density), p.gravity.unwrap_or(0.0), cfg.dt)?;

    let side = n as f64 * h;
    let (cube_pts, _) = tet_grid(n, h, [side + 0.9 * dhat, 0.0, 0.0]);
    let cube = AffineBody::new(&mut scene, "cube", &cube_pts)?;
    let nv = cube_pts.len() / 3;
    let pred_cube = cube.dynamics(&mut scene, "cube", density * side.powi(3) / nv as f64)?;
    let e = energy::affine_orthogonality(&mut scene, "cube_orthogonality", cube.a, p.orthogonality_stiffness.unwrap_or(1e4), dt2)?;
    scene.add_energy(e)?;

    let mut members: Vec<(DomainId, usize, bool)> = soft.contact_children().into_iter().map(|(d, f)| (d, 0, f)).collect();
    members.push((cube.verts, 1, false));
    let c = contact(&mut scene, &members, p.kappa.unwrap_or(1e5), dhat, cfg.dt)?;
    let speed = p.speed.unwrap_or(2.0);
    let mut outputs = soft.outputs();
    outputs.push(cube.pos);
    Ok(Built {
        scene,
        contact: Some(c),
        predictors: vec![pred_soft, pred_cube],
        initial_velocity: vec![(cube.t, vec![-speed, 0.0, 0.0])],
        outputs,
    })
}

/// A soft tet block resting just above a cloth patch with a fixed border.
fn tet_on_cloth(cfg: &SimConfig) -> Result<Built> {
    let p = &cfg.params;
    let n = p.resolution.unwrap_or(10);
    let nb = p.block_resolution.unwrap_or(2).min(n);
    let h = p.spacing.unwrap_or(0.05);
    let dhat = p.dhat.unwrap_or(h);
    let gravity = p.gravity.unwrap_or(9.81);
    let dt2 = cfg.dt * cfg.dt;
    let mut scene = Scene::new("tet_on_cloth");

    let (rest, tris) = cloth_grid(n, h, [0.0; 3]);
    let mut pts = rest.clone();
    // Flat hinges have no bending gradient; a rumpled start avoids them.
    jitter(&mut pts, cfg.seed, p.jitter.unwrap_or(0.0).min(0.25 * dhat), Some(1));
    let fixed: Vec<bool> = (0..pts.len() / 3).map(|v| v % (n + 1) == 0 || v % (n + 1) == n || v / (n + 1) == 0 || v / (n + 1) == n).collect();
    let cloth = Object::new(&mut scene, "cloth", &pts, &fixed)?;
    let urest = union_rest(&cloth, &rest);
    let springs = cloth_springs(n);
    let el = cloth.elements(&mut scene, "springs", &springs, 2)?;
    let e = energy::spring(&mut scene, "cloth_springs", el, &urest, p.spring_stiffness.unwrap_or(2e3), dt2)?;
    scene.add_energy(e)?;
    let kb = p.bending_stiffness.unwrap_or(0.0);
    if kb > 0.0 {
        let hg = hinges(&tris);
        let el = cloth.elements(&mut scene, "hinges", &hg, 4)?;
        let e = energy::bending(&mut scene, "cloth_bending", el, &urest, kb, dt2)?;
        scene.add_energy(e)?;
    }
    let pred_cloth = cloth.dynamics(&mut scene, &tri_masses(&rest, &tris, 0.4), gravity, cfg.dt)?;

    let c0 = ((n - nb) / 2) as f64 * h;
    let (brest, tets) = tet_grid(nb, h, [c0, 0.5 * dhat, c0]);
    let block = Object::new(&mut scene, "block", &brest, &vec![false; brest.len() / 3])?;
    let el = block.elements(&mut scene, "tets", &tets, 4)?;
    let lame = Lame::from_young_poisson(p.young.unwrap_or(1e5), p.poisson.unwrap_or(0.3));
    let e = energy::stable_neo_hookean(&mut scene, "block_elasticity", el, &union_rest(&block, &brest), lame, dt2)?;
    scene.add_energy(e)?;
    let pred_block = block.dynamics(&mut scene, &tet_masses(&brest, &tets, p.density.unwrap_or(1000.0)), gravity, cfg.dt)?;

    let mut members: Vec<(DomainId, usize, bool)> = cloth.contact_children().into_iter().map(|(d, f)| (d, 0, f)).collect();
    members.push((block.free, 1, false));
    let c = contact(&mut scene, &members, p.kappa.unwrap_or(1e6), dhat, cfg.dt)?;
    let mut outputs = cloth.outputs();
    outputs.extend(block.outputs());
    Ok(Built { scene, contact: Some(c), predictors: vec![pred_cloth, pred_block], initial_velocity: Vec::new(), outputs })
}
