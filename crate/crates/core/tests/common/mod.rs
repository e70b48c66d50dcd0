#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relsym::assembly::{Assembler, AssemblyOptions};
use relsym::energy::{self, Elements, Lame};
use relsym::expr::{unpick, Op, ZERO_PICK};
use relsym::scene::{ConnId, DomainId, DomainKind};
use relsym::{AttrId, HostId, NodeId, Scene, Shape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn min_eig(d: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(n, n, d);
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn dense_matvec(d: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| d[i * n + j] * x[j]).sum()).collect()
}

// ---------------------------------------------------------------------------
// Scene builders

pub struct Built {
    pub scene: Scene,
    pub label: String,
}

fn jitter<R: Rng>(r: &mut R, x: &mut [f64], amp: f64) {
    for v in x {
        *v += r.gen_range(-amp..amp);
    }
}

/// Points far enough apart that `1/d` terms stay tame.
pub fn spread_points<R: Rng>(r: &mut R, n: usize, min_dist: f64) -> Vec<f64> {
    let mut pts: Vec<[f64; 3]> = Vec::new();
    while pts.len() < n {
        let p = [r.gen_range(0.0..1.5), r.gen_range(0.0..1.5), r.gen_range(0.0..1.5)];
        if pts.iter().all(|q| dist(p, *q) > min_dist) {
            pts.push(p);
        }
    }
    pts.concat()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn random_pairs<R: Rng>(r: &mut R, n: usize, count: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while out.len() < 2 * count {
        let a = r.gen_range(0..n);
        let b = r.gen_range(0..n);
        if a != b {
            out.push(a);
            out.push(b);
        }
    }
    out
}

pub struct Cloud {
    pub mesh: relsym::MeshId,
    pub verts: DomainId,
    pub pos: AttrId,
}

pub fn cloud(scene: &mut Scene, name: &str, pts: &[f64]) -> Cloud {
    let mesh = scene.add_mesh(name).unwrap();
    let verts = scene.add_primitive(mesh, "vertices", pts.len() / 3, false).unwrap();
    let pos = scene.add_data(verts, "position", Shape::vec3(), true).unwrap();
    scene.update_value(pos, pts).unwrap();
    scene.add_minimize_target(pos).unwrap();
    Cloud { mesh, verts, pos }
}

pub fn pair_elements(scene: &mut Scene, c: &Cloud, name: &str, pairs: Vec<usize>, dynamic: bool) -> Elements {
    let n = pairs.len() / 2;
    let d = scene.add_primitive(c.mesh, name, if dynamic { 0 } else { n }, dynamic).unwrap();
    let conn = if dynamic {
        let conn = scene.add_connectivity(d, "pv", c.verts, Vec::new(), 2).unwrap();
        scene.resize_dynamic(d, n, &[(conn, pairs)]).unwrap();
        conn
    } else {
        scene.add_connectivity(d, "pv", c.verts, pairs, 2).unwrap()
    };
    Elements { domain: d, conn, pos: c.pos }
}

pub fn repulsive_scene(seed: u64) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("repulsive");
    let n = r.gen_range(6..14);
    let pts = spread_points(&mut r, n, 0.25);
    let c = cloud(&mut scene, "cloud", &pts);
    let count = r.gen_range(5..20);
    let pairs = random_pairs(&mut r, n, count);
    let el = pair_elements(&mut scene, &c, "pairs", pairs, false);
    let e = energy::repulsive(&mut scene, "repulsive", el, r.gen_range(0.5..2.0)).unwrap();
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("repulsive/{seed}") }
}

pub fn barrier_scene(seed: u64) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("barrier");
    let n = r.gen_range(6..14);
    let pts = spread_points(&mut r, n, 0.3);
    let c = cloud(&mut scene, "cloud", &pts);
    let count = r.gen_range(5..20);
    let pairs = random_pairs(&mut r, n, count);
    let mut d2: Vec<f64> = pairs
        .chunks(2)
        .map(|p| {
            let a = [pts[3 * p[0]], pts[3 * p[0] + 1], pts[3 * p[0] + 2]];
            let b = [pts[3 * p[1]], pts[3 * p[1] + 1], pts[3 * p[1] + 2]];
            dist(a, b).powi(2)
        })
        .collect();
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Roughly half of the pairs inside the activation distance.
    let dhat = d2[d2.len() / 2] * 1.05;
    let el = pair_elements(&mut scene, &c, "pp", pairs, true);
    let e = energy::barrier(&mut scene, "barrier", el, r.gen_range(1.0..10.0), dhat, 1.0).unwrap();
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("barrier/{seed}") }
}

/// Regular grid of `nx x ny x nz` cubes, 6 tets per cube.
pub fn tet_grid(nx: usize, ny: usize, nz: usize, h: f64) -> (Vec<f64>, Vec<usize>) {
    let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut pts = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                pts.extend_from_slice(&[i as f64 * h, j as f64 * h, k as f64 * h]);
            }
        }
    }
    let mut tets = Vec::new();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |b: [usize; 3]| id(i + b[0], j + b[1], k + b[2]);
                for p in perms {
                    let mut c = [0usize; 3];
                    let mut tet = vec![corner(c)];
                    for ax in p {
                        c[ax] = 1;
                        tet.push(corner(c));
                    }
                    tets.extend(tet);
                }
            }
        }
    }
    (pts, tets)
}

pub struct TetMesh {
    pub cloud: Cloud,
    pub tets: Elements,
    pub rest: Vec<f64>,
}

pub fn tet_mesh(scene: &mut Scene, name: &str, nx: usize, ny: usize, nz: usize, h: f64, deform: &mut dyn FnMut(&mut [f64])) -> TetMesh {
    let (rest, tets) = tet_grid(nx, ny, nz, h);
    let mut pts = rest.clone();
    deform(&mut pts);
    let c = cloud(scene, name, &pts);
    let td = scene.add_primitive(c.mesh, "tets", tets.len() / 4, false).unwrap();
    let conn = scene.add_connectivity(td, "tv", c.verts, tets, 4).unwrap();
    TetMesh { tets: Elements { domain: td, conn, pos: c.pos }, cloud: c, rest }
}

fn random_deformation<R: Rng>(r: &mut R, amp: f64) -> impl FnMut(&mut [f64]) + '_ {
    let mut a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    jitter(r, &mut a, 0.2);
    move |x: &mut [f64]| {
        for p in x.chunks_mut(3) {
            let q = [p[0], p[1], p[2]];
            for i in 0..3 {
                p[i] = a[3 * i] * q[0] + a[3 * i + 1] * q[1] + a[3 * i + 2] * q[2];
            }
        }
        jitter(r, x, amp);
    }
}

pub fn nh_scene(seed: u64, f_variant: bool) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("nh");
    let (nx, ny) = (r.gen_range(1..3), r.gen_range(1..3));
    let mut r2 = rng(seed ^ 0x9e37);
    let mut def = random_deformation(&mut r2, 0.03);
    let tm = tet_mesh(&mut scene, "block", nx, ny, 1, 0.5, &mut def);
    let lame = Lame { mu: r.gen_range(0.5..2.0), lambda: r.gen_range(1.0..5.0) };
    let e = if f_variant {
        energy::stable_neo_hookean_f(&mut scene, "nh", tm.tets, &tm.rest, lame, 1.0).unwrap()
    } else {
        energy::stable_neo_hookean(&mut scene, "nh", tm.tets, &tm.rest, lame, 1.0).unwrap()
    };
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("nh{}/{seed}", if f_variant { "-F" } else { "" }) }
}

pub struct Affine {
    pub body: DomainId,
    pub a: AttrId,
    pub t: AttrId,
    pub verts: DomainId,
    pub pos: AttrId,
}

/// Affine bodies sharing one vertex primitive per body; `position` of each
/// vertex is `A rest + t`.
pub fn affine_body(scene: &mut Scene, mesh: relsym::MeshId, name: &str, rest: &[f64], a: [f64; 9], t: [f64; 3]) -> Affine {
    let body = scene.add_primitive(mesh, &format!("{name}_body"), 1, false).unwrap();
    let av = scene.add_data(body, "affine", Shape::new(3, 3), true).unwrap();
    let tv = scene.add_data(body, "translation", Shape::vec3(), true).unwrap();
    scene.update_value(av, &a).unwrap();
    scene.update_value(tv, &t).unwrap();
    let n = rest.len() / 3;
    let verts = scene.add_primitive(mesh, &format!("{name}_vertices"), n, false).unwrap();
    let rp = scene.add_constant(verts, "rest_position", Shape::vec3(), rest).unwrap();
    let vb = scene.add_connectivity(verts, "body", body, vec![0; n], 1).unwrap();
    let ja = scene.join(vb, av).unwrap();
    let jt = scene.join(vb, tv).unwrap();
    let rpn = scene.node(rp).unwrap();
    let g = &mut scene.expr;
    let am = g.reshape(ja, Shape::new(3, 3)).unwrap();
    let tt = g.reshape(jt, Shape::vec3()).unwrap();
    let ar = g.matmul(am, rpn).unwrap();
    let p = g.add(ar, tt).unwrap();
    let pos = scene.add_computed("position", p).unwrap();
    Affine { body, a: av, t: tv, verts, pos }
}

pub fn random_affine<R: Rng>(r: &mut R, amp: f64) -> [f64; 9] {
    let mut a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    jitter(r, &mut a, amp);
    a
}

pub fn orthogonality_scene(seed: u64) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("affine");
    let mesh = scene.add_mesh("bodies").unwrap();
    let n = r.gen_range(1..4);
    let body = scene.add_primitive(mesh, "bodies", n, false).unwrap();
    let av = scene.add_data(body, "affine", Shape::new(3, 3), true).unwrap();
    let vals: Vec<f64> = (0..n).flat_map(|_| random_affine(&mut r, 0.3)).collect();
    scene.update_value(av, &vals).unwrap();
    scene.add_minimize_target(av).unwrap();
    let e = energy::affine_orthogonality(&mut scene, "orthogonality", av, r.gen_range(1.0..10.0), 1.0).unwrap();
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("orthogonality/{seed}") }
}

/// Triangulated `n x n` grid of quads in the xy plane.
pub fn cloth_grid(n: usize, h: f64) -> (Vec<f64>, Vec<[usize; 3]>) {
    let id = |i: usize, j: usize| i + (n + 1) * j;
    let mut pts = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            pts.extend_from_slice(&[i as f64 * h, j as f64 * h, 0.0]);
        }
    }
    let mut tris = Vec::new();
    for j in 0..n {
        for i in 0..n {
            tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    (pts, tris)
}

/// Hinges `(v0, v1, v2, v3)` over interior edges: triangles `(v0, v1, v2)` and
/// `(v1, v0, v3)` share the edge `v0-v1` with consistent orientation.
pub fn hinges(tris: &[[usize; 3]]) -> Vec<usize> {
    use std::collections::HashMap;
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out = Vec::new();
    for t in tris {
        for e in 0..3 {
            let (a, b, c) = (t[e], t[(e + 1) % 3], t[(e + 2) % 3]);
            if let Some(&opp) = edges.get(&(b, a)) {
                out.extend_from_slice(&[a, b, c, opp]);
            } else {
                edges.insert((a, b), c);
            }
        }
    }
    out
}

pub fn bending_scene(seed: u64) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("bending");
    let n = r.gen_range(2..4);
    let (rest, tris) = cloth_grid(n, 0.4);
    let mut pts = rest.clone();
    for p in pts.chunks_mut(3) {
        p[0] += r.gen_range(-0.03..0.03);
        p[1] += r.gen_range(-0.03..0.03);
        p[2] += r.gen_range(-0.1..0.1);
    }
    let c = cloud(&mut scene, "cloth", &pts);
    let hv = hinges(&tris);
    let hd = scene.add_primitive(c.mesh, "hinges", hv.len() / 4, false).unwrap();
    let conn = scene.add_connectivity(hd, "hv", c.verts, hv, 4).unwrap();
    let el = Elements { domain: hd, conn, pos: c.pos };
    let e = energy::bending(&mut scene, "bending", el, &rest, r.gen_range(0.5..2.0), 1.0).unwrap();
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("bending/{seed}") }
}

pub fn angular_scene(seed: u64) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("angular");
    let mesh = scene.add_mesh("chain").unwrap();
    let n = r.gen_range(3..10);
    let links = scene.add_primitive(mesh, "links", n, false).unwrap();
    let th = scene.add_data(links, "angle", Shape::SCALAR, true).unwrap();
    let vals: Vec<f64> = (0..n).map(|_| r.gen_range(-1.5..1.5)).collect();
    scene.update_value(th, &vals).unwrap();
    scene.add_minimize_target(th).unwrap();
    let joints = scene.add_primitive(mesh, "joints", n - 1, false).unwrap();
    let idx: Vec<usize> = (0..n - 1).flat_map(|i| [i, i + 1]).collect();
    let conn = scene.add_connectivity(joints, "jl", links, idx, 2).unwrap();
    let rest: Vec<f64> = (0..n - 1).map(|_| r.gen_range(-0.5..0.5)).collect();
    let e = energy::angular_spring(&mut scene, "angular", joints, conn, th, &rest, r.gen_range(1.0..5.0), 1.0).unwrap();
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("angular/{seed}") }
}

pub fn inertia_scene(seed: u64) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("inertia");
    let n = r.gen_range(3..20);
    let pts: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let c = cloud(&mut scene, "cloud", &pts);
    let tilde: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mass: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..2.0)).collect();
    let xt = scene.add_constant(c.verts, "x_tilde", Shape::vec3(), &tilde).unwrap();
    let m = scene.add_constant(c.verts, "mass", Shape::SCALAR, &mass).unwrap();
    let e = energy::inertia(&mut scene, "inertia", c.pos, xt, m).unwrap();
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("inertia/{seed}") }
}

pub struct Mixed {
    pub union: DomainId,
    pub upos: AttrId,
    pub pp: DomainId,
    pub conn: ConnId,
    pub bodies: Vec<Affine>,
    pub free: Cloud,
}

/// Free vertices plus two affine bodies, all under one primitive union with
/// a dynamic pair primitive on top.
pub fn mixed_contact<R: Rng>(r: &mut R, scene: &mut Scene, free_n: usize, body_n: usize) -> Mixed {
    let pts = spread_points(r, free_n, 0.2);
    let free = cloud(scene, "soft", &pts);
    let mesh = scene.add_mesh("rigid").unwrap();
    let mut bodies = Vec::new();
    for b in 0..2 {
        let rest: Vec<f64> = spread_points(r, body_n, 0.2).iter().map(|x| x * 0.5).collect();
        let t = [2.0 + b as f64 * 1.5, r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2)];
        let a = random_affine(r, 0.1);
        let body = affine_body(scene, mesh, &format!("b{b}"), &rest, a, t);
        scene.add_minimize_target(body.a).unwrap();
        scene.add_minimize_target(body.t).unwrap();
        bodies.push(body);
    }
    let um = scene.add_mesh("contact").unwrap();
    let union = scene.add_primitive_union(um, "all", &[free.verts, bodies[0].verts, bodies[1].verts]).unwrap();
    let upos = scene.add_unioned(union, "position").unwrap();
    let pp = scene.add_primitive(um, "pp", 0, true).unwrap();
    let conn = scene.add_connectivity(pp, "pv", union, Vec::new(), 2).unwrap();
    Mixed { union, upos, pp, conn, bodies, free }
}

/// Branch and local index of every union instance.
pub fn union_members(scene: &Scene, union: DomainId) -> Vec<(usize, usize)> {
    let n = scene.domain(union).count();
    (0..n).map(|g| scene.union_decode(union, g).unwrap()).collect()
}

pub fn mixed_scene(seed: u64, kind: &str) -> Built {
    let mut r = rng(seed);
    let mut scene = Scene::new("mixed");
    let (free_n, body_n) = (r.gen_range(3..6), r.gen_range(2..4));
    let m = mixed_contact(&mut r, &mut scene, free_n, body_n);
    let members = union_members(&scene, m.union);
    let n = members.len();
    let mut pairs = Vec::new();
    while pairs.len() < 2 * 12 {
        let a = r.gen_range(0..n);
        let b = r.gen_range(0..n);
        let (ba, bb) = (members[a].0, members[b].0);
        if a != b && (ba == 0 || ba != bb) {
            pairs.extend_from_slice(&[a, b]);
        }
    }
    let count = pairs.len() / 2;
    scene.resize_dynamic(m.pp, count, &[(m.conn, pairs)]).unwrap();
    let el = Elements { domain: m.pp, conn: m.conn, pos: m.upos };
    let e = match kind {
        "barrier" => energy::barrier(&mut scene, "barrier", el, 2.0, 9.0, 1.0).unwrap(),
        _ => energy::repulsive(&mut scene, "repulsive", el, 1.0).unwrap().dynamic(true),
    };
    scene.add_energy(e).unwrap();
    Built { scene, label: format!("mixed-{kind}/{seed}") }
}

/// Every bundled energy family, one random scene per seed.
pub fn families() -> Vec<(&'static str, fn(u64) -> Built)> {
    vec![
        ("repulsive", repulsive_scene as fn(u64) -> Built),
        ("barrier", barrier_scene),
        ("stable-nh", |s| nh_scene(s, false)),
        ("stable-nh-F", |s| nh_scene(s, true)),
        ("affine-orthogonality", orthogonality_scene),
        ("bending", bending_scene),
        ("angular-spring", angular_scene),
        ("inertia", inertia_scene),
        ("mixed-repulsive", |s| mixed_scene(s, "repulsive")),
        ("mixed-barrier", |s| mixed_scene(s, "barrier")),
    ]
}

// ---------------------------------------------------------------------------
// Finite differences

pub fn fd_gradient(asm: &Assembler, scene: &mut Scene, h: f64) -> Vec<f64> {
    let x0 = asm.layout.gather(scene);
    let mut g = vec![0.0; x0.len()];
    let mut x = x0.clone();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        asm.layout.scatter(scene, &x).unwrap();
        let ep = asm.energy(scene).unwrap();
        x[i] = x0[i] - h;
        asm.layout.scatter(scene, &x).unwrap();
        let em = asm.energy(scene).unwrap();
        x[i] = x0[i];
        g[i] = (ep - em) / (2.0 * h);
    }
    asm.layout.scatter(scene, &x0).unwrap();
    g
}

/// Row-major dense FD Hessian from central differences of the gradient.
pub fn fd_hessian(asm: &mut Assembler, scene: &mut Scene, h: f64) -> Vec<f64> {
    let x0 = asm.layout.gather(scene);
    let n = x0.len();
    let mut out = vec![0.0; n * n];
    let mut x = x0.clone();
    for j in 0..n {
        x[j] = x0[j] + h;
        asm.layout.scatter(scene, &x).unwrap();
        asm.assemble_gradient(scene, false).unwrap();
        let gp = asm.gradient.clone();
        x[j] = x0[j] - h;
        asm.layout.scatter(scene, &x).unwrap();
        asm.assemble_gradient(scene, false).unwrap();
        let gm = asm.gradient.clone();
        x[j] = x0[j];
        for i in 0..n {
            out[i * n + j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    asm.layout.scatter(scene, &x0).unwrap();
    out
}

pub const SERIAL_RAW: AssemblyOptions = AssemblyOptions { parallel: false, project: false };
pub const SERIAL_PROJECTED: AssemblyOptions = AssemblyOptions { parallel: false, project: true };

/// Brute-force dense scatter of every instance's (compressed) local Hessian,
/// static group first, then dynamic.
pub fn brute_force_dense(asm: &Assembler, scene: &Scene, opts: AssemblyOptions) -> Vec<f64> {
    let n = asm.dim();
    let mut parts = [vec![0.0; n * n], vec![0.0; n * n]];
    for (k, e) in asm.energies.iter().enumerate() {
        if e.bundle.gradient.is_none() {
            continue;
        }
        let count = scene.host_count(e.host);
        for i in 0..count {
            let local = asm.local(scene, k, i, opts).unwrap();
            let (_, pat) = asm.pattern(k, i);
            let mut coord = vec![0usize; pat.m];
            for (b, &(start, len)) in pat.blocks.iter().enumerate() {
                for t in 0..len {
                    coord[pat.offsets[b] + t] = start + t;
                }
            }
            let d = &mut parts[e.dynamic as usize];
            for a in 0..pat.m {
                for b in 0..pat.m {
                    d[coord[a] * n + coord[b]] += local.hessian[a * pat.m + b];
                }
            }
        }
    }
    let [s, d] = parts;
    s.iter().zip(&d).map(|(a, b)| (0.0 + a) + b).collect()
}

/// Brute-force dense gradient from uncompressed local gradients and slots.
pub fn brute_force_gradient(asm: &Assembler, scene: &Scene) -> Vec<f64> {
    let mut g = vec![0.0; asm.dim()];
    for (k, e) in asm.energies.iter().enumerate() {
        if e.bundle.gradient.is_none() {
            continue;
        }
        for i in 0..scene.host_count(e.host) {
            let local = asm.local(scene, k, i, SERIAL_RAW).unwrap();
            let (slots, _) = asm.pattern(k, i);
            for s in slots.iter().filter(|s| s.index != 0) {
                for t in 0..s.len as usize {
                    g[s.index as usize - 1 + t] += local.gradient[s.col as usize + t];
                }
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Tree-walk interpreter, independent of the plan compiler.

pub fn interpret(scene: &Scene, node: NodeId, instance: usize) -> Vec<f64> {
    let g = &scene.expr;
    let n = g.node(node);
    let ch = |k: usize, inst: usize| interpret(scene, n.children[k], inst);
    let s = n.shape;
    match &n.op {
        Op::Const(v) => vec![*v],
        Op::Literal(v) => v.to_vec(),
        Op::Zero => vec![0.0; s.size()],
        Op::Data(a) | Op::Constant(a) => {
            let at = scene.attribute(*a);
            let inst = if matches!(at.host, HostId::Domain(_)) { instance } else { 0 };
            let k = at.shape.size();
            scene.values(*a)[inst * k..(inst + 1) * k].to_vec()
        }
        Op::Add => zip(ch(0, instance), ch(1, instance), |a, b| a + b),
        Op::Sub => zip(ch(0, instance), ch(1, instance), |a, b| a - b),
        Op::Neg => ch(0, instance).iter().map(|x| -x).collect(),
        Op::Mul => zip(ch(0, instance), ch(1, instance), |a, b| a * b),
        Op::Div => zip(ch(0, instance), ch(1, instance), |a, b| a / b),
        Op::MatMul => {
            let (sa, sb) = (g.shape(n.children[0]), g.shape(n.children[1]));
            let a = DMatrix::from_row_slice(sa.rows, sa.cols, &ch(0, instance));
            let b = DMatrix::from_row_slice(sb.rows, sb.cols, &ch(1, instance));
            row_major(&(a * b))
        }
        Op::Dot => vec![ch(0, instance).iter().zip(ch(1, instance)).map(|(a, b)| a * b).sum()],
        Op::Cross => {
            let (a, b) = (ch(0, instance), ch(1, instance));
            vec![a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
        }
        Op::Norm => vec![frob(&ch(0, instance))],
        Op::Det => {
            let k = g.shape(n.children[0]).rows;
            vec![DMatrix::from_row_slice(k, k, &ch(0, instance)).determinant()]
        }
        Op::Inverse => {
            let k = g.shape(n.children[0]).rows;
            row_major(&DMatrix::from_row_slice(k, k, &ch(0, instance)).try_inverse().unwrap())
        }
        Op::Transpose => {
            let sa = g.shape(n.children[0]);
            row_major(&DMatrix::from_row_slice(sa.rows, sa.cols, &ch(0, instance)).transpose())
        }
        Op::Trace => {
            let k = g.shape(n.children[0]).rows;
            let a = ch(0, instance);
            vec![(0..k).map(|i| a[i * k + i]).sum()]
        }
        Op::Reshape => ch(0, instance),
        Op::Row(i) => {
            let c = g.shape(n.children[0]).cols;
            ch(0, instance)[i * c..(i + 1) * c].to_vec()
        }
        Op::Col(j) => {
            let sa = g.shape(n.children[0]);
            let a = ch(0, instance);
            (0..sa.rows).map(|i| a[i * sa.cols + j]).collect()
        }
        Op::Index(i) => {
            let k = s.size();
            ch(0, instance)[i * k..(i + 1) * k].to_vec()
        }
        Op::Stack => (0..n.children.len()).map(|k| ch(k, instance)[0]).collect(),
        Op::Sqrt => ch(0, instance).iter().map(|x| x.sqrt()).collect(),
        Op::Log => ch(0, instance).iter().map(|x| x.ln()).collect(),
        Op::Exp => ch(0, instance).iter().map(|x| x.exp()).collect(),
        Op::Sin => ch(0, instance).iter().map(|x| x.sin()).collect(),
        Op::Cos => ch(0, instance).iter().map(|x| x.cos()).collect(),
        Op::Select(c) => {
            let (a, b) = (ch(0, instance)[0], ch(1, instance)[0]);
            let take = match c {
                relsym::expr::Cmp::Lt => a < b,
                relsym::expr::Cmp::Le => a <= b,
                relsym::expr::Cmp::Gt => a > b,
                relsym::expr::Cmp::Ge => a >= b,
            };
            if take {
                ch(2, instance)
            } else {
                ch(3, instance)
            }
        }
        Op::Join(c) => {
            let conn = scene.connectivity(*c);
            conn.row(instance).iter().flat_map(|&j| ch(0, j)).collect()
        }
        Op::Union(d) => {
            let (j, i) = scene.union_decode(*d, instance).unwrap();
            ch(j, i)
        }
        Op::Gather(picks) => {
            let vals: Vec<Vec<f64>> = (0..n.children.len()).map(|k| ch(k, instance)).collect();
            picks
                .iter()
                .map(|&p| {
                    if p == ZERO_PICK {
                        0.0
                    } else {
                        let (c, f) = unpick(p);
                        vals[c][f]
                    }
                })
                .collect()
        }
        Op::Project => {
            let k = s.rows;
            let m = DMatrix::from_row_slice(k, k, &ch(0, instance));
            let m = (&m + m.transpose()) * 0.5;
            let e = m.clone().try_symmetric_eigen(1e-15, 10_000).unwrap();
            if e.eigenvalues.iter().all(|&x| x >= 0.0) {
                return row_major(&m);
            }
            let l = e.eigenvalues.map(|x| x.max(0.0));
            row_major(&(&e.eigenvectors * DMatrix::from_diagonal(&l) * e.eigenvectors.transpose()))
        }
    }
}

fn zip(a: Vec<f64>, b: Vec<f64>, f: fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n).map(|i| f(a[if a.len() == 1 { 0 } else { i }], b[if b.len() == 1 { 0 } else { i }])).collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn interpret_all(scene: &Scene, node: NodeId) -> Vec<f64> {
    let host = scene.expr.host(node);
    (0..scene.host_count(host)).flat_map(|i| interpret(scene, node, i)).collect()
}

pub fn is_union(scene: &Scene, d: DomainId) -> bool {
    matches!(scene.domain(d).kind, DomainKind::Union { .. })
}

pub struct Cage {
    pub scene: Scene,
    pub cages: Cloud,
    pub samples: DomainId,
}

/// Four cubic cages of 8 free vertices; samples are trilinear blends of their
/// cage, and every stencil repels 4 samples taken from 4 distinct cages.
pub fn cage_scene(seed: u64, request: relsym::ProjectionRequest) -> Cage {
    let mut r = rng(seed);
    let mut scene = Scene::new("cage");
    let mut pts = Vec::new();
    for c in 0..4 {
        let origin = [c as f64 * 1.5, (c % 2) as f64 * 0.7, 0.0];
        for k in 0..8 {
            for ax in 0..3 {
                let bit = (k >> ax) & 1;
                pts.push(origin[ax] + bit as f64 + r.gen_range(-0.05..0.05));
            }
        }
    }
    let cages = cloud(&mut scene, "cages", &pts);
    let per = 3;
    let samples = scene.add_primitive(cages.mesh, "samples", 4 * per, false).unwrap();
    let mut idx = Vec::new();
    let mut weights = Vec::new();
    for c in 0..4 {
        for _ in 0..per {
            idx.extend((0..8).map(|k| 8 * c + k));
            let w = energy::trilinear_weights(r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.1..0.9));
            weights.extend_from_slice(&w);
        }
    }
    let sc = scene.add_connectivity(samples, "cage", cages.verts, idx, 8).unwrap();
    let spos = energy::cage_blend(&mut scene, "position", samples, sc, cages.pos, &weights).unwrap();
    let n_st = 5;
    let stencils = scene.add_primitive(cages.mesh, "stencils", n_st, false).unwrap();
    let sidx: Vec<usize> = (0..n_st).flat_map(|_| (0..4).map(|c| c * per + r.gen_range(0..per)).collect::<Vec<_>>()).collect();
    let stc = scene.add_connectivity(stencils, "ss", samples, sidx, 4).unwrap();
    let el = Elements { domain: stencils, conn: stc, pos: spos };
    let e = energy::stencil_repulsion(&mut scene, "stencil", el, 1.0).unwrap().projection(request);
    scene.add_energy(e).unwrap();
    Cage { scene, cages, samples }
}
