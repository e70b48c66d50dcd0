mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use relsym::assembly::Assembler;
use relsym::diff::{detect_linearity, find_boundary_pairs, BoundaryKind};
use relsym::energy::{self, Elements, Lame};
use relsym::eval::{evaluate_node, ModuleCache};
use relsym::{Differentiator, ProjectionMode, ProjectionRequest, Scene, Shape};

fn eval(scene: &Scene, node: relsym::NodeId) -> Vec<f64> {
    evaluate_node(scene, &mut ModuleCache::new(), node).unwrap().data
}

#[test]
fn boundary_graph_of_tet_energy() {
    let Built { scene, .. } = nh_scene(0, false);
    let root = scene.node(scene.energies()[0].root).unwrap();
    let targets = scene.targets().to_vec();
    let bg = find_boundary_pairs(&scene.expr, root, &targets);
    assert_eq!(bg.root_succ.len(), 1);
    let j = bg.root_succ[0];
    assert_eq!(bg.kinds[&j], BoundaryKind::Join);
    assert_eq!(bg.succ[&j], vec![scene.node(targets[0]).unwrap()]);
    assert_eq!(bg.num_edges(), 2);
    assert!(bg.dump(&scene.expr).starts_with("root "));
}

#[test]
fn boundary_graph_through_union() {
    let Built { scene, .. } = mixed_scene(1, "repulsive");
    let root = scene.node(scene.energies()[0].root).unwrap();
    let targets = scene.targets().to_vec();
    let bg = find_boundary_pairs(&scene.expr, root, &targets);
    let j = bg.root_succ[0];
    let u = bg.succ[&j][0];
    assert_eq!(bg.kinds[&u], BoundaryKind::Union);
    let branches = &bg.branch_succ[&u];
    assert_eq!(branches.len(), 3);
    assert_eq!(branches[0].len(), 1);
    assert_eq!(bg.kinds[&branches[0][0]], BoundaryKind::Data);
    for b in &branches[1..] {
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|n| bg.kinds[n] == BoundaryKind::Join));
    }
    // No targets, no boundaries.
    let empty = find_boundary_pairs(&scene.expr, root, &[]);
    assert!(empty.is_empty());
}

fn m_union(scene: &Scene) -> relsym::DomainId {
    let mesh = scene.find_mesh("contact").unwrap();
    scene.find_domain(mesh, "all").unwrap()
}

#[test]
fn pair_of_scaled_input() {
    let mut scene = Scene::new("p");
    let c = cloud(&mut scene, "m", &[1.0, 2.0, 3.0]);
    let u = scene.node(c.pos).unwrap();
    let v = scene.expr.scale(2.0, u).unwrap();
    let mut d = Differentiator::new(&[c.pos]);
    let ld = d.differentiate_pair(&mut scene.expr, v, &[u]).unwrap();
    assert_eq!((ld.p, ld.q), (3, 3));
    assert_eq!(eval(&scene, ld.jacobian), vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]);
    assert!(scene.expr.is_zero(ld.hessian));
    let n = d.num_cached_pairs();
    d.differentiate_pair(&mut scene.expr, v, &[u]).unwrap();
    assert_eq!(d.num_cached_pairs(), n);
}

#[test]
fn pair_of_determinant_at_identity() {
    let mut scene = Scene::new("det");
    let mesh = scene.add_mesh("m").unwrap();
    let body = scene.add_primitive(mesh, "body", 1, false).unwrap();
    let a = scene.add_data(body, "a", Shape::new(3, 3), true).unwrap();
    scene.update_value(a, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let u = scene.node(a).unwrap();
    let v = scene.expr.det(u).unwrap();
    let ld = Differentiator::new(&[a]).differentiate_pair(&mut scene.expr, v, &[u]).unwrap();
    assert_eq!((ld.p, ld.q), (1, 9));
    assert_eq!(eval(&scene, ld.jacobian), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    // d2 det / dA00 dA11 = A22 = 1.
    let h = eval(&scene, ld.hessian);
    assert_eq!(h.len(), 81);
    assert_eq!(h[4], 1.0);
    assert_eq!(h[0], 0.0);
}

#[test]
fn pair_of_repulsive_energy() {
    let mut scene = Scene::new("rep");
    let c = cloud(&mut scene, "m", &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let el = pair_elements(&mut scene, &c, "pairs", vec![0, 1], false);
    let e = energy::repulsive(&mut scene, "rep", el, 1.0).unwrap();
    let root = scene.node(e.root).unwrap();
    let mut d = Differentiator::new(&[c.pos]);
    let bg = d.boundary_graph(&scene.expr, root);
    let ld = d.differentiate_pair(&mut scene.expr, root, &bg.root_succ).unwrap();
    assert_eq!((ld.p, ld.q), (1, 6));
    let j = eval(&scene, ld.jacobian);
    assert_eq!(j, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
}

#[test]
fn linearity_examples() {
    let mut scene = Scene::new("lin");
    let c = cloud(&mut scene, "m", &[0.0; 3]);
    let k = scene.add_constant(c.verts, "k", Shape::vec3(), &[1.0, 2.0, 3.0]).unwrap();
    let m = scene.add_constant(c.verts, "m", Shape::new(3, 3), &[1.0; 9]).unwrap();
    let (x, kn, mn) = (scene.node(c.pos).unwrap(), scene.node(k).unwrap(), scene.node(m).unwrap());
    let g = &mut scene.expr;
    let t = [c.pos];
    let ax = g.matmul(mn, x).unwrap();
    let affine = g.add(ax, kn).unwrap();
    assert!(detect_linearity(g, affine, &t));
    let scaled = g.scale(3.0, x).unwrap();
    let tr = g.transpose(scaled).unwrap();
    assert!(detect_linearity(g, tr, &t));
    let half = g.constant(2.0);
    let div = g.div(x, half).unwrap();
    assert!(detect_linearity(g, div, &t));
    let x0 = g_index(g, x);
    let inv = g.div(half, x0).unwrap();
    assert!(!detect_linearity(g, inv, &t));
    let s = g.sin(x).unwrap();
    assert!(!detect_linearity(g, s, &t));
    let xx = g.mul(x0, x).unwrap();
    assert!(!detect_linearity(g, xx, &t));
    let n = g.norm(x).unwrap();
    assert!(!detect_linearity(g, n, &t));
    // Everything is linear in an empty target set.
    assert!(detect_linearity(g, n, &[]));
}

fn g_index(g: &mut relsym::ExprGraph, x: relsym::NodeId) -> relsym::NodeId {
    g.index(x, 0).unwrap()
}

#[test]
fn join_derivative_is_zero_off_referenced_instances() {
    let mut scene = Scene::new("j");
    let c = cloud(&mut scene, "m", &[0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 1.0, 0.5, 0.0]);
    let el = pair_elements(&mut scene, &c, "pairs", vec![0, 2], false);
    let e = energy::repulsive(&mut scene, "rep", el, 1.0).unwrap();
    scene.add_energy(e).unwrap();
    let mut asm = Assembler::new(&mut scene).unwrap();
    asm.assemble(&scene, SERIAL_RAW).unwrap();
    assert_eq!(&asm.gradient[3..6], &[0.0; 3]);
    assert!(asm.gradient[..3].iter().any(|&g| g != 0.0));
    let h = asm.dense_hessian();
    for i in 0..9 {
        for j in 3..6 {
            assert_eq!(h[i * 9 + j], 0.0);
        }
    }
}

#[test]
fn union_padding_is_exact_zero() {
    let Built { mut scene, .. } = mixed_scene(2, "repulsive");
    let asm = Assembler::new(&mut scene).unwrap();
    let e = &asm.energies[0];
    assert_eq!(e.bundle.dim, 24);
    let grad = eval(&scene, e.bundle.gradient.unwrap());
    let u = m_union(&scene);
    let pp = scene.find_domain(scene.find_mesh("contact").unwrap(), "pp").unwrap();
    let conn = scene.find_connectivity(pp, "pv").unwrap();
    let mut checked = 0;
    for i in 0..scene.domain(pp).count() {
        let row = scene.connectivity(conn).row(i).to_vec();
        let g = &grad[24 * i..24 * (i + 1)];
        for (k, &m) in row.iter().enumerate() {
            if scene.union_decode(u, m).unwrap().0 == 0 {
                assert!(g[12 * k + 3..12 * (k + 1)].iter().all(|&v| v == 0.0));
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn chained_regions_match_single_region() {
    let m = Lame { mu: 0.7, lambda: 2.5 };
    for seed in 0..5 {
        let build = |f_variant: bool| {
            let mut r = rng(seed);
            let mut scene = Scene::new("chain");
            let mut jit = |x: &mut [f64]| {
                for v in x.iter_mut() {
                    *v += r.gen_range(-0.05..0.05);
                }
            };
            let tm = tet_mesh(&mut scene, "b", 2, 1, 1, 0.5, &mut jit);
            let e = if f_variant {
                energy::stable_neo_hookean_f(&mut scene, "nh", tm.tets, &tm.rest, m, 1.0)
            } else {
                energy::stable_neo_hookean(&mut scene, "nh", tm.tets, &tm.rest, m, 1.0)
            }
            .unwrap();
            scene.add_energy(e.projection(ProjectionRequest::None)).unwrap();
            scene
        };
        let (mut a, mut b) = (build(false), build(true));
        let (aa, ab) = (Assembler::new(&mut a).unwrap(), Assembler::new(&mut b).unwrap());
        for i in 0..a.host_count(aa.energies[0].host) {
            let la = aa.local(&a, 0, i, SERIAL_RAW).unwrap();
            let lb = ab.local(&b, 0, i, SERIAL_RAW).unwrap();
            assert!(rel_err(&lb.gradient, &la.gradient) <= 1e-12, "seed {seed} tet {i}");
            assert!(rel_err(&lb.hessian, &la.hessian) <= 1e-12, "seed {seed} tet {i}: {:e}", rel_err(&lb.hessian, &la.hessian));
        }
    }
}

#[test]
fn projection_rewrite_modes() {
    let Built { mut scene, .. } = nh_scene(4, true);
    let asm = Assembler::new(&mut scene).unwrap();
    assert_eq!(asm.energies[0].bundle.mode, ProjectionMode::ReducedProject);
    let mut scene = Scene::new("none");
    let c = cloud(&mut scene, "m", &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let el = pair_elements(&mut scene, &c, "pairs", vec![0, 1], false);
    let e = energy::repulsive(&mut scene, "rep", el, 1.0).unwrap();
    scene.add_energy(e.projection(ProjectionRequest::None)).unwrap();
    let asm = Assembler::new(&mut scene).unwrap();
    assert_eq!(asm.energies[0].bundle.mode, ProjectionMode::None);
}

#[test]
fn constant_energy_has_no_derivatives() {
    let mut scene = Scene::new("c");
    let c = cloud(&mut scene, "m", &[0.0; 3]);
    let k = scene.add_constant(c.verts, "k", Shape::SCALAR, &[4.0]).unwrap();
    let root = scene.node(k).unwrap();
    let b = Differentiator::new(&[c.pos]).bundle(&mut scene.expr, root, ProjectionRequest::Auto).unwrap();
    assert_eq!((b.dim, b.gradient, b.mode), (0, None, ProjectionMode::None));
    let x = scene.node(c.pos).unwrap();
    assert!(Differentiator::new(&[c.pos]).bundle(&mut scene.expr, x, ProjectionRequest::Auto).is_err());
}

fn tet_scene(pts: &[f64]) -> Scene {
    let rest = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut scene = Scene::new("tet");
    let c = cloud(&mut scene, "m", pts);
    let t = scene.add_primitive(c.mesh, "tets", 1, false).unwrap();
    let conn = scene.add_connectivity(t, "tv", c.verts, vec![0, 1, 2, 3], 4).unwrap();
    let e = energy::stable_neo_hookean(&mut scene, "nh", Elements { domain: t, conn, pos: c.pos }, &rest, Lame { mu: 1.0, lambda: 10.0 }, 1.0)
        .unwrap();
    scene.add_energy(e).unwrap();
    scene
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reduced_projection_is_psd(noise in proptest::collection::vec(-0.6f64..0.6, 12)) {
        let base = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let pts: Vec<f64> = base.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let mut scene = tet_scene(&pts);
        let asm = Assembler::new(&mut scene).unwrap();
        prop_assert_eq!(asm.energies[0].bundle.mode, ProjectionMode::ReducedProject);
        let l = asm.local(&scene, 0, 0, SERIAL_PROJECTED).unwrap();
        let n = l.gradient.len();
        prop_assert!(min_eig(&l.hessian, n) >= -1e-10 * frob(&l.hessian).max(1.0));
    }
}
