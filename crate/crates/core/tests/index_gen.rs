mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use relsym::assembly::Assembler;
use relsym::diff::{index_capacity, param_tree};
use relsym::energy::{self, Elements};
use relsym::index::partition_static_dynamic;
use relsym::{EnergyDecl, Error, GradientLayout, Param, PlacementIndices, ProjectionRequest, Scene, Shape};

#[test]
fn layout_free_vertices_plus_affine_body() {
    for n in [1, 5, 17] {
        let mut scene = Scene::new("s");
        let pts: Vec<f64> = (0..3 * n).map(|i| i as f64).collect();
        let c = cloud(&mut scene, "soft", &pts);
        let mesh = scene.add_mesh("rigid").unwrap();
        let b = affine_body(&mut scene, mesh, "b", &[0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], [0.0; 3]);
        let l = GradientLayout::build(&scene, &[c.pos, b.a, b.t]).unwrap();
        assert_eq!(l.total_dofs, 3 * n + 9 + 3);
        assert_eq!(l.boundaries, vec![0, 3 * n, 3 * n + 9, 3 * n + 12]);
    }
}

#[test]
fn layout_small_examples_and_errors() {
    let mut scene = Scene::new("s");
    let c = cloud(&mut scene, "m", &[0.0; 6]);
    let l = GradientLayout::build(&scene, &[c.pos]).unwrap();
    assert_eq!((l.boundaries.clone(), l.total_dofs), (vec![0, 6], 6));
    let mesh = scene.add_mesh("o").unwrap();
    let one = scene.add_primitive(mesh, "one", 1, false).unwrap();
    let a = scene.add_data(one, "a", Shape::new(3, 3), true).unwrap();
    let t = scene.add_data(one, "t", Shape::vec3(), true).unwrap();
    let k = scene.add_data(one, "k", Shape::vec3(), false).unwrap();
    assert_eq!(GradientLayout::build(&scene, &[a, t]).unwrap().boundaries, vec![0, 9, 12]);
    assert!(matches!(GradientLayout::build(&scene, &[a, a]), Err(Error::Validation(_))));
    assert!(GradientLayout::build(&scene, &[k]).is_err());
    assert!(GradientLayout::build(&scene, &[]).is_err());
}

#[test]
fn capacity_rules() {
    let mut scene = Scene::new("cap");
    let m = mixed_contact(&mut rng(1), &mut scene, 3, 2);
    let targets = scene.targets().to_vec();
    let free_pos = scene.node(m.free.pos).unwrap();
    let abd_pos = scene.node(m.bodies[0].pos).unwrap();
    let u = scene.node(m.upos).unwrap();
    assert_eq!(index_capacity(&scene.expr, free_pos, &targets), 1);
    assert_eq!(index_capacity(&scene.expr, abd_pos, &targets), 2);
    assert_eq!(index_capacity(&scene.expr, u, &targets), 2);
    let j = scene.join(m.conn, m.upos).unwrap();
    assert_eq!(index_capacity(&scene.expr, j, &targets), 4);
    let dummy = scene.expr.constant(2.0);
    assert_eq!(index_capacity(&scene.expr, dummy, &targets), 0);

    let mut scene = Scene::new("nh");
    let mut id = |_: &mut [f64]| {};
    let tm = tet_mesh(&mut scene, "b", 1, 1, 1, 1.0, &mut id);
    let e = energy::stable_neo_hookean(&mut scene, "nh", tm.tets, &tm.rest, energy::Lame { mu: 1.0, lambda: 1.0 }, 1.0).unwrap();
    let root = scene.node(e.root).unwrap();
    assert_eq!(index_capacity(&scene.expr, root, &[tm.cloud.pos]), 4);
}

#[test]
fn placement_examples() {
    let mut scene = Scene::new("p");
    let c = cloud(&mut scene, "m", &[0.0; 15]);
    let layout = GradientLayout::build(&scene, &[c.pos]).unwrap();
    let data = Param::Data { attr: c.pos, len: 3 };
    assert_eq!(data.slots(&scene, &layout, 2).unwrap()[0].index, 7);
    let pairs = scene.add_primitive(c.mesh, "pairs", 1, false).unwrap();
    let conn = scene.add_connectivity(pairs, "pv", c.verts, vec![4, 1], 2).unwrap();
    let join = Param::Join { conn, arity: 2, child: Box::new(data.clone()) };
    let idx: Vec<u32> = join.slots(&scene, &layout, 0).unwrap().iter().map(|s| s.index).collect();
    assert_eq!(idx, vec![13, 4]);
    let bad = scene.add_primitive(c.mesh, "bad", 1, false).unwrap();
    let bc = scene.add_connectivity(bad, "pv", c.verts, vec![0, 1], 2).unwrap();
    let too_far = Param::Join { conn: bc, arity: 2, child: Box::new(data) };
    assert!(matches!(too_far.slots(&scene, &layout, 3), Err(Error::Range(_))));
}

#[test]
fn union_slot_is_zero_padded() {
    let mut scene = Scene::new("u");
    let m = mixed_contact(&mut rng(4), &mut scene, 4, 2);
    let targets = scene.targets().to_vec();
    let layout = GradientLayout::build(&scene, &targets).unwrap();
    let u = scene.node(m.upos).unwrap();
    let p = param_tree(&scene.expr, u, &targets);
    assert_eq!(p.capacity(), 2);
    assert_eq!(p.dim(), 12);
    // Free vertex 3 starts at 9, so its 1-based index is 10.
    let s = p.slots(&scene, &layout, 3).unwrap();
    assert_eq!((s[0].index, s[1].index), (10, 0));
    let g = scene.union_encode(m.union, 1, 0).unwrap();
    let s = p.slots(&scene, &layout, g).unwrap();
    let a0 = layout.start(m.bodies[0].a).unwrap();
    let t0 = layout.start(m.bodies[0].t).unwrap();
    assert_eq!((s[0].index as usize, s[0].len, s[1].index as usize, s[1].len), (a0 + 1, 9, t0 + 1, 3));
}

fn instance_fd_support(scene: &mut Scene, layout: &GradientLayout, root: relsym::NodeId, inst: usize) -> BTreeSet<usize> {
    let x0 = layout.gather(scene);
    let mut out = BTreeSet::new();
    let mut x = x0.clone();
    let h = 1e-5;
    for j in 0..x0.len() {
        x[j] = x0[j] + h;
        layout.scatter(scene, &x).unwrap();
        let ep = interpret(scene, root, inst)[0];
        x[j] = x0[j] - h;
        layout.scatter(scene, &x).unwrap();
        let em = interpret(scene, root, inst)[0];
        x[j] = x0[j];
        if ((ep - em) / (2.0 * h)).abs() > 1e-9 {
            out.insert(j);
        }
    }
    layout.scatter(scene, &x0).unwrap();
    out
}

#[test]
fn placement_indices_tile_gradient_support() {
    let mut builds: Vec<Built> = Vec::new();
    for seed in 0..3 {
        builds.push(repulsive_scene(seed));
        builds.push(nh_scene(seed, false));
        builds.push(nh_scene(seed, true));
        builds.push(orthogonality_scene(seed));
        builds.push(bending_scene(seed));
        builds.push(angular_scene(seed));
        builds.push(inertia_scene(seed));
        builds.push(mixed_scene(seed, "repulsive"));
    }
    builds.push(Built { scene: cage_scene(0, ProjectionRequest::Separated).scene, label: "cage".into() });
    for Built { mut scene, label } in builds {
        let asm = Assembler::new(&mut scene).unwrap();
        let layout = asm.layout.clone();
        for (k, e) in asm.energies.iter().enumerate() {
            let root = e.bundle.root;
            for i in 0..scene.host_count(e.host) {
                let (slots, _) = asm.pattern(k, i);
                let mut covered = BTreeSet::new();
                for s in slots.iter().filter(|s| s.is_active()) {
                    assert!(s.index as usize >= 1 && s.start() + s.len as usize <= layout.total_dofs);
                    covered.extend(s.start()..s.start() + s.len as usize);
                }
                let support = instance_fd_support(&mut scene, &layout, root, i);
                assert_eq!(covered, support, "{label} energy {k} instance {i}");
            }
        }
    }
}

#[test]
fn parallel_index_computation_equals_serial() {
    let Built { mut scene, .. } = nh_scene(3, false);
    let asm = Assembler::new(&mut scene).unwrap();
    let p = &asm.energies[0].bundle.param;
    let n = scene.host_count(asm.energies[0].host);
    let a = PlacementIndices::compute(&scene, &asm.layout, p, n, true).unwrap();
    let b = PlacementIndices::compute(&scene, &asm.layout, p, n, false).unwrap();
    assert_eq!(a, b);
    let csv = a.to_csv();
    assert!(csv.starts_with("instance,slots\n0,"));
    assert_eq!(csv.lines().count(), n + 1);
}

#[test]
fn partition_examples() {
    let Built { mut scene, .. } = inertia_scene(0);
    let (st, dy) = partition_static_dynamic(scene.energies());
    assert_eq!((st, dy.len()), (vec![0], 0));
    let asm = Assembler::new(&mut scene).unwrap();
    assert!(asm.dynamic_group.energies.is_empty());
    assert_eq!(asm.dynamic_group.hessian.num_blocks(), 0);

    let mut scene = Scene::new("split");
    let c = cloud(&mut scene, "m", &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let springs = pair_elements(&mut scene, &c, "springs", vec![0, 1], false);
    let s = energy::spring(&mut scene, "spring", springs, &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0], 1.0, 1.0).unwrap();
    scene.add_energy(s).unwrap();
    let pp = pair_elements(&mut scene, &c, "pp", vec![], true);
    let b = energy::barrier(&mut scene, "barrier", pp, 1.0, 0.1, 1.0).unwrap();
    scene.add_energy(b).unwrap();
    assert_eq!(partition_static_dynamic(scene.energies()), (vec![0], vec![1]));
    let mut asm = Assembler::new(&mut scene).unwrap();
    assert_eq!(asm.dynamic_group.indices[0].count(), 0);
    asm.assemble(&scene, SERIAL_PROJECTED).unwrap();
    assert!(asm.dynamic_group.hessian.hessian_blocks.is_empty());
    assert!(matches!(
        scene.add_energy(EnergyDecl::new("again", scene.attr(relsym::HostId::Domain(pp.domain), "barrier").unwrap())),
        Err(Error::Declaration(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capacity_bounds_hold_for_random_connectivity(
        n_free in 1usize..6,
        body_n in 1usize..4,
        raw in proptest::collection::vec((0usize..100, 0usize..100), 0..12),
    ) {
        let mut scene = Scene::new("fuzz");
        let m = mixed_contact(&mut rng(n_free as u64), &mut scene, n_free, body_n);
        let total = scene.domain(m.union).count();
        let pairs: Vec<usize> = raw.iter().flat_map(|&(a, b)| [a % total, b % total]).collect();
        scene.resize_dynamic(m.pp, raw.len(), &[(m.conn, pairs)]).unwrap();
        let targets = scene.targets().to_vec();
        let layout = GradientLayout::build(&scene, &targets).unwrap();
        let j = scene.join(m.conn, m.upos).unwrap();
        let p = param_tree(&scene.expr, j, &targets);
        prop_assert_eq!(p.capacity(), 4);
        let idx = PlacementIndices::compute(&scene, &layout, &p, raw.len(), true).unwrap();
        prop_assert_eq!(idx.slots.len(), 4 * raw.len());
        for s in idx.slots.iter().filter(|s| s.is_active()) {
            prop_assert!(s.start() + s.len as usize <= layout.total_dofs);
            prop_assert!((s.col as usize) + (s.len as usize) <= p.dim());
        }
        let serial = PlacementIndices::compute(&scene, &layout, &p, raw.len(), false).unwrap();
        prop_assert_eq!(idx, serial);
    }
}

#[test]
fn elements_helper_checks_conn_target() {
    let mut scene = Scene::new("x");
    let c = cloud(&mut scene, "m", &[0.0; 6]);
    let pairs = pair_elements(&mut scene, &c, "pairs", vec![0, 1], false);
    let wrong = Elements { domain: c.verts, ..pairs };
    assert!(energy::repulsive(&mut scene, "r", wrong, 1.0).is_err());
}
