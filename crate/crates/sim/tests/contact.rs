use std::collections::BTreeSet;

use nalgebra::Vector3;
use proptest::prelude::*;
use relsym::Scene;
use relsym_sim::contact::candidate_pairs;
use relsym_sim::demos::{self, Built, Object};
use relsym_sim::{newton, Sim, SimConfig};

fn brute_force(points: &[f64], object: &[usize], fixed: &[bool], radius: f64) -> BTreeSet<(usize, usize)> {
    let p: Vec<Vector3<f64>> = points.chunks(3).map(Vector3::from_column_slice).collect();
    let mut out = BTreeSet::new();
    for a in 0..p.len() {
        for b in 0..p.len() {
            let allowed = object[a] != object[b] && !(fixed[a] && fixed[b]);
            if a < b && allowed && (p[a] - p[b]).norm() < radius {
                out.insert((a, b));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn candidates_match_brute_force(
        pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0usize..3, any::<bool>()), 0..40),
        radius in 0.01f64..1.0,
    ) {
        let points: Vec<f64> = pts.iter().flat_map(|p| [p.0, p.1, p.2]).collect();
        let object: Vec<usize> = pts.iter().map(|p| p.3).collect();
        let fixed: Vec<bool> = pts.iter().map(|p| p.4).collect();
        let flat = candidate_pairs(&points, &object, &fixed, radius);
        let got: Vec<(usize, usize)> = flat.chunks(2).map(|c| (c[0], c[1])).collect();
        let want: Vec<(usize, usize)> = brute_force(&points, &object, &fixed, radius).into_iter().collect();
        prop_assert_eq!(got, want);
    }
}

fn config() -> SimConfig {
    SimConfig::parse("scene = \"abd_contact\"\ndt = 0.01\nframes = 1\n").unwrap()
}

/// Two single-point objects `gap` apart along x.
fn two_points(gap: f64, dhat: f64) -> Built {
    let cfg = config();
    let mut scene = Scene::new("two");
    let a = Object::new(&mut scene, "a", &[0.0; 3], &[false]).unwrap();
    let b = Object::new(&mut scene, "b", &[gap, 0.0, 0.0], &[false]).unwrap();
    let pa = a.dynamics(&mut scene, &[1.0], 0.0, cfg.dt).unwrap();
    let pb = b.dynamics(&mut scene, &[1.0], 0.0, cfg.dt).unwrap();
    let members = [(a.free, 0, false), (b.free, 1, false)];
    let c = demos::contact(&mut scene, &members, 1e3, dhat, cfg.dt).unwrap();
    let mut outputs = a.outputs();
    outputs.extend(b.outputs());
    Built { scene, contact: Some(c), predictors: vec![pa, pb], initial_velocity: vec![], outputs }
}

#[test]
fn separated_points_have_no_pairs() {
    let sim = Sim::from_built(&config(), two_points(0.2, 0.1)).unwrap();
    assert_eq!(sim.active_pairs(), 0);
    assert_eq!(sim.minimizer.energy(&sim.scene).unwrap(), 0.0);
}

#[test]
fn close_points_activate_one_pair() {
    let mut sim = Sim::from_built(&config(), two_points(0.05, 0.1)).unwrap();
    assert_eq!(sim.active_pairs(), 1);
    let c = sim.contact.as_ref().unwrap();
    assert_eq!(sim.scene.connectivity(c.conn).indices, vec![0, 1]);
    let e = sim.minimizer.energy(&sim.scene).unwrap();
    assert!(e > 0.0, "barrier energy {e}");
    // The barrier pushes the points apart.
    let r = newton::step_frame(&mut sim, &config()).unwrap();
    assert!(r.converged);
    let x = sim.dofs();
    assert!(x[0] < 0.0 && x[3] > 0.05, "{x:?}");
}

#[test]
fn refresh_leaves_unchanged_pairs_alone() {
    let mut sim = Sim::from_built(&config(), two_points(0.05, 0.1)).unwrap();
    sim.minimizer.refresh(&sim.scene).unwrap();
    let before = sim.minimizer.assembler.dynamic_group.checksum();
    assert_eq!(sim.refresh_pairs().unwrap(), 1);
    assert!(!sim.minimizer.assembler.is_stale(&sim.scene));
    let mut x = sim.dofs();
    x[3] = 0.5;
    sim.set_dofs(&x).unwrap();
    assert_eq!(sim.refresh_pairs().unwrap(), 0);
    assert!(sim.minimizer.assembler.is_stale(&sim.scene));
    sim.minimizer.refresh(&sim.scene).unwrap();
    assert_ne!(sim.minimizer.assembler.dynamic_group.checksum(), before);
}

#[test]
fn demo_pairs_match_brute_force() {
    for name in ["abd_contact", "tet_on_cloth"] {
        let cfg = SimConfig::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("scenes/{name}.toml"))).unwrap();
        let mut sim = Sim::new(&cfg).unwrap();
        for _ in 0..5 {
            newton::step_frame(&mut sim, &cfg).unwrap();
        }
        let c = sim.contact.as_ref().unwrap();
        let pts = c.positions(&sim.scene).unwrap();
        let want = brute_force(&pts, &c.object, &c.fixed, c.dhat);
        let idx = &sim.scene.connectivity(c.conn).indices;
        let got: BTreeSet<(usize, usize)> = idx.chunks(2).map(|p| (p[0], p[1])).collect();
        assert_eq!(got, want, "{name}");
        assert!(!want.is_empty(), "{name}: no contact after 5 frames");
    }
}
