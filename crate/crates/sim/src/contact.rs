//! Proximity activation for point-point barrier pairs.

use relsym::eval::{evaluate_node, ModuleCache};
use relsym::{AttrId, ConnId, DomainId, Scene};

use crate::error::Result;

/// Contact points gathered in one primitive union, with a dynamic pair
/// primitive connected to it.
#[derive(Clone, Debug)]
pub struct Contact {
    pub union: DomainId,
    /// Unioned `position` attribute.
    pub pos: AttrId,
    pub pairs: DomainId,
    pub conn: ConnId,
    /// Object id of each union instance; pairs never join one object.
    pub object: Vec<usize>,
    pub fixed: Vec<bool>,
    /// Activation distance, not squared.
    pub dhat: f64,
}

/// All pairs `a < b` closer than `radius`, skipping pairs inside one object
/// and pairs of two fixed points.  Returned flat as `[a0, b0, a1, b1, ...]`.
pub fn candidate_pairs(points: &[f64], object: &[usize], fixed: &[bool], radius: f64) -> Vec<usize> {
    let n = points.len() / 3;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for a in 0..n {
        let pa = &points[3 * a..3 * a + 3];
        for b in a + 1..n {
            if object[a] == object[b] || (fixed[a] && fixed[b]) {
                continue;
            }
            let pb = &points[3 * b..3 * b + 3];
            let d2: f64 = (0..3).map(|k| (pb[k] - pa[k]) * (pb[k] - pa[k])).sum();
            if d2 < r2 {
                out.extend_from_slice(&[a, b]);
            }
        }
    }
    out
}

impl Contact {
    pub fn positions(&self, scene: &Scene) -> Result<Vec<f64>> {
        let node = scene.node(self.pos)?;
        Ok(evaluate_node(scene, &mut ModuleCache::new(), node)?.data)
    }

    pub fn active_pairs(&self, scene: &Scene) -> usize {
        scene.domain(self.pairs).count()
    }

    /// Repopulates the pair primitive from the current positions; the scene
    /// is left untouched when the pair set is unchanged.  Returns the pair
    /// count.
    pub fn refresh(&self, scene: &mut Scene) -> Result<usize> {
        let pts = self.positions(scene)?;
        let pairs = candidate_pairs(&pts, &self.object, &self.fixed, self.dhat);
        let n = pairs.len() / 2;
        if n != self.active_pairs(scene) || scene.connectivity(self.conn).indices != pairs {
            scene.resize_dynamic(self.pairs, n, &[(self.conn, pairs)])?;
        }
        Ok(n)
    }
}
