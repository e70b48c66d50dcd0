//! TOML run configuration.  See `scenes/mass_spring.toml` for a commented
//! example of every key.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Result, SimError};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Demo scene builder: `mass_spring`, `abd_contact` or `tet_on_cloth`.
    pub scene: String,
    pub dt: f64,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Leaves out wall-clock timings so every output file is reproducible.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default = "yes")]
    pub parallel: bool,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub line_search: LineSearchConfig,
    #[serde(default)]
    pub pcg: PcgConfig,
    #[serde(default)]
    pub params: SceneParams,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonConfig {
    /// Stop once `max |dx| / dt` drops below this.
    #[serde(default = "default_newton_tol")]
    pub tol: f64,
    #[serde(default = "default_newton_iter")]
    pub max_iter: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSearchConfig {
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcgConfig {
    /// Relative residual tolerance.
    #[serde(default = "default_pcg_tol")]
    pub tol: f64,
    /// 0 means the system size.
    #[serde(default)]
    pub max_iter: usize,
    /// `block_jacobi` or `identity`.
    #[serde(default = "default_preconditioner")]
    pub preconditioner: String,
}

/// Demo knobs; every field is optional and unused ones are ignored by the
/// scenes that have no such parameter.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub resolution: Option<usize>,
    pub block_resolution: Option<usize>,
    pub spacing: Option<f64>,
    pub density: Option<f64>,
    pub young: Option<f64>,
    pub poisson: Option<f64>,
    pub spring_stiffness: Option<f64>,
    pub bending_stiffness: Option<f64>,
    pub orthogonality_stiffness: Option<f64>,
    pub kappa: Option<f64>,
    /// Activation distance (not squared).
    pub dhat: Option<f64>,
    pub speed: Option<f64>,
    pub gravity: Option<f64>,
    /// Amplitude of the seeded perturbation applied to initial positions.
    pub jitter: Option<f64>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn yes() -> bool {
    true
}
fn default_newton_tol() -> f64 {
    1e-2
}
fn default_newton_iter() -> usize {
    100
}
fn default_halvings() -> usize {
    32
}
fn default_pcg_tol() -> f64 {
    1e-4
}
fn default_preconditioner() -> String {
    "block_jacobi".into()
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: default_newton_tol(), max_iter: default_newton_iter() }
    }
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig { max_halvings: default_halvings() }
    }
}

impl Default for PcgConfig {
    fn default() -> Self {
        PcgConfig { tol: default_pcg_tol(), max_iter: 0, preconditioner: default_preconditioner() }
    }
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        SimConfig::parse(&text).map_err(|e| match e {
            SimError::Config(m) => SimError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.newton.tol > 0.0) || !(self.pcg.tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.newton.max_iter == 0 {
            return bad("newton.max_iter must be at least 1".into());
        }
        if !matches!(self.pcg.preconditioner.as_str(), "block_jacobi" | "identity") {
            return bad(format!("unknown preconditioner '{}'", self.pcg.preconditioner));
        }
        if !crate::demos::SCENES.contains(&self.scene.as_str()) {
            return bad(format!("unknown scene '{}', expected one of {:?}", self.scene, crate::demos::SCENES));
        }
        let p = &self.params;
        for (k, v) in [("resolution", p.resolution), ("block_resolution", p.block_resolution)] {
            if v == Some(0) {
                return bad(format!("params.{k} must be at least 1"));
            }
        }
        let positive = [
            ("spacing", p.spacing),
            ("density", p.density),
            ("young", p.young),
            ("spring_stiffness", p.spring_stiffness),
            ("orthogonality_stiffness", p.orthogonality_stiffness),
            ("kappa", p.kappa),
            ("dhat", p.dhat),
        ];
        for (k, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("params.{k} must be positive, got {v}"));
                }
            }
        }
        if let Some(nu) = p.poisson {
            if !(0.0..0.5).contains(&nu) {
                return bad(format!("params.poisson must lie in [0, 0.5), got {nu}"));
            }
        }
        for (k, v) in [("bending_stiffness", p.bending_stiffness), ("jitter", p.jitter)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("params.{k} must be non-negative, got {v}"));
                }
            }
        }
        Ok(())
    }
}
