//! Scenario files: TOML with one table per subsystem. Unknown keys are rejected
//! and every value is re-validated when the scenario is built.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dmp_refine::{CemSettings, RefTrajectory, DEFAULT_BASIS};
use crate::error::{Error, Result};
use crate::estimator::{DEFAULT_DELTA_ALPHA, DEFAULT_H_LIFT, DEFAULT_SAMPLES};
use crate::exec_loop::{WrenchPid, DEFAULT_DU_MAX, DEFAULT_KI, DEFAULT_KP};
use crate::friction::{ContactPatch, FrictionParams};
use crate::simplant::{Aabb, BoxModel, EnvironmentModel, DEFAULT_K_ENV};
use crate::spatial::{GravityVec, Pose6, Stiffness, STANDARD_GRAVITY};
use crate::wrench_opt::{GraspGeometry, WrenchWeight};

const AXES: [&str; 6] = ["x", "y", "z", "rx", "ry", "rz"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub half_extents: [f64; 3],
    pub base_mass: f64,
    pub added_mass: f64,
    pub added_mass_position: [f64; 3],
    /// Initial box center, resting.
    pub start: [f64; 3],
}

fn default_k_env() -> f64 {
    DEFAULT_K_ENV
}

fn default_gravity() -> f64 {
    STANDARD_GRAVITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    #[serde(default)]
    pub ground_height: f64,
    #[serde(default = "default_k_env")]
    pub k_env: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub shelves: Vec<Aabb>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspSection {
    /// Handles sit at `(-half_width, 0, 0)` and `(half_width, 0, 0)` in {B}.
    pub half_width: f64,
    /// Contact patch sides `a`, `b` [m].
    pub patch: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionSection {
    pub mu: f64,
    pub r_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessSection {
    pub translational: f64,
    pub rotational: f64,
    /// Plant stiffness relative to the controller's model.
    #[serde(default = "one")]
    pub plant_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    /// CSV with `t,x,y,z,rx,ry,rz`, relative to the scenario file.
    pub path: PathBuf,
    /// Diagonal of the tracking covariance; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_diag: Option<[f64; 6]>,
}

fn default_basis() -> usize {
    DEFAULT_BASIS
}

fn default_active() -> Vec<String> {
    vec!["y".into(), "z".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Section {
    #[serde(default = "default_basis")]
    pub n_basis: usize,
    #[serde(default = "default_active")]
    pub active_dims: Vec<String>,
    pub c: f64,
    pub rollouts: usize,
    pub elites: usize,
    pub eps_conv: f64,
    pub alpha_cost: f64,
    pub max_iter: usize,
}

impl Phase1Section {
    pub fn cem(&self) -> CemSettings {
        CemSettings {
            c: self.c,
            rollouts: self.rollouts,
            elites: self.elites,
            eps_conv: self.eps_conv,
            alpha_cost: self.alpha_cost,
            max_iter: self.max_iter,
        }
    }
}

impl Default for Phase1Section {
    fn default() -> Self {
        let cem = CemSettings::default();
        Self {
            n_basis: DEFAULT_BASIS,
            active_dims: default_active(),
            c: cem.c,
            rollouts: cem.rollouts,
            elites: cem.elites,
            eps_conv: cem.eps_conv,
            alpha_cost: cem.alpha_cost,
            max_iter: cem.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Section {
    pub samples: usize,
    pub h_lift: f64,
    pub delta_alpha: f64,
    /// Internal squeeze per handle during the lift ramp [N].
    pub squeeze: f64,
    pub sigma_f: f64,
    pub sigma_tau: f64,
}

impl Default for Phase2Section {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            h_lift: DEFAULT_H_LIFT,
            delta_alpha: DEFAULT_DELTA_ALPHA,
            squeeze: 40.0,
            sigma_f: 0.05,
            sigma_tau: 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase3Section {
    /// Characteristic length of the wrench weighting; the effective radius when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_c: Option<f64>,
    pub tol: f64,
}

impl Default for Phase3Section {
    fn default() -> Self {
        Self { l_c: None, tol: 1e-8 }
    }
}

fn default_pid_axes() -> Vec<String> {
    vec!["x".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionSection {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub du_max: f64,
    #[serde(default = "default_pid_axes")]
    pub pid_axes: Vec<String>,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self {
            kp: DEFAULT_KP,
            ki: DEFAULT_KI,
            kd: 0.0,
            du_max: DEFAULT_DU_MAX,
            pid_axes: default_pid_axes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(rename = "box")]
    pub box_: BoxSection,
    pub environment: EnvironmentSection,
    pub grasp: GraspSection,
    pub friction: FrictionSection,
    pub stiffness: StiffnessSection,
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub phase1: Phase1Section,
    #[serde(default)]
    pub phase2: Phase2Section,
    #[serde(default)]
    pub phase3: Phase3Section,
    #[serde(default)]
    pub execution: ExecutionSection,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }
}

fn axis_mask(names: &[String], what: &str) -> Result<[bool; 6]> {
    let mut mask = [false; 6];
    for n in names {
        let k = AXES
            .iter()
            .position(|a| a == n)
            .ok_or_else(|| Error::Scenario(format!("unknown {what} axis {n:?}; expected one of {AXES:?}")))?;
        mask[k] = true;
    }
    Ok(mask)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Scenario(msg()))
    }
}

/// A validated scenario with every domain object constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: BoxModel,
    pub env: EnvironmentModel,
    pub stiffness: Stiffness,
    pub plant_stiffness: Stiffness,
    pub friction: FrictionParams,
    pub geometry: GraspGeometry,
    pub weight: WrenchWeight,
    pub offsets: [Vector3<f64>; 2],
    pub start: Pose6,
    pub reference: RefTrajectory,
    pub active_dims: [bool; 6],
    pub pid: WrenchPid,
}

impl Scenario {
    /// Reads the scenario and the reference trajectory it points to.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
        let config = ScenarioConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::build(config, base)
    }

    /// Validates `config`; the trajectory path is resolved against `base`.
    pub fn build(config: ScenarioConfig, base: &Path) -> Result<Self> {
        let traj_path = base.join(&config.trajectory.path);
        let file = std::fs::File::open(&traj_path)
            .map_err(|e| Error::Scenario(format!("cannot read trajectory {}: {e}", traj_path.display())))?;
        let sigma = config
            .trajectory
            .sigma_diag
            .map(|d| Matrix6::from_diagonal(&Vector6::from_column_slice(&d)));
        let reference = RefTrajectory::read_csv(file, sigma)?;
        Self::with_reference(config, reference)
    }

    pub fn with_reference(config: ScenarioConfig, reference: RefTrajectory) -> Result<Self> {
        let b = &config.box_;
        let model = BoxModel::new(
            Vector3::from(b.half_extents),
            b.base_mass,
            b.added_mass,
            Vector3::from(b.added_mass_position),
        )?;
        let e = &config.environment;
        let env = EnvironmentModel::new(e.ground_height, e.shelves.clone(), e.k_env, GravityVec::new(e.gravity)?)?;
        let s = &config.stiffness;
        let stiffness = Stiffness::diagonal(s.translational, s.rotational)?;
        let plant_stiffness = stiffness.scaled(s.plant_scale)?;
        let patch = ContactPatch::new(config.grasp.patch[0], config.grasp.patch[1])?;
        let friction = FrictionParams::for_patch(config.friction.mu, config.friction.r_s, &patch)?;
        let w = config.grasp.half_width;
        check(w > 0.0 && w.is_finite(), || format!("grasp half_width must be positive, got {w}"))?;
        let geometry = GraspGeometry::symmetric(w, friction)?;
        let weight = WrenchWeight::new(config.phase3.l_c.unwrap_or(friction.effective_radius()))?;
        let offsets = [Vector3::new(-w, 0.0, 0.0), Vector3::new(w, 0.0, 0.0)];
        let start = Pose6::from_position(Vector3::from(b.start));
        check(start.is_finite(), || "non-finite start pose".into())?;

        let p1 = &config.phase1;
        check(p1.n_basis >= 2, || format!("phase1.n_basis must be at least 2, got {}", p1.n_basis))?;
        crate::dmp_refine::ExplorationState::new(p1.n_basis, &p1.cem())?;
        let active_dims = axis_mask(&p1.active_dims, "phase1")?;

        let p2 = &config.phase2;
        check(p2.samples > 0, || "phase2.samples must be positive".into())?;
        check(p2.h_lift > 0.0, || format!("phase2.h_lift must be positive, got {}", p2.h_lift))?;
        check(p2.delta_alpha > 0.0, || format!("phase2.delta_alpha must be positive, got {}", p2.delta_alpha))?;
        check(p2.squeeze >= 0.0, || format!("phase2.squeeze must be non-negative, got {}", p2.squeeze))?;
        check(p2.sigma_f >= 0.0 && p2.sigma_tau >= 0.0, || "noise levels must be non-negative".into())?;
        check(config.phase3.tol > 0.0, || format!("phase3.tol must be positive, got {}", config.phase3.tol))?;

        let x = &config.execution;
        let pid = WrenchPid::uniform(x.kp, x.ki, x.kd, x.du_max, axis_mask(&x.pid_axes, "execution")?)?;
        Ok(Self {
            config,
            model,
            env,
            stiffness,
            plant_stiffness,
            friction,
            geometry,
            weight,
            offsets,
            start,
            reference,
            active_dims,
            pid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seed = 7

[box]
half_extents = [0.15, 0.10, 0.10]
base_mass = 1.7
added_mass = 0.5
added_mass_position = [0.0902, 0.05016, 0.0]
start = [0.0, 0.45, 0.40]

[environment]
k_env = 1e5

[[environment.shelves]]
min = [-0.4, 0.2, 0.25]
max = [0.4, 0.7, 0.30]

[grasp]
half_width = 0.15
patch = [0.07, 0.10]

[friction]
mu = 0.4
r_s = 0.1

[stiffness]
translational = 1000.0
rotational = 10.0

[trajectory]
path = "ref.csv"

[phase1]
active_dims = ["y", "z"]
rollouts = 50
elites = 5
c = 1000.0
eps_conv = 0.01
alpha_cost = 0.2
max_iter = 500
"#;

    #[test]
    fn parses_with_defaults_and_round_trips() {
        let c = ScenarioConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.environment.gravity, 9.81);
        assert_eq!(c.phase2.samples, 50);
        assert_eq!(c.phase1.n_basis, 20);
        assert_eq!(c.execution.pid_axes, vec!["x".to_string()]);
        let text = c.to_toml().unwrap();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = SAMPLE.replace("r_s = 0.1", "r_s = 0.1\nmargin = 2");
        assert!(matches!(ScenarioConfig::from_toml(&bad), Err(Error::Scenario(_))));
        let bad = SAMPLE.replace("[phase1]", "[phase1]\nrollout = 3");
        assert!(ScenarioConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn builds_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let r = RefTrajectory::min_jerk(
            &Pose6::from_position(Vector3::new(0.0, 0.45, 0.41)),
            &Pose6::from_position(Vector3::new(0.0, -0.1, 0.45)),
            1.0,
            0.1,
        )
        .unwrap();
        r.write_csv(std::fs::File::create(dir.path().join("ref.csv")).unwrap()).unwrap();
        std::fs::write(dir.path().join("s.toml"), SAMPLE).unwrap();
        let s = Scenario::load(&dir.path().join("s.toml")).unwrap();
        assert_eq!(s.active_dims, [false, true, true, false, false, false]);
        assert!((s.weight.l_c() - 0.032828).abs() < 1e-5);
        assert_eq!(s.reference.len(), 11);

        let mut c = s.config.clone();
        c.friction.r_s = 1.0;
        assert!(Scenario::with_reference(c, r.clone()).is_err());
        let mut c = s.config.clone();
        c.phase1.active_dims = vec!["w".into()];
        assert!(Scenario::with_reference(c, r.clone()).is_err());
        let mut c = s.config.clone();
        c.phase1.elites = 60;
        assert!(Scenario::with_reference(c, r).is_err());
        assert!(Scenario::load(&dir.path().join("missing.toml")).is_err());
        std::fs::write(dir.path().join("t.toml"), SAMPLE.replace("ref.csv", "nope.csv")).unwrap();
        assert!(matches!(Scenario::load(&dir.path().join("t.toml")), Err(Error::Scenario(_))));
    }
}
