//! Quasi-static plant surrogate: a rigid box held by two impedance-controlled
//! handles, under gravity, touching the environment through penalty springs
//! at its eight corners.

use nalgebra::{Matrix6, Rotation3, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{impedance_wrench, Frame, GravityVec, Pose6, Side, Stiffness, Wrench};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxModel {
    half_extents: Vector3<f64>,
    base_mass: f64,
    added_mass: f64,
    added_mass_position: Vector3<f64>,
}

impl BoxModel {
    pub fn new(
        half_extents: Vector3<f64>,
        base_mass: f64,
        added_mass: f64,
        added_mass_position: Vector3<f64>,
    ) -> Result<Self> {
        if !half_extents.iter().all(|&h| h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "box half extents must be positive, got {half_extents:?}"
            )));
        }
        if !(base_mass > 0.0) || !(added_mass >= 0.0) || !(base_mass + added_mass).is_finite() {
            return Err(Error::InvalidParameter(format!(
                "invalid masses: base {base_mass}, added {added_mass}"
            )));
        }
        if !added_mass_position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite added mass position".into()));
        }
        Ok(Self {
            half_extents,
            base_mass,
            added_mass,
            added_mass_position,
        })
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        self.half_extents
    }

    pub fn base_mass(&self) -> f64 {
        self.base_mass
    }

    pub fn added_mass(&self) -> f64 {
        self.added_mass
    }

    pub fn added_mass_position(&self) -> Vector3<f64> {
        self.added_mass_position
    }

    pub fn total_mass(&self) -> f64 {
        self.base_mass + self.added_mass
    }

    /// CoM in {B}; the empty box has its CoM at the geometric center.
    pub fn true_com(&self) -> Vector3<f64> {
        self.added_mass_position * (self.added_mass / self.total_mass())
    }

    /// Same mass, CoM at the geometric center.
    pub fn centered(&self) -> Self {
        Self::new(self.half_extents, self.total_mass(), 0.0, Vector3::zeros())
            .expect("derived from a valid model")
    }

    /// Corners in {B}.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.half_extents;
        std::array::from_fn(|k| {
            Vector3::new(
                if k & 1 == 0 { -h.x } else { h.x },
                if k & 2 == 0 { -h.y } else { h.y },
                if k & 4 == 0 { -h.z } else { h.z },
            )
        })
    }
}

/// Axis-aligned solid, e.g. a shelf board.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn validate(&self) -> Result<()> {
        if (0..3).all(|k| self.min[k] < self.max[k] && self.min[k].is_finite() && self.max[k].is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("degenerate box {self:?}")))
        }
    }

    /// Penetration depth (distance to the nearest face) and contact direction, if
    /// `p` is inside. The direction blends the outward normals of faces within a
    /// few `EDGE_BLEND` of the nearest one, so the force stays continuous across
    /// the diagonal planes behind edges.
    pub fn penetration(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        if (0..3).any(|k| p[k] <= self.min[k] || p[k] >= self.max[k]) {
            return None;
        }
        let faces: [(f64, Vector3<f64>); 6] = std::array::from_fn(|f| {
            let k = f / 2;
            let mut n = Vector3::zeros();
            if f % 2 == 0 {
                n[k] = 1.0;
                (self.max[k] - p[k], n)
            } else {
                n[k] = -1.0;
                (p[k] - self.min[k], n)
            }
        });
        let depth = faces.iter().map(|f| f.0).fold(f64::INFINITY, f64::min);
        let mut dir = Vector3::zeros();
        let mut total = 0.0;
        for (d, n) in faces {
            let w = (-(d - depth) / EDGE_BLEND).exp();
            dir += n * w;
            total += w;
        }
        Some((depth, dir / total))
    }
}

/// Length scale over which contact directions blend near box edges [m].
pub const EDGE_BLEND: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentModel {
    ground_height: f64,
    shelves: Vec<Aabb>,
    k_env: f64,
    gravity: GravityVec,
}

pub const DEFAULT_K_ENV: f64 = 1e5;

impl EnvironmentModel {
    pub fn new(ground_height: f64, shelves: Vec<Aabb>, k_env: f64, gravity: GravityVec) -> Result<Self> {
        if !(k_env > 0.0) || !k_env.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "environment stiffness must be positive, got {k_env}"
            )));
        }
        if !ground_height.is_finite() {
            return Err(Error::InvalidParameter("non-finite ground height".into()));
        }
        for s in &shelves {
            s.validate()?;
        }
        Ok(Self {
            ground_height,
            shelves,
            k_env,
            gravity,
        })
    }

    /// Ground plane only.
    pub fn open(ground_height: f64) -> Self {
        Self::new(ground_height, vec![], DEFAULT_K_ENV, GravityVec::standard())
            .expect("valid defaults")
    }

    pub fn ground_height(&self) -> f64 {
        self.ground_height
    }

    pub fn shelves(&self) -> &[Aabb] {
        &self.shelves
    }

    pub fn k_env(&self) -> f64 {
        self.k_env
    }

    pub fn gravity(&self) -> GravityVec {
        self.gravity
    }

    /// Penalty force on a point: `k_env * depth` along the outward surface normal.
    pub fn contact_force(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut f = Vector3::zeros();
        let ground_depth = self.ground_height - p.z;
        if ground_depth > 0.0 {
            f.z += self.k_env * ground_depth;
        }
        for s in &self.shelves {
            if let Some((depth, dir)) = s.penetration(p) {
                f += dir * (self.k_env * depth);
            }
        }
        f
    }
}

/// Handle pose rigidly attached at `offset` (in {B}) on a box at `box_pose`.
pub fn handle_pose(box_pose: &Pose6, offset: &Vector3<f64>) -> Pose6 {
    Pose6::new(
        box_pose.position + box_pose.rotation() * offset,
        box_pose.orientation,
    )
}

/// Measurement frame for handle wrenches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasurementFrame {
    /// Rotated with the full box orientation.
    Body,
    /// Rotated with the box yaw only, so gravity stays along `-z`.
    GravityAligned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub box_pose: Pose6,
    pub commands: [Pose6; 2],
    pub measured: [Pose6; 2],
    pub stiffness: Stiffness,
    pub attached: [bool; 2],
    /// Handle attachment points in {B}.
    pub offsets: [Vector3<f64>; 2],
}

impl PlantState {
    /// Box at rest at `box_pose`, handles attached and commanded to their current poses.
    pub fn new(box_pose: Pose6, offsets: [Vector3<f64>; 2], stiffness: Stiffness) -> Self {
        let measured = offsets.map(|r| handle_pose(&box_pose, &r));
        Self {
            box_pose,
            commands: measured,
            measured,
            stiffness,
            attached: [true; 2],
            offsets,
        }
    }

    /// Interaction wrench of one handle on the box, in world axes.
    pub fn handle_wrench(&self, side: Side) -> Wrench {
        let i = side.index();
        if !self.attached[i] {
            return Wrench::zero(Frame::World);
        }
        impedance_wrench(&self.commands[i], &self.measured[i], &self.stiffness, Frame::World)
    }

    fn frame_rotation(&self, frame: MeasurementFrame) -> Rotation3<f64> {
        match frame {
            MeasurementFrame::Body => self.box_pose.rotation(),
            MeasurementFrame::GravityAligned => {
                Rotation3::from_euler_angles(0.0, 0.0, self.box_pose.orientation.z)
            }
        }
    }

    /// Both handle wrenches re-expressed in the measurement frame (tagged `Frame::Box`).
    pub fn measured_wrenches(&self, frame: MeasurementFrame) -> [Wrench; 2] {
        let rt = self.frame_rotation(frame).inverse();
        Side::BOTH.map(|s| {
            let w = self.handle_wrench(s);
            Wrench::new(rt * w.force, rt * w.torque, Frame::Box)
        })
    }

    /// Contact points relative to the box center, in the measurement frame.
    pub fn lever_arms(&self, frame: MeasurementFrame) -> [Vector3<f64>; 2] {
        let rt = self.frame_rotation(frame).inverse();
        self.measured
            .map(|m| rt * (m.position - self.box_pose.position))
    }

    /// Total environment force on the box at its current pose.
    pub fn env_force(&self, model: &BoxModel, env: &EnvironmentModel) -> Vector3<f64> {
        let rot = self.box_pose.rotation();
        model
            .corners()
            .iter()
            .map(|c| env.contact_force(&(self.box_pose.position + rot * c)))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SettleSettings {
    pub force_tol: f64,
    pub moment_tol: f64,
    pub max_iter: usize,
}

impl Default for SettleSettings {
    fn default() -> Self {
        Self {
            force_tol: 1e-6,
            moment_tol: 1e-6,
            max_iter: 100,
        }
    }
}

/// Net force and net moment about the box center on a box at pose `q`.
fn net_wrench(q: &Vector6<f64>, state: &PlantState, model: &BoxModel, env: &EnvironmentModel) -> Vector6<f64> {
    let pose = Pose6::from_vector(q);
    let rot = pose.rotation();
    let weight = env.gravity().vector() * model.total_mass();
    let mut force = weight;
    let mut moment = (rot * model.true_com()).cross(&weight);
    for side in Side::BOTH {
        let i = side.index();
        if !state.attached[i] {
            continue;
        }
        let z = handle_pose(&pose, &state.offsets[i]);
        let w = impedance_wrench(&state.commands[i], &z, &state.stiffness, Frame::World);
        force += w.force;
        moment += (rot * state.offsets[i]).cross(&w.force) + w.torque;
    }
    for c in model.corners() {
        let arm = rot * c;
        let fc = env.contact_force(&(pose.position + arm));
        force += fc;
        moment += arm.cross(&fc);
    }
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&force);
    r.fixed_rows_mut::<3>(3).copy_from(&moment);
    r
}

/// Net force and moment on the box at the state's pose.
pub fn equilibrium_residual(state: &PlantState, model: &BoxModel, env: &EnvironmentModel) -> Vector6<f64> {
    net_wrench(&state.box_pose.to_vector(), state, model, env)
}

pub fn settle(state: &PlantState, model: &BoxModel, env: &EnvironmentModel) -> Result<PlantState> {
    settle_with(state, model, env, &SettleSettings::default())
}

/// Damped Newton on the box pose with a central-difference Jacobian of the net
/// wrench. Starts from the current pose; if that stalls (a contact releasing
/// makes the box snap), restarts from the pose at which the handle springs
/// are relaxed.
pub fn settle_with(
    state: &PlantState,
    model: &BoxModel,
    env: &EnvironmentModel,
    settings: &SettleSettings,
) -> Result<PlantState> {
    let warm = newton_settle(state.box_pose.to_vector(), state, model, env, settings);
    let q = match warm {
        Ok(q) => q,
        Err(e) => match relaxed_pose(state) {
            Some(start) => newton_settle(start.to_vector(), state, model, env, settings).map_err(|_| e)?,
            None => return Err(e),
        },
    };
    let mut out = state.clone();
    out.box_pose = Pose6::from_vector(&q);
    out.measured = out.offsets.map(|o| handle_pose(&out.box_pose, &o));
    Ok(out)
}

/// Box pose that puts the attached handles exactly at their commands, averaged over handles.
fn relaxed_pose(state: &PlantState) -> Option<Pose6> {
    let attached: Vec<usize> = (0..2).filter(|&i| state.attached[i]).collect();
    if attached.is_empty() {
        return None;
    }
    let mut acc = Vector6::zeros();
    for &i in &attached {
        let u = &state.commands[i];
        let p = u.position - u.rotation() * state.offsets[i];
        acc += Pose6::new(p, u.orientation).to_vector();
    }
    Some(Pose6::from_vector(&(acc / attached.len() as f64)))
}

fn newton_settle(
    start: Vector6<f64>,
    state: &PlantState,
    model: &BoxModel,
    env: &EnvironmentModel,
    settings: &SettleSettings,
) -> Result<Vector6<f64>> {
    let eval = |q: &Vector6<f64>| net_wrench(q, state, model, env);
    let converged = |r: &Vector6<f64>| {
        r.fixed_rows::<3>(0).norm() <= settings.force_tol
            && r.fixed_rows::<3>(3).norm() <= settings.moment_tol
    };
    let mut q = start;
    let mut r = eval(&q);
    let mut it = 0;
    while !converged(&r) {
        if it == settings.max_iter || !r.iter().all(|v| v.is_finite()) {
            return Err(Error::SettleFailed {
                iterations: it,
                force_residual: r.fixed_rows::<3>(0).norm(),
                moment_residual: r.fixed_rows::<3>(3).norm(),
            });
        }
        it += 1;
        let mut jac = Matrix6::zeros();
        for k in 0..6 {
            let h = 1e-7;
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            jac.set_column(k, &((eval(&qp) - eval(&qm)) / (2.0 * h)));
        }
        let step = match jac.lu().solve(&(-r)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => jac
                .svd(true, true)
                .solve(&(-r), 1e-12)
                .unwrap_or_else(|_| Vector6::zeros()),
        };
        let norm0 = r.norm();
        let mut alpha = 1.0;
        loop {
            let trial = q + step * alpha;
            let rt = eval(&trial);
            if rt.norm() < (1.0 - 1e-4 * alpha) * norm0 || alpha < 1e-10 {
                q = trial;
                r = rt;
                break;
            }
            alpha *= 0.5;
        }
    }
    Ok(q)
}

/// Settled box poses, environment forces and measured wrenches along a command sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantRollout {
    pub poses: Vec<Pose6>,
    pub env_forces: Vec<Vector3<f64>>,
    /// Handle wrenches in {B}.
    pub wrenches: Vec<[Wrench; 2]>,
    /// Index of the first sample whose settle failed; the series stop there.
    pub failed_at: Option<usize>,
    pub final_state: PlantState,
}

pub fn rollout(
    commands: &[[Pose6; 2]],
    initial: &PlantState,
    model: &BoxModel,
    env: &EnvironmentModel,
) -> Result<PlantRollout> {
    if commands.is_empty() {
        return Err(Error::InvalidParameter("empty command sequence".into()));
    }
    let mut state = initial.clone();
    let mut out = PlantRollout {
        poses: Vec::with_capacity(commands.len()),
        env_forces: Vec::with_capacity(commands.len()),
        wrenches: Vec::with_capacity(commands.len()),
        failed_at: None,
        final_state: initial.clone(),
    };
    for (k, cmd) in commands.iter().enumerate() {
        state.commands = *cmd;
        match settle(&state, model, env) {
            Ok(s) => state = s,
            Err(_) => {
                out.failed_at = Some(k);
                break;
            }
        }
        out.poses.push(state.box_pose);
        out.env_forces.push(state.env_force(model, env));
        out.wrenches.push(state.measured_wrenches(MeasurementFrame::Body));
    }
    out.final_state = state;
    Ok(out)
}

/// Box carried by two rigidly attached handles whose commands follow a box
/// pose with a constant per-handle wrench bias `K^-1 w_hold`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspedPlant {
    pub model: BoxModel,
    pub env: EnvironmentModel,
    pub stiffness: Stiffness,
    pub offsets: [Vector3<f64>; 2],
    /// Wrench each handle should exert on the box at the commanded pose, world axes.
    pub hold: [Wrench; 2],
}

impl GraspedPlant {
    /// Handles share the weight equally and exert no moment.
    pub fn carrying(model: BoxModel, env: EnvironmentModel, stiffness: Stiffness, offsets: [Vector3<f64>; 2]) -> Self {
        let lift = -env.gravity().vector() * (model.total_mass() / 2.0);
        let hold = [Wrench::new(lift, Vector3::zeros(), Frame::World); 2];
        Self {
            model,
            env,
            stiffness,
            offsets,
            hold,
        }
    }

    pub fn commands_for(&self, box_pose: &Pose6) -> [Pose6; 2] {
        std::array::from_fn(|i| {
            let bias = self.stiffness.inverse() * self.hold[i].to_vector();
            handle_pose(box_pose, &self.offsets[i]).offset(&bias)
        })
    }

    /// Settles the plant along a box-pose trajectory, starting from the first pose.
    pub fn track(&self, box_poses: &[Pose6]) -> Result<PlantRollout> {
        let first = box_poses
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty trajectory".into()))?;
        let commands: Vec<[Pose6; 2]> = box_poses.iter().map(|p| self.commands_for(p)).collect();
        let init = PlantState::new(*first, self.offsets, self.stiffness);
        rollout(&commands, &init, &self.model, &self.env)
    }
}

/// Adds i.i.d. zero-mean Gaussian noise to every force and torque component.
pub fn add_measurement_noise(
    series: &[[Wrench; 2]],
    sigma_f: f64,
    sigma_tau: f64,
    seed: u64,
) -> Result<Vec<[Wrench; 2]>> {
    if !(sigma_f >= 0.0) || !(sigma_tau >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise levels must be non-negative, got {sigma_f}, {sigma_tau}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = Normal::new(0.0, sigma_f).expect("checked sigma");
    let nt = Normal::new(0.0, sigma_tau).expect("checked sigma");
    Ok(series
        .iter()
        .map(|pair| {
            pair.map(|w| {
                let mut out = w;
                for k in 0..3 {
                    out.force[k] += nf.sample(&mut rng);
                }
                for k in 0..3 {
                    out.torque[k] += nt.sample(&mut rng);
                }
                out
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{estimate, MeasurementBatch};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn stiffness() -> Stiffness {
        Stiffness::diagonal(1000.0, 10.0).unwrap()
    }

    fn offsets() -> [Vector3<f64>; 2] {
        [Vector3::new(-0.15, 0.0, 0.0), Vector3::new(0.15, 0.0, 0.0)]
    }

    fn model(added: Vector3<f64>) -> BoxModel {
        BoxModel::new(Vector3::new(0.15, 0.10, 0.10), 1.7, 0.5, added).unwrap()
    }

    fn shelf_env() -> EnvironmentModel {
        EnvironmentModel::new(
            0.0,
            vec![
                Aabb {
                    min: [-0.4, 0.2, 0.25],
                    max: [0.4, 0.7, 0.30],
                },
                Aabb {
                    min: [-0.4, 0.2, 0.55],
                    max: [0.4, 0.7, 0.60],
                },
            ],
            DEFAULT_K_ENV,
            GravityVec::standard(),
        )
        .unwrap()
    }

    #[test]
    fn model_validation_and_com() {
        let m = model(Vector3::new(0.0902, 0.05016, 0.0));
        assert_relative_eq!(m.total_mass(), 2.2);
        assert_relative_eq!(m.true_com(), Vector3::new(0.0205, 0.0114, 0.0), epsilon = 1e-15);
        assert!(BoxModel::new(Vector3::new(0.1, 0.1, 0.1), 0.0, 0.5, Vector3::zeros()).is_err());
        assert!(EnvironmentModel::new(0.0, vec![], 0.0, GravityVec::standard()).is_err());
        let bad = Aabb {
            min: [0.0; 3],
            max: [1.0, 0.0, 1.0],
        };
        assert!(EnvironmentModel::new(0.0, vec![bad], 1e5, GravityVec::standard()).is_err());
    }

    #[test]
    fn resting_on_ground_carries_weight() {
        let m = model(Vector3::zeros());
        let env = EnvironmentModel::open(0.0);
        let mut s0 = PlantState::new(Pose6::from_position(Vector3::new(0.0, 0.0, 0.1)), offsets(), stiffness());
        s0.attached = [false; 2];
        let s = settle(&s0, &m, &env).unwrap();
        let f = s.env_force(&m, &env);
        assert_relative_eq!(f.z, 2.2 * 9.81, epsilon = 1e-5);
        assert!(f.xy().norm() < 1e-9);
        assert!(equilibrium_residual(&s, &m, &env).norm() < 2e-6);
    }

    #[test]
    fn free_hang_balances_weight() {
        let m = model(Vector3::zeros());
        let env = EnvironmentModel::open(0.0);
        let mut s = PlantState::new(Pose6::from_position(Vector3::new(0.0, 0.0, 0.1)), offsets(), stiffness());
        for c in &mut s.commands {
            c.position.z += 0.05;
        }
        let s = settle(&s, &m, &env).unwrap();
        assert_eq!(s.env_force(&m, &env), Vector3::zeros());
        let total = s.handle_wrench(Side::Left).force + s.handle_wrench(Side::Right).force;
        assert!((total - Vector3::new(0.0, 0.0, 2.2 * 9.81)).norm() < 1e-6);
    }

    #[test]
    fn symmetric_squeeze_is_internal() {
        let m = model(Vector3::zeros());
        let env = EnvironmentModel::open(0.0);
        let mut s = PlantState::new(Pose6::from_position(Vector3::new(0.0, 0.0, 0.1)), offsets(), stiffness());
        s.commands[0].position.x += 0.03;
        s.commands[1].position.x -= 0.03;
        let s = settle(&s, &m, &env).unwrap();
        let fl = s.handle_wrench(Side::Left).force;
        let fr = s.handle_wrench(Side::Right).force;
        assert_relative_eq!(fl.x, 30.0, epsilon = 1e-6);
        assert_relative_eq!(fr.x, -30.0, epsilon = 1e-6);
        assert!((fl.x + fr.x).abs() < 1e-9);
    }

    #[test]
    fn shelf_clip_force_matches_penalty_law() {
        let m = model(Vector3::zeros());
        let env = shelf_env();
        // Box under the upper board, commanded 2 cm too high, held up by springs.
        let target = Pose6::from_position(Vector3::new(0.0, 0.45, 0.47));
        let mut s = PlantState::new(target, offsets(), stiffness());
        let hold = 2.2 * 9.81 / 2.0 / 1000.0;
        for c in &mut s.commands {
            c.position.z += hold;
        }
        let s = settle(&s, &m, &env).unwrap();
        let top = s.box_pose.position.z + 0.10;
        let depth = top - 0.55;
        assert!(depth > 0.0);
        let f = s.env_force(&m, &env);
        assert_relative_eq!(f.z, -4.0 * DEFAULT_K_ENV * depth, max_relative = 1e-6);
        // Springs carry the rest: almost the whole 2 cm deflection is absorbed by the box pose.
        assert!((s.box_pose.position.z - 0.45).abs() < 1e-3);
    }

    #[test]
    fn clear_trajectory_has_no_contact() {
        let m = model(Vector3::zeros());
        let env = shelf_env();
        let hold = 2.2 * 9.81 / 2.0 / 1000.0;
        let poses: Vec<Pose6> = (0..20)
            .map(|k| Pose6::from_position(Vector3::new(0.0, -0.3 + 0.01 * k as f64, 0.8)))
            .collect();
        let commands: Vec<[Pose6; 2]> = poses
            .iter()
            .map(|p| {
                offsets().map(|o| {
                    let mut h = handle_pose(p, &o);
                    h.position.z += hold;
                    h
                })
            })
            .collect();
        let init = PlantState::new(poses[0], offsets(), stiffness());
        let out = rollout(&commands, &init, &m, &env).unwrap();
        assert_eq!(out.failed_at, None);
        assert!(out.env_forces.iter().all(|f| *f == Vector3::zeros()));
        for (p, q) in out.poses.iter().zip(&poses) {
            assert!((p.position - q.position).norm() < 1e-8);
        }
    }

    #[test]
    fn noise_examples() {
        let zero = vec![[Wrench::zero(Frame::Box); 2]; 3];
        assert_eq!(add_measurement_noise(&zero, 0.0, 0.0, 1).unwrap(), zero);
        let many = vec![[Wrench::zero(Frame::Box); 2]; 100_000 / 6 + 1];
        let noisy = add_measurement_noise(&many, 0.05, 0.0, 42).unwrap();
        let vals: Vec<f64> = noisy
            .iter()
            .flat_map(|p| p.iter().flat_map(|w| w.force.iter().copied().collect::<Vec<_>>()))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.05).abs() < 0.02 * 0.05, "{std}");
        assert_eq!(noisy, add_measurement_noise(&many, 0.05, 0.0, 42).unwrap());
        assert!(add_measurement_noise(&zero, -1.0, 0.0, 1).is_err());
    }

    #[test]
    fn gravity_aligned_round_trip_recovers_inertia() {
        let m = model(Vector3::new(0.0902, 0.05016, 0.0));
        let env = EnvironmentModel::open(-10.0);
        let mut s = PlantState::new(Pose6::from_position(Vector3::new(0.0, 0.0, 0.5)), offsets(), stiffness());
        s.commands[0].position.x += 0.04;
        s.commands[1].position.x -= 0.04;
        let mut samples = Vec::new();
        let mut arms = [Vector3::zeros(); 2];
        for k in 0..5 {
            let mut sk = s.clone();
            for c in &mut sk.commands {
                c.position.z += 0.011 + 0.001 * k as f64;
            }
            let settled = settle(&sk, &m, &env).unwrap();
            let w = settled.measured_wrenches(MeasurementFrame::GravityAligned);
            arms = settled.lever_arms(MeasurementFrame::GravityAligned);
            samples.push((w[0], w[1]));
        }
        // Offset CoM tilts the box slightly.
        let settled = settle(&s, &m, &env).unwrap();
        assert!(settled.box_pose.orientation.norm() > 1e-4);
        let batch = MeasurementBatch::new(samples, arms[0], arms[1], GravityVec::standard()).unwrap();
        let est = estimate(&batch).unwrap();
        assert_relative_eq!(est.mass, 2.2, max_relative = 1e-6);
        // In-plane CoM of the tilted box in the gravity-aligned frame.
        let tilted = settled.box_pose.rotation() * m.true_com();
        assert!((est.com.xy() - tilted.xy()).norm() < 1e-6);
        assert!((est.com.xy() - m.true_com().xy()).norm() < 1e-5);
    }

    #[test]
    fn grasped_plant_tracks_free_path() {
        let m = model(Vector3::new(0.0902, 0.05016, 0.0));
        let env = shelf_env();
        let plant = GraspedPlant::carrying(m, env, stiffness(), offsets());
        let path: Vec<Pose6> = (0..10)
            .map(|k| Pose6::from_position(Vector3::new(0.0, -0.2, 0.8 + 0.01 * k as f64)))
            .collect();
        let out = plant.track(&path).unwrap();
        assert_eq!(out.failed_at, None);
        for (p, q) in out.poses.iter().zip(&path) {
            // Offset CoM tilts the box a little but the carried center stays put.
            assert!((p.position - q.position).norm() < 2e-3);
            assert!(p.orientation.norm() < 0.02);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn settled_states_are_balanced(dx in -0.02f64..0.02, dy in -0.02f64..0.02, dz in -0.03f64..0.06,
                                       squeeze in 0.0f64..0.05, rz in -0.1f64..0.1,
                                       cx in -0.1f64..0.1, cy in -0.08f64..0.08) {
            let m = model(Vector3::new(cx, cy, 0.0));
            let env = EnvironmentModel::open(0.0);
            let mut s = PlantState::new(Pose6::from_position(Vector3::new(0.0, 0.0, 0.1)), offsets(), stiffness());
            s.commands[0].position += Vector3::new(dx + squeeze, dy, dz);
            s.commands[1].position += Vector3::new(dx - squeeze, dy, dz);
            s.commands[0].orientation.z = rz;
            s.commands[1].orientation.z = rz;
            let settled = settle(&s, &m, &env).unwrap();
            let r = equilibrium_residual(&settled, &m, &env);
            prop_assert!(r.fixed_rows::<3>(0).norm() <= 1e-6);
            prop_assert!(r.fixed_rows::<3>(3).norm() <= 1e-6);
        }

        #[test]
        fn penalty_force_is_unilateral(x in -0.5f64..0.5, y in 0.0f64..0.8, z in -0.1f64..0.7) {
            let env = shelf_env();
            let p = Vector3::new(x, y, z);
            let f = env.contact_force(&p);
            let mut contacts = Vec::new();
            if z < 0.0 { contacts.push((-z, Vector3::z())); }
            for s in env.shelves() {
                if let Some((depth, dir)) = s.penetration(&p) {
                    prop_assert!(depth > 0.0);
                    prop_assert!(dir.norm() <= 1.0 + 1e-12);
                    let faces = [
                        (s.max[0] - x, Vector3::x()), (x - s.min[0], -Vector3::x()),
                        (s.max[1] - y, Vector3::y()), (y - s.min[1], -Vector3::y()),
                        (s.max[2] - z, Vector3::z()), (z - s.min[2], -Vector3::z()),
                    ];
                    // Axes whose two faces are both well past the nearest depth carry no push.
                    for k in 0..3 {
                        let (hi, lo) = (faces[2 * k].0, faces[2 * k + 1].0);
                        if hi.min(lo) > depth + 40.0 * EDGE_BLEND {
                            prop_assert!(dir[k].abs() < 1e-12);
                        } else if hi.max(lo) > depth + 40.0 * EDGE_BLEND {
                            // Only the nearer face of the pair contributes, pushing outward through it.
                            let outward = if hi < lo { 1.0 } else { -1.0 };
                            prop_assert!(dir[k] * outward > 0.0);
                        }
                    }
                    let nearest = faces.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap().1;
                    prop_assert!(dir.dot(&nearest) > 0.0);
                    contacts.push((depth, dir));
                }
            }
            let expected: Vector3<f64> = contacts.iter().map(|(d, n)| n * (env.k_env() * d)).sum();
            prop_assert!((f - expected).norm() <= 1e-9 * expected.norm().max(1.0));
            if contacts.is_empty() {
                prop_assert_eq!(f, Vector3::zeros());
            }
        }
    }
}
