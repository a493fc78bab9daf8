//! Closed-loop execution: impedance commands biased by the desired contact
//! wrenches, corrected by a bounded wrench-error PID, settled on the plant.

use std::io::Write;

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::friction::{decompose, limit_surface_residual, FrictionParams};
use crate::simplant::{handle_pose, settle, BoxModel, EnvironmentModel, MeasurementFrame, PlantState};
use crate::spatial::{Frame, Pose6, Side, Stiffness, Wrench};

/// `u0 = z_ref + K^-1 w_des`, with `w_des` in the same axes as `K`.
pub fn nominal_command(z_ref: &Pose6, w_des: &Wrench, stiffness: &Stiffness) -> Pose6 {
    z_ref.offset(&(stiffness.inverse() * w_des.to_vector()))
}

/// Per-axis PID from wrench error to pose correction, `du = -(kp e + ki int e + kd de/dt)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WrenchPid {
    pub kp: Vector6<f64>,
    pub ki: Vector6<f64>,
    pub kd: Vector6<f64>,
    pub du_max: Vector6<f64>,
    pub active: [bool; 6],
    integral: Vector6<f64>,
    prev_error: Option<Vector6<f64>>,
}

pub const DEFAULT_KP: f64 = 2e-4;
pub const DEFAULT_KI: f64 = 5e-4;
pub const DEFAULT_DU_MAX: f64 = 5e-3;

impl WrenchPid {
    pub fn new(
        kp: Vector6<f64>,
        ki: Vector6<f64>,
        kd: Vector6<f64>,
        du_max: Vector6<f64>,
        active: [bool; 6],
    ) -> Result<Self> {
        let ok = |v: &Vector6<f64>| v.iter().all(|x| *x >= 0.0 && x.is_finite());
        if !ok(&kp) || !ok(&ki) || !ok(&kd) || !ok(&du_max) {
            return Err(Error::InvalidParameter(
                "PID gains and correction bounds must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            kp,
            ki,
            kd,
            du_max,
            active,
            integral: Vector6::zeros(),
            prev_error: None,
        })
    }

    /// Same gains on every active axis.
    pub fn uniform(kp: f64, ki: f64, kd: f64, du_max: f64, active: [bool; 6]) -> Result<Self> {
        Self::new(
            Vector6::repeat(kp),
            Vector6::repeat(ki),
            Vector6::repeat(kd),
            Vector6::repeat(du_max),
            active,
        )
    }

    /// Default gains acting on the box x axis, the squeezing direction.
    pub fn normal_axis() -> Self {
        Self::uniform(DEFAULT_KP, DEFAULT_KI, 0.0, DEFAULT_DU_MAX, [true, false, false, false, false, false])
            .expect("valid defaults")
    }

    pub fn disabled() -> Self {
        Self::uniform(0.0, 0.0, 0.0, 0.0, [false; 6]).expect("valid defaults")
    }

    pub fn integral(&self) -> Vector6<f64> {
        self.integral
    }

    pub fn reset(&mut self) {
        self.integral = Vector6::zeros();
        self.prev_error = None;
    }
}

/// Advances the controller by one sample. The integral of an axis is frozen
/// while that axis' output is saturated.
pub fn pid_step(pid: &WrenchPid, error: &Wrench, dt: f64) -> Result<(WrenchPid, Vector6<f64>)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let e = error.to_vector();
    let mut next = pid.clone();
    let mut du = Vector6::zeros();
    for k in (0..6).filter(|&k| pid.active[k]) {
        let integral = pid.integral[k] + e[k] * dt;
        let rate = pid.prev_error.map_or(0.0, |p| (e[k] - p[k]) / dt);
        let raw = -(pid.kp[k] * e[k] + pid.ki[k] * integral + pid.kd[k] * rate);
        let bound = pid.du_max[k];
        if raw.abs() > bound {
            du[k] = bound.copysign(raw);
        } else {
            du[k] = raw;
            next.integral[k] = integral;
        }
    }
    next.prev_error = Some(e);
    Ok((next, du))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecConfig {
    /// Stiffness the controller assumes when biasing commands.
    pub controller_stiffness: Stiffness,
    /// Stiffness the plant actually has.
    pub plant_stiffness: Stiffness,
    pub pid: WrenchPid,
    /// Outward contact normals in {B}.
    pub normals: [Vector3<f64>; 2],
    /// Friction model used to report residuals.
    pub friction: [FrictionParams; 2],
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecStep {
    pub t: f64,
    pub box_pose: Pose6,
    /// Measured handle wrenches in {B}.
    pub measured: [Wrench; 2],
    pub desired: [Wrench; 2],
    pub nominal: [Pose6; 2],
    pub commands: [Pose6; 2],
    /// Applied correction in {B} axes.
    pub correction: [Vector6<f64>; 2],
    pub friction_residual: [f64; 2],
    /// Angle between the reference and actual box orientation [rad].
    pub orientation_error: f64,
    pub env_force: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionLog {
    pub steps: Vec<ExecStep>,
    /// Step index and message of a plant failure that aborted the run.
    pub failure: Option<(usize, String)>,
    pub final_state: PlantState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecSummary {
    pub steps: usize,
    pub max_orientation_error: f64,
    pub max_friction_residual: f64,
    /// Sum over steps and handles of the measured normal force magnitude [N].
    pub squeeze_effort: f64,
    pub max_env_force: f64,
    pub failed: bool,
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

fn rotate(w: &Wrench, r: &Matrix3<f64>, frame: Frame) -> Wrench {
    Wrench::new(r * w.force, r * w.torque, frame)
}

fn residual_of(w: &Wrench, n: &Vector3<f64>, fp: &FrictionParams) -> f64 {
    match decompose(w, n) {
        Ok(d) if d.f_n <= 0.0 => limit_surface_residual(&d, fp).unwrap_or(f64::INFINITY),
        _ => f64::INFINITY,
    }
}

/// Steps the box reference, biases each handle command by its desired wrench,
/// settles the plant and feeds the wrench error back through the PID.
/// `desired` is expressed in {B}; a plant failure ends the run with a partial log.
pub fn run_execution(
    reference: &[Pose6],
    desired: &[Wrench; 2],
    initial: &PlantState,
    model: &BoxModel,
    env: &EnvironmentModel,
    config: &ExecConfig,
) -> Result<ExecutionLog> {
    if reference.is_empty() {
        return Err(Error::InvalidParameter("empty execution reference".into()));
    }
    if desired.iter().any(|w| w.frame != Frame::Box) {
        return Err(Error::InvalidParameter("desired wrenches must be expressed in the box frame".into()));
    }
    let mut state = initial.clone();
    state.stiffness = config.plant_stiffness;
    let mut pids = [config.pid.clone(), config.pid.clone()];
    let mut corrections = [Vector6::zeros(); 2];
    let mut log = ExecutionLog {
        steps: Vec::with_capacity(reference.len()),
        failure: None,
        final_state: state.clone(),
    };
    for (k, z_box) in reference.iter().enumerate() {
        let r_ref = *z_box.rotation().matrix();
        let mut nominal = [Pose6::default(); 2];
        let mut commands = [Pose6::default(); 2];
        for i in 0..2 {
            let z_ref = handle_pose(z_box, &state.offsets[i]);
            let w_world = rotate(&desired[i], &r_ref, Frame::World);
            nominal[i] = nominal_command(&z_ref, &w_world, &config.controller_stiffness);
            let mut du = Vector6::zeros();
            du.fixed_rows_mut::<3>(0).copy_from(&(r_ref * corrections[i].fixed_rows::<3>(0)));
            du.fixed_rows_mut::<3>(3).copy_from(&(r_ref * corrections[i].fixed_rows::<3>(3)));
            commands[i] = nominal[i].offset(&du);
        }
        state.commands = commands;
        state = match settle(&state, model, env) {
            Ok(s) => s,
            Err(e) => {
                log.failure = Some((k, e.to_string()));
                break;
            }
        };
        let measured = state.measured_wrenches(MeasurementFrame::Body);
        let applied = corrections;
        for i in 0..2 {
            let error = Wrench::from_vector(&(measured[i].to_vector() - desired[i].to_vector()), Frame::Box);
            let (next, du) = pid_step(&pids[i], &error, config.dt)?;
            pids[i] = next;
            corrections[i] = du;
        }
        let friction_residual =
            std::array::from_fn(|i| residual_of(&measured[i], &config.normals[i], &config.friction[i]));
        let rel = r_ref.transpose() * state.box_pose.rotation().matrix();
        log.steps.push(ExecStep {
            t: k as f64 * config.dt,
            box_pose: state.box_pose,
            measured,
            desired: *desired,
            nominal,
            commands,
            correction: applied,
            friction_residual,
            orientation_error: rotation_angle(&rel),
            env_force: state.env_force(model, env),
        });
    }
    log.final_state = state;
    Ok(log)
}

impl ExecutionLog {
    pub fn summary(&self, normals: &[Vector3<f64>; 2]) -> ExecSummary {
        let mut s = ExecSummary {
            steps: self.steps.len(),
            max_orientation_error: 0.0,
            max_friction_residual: f64::NEG_INFINITY,
            squeeze_effort: 0.0,
            max_env_force: 0.0,
            failed: self.failure.is_some(),
        };
        for step in &self.steps {
            s.max_orientation_error = s.max_orientation_error.max(step.orientation_error);
            s.max_env_force = s.max_env_force.max(step.env_force.norm());
            for side in Side::BOTH {
                let i = side.index();
                s.max_friction_residual = s.max_friction_residual.max(step.friction_residual[i]);
                s.squeeze_effort += step.measured[i].force.dot(&normals[i]).abs();
            }
        }
        s
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["t", "x", "y", "z", "rx", "ry", "rz"].iter().map(|s| s.to_string()).collect();
        for side in ["L", "R"] {
            for kind in ["meas", "des"] {
                for c in ["fx", "fy", "fz", "tx", "ty", "tz"] {
                    header.push(format!("{c}_{kind}_{side}"));
                }
            }
            header.push(format!("ls_residual_{side}"));
            for c in ["x", "y", "z", "rx", "ry", "rz"] {
                header.push(format!("du_{c}_{side}"));
            }
        }
        header.extend(["orientation_error", "fenv_x", "fenv_y", "fenv_z"].iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.t];
            row.extend(s.box_pose.to_vector().iter());
            for i in 0..2 {
                row.extend(s.measured[i].to_vector().iter());
                row.extend(s.desired[i].to_vector().iter());
                row.push(s.friction_residual[i]);
                row.extend(s.correction[i].iter());
            }
            row.push(s.orientation_error);
            row.extend(s.env_force.iter());
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}
