//! End-to-end run: trajectory refinement, lift ramp with inertial estimation,
//! contact wrench optimization and closed-loop transport on the plant.

use nalgebra::Vector3;

use crate::dmp_refine::{fit_dmp, refine, ExplorationState, RefTrajectory, RefineResult};
use crate::error::{Error, Result};
use crate::estimator::{detect_liftoff, estimate, InertialEstimate, LiftRampState, MeasurementBatch};
use crate::exec_loop::{run_execution, ExecConfig, ExecSummary, ExecutionLog};
use crate::scenario::Scenario;
use crate::simplant::{add_measurement_noise, handle_pose, settle, GraspedPlant, MeasurementFrame, PlantState};
use crate::spatial::{Frame, Pose6, Side, Wrench};
use crate::wrench_opt::{optimize, SocpSolution};

/// Ramp length after which a lift attempt is abandoned [m].
const MAX_LIFT: f64 = 0.2;

/// Which phases run; a disabled phase falls back to its naive counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phases {
    pub refine: bool,
    pub estimate: bool,
    pub optimize: bool,
}

impl Phases {
    pub const ALL: Self = Self {
        refine: true,
        estimate: true,
        optimize: true,
    };
}

impl Default for Phases {
    fn default() -> Self {
        Self::ALL
    }
}

pub fn refine_scenario(s: &Scenario, seed: u64) -> Result<(RefineResult, ExplorationState)> {
    let p1 = &s.config.phase1;
    let plant = GraspedPlant::carrying(s.model, s.env.clone(), s.stiffness, s.offsets);
    let dmp = fit_dmp(&s.reference, p1.n_basis)?;
    let mut exploration = ExplorationState::new(p1.n_basis, &p1.cem())?;
    let result = refine(&s.reference, &dmp, &mut exploration, &plant, &s.active_dims, seed)?;
    Ok((result, exploration))
}

/// Box resting at its start pose, gripped by the lift-ramp squeeze.
pub fn grasped_at_rest(s: &Scenario) -> Result<PlantState> {
    let squeeze = s.config.phase2.squeeze;
    let mut state = PlantState::new(s.start, s.offsets, s.plant_stiffness);
    for side in Side::BOTH {
        let i = side.index();
        let inward = -s.geometry.n[i] * squeeze;
        let bias = s.stiffness.inverse() * Wrench::new(inward, Vector3::zeros(), Frame::World).to_vector();
        state.commands[i] = handle_pose(&s.start, &s.offsets[i]).offset(&bias);
    }
    settle(&state, &s.model, &s.env)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LiftReport {
    /// Plant held at the lift-off commands.
    pub state: PlantState,
    pub ramp_steps: usize,
    pub alpha: f64,
    pub clean: MeasurementBatch,
    pub noisy: MeasurementBatch,
    pub estimate: InertialEstimate,
}

/// Ramps both handles up until lift-off, then records `M` wrench samples in
/// the gravity-aligned box frame and regresses mass and CoM from them.
pub fn lift_and_estimate(s: &Scenario, seed: u64) -> Result<LiftReport> {
    let p2 = &s.config.phase2;
    let rest = grasped_at_rest(s)?;
    let p0 = rest.measured.map(|m| m.position);
    let mut ramp = LiftRampState::vertical(p2.delta_alpha, rest.commands)?;
    let mut state = rest;
    let max_steps = (MAX_LIFT / p2.delta_alpha).ceil() as usize;
    let mut steps = 0;
    loop {
        if steps == max_steps {
            return Err(Error::NotConverged(format!(
                "no lift-off after raising the handles by {MAX_LIFT} m"
            )));
        }
        let (next, ul, ur) = ramp.ramp_step();
        state.commands = [ul, ur];
        state = settle(&state, &s.model, &s.env)?;
        steps += 1;
        if detect_liftoff(
            &state.measured[0].position,
            &state.measured[1].position,
            &p0[0],
            &p0[1],
            &Vector3::z(),
            p2.h_lift,
        ) {
            break;
        }
        ramp = next;
    }
    let w = state.measured_wrenches(MeasurementFrame::GravityAligned);
    let arms = state.lever_arms(MeasurementFrame::GravityAligned);
    let series = vec![w; p2.samples];
    let gravity = s.env.gravity();
    let to_pairs = |v: &[[Wrench; 2]]| v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();
    let clean = MeasurementBatch::new(to_pairs(&series), arms[0], arms[1], gravity)?;
    let noisy_series = add_measurement_noise(&series, p2.sigma_f, p2.sigma_tau, seed)?;
    let noisy = MeasurementBatch::new(to_pairs(&noisy_series), arms[0], arms[1], gravity)?;
    let estimate = estimate(&noisy)?;
    Ok(LiftReport {
        state,
        ramp_steps: steps,
        alpha: ramp.alpha(),
        clean,
        noisy,
        estimate,
    })
}

/// Known total mass with the CoM assumed at the geometric center.
pub fn centered_estimate(s: &Scenario) -> InertialEstimate {
    let mut est = InertialEstimate::new(s.model.total_mass(), Vector3::zeros()).expect("model mass is positive");
    est.observable = [true, true, false];
    est
}

/// Optimal contact wrenches in {B} for the given inertial estimate.
pub fn optimize_wrenches(s: &Scenario, est: &InertialEstimate) -> Result<(SocpSolution, [Wrench; 2])> {
    let sol = optimize(&s.geometry, est, &s.weight, &s.env.gravity(), s.config.phase3.tol)?;
    let x = sol.x_star;
    Ok((sol, Side::BOTH.map(|side| x.wrench(side))))
}

/// Equal squeeze at both handles, equal share of the weight, no contact moment.
/// Each handle squeezes hard enough to carry the whole true weight on its own
/// within the contracted friction cone.
pub fn naive_wrenches(s: &Scenario) -> [Wrench; 2] {
    let weight = s.model.total_mass() * s.env.gravity().magnitude();
    let fp = &s.friction;
    let squeeze = weight / (fp.mu() * fp.contraction());
    Side::BOTH.map(|side| {
        let i = side.index();
        let f = -s.geometry.n[i] * squeeze + Vector3::new(0.0, 0.0, weight / 2.0);
        Wrench::new(f, Vector3::zeros(), Frame::Box)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub phases: Phases,
    pub refinement: Option<RefineResult>,
    pub trajectory: RefTrajectory,
    pub lift: LiftReport,
    /// Estimate handed to the wrench distribution.
    pub estimate_used: InertialEstimate,
    pub solution: Option<SocpSolution>,
    pub desired: [Wrench; 2],
    pub log: ExecutionLog,
    pub summary: ExecSummary,
}

pub fn exec_config(s: &Scenario) -> Result<ExecConfig> {
    let nominal = s.friction.with_margin(0.0)?;
    Ok(ExecConfig {
        controller_stiffness: s.stiffness,
        plant_stiffness: s.plant_stiffness,
        pid: s.pid.clone(),
        normals: s.geometry.n,
        friction: [nominal; 2],
        dt: s.reference.dt,
    })
}

pub fn run_pipeline(s: &Scenario, phases: Phases, seed: u64) -> Result<PipelineReport> {
    let (refinement, trajectory) = if phases.refine {
        let (r, _) = refine_scenario(s, seed)?;
        let t = r.trajectory.clone();
        (Some(r), t)
    } else {
        (None, s.reference.clone())
    };
    let lift = lift_and_estimate(s, seed.wrapping_add(1))?;
    let estimate_used = if phases.estimate {
        lift.estimate
    } else {
        centered_estimate(s)
    };
    let (solution, desired) = if phases.optimize {
        let (sol, w) = optimize_wrenches(s, &estimate_used)?;
        (Some(sol), w)
    } else {
        (None, naive_wrenches(s))
    };
    let config = exec_config(s)?;
    let log = run_execution(&trajectory.samples, &desired, &lift.state, &s.model, &s.env, &config)?;
    let summary = log.summary(&config.normals);
    Ok(PipelineReport {
        phases,
        refinement,
        trajectory,
        lift,
        estimate_used,
        solution,
        desired,
        log,
        summary,
    })
}

/// Handle reference poses along a box path.
pub fn handle_references(path: &[Pose6], offsets: &[Vector3<f64>; 2]) -> Vec<[Pose6; 2]> {
    path.iter().map(|p| offsets.map(|o| handle_pose(p, &o))).collect()
}
