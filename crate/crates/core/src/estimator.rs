//! Online inertial estimation after lift-off.
//!
//! The commanded handle poses are ramped along fixed lifting directions
//! until both handles have risen by `h_lift`. The post-lift-off wrenches,
//! expressed in the object frame {B}, are then stacked into two linear
//! regressions: force balance gives the mass, moment balance about the box
//! center gives the in-plane CoM. The CoM component along gravity does not
//! enter the moment balance and is reported as unobservable.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::linalg::{min_norm_lstsq, PINV_RCOND};
use crate::spatial::{skew, Frame, GravityVec, Pose6, Wrench};

/// Default lift-off clearance [m].
pub const DEFAULT_H_LIFT: f64 = 0.005;
/// Default ramp increment per control step [m].
pub const DEFAULT_DELTA_ALPHA: f64 = 0.0005;
/// Default number of post-lift-off samples.
pub const DEFAULT_SAMPLES: usize = 50;

/// Lift ramp `u_i(k) = u_i(0) + alpha(k) l_i` with `alpha(k) = k * delta_alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftRampState {
    step: u64,
    delta_alpha: f64,
    lift_dirs: [Vector6<f64>; 2],
    u0: [Pose6; 2],
}

impl LiftRampState {
    pub fn new(delta_alpha: f64, lift_dirs: [Vector6<f64>; 2], u0: [Pose6; 2]) -> Result<Self> {
        if !(delta_alpha > 0.0) || !delta_alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lift increment must be positive, got {delta_alpha}"
            )));
        }
        for l in &lift_dirs {
            if (l.norm() - 1.0).abs() > 1e-10 || l.fixed_rows::<3>(3).amax() != 0.0 {
                return Err(Error::InvalidParameter(
                    "lifting directions must be unit 6-vectors with zero orientation part".into(),
                ));
            }
        }
        Ok(Self {
            step: 0,
            delta_alpha,
            lift_dirs,
            u0,
        })
    }

    /// Pure vertical lift for both handles.
    pub fn vertical(delta_alpha: f64, u0: [Pose6; 2]) -> Result<Self> {
        let up = Vector6::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        Self::new(delta_alpha, [up, up], u0)
    }

    pub fn alpha(&self) -> f64 {
        self.step as f64 * self.delta_alpha
    }

    pub fn delta_alpha(&self) -> f64 {
        self.delta_alpha
    }

    pub fn initial_commands(&self) -> [Pose6; 2] {
        self.u0
    }

    fn command(&self, i: usize) -> Pose6 {
        self.u0[i].offset(&(self.lift_dirs[i] * self.alpha()))
    }

    /// Commands for the current `alpha`, and the state advanced by one increment.
    pub fn ramp_step(&self) -> (LiftRampState, Pose6, Pose6) {
        let next = LiftRampState {
            step: self.step + 1,
            ..self.clone()
        };
        (next, self.command(0), self.command(1))
    }
}

/// Lift-off once both handles rose at least `h_lift` along `z_hat`.
pub fn detect_liftoff(
    p_left: &Vector3<f64>,
    p_right: &Vector3<f64>,
    p_left0: &Vector3<f64>,
    p_right0: &Vector3<f64>,
    z_hat: &Vector3<f64>,
    h_lift: f64,
) -> bool {
    let dh_l = (p_left - p_left0).dot(z_hat);
    let dh_r = (p_right - p_right0).dot(z_hat);
    dh_l.min(dh_r) >= h_lift
}

/// Post-lift-off wrench samples, all expressed in {B}.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementBatch {
    pub samples: Vec<(Wrench, Wrench)>,
    pub r_left: Vector3<f64>,
    pub r_right: Vector3<f64>,
    pub gravity: GravityVec,
}

const CSV_HEADER: [&str; 12] = [
    "fL_x", "fL_y", "fL_z", "tauL_x", "tauL_y", "tauL_z", "fR_x", "fR_y", "fR_z", "tauR_x",
    "tauR_y", "tauR_z",
];

impl MeasurementBatch {
    pub fn new(
        samples: Vec<(Wrench, Wrench)>,
        r_left: Vector3<f64>,
        r_right: Vector3<f64>,
        gravity: GravityVec,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if samples
            .iter()
            .any(|(l, r)| l.frame != Frame::Box || r.frame != Frame::Box)
        {
            return Err(Error::InvalidParameter(
                "measurement wrenches must be expressed in the box frame".into(),
            ));
        }
        Ok(Self {
            samples,
            r_left,
            r_right,
            gravity,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for (l, r) in &self.samples {
            let row: Vec<String> = l
                .to_vector()
                .iter()
                .chain(r.to_vector().iter())
                .map(|x| format!("{x:e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the 12-column CSV written by [`MeasurementBatch::write_csv`].
    pub fn read_csv<R: Read>(
        input: R,
        r_left: Vector3<f64>,
        r_right: Vector3<f64>,
        gravity: GravityVec,
    ) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
            return Err(Error::InvalidParameter(format!(
                "unexpected measurement header: {header:?}"
            )));
        }
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 12 {
                return Err(Error::InvalidParameter(format!(
                    "expected 12 columns, got {}",
                    rec.len()
                )));
            }
            let mut v = [0.0; 12];
            for (slot, field) in v.iter_mut().zip(rec.iter()) {
                *slot = field.trim().parse().map_err(|e| {
                    Error::InvalidParameter(format!("bad number {field:?}: {e}"))
                })?;
            }
            let l = Wrench::from_vector(&Vector6::from_column_slice(&v[..6]), Frame::Box);
            let r = Wrench::from_vector(&Vector6::from_column_slice(&v[6..]), Frame::Box);
            samples.push((l, r));
        }
        Self::new(samples, r_left, r_right, gravity)
    }
}

/// Mass and CoM in {B}; unobservable CoM components are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InertialEstimate {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub observable: [bool; 3],
}

impl InertialEstimate {
    pub fn new(mass: f64, com: Vector3<f64>) -> Result<Self> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mass must be positive, got {mass}"
            )));
        }
        Ok(Self {
            mass,
            com,
            observable: [true; 3],
        })
    }
}

/// `m = Phi_F^+ y_F` with `Phi_F` the stacked `-g` and `y_F` the stacked total forces.
pub fn estimate_mass(batch: &MeasurementBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = batch.len();
    let g = batch.gravity.vector();
    let mut phi = DMatrix::zeros(3 * m, 1);
    let mut y = DVector::zeros(3 * m);
    for (j, (l, r)) in batch.samples.iter().enumerate() {
        let total = l.force + r.force;
        for k in 0..3 {
            phi[(3 * j + k, 0)] = -g[k];
            y[3 * j + k] = total[k];
        }
    }
    Ok(min_norm_lstsq(&phi, &y, PINV_RCOND).solution[0])
}

/// Resultant measured moment about the box center, `sum_i r_i x f_i + tau_i`.
pub fn resultant_moment(batch: &MeasurementBatch, sample: usize) -> Vector3<f64> {
    let (l, r) = &batch.samples[sample];
    batch.r_left.cross(&l.force) + l.torque + batch.r_right.cross(&r.force) + r.torque
}

/// Minimum-norm solution of the stacked moment balance `s_j = [m g]x r_com`.
pub fn estimate_com(batch: &MeasurementBatch, mass: f64) -> Result<(Vector3<f64>, [bool; 3])> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "mass estimate must be positive, got {mass}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = batch.len();
    let block = skew(&(batch.gravity.vector() * mass));
    let mut phi = DMatrix::zeros(3 * m, 3);
    let mut y = DVector::zeros(3 * m);
    for j in 0..m {
        phi.view_mut((3 * j, 0), (3, 3)).copy_from(&block);
        y.rows_mut(3 * j, 3).copy_from(&resultant_moment(batch, j));
    }
    let ls = min_norm_lstsq(&phi, &y, PINV_RCOND);
    let mut observable = [true; 3];
    let mut com = Vector3::from_column_slice(ls.solution.as_slice());
    for (k, flag) in observable.iter_mut().enumerate() {
        let leak: f64 = ls.nullspace.row(k).iter().map(|v| v * v).sum();
        if leak > 1e-9 {
            *flag = false;
            com[k] = 0.0;
        }
    }
    Ok((com, observable))
}

/// Mass followed by CoM from the same batch.
pub fn estimate(batch: &MeasurementBatch) -> Result<InertialEstimate> {
    let mass = estimate_mass(batch)?;
    if !(mass > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "non-positive mass estimate {mass}; is the object lifted?"
        )));
    }
    let (com, observable) = estimate_com(batch, mass)?;
    Ok(InertialEstimate {
        mass,
        com,
        observable,
    })
}

/// Location of an added point mass inside a box whose own CoM is at the
/// geometric center, from the combined CoM: `r_add = (m_base + m_add) r_com / m_add`.
pub fn infer_added_mass_location(
    est: &InertialEstimate,
    base_mass: f64,
    added_mass: f64,
) -> Result<Vector3<f64>> {
    if !(added_mass > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "added mass must be positive, got {added_mass}"
        )));
    }
    if !(base_mass >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "base mass must be non-negative, got {base_mass}"
        )));
    }
    Ok(est.com * ((base_mass + added_mass) / added_mass))
}
