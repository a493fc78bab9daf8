//! Frames, minimal pose coordinates, wrench algebra and the Cartesian
//! impedance relation `w = K (u - z)`.
//!
//! Orientation uses fixed-axis XYZ Euler angles, so a pose is a plain
//! 6-vector and pose differences are componentwise. This is only
//! meaningful for the small rotations of quasi-static lifting.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravitational acceleration used throughout [m/s^2].
pub const STANDARD_GRAVITY: f64 = 9.81;

/// Which arm / handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

/// Coordinate frame a wrench is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Frame {
    World,
    /// Object-fixed frame at the box geometric center.
    Box,
    Handle(Side),
}

/// Position [m] and fixed-axis XYZ Euler orientation [rad].
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose6 {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

impl Pose6 {
    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self::new(position, Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.orientation);
        v
    }

    /// `self - other` in minimal coordinates.
    pub fn difference(&self, other: &Pose6) -> Vector6<f64> {
        self.to_vector() - other.to_vector()
    }

    /// `self + delta` in minimal coordinates.
    pub fn offset(&self, delta: &Vector6<f64>) -> Pose6 {
        Pose6::from_vector(&(self.to_vector() + delta))
    }

    /// Rotation `R = Rz(rz) Ry(ry) Rx(rx)` mapping pose-local vectors to the parent frame.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.orientation.x, self.orientation.y, self.orientation.z)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.orientation.iter()).all(|x| x.is_finite())
    }
}

/// Force [N] and moment [N m] pair tagged with its frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub frame: Frame,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>, frame: Frame) -> Self {
        Self {
            force,
            torque,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), frame)
    }

    pub fn from_vector(v: &Vector6<f64>, frame: Frame) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into(), frame)
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<3>(3).copy_from(&self.torque);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|x| x.is_finite())
    }
}

/// Symmetric positive definite 6x6 Cartesian stiffness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stiffness {
    matrix: Matrix6<f64>,
    inverse: Matrix6<f64>,
}

impl Stiffness {
    pub fn new(matrix: Matrix6<f64>) -> Result<Self> {
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        if !matrix.iter().all(|x| x.is_finite())
            || (matrix - matrix.transpose()).amax() > 1e-12 * scale
        {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = matrix.cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(Self {
            matrix,
            inverse: chol.inverse(),
        })
    }

    /// `diag(k_trans I3, k_rot I3)`.
    pub fn diagonal(translational: f64, rotational: f64) -> Result<Self> {
        let d = Vector6::new(
            translational,
            translational,
            translational,
            rotational,
            rotational,
            rotational,
        );
        Self::new(Matrix6::from_diagonal(&d))
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix6<f64> {
        &self.inverse
    }

    /// Same stiffness scaled by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "stiffness scale must be positive, got {factor}"
            )));
        }
        Self::new(self.matrix * factor)
    }
}

/// Gravity expressed in the upright box frame: `g_vec = -g z_local`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityVec {
    g: f64,
}

impl GravityVec {
    pub fn new(g: f64) -> Result<Self> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gravity magnitude must be positive, got {g}"
            )));
        }
        Ok(Self { g })
    }

    pub fn standard() -> Self {
        Self {
            g: STANDARD_GRAVITY,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.g
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.g)
    }
}

impl Default for GravityVec {
    fn default() -> Self {
        Self::standard()
    }
}

/// Skew-symmetric matrix `[v]x` with `[v]x u = v x u`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Interaction wrench of a Cartesian impedance: `w = K (u - z)`.
pub fn impedance_wrench(u: &Pose6, z: &Pose6, stiffness: &Stiffness, frame: Frame) -> Wrench {
    Wrench::from_vector(&(stiffness.matrix() * u.difference(z)), frame)
}

pub(crate) fn check_rotation(rotation: &Matrix3<f64>) -> Result<()> {
    let orth = (rotation.transpose() * rotation - Matrix3::identity()).amax();
    if !(orth <= 1e-9) || (rotation.determinant() - 1.0).abs() > 1e-9 {
        return Err(Error::NotARotation);
    }
    Ok(())
}

/// Re-express `w` in a frame rotated by `rotation` (both force and moment are
/// free vectors here; no reference-point shift).
pub fn wrench_to_frame(w: &Wrench, rotation: &Matrix3<f64>, target: Frame) -> Result<Wrench> {
    check_rotation(rotation)?;
    Ok(Wrench::new(rotation * w.force, rotation * w.torque, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arm_stiffness() -> Stiffness {
        Stiffness::diagonal(1000.0, 10.0).unwrap()
    }

    // Component formula, kept separate from the matrix route.
    fn cross_scalar(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    #[test]
    fn skew_basis_cross_product() {
        let r = skew(&Vector3::x()) * Vector3::y();
        assert_eq!(r, Vector3::z());
    }

    #[test]
    fn skew_gravity_moment_matches_scalar_cross() {
        let w = Vector3::new(0.0, 0.0, -9.81 * 2.2);
        let r = Vector3::new(0.0205, 0.0114, 0.0);
        let m = skew(&w) * r;
        let c = cross_scalar([w.x, w.y, w.z], [r.x, r.y, r.z]);
        for i in 0..3 {
            assert_relative_eq!(m[i], c[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn impedance_examples() {
        let k = arm_stiffness();
        let z = Pose6::from_position(Vector3::new(0.3, -0.1, 0.5));
        assert_eq!(
            impedance_wrench(&z, &z, &k, Frame::World).to_vector(),
            Vector6::zeros()
        );
        let u = z.offset(&Vector6::new(0.001, 0.0, 0.0, 0.0, 0.0, 0.0));
        let w = impedance_wrench(&u, &z, &k, Frame::World);
        assert_relative_eq!(w.force, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-9);
        let u = z.offset(&Vector6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0));
        let w = impedance_wrench(&u, &z, &k, Frame::World);
        assert_relative_eq!(w.torque, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_pd_stiffness() {
        assert!(Stiffness::diagonal(1000.0, 0.0).is_err());
        assert!(Stiffness::diagonal(-1.0, 10.0).is_err());
        let mut m = Matrix6::identity();
        m[(0, 1)] = 0.5;
        assert!(Stiffness::new(m).is_err());
    }

    #[test]
    fn frame_change_examples() {
        let w = Wrench::new(Vector3::x(), Vector3::new(0.0, 0.2, 0.0), Frame::World);
        let same = wrench_to_frame(&w, &Matrix3::identity(), Frame::Box).unwrap();
        assert_eq!(same.force, w.force);
        assert_eq!(same.frame, Frame::Box);
        let rz = Rotation3::from_euler_angles(0.0, 0.0, std::f64::consts::PI);
        let flipped = wrench_to_frame(&w, rz.matrix(), Frame::Box).unwrap();
        assert_relative_eq!(flipped.force, -Vector3::x(), epsilon = 1e-15);
        let mut bad = Matrix3::identity();
        bad[(0, 0)] = 1.1;
        assert!(wrench_to_frame(&w, &bad, Frame::Box).is_err());
        assert!(wrench_to_frame(&w, &(-Matrix3::identity()), Frame::Box).is_err());
    }

    #[test]
    fn euler_is_extrinsic_xyz() {
        let p = Pose6::new(Vector3::zeros(), Vector3::new(0.1, -0.2, 0.3));
        let expected = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.3)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), -0.2)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), 0.1);
        assert_relative_eq!(p.rotation().matrix(), expected.matrix(), epsilon = 1e-14);
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        prop::array::uniform3(-10.0f64..10.0).prop_map(Vector3::from)
    }

    proptest! {
        #[test]
        fn skew_is_antisymmetric_and_matches_cross(v in vec3(), u in vec3()) {
            let s = skew(&v);
            prop_assert_eq!(s + s.transpose(), Matrix3::zeros());
            prop_assert!((s * v).norm() <= 1e-12);
            let c = cross_scalar([v.x, v.y, v.z], [u.x, u.y, u.z]);
            prop_assert!(((s * u) - Vector3::from(c)).norm() <= 1e-12);
        }

        #[test]
        fn impedance_is_linear(d in prop::array::uniform6(-0.1f64..0.1), u in prop::array::uniform6(-1.0f64..1.0)) {
            let k = arm_stiffness();
            let z = Pose6::default();
            let u = Pose6::from_vector(&Vector6::from(u));
            let d = Vector6::from(d);
            let a = impedance_wrench(&u.offset(&d), &z, &k, Frame::World).to_vector();
            let b = impedance_wrench(&u, &z, &k, Frame::World).to_vector();
            prop_assert!(((a - b) - k.matrix() * d).amax() <= 1e-9);
        }

        #[test]
        fn rotation_preserves_norms(f in vec3(), t in vec3(), e in prop::array::uniform3(-3.1f64..3.1)) {
            let r = Pose6::new(Vector3::zeros(), Vector3::from(e)).rotation();
            let w = Wrench::new(f, t, Frame::World);
            let out = wrench_to_frame(&w, r.matrix(), Frame::Box).unwrap();
            prop_assert!((out.force.norm() - f.norm()).abs() <= 1e-12 * f.norm().max(1.0));
            prop_assert!((out.torque.norm() - t.norm()).abs() <= 1e-12 * t.norm().max(1.0));
        }
    }
}
