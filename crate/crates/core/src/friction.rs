//! Contact friction: normal/tangential decomposition, the ellipsoidal
//! limit surface coupling tangential force with torsional moment, the
//! effective contact radius of a rectangular patch, and the safety-margin
//! contraction of the friction cone and limit surface.
//!
//! Sign convention: `f_n = n^T f` with `n` the outward contact normal and `f`
//! the force applied on the object, so compression is `f_n <= 0`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::spatial::Wrench;

/// Rectangular contact patch `a x b` [m].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactPatch {
    a: f64,
    b: f64,
}

impl ContactPatch {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "contact patch sides must be positive, got {a} x {b}"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// Friction coefficient, safety margin and effective contact radius of one contact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrictionParams {
    mu: f64,
    r_s: f64,
    r_eff: f64,
}

impl FrictionParams {
    pub fn new(mu: f64, r_s: f64, r_eff: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "friction coefficient must be positive, got {mu}"
            )));
        }
        if !(0.0..1.0).contains(&r_s) {
            return Err(Error::InvalidParameter(format!(
                "safety margin must lie in [0, 1), got {r_s}"
            )));
        }
        if !(r_eff > 0.0) || !r_eff.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "effective radius must be positive, got {r_eff}"
            )));
        }
        Ok(Self { mu, r_s, r_eff })
    }

    /// Parameters for a rectangular patch under uniform pressure.
    pub fn for_patch(mu: f64, r_s: f64, patch: &ContactPatch) -> Result<Self> {
        Self::new(mu, r_s, effective_radius(patch))
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn safety_margin(&self) -> f64 {
        self.r_s
    }

    pub fn effective_radius(&self) -> f64 {
        self.r_eff
    }

    /// Same contact with a different safety margin.
    pub fn with_margin(&self, r_s: f64) -> Result<Self> {
        Self::new(self.mu, r_s, self.r_eff)
    }

    /// Contraction factor `1 - r_s`.
    pub fn contraction(&self) -> f64 {
        1.0 - self.r_s
    }
}

/// Contact wrench split along the contact normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactDecomposition {
    /// Signed normal force, negative in compression.
    pub f_n: f64,
    pub f_t: Vector3<f64>,
    /// Torsional moment about the normal.
    pub tau_n: f64,
    /// Bending moment (tangential part of the contact moment).
    pub tau_t: Vector3<f64>,
}

fn check_normal(n_hat: &Vector3<f64>) -> Result<()> {
    let norm = n_hat.norm();
    if !((norm - 1.0).abs() <= 1e-10) {
        return Err(Error::NonUnitNormal(norm));
    }
    Ok(())
}

/// Tangent-plane projector `I - n n^T`.
pub fn tangent_projector(n_hat: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - n_hat * n_hat.transpose()
}

pub fn decompose(w: &Wrench, n_hat: &Vector3<f64>) -> Result<ContactDecomposition> {
    check_normal(n_hat)?;
    let proj = tangent_projector(n_hat);
    Ok(ContactDecomposition {
        f_n: n_hat.dot(&w.force),
        f_t: proj * w.force,
        tau_n: n_hat.dot(&w.torque),
        tau_t: proj * w.torque,
    })
}

/// Effective contact radius of a uniformly loaded `a x b` rectangle: the mean
/// distance from the patch center, which converts normal load into torsional
/// friction capacity.
pub fn effective_radius(patch: &ContactPatch) -> f64 {
    let (a, b) = (patch.a, patch.b);
    (a * a + b * b).sqrt() / 6.0
        + a * a / (12.0 * b) * (b / a).asinh()
        + b * b / (12.0 * a) * (a / b).asinh()
}

/// Maximum tangential force `mu (-f_n)`.
pub fn tangential_limit(f_n: f64, fp: &FrictionParams) -> Result<f64> {
    if f_n > 0.0 {
        return Err(Error::Tension(f_n));
    }
    Ok(fp.mu * (-f_n))
}

/// Maximum torsional moment `mu (-f_n) R_eff`.
pub fn torsional_limit(f_n: f64, fp: &FrictionParams) -> Result<f64> {
    Ok(tangential_limit(f_n, fp)? * fp.r_eff)
}

/// `(|f_t| / f_t_max)^2 + (tau_n / tau_n_max)^2 - (1 - r_s)^2`; non-positive
/// means the contact sits inside the contracted limit surface. At zero normal
/// load any tangential load is infeasible and reported as `+inf`.
pub fn limit_surface_residual(d: &ContactDecomposition, fp: &FrictionParams) -> Result<f64> {
    let ft_max = tangential_limit(d.f_n, fp)?;
    let margin = fp.contraction().powi(2);
    let ft = d.f_t.norm();
    if ft_max == 0.0 {
        return Ok(if ft == 0.0 && d.tau_n == 0.0 {
            -margin
        } else {
            f64::INFINITY
        });
    }
    let tau_max = ft_max * fp.r_eff;
    Ok((ft / ft_max).powi(2) + (d.tau_n / tau_max).powi(2) - margin)
}

/// Contracted Coulomb cone `|f_t| <= (1 - r_s) mu (-f_n)`.
pub fn contract_friction_cone(f_t_norm: f64, f_n: f64, fp: &FrictionParams) -> bool {
    f_n <= 0.0 && f_t_norm <= fp.contraction() * fp.mu * (-f_n)
}

/// Boundary of the limit surface in the `(|f_t|, tau_n)` half plane for a given
/// normal force, as `samples` points from `tau_n = +max` to `-max`.
/// `contracted` selects the `(1 - r_s)` scaled boundary.
pub fn limit_surface_boundary(
    f_n: f64,
    fp: &FrictionParams,
    contracted: bool,
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    let ft_max = tangential_limit(f_n, fp)?;
    let tau_max = ft_max * fp.r_eff;
    let scale = if contracted { fp.contraction() } else { 1.0 };
    let n = samples.max(2);
    Ok((0..n)
        .map(|i| {
            let phi = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * i as f64 / (n - 1) as f64;
            (scale * ft_max * phi.cos(), scale * tau_max * phi.sin())
        })
        .collect())
}
