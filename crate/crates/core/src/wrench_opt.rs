//! Minimum-effort contact wrenches for a two-handle grasp.
//!
//! The stacked wrench `x = [f_L; tau_L; f_R; tau_R]` must balance gravity
//! about the box center, press on both handles, stay inside the contracted
//! limit surface at each contact and carry no bending moment. Among those,
//! the weighted norm `|Q^{1/2} x|` is minimized.
//!
//! Internally each contact torque is written `tau_i = tau_{n,i} n_i`, which
//! removes the bending equalities. The decision vector handed to the cone
//! solver is `y = [f_L; tau_nL; f_R; tau_nR; t]`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};

use crate::conic::{self, ConeSpec, ConicProblem, SolveStatus, SolverSettings};
use crate::error::{Error, Result};
use crate::estimator::InertialEstimate;
use crate::friction::{decompose, limit_surface_residual, FrictionParams};
use crate::spatial::{skew, Frame, GravityVec, Side, Wrench};

pub type Matrix6x12 = SMatrix<f64, 6, 12>;

/// Unit tolerance on contact normals.
const NORMAL_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspGeometry {
    /// Contact points relative to the box center, in {B}.
    pub r: [Vector3<f64>; 2],
    /// Outward unit normals of the box faces at the contacts.
    pub n: [Vector3<f64>; 2],
    pub fp: [FrictionParams; 2],
}

impl GraspGeometry {
    pub fn new(r: [Vector3<f64>; 2], n: [Vector3<f64>; 2], fp: [FrictionParams; 2]) -> Result<Self> {
        for ni in &n {
            let norm = ni.norm();
            if (norm - 1.0).abs() > NORMAL_TOL {
                return Err(Error::NonUnitNormal(norm));
            }
        }
        if (r[0] - r[1]).norm() < 1e-9 {
            return Err(Error::InvalidParameter("contact points coincide".into()));
        }
        if r.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidParameter("non-finite contact point".into()));
        }
        Ok(Self { r, n, fp })
    }

    /// Handles on the two faces normal to the box x axis, at `(-/+ half_width, 0, 0)`.
    pub fn symmetric(half_width: f64, fp: FrictionParams) -> Result<Self> {
        Self::new(
            [
                Vector3::new(-half_width, 0.0, 0.0),
                Vector3::new(half_width, 0.0, 0.0),
            ],
            [-Vector3::x(), Vector3::x()],
            [fp, fp],
        )
    }

    pub fn with_friction(&self, fp: FrictionParams) -> Self {
        Self { fp: [fp, fp], ..*self }
    }
}

/// `x = [f_L; tau_L; f_R; tau_R]`, expressed in {B}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackedWrench {
    pub x: SVector<f64, 12>,
}

impl StackedWrench {
    pub fn new(x: SVector<f64, 12>) -> Result<Self> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite stacked wrench".into()));
        }
        Ok(Self { x })
    }

    pub fn from_wrenches(left: &Wrench, right: &Wrench) -> Self {
        let mut x = SVector::<f64, 12>::zeros();
        x.fixed_rows_mut::<6>(0).copy_from(&left.to_vector());
        x.fixed_rows_mut::<6>(6).copy_from(&right.to_vector());
        Self { x }
    }

    pub fn force(&self, side: Side) -> Vector3<f64> {
        self.x.fixed_rows::<3>(6 * side.index()).into_owned()
    }

    pub fn torque(&self, side: Side) -> Vector3<f64> {
        self.x.fixed_rows::<3>(6 * side.index() + 3).into_owned()
    }

    pub fn wrench(&self, side: Side) -> Wrench {
        Wrench::new(self.force(side), self.torque(side), Frame::Box)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WrenchWeight {
    l_c: f64,
}

impl WrenchWeight {
    pub fn new(l_c: f64) -> Result<Self> {
        if !(l_c > 0.0) || !l_c.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "characteristic length must be positive, got {l_c}"
            )));
        }
        Ok(Self { l_c })
    }

    pub fn l_c(&self) -> f64 {
        self.l_c
    }

    /// `Q = blkdiag(Q_c, Q_c)`, `Q_c = diag(1, 1, 1, 1/l_c^2, 1/l_c^2, 1/l_c^2)`.
    pub fn q_matrix(&self) -> SMatrix<f64, 12, 12> {
        let w = 1.0 / (self.l_c * self.l_c);
        SMatrix::<f64, 12, 12>::from_diagonal(&SVector::<f64, 12>::from_fn(|i, _| {
            if i % 6 < 3 {
                1.0
            } else {
                w
            }
        }))
    }

    /// `|Q^{1/2} x|`.
    pub fn cost(&self, x: &SVector<f64, 12>) -> f64 {
        let mut acc = 0.0;
        for i in 0..12 {
            let v = if i % 6 < 3 { x[i] } else { x[i] / self.l_c };
            acc += v * v;
        }
        acc.sqrt()
    }
}

/// `G = [I 0 I 0; [r_L]x I [r_R]x I]`.
pub fn build_grasp_map(geo: &GraspGeometry) -> Matrix6x12 {
    let mut g = Matrix6x12::zeros();
    for i in 0..2 {
        let c = 6 * i;
        g.fixed_view_mut::<3, 3>(0, c).copy_from(&Matrix3::identity());
        g.fixed_view_mut::<3, 3>(3, c).copy_from(&skew(&geo.r[i]));
        g.fixed_view_mut::<3, 3>(3, c + 3)
            .copy_from(&Matrix3::identity());
    }
    g
}

/// Right-hand side `-[m g; r_com x m g]` of the equilibrium `G x = b`.
pub fn equilibrium_rhs(est: &InertialEstimate, gravity: &GravityVec) -> Vector6<f64> {
    let weight = gravity.vector() * est.mass;
    let mut b = Vector6::zeros();
    b.fixed_rows_mut::<3>(0).copy_from(&(-weight));
    b.fixed_rows_mut::<3>(3).copy_from(&(-est.com.cross(&weight)));
    b
}

/// Orthonormal `(t1, t2)` completing `n` to a right-handed basis.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let t1 = n.cross(&axis).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Constraint counts of the assembled problem before variable reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub equilibrium: usize,
    pub bending: usize,
    pub compression: usize,
    pub friction_cones: usize,
    pub epigraph_cones: usize,
}

#[derive(Clone, Debug)]
pub struct SocpProblem {
    pub conic: ConicProblem,
    /// Maps the eight reduced wrench variables to the 12-vector `x`.
    pub reduction: SMatrix<f64, 12, 8>,
    /// Rows `t_{1,i}' tau_i`, `t_{2,i}' tau_i` that must vanish.
    pub bending: SMatrix<f64, 4, 12>,
    pub grasp_map: Matrix6x12,
    pub b: Vector6<f64>,
    /// Strictly interior starting point in reduced variables (including `t`).
    pub start: DVector<f64>,
    pub geometry: GraspGeometry,
    pub weight: WrenchWeight,
}

impl SocpProblem {
    pub fn counts(&self) -> ConstraintCounts {
        ConstraintCounts {
            equilibrium: self.conic.a.nrows(),
            bending: self.bending.nrows(),
            compression: self.conic.cones.nonneg,
            friction_cones: self.conic.cones.soc.iter().filter(|&&d| d == 4).count(),
            epigraph_cones: self.conic.cones.soc.iter().filter(|&&d| d == 9).count(),
        }
    }

    fn expand(&self, y: &DVector<f64>) -> SVector<f64, 12> {
        let reduced = SVector::<f64, 8>::from_fn(|i, _| y[i]);
        self.reduction * reduced
    }
}

pub fn assemble_socp(
    geo: &GraspGeometry,
    est: &InertialEstimate,
    weight: &WrenchWeight,
    gravity: &GravityVec,
) -> Result<SocpProblem> {
    if !(est.mass > 0.0) || !est.mass.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "mass estimate must be positive, got {}",
            est.mass
        )));
    }
    if !est.com.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite CoM estimate".into()));
    }
    let grasp_map = build_grasp_map(geo);
    let b = equilibrium_rhs(est, gravity);

    let mut reduction = SMatrix::<f64, 12, 8>::zeros();
    let mut bending = SMatrix::<f64, 4, 12>::zeros();
    for i in 0..2 {
        reduction
            .fixed_view_mut::<3, 3>(6 * i, 4 * i)
            .copy_from(&Matrix3::identity());
        reduction
            .fixed_view_mut::<3, 1>(6 * i + 3, 4 * i + 3)
            .copy_from(&geo.n[i]);
        let (t1, t2) = tangent_basis(&geo.n[i]);
        bending
            .fixed_view_mut::<1, 3>(2 * i, 6 * i + 3)
            .copy_from(&t1.transpose());
        bending
            .fixed_view_mut::<1, 3>(2 * i + 1, 6 * i + 3)
            .copy_from(&t2.transpose());
    }

    let nv = 9;
    let t_idx = 8;
    let reduced_map = grasp_map * reduction;
    let a = DMatrix::from_fn(6, nv, |r, c| if c < 8 { reduced_map[(r, c)] } else { 0.0 });
    let mut c = DVector::zeros(nv);
    c[t_idx] = 1.0;

    // Slack rows s = h - G y, all with h = 0.
    let m = 2 + 4 + 4 + 9;
    let mut g = DMatrix::zeros(m, nv);
    for i in 0..2 {
        let f = 4 * i;
        for k in 0..3 {
            g[(i, f + k)] = geo.n[i][k];
        }
    }
    for i in 0..2 {
        let f = 4 * i;
        let row = 2 + 4 * i;
        let fp = &geo.fp[i];
        let cap = fp.contraction() * fp.mu();
        let (t1, t2) = tangent_basis(&geo.n[i]);
        for k in 0..3 {
            g[(row, f + k)] = cap * geo.n[i][k];
            g[(row + 1, f + k)] = -t1[k];
            g[(row + 2, f + k)] = -t2[k];
        }
        g[(row + 3, f + 3)] = -1.0 / fp.effective_radius();
    }
    let row = 10;
    g[(row, t_idx)] = -1.0;
    for i in 0..2 {
        let f = 4 * i;
        let out = row + 1 + 4 * i;
        for k in 0..3 {
            g[(out + k, f + k)] = -1.0;
        }
        g[(out + 3, f + 3)] = -1.0 / weight.l_c();
    }
    let h = DVector::zeros(m);

    let cones = ConeSpec {
        nonneg: 2,
        soc: vec![4, 4, 9],
    };

    // Symmetric squeeze at twice the centered analytic normal force, gravity split evenly.
    let weight_vec = gravity.vector() * est.mass;
    let mut start = DVector::zeros(nv);
    for i in 0..2 {
        let fp = &geo.fp[i];
        let squeeze = 2.0 * weight_vec.norm() / (2.0 * fp.mu() * fp.contraction());
        let f = -geo.n[i] * squeeze - weight_vec * 0.5;
        start.rows_mut(4 * i, 3).copy_from(&f);
    }
    let x0 = {
        let reduced = SVector::<f64, 8>::from_fn(|i, _| start[i]);
        reduction * reduced
    };
    start[t_idx] = weight.cost(&x0) + 1.0;

    Ok(SocpProblem {
        conic: ConicProblem {
            c,
            a,
            b: DVector::from_column_slice(b.as_slice()),
            g,
            h,
            cones,
        },
        reduction,
        bending,
        grasp_map,
        b,
        start,
        geometry: *geo,
        weight: *weight,
    })
}

fn friction_residuals(x: &SVector<f64, 12>, geo: &GraspGeometry) -> [f64; 2] {
    let sw = StackedWrench { x: *x };
    Side::BOTH.map(|side| {
        let i = side.index();
        decompose(&sw.wrench(side), &geo.n[i])
            .and_then(|d| limit_surface_residual(&d, &geo.fp[i]))
            .unwrap_or(f64::INFINITY)
    })
}

/// Adds the smallest internal squeeze along the line between the contacts
/// that puts both contacts inside their limit surfaces. The squeeze is in
/// the nullspace of the grasp map, so equilibrium is unchanged.
fn squeeze_into_friction_set(x: &SVector<f64, 12>, geo: &GraspGeometry) -> SVector<f64, 12> {
    if friction_residuals(x, geo).iter().all(|&r| r <= 0.0) {
        return *x;
    }
    let d = (geo.r[1] - geo.r[0]).normalize();
    if geo.n[0].dot(&d) >= 0.0 || geo.n[1].dot(&d) <= 0.0 {
        return *x;
    }
    let mut dir = SVector::<f64, 12>::zeros();
    dir.fixed_rows_mut::<3>(0).copy_from(&d);
    dir.fixed_rows_mut::<3>(6).copy_from(&(-d));
    let scale = x.fixed_rows::<3>(0).norm().max(x.fixed_rows::<3>(6).norm()).max(1.0);
    let mut eps = f64::EPSILON * scale;
    for _ in 0..64 {
        let candidate = x + dir * eps;
        if friction_residuals(&candidate, geo).iter().all(|&r| r <= 0.0) {
            return candidate;
        }
        eps *= 2.0;
    }
    *x
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SocpSolution {
    pub x_star: StackedWrench,
    pub t_star: f64,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

pub fn solve_socp(p: &SocpProblem, tol: f64) -> SocpSolution {
    solve_socp_with(
        p,
        &SolverSettings {
            tol,
            ..SolverSettings::default()
        },
    )
}

pub fn solve_socp_with(p: &SocpProblem, settings: &SolverSettings) -> SocpSolution {
    let interior = conic::cone_min_eig(&(&p.conic.h - &p.conic.g * &p.start), &p.conic.cones) > 0.0;
    let sol = conic::solve(&p.conic, interior.then_some(&p.start), settings);
    let (x, t) = match sol.status {
        SolveStatus::Optimal => {
            let x = squeeze_into_friction_set(&p.expand(&sol.x), &p.geometry);
            (x, p.weight.cost(&x))
        }
        SolveStatus::MaxIter => (p.expand(&sol.x), sol.x[8]),
        _ => (SVector::from_element(f64::NAN), f64::NAN),
    };
    SocpSolution {
        x_star: StackedWrench { x },
        t_star: t,
        status: sol.status,
        kkt: KktResiduals {
            primal: sol.primal_residual,
            dual: sol.dual_residual,
            gap: sol.gap,
        },
        iterations: sol.iterations,
    }
}

/// Assembles and solves in one call; non-optimal outcomes become errors.
pub fn optimize(
    geo: &GraspGeometry,
    est: &InertialEstimate,
    weight: &WrenchWeight,
    gravity: &GravityVec,
    tol: f64,
) -> Result<SocpSolution> {
    let p = assemble_socp(geo, est, weight, gravity)?;
    let sol = solve_socp(&p, tol);
    match sol.status {
        SolveStatus::Optimal => Ok(sol),
        SolveStatus::MaxIter => Err(Error::NotConverged(format!(
            "wrench optimization hit the iteration cap ({} iterations)",
            sol.iterations
        ))),
        s => Err(Error::InvalidParameter(format!(
            "wrench optimization ended with status {s:?} after {} iterations",
            sol.iterations
        ))),
    }
}

/// Independent re-evaluation of every constraint on a stacked wrench.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationReport {
    /// `|G x - b|_2`.
    pub equilibrium_residual: f64,
    pub force_residual: f64,
    pub moment_residual: f64,
    /// Limit-surface residual per contact; `+inf` when the contact is not pressed.
    pub limit_surface: [f64; 2],
    pub compression: [bool; 2],
    /// Norm of the torque component tangent to the face.
    pub bending: [f64; 2],
}

impl VerificationReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.equilibrium_residual <= tol
            && self.limit_surface.iter().all(|&r| r <= tol)
            && self.compression.iter().all(|&c| c)
            && self.bending.iter().all(|&b| b <= tol)
    }
}

pub fn verify_solution(
    x: &StackedWrench,
    geo: &GraspGeometry,
    est: &InertialEstimate,
    gravity: &GravityVec,
) -> VerificationReport {
    let residual = build_grasp_map(geo) * x.x - equilibrium_rhs(est, gravity);
    let mut limit_surface = [f64::INFINITY; 2];
    let mut compression = [false; 2];
    let mut bending = [0.0; 2];
    for side in Side::BOTH {
        let i = side.index();
        let w = x.wrench(side);
        if let Ok(d) = decompose(&w, &geo.n[i]) {
            compression[i] = d.f_n <= 0.0;
            bending[i] = d.tau_t.norm();
            limit_surface[i] = limit_surface_residual(&d, &geo.fp[i]).unwrap_or(f64::INFINITY);
        }
    }
    VerificationReport {
        equilibrium_residual: residual.norm(),
        force_residual: residual.fixed_rows::<3>(0).norm(),
        moment_residual: residual.fixed_rows::<3>(3).norm(),
        limit_surface,
        compression,
        bending,
    }
}
