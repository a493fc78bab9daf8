//! Dense primal-dual interior-point solver for small second-order cone programs.
//!
//! Solves
//!
//! ```text
//! minimize    c'x
//! subject to  A x = b
//!             h - G x = s,  s in K
//! ```
//!
//! where `K` is a product of a nonnegative orthant and second-order cones
//! `{(u0, u1) : u0 >= |u1|}`. The iteration runs on the homogeneous
//! self-dual embedding with Nesterov-Todd scaling and a Mehrotra
//! predictor-corrector, so it needs no feasible starting point and returns
//! an infeasibility certificate when one exists.

use nalgebra::{DMatrix, DVector};

/// Cone layout of the slack vector: `nonneg` orthant entries first, then the SOC blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeSpec {
    pub nonneg: usize,
    pub soc: Vec<usize>,
}

impl ConeSpec {
    pub fn dim(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>()
    }

    /// Barrier degree: one per orthant entry and one per SOC.
    pub fn degree(&self) -> usize {
        self.nonneg + self.soc.len()
    }

    fn soc_blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.soc.iter().scan(self.nonneg, |off, &d| {
            let start = *off;
            *off += d;
            Some((start, d))
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConicProblem {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub cones: ConeSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the maximal step to the cone boundary.
    pub step_fraction: f64,
    pub refinement_steps: usize,
    /// Extra iterations allowed after the tolerances are met.
    pub polish_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            step_fraction: 0.99,
            refinement_steps: 3,
            polish_iters: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// No `x` satisfies the constraints; `(y, z)` is a certificate.
    Infeasible,
    /// The objective is unbounded below; `x` is a certificate.
    Unbounded,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub s: DVector<f64>,
    pub iterations: usize,
    /// `max(|Ax - b|_inf, |Gx + s - h|_inf)`.
    pub primal_residual: f64,
    /// `|A'y + G'z + c|_inf`.
    pub dual_residual: f64,
    /// `s'z`.
    pub gap: f64,
}

impl ConicProblem {
    fn check_dims(&self) {
        let n = self.c.len();
        assert_eq!(self.a.ncols(), n, "A columns");
        assert_eq!(self.g.ncols(), n, "G columns");
        assert_eq!(self.a.nrows(), self.b.len(), "A rows vs b");
        assert_eq!(self.g.nrows(), self.h.len(), "G rows vs h");
        assert_eq!(self.cones.dim(), self.h.len(), "cone dimension vs h");
        assert!(self.cones.soc.iter().all(|&d| d >= 1), "empty SOC block");
    }
}

/// Smallest "eigenvalue" of `u` with respect to `K`; positive iff `u` is interior.
pub fn cone_min_eig(u: &DVector<f64>, cones: &ConeSpec) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..cones.nonneg {
        m = m.min(u[i]);
    }
    for (off, d) in cones.soc_blocks() {
        let tail = u.rows(off + 1, d - 1).norm();
        m = m.min(u[off] - tail);
    }
    m
}

fn identity(cones: &ConeSpec) -> DVector<f64> {
    let mut e = DVector::zeros(cones.dim());
    for i in 0..cones.nonneg {
        e[i] = 1.0;
    }
    for (off, _) in cones.soc_blocks() {
        e[off] = 1.0;
    }
    e
}

/// Jordan product `u o v`.
fn jordan(u: &DVector<f64>, v: &DVector<f64>, cones: &ConeSpec) -> DVector<f64> {
    let mut w = DVector::zeros(u.len());
    for i in 0..cones.nonneg {
        w[i] = u[i] * v[i];
    }
    for (off, d) in cones.soc_blocks() {
        let u0 = u[off];
        let v0 = v[off];
        w[off] = u.rows(off, d).dot(&v.rows(off, d));
        for k in 1..d {
            w[off + k] = u0 * v[off + k] + v0 * u[off + k];
        }
    }
    w
}

/// Solves `lambda o u = v` for `u`.
fn jordan_div(lambda: &DVector<f64>, v: &DVector<f64>, cones: &ConeSpec) -> DVector<f64> {
    let mut u = DVector::zeros(v.len());
    for i in 0..cones.nonneg {
        u[i] = v[i] / lambda[i];
    }
    for (off, d) in cones.soc_blocks() {
        let l0 = lambda[off];
        let l1 = lambda.rows(off + 1, d - 1);
        let v1 = v.rows(off + 1, d - 1);
        let det = l0 * l0 - l1.norm_squared();
        let u0 = (l0 * v[off] - l1.dot(&v1)) / det;
        u[off] = u0;
        for k in 1..d {
            u[off + k] = (v[off + k] - u0 * lambda[off + k]) / l0;
        }
    }
    u
}

/// Largest `alpha` with `u + alpha du` in the closed cone (capped at `f64::MAX`).
fn max_step(u: &DVector<f64>, du: &DVector<f64>, cones: &ConeSpec) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..cones.nonneg {
        if du[i] < 0.0 {
            alpha = alpha.min(-u[i] / du[i]);
        }
    }
    for (off, d) in cones.soc_blocks() {
        let u0 = u[off];
        let d0 = du[off];
        let u1 = u.rows(off + 1, d - 1);
        let d1 = du.rows(off + 1, d - 1);
        if d0 < 0.0 {
            alpha = alpha.min(-u0 / d0);
        }
        // q(a) = (u0 + a d0)^2 - |u1 + a d1|^2 = qa a^2 + qb a + qc, with qc > 0.
        let qa = d0 * d0 - d1.norm_squared();
        let qb = 2.0 * (u0 * d0 - u1.dot(&d1));
        let qc = u0 * u0 - u1.norm_squared();
        alpha = alpha.min(smallest_positive_root(qa, qb, qc));
    }
    alpha
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return f64::INFINITY;
    }
    if a.abs() <= 1e-14 * scale {
        return if b < 0.0 { -c / b } else { f64::INFINITY };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut best = f64::INFINITY;
    for r in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
        if r > 0.0 && r < best {
            best = r;
        }
    }
    best
}

/// Nesterov-Todd scaling `W` with `W z = W^{-1} s`, stored per block.
struct Scaling {
    /// `sqrt(s_i / z_i)` for the orthant.
    lp: DVector<f64>,
    /// `(eta, wbar)` for each SOC block.
    soc: Vec<(f64, DVector<f64>)>,
}

impl Scaling {
    fn new(s: &DVector<f64>, z: &DVector<f64>, cones: &ConeSpec) -> Self {
        let lp = DVector::from_fn(cones.nonneg, |i, _| (s[i] / z[i]).sqrt());
        let soc = cones
            .soc_blocks()
            .map(|(off, d)| {
                let sb = s.rows(off, d);
                let zb = z.rows(off, d);
                let s_res = sb[0] * sb[0] - sb.rows(1, d - 1).norm_squared();
                let z_res = zb[0] * zb[0] - zb.rows(1, d - 1).norm_squared();
                let sbar = sb / s_res.sqrt();
                let zbar = zb / z_res.sqrt();
                let gamma = ((1.0 + sbar.dot(&zbar)) / 2.0).sqrt();
                let mut wbar = DVector::zeros(d);
                wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
                for k in 1..d {
                    wbar[k] = (sbar[k] - zbar[k]) / (2.0 * gamma);
                }
                let eta = (s_res / z_res).powf(0.25);
                (eta, wbar)
            })
            .collect();
        Self { lp, soc }
    }

    fn soc_block(eta: f64, wbar: &DVector<f64>, inverse: bool) -> DMatrix<f64> {
        let d = wbar.len();
        let w0 = wbar[0];
        let w1 = wbar.rows(1, d - 1);
        let sign = if inverse { -1.0 } else { 1.0 };
        let factor = if inverse { 1.0 / eta } else { eta };
        let mut m = DMatrix::zeros(d, d);
        m[(0, 0)] = w0;
        for k in 1..d {
            m[(0, k)] = sign * w1[k - 1];
            m[(k, 0)] = sign * w1[k - 1];
        }
        let outer = &w1 * w1.transpose() / (1.0 + w0);
        let mut lower = m.view_mut((1, 1), (d - 1, d - 1));
        lower += outer;
        for k in 1..d {
            m[(k, k)] += 1.0;
        }
        m * factor
    }

    /// Dense `W` (or `W^{-1}`) over the whole cone.
    fn matrix(&self, cones: &ConeSpec, inverse: bool) -> DMatrix<f64> {
        let m = cones.dim();
        let mut w = DMatrix::zeros(m, m);
        for i in 0..cones.nonneg {
            w[(i, i)] = if inverse { 1.0 / self.lp[i] } else { self.lp[i] };
        }
        for ((off, d), (eta, wbar)) in cones.soc_blocks().zip(&self.soc) {
            w.view_mut((off, off), (d, d))
                .copy_from(&Self::soc_block(*eta, wbar, inverse));
        }
        w
    }
}

/// Shifts `u` into the interior of `K` if needed.
fn bring_to_cone(u: &mut DVector<f64>, cones: &ConeSpec) {
    let m = cone_min_eig(u, cones);
    if m <= 0.0 {
        *u += identity(cones) * (1.0 - m);
    }
}

struct Residuals {
    rx: DVector<f64>,
    ry: DVector<f64>,
    rz: DVector<f64>,
    rtau: f64,
}

fn residuals(
    p: &ConicProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    s: &DVector<f64>,
    tau: f64,
    kappa: f64,
) -> Residuals {
    Residuals {
        rx: p.a.tr_mul(y) + p.g.tr_mul(z) + &p.c * tau,
        ry: &p.b * tau - &p.a * x,
        rz: s + &p.g * x - &p.h * tau,
        rtau: kappa + p.c.dot(x) + p.b.dot(y) + p.h.dot(z),
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Runs the interior-point iteration. `x0` seeds the primal point; the slack
/// is taken as `h - G x0` when that is strictly inside `K`.
pub fn solve(p: &ConicProblem, x0: Option<&DVector<f64>>, settings: &SolverSettings) -> ConicSolution {
    p.check_dims();
    let n = p.c.len();
    let np = p.b.len();
    let m = p.h.len();
    let cones = &p.cones;
    let degree = cones.degree() as f64;
    let e = identity(cones);

    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut y = DVector::zeros(np);
    let mut s = &p.h - &p.g * &x;
    bring_to_cone(&mut s, cones);
    let mut z = e.clone();
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let dim = n + np + m + 1;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    type Snapshot = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, f64, f64);
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut polished = 0;

    for it in 0..=settings.max_iter {
        iterations = it;
        let r = residuals(p, &x, &y, &z, &s, tau, kappa);

        let pres = inf_norm(&r.ry).max(inf_norm(&r.rz)) / tau;
        let dres = inf_norm(&r.rx) / tau;
        let gap = s.dot(&z) / (tau * tau);
        if pres <= settings.tol && dres <= settings.tol && gap <= settings.tol {
            // Keep iterating while the KKT merit still halves; the primal point
            // converges more slowly than the residuals.
            let merit = pres.max(dres).max(gap);
            status = SolveStatus::Optimal;
            match &best {
                Some((best_merit, ..)) if merit >= 0.5 * best_merit => break,
                _ => {
                    best = Some((merit, it, (x.clone(), y.clone(), z.clone(), s.clone(), tau, kappa)));
                }
            }
            if polished >= settings.polish_iters {
                break;
            }
            polished += 1;
        } else if best.is_some() {
            break;
        }
        let hz_by = p.h.dot(&z) + p.b.dot(&y);
        if hz_by < 0.0 {
            let certificate = inf_norm(&(p.a.tr_mul(&y) + p.g.tr_mul(&z))) / -hz_by;
            if certificate <= settings.tol {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        let cx = p.c.dot(&x);
        if cx < 0.0 {
            let certificate = inf_norm(&(&p.a * &x)).max(inf_norm(&(&p.g * &x + &s))) / -cx;
            if certificate <= settings.tol {
                status = SolveStatus::Unbounded;
                break;
            }
        }
        if it == settings.max_iter {
            break;
        }

        let scaling = Scaling::new(&s, &z, cones);
        let w = scaling.matrix(cones, false);
        let w_inv = scaling.matrix(cones, true);
        let lambda = &w * &z;
        // Scaled unknown dz' = W dz keeps the cone block at -I.
        let gs = &w_inv * &p.g;
        let hs = &w_inv * &p.h;

        let mut k = DMatrix::zeros(dim, dim);
        let (ox, oy, oz, ot) = (0, n, n + np, n + np + m);
        k.view_mut((ox, oy), (n, np)).copy_from(&p.a.transpose());
        k.view_mut((ox, oz), (n, m)).copy_from(&gs.transpose());
        k.view_mut((ox, ot), (n, 1)).copy_from(&p.c);
        k.view_mut((oy, ox), (np, n)).copy_from(&(-&p.a));
        k.view_mut((oy, ot), (np, 1)).copy_from(&p.b);
        k.view_mut((oz, ox), (m, n)).copy_from(&gs);
        k.view_mut((oz, oz), (m, m)).copy_from(&(-DMatrix::<f64>::identity(m, m)));
        k.view_mut((oz, ot), (m, 1)).copy_from(&(-&hs));
        k.view_mut((ot, ox), (1, n)).copy_from(&p.c.transpose());
        k.view_mut((ot, oy), (1, np)).copy_from(&p.b.transpose());
        k.view_mut((ot, oz), (1, m)).copy_from(&hs.transpose());
        k[(ot, ot)] = -kappa / tau;
        let lu = k.clone().full_piv_lu();

        let solve_kkt = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
            let mut sol = lu.solve(rhs)?;
            for _ in 0..settings.refinement_steps {
                let res = rhs - &k * &sol;
                sol += lu.solve(&res)?;
            }
            Some(sol)
        };

        // Direction for residual reduction `eta_r`, scaled complementarity target `ds_target`
        // (so that `W dz + W^{-1} ds = ds_target`) and `tau dkappa + kappa dtau = dk_target`.
        let direction = |eta_r: f64, ds_target: &DVector<f64>, dk_target: f64| {
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(ox, n).copy_from(&(-&r.rx * eta_r));
            rhs.rows_mut(oy, np).copy_from(&(-&r.ry * eta_r));
            rhs.rows_mut(oz, m)
                .copy_from(&(-(&w_inv * &r.rz) * eta_r - ds_target));
            rhs[ot] = -r.rtau * eta_r - dk_target / tau;
            let sol = solve_kkt(&rhs)?;
            let dx = sol.rows(ox, n).into_owned();
            let dy = sol.rows(oy, np).into_owned();
            let dz_scaled = sol.rows(oz, m).into_owned();
            let dtau = sol[ot];
            let dz = &w_inv * &dz_scaled;
            // Taken from the linearized primal equation so roundoff in W cannot
            // leak into the primal residual.
            let ds = -&r.rz * eta_r - &p.g * &dx + &p.h * dtau;
            let dkappa = (dk_target - kappa * dtau) / tau;
            Some((dx, dy, dz, ds, dtau, dkappa))
        };

        let step_to_boundary = |dz: &DVector<f64>, ds: &DVector<f64>, dtau: f64, dkappa: f64| {
            let mut a = max_step(&s, ds, cones).min(max_step(&z, dz, cones));
            if dtau < 0.0 {
                a = a.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-kappa / dkappa);
            }
            a
        };

        let mu = (s.dot(&z) + tau * kappa) / (degree + 1.0);

        let Some((_, _, dz_a, ds_a, dtau_a, dkappa_a)) = direction(1.0, &(-&lambda), -tau * kappa)
        else {
            break;
        };
        let alpha_aff = step_to_boundary(&dz_a, &ds_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        let corr = jordan(&(&w_inv * &ds_a), &(&w * &dz_a), cones);
        let target = -jordan(&lambda, &lambda, cones) + &e * (sigma * mu) - corr;
        let ds_target = jordan_div(&lambda, &target, cones);
        let dk_target = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
        let Some((dx, dy, dz, ds, dtau, dkappa)) = direction(1.0 - sigma, &ds_target, dk_target)
        else {
            break;
        };
        let alpha = (settings.step_fraction * step_to_boundary(&dz, &ds, dtau, dkappa)).min(1.0);

        x += dx * alpha;
        y += dy * alpha;
        z += dz * alpha;
        s += ds * alpha;
        tau += dtau * alpha;
        kappa += dkappa * alpha;
    }

    if let Some((_, it, (bx, by, bz, bs, btau, bkappa))) = best {
        (x, y, z, s, tau, kappa, iterations) = (bx, by, bz, bs, btau, bkappa, it);
    }
    let r = residuals(p, &x, &y, &z, &s, tau, kappa);
    match status {
        SolveStatus::Infeasible => {
            let scale = -(p.h.dot(&z) + p.b.dot(&y));
            ConicSolution {
                status,
                x: DVector::from_element(n, f64::NAN),
                y: y / scale,
                z: z / scale,
                s: DVector::from_element(m, f64::NAN),
                iterations,
                primal_residual: f64::NAN,
                dual_residual: f64::NAN,
                gap: f64::NAN,
            }
        }
        SolveStatus::Unbounded => {
            let scale = -p.c.dot(&x);
            ConicSolution {
                status,
                x: x / scale,
                y: DVector::from_element(np, f64::NAN),
                z: DVector::from_element(m, f64::NAN),
                s: s / scale,
                iterations,
                primal_residual: f64::NAN,
                dual_residual: f64::NAN,
                gap: f64::NAN,
            }
        }
        _ => ConicSolution {
            status,
            primal_residual: inf_norm(&r.ry).max(inf_norm(&r.rz)) / tau,
            dual_residual: inf_norm(&r.rx) / tau,
            gap: s.dot(&z) / (tau * tau),
            x: x / tau,
            y: y / tau,
            z: z / tau,
            s: s / tau,
            iterations,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn lp_only(c: &[f64], a: DMatrix<f64>, b: &[f64]) -> ConicProblem {
        let n = c.len();
        ConicProblem {
            c: dv(c),
            a,
            b: dv(b),
            g: -DMatrix::identity(n, n),
            h: DVector::zeros(n),
            cones: ConeSpec {
                nonneg: n,
                soc: vec![],
            },
        }
    }

    #[test]
    fn simple_lp() {
        let p = lp_only(&[-1.0, 0.0], DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &[1.0]);
        let sol = solve(&p, None, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.x[1], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn infeasible_lp() {
        let p = lp_only(&[1.0, 1.0], DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &[-1.0]);
        let sol = solve(&p, None, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
        // Certificate: h'z + b'y = -1, A'y + G'z ~ 0, z in K.
        assert_relative_eq!(p.b.dot(&sol.y) + p.h.dot(&sol.z), -1.0, epsilon = 1e-12);
        assert!(cone_min_eig(&sol.z, &p.cones) >= -1e-9);
    }

    #[test]
    fn unbounded_lp() {
        let p = lp_only(&[-1.0, 0.0], DMatrix::zeros(0, 2), &[]);
        let sol = solve(&p, None, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    /// Distance from `q` to the hyperplane `a'x = beta`, as `min t s.t. |x - q| <= t`.
    fn projection_problem(q: &[f64], a: &[f64], beta: f64) -> ConicProblem {
        let d = q.len();
        let n = d + 1;
        let mut c = DVector::zeros(n);
        c[d] = 1.0;
        let mut arow = DMatrix::zeros(1, n);
        for i in 0..d {
            arow[(0, i)] = a[i];
        }
        let mut g = DMatrix::zeros(n, n);
        let mut h = DVector::zeros(n);
        g[(0, d)] = -1.0;
        for i in 0..d {
            g[(i + 1, i)] = -1.0;
            h[i + 1] = -q[i];
        }
        ConicProblem {
            c,
            a: arow,
            b: dv(&[beta]),
            g,
            h,
            cones: ConeSpec {
                nonneg: 0,
                soc: vec![n],
            },
        }
    }

    #[test]
    fn soc_projection_matches_closed_form() {
        let q = [1.0, 2.0, -0.5];
        let a = [0.3, -1.0, 2.0];
        let beta = 4.0;
        let p = projection_problem(&q, &a, beta);
        let sol = solve(&p, None, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        let an = dv(&a);
        let dist = (beta - an.dot(&dv(&q))).abs() / an.norm();
        assert_relative_eq!(sol.x[3], dist, epsilon = 1e-7);
        assert!(sol.primal_residual <= 1e-8 && sol.dual_residual <= 1e-8 && sol.gap <= 1e-8);
    }

    #[test]
    fn scaling_maps_z_and_s_to_same_point() {
        let cones = ConeSpec {
            nonneg: 2,
            soc: vec![3, 4],
        };
        let s = dv(&[1.0, 2.0, 3.0, 1.0, -1.0, 2.0, 0.5, 0.3, -0.2]);
        let z = dv(&[0.5, 4.0, 1.0, 0.2, 0.3, 5.0, -1.0, 2.0, 1.0]);
        let sc = Scaling::new(&s, &z, &cones);
        let w = sc.matrix(&cones, false);
        let wi = sc.matrix(&cones, true);
        assert!((&w * &wi - DMatrix::identity(9, 9)).amax() < 1e-12);
        assert!((&w * &z - &wi * &s).amax() < 1e-12);
    }

    #[test]
    fn jordan_division_inverts_product() {
        let cones = ConeSpec {
            nonneg: 1,
            soc: vec![3],
        };
        let lambda = dv(&[2.0, 3.0, 0.5, -1.0]);
        let v = dv(&[1.0, -2.0, 0.7, 4.0]);
        let u = jordan_div(&lambda, &v, &cones);
        assert!((jordan(&lambda, &u, &cones) - v).amax() < 1e-13);
    }

    #[test]
    fn max_step_hits_boundary() {
        let cones = ConeSpec {
            nonneg: 0,
            soc: vec![2],
        };
        // (1, 0) + a (0, 1) leaves the cone at a = 1.
        let a = max_step(&dv(&[1.0, 0.0]), &dv(&[0.0, 1.0]), &cones);
        assert_relative_eq!(a, 1.0, epsilon = 1e-15);
        let a = max_step(&dv(&[1.0, 0.0]), &dv(&[1.0, 0.0]), &cones);
        assert!(a.is_infinite());
    }

    proptest! {
        #[test]
        fn projection_random(q in prop::array::uniform3(-5.0f64..5.0),
                             a in prop::array::uniform3(-2.0f64..2.0),
                             beta in -5.0f64..5.0) {
            prop_assume!(dv(&a).norm() > 0.1);
            let p = projection_problem(&q, &a, beta);
            let sol = solve(&p, None, &SolverSettings::default());
            prop_assert_eq!(sol.status, SolveStatus::Optimal);
            let an = dv(&a);
            let dist = (beta - an.dot(&dv(&q))).abs() / an.norm();
            prop_assert!((sol.x[3] - dist).abs() < 1e-6);
        }
    }
}
