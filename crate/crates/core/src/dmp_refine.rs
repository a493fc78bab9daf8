//! Trajectory refinement: per-dimension dynamic movement primitives fitted to a
//! reference box path, then improved by cross-entropy search over the basis
//! weights against plant rollouts.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simplant::{handle_pose, GraspedPlant};
use crate::spatial::Pose6;

pub const DEFAULT_BASIS: usize = 20;
pub const DEFAULT_ALPHA_Z: f64 = 25.0;
const RK4_SUBSTEPS: usize = 10;
const COVARIANCE_FLOOR: f64 = 1e-12;

/// Time-indexed box poses on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RefTrajectory {
    pub samples: Vec<Pose6>,
    pub dt: f64,
    /// Tracking covariance; identity when absent.
    pub sigma: Option<Matrix6<f64>>,
}

const TRAJ_HEADER: [&str; 7] = ["t", "x", "y", "z", "rx", "ry", "rz"];

impl RefTrajectory {
    pub fn new(samples: Vec<Pose6>, dt: f64, sigma: Option<Matrix6<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::DegenerateTrajectory(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::DegenerateTrajectory(format!("sample interval {dt}")));
        }
        if samples.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateTrajectory("non-finite pose".into()));
        }
        if let Some(s) = &sigma {
            if (s - s.transpose()).amax() > 1e-12 || s.cholesky().is_none() {
                return Err(Error::NotPositiveDefinite);
            }
        }
        Ok(Self { samples, dt, sigma })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt
    }

    /// One component of every sample.
    pub fn component(&self, d: usize) -> Vec<f64> {
        self.samples.iter().map(|p| p.to_vector()[d]).collect()
    }

    /// Minimum-jerk interpolation between two poses.
    pub fn min_jerk(start: &Pose6, goal: &Pose6, duration: f64, dt: f64) -> Result<Self> {
        if !(duration > 0.0) || !(dt > 0.0) {
            return Err(Error::DegenerateTrajectory(format!(
                "duration {duration}, interval {dt}"
            )));
        }
        let steps = (duration / dt).round() as usize;
        let delta = goal.difference(start);
        let samples = (0..=steps)
            .map(|k| {
                let p = k as f64 / steps as f64;
                let s = p * p * p * (10.0 - 15.0 * p + 6.0 * p * p);
                start.offset(&(delta * s))
            })
            .collect();
        Self::new(samples, duration / steps as f64, None)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRAJ_HEADER)?;
        for (k, p) in self.samples.iter().enumerate() {
            let v = p.to_vector();
            let mut row = vec![format!("{:e}", k as f64 * self.dt)];
            row.extend(v.iter().map(|x| format!("{x:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `t,x,y,z,rx,ry,rz` rows; times must be uniformly spaced.
    pub fn read_csv<R: Read>(reader: R, sigma: Option<Matrix6<f64>>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().map(str::trim).ne(TRAJ_HEADER) {
            return Err(Error::InvalidParameter(format!(
                "trajectory header must be {}, got {}",
                TRAJ_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidParameter(format!("row {}: {e}", line + 1)))?;
            if vals.len() != 7 {
                return Err(Error::InvalidParameter(format!("row {} has {} fields", line + 1, vals.len())));
            }
            times.push(vals[0]);
            samples.push(Pose6::from_vector(&Vector6::from_column_slice(&vals[1..])));
        }
        if times.len() < 2 {
            return Err(Error::DegenerateTrajectory(format!("{} samples", times.len())));
        }
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        for (k, t) in times.iter().enumerate() {
            if (t - times[0] - k as f64 * dt).abs() > 1e-6 * dt.abs().max(1e-9) + 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "non-uniform time stamps at row {}",
                    k + 1
                )));
            }
        }
        Self::new(samples, dt, sigma)
    }
}

/// Shared canonical system and basis of all dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DmpBasis {
    pub alpha_x: f64,
    pub alpha_z: f64,
    pub beta_z: f64,
    pub centers: DVector<f64>,
    pub widths: DVector<f64>,
}

impl DmpBasis {
    /// Phase decays to 0.01 at the end time; critically damped transformation system.
    pub fn new(n_basis: usize) -> Result<Self> {
        if n_basis < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 basis functions, got {n_basis}"
            )));
        }
        let alpha_x = -(0.01f64).ln();
        let centers = DVector::from_fn(n_basis, |i, _| (-alpha_x * i as f64 / (n_basis - 1) as f64).exp());
        let widths = DVector::from_fn(n_basis, |i, _| {
            let j = if i + 1 < n_basis { i } else { i - 1 };
            1.0 / (centers[j] - centers[j + 1]).powi(2)
        });
        Ok(Self {
            alpha_x,
            alpha_z: DEFAULT_ALPHA_Z,
            beta_z: DEFAULT_ALPHA_Z / 4.0,
            centers,
            widths,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn activations(&self, s: f64) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            (-self.widths[i] * (s - self.centers[i]).powi(2)).exp()
        })
    }

    fn forcing(&self, s: f64, weights: &DVector<f64>) -> f64 {
        let psi = self.activations(s);
        let total = psi.sum();
        if total <= 0.0 {
            return 0.0;
        }
        s * psi.dot(weights) / total
    }

    fn phase(&self, t: f64, tau: f64) -> f64 {
        (-self.alpha_x * t / tau).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmpDim {
    pub weights: DVector<f64>,
    pub start: f64,
    pub goal: f64,
}

/// Six one-dimensional primitives sharing a time base.
#[derive(Clone, Debug, PartialEq)]
pub struct DmpParams {
    pub basis: DmpBasis,
    pub dims: [DmpDim; 6],
    pub duration: f64,
    pub dt: f64,
    pub n_samples: usize,
}

fn gradient(y: &[f64], dt: f64) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|k| match k {
            0 => (y[1] - y[0]) / dt,
            k if k == n - 1 => (y[n - 1] - y[n - 2]) / dt,
            k => (y[k + 1] - y[k - 1]) / (2.0 * dt),
        })
        .collect()
}

/// Locally weighted regression of the forcing term on the reference.
pub fn fit_dmp(reference: &RefTrajectory, n_basis: usize) -> Result<DmpParams> {
    let basis = DmpBasis::new(n_basis)?;
    let tau = reference.duration();
    if !(tau > 0.0) {
        return Err(Error::DegenerateTrajectory("zero duration".into()));
    }
    let dt = reference.dt;
    let n = reference.len();
    let phases: Vec<f64> = (0..n).map(|k| basis.phase(k as f64 * dt, tau)).collect();
    let acts: Vec<DVector<f64>> = phases.iter().map(|&s| basis.activations(s)).collect();
    let dims = std::array::from_fn(|d| {
        let y = reference.component(d);
        let yd = gradient(&y, dt);
        let ydd = gradient(&yd, dt);
        let goal = y[n - 1];
        let mut num = DVector::zeros(n_basis);
        let mut den = DVector::zeros(n_basis);
        for k in 0..n {
            let target = tau * tau * ydd[k]
                - basis.alpha_z * (basis.beta_z * (goal - y[k]) - tau * yd[k]);
            let s = phases[k];
            num += &acts[k] * (s * target);
            den += &acts[k] * (s * s);
        }
        let weights = DVector::from_fn(n_basis, |i, _| if den[i] > 1e-300 { num[i] / den[i] } else { 0.0 });
        DmpDim {
            weights,
            start: y[0],
            goal,
        }
    });
    Ok(DmpParams {
        basis,
        dims,
        duration: tau,
        dt,
        n_samples: n,
    })
}

impl DmpParams {
    /// Integrates one dimension from rest at its start value, RK4 with fixed substeps.
    pub fn rollout_dim(&self, d: usize, weights: &DVector<f64>) -> Vec<f64> {
        let dim = &self.dims[d];
        let b = &self.basis;
        let tau = self.duration;
        let deriv = |t: f64, y: f64, v: f64| {
            let f = b.forcing(b.phase(t, tau), weights);
            let vd = (b.alpha_z * (b.beta_z * (dim.goal - y) - v) + f) / tau;
            (v / tau, vd)
        };
        let h = self.dt / RK4_SUBSTEPS as f64;
        let mut out = Vec::with_capacity(self.n_samples);
        let (mut y, mut v) = (dim.start, 0.0);
        out.push(y);
        for k in 1..self.n_samples {
            for j in 0..RK4_SUBSTEPS {
                let t = (k - 1) as f64 * self.dt + j as f64 * h;
                let (k1y, k1v) = deriv(t, y, v);
                let (k2y, k2v) = deriv(t + h / 2.0, y + h / 2.0 * k1y, v + h / 2.0 * k1v);
                let (k3y, k3v) = deriv(t + h / 2.0, y + h / 2.0 * k2y, v + h / 2.0 * k2v);
                let (k4y, k4v) = deriv(t + h, y + h * k3y, v + h * k3v);
                y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
                v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            }
            out.push(y);
        }
        out
    }

    pub fn weights(&self) -> [DVector<f64>; 6] {
        std::array::from_fn(|d| self.dims[d].weights.clone())
    }

    /// The reference with the active dimensions replaced by primitive rollouts.
    pub fn trajectory(&self, weights: &[DVector<f64>; 6], active: &[bool; 6], reference: &RefTrajectory) -> Vec<Pose6> {
        let mut vecs: Vec<Vector6<f64>> = reference.samples.iter().map(Pose6::to_vector).collect();
        for d in (0..6).filter(|&d| active[d]) {
            for (v, y) in vecs.iter_mut().zip(self.rollout_dim(d, &weights[d])) {
                v[d] = y;
            }
        }
        vecs.iter().map(Pose6::from_vector).collect()
    }
}

/// Search distribution and CEM hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationState {
    /// Weight covariance per pose dimension.
    pub sigma: [DMatrix<f64>; 6],
    pub c: f64,
    pub rollouts: usize,
    pub elites: usize,
    pub eps_conv: f64,
    pub alpha_cost: f64,
    pub max_iter: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CemSettings {
    pub c: f64,
    pub rollouts: usize,
    pub elites: usize,
    pub eps_conv: f64,
    pub alpha_cost: f64,
    pub max_iter: usize,
}

impl Default for CemSettings {
    fn default() -> Self {
        Self {
            c: 1000.0,
            rollouts: 50,
            elites: 5,
            eps_conv: 1e-2,
            alpha_cost: 0.2,
            max_iter: 500,
        }
    }
}

impl ExplorationState {
    /// Isotropic start `c I` in every dimension.
    pub fn new(n_basis: usize, settings: &CemSettings) -> Result<Self> {
        let CemSettings {
            c,
            rollouts,
            elites,
            eps_conv,
            alpha_cost,
            max_iter,
        } = *settings;
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("exploration magnitude {c}")));
        }
        if elites == 0 || elites > rollouts {
            return Err(Error::InvalidParameter(format!(
                "elite count {elites} must be in 1..={rollouts}"
            )));
        }
        if !(eps_conv > 0.0 && eps_conv < c) {
            return Err(Error::InvalidParameter(format!(
                "convergence threshold {eps_conv} must be in (0, {c})"
            )));
        }
        if !(alpha_cost > 0.0 && alpha_cost < 1.0) {
            return Err(Error::InvalidParameter(format!("cost weight {alpha_cost} outside (0, 1)")));
        }
        if max_iter == 0 {
            return Err(Error::InvalidParameter("iteration cap must be positive".into()));
        }
        Ok(Self {
            sigma: std::array::from_fn(|_| DMatrix::identity(n_basis, n_basis) * c),
            c,
            rollouts,
            elites,
            eps_conv,
            alpha_cost,
            max_iter,
        })
    }

    /// Largest covariance entry over the given dimensions.
    pub fn max_entry(&self, active: &[bool; 6]) -> f64 {
        (0..6)
            .filter(|&d| active[d])
            .map(|d| self.sigma[d].max())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn converged(&self, active: &[bool; 6]) -> bool {
        self.max_entry(active) < self.eps_conv
    }
}

fn psd_sqrt(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sigma.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `R` draws per active dimension from `N(mean_d, Sigma_d)`; inactive dimensions keep the mean.
pub fn sample_candidates(
    mean: &[DVector<f64>; 6],
    exploration: &ExplorationState,
    active: &[bool; 6],
    rng: &mut ChaCha8Rng,
) -> Vec<[DVector<f64>; 6]> {
    let roots: Vec<Option<DMatrix<f64>>> = (0..6)
        .map(|d| active[d].then(|| psd_sqrt(&exploration.sigma[d])))
        .collect();
    (0..exploration.rollouts)
        .map(|_| {
            std::array::from_fn(|d| match &roots[d] {
                Some(l) => {
                    let xi = DVector::from_fn(mean[d].len(), |_, _| StandardNormal.sample(rng));
                    &mean[d] + l * xi
                }
                None => mean[d].clone(),
            })
        })
        .collect()
}

pub fn sample_candidates_seeded(
    mean: &[DVector<f64>; 6],
    exploration: &ExplorationState,
    active: &[bool; 6],
    seed: u64,
) -> Vec<[DVector<f64>; 6]> {
    sample_candidates(mean, exploration, active, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RolloutCost {
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
}

impl RolloutCost {
    pub const FAILED: Self = Self {
        j: f64::INFINITY,
        j1: f64::INFINITY,
        j2: f64::INFINITY,
    };
}

/// Mahalanobis tracking cost plus squared environment force, blended by `alpha`.
pub fn score_rollout(
    simulated: &[Pose6],
    env_forces: &[Vector3<f64>],
    reference: &RefTrajectory,
    alpha: f64,
) -> Result<RolloutCost> {
    if simulated.len() != reference.len() {
        return Err(Error::TimeBaseMismatch(simulated.len(), reference.len()));
    }
    if env_forces.len() != reference.len() {
        return Err(Error::TimeBaseMismatch(env_forces.len(), reference.len()));
    }
    let info = match &reference.sigma {
        Some(s) => s.try_inverse().ok_or(Error::NotPositiveDefinite)?,
        None => Matrix6::identity(),
    };
    let j1: f64 = simulated
        .iter()
        .zip(&reference.samples)
        .map(|(z, r)| {
            let e = z.difference(r);
            e.dot(&(info * e))
        })
        .sum();
    let j2: f64 = env_forces.iter().map(|f| f.norm_squared()).sum();
    Ok(RolloutCost {
        j: alpha * j1 + (1.0 - alpha) * j2,
        j1,
        j2,
    })
}

/// Candidate indices by ascending cost; ties keep index order, NaN sorts last.
pub fn elite_order(costs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (costs[a], costs[b]);
        match (ca.is_nan(), cb.is_nan()) {
            (false, false) => ca.total_cmp(&cb),
            (a_nan, b_nan) => a_nan.cmp(&b_nan),
        }
    });
    idx
}

/// New mean is the best candidate; covariance of the `k_e` elites about that new mean.
pub fn cem_update(costs: &[f64], candidates: &[DVector<f64>], k_e: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if costs.len() != candidates.len() {
        return Err(Error::InvalidParameter(format!(
            "{} costs for {} candidates",
            costs.len(),
            candidates.len()
        )));
    }
    if k_e == 0 || k_e > candidates.len() {
        return Err(Error::InvalidParameter(format!(
            "elite count {k_e} must be in 1..={}",
            candidates.len()
        )));
    }
    let order = elite_order(costs);
    let mean = candidates[order[0]].clone();
    let n = mean.len();
    let mut cov = DMatrix::zeros(n, n);
    for &k in &order[..k_e] {
        let d = &candidates[k] - &mean;
        cov += &d * d.transpose();
    }
    Ok((mean, cov / k_e as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Converged,
    IterationCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub best: RolloutCost,
    pub max_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    pub status: RefineStatus,
    pub trajectory: RefTrajectory,
    /// Handle references along the refined box path.
    pub handle_refs: Vec<[Pose6; 2]>,
    pub weights: [DVector<f64>; 6],
    /// Cost of the unmodified reference.
    pub nominal: RolloutCost,
    pub best: RolloutCost,
    pub history: Vec<IterationRecord>,
    pub iterations: usize,
}

/// Simulates a box path and scores it; settle failures cost `+inf`.
pub fn evaluate_path(path: &[Pose6], plant: &GraspedPlant, reference: &RefTrajectory, alpha: f64) -> RolloutCost {
    match plant.track(path) {
        Ok(out) if out.failed_at.is_none() => {
            score_rollout(&out.poses, &out.env_forces, reference, alpha).unwrap_or(RolloutCost::FAILED)
        }
        _ => RolloutCost::FAILED,
    }
}

/// Sample, roll out, score and update until the active covariances fall below
/// the threshold. The current mean competes with every batch, so the best cost
/// never increases.
pub fn refine(
    reference: &RefTrajectory,
    params: &DmpParams,
    exploration: &mut ExplorationState,
    plant: &GraspedPlant,
    active: &[bool; 6],
    seed: u64,
) -> Result<RefineResult> {
    if params.n_samples != reference.len() {
        return Err(Error::TimeBaseMismatch(params.n_samples, reference.len()));
    }
    let alpha = exploration.alpha_cost;
    let nominal = evaluate_path(&reference.samples, plant, reference, alpha);
    let mut mean = params.weights();
    let mut best = evaluate_path(&params.trajectory(&mean, active, reference), plant, reference, alpha);
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iterations = 0;
    let status = loop {
        if !active.iter().any(|&a| a) || exploration.converged(active) {
            break RefineStatus::Converged;
        }
        if iterations == exploration.max_iter {
            break RefineStatus::IterationCap;
        }
        iterations += 1;
        let mut pool = vec![mean.clone()];
        pool.extend(sample_candidates(&mean, exploration, active, &mut rng));
        let mut costs = vec![best];
        costs.extend(
            pool[1..]
                .par_iter()
                .map(|w| evaluate_path(&params.trajectory(w, active, reference), plant, reference, alpha))
                .collect::<Vec<_>>(),
        );
        let js: Vec<f64> = costs.iter().map(|c| c.j).collect();
        let top = elite_order(&js)[0];
        for d in (0..6).filter(|&d| active[d]) {
            let column: Vec<DVector<f64>> = pool.iter().map(|w| w[d].clone()).collect();
            let (m, cov) = cem_update(&js, &column, exploration.elites)?;
            mean[d] = m;
            exploration.sigma[d] = cov + DMatrix::identity(mean[d].len(), mean[d].len()) * COVARIANCE_FLOOR;
        }
        best = costs[top];
        history.push(IterationRecord {
            iteration: iterations,
            best,
            max_sigma: exploration.max_entry(active),
        });
    };
    let samples = params.trajectory(&mean, active, reference);
    let handle_refs = samples
        .iter()
        .map(|p| plant.offsets.map(|o| handle_pose(p, &o)))
        .collect();
    Ok(RefineResult {
        status,
        trajectory: RefTrajectory::new(samples, reference.dt, reference.sigma)?,
        handle_refs,
        weights: mean,
        nominal,
        best,
        history,
        iterations,
    })
}

impl RefineResult {
    /// Hyperparameters, seed and per-iteration best costs as `key = value` lines.
    pub fn write_log<W: Write>(&self, mut w: W, exploration: &ExplorationState, active: &[bool; 6], seed: u64) -> Result<()> {
        writeln!(w, "# trajectory refinement log")?;
        writeln!(w, "seed = {seed}")?;
        writeln!(w, "rollouts = {}", exploration.rollouts)?;
        writeln!(w, "elites = {}", exploration.elites)?;
        writeln!(w, "c = {:e}", exploration.c)?;
        writeln!(w, "eps_conv = {:e}", exploration.eps_conv)?;
        writeln!(w, "alpha_cost = {:e}", exploration.alpha_cost)?;
        writeln!(w, "max_iter = {}", exploration.max_iter)?;
        let dims: Vec<String> = (0..6).filter(|&d| active[d]).map(|d| TRAJ_HEADER[d + 1].to_string()).collect();
        writeln!(w, "active_dims = [{}]", dims.join(", "))?;
        writeln!(w, "status = {:?}", self.status)?;
        writeln!(w, "iterations = {}", self.iterations)?;
        writeln!(w, "nominal = {{ j = {:e}, j1 = {:e}, j2 = {:e} }}", self.nominal.j, self.nominal.j1, self.nominal.j2)?;
        writeln!(w, "refined = {{ j = {:e}, j1 = {:e}, j2 = {:e} }}", self.best.j, self.best.j1, self.best.j2)?;
        writeln!(w, "# iteration, best_j, best_j1, best_j2, max_sigma")?;
        for r in &self.history {
            writeln!(
                w,
                "{}, {:e}, {:e}, {:e}, {:e}",
                r.iteration, r.best.j, r.best.j1, r.best.j2, r.max_sigma
            )?;
        }
        Ok(())
    }
}
