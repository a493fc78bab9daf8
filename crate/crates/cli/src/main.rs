mod svg;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use boxlift::dmp_refine::RefineStatus;
use boxlift::estimator::{resultant_moment, InertialEstimate, MeasurementBatch};
use boxlift::exec_loop::ExecSummary;
use boxlift::friction::limit_surface_boundary;
use boxlift::pipeline::{
    centered_estimate, handle_references, lift_and_estimate, naive_wrenches, optimize_wrenches, refine_scenario,
    run_pipeline, Phases, PipelineReport,
};
use boxlift::scenario::{Scenario, ScenarioConfig};
use boxlift::spatial::{skew, Pose6, Side, Wrench};
use boxlift::wrench_opt::{verify_solution, StackedWrench};
use clap::{Args, Parser, Subcommand};

use svg::{Plot, Series};

const BOUNDARY_SAMPLES: usize = 181;

#[derive(Parser)]
#[command(name = "boxlift", version, about = "Dual-arm box lifting in quasi-static simulation")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Seed override; defaults to the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Friction safety margin override.
    #[arg(long, global = true)]
    rs: Option<f64>,
    /// Friction coefficient override.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// Characteristic length of the wrench weighting override [m].
    #[arg(long, global = true)]
    lc: Option<f64>,
    /// Execute the nominal trajectory instead of the refined one.
    #[arg(long, global = true)]
    no_phase1: bool,
    /// Assume the CoM at the geometric center with the true mass.
    #[arg(long, global = true)]
    no_phase2: bool,
    /// Naive symmetric wrench assignment instead of the optimized one.
    #[arg(long, global = true)]
    no_phase3: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Refine the reference trajectory against the contact surrogate.
    Refine,
    /// Lift the box and estimate mass and CoM from the handle wrenches.
    Estimate,
    /// Distribute the holding wrench between the two contacts.
    Optimize,
    /// Full pipeline: refine, lift, estimate, optimize and transport.
    Run,
    /// Compare the full pipeline against each single-phase ablation.
    Report,
}

/// Input problems exit with 1, iterative methods that give up exit with 2.
enum Failure {
    Input(anyhow::Error),
    NoConvergence(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let convergence = e
            .chain()
            .any(|c| c.downcast_ref::<boxlift::Error>().is_some_and(boxlift::Error::is_convergence_failure));
        if convergence {
            Failure::NoConvergence(e)
        } else {
            Failure::Input(e)
        }
    }
}

impl From<boxlift::Error> for Failure {
    fn from(e: boxlift::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::NoConvergence(e)) => {
            eprintln!("not converged: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let o = &cli.opts;
    let path = o
        .scenario
        .as_deref()
        .ok_or_else(|| Failure::Input(anyhow::anyhow!("--scenario <path> is required")))?;
    let scenario = load_scenario(path, o)?;
    let seed = o.seed.unwrap_or(scenario.config.seed);
    fs::create_dir_all(&o.out).with_context(|| format!("cannot create {}", o.out.display()))?;
    let phases = Phases {
        refine: !o.no_phase1,
        estimate: !o.no_phase2,
        optimize: !o.no_phase3,
    };
    match cli.command {
        Command::Refine => cmd_refine(&scenario, seed, &o.out),
        Command::Estimate => cmd_estimate(&scenario, seed, &o.out),
        Command::Optimize => cmd_optimize(&scenario, seed, phases, &o.out),
        Command::Run => cmd_run(&scenario, seed, phases, &o.out),
        Command::Report => cmd_report(&scenario, seed, &o.out),
    }
}

fn load_scenario(path: &Path, o: &GlobalOpts) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read scenario {}", path.display()))?;
    let mut config = ScenarioConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(rs) = o.rs {
        config.friction.r_s = rs;
    }
    if let Some(mu) = o.mu {
        config.friction.mu = mu;
    }
    if let Some(lc) = o.lc {
        config.phase3.l_c = Some(lc);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(Scenario::build(config, base)?)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = out.join(name);
    let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
}

fn write_handle_refs<W: Write>(mut w: W, dt: f64, refs: &[[Pose6; 2]]) -> Result<()> {
    writeln!(w, "t,l_x,l_y,l_z,l_rx,l_ry,l_rz,r_x,r_y,r_z,r_rx,r_ry,r_rz")?;
    for (k, pair) in refs.iter().enumerate() {
        let mut row = format!("{:e}", k as f64 * dt);
        for p in pair {
            for v in p.to_vector().iter() {
                write!(row, ",{v:e}")?;
            }
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn yz_path(samples: &[Pose6]) -> Vec<(f64, f64)> {
    samples.iter().map(|p| (p.position.y, p.position.z)).collect()
}

fn cmd_refine(s: &Scenario, seed: u64, out: &Path) -> CmdResult {
    let (result, exploration) = refine_scenario(s, seed)?;
    result.trajectory.write_csv(create(out, "refined_trajectory.csv")?)?;
    write_handle_refs(create(out, "handle_refs.csv")?, result.trajectory.dt, &result.handle_refs)?;
    result.write_log(create(out, "refine_log.txt")?, &exploration, &s.active_dims, seed)?;

    let costs: Vec<(f64, f64)> = result.history.iter().map(|r| (r.iteration as f64, r.best.j)).collect();
    let contact: Vec<(f64, f64)> = result.history.iter().map(|r| (r.iteration as f64, r.best.j2)).collect();
    let cost_plot = Plot::new("Best rollout cost per iteration", "iteration", "cost")
        .with(Series::line("J", costs))
        .with(Series::dashed("J2 (contact)", contact));
    write_text(out, "refine_cost.svg", &cost_plot.render())?;

    let mut path_plot = Plot::new("Box path, side view", "y [m]", "z [m]")
        .with(Series::dashed("reference", yz_path(&s.reference.samples)))
        .with(Series::line("refined", yz_path(&result.trajectory.samples)));
    for shelf in s.env.shelves() {
        let (y0, y1, z0, z1) = (shelf.min[1], shelf.max[1], shelf.min[2], shelf.max[2]);
        path_plot = path_plot.with(Series::line("shelf", vec![(y0, z0), (y1, z0), (y1, z1), (y0, z1), (y0, z0)]));
    }
    write_text(out, "refine_path.svg", &path_plot.render())?;

    let reduction = if result.nominal.j2 > 0.0 {
        format!("{:.2}%", 100.0 * (1.0 - result.best.j2 / result.nominal.j2))
    } else {
        "n/a (nominal path is contact free)".into()
    };
    println!(
        "refine: {:?} after {} iterations; J {:.4e} -> {:.4e}, contact cost reduction {reduction}",
        result.status, result.iterations, result.nominal.j, result.best.j
    );
    match result.status {
        RefineStatus::Converged => Ok(()),
        RefineStatus::IterationCap => Err(Failure::NoConvergence(anyhow::anyhow!(
            "exploration covariance did not shrink below eps_conv within {} iterations",
            result.iterations
        ))),
    }
}

/// RMS force and moment residuals of the regression over a batch.
fn estimate_residuals(batch: &MeasurementBatch, est: &InertialEstimate) -> (f64, f64) {
    let g = batch.gravity.vector();
    let lever = skew(&(g * est.mass));
    let (mut f2, mut m2) = (0.0, 0.0);
    for (j, (l, r)) in batch.samples.iter().enumerate() {
        f2 += (l.force + r.force + g * est.mass).norm_squared();
        m2 += (resultant_moment(batch, j) - lever * est.com).norm_squared();
    }
    let n = batch.len() as f64;
    ((f2 / n).sqrt(), (m2 / n).sqrt())
}

fn cmd_estimate(s: &Scenario, seed: u64, out: &Path) -> CmdResult {
    let lift = lift_and_estimate(s, seed.wrapping_add(1))?;
    let est = lift.estimate;
    let (rf, rm) = estimate_residuals(&lift.noisy, &est);
    let truth = s.model.true_com();
    let m_true = s.model.total_mass();
    let mut r = String::new();
    writeln!(r, "# inertial estimate").unwrap();
    writeln!(r, "seed = {seed}").unwrap();
    writeln!(r, "samples = {}", lift.noisy.len()).unwrap();
    writeln!(r, "sigma_f = {:e}", s.config.phase2.sigma_f).unwrap();
    writeln!(r, "sigma_tau = {:e}", s.config.phase2.sigma_tau).unwrap();
    writeln!(r, "liftoff_steps = {}", lift.ramp_steps).unwrap();
    writeln!(r, "liftoff_alpha = {:e}", lift.alpha).unwrap();
    writeln!(r, "mass = {:.6}", est.mass).unwrap();
    writeln!(r, "mass_true = {m_true:.6}").unwrap();
    writeln!(r, "mass_error_pct = {:.4}", 100.0 * (est.mass - m_true).abs() / m_true).unwrap();
    writeln!(r, "com_mm = [{:.3}, {:.3}, {:.3}]", 1e3 * est.com.x, 1e3 * est.com.y, 1e3 * est.com.z).unwrap();
    writeln!(r, "com_true_mm = [{:.3}, {:.3}, {:.3}]", 1e3 * truth.x, 1e3 * truth.y, 1e3 * truth.z).unwrap();
    writeln!(r, "observable = [{}, {}, {}]", est.observable[0], est.observable[1], est.observable[2]).unwrap();
    writeln!(r, "force_residual_rms = {rf:e}").unwrap();
    writeln!(r, "moment_residual_rms = {rm:e}").unwrap();
    for (k, axis) in ["x", "y", "z"].iter().enumerate() {
        if !est.observable[k] {
            writeln!(
                r,
                "# r_{axis} is unobservable: with the box upright it does not change the gravitational moment; reported as 0"
            )
            .unwrap();
        }
    }
    write_text(out, "estimate.txt", &r)?;
    lift.noisy.write_csv(create(out, "measurements.csv")?)?;
    print!("{r}");
    Ok(())
}

fn wrench_lines(r: &mut String, label: &str, w: &[Wrench; 2]) {
    for side in Side::BOTH {
        let x = &w[side.index()];
        writeln!(
            r,
            "{label}_{} = {{ f = [{:.6}, {:.6}, {:.6}], tau = [{:.6}, {:.6}, {:.6}] }}",
            if side == Side::Left { "left" } else { "right" },
            x.force.x,
            x.force.y,
            x.force.z,
            x.torque.x,
            x.torque.y,
            x.torque.z
        )
        .unwrap();
    }
}

fn cmd_optimize(s: &Scenario, seed: u64, phases: Phases, out: &Path) -> CmdResult {
    let est = if phases.estimate {
        lift_and_estimate(s, seed.wrapping_add(1))?.estimate
    } else {
        centered_estimate(s)
    };
    let (solution, wrenches) = if phases.optimize {
        let (sol, w) = optimize_wrenches(s, &est)?;
        (Some(sol), w)
    } else {
        (None, naive_wrenches(s))
    };
    let stacked = StackedWrench::from_wrenches(&wrenches[0], &wrenches[1]);
    let gravity = s.env.gravity();
    let check = verify_solution(&stacked, &s.geometry, &est, &gravity);

    let mut r = String::new();
    writeln!(r, "# contact wrench distribution").unwrap();
    writeln!(r, "mode = {}", if phases.optimize { "optimized" } else { "naive" }).unwrap();
    writeln!(r, "mu = {}", s.friction.mu()).unwrap();
    writeln!(r, "r_s = {}", s.friction.safety_margin()).unwrap();
    writeln!(r, "r_eff = {:.6}", s.friction.effective_radius()).unwrap();
    writeln!(r, "l_c = {:.6}", s.weight.l_c()).unwrap();
    writeln!(r, "mass = {:.6}", est.mass).unwrap();
    writeln!(r, "com_mm = [{:.3}, {:.3}, {:.3}]", 1e3 * est.com.x, 1e3 * est.com.y, 1e3 * est.com.z).unwrap();
    if let Some(sol) = &solution {
        writeln!(r, "status = {:?}", sol.status).unwrap();
        writeln!(r, "iterations = {}", sol.iterations).unwrap();
        writeln!(r, "cost = {:e}", sol.t_star).unwrap();
        writeln!(r, "kkt_primal = {:e}", sol.kkt.primal).unwrap();
        writeln!(r, "kkt_dual = {:e}", sol.kkt.dual).unwrap();
        writeln!(r, "kkt_gap = {:e}", sol.kkt.gap).unwrap();
    }
    wrench_lines(&mut r, "wrench", &wrenches);
    writeln!(r, "equilibrium_residual = {:e}", check.equilibrium_residual).unwrap();
    writeln!(r, "limit_surface_residual = [{:e}, {:e}]", check.limit_surface[0], check.limit_surface[1]).unwrap();
    writeln!(r, "compression = [{}, {}]", check.compression[0], check.compression[1]).unwrap();
    writeln!(r, "bending = [{:e}, {:e}]", check.bending[0], check.bending[1]).unwrap();
    write_text(out, "wrenches.txt", &r)?;

    let mut x = create(out, "wrenches.csv")?;
    writeln!(x, "side,f_x,f_y,f_z,tau_x,tau_y,tau_z,f_n,f_t,tau_n,limit_surface_residual")?;
    let mut operating = Vec::new();
    let mut boundaries = Vec::new();
    for side in Side::BOTH {
        let i = side.index();
        let w = &wrenches[i];
        let n = &s.geometry.n[i];
        let f_n = w.force.dot(n);
        let f_t = (w.force - n * f_n).norm();
        let tau_n = w.torque.dot(n);
        writeln!(
            x,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{f_n:e},{f_t:e},{tau_n:e},{:e}",
            i, w.force.x, w.force.y, w.force.z, w.torque.x, w.torque.y, w.torque.z, check.limit_surface[i]
        )?;
        operating.push((f_t, tau_n));
        let fp = &s.geometry.fp[i];
        boundaries.push((
            limit_surface_boundary(f_n, fp, false, BOUNDARY_SAMPLES)?,
            limit_surface_boundary(f_n, fp, true, BOUNDARY_SAMPLES)?,
        ));
    }
    x.flush()?;

    let mut b = create(out, "limit_surface.csv")?;
    writeln!(b, "side,k,f_t_nominal,tau_n_nominal,f_t_contracted,tau_n_contracted")?;
    for (i, (nom, con)) in boundaries.iter().enumerate() {
        for (k, (p, q)) in nom.iter().zip(con).enumerate() {
            writeln!(b, "{i},{k},{:e},{:e},{:e},{:e}", p.0, p.1, q.0, q.1)?;
        }
    }
    b.flush()?;

    let mut plot = Plot::new("Limit surface at the commanded normal force", "|f_t| [N]", "tau_n [N m]");
    for (side, (nom, con)) in ["left", "right"].iter().zip(&boundaries) {
        plot = plot
            .with(Series::dashed(&format!("{side} nominal"), nom.clone()))
            .with(Series::line(&format!("{side} contracted"), con.clone()));
    }
    plot = plot.with(Series::markers("operating points", operating));
    write_text(out, "limit_surface.svg", &plot.render())?;
    print!("{r}");
    Ok(())
}

fn summary_text(summary: &ExecSummary) -> String {
    let mut r = String::new();
    writeln!(r, "steps = {}", summary.steps).unwrap();
    writeln!(r, "failed = {}", summary.failed).unwrap();
    writeln!(r, "max_orientation_error_deg = {:.6}", summary.max_orientation_error.to_degrees()).unwrap();
    writeln!(r, "max_friction_residual = {:e}", summary.max_friction_residual).unwrap();
    writeln!(r, "squeeze_effort = {:.6}", summary.squeeze_effort).unwrap();
    writeln!(r, "max_env_force = {:e}", summary.max_env_force).unwrap();
    r
}

fn cmd_run(s: &Scenario, seed: u64, phases: Phases, out: &Path) -> CmdResult {
    let report = run_pipeline(s, phases, seed)?;
    report.log.write_csv(create(out, "execution.csv")?)?;
    if let Some(r) = &report.refinement {
        r.trajectory.write_csv(create(out, "refined_trajectory.csv")?)?;
    }
    write_handle_refs(
        create(out, "handle_refs.csv")?,
        report.trajectory.dt,
        &handle_references(&report.trajectory.samples, &s.offsets),
    )?;

    let mut r = String::new();
    writeln!(r, "# closed-loop execution").unwrap();
    writeln!(r, "seed = {seed}").unwrap();
    writeln!(
        r,
        "phases = {{ refine = {}, estimate = {}, optimize = {} }}",
        phases.refine, phases.estimate, phases.optimize
    )
    .unwrap();
    let est = &report.estimate_used;
    writeln!(r, "mass = {:.6}", est.mass).unwrap();
    writeln!(r, "com_mm = [{:.3}, {:.3}, {:.3}]", 1e3 * est.com.x, 1e3 * est.com.y, 1e3 * est.com.z).unwrap();
    wrench_lines(&mut r, "desired", &report.desired);
    r.push_str(&summary_text(&report.summary));
    if let Some((k, msg)) = &report.log.failure {
        writeln!(r, "failure = {{ step = {k}, message = {msg:?} }}").unwrap();
    }
    write_text(out, "summary.txt", &r)?;
    write_text(out, "execution.svg", &execution_plot(&[("run", &report)]).render())?;
    print!("{r}");
    if let Some((k, msg)) = &report.log.failure {
        return Err(Failure::NoConvergence(anyhow::anyhow!("plant failed at step {k}: {msg}")));
    }
    Ok(())
}

fn execution_plot(runs: &[(&str, &PipelineReport)]) -> Plot {
    let mut plot = Plot::new("Orientation error during transport", "t [s]", "error [deg]");
    for (name, rep) in runs {
        let pts = rep.log.steps.iter().map(|st| (st.t, st.orientation_error.to_degrees())).collect();
        plot = plot.with(Series::line(name, pts));
    }
    plot
}

fn cmd_report(s: &Scenario, seed: u64, out: &Path) -> CmdResult {
    let modes = [
        ("full", Phases::ALL),
        ("no-phase1", Phases { refine: false, ..Phases::ALL }),
        ("no-phase2", Phases { estimate: false, ..Phases::ALL }),
        ("no-phase3", Phases { optimize: false, ..Phases::ALL }),
    ];
    let mut reports = Vec::new();
    for (name, phases) in modes {
        reports.push((name, run_pipeline(s, phases, seed)?));
    }
    let mut t = String::new();
    writeln!(t, "# pipeline comparison, seed {seed}").unwrap();
    writeln!(
        t,
        "{:<10} {:>8} {:>12} {:>14} {:>12} {:>12} {:>6}",
        "mode", "steps", "max_ori_deg", "max_fric_res", "effort_N", "max_env_N", "failed"
    )
    .unwrap();
    let mut csv = String::from("mode,steps,max_orientation_error_deg,max_friction_residual,squeeze_effort,max_env_force,failed\n");
    for (name, rep) in &reports {
        let m = &rep.summary;
        writeln!(
            t,
            "{:<10} {:>8} {:>12.5} {:>14.5} {:>12.2} {:>12.4} {:>6}",
            name,
            m.steps,
            m.max_orientation_error.to_degrees(),
            m.max_friction_residual,
            m.squeeze_effort,
            m.max_env_force,
            m.failed
        )
        .unwrap();
        writeln!(
            csv,
            "{name},{},{:e},{:e},{:e},{:e},{}",
            m.steps,
            m.max_orientation_error.to_degrees(),
            m.max_friction_residual,
            m.squeeze_effort,
            m.max_env_force,
            m.failed
        )
        .unwrap();
    }
    write_text(out, "report.txt", &t)?;
    write_text(out, "report.csv", &csv)?;
    let runs: Vec<(&str, &PipelineReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    write_text(out, "report.svg", &execution_plot(&runs).render())?;
    print!("{t}");
    Ok(())
}
