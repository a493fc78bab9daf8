use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn boxlift(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxlift"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// `key = value` lookup in a text report.
fn field(text: &str, key: &str) -> String {
    let prefix = format!("{key} = ");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("{key} missing from report:\n{text}"))
        .to_string()
}

fn number(text: &str, key: &str) -> f64 {
    field(text, key).parse().unwrap()
}

/// `{ j = .., j1 = .., j2 = .. }` inline table from the refinement log.
fn cost_triple(text: &str, key: &str) -> [f64; 3] {
    let v = field(text, key);
    let nums: Vec<f64> = v
        .trim_matches(|c| c == '{' || c == '}' || c == ' ')
        .split(',')
        .map(|kv| kv.split('=').nth(1).unwrap().trim().parse().unwrap())
        .collect();
    [nums[0], nums[1], nums[2]]
}

/// Copies a scenario and its trajectory into `dir`, applying textual edits.
fn edited_scenario(dir: &Path, name: &str, edits: &[(&str, &str)]) -> PathBuf {
    let src = scenarios().join(name);
    let mut text = fs::read_to_string(&src).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "{from:?} not in {name}");
        text = text.replace(from, to);
    }
    for csv in ["clip_reference.csv", "clear_reference.csv"] {
        fs::copy(scenarios().join(csv), dir.join(csv)).unwrap();
    }
    let dst = dir.join(name);
    fs::write(&dst, text).unwrap();
    dst
}

#[test]
fn every_command_is_bit_identical_under_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("refine", "config1_clip.toml"),
        ("estimate", "config1_clip.toml"),
        ("optimize", "config1_clip.toml"),
        ("run", "config1_clip.toml"),
        ("report", "config2_clear.toml"),
    ];
    for (cmd, scen) in cases {
        let mut runs = Vec::new();
        for k in 0..2 {
            let out = tmp.path().join(format!("{cmd}_{k}"));
            let o = boxlift(&[cmd, "--seed", "7"], &scenarios().join(scen), &out);
            assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
            runs.push((o.stdout, dir_contents(&out)));
        }
        assert!(!runs[0].1.is_empty(), "{cmd} wrote nothing");
        assert_eq!(runs[0].0, runs[1].0, "{cmd} stdout differs");
        for (name, bytes) in &runs[0].1 {
            assert!(runs[1].1.get(name) == Some(bytes), "{cmd}: {name} differs between runs");
        }
        assert_eq!(runs[0].1.len(), runs[1].1.len());
    }
}

#[test]
fn seed_changes_the_noisy_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = scenarios().join("config1_clip.toml");
    let a = boxlift(&["estimate", "--seed", "1"], &scen, &tmp.path().join("a"));
    let b = boxlift(&["estimate", "--seed", "2"], &scen, &tmp.path().join("b"));
    assert!(a.status.success() && b.status.success());
    assert_ne!(
        fs::read(tmp.path().join("a/measurements.csv")).unwrap(),
        fs::read(tmp.path().join("b/measurements.csv")).unwrap()
    );
}

#[test]
fn clip_refinement_removes_contact_and_keeps_tracking() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = boxlift(&["refine"], &scenarios().join("config1_clip.toml"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("refine_log.txt")).unwrap();
    assert_eq!(field(&log, "status"), "Converged");
    let [_, j1_nom, j2_nom] = cost_triple(&log, "nominal");
    let [_, j1, j2] = cost_triple(&log, "refined");
    assert!(j2_nom > 0.0);
    assert!(j2 <= 0.1 * j2_nom, "contact cost {j2} vs nominal {j2_nom}");
    assert!(j1 <= 3.0 * j1_nom.max(f64::MIN_POSITIVE), "tracking cost {j1} vs nominal {j1_nom}");
    for f in ["refined_trajectory.csv", "handle_refs.csv", "refine_cost.svg", "refine_path.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let traj = fs::read_to_string(out.join("refined_trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,x,y,z,rx,ry,rz"));
    assert_eq!(traj.lines().count(), 102);
}

#[test]
fn clear_refinement_converges_without_contact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = boxlift(&["refine"], &scenarios().join("config2_clear.toml"), &out);
    assert_eq!(o.status.code(), Some(0));
    let log = fs::read_to_string(out.join("refine_log.txt")).unwrap();
    assert_eq!(cost_triple(&log, "nominal")[2], 0.0);
    assert_eq!(cost_triple(&log, "refined")[2], 0.0);
}

#[test]
fn iteration_cap_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = edited_scenario(tmp.path(), "config1_clip.toml", &[("max_iter = 500", "max_iter = 1")]);
    let out = tmp.path().join("o");
    let o = boxlift(&["refine"], &scen, &out);
    assert_eq!(o.status.code(), Some(2));
    // Partial results are still written.
    let log = fs::read_to_string(out.join("refine_log.txt")).unwrap();
    assert_eq!(field(&log, "status"), "IterationCap");
}

#[test]
fn missing_trajectory_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = edited_scenario(tmp.path(), "config2_clear.toml", &[("clear_reference.csv", "absent.csv")]);
    let o = boxlift(&["refine"], &scen, &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("absent.csv"), "{err}");
}

#[test]
fn input_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = boxlift(&["run"], &tmp.path().join("nope.toml"), &out);
    assert_eq!(o.status.code(), Some(1));

    let unknown = edited_scenario(tmp.path(), "config2_clear.toml", &[("tol = 1e-8", "tol = 1e-8\ntolerance = 1")]);
    let o = boxlift(&["optimize"], &unknown, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance"));

    let o = boxlift(&["optimize", "--rs", "1.5"], &scenarios().join("config2_clear.toml"), &out);
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_boxlift")).arg("run").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn estimate_report_flags_vertical_com_as_unobservable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = boxlift(&["estimate"], &scenarios().join("config1_clip.toml"), &out);
    assert!(o.status.success());
    let r = fs::read_to_string(out.join("estimate.txt")).unwrap();
    assert!((number(&r, "mass") - 2.2).abs() / 2.2 < 5e-3);
    assert_eq!(field(&r, "observable"), "[true, true, false]");
    assert!(r.contains("r_z is unobservable"));
    let rows = fs::read_to_string(out.join("measurements.csv")).unwrap().lines().count();
    assert_eq!(rows, 51);
}

#[test]
fn optimize_overrides_and_naive_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = scenarios().join("config2_clear.toml");
    let a = tmp.path().join("a");
    let o = boxlift(&["optimize", "--rs", "0.2", "--mu", "0.5", "--lc", "0.05"], &scen, &a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = fs::read_to_string(a.join("wrenches.txt")).unwrap();
    assert_eq!(field(&r, "mode"), "optimized");
    assert_eq!(number(&r, "mu"), 0.5);
    assert_eq!(number(&r, "r_s"), 0.2);
    assert_eq!(number(&r, "l_c"), 0.05);
    assert_eq!(field(&r, "status"), "Optimal");
    assert!(number(&r, "kkt_primal") <= 1e-8);
    assert!(number(&r, "equilibrium_residual") <= 1e-8);
    for f in ["wrenches.csv", "limit_surface.csv", "limit_surface.svg"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let b = tmp.path().join("b");
    let o = boxlift(&["optimize", "--no-phase2", "--no-phase3"], &scen, &b);
    assert!(o.status.success());
    let r = fs::read_to_string(b.join("wrenches.txt")).unwrap();
    assert_eq!(field(&r, "mode"), "naive");
    assert_eq!(field(&r, "com_mm"), "[0.000, 0.000, 0.000]");
}

#[test]
fn run_writes_log_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = boxlift(&["run", "--no-phase1"], &scenarios().join("config2_clear.toml"), &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert_eq!(field(&s, "failed"), "false");
    assert_eq!(number(&s, "steps"), 101.0);
    assert!(number(&s, "max_friction_residual") <= 0.0);
    assert!(!out.join("refined_trajectory.csv").exists());
    let rows = fs::read_to_string(out.join("execution.csv")).unwrap().lines().count();
    assert_eq!(rows, 102);
}
