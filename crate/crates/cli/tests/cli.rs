use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn impactsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impactsim"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("IMPACTSIM_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_writes_trajectory_with_uniform_time_column() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "bouncing-ball"}, "scheme": {"h": 1e-3, "t_end": 1.0}}"#,
    );
    let out = impactsim(dir.path(), &["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let text = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("t,u_1,v_1,phi,energy,reaction_norm,active,fp_iters")
    );
    let times: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(times.len(), 1000);
    for pair in times.windows(2) {
        assert!((pair[1] - pair[0] - 1e-3).abs() < 1e-12);
    }

    let impacts = fs::read_to_string(dir.path().join("impacts.csv")).unwrap();
    assert!(impacts.starts_with("t,x_1,measured_e,tangential_error,energy_jump\n"));
    assert!(impacts.lines().count() >= 2);
    assert!(stdout(&out).contains("first impact"));
}

#[test]
fn quiet_suppresses_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "wall"}, "scheme": {"t_end": 0.5}}"#,
    );
    let out = impactsim(dir.path(), &["run", "--config", &config, "--quiet"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
    assert!(dir.path().join("trajectory.csv").exists());
}

#[test]
fn restitution_out_of_range_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "bouncing-ball"}, "scheme": {"e": 1.5}}"#,
    );
    let out = impactsim(dir.path(), &["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("restitution"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "bouncing-ball", "height": 2}}"#,
    );
    let out = impactsim(dir.path(), &["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("height"), "{}", stderr(&out));
}

#[test]
fn divergent_fixed_point_exits_2_and_keeps_partial_output() {
    // Damping c = 10 with h = 0.5 makes the velocity iteration expand by c h / 2 = 2.5.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "variable-mass", "damping": 10.0}, "scheme": {"h": 0.5, "t_end": 5.0}}"#,
    );
    let out = impactsim(dir.path(), &["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("step 1"), "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().count(), 2, "header plus the one completed row");
}

#[test]
fn converge_on_the_ball_reports_first_order() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "bouncing-ball"},
            "convergence": {"h_values": [4e-4, 2e-4, 1e-4], "horizon": 1.2}}"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_impactsim"))
        .args(["converge", "--config", &config, "--out-dir"])
        .arg(dir.path())
        .env("IMPACTSIM_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("h,sup_err,impact_time_err,measured_e_err\n"));
    assert_eq!(csv.lines().count(), 4);
    let summary = fs::read_to_string(dir.path().join("convergence_summary.txt")).unwrap();
    assert!(summary.contains("reference=closed-form"));
    let order: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("observed_order="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(order >= 0.8, "{summary}");
}

#[test]
fn converge_without_closed_form_uses_finest_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "variable-mass"}, "scheme": {"e": 0.5},
            "convergence": {"h_values": [4e-3, 2e-3, 1e-3], "horizon": 0.8}}"#,
    );
    let out = impactsim(dir.path(), &["converge", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("convergence_summary.txt")).unwrap();
    assert!(summary.contains("reference=finest-grid"), "{summary}");
}

#[test]
fn converge_with_one_step_size_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "bouncing-ball"}, "convergence": {"h_values": [1e-3]}}"#,
    );
    let out = impactsim(dir.path(), &["converge", "--config", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("h_values"), "{}", stderr(&out));
}

#[test]
fn bad_thread_count_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"model": {"name": "bouncing-ball"}}"#);
    let out = Command::new(env!("CARGO_BIN_EXE_impactsim"))
        .args(["converge", "--config", &config, "--out-dir"])
        .arg(dir.path())
        .env("IMPACTSIM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("IMPACTSIM_THREADS"));
}

#[test]
fn lemma_check_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = impactsim(
        dir.path(),
        &["lemma-check", "--count", "500", "--seed", "11"],
    );
    let b = impactsim(
        dir.path(),
        &["lemma-check", "--count", "500", "--seed", "11"],
    );
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("500 cases x 200 steps"));
}

#[test]
fn lemma_check_with_zero_cases_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = impactsim(dir.path(), &["lemma-check", "--count", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn models_lists_every_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = impactsim(dir.path(), &["models"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for name in ["bouncing-ball", "disk-billiard", "variable-mass", "wall"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(impactsim(dir.path(), &["explode"]).status.code(), Some(1));
    assert_eq!(
        impactsim(dir.path(), &["run"]).status.code(),
        Some(1),
        "missing --config"
    );
    assert_eq!(impactsim(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_toggle_writes_event_driven_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"model": {"name": "bouncing-ball"}, "scheme": {"h": 1e-3, "t_end": 1.6}, "oracle": true}"#,
    );
    let out = impactsim(dir.path(), &["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("zeno-overflow"), "{}", stdout(&out));
    let text = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert!(text.starts_with("t,u_1,v_1\n"));
}
