use std::fs;
use std::path::Path;
use std::process::Command;

use cutflow::driver::{run_optimization, RunConfig, RunOptions};

const PIPE_BEND: &str = include_str!("../fixtures/pipe_bend.toml");

const SMALL: &str = r#"
[mesh]
min = [0.0, 0.0]
max = [1.0, 1.0]
divisions = [8, 8]

[flow]
viscosity = 0.1

[[boundary]]
name = "inlet"
side = "left"
port = true
flow = { kind = "velocity", profile = { kind = "parabolic", center = 0.5, width = 1.0, peak = 1.0, direction = [1.0, 0.0] } }

[[boundary]]
name = "outlet"
side = "right"
port = true
flow = { kind = "traction", profile = { kind = "zero" } }

[geometry]
background = "fluid"
regions = [{ phase = "solid", shape = { kind = "circle", center = [0.5, 0.5], radius = 0.2 } }]

[[criteria]]
name = "mass_out"
measure = { type = "mass_flow", surface = "outlet" }
"#;

fn cutflow(args: &[&str], config: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cutflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn analyze_writes_summary_and_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("out");
    let r = cutflow(&["analyze", "--output", out.to_str().unwrap()], &config);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("mass_out = "));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "analyze");
    assert!(fs::read_to_string(out.join("fields.vtk")).unwrap().starts_with("# vtk DataFile"));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, SMALL.replace("viscosity = 0.1", "viscosity = 0.1\nvisocsity = 1.0")).unwrap();
    assert_eq!(cutflow(&["analyze"], &config).status.code(), Some(2));
    fs::write(&config, SMALL.replace("viscosity = 0.1", "viscosity = -1.0")).unwrap();
    assert_eq!(cutflow(&["analyze"], &config).status.code(), Some(2));
}

#[test]
fn restart_outside_optimize_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let r = cutflow(&["analyze", "--restart", "checkpoint.json"], &config);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let r = cutflow(&["analyze", "--output", blocker.join("out").to_str().unwrap()], &config);
    assert_eq!(r.status.code(), Some(4));
    let r = cutflow(&["analyze"], &dir.path().join("missing.toml"));
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn failed_solve_exits_with_3_and_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("stiff.toml");
    let text = SMALL.to_string() + "\n[solve]\nmax_newton = 1\nnewton_rel_tol = 1e-15\nnewton_abs_tol = 1e-30\npseudo_transient = false\n";
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    let r = cutflow(&["analyze", "--output", out.to_str().unwrap()], &config);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostic.json")).unwrap()).unwrap();
    assert_eq!(diag["exit_code"], 3);
}

fn pipe_bend(max_outer: usize) -> RunConfig {
    let mut c = RunConfig::from_toml(PIPE_BEND).unwrap();
    c.optimization.as_mut().unwrap().gcmma.max_outer = max_outer;
    c
}

#[test]
fn restart_reproduces_uninterrupted_history() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let full = run_optimization(&pipe_bend(6), &RunOptions { output: Some(a.clone()), restart: None }).unwrap();
    run_optimization(&pipe_bend(3), &RunOptions { output: Some(b.clone()), restart: None }).unwrap();
    let resumed =
        run_optimization(&pipe_bend(6), &RunOptions { output: Some(b.clone()), restart: Some(b.join("checkpoint.json")) })
            .unwrap();
    assert_eq!(full.design, resumed.design);
    assert_eq!(full.iterations, resumed.iterations);
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.toml");
    fs::write(&config, SMALL.to_string() + "\n[sweep]\nparameter = \"nitsche_penalty\"\nvalues = [10.0, 100.0]\n").unwrap();
    let out = dir.path().join("out");
    let r = cutflow(&["sweep", "--output", out.to_str().unwrap(), "--threads", "2"], &config);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "nitsche_penalty,mass_out,interface_mass_flow,newton_iterations");
    assert_eq!(table.lines().count(), 3);
}
