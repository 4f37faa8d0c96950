use std::path::Path;
use std::process::Command;

const SMOKE: &str = r#"
[system]
explicit = { pi = [0.5, 0.5], eta = [[0.0, 1.0], [1.0, 0.0]] }

[flow]
initial = { type = "table", values = [1.5, 0.5] }
integrator = { horizon = 1.0, output_step = 0.01 }

[certify]

[metric]
start = { type = "table", values = [1.5, 0.5] }
intervals = 16

[sampler]
n_paths = 20000
seed = 5
"#;

fn nlw(args: &[&str], config: &str, dir: &Path) -> std::process::Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    Command::new(env!("CARGO_BIN_EXE_nlw"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
}

#[test]
fn run_succeeds_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlw(&["run"], SMOKE, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("metric: W ="));
    for f in ["manifest.json", "system.json", "trajectory.csv", "certificate.json", "metric.json", "histogram.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn quiet_prints_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlw(&["build", "--quiet"], SMOKE, dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn subcommands_select_stages() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlw(&["solve"], SMOKE, dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("out");
    assert!(out.join("trajectory.csv").exists());
    assert!(!out.join("metric.json").exists());
}

#[test]
fn seed_and_threads_do_not_change_results_except_through_the_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert_eq!(nlw(&["sample", "--threads", "1"], SMOKE, a.path()).status.code(), Some(0));
    assert_eq!(nlw(&["sample", "--threads", "3"], SMOKE, b.path()).status.code(), Some(0));
    assert_eq!(nlw(&["sample", "--seed", "99"], SMOKE, c.path()).status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("out/histogram.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlw(&["run"], &SMOKE.replace("[certify]", "[certify]\ntolerence = 1.0"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerence"));
    let o = Command::new(env!("CARGO_BIN_EXE_nlw")).arg("build").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_nlw")).arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMOKE.replace("intervals = 16", "intervals = 16\nsolver = { max_iters = 1 }");
    let o = nlw(&["metric"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn certificate_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMOKE.replace("eta = [[0.0, 1.0], [1.0, 0.0]]", "eta = [[0.0, 0.0], [0.0, 0.0]]");
    let o = nlw(&["certify"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(4));
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""));
}
