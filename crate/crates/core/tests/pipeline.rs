use std::path::Path;

use nlw_core::experiments::{configured_stages, run_config, ExperimentConfig, RunOptions, Stage};
use nlw_core::Error;
use sha2::{Digest, Sha256};

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

fn run(text: &str, dir: &Path) -> nlw_core::Result<nlw_core::experiments::RunSummary> {
    let cfg = ExperimentConfig::from_toml_str(text)?;
    let stages = configured_stages(&cfg);
    run_config(
        &cfg,
        &stages,
        &RunOptions {
            out_dir: Some(dir.to_path_buf()),
            seed: None,
        },
    )
}

#[test]
fn build_only_writes_system_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[system]\ndim = 1\nlevel = 4\nkernel = { type = \"constant\", c = 2.0 }\n";
    let s = run(text, dir.path()).unwrap();
    assert_eq!(s.manifest.stages, vec![Stage::Build]);
    let names: Vec<&str> = s.manifest.artifacts.iter().map(|a| a.path.as_str()).collect();
    assert_eq!(names, vec!["system.json"]);
    assert!(dir.path().join("manifest.json").exists());
    let sys = nlw_core::discretization::DiscreteSystem::load(&dir.path().join("system.json")).unwrap();
    assert_eq!(sys.len(), 4);
}

#[test]
fn manifest_hashes_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(SMOKE, dir.path()).unwrap();
    assert_eq!(s.manifest.status, "complete");
    for a in &s.manifest.artifacts {
        let bytes = std::fs::read(dir.path().join(&a.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), a.sha256, "{}", a.path);
    }
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,H,I,mass,min_u\n"));
    let hist = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert!(hist.starts_with("node_index,count,frequency,stderr\n"));
}

#[test]
fn identical_runs_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run(SMOKE, a.path()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let sb = pool.install(|| run(SMOKE, b.path())).unwrap();
    let ha: Vec<_> = sa.manifest.artifacts.iter().map(|x| (&x.path, &x.sha256)).collect();
    let hb: Vec<_> = sb.manifest.artifacts.iter().map(|x| (&x.path, &x.sha256)).collect();
    assert_eq!(ha, hb);
}

#[test]
fn failed_certificate_leaves_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMOKE.replace("eta = [[0.0, 1.0], [1.0, 0.0]]", "eta = [[0.0, 0.0], [0.0, 0.0]]");
    let e = run(&text, dir.path()).unwrap_err();
    assert!(matches!(e, Error::Certificate(_)), "{e:?}");
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    assert_eq!(m["completed"], serde_json::json!(["build", "flow"]));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            count += 1;
        }
    }
    assert!(count >= 5);
}
