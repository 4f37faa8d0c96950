//! Staged execution of an experiment config with a hashed artifact manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::certify::lsi_certify;
use super::config::{ExperimentConfig, OutputFormat};
use super::refinement::refinement_study;
use crate::discretization::{DiscreteSystem, SYSTEM_SCHEMA};
use crate::error::{Error, Result};
use crate::flow::{edi_report, solve, Trajectory};
use crate::metric::{nlw_distance, PathProblem};
use crate::sampler::{compare_marginals, simulate, SamplerConfig};

pub const MANIFEST_SCHEMA: &str = "nlw-manifest/v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Build,
    Flow,
    Certify,
    Metric,
    Sample,
    Refine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Build => "build",
            Stage::Flow => "flow",
            Stage::Certify => "certify",
            Stage::Metric => "metric",
            Stage::Sample => "sample",
            Stage::Refine => "refine",
        }
    }
}

/// Every stage the config has a section for, in execution order.
pub fn configured_stages(cfg: &ExperimentConfig) -> Vec<Stage> {
    let mut out = vec![Stage::Build];
    if cfg.flow.is_some() {
        out.push(Stage::Flow);
    }
    if cfg.certify.is_some() {
        out.push(Stage::Certify);
    }
    if cfg.metric.is_some() {
        out.push(Stage::Metric);
    }
    if cfg.sampler.is_some() {
        out.push(Stage::Sample);
    }
    if cfg.refinement.is_some() {
        out.push(Stage::Refine);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces `outputs.directory`.
    pub out_dir: Option<PathBuf>,
    /// Replaces `sampler.seed`.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub schema: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub status: String,
    pub error: Option<String>,
    pub stages: Vec<Stage>,
    pub completed: Vec<Stage>,
    pub config: ExperimentConfig,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    /// One line per stage outcome.
    pub messages: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<ArtifactEntry>,
}

impl Writer {
    fn write(&mut self, rel: &str, schema: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.artifacts.push(ArtifactEntry {
            path: rel.to_string(),
            schema: schema.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, schema: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, schema, text.as_bytes())
    }
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    schema: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn trajectory_for(cfg: &ExperimentConfig, sys: &DiscreteSystem) -> Result<Trajectory> {
    let flow = cfg
        .flow
        .as_ref()
        .ok_or_else(|| Error::Validation {
            path: "flow".into(),
            message: "missing".into(),
        })?;
    let u0 = cfg.project(&flow.initial, sys, "flow.initial")?;
    solve(sys, &u0, &flow.integrator)
}

/// Loads a config file and runs the requested stages.
pub fn run_config_path(path: &Path, stages: &[Stage], opts: &RunOptions) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load(path)?;
    run_config(&cfg, stages, opts)
}

/// Runs the requested stages in order, writing artifacts and a manifest.
/// On a stage failure the manifest records the partial run and the error is
/// returned.
pub fn run_config(cfg: &ExperimentConfig, stages: &[Stage], opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        if let Some(s) = cfg.sampler.as_mut() {
            s.seed = seed;
        }
    }
    if let Some(dir) = &opts.out_dir {
        cfg.outputs.directory = dir.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let mut stages: Vec<Stage> = stages.to_vec();
    stages.sort();
    stages.dedup();
    for s in &stages {
        let needed = match s {
            Stage::Build => true,
            Stage::Flow => cfg.flow.is_some(),
            Stage::Certify => cfg.certify.is_some() || cfg.flow.is_some(),
            Stage::Metric => cfg.metric.is_some(),
            Stage::Sample => cfg.sampler.is_some(),
            Stage::Refine => cfg.refinement.is_some(),
        };
        if !needed {
            return Err(Error::Validation {
                path: s.name().into(),
                message: "stage requested but the config has no section for it".into(),
            });
        }
    }
    let out_dir = PathBuf::from(&cfg.outputs.directory);
    std::fs::create_dir_all(&out_dir)?;
    let mut writer = Writer {
        dir: out_dir.clone(),
        artifacts: Vec::new(),
    };
    let mut completed = Vec::new();
    let mut messages = Vec::new();
    let outcome = execute(&cfg, &stages, &mut writer, &mut completed, &mut messages);
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        status: if outcome.is_ok() { "complete" } else { "failed" }.into(),
        error: outcome.as_ref().err().map(|e| e.to_string()),
        stages: stages.clone(),
        completed,
        config: cfg.clone(),
        artifacts: writer.artifacts.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join(MANIFEST_FILE), text)?;
    outcome?;
    Ok(RunSummary {
        out_dir,
        manifest,
        messages,
    })
}

fn execute(
    cfg: &ExperimentConfig,
    stages: &[Stage],
    w: &mut Writer,
    completed: &mut Vec<Stage>,
    messages: &mut Vec<String>,
) -> Result<()> {
    let json = cfg.outputs.wants(OutputFormat::Json);
    let csv = cfg.outputs.wants(OutputFormat::Csv);
    let sys = cfg.build_system()?;
    w.write("system.json", SYSTEM_SCHEMA, (sys.to_json()? + "\n").as_bytes())?;
    messages.push(format!("build: {} nodes, min eta {:e}", sys.len(), sys.min_offdiag_eta()));
    completed.push(Stage::Build);

    let needs_traj = stages
        .iter()
        .any(|s| matches!(s, Stage::Flow | Stage::Certify | Stage::Sample));
    let traj = if needs_traj { Some(trajectory_for(cfg, &sys)?) } else { None };

    for &stage in stages {
        match stage {
            Stage::Build => continue,
            Stage::Flow => {
                let traj = traj.as_ref().expect("trajectory computed");
                if csv {
                    w.write("trajectory.csv", "nlw-trajectory-csv/v1", traj.to_csv().as_bytes())?;
                }
                if cfg.outputs.wants(OutputFormat::Densities) {
                    for (k, state) in traj.states.iter().enumerate() {
                        let mut text = String::from("node_index,u\n");
                        for (i, u) in state.values().iter().enumerate() {
                            text.push_str(&format!("{i},{u:e}\n"));
                        }
                        w.write(&format!("densities/density_{k:05}.csv"), "nlw-density-csv/v1", text.as_bytes())?;
                    }
                }
                let edi = edi_report(&sys, traj)?;
                if json {
                    w.json("edi.json", "nlw-edi/v1", &Tagged { schema: "nlw-edi/v1", body: &edi })?;
                }
                let last = traj.diagnostics.last().expect("non-empty trajectory");
                let defect = edi.defect.map_or("n/a".to_string(), |d| format!("{d:e}"));
                messages.push(format!(
                    "flow: {} outputs, H(T) = {:e}, EDI defect {defect}",
                    traj.len(),
                    last.entropy
                ));
            }
            Stage::Certify => {
                let traj = traj.as_ref().expect("trajectory computed");
                let tol = cfg.certify.as_ref().map_or(1e-8, |c| c.tolerance);
                let cert = lsi_certify(&sys, traj, tol)?;
                if json {
                    w.json(
                        "certificate.json",
                        "nlw-lsi-certificate/v1",
                        &Tagged {
                            schema: "nlw-lsi-certificate/v1",
                            body: &cert,
                        },
                    )?;
                }
                messages.push(format!(
                    "certify: C = {:e}, pointwise {}, envelope {}",
                    cert.constant,
                    if cert.pointwise_holds { "ok" } else { "FAILED" },
                    if cert.envelope_holds { "ok" } else { "FAILED" }
                ));
                cert.require()?;
            }
            Stage::Metric => {
                let m = cfg.metric.as_ref().expect("validated");
                let problem = PathProblem {
                    u_start: cfg.project(&m.start, &sys, "metric.start")?,
                    u_end: cfg.project(&m.end, &sys, "metric.end")?,
                    intervals: m.intervals,
                    settings: m.solver.clone(),
                };
                let r = nlw_distance(&sys, &problem)?;
                if json {
                    let doc = r.to_document(m.solver.keep_path);
                    w.json("metric.json", "nlw-metric/v1", &Tagged { schema: "nlw-metric/v1", body: &doc })?;
                }
                messages.push(format!("metric: W = {:e} after {} iterations", r.distance, r.iterations));
            }
            Stage::Sample => {
                let traj = traj.as_ref().expect("trajectory computed");
                let sm = cfg.sampler.as_ref().expect("validated");
                let flow = cfg.flow.as_ref().expect("validated");
                let time = sm.time.unwrap_or(flow.integrator.horizon);
                let sc = SamplerConfig {
                    n_paths: sm.n_paths,
                    horizon: time,
                    seed: sm.seed,
                    initial: traj.states[0].clone(),
                    convention: sm.convention,
                };
                let hist = simulate(&sys, &sc)?;
                if csv {
                    w.write("histogram.csv", "nlw-histogram-csv/v1", hist.to_csv().as_bytes())?;
                }
                let cmp = compare_marginals(&sys, &hist, traj, time)?;
                if json {
                    w.json(
                        "comparison.json",
                        "nlw-marginal-comparison/v1",
                        &Tagged {
                            schema: "nlw-marginal-comparison/v1",
                            body: &cmp,
                        },
                    )?;
                }
                messages.push(format!(
                    "sample: tv = {:e}, max |z| = {:.3} (threshold {:.3})",
                    cmp.tv_distance, cmp.max_abs_z, cmp.threshold
                ));
                if !cmp.pass {
                    return Err(Error::Certificate(format!(
                        "sampler marginal deviates from the solver: max |z| = {:.3} > {:.3}",
                        cmp.max_abs_z, cmp.threshold
                    )));
                }
            }
            Stage::Refine => {
                let r = cfg.refinement.as_ref().expect("validated");
                let report = refinement_study(cfg, &r.levels)?;
                if json {
                    w.json(
                        "refinement.json",
                        "nlw-refinement/v1",
                        &Tagged {
                            schema: "nlw-refinement/v1",
                            body: &report,
                        },
                    )?;
                }
                let gaps: Vec<String> = report.gaps.iter().map(|g| format!("{:e}", g.entropy_gap)).collect();
                messages.push(format!("refine: entropy gaps [{}]", gaps.join(", ")));
                if !report.gaps_decreasing {
                    return Err(Error::Certificate("refinement gaps do not decrease".into()));
                }
            }
        }
        completed.push(stage);
    }
    Ok(())
}
