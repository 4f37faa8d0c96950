//! Experiment configuration documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discretization::{build_system, DiscreteSystem};
use crate::error::{Error, Result};
use crate::flow::IntegratorConfig;
use crate::functionals::DensityState;
use crate::kernels::{cell_rule, KernelSpec, Measure, MeasureSpec, Potential, PotentialSpec, QuadratureConfig};
use crate::metric::SolverSettings;
use crate::sampler::RateConvention;
use crate::torus::{build_grid, nearest_cell, GridSpec, MAX_DIM};

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Initial or endpoint density, relative to `pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    #[default]
    Uniform,
    /// All mass on one node. On lattice systems the index refers to the
    /// coarsest level in use and is carried to finer levels by nearest cell.
    PointMass { index: usize },
    /// `u proportional to e^-V`, averaged over cells.
    Gibbs { potential: PotentialSpec },
    /// Explicit node values `u_i`.
    Table { values: Vec<f64> },
}

/// System given directly by its weights and kernel matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitSystem {
    pub pi: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub dim: Option<usize>,
    pub level: Option<usize>,
    pub kernel: Option<KernelSpec>,
    pub measure: Option<MeasureSpec>,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    pub explicit: Option<ExplicitSystem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default)]
    pub initial: DensitySpec,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

fn default_intervals() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub start: DensitySpec,
    #[serde(default)]
    pub end: DensitySpec,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    #[serde(default)]
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Comparison time; defaults to the flow horizon.
    pub time: Option<f64>,
    #[serde(default)]
    pub convention: RateConvention,
}

fn default_certify_tolerance() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    /// Relative slack on the decay envelope.
    #[serde(default = "default_certify_tolerance")]
    pub tolerance: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            tolerance: default_certify_tolerance(),
        }
    }
}

fn default_tail_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    pub levels: Vec<usize>,
    /// Trailing share of each trajectory used for the decay fit.
    #[serde(default = "default_tail_fraction")]
    pub tail_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    /// One CSV of node values per output time.
    Densities,
}

fn default_directory() -> String {
    "output".into()
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

impl OutputsConfig {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub flow: Option<FlowConfig>,
    pub metric: Option<MetricConfig>,
    pub sampler: Option<SamplerSection>,
    pub certify: Option<CertifyConfig>,
    pub refinement: Option<RefinementConfig>,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid("document", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("document", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        match &s.explicit {
            Some(ex) => {
                if s.dim.is_some() || s.level.is_some() || s.kernel.is_some() || s.measure.is_some() {
                    return Err(invalid(
                        "system.explicit",
                        "an explicit system excludes dim, level, kernel and measure",
                    ));
                }
                if ex.pi.len() < 2 {
                    return Err(invalid("system.explicit.pi", "need at least two nodes"));
                }
                if ex.eta.len() != ex.pi.len() || ex.eta.iter().any(|r| r.len() != ex.pi.len()) {
                    return Err(invalid("system.explicit.eta", "must be a square matrix matching pi"));
                }
            }
            None => {
                let dim = s.dim.ok_or_else(|| invalid("system.dim", "missing"))?;
                if !(1..=MAX_DIM).contains(&dim) {
                    return Err(invalid("system.dim", format!("must be in 1..={MAX_DIM}, got {dim}")));
                }
                let level = s.level.ok_or_else(|| invalid("system.level", "missing"))?;
                if level < 2 {
                    return Err(invalid("system.level", format!("must be at least 2, got {level}")));
                }
                if s.kernel.is_none() {
                    return Err(invalid("system.kernel", "missing"));
                }
            }
        }
        if let Some(flow) = &self.flow {
            flow.integrator
                .output_grid()
                .map_err(|e| invalid("flow.integrator", e.to_string()))?;
        }
        if let Some(m) = &self.metric {
            if m.intervals < 2 {
                return Err(invalid("metric.intervals", "must be at least 2"));
            }
        }
        if let Some(sm) = &self.sampler {
            let flow = self
                .flow
                .as_ref()
                .ok_or_else(|| invalid("sampler", "the sampler stage needs a flow section"))?;
            if sm.n_paths == 0 {
                return Err(invalid("sampler.n_paths", "must be at least 1"));
            }
            let t = sm.time.unwrap_or(flow.integrator.horizon);
            let grid = flow.integrator.output_grid().map_err(|e| invalid("flow.integrator", e.to_string()))?;
            if !grid.iter().any(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0)) {
                return Err(invalid("sampler.time", format!("{t} is not an output time of the flow")));
            }
        }
        if let Some(c) = &self.certify {
            if self.flow.is_none() {
                return Err(invalid("certify", "the certify stage needs a flow section"));
            }
            if !(c.tolerance >= 0.0) {
                return Err(invalid("certify.tolerance", "must be non-negative"));
            }
        }
        if let Some(r) = &self.refinement {
            if self.flow.is_none() {
                return Err(invalid("refinement", "the refinement stage needs a flow section"));
            }
            if s.explicit.is_some() {
                return Err(invalid("refinement", "refinement needs a lattice system"));
            }
            if r.levels.len() < 2 {
                return Err(invalid("refinement.levels", "need at least two levels"));
            }
            if r.levels.iter().any(|&l| l < 2) {
                return Err(invalid("refinement.levels", "every level must be at least 2"));
            }
            if r.levels.windows(2).any(|w| w[1] < w[0]) {
                return Err(invalid("refinement.levels", "levels must not decrease"));
            }
            if !(r.tail_fraction > 0.0 && r.tail_fraction <= 1.0) {
                return Err(invalid("refinement.tail_fraction", "must lie in (0, 1]"));
            }
        }
        if self.outputs.directory.is_empty() {
            return Err(invalid("outputs.directory", "must not be empty"));
        }
        Ok(())
    }

    /// Builds the configured system.
    pub fn build_system(&self) -> Result<DiscreteSystem> {
        match &self.system.explicit {
            Some(ex) => DiscreteSystem::from_parts(ex.pi.clone(), ex.eta.concat()),
            None => self.build_at_level(self.system.level.unwrap_or(2)),
        }
    }

    /// Builds the lattice system at another level from the same specs.
    pub fn build_at_level(&self, level: usize) -> Result<DiscreteSystem> {
        let s = &self.system;
        let dim = s.dim.ok_or_else(|| invalid("system.dim", "missing"))?;
        let kernel = s.kernel.as_ref().ok_or_else(|| invalid("system.kernel", "missing"))?;
        let measure = s.measure.clone().unwrap_or(MeasureSpec::Uniform);
        let grid = build_grid(dim, level)?;
        build_system(kernel, &measure, &grid, &s.quadrature)
    }

    /// Level that point-mass indices refer to.
    pub fn anchor_level(&self) -> Option<usize> {
        let base = self.system.level?;
        Some(match &self.refinement {
            Some(r) => r.levels.iter().copied().chain([base]).min().unwrap_or(base),
            None => base,
        })
    }

    /// Projects a density spec onto a system built from this config.
    pub fn project(&self, spec: &DensitySpec, sys: &DiscreteSystem, path: &str) -> Result<DensityState> {
        let pi = sys.pi();
        let n = sys.len();
        match spec {
            DensitySpec::Uniform => Ok(DensityState::equilibrium(n)),
            DensitySpec::Table { values } => {
                if values.len() != n {
                    return Err(invalid(
                        &format!("{path}.values"),
                        format!("has {} entries, the system has {n} nodes", values.len()),
                    ));
                }
                DensityState::new(values.clone(), pi).map_err(|e| invalid(&format!("{path}.values"), e.to_string()))
            }
            DensitySpec::PointMass { index } => {
                let node = match (sys.grid(), self.anchor_level()) {
                    (Some(grid), Some(anchor)) => {
                        let coarse = build_grid(grid.dim(), anchor)?;
                        if *index >= coarse.len() {
                            return Err(invalid(
                                &format!("{path}.index"),
                                format!("{index} is outside the level-{anchor} lattice"),
                            ));
                        }
                        nearest_cell(&coarse.point(*index), grid)?
                    }
                    _ => {
                        if *index >= n {
                            return Err(invalid(&format!("{path}.index"), format!("{index} >= {n}")));
                        }
                        *index
                    }
                };
                let mut u = vec![0.0; n];
                u[node] = 1.0 / pi[node];
                DensityState::new(u, pi)
            }
            DensitySpec::Gibbs { potential } => {
                let grid = sys
                    .grid()
                    .ok_or_else(|| invalid(path, "a Gibbs density needs a lattice system"))?;
                gibbs_density(self, potential, grid, pi)
            }
        }
    }
}

fn gibbs_density(cfg: &ExperimentConfig, potential: &PotentialSpec, grid: &GridSpec, pi: &[f64]) -> Result<DensityState> {
    let quad = &cfg.system.quadrature;
    let d = grid.dim();
    let v = Potential::compile(potential, d, quad)?;
    let measure = Measure::compile(cfg.system.measure.as_ref().unwrap_or(&MeasureSpec::Uniform), d, quad)?;
    let h = grid.spacing();
    let w: Vec<f64> = (0..grid.len())
        .map(|j| {
            let c = grid.point_coords(j);
            cell_rule(&c[..d], h, quad)
                .iter()
                .map(|(x, wt)| wt * measure.density(&x[..d]) * (-v.value(&x[..d])).exp())
                .sum()
        })
        .collect();
    let total: f64 = w.iter().sum();
    let u = w.iter().zip(pi).map(|(a, p)| a / (total * p)).collect();
    DensityState::new(u, pi)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
dim = 1
level = 8
kernel = { type = "constant", c = 1.0 }
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.outputs.directory, "output");
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.len(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nlevell = 3\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Validation { .. })));
        let text = MINIMAL.replace("c = 1.0", "c = 1.0, typo = 2");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn validation_reports_field_paths() {
        let text = MINIMAL.replace("level = 8", "level = 1");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "system.level"),
            other => panic!("{other:?}"),
        }
        let text = format!("{MINIMAL}\n[sampler]\nn_paths = 10\n");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "sampler"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn densities_project_to_unit_mass() {
        let text = format!("{MINIMAL}\n[refinement]\nlevels = [4, 8]\n[flow]\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let sys = cfg.build_system().unwrap();
        let pm = cfg.project(&DensitySpec::PointMass { index: 1 }, &sys, "flow.initial").unwrap();
        // node 1 of the level-4 lattice sits at 1/4, node 2 of level 8
        assert_eq!(pm.values()[2], 8.0);
        let g = cfg
            .project(&DensitySpec::Gibbs { potential: PotentialSpec::cosine() }, &sys, "flow.initial")
            .unwrap();
        assert!((g.mass(sys.pi()) - 1.0).abs() < 1e-12);
        assert!(g.values()[4] > g.values()[0]);
        assert!(cfg.project(&DensitySpec::Table { values: vec![1.0; 3] }, &sys, "flow.initial").is_err());
    }

    #[test]
    fn explicit_system() {
        let text = r#"
[system]
explicit = { pi = [0.8, 0.2], eta = [[0.0, 1.0], [1.0, 0.0]] }
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.pi(), &[0.8, 0.2]);
        let bad = text.replace("[system]", "[system]\ndim = 1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }
}
