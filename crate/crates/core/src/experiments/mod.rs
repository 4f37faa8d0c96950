//! Config-driven experiments: systems, flows, distances, certificates,
//! sampling and refinement studies, with all artifacts recorded in a manifest.

mod certify;
mod config;
mod pipeline;
mod refinement;

pub use certify::{lsi_certify, LsiCertificate};
pub use config::{
    CertifyConfig, DensitySpec, ExperimentConfig, ExplicitSystem, FlowConfig, MetricConfig, OutputFormat,
    OutputsConfig, RefinementConfig, SamplerSection, SystemConfig,
};
pub use pipeline::{
    configured_stages, run_config, run_config_path, ArtifactEntry, Manifest, RunOptions, RunSummary, Stage,
    MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use refinement::{coarse_grain, interpolate_monotone, refinement_study, LevelGap, LevelRun, RefinementReport};
