//! Level-refinement study: the same continuum problem solved on a ladder of
//! lattices, compared through entropy trajectories and coarse-grained densities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::flow::{decay_rate_estimate, solve, Trajectory};
use crate::kernels::box_overlap;
use crate::torus::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRun {
    pub level: usize,
    pub times: Vec<f64>,
    pub entropies: Vec<f64>,
    pub decay_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelGap {
    pub coarse: usize,
    pub fine: usize,
    /// `sup_t |H_coarse(t) - H_fine(t)|` on the fine time grid.
    pub entropy_gap: f64,
    /// `max_t sum_i |mu_coarse_i - (coarse-grained mu_fine)_i|` over shared times.
    pub density_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub levels: Vec<LevelRun>,
    pub gaps: Vec<LevelGap>,
    /// Whether the entropy gaps strictly decrease along the ladder.
    pub gaps_decreasing: bool,
}

/// Piecewise-linear interpolation, clamped at the ends. Preserves
/// monotonicity of the data.
pub fn interpolate_monotone(times: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= times[0] {
        return values[0];
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return values[last];
    }
    let k = times.partition_point(|&s| s <= t);
    let (t0, t1) = (times[k - 1], times[k]);
    let w = (t - t0) / (t1 - t0);
    values[k - 1] + w * (values[k] - values[k - 1])
}

/// Cell masses of a fine lattice collected onto a coarse one, assuming
/// constant density inside each fine cell.
pub fn coarse_grain(fine_mass: &[f64], fine: &GridSpec, coarse: &GridSpec) -> Vec<f64> {
    let d = fine.dim();
    let hf = fine.spacing();
    let hc = coarse.spacing();
    let vol = hf.powi(d as i32);
    let mut out = vec![0.0; coarse.len()];
    for (k, m) in fine_mass.iter().enumerate() {
        let ck = fine.point_coords(k);
        // only coarse cells near the fine cell can overlap
        for (j, slot) in out.iter_mut().enumerate() {
            let cj = coarse.point_coords(j);
            let ov = box_overlap(&cj[..d], hc, &ck[..d], hf);
            if ov > 0.0 {
                *slot += m * ov / vol;
            }
        }
    }
    out
}

fn attribute(e: Error, level: usize) -> Error {
    let tag = |s: String| format!("level {level}: {s}");
    match e {
        Error::InvalidArgument(s) => Error::InvalidArgument(tag(s)),
        Error::Divergent(s) => Error::Divergent(tag(s)),
        Error::Quadrature(s) => Error::Quadrature(tag(s)),
        Error::Integrator(s) => Error::Integrator(tag(s)),
        Error::Optimizer(s) => Error::Optimizer(tag(s)),
        Error::InvalidState(s) => Error::InvalidState(tag(s)),
        Error::Validation { path, message } => Error::Validation {
            path,
            message: tag(message),
        },
        other => other,
    }
}

fn run_level(cfg: &ExperimentConfig, level: usize) -> Result<(DiscreteSystem, Trajectory)> {
    let flow = cfg
        .flow
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("refinement needs a flow section".into()))?;
    let sys = cfg.build_at_level(level)?;
    let u0 = cfg.project(&flow.initial, &sys, "flow.initial")?;
    let traj = solve(&sys, &u0, &flow.integrator)?;
    Ok((sys, traj))
}

pub fn refinement_study(cfg: &ExperimentConfig, levels: &[usize]) -> Result<RefinementReport> {
    if levels.len() < 2 {
        return Err(Error::InvalidArgument("need at least two levels".into()));
    }
    if levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("levels must not decrease".into()));
    }
    let tail = cfg.refinement.as_ref().map_or(0.5, |r| r.tail_fraction);
    let runs: Vec<(DiscreteSystem, Trajectory)> = levels
        .par_iter()
        .map(|&l| run_level(cfg, l).map_err(|e| attribute(e, l)))
        .collect::<Result<_>>()?;

    let level_runs: Vec<LevelRun> = levels
        .iter()
        .zip(&runs)
        .map(|(&level, (_, traj))| LevelRun {
            level,
            times: traj.times.clone(),
            entropies: traj.entropies(),
            decay_rate: decay_rate_estimate(traj, tail).ok().map(|f| f.rate),
        })
        .collect();

    let mut gaps = Vec::with_capacity(levels.len() - 1);
    for k in 1..levels.len() {
        let (csys, ctraj) = &runs[k - 1];
        let (fsys, ftraj) = &runs[k];
        let hc = ctraj.entropies();
        let entropy_gap = ftraj
            .times
            .iter()
            .zip(ftraj.entropies())
            .map(|(&t, hf)| (interpolate_monotone(&ctraj.times, &hc, t) - hf).abs())
            .fold(0.0, f64::max);
        let (Some(cg), Some(fg)) = (csys.grid(), fsys.grid()) else {
            return Err(Error::InvalidArgument("refinement needs lattice systems".into()));
        };
        let mut density_gap: f64 = 0.0;
        for (fi, &t) in ftraj.times.iter().enumerate() {
            if let Some(ci) = ctraj.index_of_time(t) {
                let fine_mass = ftraj.states[fi].masses(fsys.pi());
                let coarse_mass = ctraj.states[ci].masses(csys.pi());
                let projected = coarse_grain(&fine_mass, fg, cg);
                let l1: f64 = coarse_mass.iter().zip(&projected).map(|(a, b)| (a - b).abs()).sum();
                density_gap = density_gap.max(l1);
            }
        }
        gaps.push(LevelGap {
            coarse: levels[k - 1],
            fine: levels[k],
            entropy_gap,
            density_gap,
        });
    }
    let gaps_decreasing = gaps.windows(2).all(|w| w[1].entropy_gap < w[0].entropy_gap);
    Ok(RefinementReport {
        levels: level_runs,
        gaps,
        gaps_decreasing,
    })
}
