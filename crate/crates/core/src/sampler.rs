//! Continuous-time jump process on a discrete system.
//!
//! From node `i` the chain jumps to `j` at rate `q_ij = eta_ij pi_j`. The law
//! `mu_i = P(X_t = i)` then obeys the forward equation
//!
//! ```text
//! dmu_i/dt = sum_j (mu_j q_ji - mu_i q_ij) = sum_j eta_ij pi_i pi_j (u_j - u_i),
//! ```
//!
//! using `eta_ij = eta_ji` and `mu = u pi`. Dividing by `pi_i` recovers
//! `du_i/dt = sum_j (u_j - u_i) eta_ij pi_j`, the deterministic flow.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::functionals::DensityState;

/// Which node weight multiplies the kernel in the jump rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateConvention {
    /// `q_ij = eta_ij pi_j`, the convention matching the flow.
    #[default]
    Target,
    /// `q_ij = eta_ij pi_i`. Wrong unless `pi` is uniform; kept to check
    /// that the comparison detects it.
    Transposed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_paths: usize,
    pub horizon: f64,
    pub seed: u64,
    pub initial: DensityState,
    pub convention: RateConvention,
}

impl SamplerConfig {
    pub fn new(n_paths: usize, horizon: f64, seed: u64, initial: DensityState) -> Self {
        Self {
            n_paths,
            horizon,
            seed,
            initial,
            convention: RateConvention::Target,
        }
    }
}

/// Occupancy at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub n_paths: usize,
    pub frequency: Vec<f64>,
    /// Binomial standard error `sqrt(p (1 - p) / n)` of each frequency.
    pub stderr: Vec<f64>,
    /// Paths that started on a node with no outgoing rate and never moved.
    pub stuck_paths: u64,
}

pub const HISTOGRAM_HEADER: &str = "node_index,count,frequency,stderr";

impl Histogram {
    fn from_counts(counts: Vec<u64>, stuck_paths: u64) -> Self {
        let n: u64 = counts.iter().sum();
        let nf = n as f64;
        let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
        let stderr = frequency.iter().map(|p| (p * (1.0 - p) / nf).sqrt()).collect();
        Self {
            counts,
            n_paths: n as usize,
            frequency,
            stderr,
            stuck_paths,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTOGRAM_HEADER);
        s.push('\n');
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{i},{c},{:e},{:e}", self.frequency[i], self.stderr[i]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

struct Rates {
    total: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
    targets: Vec<Vec<usize>>,
}

fn rates(sys: &DiscreteSystem, convention: RateConvention) -> Rates {
    let n = sys.len();
    let pi = sys.pi();
    let mut total = vec![0.0; n];
    let mut cumulative = vec![Vec::new(); n];
    let mut targets = vec![Vec::new(); n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let weight = match convention {
                RateConvention::Target => pi[j],
                RateConvention::Transposed => pi[i],
            };
            let q = sys.eta(i, j) * weight;
            if q > 0.0 {
                acc += q;
                cumulative[i].push(acc);
                targets[i].push(j);
            }
        }
        total[i] = acc;
    }
    Rates {
        total,
        cumulative,
        targets,
    }
}

fn pick(cumulative: &[f64], target: f64) -> usize {
    cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1)
}

/// Gillespie simulation of independent chains started from the initial
/// law. Path `k` uses a ChaCha stream keyed on `(seed, k)`, so the result is
/// identical for any thread count.
pub fn simulate(sys: &DiscreteSystem, cfg: &SamplerConfig) -> Result<Histogram> {
    let n = sys.len();
    if cfg.n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if !(cfg.horizon.is_finite() && cfg.horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid horizon {}", cfg.horizon)));
    }
    if cfg.initial.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cfg.initial.len(),
        });
    }
    let mu = cfg.initial.masses(sys.pi());
    let mut init_cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for m in &mu {
        acc += m;
        init_cdf.push(acc);
    }
    let r = rates(sys, cfg.convention);
    let (counts, stuck) = (0..cfg.n_paths as u64)
        .into_par_iter()
        .fold(
            || (vec![0u64; n], 0u64),
            |(mut counts, mut stuck), k| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(k);
                let mut x = pick(&init_cdf, rng.random::<f64>() * acc);
                if r.total[x] == 0.0 {
                    stuck += 1;
                }
                let mut t = 0.0;
                while r.total[x] > 0.0 {
                    let e = -(1.0 - rng.random::<f64>()).ln();
                    t += e / r.total[x];
                    if t > cfg.horizon {
                        break;
                    }
                    let target = rng.random::<f64>() * r.total[x];
                    x = r.targets[x][pick(&r.cumulative[x], target)];
                }
                counts[x] += 1;
                (counts, stuck)
            },
        )
        .reduce(
            || (vec![0u64; n], 0u64),
            |(mut a, sa), (b, sb)| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                (a, sa + sb)
            },
        );
    Ok(Histogram::from_counts(counts, stuck))
}

/// Histogram against the solver marginal `u_i(T) pi_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalComparison {
    pub time: f64,
    pub tv_distance: f64,
    pub expected: Vec<f64>,
    /// `(frequency - p) / sqrt(p (1 - p) / n)` per node.
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    /// Per-bin critical value; equals 3 for one bin and widens with the
    /// number of bins at the same family-wise level.
    pub threshold: f64,
    pub pass: bool,
}

/// Critical `|z|` for `bins` simultaneous two-sided tests at the family-wise
/// level of a single 3-sigma test.
pub fn bonferroni_threshold(bins: usize) -> f64 {
    let normal = Normal::standard();
    let alpha = 2.0 * (1.0 - normal.cdf(3.0));
    normal.inverse_cdf(1.0 - alpha / (2.0 * bins.max(1) as f64))
}

pub fn compare_marginals(sys: &DiscreteSystem, hist: &Histogram, traj: &Trajectory, time: f64) -> Result<MarginalComparison> {
    let n = sys.len();
    if hist.counts.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: hist.counts.len(),
        });
    }
    let idx = traj
        .index_of_time(time)
        .ok_or_else(|| Error::InvalidArgument(format!("time {time} is not an output time of the trajectory")))?;
    let expected = traj.states[idx].masses(sys.pi());
    let nf = hist.n_paths as f64;
    let mut tv = 0.0;
    let mut z = Vec::with_capacity(n);
    for (f, p) in hist.frequency.iter().zip(&expected) {
        tv += 0.5 * (f - p).abs();
        let sd = (p * (1.0 - p) / nf).max(0.0).sqrt();
        let diff = f - p;
        z.push(if sd > 0.0 {
            diff / sd
        } else if diff.abs() <= 1e-12 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        });
    }
    let max_abs_z = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = bonferroni_threshold(n);
    Ok(MarginalComparison {
        time,
        tv_distance: tv,
        expected,
        z_scores: z,
        max_abs_z,
        threshold,
        pass: max_abs_z <= threshold,
    })
}
