//! Finite-volume discretization of a continuum pair `(eta, pi)` on the
//! level-`n` lattice.
//!
//! Cell `j` is the periodic box of side `1/n` centred at lattice point `x_j`.
//! The weights are `pi_n(j) = pi(cell_j)`, and for `j != k`
//!
//! ```text
//! eta_n(j, k) = 1 / (pi_n(j) pi_n(k)) * ∬_{cell_j x cell_k} 1{|x - y| >= delta_n / 2} eta(x, y) dpi(x) dpi(y)
//! ```
//!
//! with `delta_n = sqrt(d)/n`. The cutoff only meets cell pairs whose
//! multi-indices differ by at most one on every axis; those pairs are
//! integrated adaptively with breakpoints on the cutoff sphere. All other
//! pairs use tensor Gauss–Legendre rules (in one dimension every pair goes
//! through the adaptive path, which is cheap there).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{box_overlap, cell_rule, Kernel, KernelSpec, Measure, MeasureSpec, QuadratureConfig};
use crate::quadrature::{integrate_annular, AnnularProblem, Annulus, Tolerance};
use crate::torus::{GridSpec, MAX_DIM};

/// Schema tag written into serialized systems.
pub const SYSTEM_SCHEMA: &str = "nlw-system/v1";

/// Smallest admissible cell weight.
pub const MIN_CELL_WEIGHT: f64 = 1e-14;

/// How a system was produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub kernel: Option<KernelSpec>,
    pub measure: Option<MeasureSpec>,
    pub quadrature: Option<QuadratureConfig>,
    /// Total pushforward mass before renormalisation.
    pub renormalization: f64,
    pub note: Option<String>,
}

/// A finite reversible jump system: weights `pi` and a symmetric kernel
/// `eta` with zero diagonal, stored densely in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    grid: Option<GridSpec>,
    pi: Vec<f64>,
    eta: Vec<f64>,
    delta: Option<f64>,
    provenance: Provenance,
}

impl DiscreteSystem {
    /// System on an abstract node set. `eta` is row-major `N x N`.
    pub fn from_parts(pi: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let sys = Self {
            grid: None,
            pi,
            eta,
            delta: None,
            provenance: Provenance {
                renormalization: 1.0,
                ..Default::default()
            },
        };
        sys.validate()?;
        Ok(sys)
    }

    /// System attached to a lattice.
    pub fn on_grid(grid: GridSpec, pi: Vec<f64>, eta: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if pi.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: pi.len(),
            });
        }
        let sys = Self {
            delta: Some(grid.cell_diameter()),
            grid: Some(grid),
            pi,
            eta,
            provenance,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Two nodes with weights `(p1, p2)` joined by an edge of weight `eta`.
    pub fn two_point(p1: f64, p2: f64, eta: f64) -> Result<Self> {
        Self::from_parts(vec![p1, p2], vec![0.0, eta, eta, 0.0])
    }

    fn validate(&self) -> Result<()> {
        let n = self.pi.len();
        if n == 0 {
            return Err(Error::InvalidArgument("system has no nodes".into()));
        }
        if self.eta.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: self.eta.len(),
            });
        }
        for (i, &p) in self.pi.iter().enumerate() {
            if !(p.is_finite() && p >= MIN_CELL_WEIGHT) {
                return Err(Error::ZeroCellMass { cell: i, mass: p });
            }
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, expected 1")));
        }
        for i in 0..n {
            if self.eta[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!("kernel diagonal entry {i} is nonzero")));
            }
            for j in (i + 1)..n {
                let a = self.eta[i * n + j];
                if !(a.is_finite() && a >= 0.0) {
                    return Err(Error::InvalidArgument(format!("kernel entry ({i},{j}) = {a} is not finite and nonnegative")));
                }
                if a != self.eta[j * n + i] {
                    return Err(Error::InvalidArgument(format!("kernel is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Row-major `N x N` kernel.
    pub fn eta_matrix(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta(&self, i: usize, j: usize) -> f64 {
        self.eta[i * self.len() + j]
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.grid.as_ref()
    }

    /// Cell diameter `sqrt(d)/n` for lattice systems.
    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Smallest off-diagonal kernel entry.
    pub fn min_offdiag_eta(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    best = best.min(self.eta[i * n + j]);
                }
            }
        }
        best
    }

    /// Same system with the kernel multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidArgument(format!("scale factor must be positive, got {factor}")));
        }
        let mut out = self.clone();
        out.eta.iter_mut().for_each(|e| *e *= factor);
        Ok(out)
    }

    /// Connected components of the graph `{eta_ij > 0}`.
    pub fn components(&self) -> Vec<usize> {
        let n = self.len();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if label[j] == usize::MAX && self.eta[i * n + j] > 0.0 {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn to_document(&self) -> SystemDocument {
        let n = self.len();
        SystemDocument {
            schema: SYSTEM_SCHEMA.to_string(),
            dim: self.grid.as_ref().map(|g| g.dim()),
            level: self.grid.as_ref().map(|g| g.level()),
            delta: self.delta,
            pi: self.pi.clone(),
            eta: self.eta.chunks(n).map(|row| row.to_vec()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_document(doc: SystemDocument) -> Result<Self> {
        if doc.schema != SYSTEM_SCHEMA {
            return Err(Error::Serialization(format!("unsupported schema `{}`", doc.schema)));
        }
        let n = doc.pi.len();
        if doc.eta.len() != n || doc.eta.iter().any(|r| r.len() != n) {
            return Err(Error::Serialization("eta must be a square array matching pi".into()));
        }
        let eta = doc.eta.into_iter().flatten().collect();
        match (doc.dim, doc.level) {
            (Some(d), Some(l)) => {
                let grid = crate::torus::build_grid(d, l)?;
                Self::on_grid(grid, doc.pi, eta, doc.provenance)
            }
            (None, None) => {
                let mut sys = Self::from_parts(doc.pi, eta)?;
                sys.provenance = doc.provenance;
                Ok(sys)
            }
            _ => Err(Error::Serialization("dim and level must be given together".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Serialized form of a [`DiscreteSystem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDocument {
    pub schema: String,
    pub dim: Option<usize>,
    pub level: Option<usize>,
    pub delta: Option<f64>,
    pub pi: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Cell masses of the pushforward measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Pushforward {
    /// Renormalised weights summing to one.
    pub weights: Vec<f64>,
    /// Raw cell integrals before renormalisation.
    pub raw: Vec<f64>,
    pub renormalization: f64,
}

/// `pi_n(j) = pi(cell_j)`.
pub fn pushforward_measure(measure: &Measure, grid: &GridSpec, quad: &QuadratureConfig) -> Result<Pushforward> {
    if measure.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: measure.dim(),
        });
    }
    let n = grid.len();
    let d = grid.dim();
    let h = grid.spacing();
    let raw: Vec<f64> = match measure.piecewise_level() {
        Some(None) => {
            let x = grid.point_coords(0);
            vec![measure.density(&x[..d]) / n as f64; n]
        }
        Some(Some(level)) => {
            // exact box overlaps against a piecewise constant density
            let fine = crate::torus::build_grid(d, level)?;
            let hf = fine.spacing();
            let dens: Vec<f64> = (0..fine.len())
                .map(|c| measure.density(&fine.point_coords(c)[..d]))
                .collect();
            (0..n)
                .into_par_iter()
                .map(|j| {
                    let cj = grid.point_coords(j);
                    (0..fine.len())
                        .map(|c| dens[c] * box_overlap(&cj[..d], h, &fine.point_coords(c)[..d], hf))
                        .sum()
                })
                .collect()
        }
        None => (0..n)
            .into_par_iter()
            .map(|j| {
                let cj = grid.point_coords(j);
                cell_rule(&cj[..d], h, quad)
                    .iter()
                    .map(|(p, w)| w * measure.density(&p[..d]))
                    .sum()
            })
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::Quadrature(format!(
            "pushforward mass {total} differs from 1 by more than 1e-8"
        )));
    }
    for (cell, &mass) in raw.iter().enumerate() {
        if !(mass >= MIN_CELL_WEIGHT) {
            return Err(Error::ZeroCellMass { cell, mass });
        }
    }
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    Ok(Pushforward {
        weights,
        raw,
        renormalization: total,
    })
}

fn pair_integral_adaptive(
    kernel: &Kernel,
    measure: &Measure,
    grid: &GridSpec,
    j: usize,
    k: usize,
    tol: Tolerance,
) -> Result<f64> {
    let d = grid.dim();
    let h = grid.spacing();
    let cj = grid.point_coords(j);
    let disp = grid.displacement(j, k);
    let mut outer = [(0.0, 0.0); MAX_DIM];
    let mut inner = [(0.0, 0.0); MAX_DIM];
    for axis in 0..d {
        outer[axis] = (cj[axis] - 0.5 * h, cj[axis] + 0.5 * h);
        let ck = cj[axis] + disp[axis];
        inner[axis] = (ck - 0.5 * h, ck + 0.5 * h);
    }
    let problem = AnnularProblem {
        outer: &outer[..d],
        inner: &inner[..d],
        center: &cj[..d],
        annulus: Annulus::outside(0.5 * grid.cell_diameter()),
        periodic: true,
        tol,
    };
    let est = integrate_annular(&problem, |x, y| {
        kernel.eval_raw(x, y) * measure.density(x) * measure.density(y)
    });
    if !est.value.is_finite() {
        return Err(Error::Quadrature(format!("cell pair ({j},{k}): non-finite integrand")));
    }
    if !est.converged {
        return Err(Error::Quadrature(format!(
            "cell pair ({j},{k}): adaptive refinement did not reach tolerance"
        )));
    }
    Ok(est.value)
}

/// `eta_n` as a row-major `N x N` array, given the raw cell masses.
pub fn discretize_kernel(
    kernel: &Kernel,
    measure: &Measure,
    grid: &GridSpec,
    quad: &QuadratureConfig,
    cell_mass: &[f64],
) -> Result<Vec<f64>> {
    let n = grid.len();
    let d = grid.dim();
    if kernel.dim() != d || measure.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if kernel.dim() != d { kernel.dim() } else { measure.dim() },
        });
    }
    if cell_mass.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cell_mass.len(),
        });
    }
    if let Some((cell, &mass)) = cell_mass.iter().enumerate().find(|(_, m)| !(**m >= MIN_CELL_WEIGHT)) {
        return Err(Error::ZeroCellMass { cell, mass });
    }
    let h = grid.spacing();
    // quadrature nodes pre-weighted by the density, per cell
    let rules: Vec<Vec<([f64; MAX_DIM], f64)>> = if d >= 2 {
        (0..n)
            .map(|j| {
                let cj = grid.point_coords(j);
                cell_rule(&cj[..d], h, quad)
                    .into_iter()
                    .map(|(p, w)| (p, w * measure.density(&p[..d])))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let near_tol = Tolerance {
        rel: if d == 1 { quad.tolerance.rel } else { quad.cutoff_rel_tol },
        ..quad.tolerance
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| ((j + 1)..n).map(move |k| (j, k))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, k)| -> Result<f64> {
            let integral = if d == 1 || grid.cell_offset_linf(j, k) <= 1 {
                pair_integral_adaptive(kernel, measure, grid, j, k, near_tol)?
            } else {
                let mut acc = 0.0;
                for (x, wx) in &rules[j] {
                    let mut row = 0.0;
                    for (y, wy) in &rules[k] {
                        row += wy * kernel.eval_raw(&x[..d], &y[..d]);
                    }
                    acc += wx * row;
                }
                if !acc.is_finite() {
                    return Err(Error::Quadrature(format!("cell pair ({j},{k}): non-finite integrand")));
                }
                acc
            };
            Ok(integral / (cell_mass[j] * cell_mass[k]))
        })
        .collect::<Result<_>>()?;
    let mut eta = vec![0.0; n * n];
    for (&(j, k), &v) in pairs.iter().zip(&values) {
        eta[j * n + k] = v;
        eta[k * n + j] = v;
    }
    Ok(eta)
}

/// Builds `(pi_n, eta_n)` from continuum specs.
pub fn build_system(
    kernel_spec: &KernelSpec,
    measure_spec: &MeasureSpec,
    grid: &GridSpec,
    quad: &QuadratureConfig,
) -> Result<DiscreteSystem> {
    let d = grid.dim();
    let kernel = Kernel::compile(kernel_spec, d, quad)?;
    let measure = Measure::compile(measure_spec, d, quad)?;
    let push = pushforward_measure(&measure, grid, quad)?;
    let eta = discretize_kernel(&kernel, &measure, grid, quad, &push.raw)?;
    DiscreteSystem::on_grid(
        grid.clone(),
        push.weights,
        eta,
        Provenance {
            kernel: Some(kernel_spec.clone()),
            measure: Some(measure_spec.clone()),
            quadrature: Some(quad.clone()),
            renormalization: push.renormalization,
            note: None,
        },
    )
}

/// Outcome of [`verify_moment_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBoundReport {
    /// `max_j sum_k (1 ∧ |x_j - x_k|^2) eta_n(j, k) pi_n(k)`.
    pub discrete_moment: f64,
    pub argmax: usize,
    pub continuum_sup: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Checks `M_n <= 4 * continuum_sup * (1 + slack)`.
pub fn verify_moment_bound(sys: &DiscreteSystem, continuum_sup: f64, slack: f64) -> Result<MomentBoundReport> {
    let grid = sys
        .grid()
        .ok_or_else(|| Error::InvalidArgument("moment bound needs a lattice system".into()))?;
    let n = sys.len();
    let (argmax, m) = (0..n)
        .map(|j| {
            let s: f64 = (0..n)
                .filter(|&k| k != j)
                .map(|k| {
                    let r = grid.point_distance(j, k);
                    (r * r).min(1.0) * sys.eta(j, k) * sys.pi()[k]
                })
                .sum();
            (j, s)
        })
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let bound = 4.0 * continuum_sup;
    let report = MomentBoundReport {
        discrete_moment: m,
        argmax,
        continuum_sup,
        bound,
        slack,
    };
    if m > bound * (1.0 + slack) {
        return Err(Error::Quadrature(format!(
            "discrete second moment {m} at node {argmax} exceeds 4 x {continuum_sup}"
        )));
    }
    Ok(report)
}
