//! Nonlocal Wasserstein distance on a discrete system.
//!
//! `W^2(nu, sigma)` is the infimum of `int_0^1 A(mu_t, v_t) dt` over paths
//! solving `dmu_i/dt + sum_j v_ij = 0`. Time is split into `M` intervals of
//! length `dt = 1/M`, with the interpolation argument taken at the interval
//! midpoint `u~ = (u^(m-1) + u^(m)) / 2`:
//!
//! ```text
//! W_M^2 = min sum_m dt sum_{i<j} (v^(m)_ij)^2 / (theta(u~_i, u~_j) eta_ij pi_i pi_j).
//! ```
//!
//! For fixed densities the flux problem of each interval is a weighted
//! least-norm problem with weights `w_ij = theta(u~_i, u~_j) eta_ij pi_i pi_j`.
//! Its solution is `v_ij = w_ij (lambda_i - lambda_j)` with `L lambda = -d/dt`,
//! where `L` is the weighted graph Laplacian and `d = mu^(m) - mu^(m-1)`, and
//! its value is `d^T L^+ d / dt`. The outer problem over the interior slice
//! masses is convex; it is solved by damped Newton steps on a log-barrier
//! objective with a decreasing barrier weight.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::functionals::{log_mean_d1, log_mean_unchecked, DensityState, FluxField};
use crate::quadrature::{adaptive_gk, Tolerance};

/// Initial path for the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitStrategy {
    /// Linear interpolation of the masses, mixed with a little of `pi`.
    Linear,
    /// The linear start perturbed by seeded random positive slices.
    Perturbed { seed: u64 },
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Newton iteration budget summed over all barrier stages.
    pub max_iters: usize,
    /// Stop when the relative objective change falls below this.
    pub rel_tol: f64,
    /// First barrier weight, relative to the starting objective.
    pub barrier_initial: f64,
    /// Last barrier weight, relative to the starting objective.
    pub barrier_final: f64,
    /// Factor applied to the barrier weight between stages.
    pub barrier_factor: f64,
    pub init: InitStrategy,
    /// Relative accuracy reported for distances, used by the axiom checks.
    pub reported_tolerance: f64,
    pub keep_path: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            rel_tol: 1e-9,
            barrier_initial: 1e-3,
            barrier_final: 1e-13,
            barrier_factor: 0.05,
            init: InitStrategy::Linear,
            reported_tolerance: 1e-7,
            keep_path: true,
        }
    }
}

/// Endpoints and time resolution of a distance computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProblem {
    pub u_start: DensityState,
    pub u_end: DensityState,
    pub intervals: usize,
    pub settings: SolverSettings,
}

impl PathProblem {
    pub fn new(u_start: DensityState, u_end: DensityState, intervals: usize) -> Self {
        Self {
            u_start,
            u_end,
            intervals,
            settings: SolverSettings::default(),
        }
    }
}

/// Time-discrete path: densities `u^(0..=M)` and one flux per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    pub dt: f64,
    pub densities: Vec<Vec<f64>>,
    pub fluxes: Vec<FluxField>,
}

impl DiscretePath {
    pub fn intervals(&self) -> usize {
        self.fluxes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlwResult {
    /// `W`, or `+inf` when the endpoints cannot be joined.
    pub distance: f64,
    pub squared: f64,
    pub intervals: usize,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    /// Norm of the barrier-free objective gradient at the returned path.
    pub gradient_norm: f64,
    /// Largest continuity-equation residual over the intervals.
    pub constraint_residual: f64,
    pub converged: bool,
    /// Reason the distance is infinite, if it is.
    pub certificate: Option<String>,
    pub path: Option<DiscretePath>,
}

/// Serialized distance result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDocument {
    #[serde(rename = "W")]
    pub w: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    pub gradient_norm: f64,
    pub constraint_residual: f64,
    pub certificate: Option<String>,
    pub path_densities: Option<Vec<Vec<f64>>>,
}

impl NlwResult {
    pub fn to_document(&self, with_path: bool) -> MetricDocument {
        MetricDocument {
            w: self.distance.is_finite().then_some(self.distance),
            m: self.intervals,
            iterations: self.iterations,
            objective_history: self.objective_history.clone(),
            gradient_norm: self.gradient_norm,
            constraint_residual: self.constraint_residual,
            certificate: self.certificate.clone(),
            path_densities: if with_path {
                self.path.as_ref().map(|p| p.densities.clone())
            } else {
                None
            },
        }
    }
}

/// Variable layout: per interior slice, all nodes of each kernel component
/// except its last one; the last node carries the remaining component mass.
struct Layout<'a> {
    sys: &'a DiscreteSystem,
    m: usize,
    dt: f64,
    comps: Vec<Vec<usize>>,
    comp_of: Vec<usize>,
    comp_mass: Vec<f64>,
    free: Vec<usize>,
    mu_start: Vec<f64>,
    mu_end: Vec<f64>,
}

struct Eval {
    cost: f64,
    barrier: f64,
    grad: Vec<f64>,
    grad_cost: Vec<f64>,
}

impl<'a> Layout<'a> {
    fn nf(&self) -> usize {
        self.free.len()
    }

    fn nvars(&self) -> usize {
        (self.m - 1) * self.nf()
    }

    fn slices(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.sys.len();
        let nf = self.nf();
        let mut out = Vec::with_capacity(self.m + 1);
        out.push(self.mu_start.clone());
        for s in 1..self.m {
            let xs = &x[(s - 1) * nf..s * nf];
            let mut mu = vec![0.0; n];
            let mut used = self.comp_mass.clone();
            for (f, &node) in self.free.iter().enumerate() {
                mu[node] = xs[f];
                used[self.comp_of[node]] -= xs[f];
            }
            for (c, nodes) in self.comps.iter().enumerate() {
                mu[*nodes.last().unwrap()] = used[c];
            }
            out.push(mu);
        }
        out.push(self.mu_end.clone());
        out
    }

    /// Free-variable direction to per-node mass changes of a slice.
    fn expand(&self, p: &[f64]) -> Vec<f64> {
        let mut mu = vec![0.0; self.sys.len()];
        let mut used = vec![0.0; self.comps.len()];
        for (f, &node) in self.free.iter().enumerate() {
            mu[node] = p[f];
            used[self.comp_of[node]] -= p[f];
        }
        for (c, nodes) in self.comps.iter().enumerate() {
            mu[*nodes.last().unwrap()] = used[c];
        }
        mu
    }

    fn interval_weights(&self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.sys.len();
        let pi = self.sys.pi();
        let ut: Vec<f64> = (0..n).map(|i| 0.5 * (a[i] + b[i]) / pi[i]).collect();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let e = self.sys.eta(i, j);
                if e > 0.0 {
                    let v = log_mean_unchecked(ut[i], ut[j]) * e * pi[i] * pi[j];
                    w[i * n + j] = v;
                    w[j * n + i] = v;
                }
            }
        }
        (ut, w)
    }

    /// Potentials `lambda` with `L lambda = rhs`, grounded at the last node of
    /// every component. `None` if a component Laplacian is singular.
    fn potentials(&self, w: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
        let n = self.sys.len();
        let mut lambda = vec![0.0; n];
        for nodes in &self.comps {
            let k = nodes.len() - 1;
            if k == 0 {
                continue;
            }
            let mut lap = DMatrix::zeros(k, k);
            for (a, &i) in nodes[..k].iter().enumerate() {
                let mut diag = 0.0;
                for &j in nodes {
                    if j != i {
                        diag += w[i * n + j];
                    }
                }
                lap[(a, a)] = diag;
                for (b, &j) in nodes[..k].iter().enumerate() {
                    if a != b {
                        lap[(a, b)] = -w[i * n + j];
                    }
                }
            }
            let r = DVector::from_iterator(k, nodes[..k].iter().map(|&i| rhs[i]));
            let sol = lap.cholesky()?.solve(&r);
            for (a, &i) in nodes[..k].iter().enumerate() {
                lambda[i] = sol[a];
            }
        }
        Some(lambda)
    }

    fn evaluate(&self, x: &[f64], tau: f64) -> Option<Eval> {
        let n = self.sys.len();
        let pi = self.sys.pi();
        let mus = self.slices(x);
        let mut barrier = 0.0;
        for mu in &mus[1..self.m] {
            for i in 0..n {
                if !(mu[i] > 0.0) {
                    return None;
                }
                barrier -= tau * self.dt * pi[i] * (mu[i] / pi[i]).ln();
            }
        }
        let mut g_mu = vec![vec![0.0; n]; self.m + 1];
        let mut cost = 0.0;
        for s in 1..=self.m {
            let (a, b) = (&mus[s - 1], &mus[s]);
            let d: Vec<f64> = (0..n).map(|i| b[i] - a[i]).collect();
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (ut, w) = self.interval_weights(a, b);
            let rhs: Vec<f64> = d.iter().map(|v| -v / self.dt).collect();
            let lambda = self.potentials(&w, &rhs)?;
            for i in 0..n {
                g_mu[s][i] -= 2.0 * lambda[i];
                g_mu[s - 1][i] += 2.0 * lambda[i];
                for j in (i + 1)..n {
                    let wij = w[i * n + j];
                    let e = self.sys.eta(i, j);
                    if e == 0.0 {
                        continue;
                    }
                    let dl = lambda[i] - lambda[j];
                    cost += self.dt * wij * dl * dl;
                    let dw = -self.dt * dl * dl;
                    let scale = e * pi[i] * pi[j];
                    // d w_ij / d mu_i = theta_1 * scale / (2 pi_i), same for both adjacent slices
                    let gi = dw * scale * log_mean_d1(ut[i], ut[j]) / (2.0 * pi[i]);
                    let gj = dw * scale * log_mean_d1(ut[j], ut[i]) / (2.0 * pi[j]);
                    g_mu[s][i] += gi;
                    g_mu[s - 1][i] += gi;
                    g_mu[s][j] += gj;
                    g_mu[s - 1][j] += gj;
                }
            }
        }
        let nf = self.nf();
        let mut grad_cost = vec![0.0; self.nvars()];
        let mut grad = vec![0.0; self.nvars()];
        for s in 1..self.m {
            for (f, &node) in self.free.iter().enumerate() {
                let last = *self.comps[self.comp_of[node]].last().unwrap();
                let gc = g_mu[s][node] - g_mu[s][last];
                // barrier term -tau dt pi_i log(mu_i / pi_i) per node
                let gb = -tau * self.dt * (pi[node] / mus[s][node] - pi[last] / mus[s][last]);
                grad_cost[(s - 1) * nf + f] = gc;
                grad[(s - 1) * nf + f] = gc + gb;
            }
        }
        Some(Eval {
            cost,
            barrier,
            grad,
            grad_cost,
        })
    }

    fn build_path(&self, x: &[f64]) -> Option<(DiscretePath, f64)> {
        let n = self.sys.len();
        let pi = self.sys.pi();
        let mus = self.slices(x);
        let mut fluxes = Vec::with_capacity(self.m);
        let mut residual: f64 = 0.0;
        for s in 1..=self.m {
            let (a, b) = (&mus[s - 1], &mus[s]);
            let d: Vec<f64> = (0..n).map(|i| b[i] - a[i]).collect();
            let (_, w) = self.interval_weights(a, b);
            let rhs: Vec<f64> = d.iter().map(|v| -v / self.dt).collect();
            let lambda = self.potentials(&w, &rhs)?;
            let v = FluxField::from_upper(n, |i, j| w[i * n + j] * (lambda[i] - lambda[j]));
            let out = v.outflow();
            for i in 0..n {
                residual = residual.max((d[i] / self.dt + out[i]).abs());
            }
            fluxes.push(v);
        }
        let densities = mus
            .iter()
            .map(|mu| mu.iter().zip(pi).map(|(m, p)| m / p).collect())
            .collect();
        Some((
            DiscretePath {
                dt: self.dt,
                densities,
                fluxes,
            },
            residual,
        ))
    }
}

fn component_masses(labels: &[usize], mu: &[f64]) -> Vec<f64> {
    let count = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![0.0; count];
    for (i, &c) in labels.iter().enumerate() {
        out[c] += mu[i];
    }
    out
}

fn initial_point(layout: &Layout<'_>, init: InitStrategy) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let n = layout.sys.len();
    let pi = layout.sys.pi();
    // pi rescaled to the component masses
    let mut pi_c = vec![0.0; n];
    for (c, nodes) in layout.comps.iter().enumerate() {
        let total: f64 = nodes.iter().map(|&i| pi[i]).sum();
        for &i in nodes {
            pi_c[i] = pi[i] / total * layout.comp_mass[c];
        }
    }
    let mut rng = match init {
        InitStrategy::Perturbed { seed } => Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
        InitStrategy::Linear => None,
    };
    let nf = layout.nf();
    let mut x = vec![0.0; layout.nvars()];
    for s in 1..layout.m {
        let t = s as f64 / layout.m as f64;
        let mut mu: Vec<f64> = (0..n)
            .map(|i| 0.9 * ((1.0 - t) * layout.mu_start[i] + t * layout.mu_end[i]) + 0.1 * pi_c[i])
            .collect();
        if let Some(rng) = rng.as_mut() {
            let mut noise: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            for (c, nodes) in layout.comps.iter().enumerate() {
                let total: f64 = nodes.iter().map(|&i| noise[i]).sum();
                for &i in nodes {
                    noise[i] *= layout.comp_mass[c] / total;
                }
            }
            for i in 0..n {
                mu[i] = 0.7 * mu[i] + 0.3 * noise[i];
            }
        }
        for (f, &node) in layout.free.iter().enumerate() {
            x[(s - 1) * nf + f] = mu[node];
        }
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest step in `[0, 1]` keeping every interior slice mass above 0.5% of its value.
fn step_to_boundary(layout: &Layout<'_>, x: &[f64], p: &[f64]) -> f64 {
    let nf = layout.nf();
    let mus = layout.slices(x);
    let mut alpha: f64 = 1.0;
    for s in 1..layout.m {
        let dm = layout.expand(&p[(s - 1) * nf..s * nf]);
        for (mu, d) in mus[s].iter().zip(&dm) {
            if *d < 0.0 {
                alpha = alpha.min(0.995 * mu / -d);
            }
        }
    }
    alpha
}

fn hessian(layout: &Layout<'_>, x: &[f64], tau: f64) -> Option<DMatrix<f64>> {
    let nv = x.len();
    let columns: Vec<Option<Vec<f64>>> = (0..nv)
        .into_par_iter()
        .map(|k| {
            let mut h = 1e-5 * x[k].abs().max(1e-8);
            for _ in 0..30 {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                if let (Some(a), Some(b)) = (layout.evaluate(&xp, tau), layout.evaluate(&xm, tau)) {
                    return Some(a.grad.iter().zip(&b.grad).map(|(u, v)| (u - v) / (2.0 * h)).collect());
                }
                h *= 0.25;
            }
            None
        })
        .collect();
    let mut hm = DMatrix::zeros(nv, nv);
    for (k, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (r, v) in col.into_iter().enumerate() {
            hm[(r, k)] = v;
        }
    }
    Some(0.5 * (&hm + hm.transpose()))
}

fn newton_direction(hm: &DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let nv = g.len();
    let gv = DVector::from_column_slice(g);
    let scale = (0..nv).map(|i| hm[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..40 {
        let mut m = hm.clone();
        for i in 0..nv {
            m[(i, i)] += reg;
        }
        if let Some(ch) = m.cholesky() {
            let p = ch.solve(&(-&gv));
            if p.iter().all(|v| v.is_finite()) {
                return p.iter().copied().collect();
            }
        }
        reg = if reg == 0.0 { 1e-12 * scale } else { reg * 10.0 };
    }
    g.iter().map(|v| -v).collect()
}

/// `W_{eta,pi}` between two densities with `M` time intervals.
pub fn nlw_distance(sys: &DiscreteSystem, problem: &PathProblem) -> Result<NlwResult> {
    let n = sys.len();
    let m = problem.intervals;
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 time intervals, got {m}")));
    }
    if problem.u_start.len() != n || problem.u_end.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: problem.u_start.len().min(problem.u_end.len()),
        });
    }
    let pi = sys.pi();
    let mu_start = problem.u_start.masses(pi);
    let mu_end = problem.u_end.masses(pi);
    let labels = sys.components();
    let start_c = component_masses(&labels, &mu_start);
    let end_c = component_masses(&labels, &mu_end);
    for (c, (a, b)) in start_c.iter().zip(&end_c).enumerate() {
        if (a - b).abs() > 1e-12 {
            return Ok(NlwResult {
                distance: f64::INFINITY,
                squared: f64::INFINITY,
                intervals: m,
                iterations: 0,
                objective_history: Vec::new(),
                gradient_norm: 0.0,
                constraint_residual: 0.0,
                converged: true,
                certificate: Some(format!(
                    "kernel component {c} carries mass {a} at the start and {b} at the end; no path in the support graph moves mass between components"
                )),
                path: None,
            });
        }
    }
    let mut comps: Vec<Vec<usize>> = vec![Vec::new(); start_c.len()];
    for (i, &c) in labels.iter().enumerate() {
        comps[c].push(i);
    }
    let free: Vec<usize> = comps.iter().flat_map(|nodes| nodes[..nodes.len() - 1].iter().copied()).collect();
    let layout = Layout {
        sys,
        m,
        dt: 1.0 / m as f64,
        comps,
        comp_of: labels,
        comp_mass: start_c,
        free,
        mu_start,
        mu_end,
    };

    if problem.u_start == problem.u_end || layout.nf() == 0 {
        let x: Vec<f64> = (1..m)
            .flat_map(|_| layout.free.iter().map(|&i| layout.mu_start[i]).collect::<Vec<_>>())
            .collect();
        let path = layout.build_path(&x).map(|(p, _)| p);
        return Ok(NlwResult {
            distance: 0.0,
            squared: 0.0,
            intervals: m,
            iterations: 0,
            objective_history: vec![0.0],
            gradient_norm: 0.0,
            constraint_residual: 0.0,
            converged: true,
            certificate: None,
            path: if problem.settings.keep_path { path } else { None },
        });
    }

    let settings = &problem.settings;
    let mut x = initial_point(&layout, settings.init);
    let start = layout
        .evaluate(&x, 0.0)
        .ok_or_else(|| Error::Optimizer("initial path is infeasible".into()))?;
    let scale = start.cost.max(1e-300);
    let mut tau = settings.barrier_initial * scale;
    let tau_end = settings.barrier_final * scale;
    let mut history = vec![start.cost];
    let mut iterations = 0;
    loop {
        // Newton on the barrier objective at this tau
        let mut stage_iters = 0;
        loop {
            let e = layout
                .evaluate(&x, tau)
                .ok_or_else(|| Error::Optimizer("iterate left the feasible region".into()))?;
            let f0 = e.cost + e.barrier;
            let hm = hessian(&layout, &x, tau).ok_or_else(|| Error::Optimizer("Hessian evaluation failed".into()))?;
            let mut p = newton_direction(&hm, &e.grad);
            let mut slope = dot(&e.grad, &p);
            if !(slope < 0.0) {
                p = e.grad.iter().map(|v| -v).collect();
                slope = dot(&e.grad, &p);
            }
            let decrement = -slope;
            if decrement <= 1e-15 * f0.abs().max(1e-300) {
                break;
            }
            let mut alpha = step_to_boundary(&layout, &x, &p);
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
                if let Some(t) = layout.evaluate(&trial, tau) {
                    let f1 = t.cost + t.barrier;
                    if f1 <= f0 + 1e-4 * alpha * slope {
                        accepted = Some((trial, f1, t.cost));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            iterations += 1;
            stage_iters += 1;
            if iterations > settings.max_iters {
                return Err(Error::Optimizer(format!(
                    "no convergence within {} Newton iterations",
                    settings.max_iters
                )));
            }
            let Some((trial, f1, cost)) = accepted else { break };
            x = trial;
            history.push(cost);
            let rel = (f0 - f1).abs() / f1.abs().max(1e-300);
            if rel < 1e-3 * settings.rel_tol || (decrement < 1e-12 * f0.abs() && alpha == 1.0) {
                break;
            }
            if stage_iters > 200 {
                break;
            }
        }
        if tau <= tau_end {
            break;
        }
        tau = (tau * settings.barrier_factor).max(tau_end);
    }
    // final polish without the barrier while steps keep improving
    for _ in 0..20 {
        let e = layout.evaluate(&x, 0.0).ok_or_else(|| Error::Optimizer("final path infeasible".into()))?;
        let Some(hm) = hessian(&layout, &x, 0.0) else { break };
        let p = newton_direction(&hm, &e.grad);
        let slope = dot(&e.grad, &p);
        if !(slope < 0.0) {
            break;
        }
        let mut alpha = step_to_boundary(&layout, &x, &p);
        let mut improved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            if let Some(t) = layout.evaluate(&trial, 0.0) {
                if t.cost <= e.cost + 1e-4 * alpha * slope {
                    let rel = (e.cost - t.cost) / t.cost.max(1e-300);
                    x = trial;
                    history.push(t.cost);
                    iterations += 1;
                    improved = rel >= settings.rel_tol;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let fin = layout.evaluate(&x, 0.0).ok_or_else(|| Error::Optimizer("final path infeasible".into()))?;
    let (path, residual) = layout
        .build_path(&x)
        .ok_or_else(|| Error::Optimizer("could not recover fluxes".into()))?;
    let squared = fin.cost;
    let converged = history.len() < 2 || {
        let k = history.len();
        (history[k - 2] - history[k - 1]).abs() / history[k - 1].max(1e-300) < settings.rel_tol
    };
    Ok(NlwResult {
        distance: squared.max(0.0).sqrt(),
        squared,
        intervals: m,
        iterations,
        objective_history: history,
        gradient_norm: fin.grad_cost.iter().map(|g| g * g).sum::<f64>().sqrt(),
        constraint_residual: residual,
        converged,
        certificate: None,
        path: if settings.keep_path { Some(path) } else { None },
    })
}

/// `W` on two points by the arclength integral
/// `int dm / sqrt(theta(m/pi1, (1-m)/pi2) eta pi1 pi2)`, `m` the mass at node 1.
pub fn two_point_distance_oracle(pi1: f64, pi2: f64, eta: f64, m_start: f64, m_end: f64) -> Result<f64> {
    if !(pi1 > 0.0 && pi2 > 0.0 && eta > 0.0) {
        return Err(Error::InvalidArgument("weights and kernel must be positive".into()));
    }
    if !((0.0..=1.0).contains(&m_start) && (0.0..=1.0).contains(&m_end)) {
        return Err(Error::InvalidArgument("masses must lie in [0, 1]".into()));
    }
    if m_start == m_end {
        return Ok(0.0);
    }
    let (a, b) = if m_start < m_end { (m_start, m_end) } else { (m_end, m_start) };
    let tol = Tolerance {
        abs: 1e-15,
        rel: 1e-12,
        max_intervals: 4000,
    };
    let est = adaptive_gk(
        |m| 1.0 / (log_mean_unchecked(m / pi1, (1.0 - m) / pi2) * eta * pi1 * pi2).sqrt(),
        a,
        b,
        &[],
        tol,
    );
    if !est.value.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(est.value)
}

/// Objective of a given path; errors if the path violates the continuity
/// equation by more than `1e-8`.
pub fn action_of_path(sys: &DiscreteSystem, path: &DiscretePath) -> Result<f64> {
    let n = sys.len();
    let pi = sys.pi();
    if path.densities.len() != path.fluxes.len() + 1 {
        return Err(Error::InvalidArgument("path needs one more density than fluxes".into()));
    }
    let mut total = 0.0;
    for (s, v) in path.fluxes.iter().enumerate() {
        let (a, b) = (&path.densities[s], &path.densities[s + 1]);
        if a.len() != n || b.len() != n || v.n() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.n() });
        }
        let out = v.outflow();
        for i in 0..n {
            let r = ((b[i] - a[i]) * pi[i] / path.dt + out[i]).abs();
            if r > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "continuity residual {r:e} at interval {} node {i}",
                    s + 1
                )));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let flux = v.get(i, j);
                let denom = log_mean_unchecked(0.5 * (a[i] + b[i]), 0.5 * (a[j] + b[j])) * sys.eta(i, j) * pi[i] * pi[j];
                if denom > 0.0 {
                    total += path.dt * flux * flux / denom;
                } else if flux != 0.0 {
                    return Ok(f64::INFINITY);
                }
            }
        }
    }
    Ok(total)
}

/// Path with prescribed densities and, per interval, the cheapest fluxes
/// compatible with them.
pub fn path_from_densities(sys: &DiscreteSystem, densities: &[Vec<f64>]) -> Result<DiscretePath> {
    let m = densities.len().saturating_sub(1);
    if m < 1 {
        return Err(Error::InvalidArgument("need at least two densities".into()));
    }
    let pi = sys.pi();
    let labels = sys.components();
    let mu_start: Vec<f64> = densities[0].iter().zip(pi).map(|(u, p)| u * p).collect();
    let mu_end: Vec<f64> = densities[m].iter().zip(pi).map(|(u, p)| u * p).collect();
    let mut comps: Vec<Vec<usize>> = vec![Vec::new(); labels.iter().max().map_or(0, |c| c + 1)];
    for (i, &c) in labels.iter().enumerate() {
        comps[c].push(i);
    }
    let free: Vec<usize> = comps.iter().flat_map(|nodes| nodes[..nodes.len() - 1].iter().copied()).collect();
    let layout = Layout {
        sys,
        m,
        dt: 1.0 / m as f64,
        comp_mass: component_masses(&labels, &mu_start),
        comps,
        comp_of: labels,
        free,
        mu_start,
        mu_end,
    };
    let x: Vec<f64> = densities[1..m]
        .iter()
        .flat_map(|u| layout.free.iter().map(|&i| u[i] * pi[i]).collect::<Vec<_>>())
        .collect();
    layout
        .build_path(&x)
        .map(|(p, _)| p)
        .ok_or_else(|| Error::Optimizer("singular interval Laplacian".into()))
}

/// Pairwise distances and axiom violations over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAxiomReport {
    /// `distances[a][b] = W(sample_a, sample_b)`.
    pub distances: Vec<Vec<f64>>,
    pub max_self_distance: f64,
    pub max_symmetry_violation: f64,
    pub max_triangle_violation: f64,
    /// Absolute accuracy attributed to each distance.
    pub solver_tolerance: f64,
}

/// Computes all ordered pairwise distances (in parallel) and reports the
/// largest violations of `W(a,a) = 0`, symmetry and the triangle inequality.
pub fn check_metric_axioms(
    sys: &DiscreteSystem,
    samples: &[DensityState],
    intervals: usize,
    settings: &SolverSettings,
) -> Result<MetricAxiomReport> {
    let k = samples.len();
    if k < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 samples, got {k}")));
    }
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).collect();
    let settings = SolverSettings {
        keep_path: false,
        ..settings.clone()
    };
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let problem = PathProblem {
                u_start: samples[a].clone(),
                u_end: samples[b].clone(),
                intervals,
                settings: settings.clone(),
            };
            nlw_distance(sys, &problem).map(|r| r.distance)
        })
        .collect::<Result<_>>()?;
    let mut d = vec![vec![0.0; k]; k];
    for (&(a, b), v) in pairs.iter().zip(values) {
        d[a][b] = v;
    }
    let mut self_max: f64 = 0.0;
    let mut sym: f64 = 0.0;
    let mut tri: f64 = 0.0;
    let mut dmax: f64 = 0.0;
    for a in 0..k {
        self_max = self_max.max(d[a][a]);
        for b in 0..k {
            dmax = dmax.max(d[a][b]);
            sym = sym.max((d[a][b] - d[b][a]).abs());
            for c in 0..k {
                if a != b && b != c && a != c {
                    tri = tri.max(d[a][c] - d[a][b] - d[b][c]);
                }
            }
        }
    }
    Ok(MetricAxiomReport {
        distances: d,
        max_self_distance: self_max,
        max_symmetry_violation: sym,
        max_triangle_violation: tri,
        solver_tolerance: settings.reported_tolerance * dmax.max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_state() -> DiscreteSystem {
        DiscreteSystem::two_point(0.5, 0.5, 1.0).unwrap()
    }

    fn state(sys: &DiscreteSystem, u: &[f64]) -> DensityState {
        DensityState::new(u.to_vec(), sys.pi()).unwrap()
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(two_point_distance_oracle(0.5, 0.5, 1.0, 0.3, 0.3).unwrap(), 0.0);
        let a = two_point_distance_oracle(0.5, 0.5, 1.0, 0.75, 0.5).unwrap();
        let b = two_point_distance_oracle(0.5, 0.5, 1.0, 0.5, 0.75).unwrap();
        assert!(a > 0.0 && a.is_finite());
        assert_eq!(a, b);
        // brute-force midpoint oracle for the same integral
        let k = 200_000;
        let h = 0.25 / k as f64;
        let mid: f64 = (0..k)
            .map(|i| {
                let m = 0.5 + (i as f64 + 0.5) * h;
                h / (log_mean_unchecked(2.0 * m, 2.0 * (1.0 - m)) * 0.25).sqrt()
            })
            .sum();
        assert_relative_eq!(a, mid, max_relative = 1e-9);
        // an endpoint at zero mass is an integrable singularity
        assert!(two_point_distance_oracle(0.5, 0.5, 1.0, 0.0, 0.5).unwrap().is_finite());
    }

    #[test]
    fn identical_endpoints_give_zero() {
        let sys = two_state();
        let u = state(&sys, &[1.2, 0.8]);
        let r = nlw_distance(&sys, &PathProblem::new(u.clone(), u, 8)).unwrap();
        assert_eq!(r.distance, 0.0);
        let path = r.path.unwrap();
        assert!(path.fluxes.iter().all(|v| v.as_slice().iter().all(|x| *x == 0.0)));
        assert_eq!(action_of_path(&sys, &path).unwrap(), 0.0);
    }

    #[test]
    fn two_point_matches_oracle() {
        let sys = two_state();
        let a = state(&sys, &[1.5, 0.5]);
        let b = state(&sys, &[1.0, 1.0]);
        let oracle = two_point_distance_oracle(0.5, 0.5, 1.0, 0.75, 0.5).unwrap();
        let r = nlw_distance(&sys, &PathProblem::new(a, b, 32)).unwrap();
        assert!(r.converged);
        assert!(r.constraint_residual < 1e-8);
        assert!((r.distance - oracle).abs() / oracle < 0.02, "{} vs {oracle}", r.distance);
    }

    #[test]
    fn asymmetric_two_point_matches_oracle() {
        let sys = DiscreteSystem::two_point(0.8, 0.2, 2.0).unwrap();
        let a = state(&sys, &[0.5, 3.0]);
        let b = state(&sys, &[1.2, 0.2]);
        let oracle = two_point_distance_oracle(0.8, 0.2, 2.0, 0.4, 0.96).unwrap();
        let r = nlw_distance(&sys, &PathProblem::new(a, b, 64)).unwrap();
        assert!((r.distance - oracle).abs() / oracle < 0.01, "{} vs {oracle}", r.distance);
    }

    #[test]
    fn symmetric_and_restart_invariant() {
        let sys = DiscreteSystem::from_parts(
            vec![0.2, 0.3, 0.5],
            vec![0.0, 1.0, 0.5, 1.0, 0.0, 2.0, 0.5, 2.0, 0.0],
        )
        .unwrap();
        let a = DensityState::from_masses(&[0.5, 0.3, 0.2], sys.pi()).unwrap();
        let b = DensityState::from_masses(&[0.1, 0.2, 0.7], sys.pi()).unwrap();
        let fwd = nlw_distance(&sys, &PathProblem::new(a.clone(), b.clone(), 16)).unwrap();
        let bwd = nlw_distance(&sys, &PathProblem::new(b.clone(), a.clone(), 16)).unwrap();
        assert_relative_eq!(fwd.squared, bwd.squared, max_relative = 1e-6);
        let mut p = PathProblem::new(a, b, 16);
        p.settings.init = InitStrategy::Perturbed { seed: 99 };
        let other = nlw_distance(&sys, &p).unwrap();
        assert_relative_eq!(fwd.squared, other.squared, max_relative = 1e-6);
    }

    #[test]
    fn optimum_beats_linear_interpolation_and_converges_in_m() {
        let sys = DiscreteSystem::from_parts(
            vec![0.25; 4],
            vec![0.0, 1.0, 0.2, 1.0, 1.0, 0.0, 1.0, 0.2, 0.2, 1.0, 0.0, 1.0, 1.0, 0.2, 1.0, 0.0],
        )
        .unwrap();
        let a = DensityState::new(vec![2.5, 0.5, 0.5, 0.5], sys.pi()).unwrap();
        let b = DensityState::new(vec![0.4, 0.4, 2.8, 0.4], sys.pi()).unwrap();
        let r = nlw_distance(&sys, &PathProblem::new(a.clone(), b.clone(), 8)).unwrap();
        let m = 8;
        let lin: Vec<Vec<f64>> = (0..=m)
            .map(|s| {
                let t = s as f64 / m as f64;
                a.values().iter().zip(b.values()).map(|(x, y)| (1.0 - t) * x + t * y).collect()
            })
            .collect();
        let lin_cost = action_of_path(&sys, &path_from_densities(&sys, &lin).unwrap()).unwrap();
        assert!(r.squared <= lin_cost * (1.0 + 1e-12));
        assert_relative_eq!(action_of_path(&sys, r.path.as_ref().unwrap()).unwrap(), r.squared, max_relative = 1e-10);
        let vals: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&m| nlw_distance(&sys, &PathProblem::new(a.clone(), b.clone(), m)).unwrap().squared)
            .collect();
        let gaps: Vec<f64> = vals.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(gaps.windows(2).all(|g| g[1] < g[0]), "{vals:?}");
    }

    #[test]
    fn disconnected_support_is_infinite_with_certificate() {
        let sys = DiscreteSystem::from_parts(
            vec![0.25; 4],
            vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let a = DensityState::new(vec![2.0, 2.0, 0.0, 0.0], sys.pi()).unwrap();
        let b = DensityState::equilibrium(4);
        let r = nlw_distance(&sys, &PathProblem::new(a, b, 8)).unwrap();
        assert!(r.distance.is_infinite());
        assert!(r.certificate.is_some());
        // matched component masses are fine
        let c = DensityState::new(vec![1.5, 0.5, 0.2, 1.8], sys.pi()).unwrap();
        let r = nlw_distance(&sys, &PathProblem::new(c, DensityState::equilibrium(4), 8)).unwrap();
        assert!(r.distance.is_finite() && r.distance > 0.0);
    }

    #[test]
    fn path_action_rejects_broken_continuity() {
        let sys = two_state();
        let path = DiscretePath {
            dt: 0.5,
            densities: vec![vec![1.5, 0.5], vec![1.25, 0.75], vec![1.0, 1.0]],
            fluxes: vec![FluxField::zeros(2), FluxField::zeros(2)],
        };
        assert!(action_of_path(&sys, &path).is_err());
    }

    #[test]
    fn axioms_on_identical_samples() {
        let sys = two_state();
        let u = DensityState::equilibrium(2);
        let r = check_metric_axioms(&sys, &[u.clone(), u.clone(), u], 8, &SolverSettings::default()).unwrap();
        assert_eq!(r.max_self_distance, 0.0);
        assert_eq!(r.max_symmetry_violation, 0.0);
        assert_eq!(r.max_triangle_violation, 0.0);
    }
}
