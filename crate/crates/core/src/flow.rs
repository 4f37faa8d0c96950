//! Entropy gradient flow on a discrete system,
//!
//! ```text
//! du_i/dt = sum_j (u_j - u_i) eta_ij pi_j,
//! ```
//!
//! written `du/dt = -K u` with `K = D - W`, `W_ij = eta_ij pi_j`.
//! `Pi^{1/2} K Pi^{-1/2}` is symmetric, which gives the matrix exponential
//! through one symmetric eigendecomposition.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::functionals::{
    action_raw, fisher_information_raw, relative_entropy_raw, DensityState, ExtReal, FluxField, Interpolation,
};

/// Largest system handled by the dense matrix exponential.
pub const MATRIX_EXP_CAP: usize = 512;

/// Negative values above `-NEGATIVE_ROUNDOFF * max(1, max u)` are treated as rounding and clamped to zero.
const NEGATIVE_ROUNDOFF: f64 = 1e-12;

/// `du_i/dt = sum_j (u_j - u_i) eta_ij pi_j`.
pub fn generator_apply(sys: &DiscreteSystem, rho: &DensityState) -> Result<Vec<f64>> {
    check_len(sys, rho.len())?;
    let mut out = vec![0.0; sys.len()];
    generator_apply_raw(sys.eta_matrix(), sys.pi(), rho.values(), &mut out);
    Ok(out)
}

pub(crate) fn generator_apply_raw(eta: &[f64], pi: &[f64], u: &[f64], out: &mut [f64]) {
    let n = u.len();
    for i in 0..n {
        let row = &eta[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += (u[j] - u[i]) * row[j] * pi[j];
        }
        out[i] = acc;
    }
}

/// `v_ij = -(u_j - u_i) eta_ij pi_i pi_j`.
pub fn tangent_flux(sys: &DiscreteSystem, rho: &DensityState) -> Result<FluxField> {
    check_len(sys, rho.len())?;
    Ok(tangent_flux_raw(sys, rho.values()))
}

fn tangent_flux_raw(sys: &DiscreteSystem, u: &[f64]) -> FluxField {
    let pi = sys.pi();
    FluxField::from_upper(sys.len(), |i, j| -(u[j] - u[i]) * sys.eta(i, j) * pi[i] * pi[j])
}

fn check_len(sys: &DiscreteSystem, n: usize) -> Result<()> {
    if sys.len() != n {
        return Err(Error::DimensionMismatch {
            expected: sys.len(),
            got: n,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MatrixExponential,
    BackwardEuler,
    AdaptiveRk,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MatrixExponential => "matrix_exponential",
            Method::BackwardEuler => "backward_euler",
            Method::AdaptiveRk => "adaptive_rk",
        }
    }
}

/// Time integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Largest step for backward Euler.
    pub dt: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Horizon `T`.
    pub horizon: f64,
    /// Spacing of output times when `output_times` is absent.
    pub output_step: f64,
    /// Explicit output times in `(0, T]`; `0` is always emitted.
    pub output_times: Option<Vec<f64>>,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::MatrixExponential,
            dt: 1e-3,
            rtol: 1e-10,
            atol: 1e-13,
            horizon: 1.0,
            output_step: 0.01,
            output_times: None,
            max_steps: 10_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        positive("rtol", self.rtol)?;
        positive("atol", self.atol)?;
        if self.output_times.is_none() {
            positive("output_step", self.output_step)?;
        }
        Ok(())
    }

    /// Output grid, starting at 0 and ending at the horizon.
    pub fn output_grid(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut times = vec![0.0];
        match &self.output_times {
            Some(list) => {
                for &t in list {
                    if t == 0.0 {
                        continue;
                    }
                    if !(t > *times.last().unwrap() && t <= self.horizon) {
                        return Err(Error::InvalidArgument(format!(
                            "output times must increase within (0, {}], got {t}",
                            self.horizon
                        )));
                    }
                    times.push(t);
                }
                if *times.last().unwrap() < self.horizon {
                    times.push(self.horizon);
                }
            }
            None => {
                let count = (self.horizon / self.output_step - 1e-9).ceil() as usize;
                for i in 1..count {
                    times.push(i as f64 * self.output_step);
                }
                times.push(self.horizon);
            }
        }
        Ok(times)
    }
}

/// Per-output diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub entropy: f64,
    pub fisher: ExtReal,
    pub mass: f64,
    pub min_u: f64,
    pub max_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorMetadata {
    pub method: Method,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub factorizations: usize,
}

/// States of a flow at the output times, with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityState>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub metadata: IntegratorMetadata,
}

/// Trajectory CSV header.
pub const TRAJECTORY_HEADER: &str = "t,H,I,mass,min_u";

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DensityState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Index of an output time equal to `t` up to `1e-12` relative.
    pub fn index_of_time(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.entropy).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for d in &self.diagnostics {
            let fisher = match d.fisher {
                ExtReal::Finite(v) => format!("{v:e}"),
                ExtReal::Infinite => "inf".to_string(),
            };
            let _ = writeln!(out, "{:e},{:e},{},{:e},{:e}", d.t, d.entropy, fisher, d.mass, d.min_u);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Writes `density_<step>.csv` files with header `node_index,u`; returns the paths.
    pub fn write_density_dumps(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.states.len());
        for (step, state) in self.states.iter().enumerate() {
            let mut text = String::from("node_index,u\n");
            for (i, u) in state.values().iter().enumerate() {
                let _ = writeln!(text, "{i},{u:e}");
            }
            let path = dir.join(format!("density_{step:05}.csv"));
            std::fs::write(&path, text)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn diagnostics(sys: &DiscreteSystem, t: f64, u: &[f64]) -> StepDiagnostics {
    let pi = sys.pi();
    StepDiagnostics {
        t,
        entropy: relative_entropy_raw(u, pi),
        fisher: fisher_information_raw(u, pi, sys.eta_matrix()),
        mass: u.iter().zip(pi).map(|(a, b)| a * b).sum(),
        min_u: u.iter().copied().fold(f64::INFINITY, f64::min),
        max_u: u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Clamps rounding-level negatives; errors on anything larger.
fn enforce_positivity(u: &mut [f64], t: f64) -> Result<()> {
    let scale = u.iter().copied().fold(1.0, f64::max);
    for (i, v) in u.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v >= -NEGATIVE_ROUNDOFF * scale {
                *v = 0.0;
            } else {
                return Err(Error::Integrator(format!("density u[{i}] = {v:e} at t = {t} is negative")));
            }
        }
    }
    Ok(())
}

fn generator_matrix(sys: &DiscreteSystem) -> DMatrix<f64> {
    let n = sys.len();
    let pi = sys.pi();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let w = sys.eta(i, j) * pi[j];
                k[(i, j)] = -w;
                diag += w;
            }
        }
        k[(i, i)] = diag;
    }
    k
}

/// Solves the flow from `u0` up to the horizon, emitting states on the output grid.
pub fn solve(sys: &DiscreteSystem, u0: &DensityState, cfg: &IntegratorConfig) -> Result<Trajectory> {
    check_len(sys, u0.len())?;
    let times = cfg.output_grid()?;
    let mut meta = IntegratorMetadata {
        method: cfg.method,
        accepted_steps: 0,
        rejected_steps: 0,
        factorizations: 0,
    };
    let raw = match cfg.method {
        Method::MatrixExponential => solve_expm(sys, u0.values(), &times, &mut meta)?,
        Method::BackwardEuler => solve_backward_euler(sys, u0.values(), &times, cfg, &mut meta)?,
        Method::AdaptiveRk => solve_rk(sys, u0.values(), &times, cfg, &mut meta)?,
    };
    let diagnostics = times.iter().zip(&raw).map(|(&t, u)| diagnostics(sys, t, u)).collect();
    let states = raw.into_iter().map(DensityState::from_raw).collect();
    Ok(Trajectory {
        times,
        states,
        diagnostics,
        metadata: meta,
    })
}

fn solve_expm(sys: &DiscreteSystem, u0: &[f64], times: &[f64], meta: &mut IntegratorMetadata) -> Result<Vec<Vec<f64>>> {
    let n = sys.len();
    if n > MATRIX_EXP_CAP {
        return Err(Error::InvalidArgument(format!(
            "matrix exponential is limited to {MATRIX_EXP_CAP} nodes, got {n}"
        )));
    }
    let pi = sys.pi();
    let sq: Vec<f64> = pi.iter().map(|p| p.sqrt()).collect();
    // S = Pi^{1/2} K Pi^{-1/2}: S_ij = -eta_ij sqrt(pi_i pi_j)
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let e = sys.eta(i, j);
                s[(i, j)] = -e * sq[i] * sq[j];
                diag += e * pi[j];
            }
        }
        s[(i, i)] = diag;
    }
    let eig = s.symmetric_eigen();
    meta.factorizations = 1;
    let lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    let w0 = DVector::from_iterator(n, u0.iter().zip(&sq).map(|(u, r)| u * r));
    let coeff = eig.eigenvectors.transpose() * w0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t == 0.0 {
            out.push(u0.to_vec());
            continue;
        }
        let scaled = DVector::from_iterator(n, coeff.iter().zip(&lambda).map(|(c, l)| c * (-l * t).exp()));
        let w = &eig.eigenvectors * scaled;
        let mut u: Vec<f64> = w.iter().zip(&sq).map(|(a, r)| a / r).collect();
        enforce_positivity(&mut u, t)?;
        meta.accepted_steps += 1;
        out.push(u);
    }
    Ok(out)
}

fn solve_backward_euler(
    sys: &DiscreteSystem,
    u0: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
    meta: &mut IntegratorMetadata,
) -> Result<Vec<Vec<f64>>> {
    let n = sys.len();
    let k = generator_matrix(sys);
    let mut cache: HashMap<u64, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = HashMap::new();
    let mut u = DVector::from_column_slice(u0);
    let mut out = vec![u0.to_vec()];
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let steps = ((span / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        let lu = cache.entry(h.to_bits()).or_insert_with(|| {
            meta.factorizations += 1;
            (DMatrix::identity(n, n) + &k * h).lu()
        });
        for _ in 0..steps {
            u = lu
                .solve(&u)
                .ok_or_else(|| Error::Integrator("singular backward Euler matrix".into()))?;
            meta.accepted_steps += 1;
            if meta.accepted_steps > cfg.max_steps {
                return Err(Error::Integrator("step budget exhausted".into()));
            }
        }
        let mut state: Vec<f64> = u.iter().copied().collect();
        enforce_positivity(&mut state, w[1])?;
        u = DVector::from_column_slice(&state);
        out.push(state);
    }
    Ok(out)
}

// Dormand–Prince 5(4) tableau; the system is autonomous so the nodes are not needed
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn solve_rk(
    sys: &DiscreteSystem,
    u0: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
    meta: &mut IntegratorMetadata,
) -> Result<Vec<Vec<f64>>> {
    let n = sys.len();
    let eta = sys.eta_matrix();
    let pi = sys.pi();
    let max_rate = (0..n)
        .map(|i| (0..n).map(|j| sys.eta(i, j) * pi[j]).sum::<f64>())
        .fold(0.0, f64::max);
    let mut u = u0.to_vec();
    let mut out = vec![u.clone()];
    let mut h = if max_rate > 0.0 { 0.5 / max_rate } else { cfg.horizon };
    let mut stages = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut t = 0.0;
    for &target in &times[1..] {
        while t < target {
            let step = h.min(target - t);
            if step < 1e-14 * target.max(1.0) {
                return Err(Error::Integrator(format!("step size underflow at t = {t}")));
            }
            for s in 0..7 {
                for i in 0..n {
                    let mut acc = u[i];
                    for (r, a) in DP_A[s].iter().enumerate().take(s) {
                        acc += step * a * stages[r][i];
                    }
                    tmp[i] = acc;
                }
                generator_apply_raw(eta, pi, &tmp, &mut stages[s]);
            }
            let mut next = vec![0.0; n];
            let mut err = 0.0;
            for i in 0..n {
                let mut hi = u[i];
                let mut lo = u[i];
                for s in 0..7 {
                    hi += step * DP_B[s] * stages[s][i];
                    lo += step * DP_B4[s] * stages[s][i];
                }
                next[i] = hi;
                let sc = cfg.atol + cfg.rtol * u[i].abs().max(hi.abs());
                err += ((hi - lo) / sc).powi(2);
            }
            let err = (err / n as f64).sqrt();
            let positive = next.iter().all(|v| *v >= 0.0);
            if err <= 1.0 && positive {
                t = if step == target - t { target } else { t + step };
                u = next;
                meta.accepted_steps += 1;
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                h = step * factor;
            } else {
                meta.rejected_steps += 1;
                h = if positive {
                    step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                } else {
                    0.5 * step
                };
            }
            if meta.accepted_steps + meta.rejected_steps > cfg.max_steps {
                return Err(Error::Integrator("step budget exhausted".into()));
            }
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// Entropy dissipation balance along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdiReport {
    /// First output index used; 1 when `I` is infinite at `t = 0`.
    pub start_index: usize,
    pub left_endpoint_infinite: bool,
    pub delta_h: f64,
    pub integral_fisher: Option<f64>,
    pub integral_action: Option<f64>,
    /// `|dH - (int I + int A) / 2|`.
    pub defect: Option<f64>,
    /// `|dH - int I|`.
    pub defect_production: Option<f64>,
    /// Whether a defect claim is made (all `I` finite on the window).
    pub claim: bool,
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(tw, fw)| 0.5 * (tw[1] - tw[0]) * (fw[0] + fw[1]))
        .sum()
}

/// Entropy balance `H(rho_0) - H(rho_T)` against `int I dt` and `int A dt`
/// (trapezoid rule on the output grid, action of the tangent flux).
pub fn edi_report(sys: &DiscreteSystem, traj: &Trajectory) -> Result<EdiReport> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument("entropy balance needs at least two states".into()));
    }
    let left_inf = !traj.diagnostics[0].fisher.is_finite();
    let start = usize::from(left_inf);
    let window = &traj.diagnostics[start..];
    let delta_h = window[0].entropy - window[window.len() - 1].entropy;
    let all_finite = window.iter().all(|d| d.fisher.is_finite()) && window.len() >= 2;
    if !all_finite {
        return Ok(EdiReport {
            start_index: start,
            left_endpoint_infinite: left_inf,
            delta_h,
            integral_fisher: None,
            integral_action: None,
            defect: None,
            defect_production: None,
            claim: false,
        });
    }
    let times = &traj.times[start..];
    let fisher: Vec<f64> = window.iter().map(|d| d.fisher.to_f64()).collect();
    let action: Vec<f64> = traj.states[start..]
        .iter()
        .map(|s| {
            let v = tangent_flux_raw(sys, s.values());
            action_raw(s.values(), sys.pi(), sys.eta_matrix(), &v, Interpolation::Logarithmic).to_f64()
        })
        .collect();
    let int_i = trapezoid(times, &fisher);
    let int_a = trapezoid(times, &action);
    Ok(EdiReport {
        start_index: start,
        left_endpoint_infinite: left_inf,
        delta_h,
        integral_fisher: Some(int_i),
        integral_action: Some(int_a),
        defect: Some((delta_h - 0.5 * int_i - 0.5 * int_a).abs()),
        defect_production: Some((delta_h - int_i).abs()),
        claim: true,
    })
}

/// Least-squares fit of `log H` against `t` over the tail of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Minus the fitted slope.
    pub rate: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Entropies below this are excluded from decay fits.
pub const DECAY_FLOOR: f64 = 1e-14;

/// Fits over the last `tail_fraction` of the outputs with `H > 1e-14`.
pub fn decay_rate_estimate(traj: &Trajectory, tail_fraction: f64) -> Result<DecayFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("tail fraction must lie in (0, 1], got {tail_fraction}")));
    }
    let usable: Vec<(f64, f64)> = traj
        .diagnostics
        .iter()
        .filter(|d| d.entropy > DECAY_FLOOR)
        .map(|d| (d.t, d.entropy.ln()))
        .collect();
    let take = ((usable.len() as f64 * tail_fraction).ceil() as usize).max(2);
    if usable.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fewer than two outputs with entropy above {DECAY_FLOOR:e}"
        )));
    }
    let pts = &usable[usable.len() - take.min(usable.len())..];
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument("fit window has a single time".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let rms = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    Ok(DecayFit {
        rate: -slope,
        intercept,
        residual_rms: rms,
        window: (pts[0].0, pts[pts.len() - 1].0),
        points: pts.len(),
    })
}
