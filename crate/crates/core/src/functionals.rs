//! Variational quantities on a discrete system: the logarithmic mean, relative
//! entropy, nonlocal Fisher information, the Benamou–Brenier type action, the
//! nonlocal gradient and the continuity-equation residual.
//!
//! All double sums run over ordered pairs `i != j`. Densities are taken with
//! respect to the reference weights `pi`, so the measure of node `i` is
//! `u_i * pi_i`.

use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use crate::discretization::DiscreteSystem;
use crate::error::{Error, Result};
use crate::quadrature::{adaptive_gk, Tolerance};

/// Relative gap below which the logarithmic mean switches to its series.
const LOG_MEAN_SERIES_GAP: f64 = 1e-8;

/// Tolerance on `sum u_i pi_i = 1` for a [`DensityState`].
pub const MASS_TOLERANCE: f64 = 1e-10;

/// A value in `[0, +inf]` (or the reals extended by `+inf`).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub const ZERO: ExtReal = ExtReal::Finite(0.0);

    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    /// The finite value, or `None` for `+inf`.
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::Infinite => None,
        }
    }

    /// Lossy conversion to `f64` (`+inf` maps to `f64::INFINITY`).
    pub fn to_f64(self) -> f64 {
        match self {
            ExtReal::Finite(v) => v,
            ExtReal::Infinite => f64::INFINITY,
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;
    fn add(self, rhs: ExtReal) -> ExtReal {
        match (self, rhs) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::Infinite,
        }
    }
}

impl Sum for ExtReal {
    fn sum<I: Iterator<Item = ExtReal>>(iter: I) -> ExtReal {
        iter.fold(ExtReal::ZERO, Add::add)
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::Infinite => write!(f, "inf"),
        }
    }
}

/// `log(r) - log(s)` for `r, s > 0`, accurate when `r` is close to `s`.
#[inline]
pub fn log_ratio(r: f64, s: f64) -> f64 {
    let q = (r - s) / s;
    if q.abs() < 0.5 {
        q.ln_1p()
    } else {
        (r / s).ln()
    }
}

/// Logarithmic mean `(r - s) / (log r - log s)` with `theta(r, r) = r` and
/// `theta(r, 0) = theta(0, s) = 0`.
pub fn log_mean(r: f64, s: f64) -> Result<f64> {
    if !(r >= 0.0 && s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "logarithmic mean needs nonnegative arguments, got ({r}, {s})"
        )));
    }
    Ok(log_mean_unchecked(r, s))
}

/// [`log_mean`] without the sign check; callers guarantee `r, s >= 0`.
#[inline]
pub fn log_mean_unchecked(r: f64, s: f64) -> f64 {
    if r == 0.0 || s == 0.0 {
        return 0.0;
    }
    // ordered so that the result is exactly symmetric
    let (hi, lo) = if r >= s { (r, s) } else { (s, r) };
    let gap = hi - lo;
    if gap <= LOG_MEAN_SERIES_GAP * hi {
        let mean = 0.5 * (hi + lo);
        return mean - gap * gap / (12.0 * mean);
    }
    gap / log_ratio(hi, lo)
}

/// Partial derivative of the logarithmic mean in its first argument, for
/// `r, s > 0`.
///
/// With `e = log(r/s)` this equals `(e - 1 + exp(-e)) / e^2`.
pub fn log_mean_d1(r: f64, s: f64) -> f64 {
    let e = log_ratio(r, s);
    if e.abs() < 1e-3 {
        // series of (e - 1 + exp(-e)) / e^2
        0.5 - e / 6.0 + e * e / 24.0 - e * e * e / 120.0
    } else {
        (e + (-e).exp_m1()) / (e * e)
    }
}

/// Interpolation functions used where an admissible mean is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// `(r - s) / (log r - log s)`.
    Logarithmic,
    /// `(r + s) / 2`, kept for exercising the admissibility properties.
    Arithmetic,
}

impl Interpolation {
    pub fn eval(self, r: f64, s: f64) -> f64 {
        match self {
            Interpolation::Logarithmic => log_mean_unchecked(r, s),
            Interpolation::Arithmetic => 0.5 * (r + s),
        }
    }

    /// `C_theta = int_0^1 dr / theta(1 - r, 1 + r)`.
    pub fn connectedness_constant(self) -> f64 {
        let tol = Tolerance {
            abs: 1e-15,
            rel: 1e-13,
            max_intervals: 2000,
        };
        adaptive_gk(|r| 1.0 / self.eval(1.0 - r, 1.0 + r), 0.0, 1.0, &[], tol).value
    }
}

/// Connectedness constant of the logarithmic mean (equal to pi^2/8).
pub fn theta_connectedness_constant() -> f64 {
    Interpolation::Logarithmic.connectedness_constant()
}

/// Density `u = d rho / d pi` on the nodes of a system.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    u: Vec<f64>,
}

impl DensityState {
    /// Validates nonnegativity and unit mass against `pi`.
    pub fn new(u: Vec<f64>, pi: &[f64]) -> Result<Self> {
        if u.len() != pi.len() {
            return Err(Error::DimensionMismatch {
                expected: pi.len(),
                got: u.len(),
            });
        }
        if let Some((i, v)) = u.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidState(format!("u[{i}] = {v} is not a finite nonnegative value")));
        }
        let mass: f64 = u.iter().zip(pi).map(|(a, b)| a * b).sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidState(format!("total mass {mass} differs from 1")));
        }
        Ok(Self { u })
    }

    /// Builds a state from node masses `mu_i`, dividing by `pi_i`.
    pub fn from_masses(mu: &[f64], pi: &[f64]) -> Result<Self> {
        if mu.len() != pi.len() {
            return Err(Error::DimensionMismatch {
                expected: pi.len(),
                got: mu.len(),
            });
        }
        let mut u = Vec::with_capacity(mu.len());
        for (i, (&m, &p)) in mu.iter().zip(pi).enumerate() {
            if p > 0.0 {
                u.push(m / p);
            } else if m == 0.0 {
                u.push(0.0);
            } else {
                return Err(Error::InvalidState(format!("mass on node {i} with zero reference weight")));
            }
        }
        Self::new(u, pi)
    }

    /// The equilibrium `u = 1`.
    pub fn equilibrium(n: usize) -> Self {
        Self { u: vec![1.0; n] }
    }

    /// Wraps a vector without validation (integrator output).
    pub(crate) fn from_raw(u: Vec<f64>) -> Self {
        Self { u }
    }

    pub fn values(&self) -> &[f64] {
        &self.u
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.u
    }

    pub fn masses(&self, pi: &[f64]) -> Vec<f64> {
        self.u.iter().zip(pi).map(|(a, b)| a * b).collect()
    }

    pub fn mass(&self, pi: &[f64]) -> f64 {
        self.u.iter().zip(pi).map(|(a, b)| a * b).sum()
    }

    pub fn min(&self) -> f64 {
        self.u.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.u.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// An antisymmetric edge array `v_ij = -v_ji` with zero diagonal, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    n: usize,
    v: Vec<f64>,
}

impl FluxField {
    pub fn zeros(n: usize) -> Self {
        Self { n, v: vec![0.0; n * n] }
    }

    /// Validates shape, finiteness and exact antisymmetry.
    pub fn new(n: usize, v: Vec<f64>) -> Result<Self> {
        if v.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("flux entries must be finite".into()));
        }
        let field = Self { n, v };
        let defect = field.antisymmetry_defect();
        if defect != 0.0 {
            return Err(Error::NotAntisymmetric(defect));
        }
        Ok(field)
    }

    /// Builds a field from values on pairs `i < j`, mirroring with a sign flip.
    pub fn from_upper(n: usize, upper: impl Fn(usize, usize) -> f64) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let x = upper(i, j);
                v[i * n + j] = x;
                v[j * n + i] = -x;
            }
        }
        Self { n, v }
    }

    /// Unchecked constructor; `v` must already be antisymmetric.
    #[cfg(test)]
    pub(crate) fn from_raw(n: usize, v: Vec<f64>) -> Self {
        Self { n, v }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn antisymmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            worst = worst.max(self.v[i * n + i].abs());
            for j in (i + 1)..n {
                worst = worst.max((self.v[i * n + j] + self.v[j * n + i]).abs());
            }
        }
        worst
    }

    /// Net outflow `sum_j v_ij` of every node.
    pub fn outflow(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.v[i * self.n..(i + 1) * self.n].iter().sum())
            .collect()
    }

    /// Entrywise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &FluxField, b: f64) -> FluxField {
        assert_eq!(self.n, other.n);
        FluxField {
            n: self.n,
            v: self.v.iter().zip(&other.v).map(|(x, y)| a * x + b * y).collect(),
        }
    }
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

/// `H(rho | pi) = sum_i u_i log u_i pi_i` with `0 log 0 = 0`.
pub fn relative_entropy(sys: &DiscreteSystem, rho: &DensityState) -> Result<f64> {
    check_len(sys, rho.len())?;
    Ok(relative_entropy_raw(rho.values(), sys.pi()))
}

pub(crate) fn relative_entropy_raw(u: &[f64], pi: &[f64]) -> f64 {
    // (u log u - u + 1) pi sums to the same value for unit mass and is
    // termwise nonnegative
    let h: f64 = u
        .iter()
        .zip(pi)
        .map(|(&ui, &p)| {
            let t = entropy_density(ui);
            t * p
        })
        .sum();
    h.max(0.0)
}

/// `u log u - u + 1`, with a series near `u = 1` where the direct form cancels.
fn entropy_density(u: f64) -> f64 {
    let e = u - 1.0;
    if e.abs() < 1e-3 {
        let e2 = e * e;
        e2 * (0.5 - e / 6.0 + e2 / 12.0 - e2 * e / 20.0 + e2 * e2 / 30.0)
    } else if u > 0.0 {
        u * u.ln() - e
    } else {
        1.0
    }
}

/// Nonlocal Fisher information
/// `1/2 sum_{i != j} (u_i - u_j)(log u_i - log u_j) eta_ij pi_i pi_j`.
///
/// Returns `+inf` when some edge with `eta_ij > 0` joins a positive and a
/// zero density.
pub fn fisher_information(sys: &DiscreteSystem, rho: &DensityState) -> Result<ExtReal> {
    check_len(sys, rho.len())?;
    Ok(fisher_information_raw(rho.values(), sys.pi(), sys.eta_matrix()))
}

pub(crate) fn fisher_information_raw(u: &[f64], pi: &[f64], eta: &[f64]) -> ExtReal {
    let n = u.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let w = eta[i * n + j];
            if w == 0.0 || u[i] == u[j] {
                continue;
            }
            if u[i] == 0.0 || u[j] == 0.0 {
                return ExtReal::Infinite;
            }
            total += (u[i] - u[j]) * log_ratio(u[i], u[j]) * w * pi[i] * pi[j];
        }
    }
    // ordered-pair sum is twice the i < j sum, times the leading 1/2
    ExtReal::Finite(total)
}

/// Nonlocal gradient `G_ij = phi_j - phi_i` as a row-major `N x N` array.
pub fn nonlocal_gradient(phi: &[f64]) -> Vec<f64> {
    let n = phi.len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = phi[j] - phi[i];
        }
    }
    g
}

/// Action `sum_{i != j} v_ij^2 / (2 theta(u_i, u_j) eta_ij pi_i pi_j)` with
/// the logarithmic mean.
pub fn action(sys: &DiscreteSystem, rho: &DensityState, v: &FluxField) -> Result<ExtReal> {
    action_with(sys, rho, v, Interpolation::Logarithmic)
}

/// [`action`] for an arbitrary interpolation function.
pub fn action_with(
    sys: &DiscreteSystem,
    rho: &DensityState,
    v: &FluxField,
    theta: Interpolation,
) -> Result<ExtReal> {
    check_len(sys, rho.len())?;
    check_len(sys, v.n())?;
    Ok(action_raw(rho.values(), sys.pi(), sys.eta_matrix(), v, theta))
}

pub(crate) fn action_raw(u: &[f64], pi: &[f64], eta: &[f64], v: &FluxField, theta: Interpolation) -> ExtReal {
    let n = u.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let flux = v.get(i, j);
            let denom = 2.0 * theta.eval(u[i], u[j]) * eta[i * n + j] * pi[i] * pi[j];
            if denom > 0.0 {
                total += flux * flux / denom;
            } else if flux != 0.0 {
                return ExtReal::Infinite;
            }
        }
    }
    ExtReal::Finite(total)
}

/// Residual `max_i |mu_dot_i + sum_j v_ij|` of the discrete nonlocal
/// continuity equation, with `mu_dot` in measure coordinates.
pub fn continuity_residual(mu_dot: &[f64], v: &FluxField) -> Result<f64> {
    if mu_dot.len() != v.n() {
        return Err(Error::DimensionMismatch {
            expected: v.n(),
            got: mu_dot.len(),
        });
    }
    let defect = v.antisymmetry_defect();
    if defect != 0.0 {
        return Err(Error::NotAntisymmetric(defect));
    }
    Ok(mu_dot
        .iter()
        .zip(v.outflow())
        .map(|(m, out)| (m + out).abs())
        .fold(0.0, f64::max))
}
