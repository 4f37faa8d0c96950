//! Jump kernels `eta(x, y)` and reference measures `pi` on the torus.
//!
//! Specs ([`KernelSpec`], [`MeasureSpec`], [`PotentialSpec`]) are plain
//! serialisable descriptions. They are compiled against a dimension into
//! [`Kernel`] and [`Measure`], which cache normalisation constants and
//! evaluate pointwise.
//!
//! The fractional kernel uses the nearest-image distance,
//! `eta(x, y) = scale * r^(-d-s)` with `r` the torus distance; no periodic
//! lattice sum is taken.
//!
//! Moments `int (1 ∧ r^2) eta(x, y) dpi(y)` are integrated by splitting at a
//! small radius around `x`. Inside, pure power laws against the uniform
//! measure are integrated in closed form; everything else is summed over
//! dyadic shells in polar coordinates with geometric tail extrapolation.
//! Outside, the nested annular integrator in [`crate::quadrature`] is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{
    adaptive_gk, composite_gauss, gauss_legendre, integrate_annular, AnnularProblem, Annulus, Tolerance,
};
use crate::torus::{build_grid, torus_distance_raw, wrap_coord, wrap_delta, GridSpec, TorusPoint, MAX_DIM};

/// One cosine mode `amplitude * cos(2 pi k.x + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierTerm {
    pub amplitude: f64,
    pub wavevector: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

/// A bounded potential `V` on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Zero,
    /// Finite cosine series.
    Fourier { terms: Vec<FourierTerm> },
    /// Piecewise constant on the cells of a level-`level` lattice.
    Tabulated { level: usize, values: Vec<f64> },
}

impl PotentialSpec {
    /// `V(x) = cos(2 pi x_1)`.
    pub fn cosine() -> Self {
        PotentialSpec::Fourier {
            terms: vec![FourierTerm {
                amplitude: 1.0,
                wavevector: vec![1],
                phase: 0.0,
            }],
        }
    }
}

/// Declarative jump kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `scale * r^(-d-s)`; admissible for `0 < s < 2`.
    Fractional { s: f64, scale: f64 },
    Constant { c: f64 },
    /// `(e^V(x) + e^V(y)) * base(x, y) / c_V` with `c_V = int e^-V`.
    Weighted {
        potential: PotentialSpec,
        base: Box<KernelSpec>,
    },
    /// Grid-pair values extended by the singular kernel interpolator.
    Tabulated {
        dim: usize,
        level: usize,
        /// Row-major `N x N` values; the diagonal is ignored.
        values: Vec<f64>,
        bandwidth: f64,
        exponent: f64,
    },
}

/// Declarative reference measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Uniform,
    /// `dpi/dx = e^-V / c_V`.
    Gibbs { potential: PotentialSpec },
    /// Piecewise constant with the given cell masses on a level-`level` lattice.
    Tabulated { level: usize, weights: Vec<f64> },
    /// `(1 - epsilon) base + epsilon Leb`.
    Mixture { epsilon: f64, base: Box<MeasureSpec> },
}

/// Quadrature settings shared by the kernel and discretization routines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Radius of the ball around the singular point integrated separately.
    pub inner_radius: f64,
    /// Adaptive Gauss–Kronrod tolerance for moment integrals.
    pub tolerance: Tolerance,
    /// Panels per axis per cell for cell integrals away from the cutoff.
    pub cell_panels: usize,
    /// Gauss–Legendre nodes per panel.
    pub cell_points: usize,
    /// Relative tolerance on cell pairs cut by the short-range cutoff.
    pub cutoff_rel_tol: f64,
    /// Probe lattice level for sup estimates; 0 means four times the working level.
    pub probe_level: usize,
    /// Periodic trapezoid points per axis for potential normalisation.
    pub potential_points: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            inner_radius: 1e-2,
            tolerance: Tolerance {
                abs: 1e-14,
                rel: 1e-10,
                max_intervals: 400,
            },
            cell_panels: 1,
            cell_points: 8,
            cutoff_rel_tol: 1e-4,
            probe_level: 0,
            potential_points: 0,
        }
    }
}

impl QuadratureConfig {
    /// Probe level for a working level `n`.
    pub fn probe_level_for(&self, n: usize) -> usize {
        if self.probe_level > 0 {
            self.probe_level
        } else {
            4 * n.max(2)
        }
    }

    fn potential_points_for(&self, dim: usize) -> usize {
        if self.potential_points > 0 {
            self.potential_points
        } else {
            match dim {
                1 => 1024,
                2 => 128,
                _ => 48,
            }
        }
    }
}

/// A compiled potential with its normalisation `c_V = int e^-V dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    dim: usize,
    repr: PotentialRepr,
    c_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum PotentialRepr {
    Zero,
    Fourier(Vec<FourierTerm>),
    Tabulated(GridSpec, Vec<f64>),
}

impl Potential {
    pub fn compile(spec: &PotentialSpec, dim: usize, quad: &QuadratureConfig) -> Result<Self> {
        let repr = match spec {
            PotentialSpec::Zero => PotentialRepr::Zero,
            PotentialSpec::Fourier { terms } => {
                for (i, t) in terms.iter().enumerate() {
                    if t.wavevector.len() > dim {
                        return Err(Error::InvalidArgument(format!(
                            "fourier term {i} has a {}-dimensional wavevector in dimension {dim}",
                            t.wavevector.len()
                        )));
                    }
                    if !t.amplitude.is_finite() || !t.phase.is_finite() {
                        return Err(Error::InvalidArgument(format!("fourier term {i} is not finite")));
                    }
                }
                PotentialRepr::Fourier(terms.clone())
            }
            PotentialSpec::Tabulated { level, values } => {
                let grid = build_grid(dim, *level)?;
                if values.len() != grid.len() {
                    return Err(Error::DimensionMismatch {
                        expected: grid.len(),
                        got: values.len(),
                    });
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("tabulated potential must be finite".into()));
                }
                PotentialRepr::Tabulated(grid, values.clone())
            }
        };
        let mut pot = Potential { dim, repr, c_v: 1.0 };
        pot.c_v = match &pot.repr {
            PotentialRepr::Zero => 1.0,
            PotentialRepr::Tabulated(_, values) => {
                values.iter().map(|v| (-v).exp()).sum::<f64>() / values.len() as f64
            }
            PotentialRepr::Fourier(_) => {
                // periodic trapezoid rule, spectrally accurate for smooth V
                let m = quad.potential_points_for(dim);
                let total = m.pow(dim as u32);
                let mut acc = 0.0;
                let mut x = [0.0; MAX_DIM];
                for idx in 0..total {
                    let mut rem = idx;
                    for axis in (0..dim).rev() {
                        x[axis] = (rem % m) as f64 / m as f64;
                        rem /= m;
                    }
                    acc += (-pot.value(&x[..dim])).exp();
                }
                acc / total as f64
            }
        };
        Ok(pot)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.repr {
            PotentialRepr::Zero => 0.0,
            PotentialRepr::Fourier(terms) => terms
                .iter()
                .map(|t| {
                    let phase: f64 = t.wavevector.iter().zip(x).map(|(k, xi)| *k as f64 * xi).sum();
                    t.amplitude * (std::f64::consts::TAU * phase + t.phase).cos()
                })
                .sum(),
            PotentialRepr::Tabulated(grid, values) => values[crate::torus::nearest_cell_raw(x, grid)],
        }
    }

    /// `c_V = int e^-V dx`.
    pub fn normalization(&self) -> f64 {
        self.c_v
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn piecewise_level(&self) -> Option<Option<usize>> {
        match &self.repr {
            PotentialRepr::Zero => Some(None),
            PotentialRepr::Tabulated(g, _) => Some(Some(g.level())),
            PotentialRepr::Fourier(_) => None,
        }
    }
}

/// A compiled jump kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Fractional { dim: usize, s: f64, scale: f64 },
    Constant { dim: usize, c: f64 },
    Weighted { potential: Potential, base: Box<Kernel> },
    Tabulated(KernelInterpolator),
}

impl Kernel {
    pub fn compile(spec: &KernelSpec, dim: usize, quad: &QuadratureConfig) -> Result<Self> {
        Ok(match spec {
            KernelSpec::Fractional { s, scale } => {
                if !(s.is_finite() && *s > 0.0) || !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "fractional kernel needs s > 0 and scale > 0, got s = {s}, scale = {scale}"
                    )));
                }
                Kernel::Fractional { dim, s: *s, scale: *scale }
            }
            KernelSpec::Constant { c } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::InvalidArgument(format!("constant kernel needs c > 0, got {c}")));
                }
                Kernel::Constant { dim, c: *c }
            }
            KernelSpec::Weighted { potential, base } => Kernel::Weighted {
                potential: Potential::compile(potential, dim, quad)?,
                base: Box::new(Kernel::compile(base, dim, quad)?),
            },
            KernelSpec::Tabulated {
                dim: tdim,
                level,
                values,
                bandwidth,
                exponent,
            } => {
                if *tdim != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: *tdim });
                }
                let grid = build_grid(dim, *level)?;
                KernelInterpolator::new(grid, values.clone(), *bandwidth, *exponent)?.into()
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Kernel::Fractional { dim, .. } | Kernel::Constant { dim, .. } => *dim,
            Kernel::Weighted { potential, .. } => potential.dim(),
            Kernel::Tabulated(t) => t.grid.dim(),
        }
    }

    /// `Some((scale, exponent))` when the kernel is exactly `scale * r^-exponent`.
    pub fn power_law(&self) -> Option<(f64, f64)> {
        match self {
            Kernel::Fractional { dim, s, scale } => Some((*scale, *dim as f64 + *s)),
            Kernel::Constant { c, .. } => Some((*c, 0.0)),
            _ => None,
        }
    }

    /// Whether `eta(x + z, y + z) = eta(x, y)` for all shifts `z`.
    pub fn is_translation_invariant(&self) -> bool {
        matches!(self, Kernel::Fractional { .. } | Kernel::Constant { .. })
            || matches!(self, Kernel::Weighted { potential, base } if potential.repr == PotentialRepr::Zero && base.is_translation_invariant())
    }

    /// Kernel value on raw coordinates; `+inf` on the diagonal for singular
    /// kernels and `NaN` outside interpolator coverage.
    pub fn eval_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Fractional { dim, s, scale } => {
                let r = torus_distance_raw(x, y);
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    scale * r.powf(-(*dim as f64) - s)
                }
            }
            Kernel::Constant { c, .. } => *c,
            Kernel::Weighted { potential, base } => {
                let w = potential.value(x).exp() + potential.value(y).exp();
                w * base.eval_raw(x, y) / potential.normalization()
            }
            Kernel::Tabulated(t) => t.eval_raw(x, y).map(|e| e.value).unwrap_or(f64::NAN),
        }
    }

    /// `eta(x, y)` for `x != y`.
    pub fn eval(&self, x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
        check_dim(self.dim(), x.dim())?;
        check_dim(self.dim(), y.dim())?;
        if x == y {
            return Err(Error::DiagonalSingularity);
        }
        if let Kernel::Tabulated(t) = self {
            return t.eval(x, y).map(|e| e.value);
        }
        Ok(self.eval_raw(x.coords(), y.coords()))
    }
}

/// `eta(x, y)` for the compiled kernel.
pub fn eval_kernel(kernel: &Kernel, x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    kernel.eval(x, y)
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// A compiled reference probability measure.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Uniform { dim: usize },
    Gibbs { potential: Potential },
    Tabulated { grid: GridSpec, density: Vec<f64> },
    Mixture { epsilon: f64, base: Box<Measure> },
}

impl Measure {
    pub fn compile(spec: &MeasureSpec, dim: usize, quad: &QuadratureConfig) -> Result<Self> {
        Ok(match spec {
            MeasureSpec::Uniform => Measure::Uniform { dim },
            MeasureSpec::Gibbs { potential } => Measure::Gibbs {
                potential: Potential::compile(potential, dim, quad)?,
            },
            MeasureSpec::Tabulated { level, weights } => {
                let grid = build_grid(dim, *level)?;
                if weights.len() != grid.len() {
                    return Err(Error::DimensionMismatch {
                        expected: grid.len(),
                        got: weights.len(),
                    });
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::InvalidArgument("measure weights must be finite and nonnegative".into()));
                }
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidArgument("measure weights sum to zero".into()));
                }
                let n = grid.len() as f64;
                let density = weights.iter().map(|w| w / total * n).collect();
                Measure::Tabulated { grid, density }
            }
            MeasureSpec::Mixture { epsilon, base } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(Error::InvalidArgument(format!("mixture epsilon must lie in [0,1], got {epsilon}")));
                }
                Measure::Mixture {
                    epsilon: *epsilon,
                    base: Box::new(Measure::compile(base, dim, quad)?),
                }
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Measure::Uniform { dim } => *dim,
            Measure::Gibbs { potential } => potential.dim(),
            Measure::Tabulated { grid, .. } => grid.dim(),
            Measure::Mixture { base, .. } => base.dim(),
        }
    }

    /// Lebesgue density of the measure at raw coordinates.
    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            Measure::Uniform { .. } => 1.0,
            Measure::Gibbs { potential } => (-potential.value(x)).exp() / potential.normalization(),
            Measure::Tabulated { grid, density } => density[crate::torus::nearest_cell_raw(x, grid)],
            Measure::Mixture { epsilon, base } => (1.0 - epsilon) * base.density(x) + epsilon,
        }
    }

    pub fn is_uniform(&self) -> bool {
        match self {
            Measure::Uniform { .. } => true,
            Measure::Mixture { epsilon, base } => *epsilon == 1.0 || base.is_uniform(),
            Measure::Gibbs { potential } => potential.repr == PotentialRepr::Zero,
            Measure::Tabulated { .. } => false,
        }
    }

    /// `Some(level)` when the density is constant on the cells of that
    /// lattice; `Some(None)` when it is constant everywhere.
    pub(crate) fn piecewise_level(&self) -> Option<Option<usize>> {
        match self {
            Measure::Uniform { .. } => Some(None),
            Measure::Gibbs { potential } => potential.piecewise_level(),
            Measure::Tabulated { grid, .. } => Some(Some(grid.level())),
            Measure::Mixture { base, .. } => base.piecewise_level(),
        }
    }
}

fn unit_sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => std::f64::consts::TAU,
        _ => 4.0 * std::f64::consts::PI,
    }
}

/// Directions and weights of an angular rule on the unit sphere in `R^d`.
fn sphere_rule(dim: usize) -> Vec<([f64; MAX_DIM], f64)> {
    match dim {
        1 => vec![([1.0, 0.0, 0.0], 1.0), ([-1.0, 0.0, 0.0], 1.0)],
        2 => {
            let m = 64;
            (0..m)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / m as f64;
                    ([a.cos(), a.sin(), 0.0], std::f64::consts::TAU / m as f64)
                })
                .collect()
        }
        _ => {
            let (ct, wt) = gauss_legendre(24);
            let m = 48;
            let mut out = Vec::with_capacity(ct.len() * m);
            for (c, w) in ct.iter().zip(&wt) {
                let st = (1.0 - c * c).sqrt();
                for k in 0..m {
                    let a = std::f64::consts::TAU * k as f64 / m as f64;
                    out.push(([st * a.cos(), st * a.sin(), *c], w * std::f64::consts::TAU / m as f64));
                }
            }
            out
        }
    }
}

fn moment_integrand(kernel: &Kernel, measure: &Measure, x: &[f64], z: &[f64]) -> f64 {
    let d = x.len();
    let mut y = [0.0; MAX_DIM];
    let mut r2 = 0.0;
    for axis in 0..d {
        y[axis] = wrap_coord(x[axis] + z[axis]);
        r2 += z[axis] * z[axis];
    }
    r2.min(1.0) * kernel.eval_raw(x, &y[..d]) * measure.density(&y[..d])
}

/// `int_{|y - x| < radius} (1 ∧ r^2) eta dpi` over the small ball.
fn inner_ball_moment(kernel: &Kernel, measure: &Measure, x: &[f64], radius: f64, quad: &QuadratureConfig) -> Result<f64> {
    let d = x.len();
    if radius <= 0.0 {
        return Ok(0.0);
    }
    if let (Some((scale, exponent)), true) = (kernel.power_law(), measure.is_uniform()) {
        // int_0^R r^2 scale r^-p |S| r^(d-1) dr
        let power = 2.0 + d as f64 - exponent;
        if power <= 0.0 {
            return Err(Error::Divergent(format!(
                "second moment of r^-{exponent} diverges at the origin in dimension {d}"
            )));
        }
        return Ok(scale * unit_sphere_area(d) * radius.powf(power) / power);
    }
    let rule = sphere_rule(d);
    let shell = |lo: f64, hi: f64| -> f64 {
        let est = adaptive_gk(
            |r| {
                let mut acc = 0.0;
                for (dir, w) in &rule {
                    let mut z = [0.0; MAX_DIM];
                    for axis in 0..d {
                        z[axis] = r * dir[axis];
                    }
                    acc += w * moment_integrand(kernel, measure, x, &z[..d]);
                }
                acc * r.powi(d as i32 - 1)
            },
            lo,
            hi,
            &[],
            quad.tolerance,
        );
        est.value
    };
    let mut total = 0.0;
    let mut hi = radius;
    let mut prev: Option<f64> = None;
    let mut prev_ratio: Option<f64> = None;
    for k in 0..400 {
        let lo = 0.5 * hi;
        let s = shell(lo, hi);
        if !s.is_finite() {
            return Err(Error::Divergent("non-finite kernel values near the diagonal".into()));
        }
        total += s;
        if s <= quad.tolerance.abs.max(1e-15 * total.abs()) {
            return Ok(total);
        }
        if let Some(p) = prev {
            let ratio = s / p;
            if k >= 8 && ratio >= 0.9999 {
                return Err(Error::Divergent(format!(
                    "dyadic shell contributions do not decay (ratio {ratio:.6})"
                )));
            }
            if let Some(pr) = prev_ratio {
                if (ratio - pr).abs() <= 1e-7 * ratio.abs().max(1e-300) && ratio < 1.0 && k >= 4 {
                    return Ok(total + s * ratio / (1.0 - ratio));
                }
            }
            prev_ratio = Some(ratio);
        }
        prev = Some(s);
        hi = lo;
    }
    Err(Error::Quadrature("shell summation did not settle".into()))
}

/// `int_{r_lo <= |y - x| < r_hi} (1 ∧ r^2) eta(x, y) dpi(y)`.
fn region_moment(
    kernel: &Kernel,
    measure: &Measure,
    x: &[f64],
    r_lo: f64,
    r_hi: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    let d = x.len();
    let split = quad.inner_radius.min(0.25);
    let mut total = 0.0;
    if r_lo < split {
        let top = split.min(r_hi);
        total += inner_ball_moment(kernel, measure, x, top, quad)?;
        if r_lo > 0.0 {
            total -= inner_ball_moment(kernel, measure, x, r_lo, quad)?;
        }
    }
    let lo = r_lo.max(split);
    if lo < r_hi {
        let cube = [(-0.5, 0.5); MAX_DIM];
        let center = [0.0; MAX_DIM];
        let problem = AnnularProblem {
            outer: &[],
            inner: &cube[..d],
            center: &center[..d],
            annulus: Annulus { r_lo: lo, r_hi },
            periodic: false,
            tol: quad.tolerance,
        };
        let est = integrate_annular(&problem, |_, z| moment_integrand(kernel, measure, x, z));
        if !est.value.is_finite() {
            return Err(Error::Quadrature("non-finite moment integrand away from the diagonal".into()));
        }
        total += est.value;
    }
    Ok(total)
}

/// `int (1 ∧ |x - y|^2) eta(x, y) dpi(y)` at a single point.
pub fn second_moment(kernel: &Kernel, measure: &Measure, x: &TorusPoint, quad: &QuadratureConfig) -> Result<f64> {
    check_dim(kernel.dim(), x.dim())?;
    check_dim(measure.dim(), x.dim())?;
    region_moment(kernel, measure, x.coords(), 0.0, f64::INFINITY, quad)
}

fn probe_points(kernel: &Kernel, measure: &Measure, level: usize) -> Result<Vec<TorusPoint>> {
    if kernel.is_translation_invariant() && measure.is_uniform() {
        return Ok(vec![TorusPoint::new(&vec![0.0; kernel.dim()])?]);
    }
    Ok(build_grid(kernel.dim(), level)?.points())
}

/// Max over the probe lattice of the second moment, with the probe point.
pub fn second_moment_sup(
    kernel: &Kernel,
    measure: &Measure,
    quad: &QuadratureConfig,
    probe_level: usize,
) -> Result<(f64, TorusPoint)> {
    use rayon::prelude::*;
    let probes = probe_points(kernel, measure, probe_level)?;
    let values: Vec<f64> = probes
        .par_iter()
        .map(|p| second_moment(kernel, measure, p, quad))
        .collect::<Result<_>>()?;
    let (idx, best) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    Ok((best, probes[idx].clone()))
}

/// `C_eta = sqrt(2 sup_x int (1 ∧ r^2) eta dpi)` over the probe lattice.
pub fn c_eta(kernel: &Kernel, measure: &Measure, quad: &QuadratureConfig) -> Result<f64> {
    let level = quad.probe_level_for(8);
    let (sup, _) = second_moment_sup(kernel, measure, quad, level)?;
    Ok((2.0 * sup).sqrt())
}

/// Sup over probe points of `int_{A_R(x)} (1 ∧ r^2) eta dpi` with
/// `A_R(x) = {|x - y| < 1/R or |x - y| > R}`.
pub fn tail_profile(kernel: &Kernel, measure: &Measure, big_r: f64, quad: &QuadratureConfig) -> Result<f64> {
    if !(big_r > 1.0) {
        return Err(Error::InvalidArgument(format!("tail radius must exceed 1, got {big_r}")));
    }
    use rayon::prelude::*;
    let probes = probe_points(kernel, measure, quad.probe_level_for(8))?;
    let values: Vec<f64> = probes
        .par_iter()
        .map(|p| -> Result<f64> {
            let near = region_moment(kernel, measure, p.coords(), 0.0, 1.0 / big_r, quad)?;
            let far = region_moment(kernel, measure, p.coords(), big_r, f64::INFINITY, quad)?;
            Ok(near + far)
        })
        .collect::<Result<_>>()?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Thresholds for [`check_assumptions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionThresholds {
    pub symmetry_tol: f64,
    pub tail_radii: Vec<f64>,
    /// Largest acceptable tail value at the last radius, relative to the second-moment sup.
    pub tail_fraction: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for AssumptionThresholds {
    fn default() -> Self {
        Self {
            symmetry_tol: 1e-12,
            tail_radii: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            tail_fraction: 0.25,
            samples: 2000,
            seed: 0x5eed,
        }
    }
}

/// Outcome of the admissibility diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub symmetry_residual: f64,
    pub symmetric: bool,
    pub second_moment_sup: Option<f64>,
    pub probe_level: usize,
    pub tail_profile: Vec<(f64, f64)>,
    pub tail_non_increasing: bool,
    pub tail_vanishing: bool,
    pub continuous_by_construction: bool,
    pub positive: bool,
    /// Largest sampled `eta(x - z, y - z) / eta(x, y)` for `|z| < 0.01`; informational.
    pub shift_ratio_max: f64,
    pub failures: Vec<String>,
}

impl AdmissibilityReport {
    pub fn passes(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Numerical diagnostics for symmetry, moment bound, tail decay, continuity
/// and positivity. Failures are recorded in the report; positivity only
/// warns.
pub fn check_assumptions(
    kernel: &Kernel,
    measure: &Measure,
    thresholds: &AssumptionThresholds,
    quad: &QuadratureConfig,
) -> Result<AdmissibilityReport> {
    use rand::{Rng, SeedableRng};
    let d = kernel.dim();
    check_dim(d, measure.dim())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(thresholds.seed);
    let mut sym: f64 = 0.0;
    let mut positive = true;
    let mut shift_ratio: f64 = 1.0;
    for _ in 0..thresholds.samples {
        let mut x = [0.0; MAX_DIM];
        let mut y = [0.0; MAX_DIM];
        let mut z = [0.0; MAX_DIM];
        for axis in 0..d {
            x[axis] = rng.random::<f64>();
            y[axis] = rng.random::<f64>();
            z[axis] = (rng.random::<f64>() - 0.5) * 0.02 / (d as f64).sqrt();
        }
        if torus_distance_raw(&x[..d], &y[..d]) < 1e-9 {
            continue;
        }
        let a = kernel.eval_raw(&x[..d], &y[..d]);
        let b = kernel.eval_raw(&y[..d], &x[..d]);
        if a.is_nan() || b.is_nan() {
            continue;
        }
        sym = sym.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        if !(a > 0.0) {
            positive = false;
        }
        let mut xs = [0.0; MAX_DIM];
        let mut ys = [0.0; MAX_DIM];
        for axis in 0..d {
            xs[axis] = wrap_coord(x[axis] - z[axis]);
            ys[axis] = wrap_coord(y[axis] - z[axis]);
        }
        let shifted = kernel.eval_raw(&xs[..d], &ys[..d]);
        if a > 0.0 && shifted.is_finite() {
            shift_ratio = shift_ratio.max(shifted / a);
        }
    }
    if let Kernel::Tabulated(t) = kernel {
        let n = t.grid.len();
        for j in 0..n {
            for k in 0..n {
                if j != k && !(t.values[j * n + k] > 0.0) {
                    positive = false;
                }
            }
        }
    }

    let mut failures = Vec::new();
    let symmetric = sym <= thresholds.symmetry_tol;
    if !symmetric {
        failures.push(format!("symmetry residual {sym:e} exceeds {:e}", thresholds.symmetry_tol));
    }
    let probe_level = quad.probe_level_for(8);
    let sup = match second_moment_sup(kernel, measure, quad, probe_level) {
        Ok((v, _)) => Some(v),
        Err(e) => {
            failures.push(format!("second moment: {e}"));
            None
        }
    };
    let mut tail = Vec::new();
    if sup.is_some() {
        for &r in &thresholds.tail_radii {
            match tail_profile(kernel, measure, r, quad) {
                Ok(v) => tail.push((r, v)),
                Err(e) => {
                    failures.push(format!("tail profile at R = {r}: {e}"));
                    break;
                }
            }
        }
    }
    let tail_non_increasing = tail.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-9) + 1e-15);
    let tail_vanishing = match (sup, tail.last()) {
        (Some(s), Some(&(_, last))) => last <= thresholds.tail_fraction * s,
        _ => false,
    };
    if sup.is_some() && !tail_non_increasing {
        failures.push("tail profile increases with R".into());
    }
    if sup.is_some() && !tail_vanishing {
        failures.push("tail profile does not decay over the radius ladder".into());
    }
    Ok(AdmissibilityReport {
        symmetry_residual: sym,
        symmetric,
        second_moment_sup: sup,
        probe_level,
        tail_profile: tail,
        tail_non_increasing,
        tail_vanishing,
        continuous_by_construction: true,
        positive,
        shift_ratio_max: shift_ratio,
        failures,
    })
}

/// Value of the singular kernel interpolator together with the range of the
/// stored values that contributed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub min: f64,
    pub max: f64,
    pub contributors: usize,
}

/// Continuous extension of grid-pair kernel values.
///
/// For a query `(x, y)` every off-diagonal pair `(x_j, x_k)` with
/// `rho = |x - x_j| + |y - x_k| < bandwidth` contributes its stored value
/// with weight `K(rho / bandwidth)`, `K(z) = z^-a (1 - z^2)`. At a stored
/// pair the weight is infinite and the stored value is returned.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelInterpolator {
    grid: GridSpec,
    values: Vec<f64>,
    bandwidth: f64,
    exponent: f64,
}

impl KernelInterpolator {
    pub fn new(grid: GridSpec, values: Vec<f64>, bandwidth: f64, exponent: f64) -> Result<Self> {
        let n = grid.len();
        if values.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: values.len(),
            });
        }
        if !(exponent > 2.0) {
            return Err(Error::InvalidArgument(format!("interpolator exponent must exceed 2, got {exponent}")));
        }
        // smallest positive product-metric distance between grid pairs is one lattice spacing
        if !(bandwidth > grid.spacing()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth {bandwidth} must exceed the minimal pair distance {}",
                grid.spacing()
            )));
        }
        Ok(Self {
            grid,
            values,
            bandwidth,
            exponent,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn near(&self, x: &[f64]) -> Vec<(usize, f64)> {
        (0..self.grid.len())
            .filter_map(|j| {
                let p = self.grid.point_coords(j);
                let dist = torus_distance_raw(x, &p[..self.grid.dim()]);
                (dist < self.bandwidth).then_some((j, dist))
            })
            .collect()
    }

    pub fn eval(&self, x: &TorusPoint, y: &TorusPoint) -> Result<Interpolated> {
        check_dim(self.grid.dim(), x.dim())?;
        check_dim(self.grid.dim(), y.dim())?;
        self.eval_raw(x.coords(), y.coords())
    }

    pub fn eval_raw(&self, x: &[f64], y: &[f64]) -> Result<Interpolated> {
        let n = self.grid.len();
        let near_x = self.near(x);
        let near_y = self.near(y);
        let mut num = 0.0;
        let mut den = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut count = 0;
        for &(j, dx) in &near_x {
            for &(k, dy) in &near_y {
                if j == k {
                    continue;
                }
                let rho = dx + dy;
                if rho >= self.bandwidth {
                    continue;
                }
                let value = self.values[j * n + k];
                if rho == 0.0 {
                    return Ok(Interpolated {
                        value,
                        min: value,
                        max: value,
                        contributors: 1,
                    });
                }
                let z = rho / self.bandwidth;
                let w = z.powf(-self.exponent) * (1.0 - z * z);
                if w <= 0.0 {
                    continue;
                }
                num += w * value;
                den += w;
                lo = lo.min(value);
                hi = hi.max(value);
                count += 1;
            }
        }
        if count == 0 || den <= 0.0 {
            return Err(Error::Coverage);
        }
        Ok(Interpolated {
            value: (num / den).clamp(lo, hi),
            min: lo,
            max: hi,
            contributors: count,
        })
    }

    /// Serialisable spec that reproduces this interpolator.
    pub fn to_spec(&self) -> KernelSpec {
        KernelSpec::Tabulated {
            dim: self.grid.dim(),
            level: self.grid.level(),
            values: self.values.clone(),
            bandwidth: self.bandwidth,
            exponent: self.exponent,
        }
    }
}

/// Continuous extension of the kernel of a lattice system.
pub fn extend_kernel(
    sys: &crate::discretization::DiscreteSystem,
    bandwidth: f64,
    exponent: f64,
) -> Result<KernelInterpolator> {
    let grid = sys
        .grid()
        .ok_or_else(|| Error::InvalidArgument("kernel extension needs a lattice system".into()))?;
    KernelInterpolator::new(grid.clone(), sys.eta_matrix().to_vec(), bandwidth, exponent)
}

impl From<KernelInterpolator> for Kernel {
    fn from(t: KernelInterpolator) -> Self {
        Kernel::Tabulated(t)
    }
}

/// Lebesgue volume of the intersection of two periodic boxes given by
/// centre and side length per axis.
pub(crate) fn box_overlap(c1: &[f64], h1: f64, c2: &[f64], h2: f64) -> f64 {
    c1.iter()
        .zip(c2)
        .map(|(&a, &b)| {
            let offset = wrap_delta(b - a);
            let (a0, a1) = (-0.5 * h1, 0.5 * h1);
            [-1.0, 0.0, 1.0]
                .iter()
                .map(|s| {
                    let b0 = offset + s - 0.5 * h2;
                    let b1 = offset + s + 0.5 * h2;
                    (a1.min(b1) - a0.max(b0)).max(0.0)
                })
                .sum::<f64>()
        })
        .product()
}

/// Tensor Gauss–Legendre rule on the periodic cell of side `h` centred at `c`.
pub(crate) fn cell_rule(c: &[f64], h: f64, quad: &QuadratureConfig) -> Vec<([f64; MAX_DIM], f64)> {
    let d = c.len();
    let (nodes, weights) = composite_gauss(-0.5 * h, 0.5 * h, quad.cell_panels.max(1), quad.cell_points.max(1));
    let m = nodes.len();
    let total = m.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut p = [0.0; MAX_DIM];
        let mut w = 1.0;
        for axis in (0..d).rev() {
            let k = rem % m;
            rem /= m;
            p[axis] = c[axis] + nodes[k];
            w *= weights[k];
        }
        out.push((p, w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn q() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    fn pt(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c).unwrap()
    }

    fn compile(spec: &KernelSpec, d: usize) -> Kernel {
        Kernel::compile(spec, d, &q()).unwrap()
    }

    fn uniform(d: usize) -> Measure {
        Measure::compile(&MeasureSpec::Uniform, d, &q()).unwrap()
    }

    /// Brute-force 1-D oracle: composite midpoint of `f` on `[-1/2, 1/2]` with
    /// the singular point excluded by symmetry.
    fn midpoint_oracle(f: impl Fn(f64) -> f64, cells: usize) -> f64 {
        let h = 0.5 / cells as f64;
        2.0 * (0..cells).map(|i| f((i as f64 + 0.5) * h) * h).sum::<f64>()
    }

    #[test]
    fn eval_examples() {
        let c2 = compile(&KernelSpec::Constant { c: 2.0 }, 1);
        assert_eq!(c2.eval(&pt(&[0.1]), &pt(&[0.7])).unwrap(), 2.0);
        let frac = compile(&KernelSpec::Fractional { s: 1.0, scale: 1.0 }, 1);
        assert_relative_eq!(frac.eval(&pt(&[0.0]), &pt(&[0.5])).unwrap(), 4.0, max_relative = 1e-15);
        assert!(matches!(frac.eval(&pt(&[0.3]), &pt(&[0.3])), Err(Error::DiagonalSingularity)));
        let weighted = compile(
            &KernelSpec::Weighted {
                potential: PotentialSpec::Zero,
                base: Box::new(KernelSpec::Fractional { s: 1.0, scale: 1.0 }),
            },
            1,
        );
        assert_relative_eq!(weighted.eval(&pt(&[0.0]), &pt(&[0.5])).unwrap(), 8.0, max_relative = 1e-15);
    }

    #[test]
    fn kernels_are_symmetric_and_fractional_is_monotone() {
        let specs = [
            KernelSpec::Fractional { s: 0.7, scale: 1.3 },
            KernelSpec::Constant { c: 0.4 },
            KernelSpec::Weighted {
                potential: PotentialSpec::cosine(),
                base: Box::new(KernelSpec::Fractional { s: 1.0, scale: 1.0 }),
            },
        ];
        for spec in &specs {
            let k = compile(spec, 2);
            for i in 0..50 {
                let x = [(i as f64 * 0.137) % 1.0, (i as f64 * 0.291) % 1.0];
                let y = [(i as f64 * 0.713) % 1.0, (i as f64 * 0.457) % 1.0];
                assert_eq!(k.eval_raw(&x, &y), k.eval_raw(&y, &x));
            }
        }
        let k = compile(&KernelSpec::Fractional { s: 1.2, scale: 1.0 }, 1);
        let mut last = f64::INFINITY;
        for i in 1..50 {
            let v = k.eval_raw(&[0.0], &[i as f64 / 100.0]);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn constant_second_moment_matches_oracle() {
        let k = compile(&KernelSpec::Constant { c: 3.0 }, 1);
        let got = second_moment(&k, &uniform(1), &pt(&[0.3]), &q()).unwrap();
        let oracle = 3.0 * midpoint_oracle(|t| t * t, 200_000);
        assert_relative_eq!(got, oracle, max_relative = 1e-9);
        assert_relative_eq!(got, 3.0 / 12.0, max_relative = 1e-12);
    }

    #[test]
    fn fractional_second_moment_finite_and_growing() {
        let mut last = 0.0;
        for s in [0.5, 1.0, 1.5, 1.9, 1.99] {
            let k = compile(&KernelSpec::Fractional { s, scale: 1.0 }, 1);
            let m = second_moment(&k, &uniform(1), &pt(&[0.0]), &q()).unwrap();
            let exact = 2.0 * 0.5f64.powf(2.0 - s) / (2.0 - s);
            assert_relative_eq!(m, exact, max_relative = 1e-9);
            assert!(m > last);
            last = m;
        }
        let bad = compile(&KernelSpec::Fractional { s: 2.5, scale: 1.0 }, 1);
        assert!(matches!(second_moment(&bad, &uniform(1), &pt(&[0.0]), &q()), Err(Error::Divergent(_))));
    }

    #[test]
    fn shell_summation_detects_divergence_and_extrapolates() {
        // weighted kernels go through the shell path
        let base = |s: f64| KernelSpec::Weighted {
            potential: PotentialSpec::Zero,
            base: Box::new(KernelSpec::Fractional { s, scale: 1.0 }),
        };
        let k = compile(&base(1.9), 1);
        let m = second_moment(&k, &uniform(1), &pt(&[0.2]), &q()).unwrap();
        let exact = 2.0 * 2.0 * 0.5f64.powf(0.1) / 0.1;
        assert_relative_eq!(m, exact, max_relative = 1e-6);
        let k = compile(&base(2.5), 1);
        assert!(matches!(second_moment(&k, &uniform(1), &pt(&[0.2]), &q()), Err(Error::Divergent(_))));
    }

    #[test]
    fn second_moment_two_dimensional_constant() {
        // int over [-1/2,1/2]^2 of |z|^2 = 2 * (1/12)
        let k = compile(&KernelSpec::Constant { c: 1.0 }, 2);
        let m = second_moment(&k, &uniform(2), &pt(&[0.1, 0.6]), &q()).unwrap();
        assert_relative_eq!(m, 1.0 / 6.0, max_relative = 1e-8);
    }

    #[test]
    fn c_eta_examples() {
        let one = compile(&KernelSpec::Constant { c: 1.0 }, 1);
        let four = compile(&KernelSpec::Constant { c: 4.0 }, 1);
        let a = c_eta(&one, &uniform(1), &q()).unwrap();
        assert_relative_eq!(a, (2.0f64 / 12.0).sqrt(), max_relative = 1e-10);
        assert_relative_eq!(c_eta(&four, &uniform(1), &q()).unwrap(), 2.0 * a, max_relative = 1e-10);
        let w = compile(
            &KernelSpec::Weighted {
                potential: PotentialSpec::Zero,
                base: Box::new(KernelSpec::Constant { c: 1.0 }),
            },
            1,
        );
        assert_relative_eq!(c_eta(&w, &uniform(1), &q()).unwrap(), 2f64.sqrt() * a, max_relative = 1e-8);
    }

    #[test]
    fn tail_profile_examples() {
        let k = compile(&KernelSpec::Constant { c: 1.0 }, 1);
        let v = tail_profile(&k, &uniform(1), 10.0, &q()).unwrap();
        let oracle = midpoint_oracle(|t| if t < 0.1 { t * t } else { 0.0 }, 100_000);
        assert_relative_eq!(v, oracle, max_relative = 1e-8);
        assert_relative_eq!(v, 2.0 / 3.0 * 1e-3, max_relative = 1e-10);
        let frac = compile(&KernelSpec::Fractional { s: 1.0, scale: 1.0 }, 1);
        let mut last = f64::INFINITY;
        for r in [1.5, 3.0, 10.0, 100.0, 1000.0] {
            let t = tail_profile(&frac, &uniform(1), r, &q()).unwrap();
            assert!(t < last);
            last = t;
        }
        assert!(last < 1e-2);
        assert!(tail_profile(&k, &uniform(1), 0.5, &q()).is_err());
    }

    #[test]
    fn gibbs_measure_is_normalised() {
        let m = Measure::compile(&MeasureSpec::Gibbs { potential: PotentialSpec::cosine() }, 1, &q()).unwrap();
        let total = adaptive_gk(|x| m.density(&[x]), 0.0, 1.0, &[], Tolerance::default()).value;
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        // c_V = I_0(1) for V = cos(2 pi x)
        if let Measure::Gibbs { potential } = &m {
            assert_relative_eq!(potential.normalization(), 1.266_065_877_752_008_4, max_relative = 1e-13);
        }
    }

    #[test]
    fn assumptions_report() {
        let k = compile(&KernelSpec::Constant { c: 1.0 }, 1);
        let r = check_assumptions(&k, &uniform(1), &AssumptionThresholds::default(), &q()).unwrap();
        assert!(r.passes(), "{:?}", r.failures);
        assert!(r.positive);
        let f = compile(&KernelSpec::Fractional { s: 1.0, scale: 1.0 }, 1);
        let r = check_assumptions(&f, &uniform(1), &AssumptionThresholds::default(), &q()).unwrap();
        assert!(r.passes(), "{:?}", r.failures);
        assert!(r.positive && r.symmetric && r.tail_non_increasing);
        let bad = compile(&KernelSpec::Fractional { s: 2.5, scale: 1.0 }, 1);
        let r = check_assumptions(&bad, &uniform(1), &AssumptionThresholds::default(), &q()).unwrap();
        assert!(!r.passes());
    }

    #[test]
    fn tabulated_kernel_with_zero_entry_warns_on_positivity() {
        let grid = build_grid(1, 4).unwrap();
        let mut values = vec![1.0; 16];
        values[1] = 0.0;
        values[4] = 0.0;
        let t = KernelInterpolator::new(grid, values, 0.6, 3.0).unwrap();
        let r = check_assumptions(&t.into(), &uniform(1), &AssumptionThresholds { samples: 200, ..Default::default() }, &q()).unwrap();
        assert!(!r.positive);
    }

    #[test]
    fn interpolator_examples() {
        let grid = build_grid(1, 8).unwrap();
        let n = grid.len();
        let values: Vec<f64> = (0..n * n).map(|i| 1.0 + (i % 7) as f64).collect();
        let t = KernelInterpolator::new(grid.clone(), values.clone(), 0.3, 3.0).unwrap();
        let e = t.eval(&grid.point(2), &grid.point(5)).unwrap();
        assert_eq!(e.value, values[2 * n + 5]);

        let flat = KernelInterpolator::new(grid.clone(), vec![2.5; n * n], 0.3, 3.0).unwrap();
        for i in 0..20 {
            let x = pt(&[i as f64 * 0.049]);
            let y = pt(&[0.5 + i as f64 * 0.013]);
            assert_relative_eq!(flat.eval(&x, &y).unwrap().value, 2.5, max_relative = 1e-14);
        }

        let mut two = vec![1.0; n * n];
        two[n + 4] = 3.0;
        let t2 = KernelInterpolator::new(grid, two, 0.2, 3.0).unwrap();
        let mid = t2.eval(&pt(&[0.125 + 0.0625]), &pt(&[0.5])).unwrap();
        assert!(mid.value >= 1.0 && mid.value <= 3.0);
    }

    #[test]
    fn interpolator_rejects_bad_parameters_and_reports_coverage() {
        let grid = build_grid(1, 4).unwrap();
        assert!(KernelInterpolator::new(grid.clone(), vec![1.0; 16], 0.2, 3.0).is_err());
        assert!(KernelInterpolator::new(grid.clone(), vec![1.0; 16], 0.3, 2.0).is_err());
        // in two dimensions a query at a cell centre is h / sqrt(2) from every lattice point,
        // so off-diagonal pairs sit at product distance h sqrt(2)
        let grid2 = build_grid(2, 4).unwrap();
        let t = KernelInterpolator::new(grid2, vec![1.0; 256], 0.3, 3.0).unwrap();
        let c = pt(&[0.125, 0.125]);
        assert!(matches!(t.eval(&c, &c), Err(Error::Coverage)));
    }

    #[test]
    fn box_overlap_examples() {
        assert_relative_eq!(box_overlap(&[0.0], 0.5, &[0.25], 0.5), 0.25, max_relative = 1e-15);
        assert_relative_eq!(box_overlap(&[0.95], 0.2, &[0.05], 0.2), 0.1, max_relative = 1e-12);
        assert_eq!(box_overlap(&[0.0, 0.0], 0.1, &[0.5, 0.5], 0.1), 0.0);
    }
}
