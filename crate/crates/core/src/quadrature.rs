//! Quadrature building blocks.
//!
//! * [`gauss_legendre`]: nodes and weights on `[-1, 1]` by Newton iteration.
//! * [`adaptive_gk`]: globally adaptive 7/15-point Gauss–Kronrod with
//!   user-supplied breakpoints.
//! * [`integrate_annular`]: nested adaptive integration of `f(x, y)` over a
//!   box of centres `x` and a box of points `y`, restricted to
//!   `r_lo <= |y - x| < r_hi`. Every level splits its interval where a radius
//!   sphere crosses it, so the innermost level integrates over pieces that
//!   lie entirely inside or outside the region.

use serde::{Deserialize, Serialize};

use crate::torus::{wrap_delta, MAX_DIM};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]`: `panels` equal panels with
/// `points` nodes each. Returns `(nodes, weights)`.
pub fn composite_gauss(a: f64, b: f64, panels: usize, points: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(points);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * points);
    let mut weights = Vec::with_capacity(panels * points);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            nodes.push(lo + 0.5 * h * (xi + 1.0));
            weights.push(0.5 * h * wi);
        }
    }
    (nodes, weights)
}

/// Absolute/relative tolerance pair plus a subdivision budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs: 1e-13,
            rel: 1e-9,
            max_intervals: 200,
        }
    }
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, evals: &mut usize) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let fsum = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    *evals += 15;
    let value = kronrod * h;
    let error = ((kronrod - gauss) * h).abs();
    Panel { a, b, value, error }
}

/// Globally adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// `breaks` are interior points where `f` may be non-smooth; the initial
/// panels are split there. Points outside `(a, b)` are ignored.
pub fn adaptive_gk<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    tol: Tolerance,
) -> Estimate {
    if b <= a {
        return Estimate {
            value: 0.0,
            error: 0.0,
            evals: 0,
            converged: true,
        };
    }
    let mut cuts: Vec<f64> = Vec::with_capacity(breaks.len() + 2);
    cuts.push(a);
    let width = b - a;
    let mut interior: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&p| p > a + 1e-14 * width && p < b - 1e-14 * width)
        .collect();
    interior.sort_by(f64::total_cmp);
    interior.dedup_by(|x, y| (*x - *y).abs() <= 1e-14 * width);
    cuts.extend(interior);
    cuts.push(b);

    let mut evals = 0;
    let mut panels: Vec<Panel> = cuts
        .windows(2)
        .map(|w| gk15(&mut f, w[0], w[1], &mut evals))
        .collect();

    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let err: f64 = panels.iter().map(|p| p.error).sum();
        let target = tol.abs.max(tol.rel * total.abs());
        if err <= target {
            return Estimate {
                value: total,
                error: err,
                evals,
                converged: true,
            };
        }
        if panels.len() >= tol.max_intervals {
            return Estimate {
                value: total,
                error: err,
                evals,
                converged: false,
            };
        }
        // bisect the worst panel; ties resolved by position for determinism
        let (worst, _) = panels
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, be), (i, p)| {
                if p.error > be {
                    (i, p.error)
                } else {
                    (bi, be)
                }
            });
        let Panel { a: pa, b: pb, .. } = panels[worst];
        let mid = 0.5 * (pa + pb);
        if mid <= pa || mid >= pb {
            let total: f64 = panels.iter().map(|p| p.value).sum();
            return Estimate {
                value: total,
                error: err,
                evals,
                converged: false,
            };
        }
        let left = gk15(&mut f, pa, mid, &mut evals);
        let right = gk15(&mut f, mid, pb, &mut evals);
        panels[worst] = left;
        panels.insert(worst + 1, right);
    }
}

/// Radial constraint `r_lo <= |y - x| < r_hi`; `r_hi` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annulus {
    pub r_lo: f64,
    pub r_hi: f64,
}

impl Annulus {
    pub fn outside(r: f64) -> Self {
        Self {
            r_lo: r,
            r_hi: f64::INFINITY,
        }
    }

    fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        [self.r_lo, self.r_hi]
            .into_iter()
            .filter(|r| r.is_finite() && *r > 0.0)
    }

    fn contains_sq(&self, r2: f64) -> bool {
        r2 >= self.r_lo * self.r_lo && (self.r_hi.is_infinite() || r2 < self.r_hi * self.r_hi)
    }
}

/// Nested integration of `f(x, y)` over `x` in `outer` (may be empty, then
/// `x = center`) and `y` in `inner`, restricted to the annulus. With
/// `periodic`, distances use the nearest periodic image per axis.
pub struct AnnularProblem<'a> {
    pub outer: &'a [(f64, f64)],
    pub inner: &'a [(f64, f64)],
    pub center: &'a [f64],
    pub annulus: Annulus,
    pub periodic: bool,
    pub tol: Tolerance,
}

impl AnnularProblem<'_> {
    fn dim(&self) -> usize {
        self.inner.len()
    }

    fn disp(&self, y: f64, c: f64) -> f64 {
        if self.periodic {
            wrap_delta(y - c)
        } else {
            y - c
        }
    }

    fn shifts(&self) -> &'static [f64] {
        if self.periodic {
            &[-1.0, 0.0, 1.0]
        } else {
            &[0.0]
        }
    }

    fn inner_breaks(&self, c: f64, partial: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for r in self.annulus.radii() {
            let rem = r * r - partial;
            if rem > 0.0 {
                let h = rem.sqrt();
                for &m in self.shifts() {
                    out.push(c + m - h);
                    out.push(c + m + h);
                }
            }
        }
        if self.periodic {
            for &m in self.shifts() {
                out.push(c + m - 0.5);
                out.push(c + m + 0.5);
            }
        }
        out
    }

    fn outer_breaks(&self, axis: usize) -> Vec<f64> {
        let (a, b) = self.inner[axis];
        let mut out = vec![a, b];
        for r in self.annulus.radii() {
            for &m in self.shifts() {
                for e in [a, b] {
                    out.push(e + m - r);
                    out.push(e + m + r);
                }
            }
        }
        out
    }

    fn level<F: Fn(&[f64], &[f64]) -> f64>(
        &self,
        f: &F,
        depth: usize,
        x: [f64; MAX_DIM],
        y: [f64; MAX_DIM],
        partial: f64,
        stats: &mut (usize, bool),
    ) -> f64 {
        let d = self.dim();
        let n_outer = self.outer.len();
        if depth < n_outer {
            let (a, b) = self.outer[depth];
            let breaks = self.outer_breaks(depth);
            let est = adaptive_gk(
                |t| {
                    let mut xx = x;
                    xx[depth] = t;
                    self.level(f, depth + 1, xx, y, partial, stats)
                },
                a,
                b,
                &breaks,
                self.tol,
            );
            stats.0 += est.evals;
            stats.1 &= est.converged;
            return est.value;
        }
        let axis = depth - n_outer;
        let (a, b) = self.inner[axis];
        let c = x[axis];
        let breaks = self.inner_breaks(c, partial);
        if axis + 1 < d {
            let est = adaptive_gk(
                |t| {
                    let mut yy = y;
                    yy[axis] = t;
                    let w = self.disp(t, c);
                    self.level(f, depth + 1, x, yy, partial + w * w, stats)
                },
                a,
                b,
                &breaks,
                self.tol,
            );
            stats.0 += est.evals;
            stats.1 &= est.converged;
            est.value
        } else {
            // innermost axis: integrate only the pieces inside the annulus
            let mut cuts: Vec<f64> = breaks.into_iter().filter(|&p| p > a && p < b).collect();
            cuts.push(a);
            cuts.push(b);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let mut total = 0.0;
            for w in cuts.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                if hi - lo <= 0.0 {
                    continue;
                }
                let mid = self.disp(0.5 * (lo + hi), c);
                if !self.annulus.contains_sq(partial + mid * mid) {
                    continue;
                }
                let est = adaptive_gk(
                    |t| {
                        let mut yy = y;
                        yy[axis] = t;
                        f(&x[..d], &yy[..d])
                    },
                    lo,
                    hi,
                    &[],
                    self.tol,
                );
                stats.0 += est.evals;
                stats.1 &= est.converged;
                total += est.value;
            }
            total
        }
    }
}

/// Runs an [`AnnularProblem`]. `f` receives `(x, y)` slices of length `d`.
pub fn integrate_annular<F: Fn(&[f64], &[f64]) -> f64>(problem: &AnnularProblem<'_>, f: F) -> Estimate {
    let d = problem.dim();
    assert!((1..=MAX_DIM).contains(&d));
    assert!(problem.outer.is_empty() || problem.outer.len() == d);
    let mut x = [0.0; MAX_DIM];
    if problem.outer.is_empty() {
        x[..d].copy_from_slice(&problem.center[..d]);
    }
    let mut stats = (0usize, true);
    let value = problem.level(&f, 0, x, [0.0; MAX_DIM], 0.0, &mut stats);
    Estimate {
        value,
        error: f64::NAN,
        evals: stats.0,
        converged: stats.1,
    }
}
