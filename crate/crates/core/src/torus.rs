//! Geometry of the flat torus `[0,1)^d`: periodic distance, uniform lattices
//! and the nearest-lattice-point map.
//!
//! Lattice cells are the axis-aligned Voronoi boxes of the lattice points, so
//! a cell at level `n` is a cube of side `1/n` centred on its point and its
//! diameter is `sqrt(d)/n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 3;

/// Default cap on the number of lattice points.
pub const DEFAULT_POINT_CAP: usize = 4096;

/// Wraps a coordinate difference into `[-1/2, 1/2)`.
#[inline]
pub fn wrap_delta(delta: f64) -> f64 {
    let w = delta - delta.round();
    if w >= 0.5 {
        w - 1.0
    } else {
        w
    }
}

/// Reduces a coordinate into `[0, 1)`.
#[inline]
pub fn wrap_coord(c: f64) -> f64 {
    let w = c - c.floor();
    // c = -1e-18 gives floor = -1 and w = 1.0 after rounding
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// A point of the torus with every coordinate in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    /// Builds a point, reducing every coordinate modulo 1.
    pub fn new(coords: &[f64]) -> Result<Self> {
        if coords.is_empty() || coords.len() > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "torus dimension must be in 1..={MAX_DIM}, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(Self {
            coords: coords.iter().map(|&c| wrap_coord(c)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Squared periodic distance between two coordinate slices of equal length.
#[inline]
pub fn torus_distance_sq_raw(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let w = wrap_delta(b - a);
            w * w
        })
        .sum()
}

/// Periodic distance on raw coordinates (no dimension check).
#[inline]
pub fn torus_distance_raw(x: &[f64], y: &[f64]) -> f64 {
    torus_distance_sq_raw(x, y).sqrt()
}

/// Length of the shortest periodic displacement between `x` and `y`.
pub fn torus_distance(x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(torus_distance_raw(&x.coords, &y.coords))
}

/// A uniform lattice `{(j_1/n, ..., j_d/n)}` in lexicographic index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    level: usize,
}

impl GridSpec {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Number of lattice points, `n^d`.
    pub fn len(&self) -> usize {
        self.level.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Side length of one cell.
    pub fn spacing(&self) -> f64 {
        1.0 / self.level as f64
    }

    /// Diameter of one cell, `sqrt(d)/n`.
    pub fn cell_diameter(&self) -> f64 {
        (self.dim as f64).sqrt() / self.level as f64
    }

    /// Multi-index of a flat index; the last axis varies fastest.
    pub fn multi_index(&self, mut index: usize) -> [usize; MAX_DIM] {
        let mut out = [0usize; MAX_DIM];
        for axis in (0..self.dim).rev() {
            out[axis] = index % self.level;
            index /= self.level;
        }
        out
    }

    /// Flat index of a multi-index (components taken modulo `n`).
    pub fn flat_index(&self, multi: &[isize]) -> usize {
        let n = self.level as isize;
        multi[..self.dim]
            .iter()
            .fold(0usize, |acc, &m| acc * self.level + m.rem_euclid(n) as usize)
    }

    /// Coordinates of lattice point `index`.
    pub fn point_coords(&self, index: usize) -> [f64; MAX_DIM] {
        let mi = self.multi_index(index);
        let mut out = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            out[axis] = mi[axis] as f64 / self.level as f64;
        }
        out
    }

    pub fn point(&self, index: usize) -> TorusPoint {
        TorusPoint {
            coords: self.point_coords(index)[..self.dim].to_vec(),
        }
    }

    /// All lattice points in index order.
    pub fn points(&self) -> Vec<TorusPoint> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Chebyshev distance between the multi-indices of two cells, periodic.
    pub fn cell_offset_linf(&self, a: usize, b: usize) -> usize {
        let ma = self.multi_index(a);
        let mb = self.multi_index(b);
        (0..self.dim)
            .map(|axis| {
                let diff = ma[axis].abs_diff(mb[axis]);
                diff.min(self.level - diff)
            })
            .max()
            .unwrap_or(0)
    }

    /// Periodic displacement `x_b - x_a` between lattice points, each axis in `[-1/2, 1/2)`.
    pub fn displacement(&self, a: usize, b: usize) -> [f64; MAX_DIM] {
        let pa = self.point_coords(a);
        let pb = self.point_coords(b);
        let mut out = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            out[axis] = wrap_delta(pb[axis] - pa[axis]);
        }
        out
    }

    /// Torus distance between two lattice points.
    pub fn point_distance(&self, a: usize, b: usize) -> f64 {
        let d = self.displacement(a, b);
        d[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Builds the level-`n` lattice in dimension `d` with the default point cap.
pub fn build_grid(dim: usize, level: usize) -> Result<GridSpec> {
    build_grid_capped(dim, level, DEFAULT_POINT_CAP)
}

/// Builds the level-`n` lattice, rejecting grids with more than `cap` points.
pub fn build_grid_capped(dim: usize, level: usize, cap: usize) -> Result<GridSpec> {
    if !(1..=MAX_DIM).contains(&dim) {
        return Err(Error::InvalidArgument(format!(
            "grid dimension must be in 1..={MAX_DIM}, got {dim}"
        )));
    }
    if level < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid level must be at least 2, got {level}"
        )));
    }
    let points = level
        .checked_pow(dim as u32)
        .ok_or(Error::GridTooLarge {
            points: usize::MAX,
            cap,
        })?;
    if points > cap {
        return Err(Error::GridTooLarge { points, cap });
    }
    Ok(GridSpec { dim, level })
}

/// Index of the lattice point closest to `x`; ties go to the smaller
/// lexicographic index.
pub fn nearest_cell(x: &TorusPoint, grid: &GridSpec) -> Result<usize> {
    if x.dim() != grid.dim {
        return Err(Error::DimensionMismatch {
            expected: grid.dim,
            got: x.dim(),
        });
    }
    Ok(nearest_cell_raw(x.coords(), grid))
}

/// Nearest lattice point of raw coordinates (assumed already in `[0,1)`).
///
/// Per axis the candidates are the two bracketing lattice values; the
/// distance is separable, so choosing the per-axis winner minimises the total.
/// On an exact tie the axis value with the smaller index wins, which yields
/// the lexicographically smallest flat index among all minimisers.
pub fn nearest_cell_raw(x: &[f64], grid: &GridSpec) -> usize {
    let n = grid.level;
    let nf = n as f64;
    let mut multi = [0isize; MAX_DIM];
    for axis in 0..grid.dim {
        let c = wrap_coord(x[axis]);
        let lo = (c * nf).floor() as usize % n;
        let hi = (lo + 1) % n;
        let d_lo = wrap_delta(c - lo as f64 / nf).abs();
        let d_hi = wrap_delta(c - hi as f64 / nf).abs();
        let pick = if d_lo < d_hi {
            lo
        } else if d_hi < d_lo {
            hi
        } else {
            lo.min(hi)
        };
        multi[axis] = pick as isize;
    }
    grid.flat_index(&multi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_abs_diff_eq!(torus_distance(&p(&[0.1]), &p(&[0.9])).unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(torus_distance(&p(&[0.3, 0.7]), &p(&[0.3, 0.7])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            torus_distance(&p(&[0.0, 0.0]), &p(&[0.5, 0.5])).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn distance_dimension_mismatch() {
        assert!(matches!(
            torus_distance(&p(&[0.1]), &p(&[0.1, 0.2])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(1, 4).unwrap();
        let xs: Vec<f64> = g.points().iter().map(|q| q.coords()[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75]);
        assert_eq!(g.cell_diameter(), 0.25);

        let g2 = build_grid(2, 2).unwrap();
        assert_eq!(g2.len(), 4);
        assert_abs_diff_eq!(g2.cell_diameter(), 2f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_eq!(g2.point(1).coords(), &[0.0, 0.5]);
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(build_grid(1, 1).is_err());
        assert!(build_grid(4, 2).is_err());
        assert!(matches!(build_grid_capped(2, 100, 4096), Err(Error::GridTooLarge { .. })));
    }

    #[test]
    fn grid_nesting() {
        for (m, n) in [(2, 4), (4, 8), (3, 9), (8, 64)] {
            let coarse = build_grid(1, m).unwrap();
            let fine = build_grid(1, n).unwrap();
            for q in coarse.points() {
                let idx = nearest_cell(&q, &fine).unwrap();
                assert_eq!(fine.point(idx), q, "level {m} point missing from level {n}");
            }
        }
        let coarse = build_grid(2, 2).unwrap();
        let fine = build_grid(2, 4).unwrap();
        for q in coarse.points() {
            assert_eq!(fine.point(nearest_cell(&q, &fine).unwrap()), q);
        }
    }

    #[test]
    fn nearest_cell_examples() {
        let g = build_grid(1, 4).unwrap();
        assert_eq!(nearest_cell(&p(&[0.26]), &g).unwrap(), 1);
        assert_eq!(nearest_cell(&p(&[0.99]), &g).unwrap(), 0);
        assert_eq!(nearest_cell(&p(&[0.125]), &g).unwrap(), 0);
        // tie across the wrap: 0.875 is equidistant from 0.75 (index 3) and 0.0 (index 0)
        assert_eq!(nearest_cell(&p(&[0.875]), &g).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in proptest::collection::vec(0.0f64..1.0, 2),
            b in proptest::collection::vec(0.0f64..1.0, 2),
            c in proptest::collection::vec(0.0f64..1.0, 2),
        ) {
            let (a, b, c) = (p(&a), p(&b), p(&c));
            let ab = torus_distance(&a, &b).unwrap();
            let ba = torus_distance(&b, &a).unwrap();
            let bc = torus_distance(&b, &c).unwrap();
            let ac = torus_distance(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-14);
            prop_assert!(ab <= (2.0f64).sqrt() / 2.0 + 1e-15);
        }

        #[test]
        fn nearest_cell_within_half_diameter(
            x in proptest::collection::vec(0.0f64..1.0, 3),
            n in 2usize..12,
        ) {
            let g = build_grid(3, n).unwrap();
            let q = p(&x);
            let idx = nearest_cell(&q, &g).unwrap();
            let d = torus_distance(&q, &g.point(idx)).unwrap();
            prop_assert!(d <= g.cell_diameter() / 2.0 + 1e-14);
            // brute force agrees on the distance
            let best = g.points().iter().map(|pt| torus_distance(&q, pt).unwrap()).fold(f64::INFINITY, f64::min);
            prop_assert!((d - best).abs() < 1e-14);
        }
    }
}
