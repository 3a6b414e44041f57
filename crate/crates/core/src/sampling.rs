//! Collocation, boundary, initial and evaluation point sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Interior,
    Boundary,
    Initial,
    Evaluation,
}

/// An ordered list of points stored row-major (`len × dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub dim: usize,
    pub coords: Vec<f64>,
    pub role: PointRole,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>, role: PointRole) -> Self {
        debug_assert_eq!(coords.len() % dim, 0);
        Self { dim, coords, role }
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// Points satisfying `keep`, in their original order.
    pub fn filter(&self, role: PointRole, keep: impl Fn(&[f64]) -> bool) -> PointSet {
        let coords = self
            .iter()
            .filter(|p| keep(p))
            .flatten()
            .copied()
            .collect();
        PointSet::new(self.dim, coords, role)
    }

    pub fn concat(sets: &[&PointSet], role: PointRole) -> PointSet {
        let dim = sets.first().map_or(1, |s| s.dim);
        let coords = sets.iter().flat_map(|s| s.coords.iter().copied()).collect();
        PointSet::new(dim, coords, role)
    }
}

const SOBOL_BITS: usize = 32;

/// Direction numbers (scaled to 32 bits) for the first two Sobol dimensions.
///
/// Dimension 1 is the van der Corput sequence in base 2. Dimension 2 uses the
/// Joe–Kuo parameters `s = 1, a = 0, m = [1]`, giving the recurrence
/// `v_i = v_{i-1} ^ (v_{i-1} >> 1)`.
fn direction_numbers(dim: usize) -> [u32; SOBOL_BITS] {
    let mut v = [0u32; SOBOL_BITS];
    match dim {
        0 => {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = 1u32 << (31 - i);
            }
        }
        1 => {
            v[0] = 1u32 << 31;
            for i in 1..SOBOL_BITS {
                v[i] = v[i - 1] ^ (v[i - 1] >> 1);
            }
        }
        _ => unreachable!("only two Sobol dimensions are tabulated"),
    }
    v
}

/// Gray-code Sobol generator over `[0, 1)^dim`, skipping the initial zero point.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; SOBOL_BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::config(format!("Sobol dimension {dim} not in 1..=2")));
        }
        Ok(Self {
            directions: (0..dim).map(direction_numbers).collect(),
            state: vec![0; dim],
            index: 0,
        })
    }

    /// Writes the next point into `out`.
    pub fn next_into(&mut self, out: &mut [f64]) {
        let c = self.index.trailing_ones() as usize;
        assert!(c < SOBOL_BITS, "Sobol sequence exhausted");
        self.index += 1;
        for ((s, dirs), o) in self.state.iter_mut().zip(&self.directions).zip(out) {
            *s ^= dirs[c];
            *o = *s as f64 / 4_294_967_296.0;
        }
    }
}

/// First `n` Sobol points mapped affinely onto `bounds`.
pub fn sobol_points(dim: usize, n: usize, bounds: &[(f64, f64)]) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::config("Sobol point count must be at least 1"));
    }
    if bounds.len() != dim {
        return Err(Error::shape("Sobol box", dim, bounds.len()));
    }
    let mut gen = Sobol::new(dim)?;
    let mut coords = vec![0.0; n * dim];
    for row in coords.chunks_exact_mut(dim) {
        gen.next_into(row);
        for (x, &(a, b)) in row.iter_mut().zip(bounds) {
            *x = a + (b - a) * *x;
        }
    }
    Ok(PointSet::new(dim, coords, PointRole::Interior))
}

/// Shape of a problem's domain; decides where boundary and initial points go.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// One spatial axis; the boundary is the two endpoints.
    Interval { x: (f64, f64) },
    /// One time axis (an initial-value problem); the initial set is `{t0}`.
    TimeInterval { t: (f64, f64) },
    /// Space-time strip `[a, b] × [t0, t1]`.
    SpaceTime { x: (f64, f64), t: (f64, f64) },
    /// Stationary rectangle `[a1, b1] × [a2, b2]`.
    Rectangle { x: (f64, f64), y: (f64, f64) },
}

impl Geometry {
    pub fn dim(&self) -> usize {
        match self {
            Geometry::Interval { .. } | Geometry::TimeInterval { .. } => 1,
            _ => 2,
        }
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match *self {
            Geometry::Interval { x } => vec![x],
            Geometry::TimeInterval { t } => vec![t],
            Geometry::SpaceTime { x, t } => vec![x, t],
            Geometry::Rectangle { x, y } => vec![x, y],
        }
    }

    pub fn has_time_axis(&self) -> bool {
        matches!(self, Geometry::TimeInterval { .. } | Geometry::SpaceTime { .. })
    }
}

fn free_coordinate(n: usize, range: (f64, f64)) -> Result<Vec<f64>> {
    Ok(sobol_points(1, n, &[range])?.coords)
}

/// Boundary and initial point sets for a domain.
///
/// Space-time strips put half of the boundary points on each wall with
/// Sobol-sampled times (both walls share the same times, so the `i`-th point
/// on each wall form a pair). Rectangles split boundary points evenly across
/// the four edges in the order `x = a1`, `x = b1`, `y = a2`, `y = b2`.
pub fn boundary_points(
    geometry: &Geometry,
    n_boundary: usize,
    n_initial: usize,
) -> Result<(PointSet, PointSet)> {
    let empty = |role| PointSet::new(geometry.dim(), Vec::new(), role);
    match *geometry {
        Geometry::Interval { x } => {
            if n_initial > 0 {
                return Err(Error::config("initial points requested for a problem without a time axis"));
            }
            Ok((
                PointSet::new(1, vec![x.0, x.1], PointRole::Boundary),
                empty(PointRole::Initial),
            ))
        }
        Geometry::TimeInterval { t } => Ok((
            empty(PointRole::Boundary),
            PointSet::new(1, vec![t.0], PointRole::Initial),
        )),
        Geometry::SpaceTime { x, t } => {
            if n_boundary < 2 || n_initial < 1 {
                return Err(Error::config(
                    "space-time problems need at least 2 boundary points and 1 initial point",
                ));
            }
            let half = n_boundary / 2;
            let times = free_coordinate(half, t)?;
            let mut b = Vec::with_capacity(4 * half);
            for wall in [x.0, x.1] {
                for &s in &times {
                    b.extend_from_slice(&[wall, s]);
                }
            }
            let xs = free_coordinate(n_initial, x)?;
            let init = xs.iter().flat_map(|&s| [s, t.0]).collect();
            Ok((
                PointSet::new(2, b, PointRole::Boundary),
                PointSet::new(2, init, PointRole::Initial),
            ))
        }
        Geometry::Rectangle { x, y } => {
            if n_initial > 0 {
                return Err(Error::config("initial points requested for a problem without a time axis"));
            }
            if n_boundary < 4 {
                return Err(Error::config("rectangles need at least 4 boundary points"));
            }
            let quarter = n_boundary / 4;
            let ys = free_coordinate(quarter, y)?;
            let xs = free_coordinate(quarter, x)?;
            let mut b = Vec::with_capacity(8 * quarter);
            for wall in [x.0, x.1] {
                for &s in &ys {
                    b.extend_from_slice(&[wall, s]);
                }
            }
            for wall in [y.0, y.1] {
                for &s in &xs {
                    b.extend_from_slice(&[s, wall]);
                }
            }
            Ok((PointSet::new(2, b, PointRole::Boundary), empty(PointRole::Initial)))
        }
    }
}

/// Tensor-product equispaced grid including the box endpoints; the last
/// coordinate varies fastest.
pub fn uniform_grid(bounds: &[(f64, f64)], resolution: &[usize]) -> Result<PointSet> {
    if bounds.len() != resolution.len() || bounds.is_empty() {
        return Err(Error::shape("grid resolution", bounds.len(), resolution.len()));
    }
    if let Some(&r) = resolution.iter().find(|&&r| r < 2) {
        return Err(Error::config(format!("grid resolution {r} is below 2")));
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .zip(resolution)
        .map(|(&(a, b), &n)| {
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        b
                    } else {
                        a + (b - a) * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let dim = bounds.len();
    let total: usize = resolution.iter().product();
    let mut coords = Vec::with_capacity(total * dim);
    for flat in 0..total {
        let mut rem = flat;
        let mut p = vec![0.0; dim];
        for d in (0..dim).rev() {
            p[d] = axes[d][rem % resolution[d]];
            rem /= resolution[d];
        }
        coords.extend(p);
    }
    Ok(PointSet::new(dim, coords, PointRole::Evaluation))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_sobol_point_is_one_half() {
        let p = sobol_points(1, 1, &[(0.0, 1.0)]).unwrap();
        assert_eq!(p.coords, vec![0.5]);
    }

    #[test]
    fn sobol_matches_published_prefix() {
        // Unscrambled Joe–Kuo Sobol points 1..=8 (after the zero point).
        let expected = [
            [0.5, 0.5],
            [0.75, 0.25],
            [0.25, 0.75],
            [0.375, 0.375],
            [0.875, 0.875],
            [0.625, 0.125],
            [0.125, 0.625],
            [0.1875, 0.3125],
        ];
        let p = sobol_points(2, 8, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(p.point(i), e.as_slice(), "point {i}");
        }
    }

    #[test]
    fn sobol_is_affine_distinct_and_deterministic() {
        let p = sobol_points(1, 3, &[(0.0, 2.0)]).unwrap();
        assert!(p.coords.iter().all(|&x| (0.0..=2.0).contains(&x)));
        assert!(p.coords[0] != p.coords[1] && p.coords[1] != p.coords[2] && p.coords[0] != p.coords[2]);
        let q = sobol_points(1, 3, &[(0.0, 2.0)]).unwrap();
        assert_eq!(p, q);
        assert!(sobol_points(1, 0, &[(0.0, 1.0)]).is_err());
        assert!(sobol_points(3, 1, &[(0.0, 1.0); 3]).is_err());
    }

    #[test]
    fn stationary_interval_boundary_is_endpoints() {
        let g = Geometry::Interval { x: (0.0, 1.0) };
        let (b, i) = boundary_points(&g, 100, 0).unwrap();
        assert_eq!(b.coords, vec![0.0, 1.0]);
        assert!(i.is_empty());
        assert!(boundary_points(&g, 2, 5).is_err());
    }

    #[test]
    fn space_time_walls_split_evenly() {
        let g = Geometry::SpaceTime {
            x: (-1.0, 1.0),
            t: (0.0, 1.0),
        };
        let (b, i) = boundary_points(&g, 1000, 500).unwrap();
        assert_eq!(b.len(), 1000);
        let left = b.iter().filter(|p| p[0] == -1.0).count();
        let right = b.iter().filter(|p| p[0] == 1.0).count();
        assert_eq!((left, right), (500, 500));
        assert!(b.iter().all(|p| (0.0..=1.0).contains(&p[1])));
        assert_eq!(i.len(), 500);
        assert!(i.iter().all(|p| p[1] == 0.0 && (-1.0..=1.0).contains(&p[0])));
        // wall points pair up at equal times
        for k in 0..500 {
            assert_eq!(b.point(k)[1], b.point(500 + k)[1]);
        }
    }

    #[test]
    fn rectangle_gets_one_point_per_edge() {
        let g = Geometry::Rectangle {
            x: (-1.0, 1.0),
            y: (-1.0, 1.0),
        };
        let (b, _) = boundary_points(&g, 4, 0).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.point(0)[0], -1.0);
        assert_eq!(b.point(1)[0], 1.0);
        assert_eq!(b.point(2)[1], -1.0);
        assert_eq!(b.point(3)[1], 1.0);
    }

    #[test]
    fn uniform_grids() {
        let g = uniform_grid(&[(0.0, 1.0)], &[3]).unwrap();
        assert_eq!(g.coords, vec![0.0, 0.5, 1.0]);
        let g = uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &[3, 2]).unwrap();
        assert_eq!(g.len(), 6);
        for corner in [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]] {
            assert!(g.iter().any(|p| p == corner.as_slice()));
        }
        assert!(uniform_grid(&[(0.0, 1.0)], &[1]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sobol_prefix_property(n in 1usize..200, extra in 1usize..200, dim in 1usize..=2) {
                let bounds = vec![(-1.5, 2.5); dim];
                let short = sobol_points(dim, n, &bounds).unwrap();
                let long = sobol_points(dim, n + extra, &bounds).unwrap();
                prop_assert_eq!(&short.coords[..], &long.coords[..n * dim]);
                prop_assert!(long.coords.iter().all(|&x| (-1.5..=2.5).contains(&x)));
            }
        }
    }
}
