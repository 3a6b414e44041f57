//! Mother wavelets and the dilated/translated families built from them.
//!
//! A family member in one dimension is
//! `Ψ_{j,k}(x) = √(2^j) · ψ(2^j x − k)` and its derivatives follow from the
//! chain rule, `d^n/dx^n Ψ_{j,k}(x) = 2^{j n} · √(2^j) · ψ^{(n)}(2^j x − k)`.
//! Two-dimensional families are tensor products of two one-dimensional
//! families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest derivative order the closed forms cover.
pub const MAX_ORDER: u8 = 2;

/// Default cap on the number of family members.
pub const DEFAULT_MAX_MEMBERS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotherWavelet {
    /// `ψ(x) = −x e^{−x²/2}`, the first derivative of the Gaussian.
    Gaussian,
    /// `ψ(x) = (1 − x²) e^{−x²/2}`, the negated second derivative of the Gaussian.
    MexicanHat,
}

impl MotherWavelet {
    pub fn name(self) -> &'static str {
        match self {
            MotherWavelet::Gaussian => "gaussian",
            MotherWavelet::MexicanHat => "mexican",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "g" => Ok(MotherWavelet::Gaussian),
            "mexican" | "mexican_hat" | "mexicanhat" | "m" => Ok(MotherWavelet::MexicanHat),
            other => Err(Error::config(format!("unknown wavelet `{other}`"))),
        }
    }

    /// Closed form of `ψ^{(order)}(x)`; `order` must be at most [`MAX_ORDER`].
    #[inline]
    pub(crate) fn eval_unchecked(self, order: u8, x: f64) -> f64 {
        let x2 = x * x;
        let e = (-0.5 * x2).exp();
        match (self, order) {
            (MotherWavelet::Gaussian, 0) => -x * e,
            (MotherWavelet::Gaussian, 1) => (x2 - 1.0) * e,
            (MotherWavelet::Gaussian, _) => x * (3.0 - x2) * e,
            (MotherWavelet::MexicanHat, 0) => (1.0 - x2) * e,
            (MotherWavelet::MexicanHat, 1) => x * (x2 - 3.0) * e,
            (MotherWavelet::MexicanHat, _) => (-x2 * x2 + 6.0 * x2 - 3.0) * e,
        }
    }
}

/// Evaluates `ψ`, `ψ′` or `ψ″` of the given mother wavelet.
pub fn mother_eval(kind: MotherWavelet, order: u8, x: f64) -> Result<f64> {
    if order > MAX_ORDER {
        return Err(Error::config(format!(
            "derivative order {order} is not supported (max {MAX_ORDER})"
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric(format!("mother wavelet argument {x}")));
    }
    Ok(kind.eval_unchecked(order, x))
}

/// Resolution exponent and translation of one family member along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FamilyIndex {
    pub j: i32,
    pub k: i64,
}

impl FamilyIndex {
    /// `2^j` and `√(2^j)`.
    #[inline]
    fn scales(self) -> (f64, f64) {
        let dil = 2f64.powi(self.j);
        (dil, dil.sqrt())
    }
}

/// Inclusive range of resolution exponents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRange {
    pub min: i32,
    pub max: i32,
}

impl ResolutionRange {
    pub fn new(min: i32, max: i32) -> Self {
        Self { min, max }
    }
}

/// The one-dimensional family along a single axis of the domain box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisFamily {
    pub domain: (f64, f64),
    pub resolution: ResolutionRange,
    pub indices: Vec<FamilyIndex>,
    /// Offset of each resolution level inside `indices`, plus a final end offset.
    pub level_offsets: Vec<usize>,
}

/// Translation range `⌈a·2^{j+1}⌉ ..= ⌈b·2^{j+1}⌉` for resolution `j`.
pub fn translation_range(domain: (f64, f64), j: i32) -> (i64, i64) {
    let s = 2f64.powi(j + 1);
    ((domain.0 * s).ceil() as i64, (domain.1 * s).ceil() as i64)
}

impl AxisFamily {
    fn enumerate(domain: (f64, f64), resolution: ResolutionRange) -> Result<Self> {
        let (a, b) = domain;
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return Err(Error::config(format!("empty domain interval [{a}, {b}]")));
        }
        if resolution.min > resolution.max {
            return Err(Error::config(format!(
                "resolution range [{}, {}] is empty",
                resolution.min, resolution.max
            )));
        }
        if resolution.max > 40 || resolution.min < -40 {
            return Err(Error::config("resolution exponent outside [-40, 40]"));
        }
        let mut indices = Vec::new();
        let mut level_offsets = Vec::new();
        for j in resolution.min..=resolution.max {
            level_offsets.push(indices.len());
            let (lo, hi) = translation_range(domain, j);
            indices.extend((lo..=hi).map(|k| FamilyIndex { j, k }));
        }
        level_offsets.push(indices.len());
        Ok(Self {
            domain,
            resolution,
            indices,
            level_offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of resolution levels.
    pub fn levels(&self) -> usize {
        self.level_offsets.len() - 1
    }

    /// `d^order/dx^order Ψ_{j,k}(x)` for the member at `index`.
    #[inline]
    pub fn eval(&self, mother: MotherWavelet, index: usize, order: u8, x: f64) -> f64 {
        member_eval(mother, self.indices[index], order, x)
    }
}

/// `d^order/dx^order [√(2^j) ψ(2^j x − k)] = 2^{j·order} √(2^j) ψ^{(order)}(2^j x − k)`.
///
/// Subnormal results are returned as zero. They only occur far out in the
/// Gaussian tail, and carrying them into matrix products makes those products
/// many times slower on common hardware.
#[inline]
pub fn member_eval(mother: MotherWavelet, idx: FamilyIndex, order: u8, x: f64) -> f64 {
    let (dil, norm) = idx.scales();
    let chain = dil.powi(order as i32);
    let v = chain * norm * mother.eval_unchecked(order, dil * x - idx.k as f64);
    if v.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// A full wavelet family in one or two dimensions.
///
/// Members are ordered lexicographically: by `(j, k)` in 1D and by
/// `(j1, k1, j2, k2)` in 2D, so the flat member index is
/// `m = m1 · M2 + m2` where `m1`, `m2` index the per-axis families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletFamily {
    pub mother: MotherWavelet,
    pub axes: Vec<AxisFamily>,
}

/// Per-dimension derivative orders, e.g. `[2]` for `u_xx` or `[0, 1]` for `u_t`.
pub type MultiOrder = Vec<u8>;

impl WaveletFamily {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total number of members `M`.
    pub fn len(&self) -> usize {
        self.axes.iter().map(AxisFamily::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self) -> Vec<(f64, f64)> {
        self.axes.iter().map(|a| a.domain).collect()
    }

    /// Per-axis member indices of the flat member index `m`.
    pub fn split_index(&self, m: usize) -> Vec<usize> {
        let mut out = vec![0; self.axes.len()];
        let mut rem = m;
        for (slot, axis) in out.iter_mut().zip(&self.axes).rev() {
            *slot = rem % axis.len();
            rem /= axis.len();
        }
        out
    }

    /// `(j, k)` pairs of member `m`, one per axis.
    pub fn member(&self, m: usize) -> Vec<FamilyIndex> {
        self.split_index(m)
            .into_iter()
            .zip(&self.axes)
            .map(|(i, a)| a.indices[i])
            .collect()
    }
}

/// Builds the family for `mother` over `domain` with inclusive resolution ranges.
pub fn enumerate_family(
    mother: MotherWavelet,
    domain: &[(f64, f64)],
    resolution: &[ResolutionRange],
) -> Result<WaveletFamily> {
    enumerate_family_capped(mother, domain, resolution, DEFAULT_MAX_MEMBERS)
}

pub fn enumerate_family_capped(
    mother: MotherWavelet,
    domain: &[(f64, f64)],
    resolution: &[ResolutionRange],
    max_members: usize,
) -> Result<WaveletFamily> {
    if domain.is_empty() || domain.len() > 2 {
        return Err(Error::config(format!(
            "families are 1D or 2D, got {} dimensions",
            domain.len()
        )));
    }
    if domain.len() != resolution.len() {
        return Err(Error::shape("resolution ranges", domain.len(), resolution.len()));
    }
    let axes = domain
        .iter()
        .zip(resolution)
        .map(|(&d, &r)| AxisFamily::enumerate(d, r))
        .collect::<Result<Vec<_>>>()?;
    let total = axes
        .iter()
        .try_fold(1usize, |acc, a| acc.checked_mul(a.len()))
        .unwrap_or(usize::MAX);
    if total > max_members {
        return Err(Error::config(format!(
            "family has {total} members, above the cap of {max_members}"
        )));
    }
    Ok(WaveletFamily { mother, axes })
}

/// Evaluates member `m` (with per-dimension derivative orders) at `point`.
pub fn basis_eval(family: &WaveletFamily, m: usize, orders: &[u8], point: &[f64]) -> Result<f64> {
    if m >= family.len() {
        return Err(Error::config(format!(
            "member index {m} out of range for a family of {}",
            family.len()
        )));
    }
    if orders.len() != family.dim() {
        return Err(Error::shape("derivative orders", family.dim(), orders.len()));
    }
    if point.len() != family.dim() {
        return Err(Error::shape("point", family.dim(), point.len()));
    }
    if let Some(&o) = orders.iter().find(|&&o| o > MAX_ORDER) {
        return Err(Error::config(format!("derivative order {o} is not supported")));
    }
    Ok(family
        .member(m)
        .into_iter()
        .zip(orders)
        .zip(point)
        .map(|((idx, &o), &x)| member_eval(family.mother, idx, o, x))
        .product())
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [MotherWavelet; 2] = [MotherWavelet::Gaussian, MotherWavelet::MexicanHat];

    #[test]
    fn mother_values_at_simple_points() {
        assert_eq!(mother_eval(MotherWavelet::MexicanHat, 0, 0.0).unwrap(), 1.0);
        assert_eq!(mother_eval(MotherWavelet::Gaussian, 0, 0.0).unwrap(), 0.0);
        assert_eq!(mother_eval(MotherWavelet::MexicanHat, 0, 1.0).unwrap(), 0.0);
        assert_eq!(mother_eval(MotherWavelet::Gaussian, 1, 0.0).unwrap(), -1.0);
        assert_eq!(mother_eval(MotherWavelet::MexicanHat, 1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_first_derivative_by_finite_difference() {
        let h = 1e-6;
        let fd = (mother_eval(MotherWavelet::Gaussian, 0, h).unwrap()
            - mother_eval(MotherWavelet::Gaussian, 0, -h).unwrap())
            / (2.0 * h);
        assert!((fd + 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_third_derivative() {
        assert!(mother_eval(MotherWavelet::Gaussian, 3, 0.1).is_err());
        assert!(mother_eval(MotherWavelet::Gaussian, 0, f64::NAN).is_err());
    }

    #[test]
    fn gaussian_derivative_is_negated_mexican_hat() {
        for i in 0..10_000 {
            let x = -8.0 + 16.0 * i as f64 / 9_999.0;
            let d = mother_eval(MotherWavelet::Gaussian, 1, x).unwrap();
            let m = mother_eval(MotherWavelet::MexicanHat, 0, x).unwrap();
            assert!((d + m).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for kind in KINDS {
            for order in 1..=2u8 {
                for i in 0..=400 {
                    let x = -6.0 + 12.0 * i as f64 / 400.0;
                    let exact = mother_eval(kind, order, x).unwrap();
                    let fd = (mother_eval(kind, order - 1, x + h).unwrap()
                        - mother_eval(kind, order - 1, x - h).unwrap())
                        / (2.0 * h);
                    if exact.abs() < 1e-3 {
                        assert!((fd - exact).abs() < 1e-8, "{kind:?} {order} {x}");
                    } else {
                        assert!(((fd - exact) / exact).abs() < 1e-5, "{kind:?} {order} {x}");
                    }
                }
            }
        }
    }

    #[test]
    fn unit_interval_single_level() {
        let f = enumerate_family(
            MotherWavelet::Gaussian,
            &[(0.0, 1.0)],
            &[ResolutionRange::new(0, 0)],
        )
        .unwrap();
        let idx: Vec<_> = f.axes[0].indices.iter().map(|i| (i.j, i.k)).collect();
        assert_eq!(idx, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(f.len(), 3);
    }

    #[test]
    fn negative_resolution_on_symmetric_interval() {
        let f = enumerate_family(
            MotherWavelet::MexicanHat,
            &[(-1.0, 1.0)],
            &[ResolutionRange::new(-3, -3)],
        )
        .unwrap();
        let ks: Vec<_> = f.axes[0].indices.iter().map(|i| i.k).collect();
        assert_eq!(ks, vec![0, 1]);
    }

    #[test]
    fn member_count_matches_brute_force() {
        let f = enumerate_family(
            MotherWavelet::Gaussian,
            &[(0.0, 1.0)],
            &[ResolutionRange::new(0, 9)],
        )
        .unwrap();
        // brute force: scan a wide window of integers and keep those in range
        let mut count = 0;
        for j in 0..=9i32 {
            let s = 2f64.powi(j + 1);
            for k in -5000i64..5000 {
                if k as f64 >= (0.0 * s).ceil() && k as f64 <= (1.0 * s).ceil() {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 2056);
        assert_eq!(f.len(), 2056);
    }

    #[test]
    fn two_dimensional_ordering_and_cap() {
        let f = enumerate_family(
            MotherWavelet::Gaussian,
            &[(0.0, 1.0), (-1.0, 1.0)],
            &[ResolutionRange::new(0, 0), ResolutionRange::new(-3, -3)],
        )
        .unwrap();
        assert_eq!(f.len(), 6);
        let members: Vec<_> = (0..6)
            .map(|m| {
                let v = f.member(m);
                (v[0].j, v[0].k, v[1].j, v[1].k)
            })
            .collect();
        let mut sorted = members.clone();
        sorted.sort();
        assert_eq!(members, sorted);

        let err = enumerate_family_capped(
            MotherWavelet::Gaussian,
            &[(0.0, 1.0)],
            &[ResolutionRange::new(0, 9)],
            1000,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_bad_configuration() {
        let g = MotherWavelet::Gaussian;
        assert!(enumerate_family(g, &[(1.0, 1.0)], &[ResolutionRange::new(0, 1)]).is_err());
        assert!(enumerate_family(g, &[(0.0, 1.0)], &[ResolutionRange::new(2, 1)]).is_err());
        assert!(enumerate_family(g, &[], &[]).is_err());
    }

    #[test]
    fn dilated_member_values() {
        let f = enumerate_family(
            MotherWavelet::MexicanHat,
            &[(0.0, 1.0)],
            &[ResolutionRange::new(0, 1)],
        )
        .unwrap();
        let m = f.axes[0]
            .indices
            .iter()
            .position(|i| i.j == 1 && i.k == 0)
            .unwrap();
        let v = basis_eval(&f, m, &[0], &[0.0]).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);

        // Ψ_{0,0} is the mother wavelet itself
        for x in [-0.7, 0.0, 0.3, 0.9] {
            let v = basis_eval(&f, 0, &[0], &[x]).unwrap();
            assert_eq!(v, mother_eval(MotherWavelet::MexicanHat, 0, x).unwrap());
        }
    }

    #[test]
    fn member_derivative_scaling() {
        let idx = FamilyIndex { j: 3, k: 2 };
        let x = 0.3;
        let h = 2f64.powi(-3) * 1e-4;
        let d = member_eval(MotherWavelet::Gaussian, idx, 1, x);
        let fd = (member_eval(MotherWavelet::Gaussian, idx, 0, x + h)
            - member_eval(MotherWavelet::Gaussian, idx, 0, x - h))
            / (2.0 * h);
        assert!(((d - fd) / d).abs() < 1e-5);
        let direct = 8.0 * 8f64.sqrt() * mother_eval(MotherWavelet::Gaussian, 1, 8.0 * x - 2.0).unwrap();
        assert_eq!(d, direct);
    }

    #[test]
    fn two_dimensional_members_are_separable() {
        let f = enumerate_family(
            MotherWavelet::Gaussian,
            &[(0.0, 1.0), (-1.0, 1.0)],
            &[ResolutionRange::new(0, 2), ResolutionRange::new(-1, 1)],
        )
        .unwrap();
        let p = [0.37, -0.21];
        for m in (0..f.len()).step_by(7) {
            let parts = f.member(m);
            for (ox, oy) in [(0u8, 0u8), (1, 0), (0, 2)] {
                let v = basis_eval(&f, m, &[ox, oy], &p).unwrap();
                let e = member_eval(f.mother, parts[0], ox, p[0]) * member_eval(f.mother, parts[1], oy, p[1]);
                assert_eq!(v, e);
            }
        }
    }
}
