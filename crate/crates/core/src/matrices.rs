//! Wavelet matrices: evaluations of every family member (and its
//! derivatives) at a fixed point set.
//!
//! Each one-dimensional factor is stored row by row, keeping for every
//! resolution level only the window of translates whose value is not exactly
//! zero. Gaussian tails underflow to `0.0` once `|2^j x − k|` exceeds about
//! 38.6, so the trimmed rows hold exactly the same numbers as the dense
//! matrix; only exact zeros are skipped. Two-dimensional
//! blocks are never materialised: entry `(i, m1·M2 + m2)` of block `(a, b)` is
//! `X_a[i, m1] · T_b[i, m2]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::basis::{member_eval, AxisFamily, MotherWavelet, MultiOrder, WaveletFamily, MAX_ORDER};
use crate::error::{Error, Result};
use crate::sampling::PointSet;

/// Points this far outside the domain box are still accepted.
pub const DOMAIN_TOLERANCE: f64 = 1e-12;

/// Past this distance (in dilated units) every mother wavelet evaluates to 0.0.
const SUPPORT_RADIUS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    col: u32,
    len: u32,
}

/// Row-major matrix storing, per row, contiguous runs of possibly-nonzero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimmedMatrix {
    rows: usize,
    cols: usize,
    row_segments: Vec<usize>,
    row_values: Vec<usize>,
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl TrimmedMatrix {
    fn with_capacity(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_segments: vec![0],
            row_values: vec![0],
            segments: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push_segment(&mut self, col: usize, vals: &[f64]) {
        // drop exact zeros at both ends
        let Some(first) = vals.iter().position(|&v| v != 0.0) else {
            return;
        };
        let last = vals.iter().rposition(|&v| v != 0.0).unwrap();
        self.segments.push(Segment {
            col: (col + first) as u32,
            len: (last + 1 - first) as u32,
        });
        self.values.extend_from_slice(&vals[first..=last]);
    }

    fn finish_row(&mut self) {
        self.row_segments.push(self.segments.len());
        self.row_values.push(self.values.len());
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Stored (possibly nonzero) entries.
    pub fn stored(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn row_parts(&self, i: usize) -> (&[Segment], &[f64]) {
        (
            &self.segments[self.row_segments[i]..self.row_segments[i + 1]],
            &self.values[self.row_values[i]..self.row_values[i + 1]],
        )
    }

    /// `Σ_m A[i, m] · c[m]`.
    #[inline]
    pub fn row_dot(&self, i: usize, c: &[f64]) -> f64 {
        let (segs, vals) = self.row_parts(i);
        let mut acc = 0.0;
        let mut off = 0;
        for s in segs {
            let n = s.len as usize;
            let col = s.col as usize;
            acc += dot(&vals[off..off + n], &c[col..col + n]);
            off += n;
        }
        acc
    }

    /// `out[m] += alpha · A[i, m]`.
    #[inline]
    pub fn row_axpy(&self, i: usize, alpha: f64, out: &mut [f64]) {
        let (segs, vals) = self.row_parts(i);
        let mut off = 0;
        for s in segs {
            let n = s.len as usize;
            let col = s.col as usize;
            for (o, v) in out[col..col + n].iter_mut().zip(&vals[off..off + n]) {
                *o += alpha * v;
            }
            off += n;
        }
    }

    pub fn entry(&self, i: usize, m: usize) -> f64 {
        let (segs, vals) = self.row_parts(i);
        let mut off = 0;
        for s in segs {
            let (col, n) = (s.col as usize, s.len as usize);
            if (col..col + n).contains(&m) {
                return vals[off + m - col];
            }
            off += n;
        }
        0.0
    }

    /// Writes row `i` into the dense slice `out` (length `cols`).
    pub fn row_dense(&self, i: usize, out: &mut [f64]) {
        out.fill(0.0);
        let (segs, vals) = self.row_parts(i);
        let mut off = 0;
        for s in segs {
            let (col, n) = (s.col as usize, s.len as usize);
            out[col..col + n].copy_from_slice(&vals[off..off + n]);
            off += n;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (i, row) in out.chunks_exact_mut(self.cols.max(1)).enumerate().take(self.rows) {
            self.row_dense(i, row);
        }
        out
    }

    pub fn matvec(&self, c: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| self.row_dot(i, c)).collect()
    }

    /// `out += Aᵀ w`.
    pub fn matvec_transpose_acc(&self, w: &[f64], out: &mut [f64]) {
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                self.row_axpy(i, wi, out);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorise without reassociating
    let mut s = [0.0; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for l in 0..4 {
            s[l] += a[4 * k + l] * b[4 * k + l];
        }
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Assembles the one-dimensional factor `d^order/dx^order Ψ_m(x_i)` for one axis.
pub fn assemble_axis(mother: MotherWavelet, axis: &AxisFamily, xs: &[f64], order: u8) -> TrimmedMatrix {
    let mut mat = TrimmedMatrix::with_capacity(xs.len(), axis.len());
    let mut scratch = Vec::new();
    for &x in xs {
        for lvl in 0..axis.levels() {
            let (start, end) = (axis.level_offsets[lvl], axis.level_offsets[lvl + 1]);
            if start == end {
                continue;
            }
            let first = axis.indices[start];
            let last_k = axis.indices[end - 1].k;
            let centre = 2f64.powi(first.j) * x;
            let lo = ((centre - SUPPORT_RADIUS).ceil() as i64).max(first.k);
            let hi = ((centre + SUPPORT_RADIUS).floor() as i64).min(last_k);
            if lo > hi {
                continue;
            }
            scratch.clear();
            scratch.extend((lo..=hi).map(|k| {
                member_eval(mother, crate::basis::FamilyIndex { j: first.j, k }, order, x)
            }));
            mat.push_segment(start + (lo - first.k) as usize, &scratch);
        }
        mat.finish_row();
    }
    mat
}

/// The non-trainable reconstruction weights for one point set.
#[derive(Debug, Clone)]
pub struct BasisMatrices {
    family: WaveletFamily,
    points: PointSet,
    orders: Vec<MultiOrder>,
    /// Per axis: derivative order → factor matrix.
    factors: Vec<BTreeMap<u8, TrimmedMatrix>>,
    /// Dense copies of the first-axis factors, used for 2D products.
    dense_first: BTreeMap<u8, Vec<f64>>,
}

fn check_orders(family: &WaveletFamily, orders: &[MultiOrder]) -> Result<()> {
    for o in orders {
        if o.len() != family.dim() {
            return Err(Error::shape("derivative multi-order", family.dim(), o.len()));
        }
        if o.iter().any(|&v| v > MAX_ORDER) {
            return Err(Error::config(format!("derivative order {o:?} is not supported")));
        }
    }
    Ok(())
}

/// Assembles every block in `required_orders` at `points`.
pub fn assemble(family: &WaveletFamily, points: &PointSet, required_orders: &[MultiOrder]) -> Result<BasisMatrices> {
    if points.dim != family.dim() {
        return Err(Error::shape("point dimension", family.dim(), points.dim));
    }
    check_orders(family, required_orders)?;
    let domain = family.domain();
    for p in points.iter() {
        let inside = p
            .iter()
            .zip(&domain)
            .all(|(&x, &(a, b))| x.is_finite() && x >= a - DOMAIN_TOLERANCE && x <= b + DOMAIN_TOLERANCE);
        if !inside {
            return Err(Error::Domain {
                point: p.to_vec(),
                domain: domain.clone(),
            });
        }
    }
    let mut orders: Vec<MultiOrder> = required_orders.to_vec();
    orders.sort();
    orders.dedup();

    let factors: Vec<BTreeMap<u8, TrimmedMatrix>> = family
        .axes
        .iter()
        .enumerate()
        .map(|(d, axis)| {
            let xs: Vec<f64> = points.iter().map(|p| p[d]).collect();
            let mut needed: Vec<u8> = orders.iter().map(|o| o[d]).collect();
            needed.sort();
            needed.dedup();
            needed
                .into_iter()
                .map(|o| (o, assemble_axis(family.mother, axis, &xs, o)))
                .collect()
        })
        .collect();
    let dense_first = if family.dim() == 2 {
        factors[0].iter().map(|(&o, m)| (o, m.to_dense())).collect()
    } else {
        BTreeMap::new()
    };
    Ok(BasisMatrices {
        family: family.clone(),
        points: points.clone(),
        orders,
        factors,
        dense_first,
    })
}

impl BasisMatrices {
    pub fn family(&self) -> &WaveletFamily {
        &self.family
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn orders(&self) -> &[MultiOrder] {
        &self.orders
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn n_members(&self) -> usize {
        self.family.len()
    }

    pub fn has_order(&self, order: &[u8]) -> bool {
        self.orders.iter().any(|o| o.as_slice() == order)
    }

    fn require(&self, order: &[u8]) -> Result<()> {
        if self.has_order(order) {
            Ok(())
        } else {
            Err(Error::config(format!("derivative order {order:?} was not assembled")))
        }
    }

    /// The one-dimensional factor for `axis` and derivative `order`.
    pub fn factor(&self, axis: usize, order: u8) -> &TrimmedMatrix {
        &self.factors[axis][&order]
    }

    /// Entry `(i, m)` of the block for `order`.
    pub fn entry(&self, order: &[u8], i: usize, m: usize) -> f64 {
        let parts = self.family.split_index(m);
        parts
            .iter()
            .enumerate()
            .map(|(d, &md)| self.factors[d][&order[d]].entry(i, md))
            .product()
    }

    /// Dense row-major `N × M` copy of one block.
    pub fn dense_block(&self, order: &[u8]) -> Result<Vec<f64>> {
        self.require(order)?;
        let (n, m) = (self.n_points(), self.n_members());
        if self.family.dim() == 1 {
            return Ok(self.factors[0][&order[0]].to_dense());
        }
        let fx = &self.factors[0][&order[0]];
        let ft = &self.factors[1][&order[1]];
        let (m1, m2) = (fx.cols(), ft.cols());
        let mut out = vec![0.0; n * m];
        let mut rx = vec![0.0; m1];
        let mut rt = vec![0.0; m2];
        for i in 0..n {
            fx.row_dense(i, &mut rx);
            ft.row_dense(i, &mut rt);
            let row = &mut out[i * m..(i + 1) * m];
            for (a, &x) in rx.iter().enumerate() {
                for (b, &t) in rt.iter().enumerate() {
                    row[a * m2 + b] = x * t;
                }
            }
        }
        Ok(out)
    }

    /// Jets `Block_o · c` for several orders at once (no bias added).
    pub fn apply_many(&self, orders: &[MultiOrder], c: &[f64]) -> Result<Vec<Vec<f64>>> {
        if c.len() != self.n_members() {
            return Err(Error::shape("coefficient vector", self.n_members(), c.len()));
        }
        for o in orders {
            self.require(o)?;
        }
        if self.family.dim() == 1 {
            return Ok(orders.iter().map(|o| self.factors[0][&o[0]].matvec(c)).collect());
        }
        let n = self.n_points();
        let m1 = self.family.axes[0].len();
        let m2 = self.family.axes[1].len();
        let mut out = vec![Vec::new(); orders.len()];
        let mut firsts: Vec<u8> = orders.iter().map(|o| o[0]).collect();
        firsts.sort();
        firsts.dedup();
        let mut prod = vec![0.0; n * m2];
        for a in firsts {
            gemm(n, m1, m2, &self.dense_first[&a], false, c, &mut prod, 0.0);
            for (slot, o) in orders.iter().enumerate().filter(|(_, o)| o[0] == a) {
                let ft = &self.factors[1][&o[1]];
                out[slot] = (0..n).map(|i| ft.row_dot(i, &prod[i * m2..(i + 1) * m2])).collect();
            }
        }
        Ok(out)
    }

    /// `grad += Σ_o Block_oᵀ · weights[o]`.
    pub fn accumulate_transpose_many(&self, orders: &[MultiOrder], weights: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.n_members() {
            return Err(Error::shape("gradient vector", self.n_members(), grad.len()));
        }
        for (o, w) in orders.iter().zip(weights) {
            self.require(o)?;
            if w.len() != self.n_points() {
                return Err(Error::shape("weight vector", self.n_points(), w.len()));
            }
        }
        if self.family.dim() == 1 {
            for (o, w) in orders.iter().zip(weights) {
                self.factors[0][&o[0]].matvec_transpose_acc(w, grad);
            }
            return Ok(());
        }
        let n = self.n_points();
        let m1 = self.family.axes[0].len();
        let m2 = self.family.axes[1].len();
        let mut firsts: Vec<u8> = orders.iter().map(|o| o[0]).collect();
        firsts.sort();
        firsts.dedup();
        let mut g = vec![0.0; n * m2];
        for a in firsts {
            g.fill(0.0);
            for (o, w) in orders.iter().zip(weights).filter(|(o, _)| o[0] == a) {
                let ft = &self.factors[1][&o[1]];
                for (i, &wi) in w.iter().enumerate() {
                    if wi != 0.0 {
                        ft.row_axpy(i, wi, &mut g[i * m2..(i + 1) * m2]);
                    }
                }
            }
            // grad (M1 × M2) += X_aᵀ (M1 × N) · G (N × M2)
            gemm(m1, n, m2, &self.dense_first[&a], true, &g, grad, 1.0);
        }
        Ok(())
    }

    /// Writes the block contents to a little-endian binary cache.
    ///
    /// Layout: magic `WSBM`, then `u64` N, `u64` M, `u64` block count, and
    /// for each block its `u64` order length, the order bytes, and `N·M`
    /// `f64` values row-major.
    pub fn save_dense(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"WSBM");
        buf.extend_from_slice(&(self.n_points() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_members() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.orders.len() as u64).to_le_bytes());
        for o in &self.orders {
            buf.extend_from_slice(&(o.len() as u64).to_le_bytes());
            buf.extend_from_slice(o);
            for v in self.dense_block(o)? {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// Reads a cache written by [`BasisMatrices::save_dense`]: `(N, M, blocks)`.
pub fn load_dense(path: &Path) -> Result<(usize, usize, Vec<(MultiOrder, Vec<f64>)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format {
        path: path.to_path_buf(),
        message: "truncated or missing WSBM header".to_string(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok_or_else(bad)? != b"WSBM" {
        return Err(bad());
    }
    let n = cur.u64().ok_or_else(bad)?;
    let m = cur.u64().ok_or_else(bad)?;
    let count = cur.u64().ok_or_else(bad)?;
    let mut blocks = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let len = cur.u64().ok_or_else(bad)?;
        let order = cur.take(len).ok_or_else(bad)?.to_vec();
        let raw = cur.take(n * m * 8).ok_or_else(bad)?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((order, vals));
    }
    Ok((n, m, blocks))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<usize> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?) as usize)
    }
}

/// `c = A·B + beta·c` with `A` (`m × k`, or its transpose stored `k × m`) and `B` (`k × n`), all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_transposed: bool, b: &[f64], c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    // SAFETY: slices are sized m·k, k·n and m·n by every caller; strides
    // describe row-major layouts that stay inside them.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Field values `Block_order · c`, plus `bias` on the zero-order block only.
pub fn reconstruct(matrices: &BasisMatrices, c: &[f64], bias: f64, order: &[u8]) -> Result<Vec<f64>> {
    let mut out = matrices
        .apply_many(&[order.to_vec()], c)?
        .pop()
        .expect("one order requested");
    if order.iter().all(|&o| o == 0) {
        for v in &mut out {
            *v += bias;
        }
    }
    Ok(out)
}
