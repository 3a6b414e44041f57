//! Reference solvers for the benchmarks without closed-form solutions.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Nodal solution on a one-dimensional mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Largest nodal residual of the discrete equations at the returned solution.
    /// Newton runs until this is below 10⁻¹⁰, or until round-off stops progress
    /// with the row-scaled residual below 10⁻¹⁰.
    pub residual: f64,
}

/// Piecewise-linear interpolation on sorted nodes, clamped at the ends.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + t * (ys[i + 1] - ys[i])
}

/// Piecewise-uniform mesh on `[0, 1]` with `n/4` cells in each layer of width
/// `sigma` and `n/2` cells in between.
pub fn shishkin_mesh(n: usize, sigma: f64) -> Vec<f64> {
    let q = n / 4;
    let mid = n - 2 * q;
    let mut x = Vec::with_capacity(n + 1);
    for i in 0..q {
        x.push(sigma * i as f64 / q as f64);
    }
    for i in 0..mid {
        x.push(sigma + (1.0 - 2.0 * sigma) * i as f64 / mid as f64);
    }
    for i in 0..=q {
        x.push(1.0 - sigma + sigma * i as f64 / q as f64);
    }
    x
}

/// Transition point `min(1/4, 2√ε ln n)`.
pub fn shishkin_transition(eps: f64, n: usize) -> f64 {
    (2.0 * eps.sqrt() * (n as f64).ln()).min(0.25)
}

/// Solves a tridiagonal system in place (`a` sub-, `b` main, `c` super-diagonal).
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64]) -> Result<()> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut beta = b[0];
    if beta == 0.0 {
        return Err(Error::Numeric("zero pivot in tridiagonal solve".into()));
    }
    d[0] /= beta;
    for i in 1..n {
        cp[i - 1] = c[i - 1] / beta;
        beta = b[i] - a[i] * cp[i - 1];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::Numeric("zero pivot in tridiagonal solve".into()));
        }
        d[i] = (d[i] - a[i] * d[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        d[i] -= cp[i] * d[i + 1];
    }
    Ok(())
}

const NEUMANN_LEFT: f64 = 0.479_425_538_604_203; // sin(0.5)

/// Discrete equations of `−εu″ + u⁵ + 3u − 1 = 0` with `u′(0) = sin 0.5`,
/// `u′(1) = e^{−0.7}`: returns the residual vector and the Jacobian as three
/// bands plus the extra entries of the one-sided boundary rows.
struct BvpSystem<'a> {
    x: &'a [f64],
    eps: f64,
    right: f64,
}

impl BvpSystem<'_> {
    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let (x, n) = (self.x, self.x.len() - 1);
        let mut f = vec![0.0; n + 1];
        let h0 = x[1] - x[0];
        f[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h0) - NEUMANN_LEFT;
        for i in 1..n {
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            let d2 = 2.0 / (hl + hr) * ((u[i + 1] - u[i]) / hr - (u[i] - u[i - 1]) / hl);
            f[i] = -self.eps * d2 + u[i].powi(5) + 3.0 * u[i] - 1.0;
        }
        let hn = x[n] - x[n - 1];
        f[n] = (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2]) / (2.0 * hn) - self.right;
        f
    }

    /// Newton direction `J δ = −F`, with the boundary rows reduced to
    /// tridiagonal form using their neighbouring interior rows.
    fn newton_step(&self, u: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        let (x, n) = (self.x, self.x.len() - 1);
        let mut a = vec![0.0; n + 1];
        let mut b = vec![0.0; n + 1];
        let mut c = vec![0.0; n + 1];
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        for i in 1..n {
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            let s = 2.0 * self.eps / (hl + hr);
            a[i] = -s / hl;
            c[i] = -s / hr;
            b[i] = s / hl + s / hr + 5.0 * u[i].powi(4) + 3.0;
        }
        // row 0: (−3, 4, −1)/(2h); eliminate the u2 entry with row 1
        let h0 = x[1] - x[0];
        let (r0, r1, r2) = (-3.0 / (2.0 * h0), 4.0 / (2.0 * h0), -1.0 / (2.0 * h0));
        let m = r2 / c[1];
        b[0] = r0 - m * a[1];
        c[0] = r1 - m * b[1];
        rhs[0] -= m * rhs[1];
        // row n: (1, −4, 3)/(2h) on (u_{n−2}, u_{n−1}, u_n); eliminate u_{n−2}
        let hn = x[n] - x[n - 1];
        let (s2, s1, s0) = (1.0 / (2.0 * hn), -4.0 / (2.0 * hn), 3.0 / (2.0 * hn));
        let m = s2 / a[n - 1];
        a[n] = s1 - m * b[n - 1];
        b[n] = s0 - m * c[n - 1];
        rhs[n] -= m * rhs[n - 1];
        thomas(&a, &b, &c, &mut rhs)?;
        Ok(rhs)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Size of the leading coefficient of each discrete equation, so that the
/// stopping test is not limited by round-off in `εu″` on fine meshes.
fn row_scales(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() - 1;
    let mut s = vec![0.0; n + 1];
    s[0] = 2.0 / (x[1] - x[0]);
    s[n] = 2.0 / (x[n] - x[n - 1]);
    for i in 1..n {
        let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
        s[i] = 2.0 * eps / (hl * hr) + 1.0;
    }
    s
}

fn scaled_norm(f: &[f64], scales: &[f64]) -> f64 {
    f.iter().zip(scales).fold(0.0, |m, (v, s)| m.max((v / s).abs()))
}

/// Real root of `u⁵ + 3u − 1` (the reduced problem away from the layers).
pub fn reduced_root() -> f64 {
    let mut u: f64 = 1.0 / 3.0;
    for _ in 0..50 {
        let f = u.powi(5) + 3.0 * u - 1.0;
        u -= f / (5.0 * u.powi(4) + 3.0);
    }
    u
}

/// Finite-difference solution of the Neumann BVP on a Shishkin mesh.
pub fn solve_bvp_fd(eps: f64, n_cells: usize) -> Result<GridSolution> {
    solve_bvp_fd_on(eps, &shishkin_mesh(n_cells, shishkin_transition(eps, n_cells)), n_cells)
}

fn solve_bvp_fd_on(eps: f64, x: &[f64], n_cells: usize) -> Result<GridSolution> {
    if n_cells < 64 || n_cells % 4 != 0 {
        return Err(Error::config("the BVP oracle needs at least 64 cells, a multiple of 4"));
    }
    if !(eps > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let sys = BvpSystem {
        x,
        eps,
        right: (-0.7f64).exp(),
    };
    let scales = row_scales(x, eps);
    let mut u = vec![reduced_root(); x.len()];
    let mut f = sys.residual(&u);
    let mut norm = inf_norm(&f);
    let done = |u: Vec<f64>, f: &[f64]| GridSolution {
        x: x.to_vec(),
        residual: inf_norm(f),
        u,
    };
    for _ in 0..50 {
        if norm < 1e-10 {
            return Ok(done(u, &f));
        }
        let delta = sys.newton_step(&u, &f)?;
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
            let ft = sys.residual(&trial);
            let nt = inf_norm(&ft);
            if nt < norm {
                u = trial;
                f = ft;
                norm = nt;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                // no further decrease: accept if only round-off remains
                if scaled_norm(&f, &scales) < 1e-10 {
                    return Ok(done(u, &f));
                }
                return Err(Error::Convergence {
                    what: "BVP Newton iteration".into(),
                    residual: norm,
                });
            }
        }
    }
    if norm < 1e-10 || scaled_norm(&f, &scales) < 1e-10 {
        return Ok(done(u, &f));
    }
    Err(Error::Convergence {
        what: "BVP Newton iteration".into(),
        residual: norm,
    })
}

/// Mesh-refinement study: solutions on `n` and `2n` cells sharing the coarse
/// transition point, and the largest change at shared nodes.
pub fn bvp_refinement(eps: f64, n_cells: usize) -> Result<(GridSolution, GridSolution, f64)> {
    let sigma = shishkin_transition(eps, n_cells);
    let coarse = solve_bvp_fd_on(eps, &shishkin_mesh(n_cells, sigma), n_cells)?;
    let fine = solve_bvp_fd_on(eps, &shishkin_mesh(2 * n_cells, sigma), 2 * n_cells)?;
    let change = coarse
        .u
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - fine.u[2 * i]).abs())
        .fold(0.0, f64::max);
    Ok((coarse, fine, change))
}

/// FitzHugh–Nagumo parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhnParams {
    pub a: f64,
    pub b: f64,
    pub i: f64,
    pub r: f64,
    pub tau: f64,
    pub v0: f64,
    pub w0: f64,
}

impl FhnParams {
    pub fn preset(tau: f64) -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            i: 0.1,
            r: 1.0,
            tau,
            v0: 0.5,
            w0: 0.1,
        }
    }

    /// `(v′, w′)` at a state.
    pub fn rhs(&self, v: f64, w: f64) -> (f64, f64) {
        (
            v - v * v * v / 3.0 - w + self.r * self.i,
            (v - self.b * w - self.a) / self.tau,
        )
    }
}

/// Trajectory sampled on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// Step used for the finest integration.
    pub step: f64,
    /// Largest change between the last two refinement levels.
    pub refinement_change: f64,
}

/// Backward Euler with `steps` equal steps, sampled at `grid` by linear interpolation.
fn backward_euler(p: &FhnParams, t_end: f64, steps: usize, grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = t_end / steps as f64;
    let mut ts = Vec::with_capacity(steps + 1);
    let mut vs = Vec::with_capacity(steps + 1);
    let mut ws = Vec::with_capacity(steps + 1);
    let (mut v, mut w) = (p.v0, p.w0);
    ts.push(0.0);
    vs.push(v);
    ws.push(w);
    for n in 1..=steps {
        let (vp, wp) = (v, w);
        // Newton on G(v, w) = (v − vp − h f, w − wp − h g)
        for _ in 0..50 {
            let (f, g) = p.rhs(v, w);
            let g1 = v - vp - h * f;
            let g2 = w - wp - h * g;
            if g1.abs().max(g2.abs()) < 1e-15 * (1.0 + v.abs() + w.abs()) {
                break;
            }
            let j11 = 1.0 - h * (1.0 - v * v);
            let j12 = h;
            let j21 = -h / p.tau;
            let j22 = 1.0 + h * p.b / p.tau;
            let det = j11 * j22 - j12 * j21;
            v -= (g1 * j22 - j12 * g2) / det;
            w -= (j11 * g2 - j21 * g1) / det;
        }
        if !(v.is_finite() && w.is_finite()) {
            return Err(Error::Numeric("FitzHugh–Nagumo integration".into()));
        }
        ts.push(n as f64 * h);
        vs.push(v);
        ws.push(w);
    }
    let sample = |ys: &[f64]| grid.iter().map(|&t| interpolate(&ts, ys, t)).collect();
    Ok((sample(&vs), sample(&ws)))
}

/// Stiff reference trajectory on a 10⁴-point uniform grid over `[0, t_end]`.
///
/// Backward Euler starts from the step `min(τ/20, 10⁻⁴)`. Pairs of runs at
/// `h` and `h/2` are combined by Richardson extrapolation, and `h` is halved
/// until two successive extrapolations agree to `tolerance`.
pub fn solve_fhn(params: &FhnParams, t_end: f64, tolerance: f64) -> Result<Trajectory> {
    if !(params.tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    let n_grid = 10_000;
    let grid: Vec<f64> = (0..n_grid).map(|i| t_end * i as f64 / (n_grid - 1) as f64).collect();
    let h0 = (params.tau / 20.0).min(1e-4);
    let mut steps = (t_end / h0).ceil() as usize;
    let extrapolate = |steps: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let (v1, w1) = backward_euler(params, t_end, steps, &grid)?;
        let (v2, w2) = backward_euler(params, t_end, 2 * steps, &grid)?;
        Ok((
            v2.iter().zip(&v1).map(|(a, b)| 2.0 * a - b).collect(),
            w2.iter().zip(&w1).map(|(a, b)| 2.0 * a - b).collect(),
        ))
    };
    let mut prev = extrapolate(steps)?;
    let mut change = f64::INFINITY;
    for _ in 0..8 {
        steps *= 2;
        let next = extrapolate(steps)?;
        change = prev
            .0
            .iter()
            .zip(&next.0)
            .chain(prev.1.iter().zip(&next.1))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        prev = next;
        if change < tolerance {
            return Ok(Trajectory {
                t: grid,
                v: prev.0,
                w: prev.1,
                step: t_end / (2 * steps) as f64,
                refinement_change: change,
            });
        }
    }
    Err(Error::Convergence {
        what: "FitzHugh–Nagumo step halving".into(),
        residual: change,
    })
}

/// Space-time solution on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeSolution {
    /// Grid nodes including both `x = −1` and `x = 1`.
    pub x: Vec<f64>,
    /// Output times.
    pub t: Vec<f64>,
    /// `u[time][node]`.
    pub u: Vec<Vec<f64>>,
    /// Relative L2 change against the previous refinement level.
    pub refinement_change: f64,
}

impl SpaceTimeSolution {
    /// Bilinear interpolation at `(x, t)`.
    pub fn sample(&self, x: f64, t: f64) -> f64 {
        let k = if t >= *self.t.last().unwrap() {
            self.t.len() - 2
        } else {
            self.t.partition_point(|&s| s <= t).saturating_sub(1).min(self.t.len() - 2)
        };
        let s = ((t - self.t[k]) / (self.t[k + 1] - self.t[k])).clamp(0.0, 1.0);
        let a = interpolate(&self.x, &self.u[k], x);
        let b = interpolate(&self.x, &self.u[k + 1], x);
        a + s * (b - a)
    }
}

/// Solves `(1 + 2r) y_j − r (y_{j−1} + y_{j+1}) = d_j` with periodic wrap.
fn cyclic_solve(r: f64, d: &mut [f64]) -> Result<()> {
    let n = d.len();
    // Sherman–Morrison on the tridiagonal part with corner corrections
    let diag = 1.0 + 2.0 * r;
    let gamma = -diag;
    let (alpha, beta) = (-r, -r);
    let mut b = vec![diag; n];
    b[0] = diag - gamma;
    b[n - 1] = diag - alpha * beta / gamma;
    let a = vec![-r; n];
    let c = vec![-r; n];
    thomas(&a, &b, &c, d)?;
    let mut z = vec![0.0; n];
    z[0] = gamma;
    z[n - 1] = alpha;
    thomas(&a, &b, &c, &mut z)?;
    let fact = (d[0] + beta * d[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    for (di, zi) in d.iter_mut().zip(&z) {
        *di -= fact * zi;
    }
    Ok(())
}

fn allen_cahn_run(eps: f64, n_x: usize, n_t: usize, n_out: usize) -> Result<SpaceTimeSolution> {
    let dx = 2.0 / n_x as f64;
    let dt = 1.0 / n_t as f64;
    let r = eps * dt / (dx * dx);
    let x: Vec<f64> = (0..=n_x).map(|j| -1.0 + j as f64 * dx).collect();
    let mut u: Vec<f64> = x[..n_x].iter().map(|&x| x * x * (std::f64::consts::PI * x).cos()).collect();
    let every = n_t / (n_out - 1);
    let close = |u: &[f64]| {
        let mut row = u.to_vec();
        row.push(u[0]);
        row
    };
    let mut out = vec![close(&u)];
    let mut t = vec![0.0];
    for step in 1..=n_t {
        for v in u.iter_mut() {
            *v += dt * (5.0 * *v - 5.0 * *v * *v * *v);
        }
        cyclic_solve(r, &mut u)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("Allen–Cahn time stepping".into()));
        }
        if step % every == 0 {
            out.push(close(&u));
            t.push(step as f64 * dt);
        }
    }
    Ok(SpaceTimeSolution {
        x,
        t,
        u: out,
        refinement_change: f64::NAN,
    })
}

/// IMEX Euler (implicit diffusion, explicit reaction) on a periodic grid with
/// output every 0.01 in time. The solution is recomputed with the spatial and
/// temporal steps halved; the returned value is the finer run and the
/// relative L2 change between the two.
pub fn solve_allen_cahn(eps: f64, n_x: usize, n_t: usize) -> Result<SpaceTimeSolution> {
    if n_x < 256 {
        return Err(Error::config("the Allen–Cahn oracle needs at least 256 grid cells"));
    }
    if n_t % 100 != 0 {
        return Err(Error::config("the number of time steps must be a multiple of 100"));
    }
    let coarse = allen_cahn_run(eps, n_x, n_t, 101)?;
    let mut fine = allen_cahn_run(eps, 2 * n_x, 2 * n_t, 101)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (rc, rf) in coarse.u.iter().zip(&fine.u) {
        for (j, &v) in rc.iter().enumerate() {
            let w = rf[2 * j];
            num += (v - w) * (v - w);
            den += w * w;
        }
    }
    fine.refinement_change = (num / den).sqrt();
    if fine.refinement_change >= 1e-3 {
        return Err(Error::Convergence {
            what: "Allen–Cahn grid refinement".into(),
            residual: fine.refinement_change,
        });
    }
    Ok(fine)
}

/// Writes `columns` (equal lengths) under `header` as CSV with 17 significant digits.
pub fn write_csv(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        let row: Vec<String> = columns.iter().map(|c| format!("{:.16e}", c[i])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_csv`] back into columns.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.into(),
            message: "empty file".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (ln, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != header.len() {
            return Err(Error::Format {
                path: path.into(),
                message: format!("line {} has {} fields", ln + 2, vals.len()),
            });
        }
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v.trim().parse().map_err(|_| Error::Format {
                path: path.into(),
                message: format!("bad number `{v}` on line {}", ln + 2),
            })?);
        }
    }
    Ok((header, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_root_value() {
        let u = reduced_root();
        assert!((u.powi(5) + 3.0 * u - 1.0).abs() < 1e-15);
        assert!((u - 0.33198).abs() < 1e-5);
    }

    #[test]
    fn mesh_layout() {
        let x = shishkin_mesh(64, 0.1);
        assert_eq!(x.len(), 65);
        assert_eq!(x[0], 0.0);
        assert!((x[16] - 0.1).abs() < 1e-15);
        assert!((x[48] - 0.9).abs() < 1e-15);
        assert!((x[64] - 1.0).abs() < 1e-15);
        assert!(x.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(shishkin_transition(1.0, 64), 0.25);
    }

    #[test]
    fn bvp_converges_and_satisfies_its_equations() {
        for eps in [1.0, 2f64.powi(-4), 2f64.powi(-10)] {
            let s = solve_bvp_fd(eps, 1024).unwrap();
            assert!(s.residual < 1e-9, "eps {eps}: {}", s.residual);
            assert!(s.u.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bvp_small_eps_interior_is_reduced_root() {
        let s = solve_bvp_fd(2f64.powi(-10), 1024).unwrap();
        let mid = interpolate(&s.x, &s.u, 0.5);
        assert!((mid - reduced_root()).abs() < 1e-6, "{mid}");
    }

    #[test]
    fn bvp_eps_one_stays_near_reduced_root() {
        // with ε = 1 the Neumann data only tilts the solution around u*
        let s = solve_bvp_fd(1.0, 256).unwrap();
        let mean = s.u.iter().sum::<f64>() / s.u.len() as f64;
        assert!((mean - reduced_root()).abs() < 0.1, "{mean}");
    }

    #[test]
    fn bvp_second_order_refinement() {
        let eps = 2f64.powi(-10);
        let mut changes = Vec::new();
        for n in [128usize, 256, 512] {
            let (_, _, change) = bvp_refinement(eps, n).unwrap();
            let ln = (n as f64).ln();
            changes.push(change / (ln * ln / (n * n) as f64));
        }
        // the scaled change stays bounded
        assert!(changes[2] < 2.0 * changes[0], "{changes:?}");
        assert!(changes.iter().all(|c| *c < 50.0), "{changes:?}");
    }

    #[test]
    fn bvp_rejects_small_mesh() {
        assert!(matches!(solve_bvp_fd(0.1, 32), Err(Error::Config(_))));
    }

    #[test]
    fn fhn_initial_derivative() {
        let p = FhnParams::preset(2f64.powi(-10));
        let (dv, dw) = p.rhs(p.v0, p.w0);
        assert!((dv - (0.5 - 0.125 / 3.0)).abs() < 1e-15);
        assert!((dw - (0.5 - 0.1 - 1.0) / p.tau).abs() < 1e-9);
    }

    #[test]
    fn fhn_stiff_trajectory() {
        let p = FhnParams::preset(2f64.powi(-10));
        let tr = solve_fhn(&p, 1.0, 1e-6).unwrap();
        assert_eq!(tr.t.len(), 10_000);
        assert!(tr.refinement_change < 1e-6);
        assert!(tr.v.iter().chain(&tr.w).all(|v| v.is_finite()));
        assert!(tr.v.iter().all(|v| v.abs() <= 3.0));
        let t5 = 5.0 * p.tau;
        let v = interpolate(&tr.t, &tr.v, t5);
        let w = interpolate(&tr.t, &tr.w, t5);
        assert!((w - (v - p.a)).abs() < 1e-2, "{w} vs {}", v - p.a);
        // initial layer: w moves far within a few τ
        assert!((interpolate(&tr.t, &tr.w, 0.0) - 0.1).abs() < 1e-12);
        assert!(w < -0.3);
    }

    #[test]
    fn fhn_matches_explicit_fine_integration() {
        // classical RK4 with a very small step as an independent check
        let p = FhnParams::preset(0.15);
        let tr = solve_fhn(&p, 1.0, 1e-7).unwrap();
        let steps = 200_000;
        let h = 1.0 / steps as f64;
        let (mut v, mut w) = (p.v0, p.w0);
        for _ in 0..steps {
            let k1 = p.rhs(v, w);
            let k2 = p.rhs(v + 0.5 * h * k1.0, w + 0.5 * h * k1.1);
            let k3 = p.rhs(v + 0.5 * h * k2.0, w + 0.5 * h * k2.1);
            let k4 = p.rhs(v + h * k3.0, w + h * k3.1);
            v += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            w += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        assert!((tr.v.last().unwrap() - v).abs() < 1e-6);
        assert!((tr.w.last().unwrap() - w).abs() < 1e-6);
    }

    #[test]
    fn cyclic_solver_inverts_the_operator() {
        let n = 17;
        let r = 0.37;
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 0.1 * i as f64).collect();
        let mut d: Vec<f64> = (0..n)
            .map(|j| (1.0 + 2.0 * r) * y[j] - r * (y[(j + n - 1) % n] + y[(j + 1) % n]))
            .collect();
        cyclic_solve(r, &mut d).unwrap();
        for (a, b) in d.iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn allen_cahn_reference() {
        let s = solve_allen_cahn(1e-4, 512, 2000).unwrap();
        assert_eq!(s.t.len(), 101);
        assert!(s.refinement_change < 1e-3, "{}", s.refinement_change);
        for (x, u) in s.x.iter().zip(&s.u[0]) {
            assert!((u - x * x * (std::f64::consts::PI * x).cos()).abs() < 1e-15);
        }
        for row in &s.u {
            assert_eq!(row[0], *row.last().unwrap());
            assert!(row.iter().all(|v| v.abs() <= 1.1));
        }
        assert!((s.sample(0.3, 0.0) - 0.09 * (0.3 * std::f64::consts::PI).cos()).abs() < 1e-4);
    }

    #[test]
    fn allen_cahn_rejects_coarse_grid() {
        assert!(solve_allen_cahn(1e-4, 128, 1000).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.csv");
        let x = [0.0, 0.1, 1.0 / 3.0];
        let u = [1.0, -2.5e-300, std::f64::consts::PI];
        write_csv(&path, &["x", "u"], &[&x, &u]).unwrap();
        let (h, cols) = read_csv(&path).unwrap();
        assert_eq!(h, vec!["x", "u"]);
        assert_eq!(cols[0], x);
        assert_eq!(cols[1], u);
    }
}
