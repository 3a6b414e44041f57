//! Benchmark problem registry.
//!
//! Every equation is stored as `r = LHS − RHS` with the left-hand side as
//! usually printed, e.g. `advdiff` uses `r = εu″ + (1+ε)u′ + u`.
//! A residual reads a per-point jet: for each field, the values of the
//! derivative slots listed by [`ProblemSpec::slots`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::basis::{MotherWavelet, MultiOrder};
use crate::error::{Error, Result};
use crate::sampling::{uniform_grid, Geometry, PointSet};

pub const MAX_FIELDS: usize = 2;
pub const MAX_SLOTS: usize = 4;

/// `jet[field][slot]`.
pub type Jet = [[f64; MAX_SLOTS]; MAX_FIELDS];

/// Residual values per equation and `∂r_e/∂jet[field][slot]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Residual {
    pub r: [f64; MAX_FIELDS],
    pub dr: [[[f64; MAX_SLOTS]; MAX_FIELDS]; MAX_FIELDS],
}

pub const PROBLEM_NAMES: [&str; 8] = [
    "advdiff",
    "nonlinear_ivp",
    "neumann_bvp",
    "fhn",
    "heat2d",
    "helmholtz",
    "allen_cahn",
    "maxwell_homog",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ProblemKind {
    Advdiff,
    NonlinearIvp,
    NeumannBvp,
    Fhn { a: f64, b: f64, i: f64, r: f64 },
    Heat2d,
    Helmholtz { c: f64, b1: f64, b2: f64 },
    AllenCahn,
    MaxwellHomog { mu: f64, n: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Dirichlet,
    Neumann,
    InitialValue,
    InitialDerivative,
    PeriodicValue,
    PeriodicDerivative,
}

impl ConditionKind {
    pub fn is_initial(self) -> bool {
        matches!(self, ConditionKind::InitialValue | ConditionKind::InitialDerivative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// A single point.
    Point(Vec<f64>),
    /// All sampled boundary/initial points with `coord[axis] == value`.
    Edge { axis: usize, value: f64 },
    /// Points on the low wall of `axis` paired with their partners on the high wall.
    Pair { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Const(f64),
    /// The exact solution of the condition's field.
    Exact,
    /// `x² cos(πx)`.
    AllenCahnProfile,
}

/// One boundary or initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub kind: ConditionKind,
    pub field: usize,
    pub location: Location,
    /// Derivative multi-order the condition reads.
    pub order: MultiOrder,
    pub target: Target,
}

/// Paper hyperparameters for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    /// Resolution range per axis for the Gaussian family.
    pub resolutions_gaussian: Vec<(i32, i32)>,
    /// Resolution range per axis for the Mexican-hat family.
    pub resolutions_mexican: Vec<(i32, i32)>,
    pub depth: usize,
    pub width: usize,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_initial: usize,
    pub iterations: usize,
}

impl Preset {
    pub fn resolutions(&self, mother: MotherWavelet) -> &[(i32, i32)] {
        match mother {
            MotherWavelet::Gaussian => &self.resolutions_gaussian,
            MotherWavelet::MexicanHat => &self.resolutions_mexican,
        }
    }
}

/// A fully specified benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub kind: ProblemKind,
    pub geometry: Geometry,
    pub fields: usize,
    pub field_names: Vec<String>,
    /// Perturbation parameter: ε, τ for `fhn`, permittivity for `maxwell_homog`.
    pub epsilon: f64,
    pub slots: Vec<MultiOrder>,
    pub conditions: Vec<ConditionRecord>,
    pub preset: Preset,
}

fn preset_1d(g: (i32, i32), m: (i32, i32), depth: usize, width: usize, n: usize, iters: usize) -> Preset {
    Preset {
        resolutions_gaussian: vec![g],
        resolutions_mexican: vec![m],
        depth,
        width,
        n_interior: n,
        n_boundary: 0,
        n_initial: 0,
        iterations: iters,
    }
}

/// Tables for the 2D problems list one range per axis and no iteration count.
const ITERATIONS_2D: usize = 10_000;

fn preset_2d(jx: (i32, i32), jt: (i32, i32), width: usize, n: usize, nb: usize, ni: usize) -> Preset {
    Preset {
        resolutions_gaussian: vec![jx, jt],
        resolutions_mexican: vec![jx, jt],
        depth: 6,
        width,
        n_interior: n,
        n_boundary: nb,
        n_initial: ni,
        iterations: ITERATIONS_2D,
    }
}

fn cond(kind: ConditionKind, field: usize, location: Location, order: &[u8], target: Target) -> ConditionRecord {
    ConditionRecord {
        kind,
        field,
        location,
        order: order.to_vec(),
        target,
    }
}

/// Default perturbation parameter of each problem.
pub fn default_epsilon(name: &str) -> Result<f64> {
    Ok(match name {
        "advdiff" => 2f64.powi(-4),
        "nonlinear_ivp" | "neumann_bvp" | "fhn" => 2f64.powi(-10),
        "heat2d" => 0.15,
        "helmholtz" | "maxwell_homog" => 1.0,
        "allen_cahn" => 1e-4,
        other => return Err(Error::UnknownProblem(other.to_string())),
    })
}

/// Looks up a problem by name with an optional perturbation override.
pub fn get_problem(name: &str, epsilon: Option<f64>) -> Result<ProblemSpec> {
    use ConditionKind::*;
    let eps = match epsilon {
        Some(e) if !(e > 0.0 && e.is_finite()) => {
            return Err(Error::config(format!("epsilon must be positive, got {e}")))
        }
        Some(e) => e,
        None => default_epsilon(name)?,
    };
    let unit = (0.0, 1.0);
    let (kind, geometry, names, slots, conditions, preset): (_, _, &[&str], Vec<MultiOrder>, _, _) = match name {
        "advdiff" => (
            ProblemKind::Advdiff,
            Geometry::Interval { x: unit },
            &["u"],
            vec![vec![0], vec![1], vec![2]],
            vec![
                cond(Dirichlet, 0, Location::Point(vec![0.0]), &[0], Target::Const(0.0)),
                cond(Dirichlet, 0, Location::Point(vec![1.0]), &[0], Target::Const(1.0)),
            ],
            preset_1d((0, 9), (0, 8), 6, 100, 1_000, 20_000),
        ),
        "nonlinear_ivp" => (
            ProblemKind::NonlinearIvp,
            Geometry::TimeInterval { t: unit },
            &["u"],
            vec![vec![0], vec![1], vec![2]],
            vec![
                cond(InitialValue, 0, Location::Point(vec![0.0]), &[0], Target::Const(1.0)),
                cond(InitialDerivative, 0, Location::Point(vec![0.0]), &[1], Target::Const(1.0 / eps)),
            ],
            preset_1d((0, 10), (0, 9), 8, 200, 10_000, 20_000),
        ),
        "neumann_bvp" => (
            ProblemKind::NeumannBvp,
            Geometry::Interval { x: unit },
            &["u"],
            vec![vec![0], vec![2]],
            vec![
                cond(Neumann, 0, Location::Point(vec![0.0]), &[1], Target::Const(0.5f64.sin())),
                cond(Neumann, 0, Location::Point(vec![1.0]), &[1], Target::Const((-0.7f64).exp())),
            ],
            preset_1d((0, 9), (0, 8), 8, 200, 10_000, 10_000),
        ),
        "fhn" => (
            ProblemKind::Fhn {
                a: 1.0,
                b: 1.0,
                i: 0.1,
                r: 1.0,
            },
            Geometry::TimeInterval { t: unit },
            &["v", "w"],
            vec![vec![0], vec![1]],
            vec![
                cond(InitialValue, 0, Location::Point(vec![0.0]), &[0], Target::Const(0.5)),
                cond(InitialValue, 1, Location::Point(vec![0.0]), &[0], Target::Const(0.1)),
            ],
            preset_1d((0, 11), (0, 10), 10, 200, 10_000, 20_000),
        ),
        "heat2d" => (
            ProblemKind::Heat2d,
            Geometry::SpaceTime {
                x: (-1.0, 1.0),
                t: unit,
            },
            &["u"],
            vec![vec![2, 0], vec![0, 1]],
            vec![
                cond(Dirichlet, 0, Location::Edge { axis: 0, value: -1.0 }, &[0, 0], Target::Const(0.0)),
                cond(Dirichlet, 0, Location::Edge { axis: 0, value: 1.0 }, &[0, 0], Target::Const(0.0)),
                cond(InitialValue, 0, Location::Edge { axis: 1, value: 0.0 }, &[0, 0], Target::Exact),
            ],
            preset_2d((-3, 5), (-3, 5), 50, 10_000, 1_000, 500),
        ),
        "helmholtz" => (
            ProblemKind::Helmholtz {
                c: 1.0,
                b1: 1.0,
                b2: 8.0,
            },
            Geometry::Rectangle {
                x: (-1.0, 1.0),
                y: (-1.0, 1.0),
            },
            &["u"],
            vec![vec![0, 0], vec![2, 0], vec![0, 2]],
            [(0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0)]
                .into_iter()
                .map(|(axis, value)| cond(Dirichlet, 0, Location::Edge { axis, value }, &[0, 0], Target::Exact))
                .collect(),
            preset_2d((-4, 5), (-4, 5), 50, 10_000, 1_000, 0),
        ),
        "allen_cahn" => (
            ProblemKind::AllenCahn,
            Geometry::SpaceTime {
                x: (-1.0, 1.0),
                t: unit,
            },
            &["u"],
            vec![vec![0, 0], vec![2, 0], vec![0, 1]],
            vec![
                cond(PeriodicValue, 0, Location::Pair { axis: 0 }, &[0, 0], Target::Const(0.0)),
                cond(PeriodicDerivative, 0, Location::Pair { axis: 0 }, &[1, 0], Target::Const(0.0)),
                cond(InitialValue, 0, Location::Edge { axis: 1, value: 0.0 }, &[0, 0], Target::AllenCahnProfile),
            ],
            preset_2d((-5, 6), (-5, 5), 100, 20_000, 2_000, 1_000),
        ),
        "maxwell_homog" => (
            ProblemKind::MaxwellHomog { mu: 1.0, n: 4.0 },
            Geometry::SpaceTime { x: unit, t: unit },
            &["E_y", "H_z"],
            vec![vec![1, 0], vec![0, 1]],
            vec![
                cond(Dirichlet, 0, Location::Edge { axis: 0, value: 0.0 }, &[0, 0], Target::Const(0.0)),
                cond(Dirichlet, 0, Location::Edge { axis: 0, value: 1.0 }, &[0, 0], Target::Const(0.0)),
                cond(Neumann, 1, Location::Edge { axis: 0, value: 0.0 }, &[1, 0], Target::Const(0.0)),
                cond(Neumann, 1, Location::Edge { axis: 0, value: 1.0 }, &[1, 0], Target::Const(0.0)),
                cond(InitialValue, 0, Location::Edge { axis: 1, value: 0.0 }, &[0, 0], Target::Exact),
                cond(InitialValue, 1, Location::Edge { axis: 1, value: 0.0 }, &[0, 0], Target::Exact),
            ],
            preset_2d((-5, 5), (-5, 5), 50, 10_000, 500, 500),
        ),
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(ProblemSpec {
        name: name.to_string(),
        kind,
        geometry,
        fields: names.len(),
        field_names: names.iter().map(|s| s.to_string()).collect(),
        epsilon: eps,
        slots,
        conditions,
        preset,
    })
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }

    /// Every derivative order referenced by the residual or a condition.
    pub fn required_orders(&self) -> Vec<MultiOrder> {
        let mut v: Vec<MultiOrder> = self.slots.clone();
        v.push(vec![0; self.dim()]);
        v.extend(self.conditions.iter().map(|c| c.order.clone()));
        v.sort();
        v.dedup();
        v
    }

    /// Orders needed on the interior points.
    pub fn interior_orders(&self) -> Vec<MultiOrder> {
        self.slots.clone()
    }

    /// Residual and partials at one point. `jet` slots follow [`ProblemSpec::slots`].
    pub fn residual(&self, p: &[f64], jet: &Jet) -> Residual {
        let eps = self.epsilon;
        let mut out = Residual::default();
        match self.kind {
            ProblemKind::Advdiff => {
                let [u, u1, u2, _] = jet[0];
                out.r[0] = eps * u2 + (1.0 + eps) * u1 + u;
                out.dr[0][0] = [1.0, 1.0 + eps, eps, 0.0];
            }
            ProblemKind::NonlinearIvp => {
                let [u, u1, u2, _] = jet[0];
                let t = p[0];
                out.r[0] = eps * u2 + (3.0 + t) * u1 + u * u - u.sin() - self.forcing(p);
                out.dr[0][0] = [2.0 * u - u.cos(), 3.0 + t, eps, 0.0];
            }
            ProblemKind::NeumannBvp => {
                let [u, u2, _, _] = jet[0];
                let u4 = u * u * u * u;
                out.r[0] = -eps * u2 + u4 * u + 3.0 * u - 1.0;
                out.dr[0][0] = [5.0 * u4 + 3.0, -eps, 0.0, 0.0];
            }
            ProblemKind::Fhn { a, b, i, r } => {
                let [v, v1, _, _] = jet[0];
                let [w, w1, _, _] = jet[1];
                out.r[0] = v1 - v + v * v * v / 3.0 + w - r * i;
                out.dr[0][0] = [v * v - 1.0, 1.0, 0.0, 0.0];
                out.dr[0][1] = [1.0, 0.0, 0.0, 0.0];
                out.r[1] = eps * w1 - v + b * w + a;
                out.dr[1][0] = [-1.0, 0.0, 0.0, 0.0];
                out.dr[1][1] = [b, eps, 0.0, 0.0];
            }
            ProblemKind::Heat2d => {
                let [uxx, ut, _, _] = jet[0];
                out.r[0] = ut - uxx - self.forcing(p);
                out.dr[0][0] = [-1.0, 1.0, 0.0, 0.0];
            }
            ProblemKind::Helmholtz { c, .. } => {
                let [u, uxx, uyy, _] = jet[0];
                out.r[0] = uxx + uyy + c * c * u - self.forcing(p);
                out.dr[0][0] = [c * c, 1.0, 1.0, 0.0];
            }
            ProblemKind::AllenCahn => {
                let [u, uxx, ut, _] = jet[0];
                out.r[0] = ut - eps * uxx + 5.0 * u * u * u - 5.0 * u;
                out.dr[0][0] = [15.0 * u * u - 5.0, -eps, 1.0, 0.0];
            }
            ProblemKind::MaxwellHomog { mu, .. } => {
                let [ex, et, _, _] = jet[0];
                let [hx, ht, _, _] = jet[1];
                out.r[0] = et + hx / eps;
                out.dr[0][0] = [0.0, 1.0, 0.0, 0.0];
                out.dr[0][1] = [1.0 / eps, 0.0, 0.0, 0.0];
                out.r[1] = ht + ex / mu;
                out.dr[1][0] = [1.0 / mu, 0.0, 0.0, 0.0];
                out.dr[1][1] = [0.0, 1.0, 0.0, 0.0];
            }
        }
        out
    }

    /// Right-hand side `f` at a point (zero for homogeneous problems).
    pub fn forcing(&self, p: &[f64]) -> f64 {
        let eps = self.epsilon;
        match self.kind {
            ProblemKind::NonlinearIvp => {
                let t = p[0];
                let e = (-t / eps).exp();
                let u = 2.0 - e + t * t;
                let u1 = e / eps + 2.0 * t;
                let u2 = -e / (eps * eps) + 2.0;
                eps * u2 + (3.0 + t) * u1 + u * u - u.sin()
            }
            ProblemKind::Heat2d => {
                let (x, t) = (p[0], p[1]);
                let (g, g1) = heat_time_factor(t, eps);
                (1.0 - x * x) * g1 + 2.0 * g
            }
            ProblemKind::Helmholtz { c, b1, b2 } => {
                let k2 = (b1 * b1 + b2 * b2) * PI * PI;
                (c * c - k2) * (b1 * PI * p[0]).sin() * (b2 * PI * p[1]).sin()
            }
            _ => 0.0,
        }
    }

    pub fn has_exact(&self) -> bool {
        !matches!(
            self.kind,
            ProblemKind::NeumannBvp | ProblemKind::Fhn { .. } | ProblemKind::AllenCahn
        )
    }

    /// Exact field values at a point, when a closed form exists.
    pub fn exact(&self, p: &[f64]) -> Option<[f64; MAX_FIELDS]> {
        self.exact_jet(p).map(|j| {
            let mut v = [0.0; MAX_FIELDS];
            for (f, jf) in j.iter().enumerate() {
                v[f] = jf[MAX_SLOTS - 1];
            }
            v
        })
    }

    /// Analytic jet of the exact solution; the value itself is stored in the
    /// last slot so that problems whose residual omits `u` can still report it.
    pub fn exact_jet(&self, p: &[f64]) -> Option<Jet> {
        let eps = self.epsilon;
        let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        let set = |jet: &mut Jet, field: usize, pairs: &[(&[u8], f64)], value: f64| {
            for (order, v) in pairs {
                if let Some(s) = self.slots.iter().position(|o| o.as_slice() == *order) {
                    jet[field][s] = *v;
                }
            }
            jet[field][MAX_SLOTS - 1] = value;
        };
        match self.kind {
            ProblemKind::Advdiff => {
                let x = p[0];
                let d = (-1.0f64).exp() - (-1.0 / eps).exp();
                let (a, b) = ((-x).exp(), (-x / eps).exp());
                let u = (a - b) / d;
                set(
                    &mut jet,
                    0,
                    &[(&[0], u), (&[1], (-a + b / eps) / d), (&[2], (a - b / (eps * eps)) / d)],
                    u,
                );
            }
            ProblemKind::NonlinearIvp => {
                let t = p[0];
                let e = (-t / eps).exp();
                let u = 2.0 - e + t * t;
                set(
                    &mut jet,
                    0,
                    &[(&[0], u), (&[1], e / eps + 2.0 * t), (&[2], -e / (eps * eps) + 2.0)],
                    u,
                );
            }
            ProblemKind::Heat2d => {
                let (x, t) = (p[0], p[1]);
                let (g, g1) = heat_time_factor(t, eps);
                let s = 1.0 - x * x;
                set(&mut jet, 0, &[(&[0, 0], s * g), (&[2, 0], -2.0 * g), (&[0, 1], s * g1)], s * g);
            }
            ProblemKind::Helmholtz { b1, b2, .. } => {
                let u = (b1 * PI * p[0]).sin() * (b2 * PI * p[1]).sin();
                set(
                    &mut jet,
                    0,
                    &[
                        (&[0, 0], u),
                        (&[2, 0], -(b1 * PI).powi(2) * u),
                        (&[0, 2], -(b2 * PI).powi(2) * u),
                    ],
                    u,
                );
            }
            ProblemKind::MaxwellHomog { mu, n } => {
                let (x, t) = (p[0], p[1]);
                let k = n * PI;
                let omega = k / (eps * mu).sqrt();
                let (sx, cx) = (k * x).sin_cos();
                let (st, ct) = (omega * t).sin_cos();
                let e = sx * ct;
                let h = -(eps / mu).sqrt() * cx * st;
                set(&mut jet, 0, &[(&[0, 0], e), (&[1, 0], k * cx * ct), (&[0, 1], -omega * sx * st)], e);
                let hs = (eps / mu).sqrt();
                set(
                    &mut jet,
                    1,
                    &[(&[0, 0], h), (&[1, 0], hs * k * sx * st), (&[0, 1], -hs * omega * cx * ct)],
                    h,
                );
            }
            ProblemKind::NeumannBvp | ProblemKind::Fhn { .. } | ProblemKind::AllenCahn => return None,
        }
        Some(jet)
    }

    /// Target value of a condition at a point.
    pub fn condition_target(&self, record: &ConditionRecord, p: &[f64]) -> f64 {
        match record.target {
            Target::Const(v) => v,
            Target::AllenCahnProfile => p[0] * p[0] * (PI * p[0]).cos(),
            Target::Exact => self.exact(p).map(|v| v[record.field]).unwrap_or(f64::NAN),
        }
    }

    /// Value of a condition target on the free coordinate grid, used by reports.
    pub fn initial_profile(&self, x: f64) -> Option<f64> {
        match self.kind {
            ProblemKind::AllenCahn => Some(x * x * (PI * x).cos()),
            _ => None,
        }
    }

    /// Largest magnitude among the terms of the residual at the exact solution.
    pub fn residual_scale(&self, p: &[f64], jet: &Jet) -> f64 {
        let res = self.residual(p, jet);
        let mut scale = self.forcing(p).abs();
        for e in 0..self.fields {
            for f in 0..self.fields {
                for s in 0..self.slots.len() {
                    scale = scale.max((res.dr[e][f][s] * jet[f][s]).abs());
                }
            }
        }
        // nonlinear terms are not linear in the jet; include them explicitly
        match self.kind {
            ProblemKind::NonlinearIvp => {
                let u = jet[0][0];
                scale = scale.max(u * u).max(u.sin().abs());
            }
            ProblemKind::Fhn { .. } => scale = scale.max(jet[0][0].powi(3).abs() / 3.0),
            _ => {}
        }
        scale
    }
}

/// `g(t) = exp(1/((2t−1)²+ε))` and `g′(t)`.
fn heat_time_factor(t: f64, eps: f64) -> (f64, f64) {
    let s = 2.0 * t - 1.0;
    let q = s * s + eps;
    let g = (1.0 / q).exp();
    (g, -g * 4.0 * s / (q * q))
}

/// Jets for a batch of points, `values[field][slot][point]`, tagged with the
/// derivative order of each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct JetBatch {
    pub slots: Vec<MultiOrder>,
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Residuals `r[eq][point]` and partials `dr[eq][field][slot][point]` in the
/// spec's slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBatch {
    pub r: Vec<Vec<f64>>,
    pub dr: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Evaluates the residual on a batch of points. `jets.slots` may be given in
/// any order but must cover [`ProblemSpec::slots`].
pub fn residual_and_partials(spec: &ProblemSpec, points: &PointSet, jets: &JetBatch) -> Result<ResidualBatch> {
    let map: Vec<usize> = spec
        .slots
        .iter()
        .map(|s| {
            jets.slots
                .iter()
                .position(|o| o == s)
                .ok_or_else(|| Error::config(format!("jet slot {s:?} missing for `{}`", spec.name)))
        })
        .collect::<Result<_>>()?;
    if jets.values.len() != spec.fields {
        return Err(Error::shape("jet fields", spec.fields, jets.values.len()));
    }
    let n = points.len();
    let (nf, ns) = (spec.fields, spec.slots.len());
    let mut r = vec![vec![0.0; n]; nf];
    let mut dr = vec![vec![vec![vec![0.0; n]; ns]; nf]; nf];
    for (i, p) in points.iter().enumerate() {
        let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        for f in 0..nf {
            for (s, &src) in map.iter().enumerate() {
                jet[f][s] = *jets.values[f][src]
                    .get(i)
                    .ok_or_else(|| Error::shape("jet values", n, jets.values[f][src].len()))?;
            }
        }
        let res = spec.residual(p, &jet);
        for e in 0..nf {
            r[e][i] = res.r[e];
            for f in 0..nf {
                for s in 0..ns {
                    dr[e][f][s][i] = res.dr[e][f][s];
                }
            }
        }
    }
    Ok(ResidualBatch { r, dr })
}

/// Magnitudes that explain loss imbalance between residual and condition terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingProbe {
    pub max_forcing: f64,
    pub max_boundary_target: f64,
    pub max_initial_target: f64,
}

/// Probes `|f|` on `points` and the condition targets on a 101-point trace of each condition.
pub fn forcing_magnitude_probe(spec: &ProblemSpec, points: &PointSet) -> ForcingProbe {
    let max_forcing = points.iter().map(|p| spec.forcing(p).abs()).fold(0.0, f64::max);
    let bounds = spec.geometry.bounds();
    let mut max_b: f64 = 0.0;
    let mut max_i: f64 = 0.0;
    for c in &spec.conditions {
        let trace: Vec<Vec<f64>> = match &c.location {
            Location::Point(p) => vec![p.clone()],
            Location::Edge { axis, .. } | Location::Pair { axis } if bounds.len() == 2 => {
                let fixed = match &c.location {
                    Location::Edge { value, .. } => *value,
                    _ => bounds[*axis].0,
                };
                let other = 1 - axis;
                let line = uniform_grid(&[bounds[other]], &[101]).expect("valid trace");
                line.iter()
                    .map(|s| {
                        let mut p = vec![0.0; 2];
                        p[*axis] = fixed;
                        p[other] = s[0];
                        p
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        let m = trace.iter().map(|p| spec.condition_target(c, p).abs()).fold(0.0, f64::max);
        if c.kind.is_initial() {
            max_i = max_i.max(m);
        } else {
            max_b = max_b.max(m);
        }
    }
    ForcingProbe {
        max_forcing,
        max_boundary_target: max_b,
        max_initial_target: max_i,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn all() -> Vec<ProblemSpec> {
        PROBLEM_NAMES.iter().map(|n| get_problem(n, None).unwrap()).collect()
    }

    fn random_point(spec: &ProblemSpec, rng: &mut Pcg64) -> Vec<f64> {
        spec.geometry.bounds().iter().map(|&(a, b)| rng.gen_range(a..b)).collect()
    }

    #[test]
    fn exact_values_at_reference_points() {
        let ad = get_problem("advdiff", None).unwrap();
        assert!((ad.exact(&[1.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert_eq!(ad.exact(&[0.0]).unwrap()[0], 0.0);
        let ivp = get_problem("nonlinear_ivp", None).unwrap();
        assert_eq!(ivp.exact(&[0.0]).unwrap()[0], 1.0);
        let hz = get_problem("helmholtz", None).unwrap();
        assert!(hz.exact(&[0.5, 0.5]).unwrap()[0].abs() < 1e-14);
        let mx = get_problem("maxwell_homog", None).unwrap();
        for x in [0.0, 0.13, 0.5, 0.99] {
            assert_eq!(mx.exact(&[x, 0.0]).unwrap()[1], 0.0);
        }
        assert!(get_problem("neumann_bvp", None).unwrap().exact(&[0.5]).is_none());
    }

    #[test]
    fn registry_errors() {
        assert!(matches!(get_problem("nope", None), Err(Error::UnknownProblem(_))));
        assert!(matches!(get_problem("advdiff", Some(0.0)), Err(Error::Config(_))));
        assert!(matches!(get_problem("advdiff", Some(-1.0)), Err(Error::Config(_))));
        assert_eq!(get_problem("advdiff", Some(0.25)).unwrap().epsilon, 0.25);
    }

    #[test]
    fn linear_advdiff_partials() {
        let spec = get_problem("advdiff", None).unwrap();
        let res = spec.residual(&[0.3], &[[0.0; MAX_SLOTS]; MAX_FIELDS]);
        let eps = spec.epsilon;
        assert_eq!(res.r[0], 0.0);
        assert_eq!(&res.dr[0][0][..3], &[1.0, 1.0 + eps, eps]);
    }

    #[test]
    fn allen_cahn_reaction_partial() {
        let spec = get_problem("allen_cahn", None).unwrap();
        let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        jet[0][0] = 1.0;
        let res = spec.residual(&[0.1, 0.2], &jet);
        assert_eq!(res.r[0], 0.0);
        assert_eq!(res.dr[0][0][0], 10.0);
    }

    #[test]
    fn fhn_initial_residuals() {
        let spec = get_problem("fhn", None).unwrap();
        let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        jet[0][0] = 0.5;
        jet[1][0] = 0.1;
        let res = spec.residual(&[0.0], &jet);
        assert!((res.r[0] - (-0.5 + 0.125 / 3.0 + 0.1 - 0.1)).abs() < 1e-15);
        assert!((res.r[0] + 0.45833333333333337).abs() < 1e-15);
        assert!((res.r[1] - 0.6).abs() < 1e-15);
        assert_eq!(res.dr[0][1][0], 1.0);
    }

    #[test]
    fn heat_forcing_at_mid_time() {
        let spec = get_problem("heat2d", None).unwrap();
        let expected = 2.0 * (1.0f64 / 0.15).exp();
        assert!((expected - 1571.5).abs() < 0.1);
        for x in [-0.9, 0.0, 0.4] {
            assert!((spec.forcing(&[x, 0.5]) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(7);
        for spec in all() {
            for _ in 0..100 {
                let p = random_point(&spec, &mut rng);
                let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
                for f in 0..spec.fields {
                    for s in 0..spec.slots.len() {
                        jet[f][s] = rng.gen_range(-2.0..2.0);
                    }
                }
                let res = spec.residual(&p, &jet);
                for f in 0..spec.fields {
                    for s in 0..spec.slots.len() {
                        let h = 1e-6 * (1.0 + jet[f][s].abs());
                        let mut jp = jet;
                        jp[f][s] += h;
                        let mut jm = jet;
                        jm[f][s] -= h;
                        let (rp, rm) = (spec.residual(&p, &jp), spec.residual(&p, &jm));
                        for e in 0..spec.fields {
                            let fd = (rp.r[e] - rm.r[e]) / (2.0 * h);
                            let an = res.dr[e][f][s];
                            let scale = an.abs().max(1.0);
                            assert!(
                                (fd - an).abs() / scale < 1e-6,
                                "{} eq {e} field {f} slot {s}: fd {fd} vs {an}",
                                spec.name
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn exact_jets_annihilate_residual() {
        let mut rng = Pcg64::seed_from_u64(11);
        for spec in all().into_iter().filter(ProblemSpec::has_exact) {
            for _ in 0..1000 {
                let p = random_point(&spec, &mut rng);
                let jet = spec.exact_jet(&p).unwrap();
                let res = spec.residual(&p, &jet);
                let scale = spec.residual_scale(&p, &jet);
                for e in 0..spec.fields {
                    assert!(res.r[e].abs() < 1e-8 * (1.0 + scale), "{} at {p:?}: {}", spec.name, res.r[e]);
                }
            }
        }
    }

    /// The analytic jets agree with finite differences of the exact solution,
    /// so the annihilation check above is not circular.
    #[test]
    fn exact_jets_match_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(13);
        for spec in all().into_iter().filter(ProblemSpec::has_exact) {
            for _ in 0..200 {
                let p = random_point(&spec, &mut rng);
                let jet = spec.exact_jet(&p).unwrap();
                for (s, order) in spec.slots.iter().enumerate() {
                    let axis = order.iter().position(|&o| o > 0);
                    for f in 0..spec.fields {
                        let u = |q: &[f64]| spec.exact(q).unwrap()[f];
                        let fd = match axis {
                            None => u(&p),
                            Some(a) => {
                                let diff = |h: f64| {
                                    let mut pp = p.clone();
                                    pp[a] += h;
                                    let mut pm = p.clone();
                                    pm[a] -= h;
                                    if order[a] == 1 {
                                        (u(&pp) - u(&pm)) / (2.0 * h)
                                    } else {
                                        (u(&pp) - 2.0 * u(&p) + u(&pm)) / (h * h)
                                    }
                                };
                                let h = 1e-2 * spec.epsilon.min(1.0);
                                (4.0 * diff(h / 2.0) - diff(h)) / 3.0
                            }
                        };
                        let an = jet[f][s];
                        let tol = 1e-4 * (1.0 + an.abs());
                        assert!((fd - an).abs() < tol, "{} slot {order:?} at {p:?}: fd {fd} vs {an}", spec.name);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_residual_reorders_and_checks_slots() {
        let spec = get_problem("advdiff", None).unwrap();
        let pts = PointSet::new(1, vec![0.2, 0.6], crate::sampling::PointRole::Interior);
        let jets = JetBatch {
            slots: vec![vec![2], vec![0], vec![1]],
            values: vec![vec![vec![1.0, 2.0], vec![0.5, 0.0], vec![0.0, 1.0]]],
        };
        let out = residual_and_partials(&spec, &pts, &jets).unwrap();
        let eps = spec.epsilon;
        assert!((out.r[0][0] - (eps * 1.0 + 0.5)).abs() < 1e-15);
        assert!((out.r[0][1] - (eps * 2.0 + (1.0 + eps))).abs() < 1e-15);
        let missing = JetBatch {
            slots: vec![vec![0], vec![1]],
            values: vec![vec![vec![0.0; 2]; 2]],
        };
        assert!(matches!(residual_and_partials(&spec, &pts, &missing), Err(Error::Config(_))));
    }

    #[test]
    fn forcing_probe() {
        let heat = get_problem("heat2d", None).unwrap();
        let grid = uniform_grid(&heat.geometry.bounds(), &[101, 101]).unwrap();
        let probe = forcing_magnitude_probe(&heat, &grid);
        assert!(probe.max_forcing > 1e3);
        assert_eq!(probe.max_boundary_target, 0.0);
        assert!((probe.max_initial_target - (1.0f64 / 1.15).exp()).abs() < 1e-12);

        let ad = get_problem("advdiff", None).unwrap();
        let line = uniform_grid(&[(0.0, 1.0)], &[101]).unwrap();
        assert_eq!(forcing_magnitude_probe(&ad, &line).max_forcing, 0.0);

        let hz = get_problem("helmholtz", None).unwrap();
        let grid = uniform_grid(&hz.geometry.bounds(), &[101, 101]).unwrap();
        let expected = (1.0 - 65.0 * PI * PI).abs();
        assert!((expected - 640.5).abs() < 0.1);
        // the grid hits the peak of sin(πx) but only comes near that of sin(8πy)
        let max = forcing_magnitude_probe(&hz, &grid).max_forcing;
        assert!(max <= expected && max > 0.98 * expected, "{max}");
    }

    #[test]
    fn conditions_reference_required_orders() {
        for spec in all() {
            let req = spec.required_orders();
            for c in &spec.conditions {
                assert!(req.contains(&c.order));
                assert!(c.field < spec.fields);
            }
        }
    }
}
