//! Composite loss, exact gradients and the Adam training loop.

use serde::{Deserialize, Serialize};

use crate::basis::{enumerate_family_capped, MotherWavelet, MultiOrder, ResolutionRange, DEFAULT_MAX_MEMBERS};
use crate::error::{Error, Result};
use crate::matrices::{assemble, BasisMatrices};
use crate::network::{init, Activation, CoefficientNet, NetShape};
use crate::problems::{get_problem, ConditionRecord, Location, ProblemSpec, MAX_FIELDS, MAX_SLOTS};
use crate::sampling::{boundary_points, sobol_points, PointRole, PointSet};

/// Unit-weighted mean-squared loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub residual: f64,
    pub ic: f64,
    pub bc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.residual.is_finite() && self.ic.is_finite() && self.bc.is_finite() && self.total.is_finite()
    }
}

/// Multipliers of the residual, initial and boundary terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub residual: f64,
    pub ic: f64,
    pub bc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            residual: 1.0,
            ic: 1.0,
            bc: 1.0,
        }
    }
}

/// One condition equation: `Σ sign · (block row · c_field [+ B_field]) − target`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub initial: bool,
    pub field: usize,
    /// Index into [`TrainingData::condition_orders`].
    pub order: usize,
    pub terms: Vec<(usize, f64)>,
    pub target: f64,
}

/// Everything the loss needs that stays fixed during training.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub interior: BasisMatrices,
    pub conditions: Option<BasisMatrices>,
    pub condition_orders: Vec<MultiOrder>,
    pub rows: Vec<ConditionRow>,
}

impl TrainingData {
    pub fn n_members(&self) -> usize {
        self.interior.n_members()
    }

    pub fn n_initial_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.initial).count()
    }

    pub fn n_boundary_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.initial).count()
    }
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
}

/// Turns the condition records of `spec` into rows over the concatenation of
/// `boundary` and `initial` (boundary points first).
pub fn condition_rows(
    spec: &ProblemSpec,
    boundary: &PointSet,
    initial: &PointSet,
) -> Result<(PointSet, Vec<MultiOrder>, Vec<ConditionRow>)> {
    let points = PointSet::concat(&[boundary, initial], PointRole::Boundary);
    let mut orders: Vec<MultiOrder> = spec.conditions.iter().map(|c| c.order.clone()).collect();
    orders.sort();
    orders.dedup();
    let offset = boundary.len();
    let mut rows = Vec::new();
    for c in &spec.conditions {
        let order = orders.iter().position(|o| *o == c.order).expect("order collected above");
        let initial_kind = c.kind.is_initial();
        let (set, base) = if initial_kind { (initial, offset) } else { (boundary, 0) };
        let before = rows.len();
        let mut push = |terms: Vec<(usize, f64)>, target: f64| {
            rows.push(ConditionRow {
                initial: initial_kind,
                field: c.field,
                order,
                terms,
                target,
            })
        };
        match &c.location {
            Location::Point(p) => {
                let i = set
                    .iter()
                    .position(|q| same_point(q, p))
                    .ok_or_else(|| Error::config(format!("condition point {p:?} was not sampled")))?;
                push(vec![(base + i, 1.0)], spec.condition_target(c, p));
            }
            Location::Edge { axis, value } => {
                for (i, q) in set.iter().enumerate() {
                    if q[*axis] == *value {
                        push(vec![(base + i, 1.0)], spec.condition_target(c, q));
                    }
                }
            }
            Location::Pair { axis } => {
                let (lo, hi) = spec.geometry.bounds()[*axis];
                let low: Vec<usize> = (0..set.len()).filter(|&i| set.point(i)[*axis] == lo).collect();
                let high: Vec<usize> = (0..set.len()).filter(|&i| set.point(i)[*axis] == hi).collect();
                if low.len() != high.len() {
                    return Err(Error::config("periodic walls hold different numbers of points"));
                }
                for (&a, &b) in low.iter().zip(&high) {
                    let (pa, pb) = (set.point(a), set.point(b));
                    let matched = pa.iter().zip(pb).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !matched {
                        return Err(Error::config("periodic pair points do not share free coordinates"));
                    }
                    push(vec![(base + a, 1.0), (base + b, -1.0)], spec.condition_target(c, pa));
                }
            }
        }
        if rows.len() == before {
            return Err(Error::config(format!("condition {c:?} matched no sampled point")));
        }
    }
    Ok((points, orders, rows))
}

fn describe(c: &ConditionRecord) -> String {
    format!("{:?} on field {}", c.kind, c.field)
}

/// Assembles interior and condition matrices for `spec`.
pub fn build_training_data(
    spec: &ProblemSpec,
    mother: MotherWavelet,
    resolutions: &[(i32, i32)],
    interior: &PointSet,
    boundary: &PointSet,
    initial: &PointSet,
    max_members: usize,
) -> Result<TrainingData> {
    let bounds = spec.geometry.bounds();
    if resolutions.len() != bounds.len() {
        return Err(Error::shape("resolution ranges", bounds.len(), resolutions.len()));
    }
    let ranges: Vec<ResolutionRange> = resolutions.iter().map(|&(a, b)| ResolutionRange::new(a, b)).collect();
    let family = enumerate_family_capped(mother, &bounds, &ranges, max_members)?;
    let interior_m = assemble(&family, interior, &spec.interior_orders())?;
    let (cond_points, condition_orders, rows) = condition_rows(spec, boundary, initial)?;
    for c in &spec.conditions {
        if c.order.len() != spec.dim() {
            return Err(Error::config(format!("condition {} has a malformed order", describe(c))));
        }
    }
    let conditions = if rows.is_empty() {
        None
    } else {
        Some(assemble(&family, &cond_points, &condition_orders)?)
    };
    Ok(TrainingData {
        interior: interior_m,
        conditions,
        condition_orders,
        rows,
    })
}

/// Loss value with `∂L/∂c` and `∂L/∂B` per field.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: LossBreakdown,
    pub d_coefficients: Vec<Vec<f64>>,
    pub d_biases: Vec<f64>,
}

fn is_zero_order(o: &[u8]) -> bool {
    o.iter().all(|&v| v == 0)
}

/// Evaluates the composite loss and its gradient with respect to the
/// expansion coefficients and biases.
pub fn loss_and_coefficient_gradient(
    spec: &ProblemSpec,
    data: &TrainingData,
    coefficients: &[Vec<f64>],
    biases: &[f64],
    weights: LossWeights,
) -> Result<LossGradient> {
    let nf = spec.fields;
    let m = data.n_members();
    if coefficients.len() != nf || biases.len() != nf {
        return Err(Error::shape("coefficient fields", nf, coefficients.len()));
    }
    let mut d_coefficients = vec![vec![0.0; m]; nf];
    let mut d_biases = vec![0.0; nf];
    let sum_sq = if data.interior.family().dim() == 1 {
        interior_rows_1d(spec, data, coefficients, biases, weights.residual, &mut d_coefficients, &mut d_biases)?
    } else {
        interior_blocks(spec, data, coefficients, biases, weights.residual, &mut d_coefficients, &mut d_biases)?
    };
    let residual = sum_sq / data.interior.n_points() as f64;

    let (mut ic, mut bc) = (0.0, 0.0);
    if let Some(cm) = &data.conditions {
        let orders = &data.condition_orders;
        let np = cm.n_points();
        let values: Vec<Vec<Vec<f64>>> = (0..nf)
            .map(|f| {
                let mut v = cm.apply_many(orders, &coefficients[f])?;
                for (k, o) in orders.iter().enumerate() {
                    if is_zero_order(o) {
                        v[k].iter_mut().for_each(|x| *x += biases[f]);
                    }
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        let n_ic = data.n_initial_rows().max(1) as f64;
        let n_bc = data.n_boundary_rows().max(1) as f64;
        let mut cond_up = vec![vec![vec![0.0; np]; orders.len()]; nf];
        for row in &data.rows {
            let mut mismatch = -row.target;
            for &(p, sign) in &row.terms {
                mismatch += sign * values[row.field][row.order][p];
            }
            if !mismatch.is_finite() {
                return Err(Error::Numeric("condition mismatch".into()));
            }
            let g = if row.initial {
                ic += mismatch * mismatch;
                2.0 * weights.ic * mismatch / n_ic
            } else {
                bc += mismatch * mismatch;
                2.0 * weights.bc * mismatch / n_bc
            };
            for &(p, sign) in &row.terms {
                cond_up[row.field][row.order][p] += g * sign;
            }
        }
        ic /= n_ic;
        bc /= n_bc;
        for f in 0..nf {
            for (k, o) in orders.iter().enumerate() {
                if is_zero_order(o) {
                    d_biases[f] += cond_up[f][k].iter().sum::<f64>();
                }
            }
            cm.accumulate_transpose_many(orders, &cond_up[f], &mut d_coefficients[f])?;
        }
    }

    let total = weights.residual * residual + weights.ic * ic + weights.bc * bc;
    Ok(LossGradient {
        loss: LossBreakdown {
            residual,
            ic,
            bc,
            total,
        },
        d_coefficients,
        d_biases,
    })
}


/// Residual contribution in 1D, one row at a time: each row of every block
/// is read once for the jets and reused from cache for the gradient.
fn interior_rows_1d(
    spec: &ProblemSpec,
    data: &TrainingData,
    coefficients: &[Vec<f64>],
    biases: &[f64],
    weight: f64,
    d_coefficients: &mut [Vec<f64>],
    d_biases: &mut [f64],
) -> Result<f64> {
    let nf = spec.fields;
    let ns = spec.slots.len();
    let n = data.interior.n_points();
    let blocks: Vec<_> = spec.slots.iter().map(|o| data.interior.factor(0, o[0])).collect();
    let zero: Vec<bool> = spec.slots.iter().map(|o| is_zero_order(o)).collect();
    let scale = 2.0 * weight / n as f64;
    let points = data.interior.points();
    let mut sum_sq = 0.0;
    for i in 0..n {
        let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        for (s, block) in blocks.iter().enumerate() {
            for f in 0..nf {
                jet[f][s] = block.row_dot(i, &coefficients[f]) + if zero[s] { biases[f] } else { 0.0 };
            }
        }
        let res = spec.residual(points.point(i), &jet);
        let mut up = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        for e in 0..nf {
            let r = res.r[e];
            if !r.is_finite() {
                return Err(Error::Numeric(format!("residual at interior point {i}")));
            }
            sum_sq += r * r;
            for f in 0..nf {
                for s in 0..ns {
                    up[f][s] += scale * r * res.dr[e][f][s];
                }
            }
        }
        for (s, block) in blocks.iter().enumerate() {
            for f in 0..nf {
                if up[f][s] != 0.0 {
                    block.row_axpy(i, up[f][s], &mut d_coefficients[f]);
                }
                if zero[s] {
                    d_biases[f] += up[f][s];
                }
            }
        }
    }
    Ok(sum_sq)
}

/// Residual contribution through whole-block products (used for tensor families).
fn interior_blocks(
    spec: &ProblemSpec,
    data: &TrainingData,
    coefficients: &[Vec<f64>],
    biases: &[f64],
    weight: f64,
    d_coefficients: &mut [Vec<f64>],
    d_biases: &mut [f64],
) -> Result<f64> {
    let nf = spec.fields;
    let slots = &spec.slots;
    let ns = slots.len();
    let n = data.interior.n_points();
    let mut jets = Vec::with_capacity(nf);
    for f in 0..nf {
        let mut js = data.interior.apply_many(slots, &coefficients[f])?;
        for (s, o) in slots.iter().enumerate() {
            if is_zero_order(o) {
                js[s].iter_mut().for_each(|v| *v += biases[f]);
            }
        }
        jets.push(js);
    }
    let scale = 2.0 * weight / n as f64;
    let mut upstream = vec![vec![vec![0.0; n]; ns]; nf];
    let mut sum_sq = 0.0;
    let points = data.interior.points();
    for i in 0..n {
        let mut jet = [[0.0; MAX_SLOTS]; MAX_FIELDS];
        for f in 0..nf {
            for s in 0..ns {
                jet[f][s] = jets[f][s][i];
            }
        }
        let res = spec.residual(points.point(i), &jet);
        for e in 0..nf {
            let r = res.r[e];
            if !r.is_finite() {
                return Err(Error::Numeric(format!("residual at interior point {i}")));
            }
            sum_sq += r * r;
            for f in 0..nf {
                for s in 0..ns {
                    upstream[f][s][i] += scale * r * res.dr[e][f][s];
                }
            }
        }
    }
    for f in 0..nf {
        for (s, o) in slots.iter().enumerate() {
            if is_zero_order(o) {
                d_biases[f] += upstream[f][s].iter().sum::<f64>();
            }
        }
        data.interior
            .accumulate_transpose_many(slots, &upstream[f], &mut d_coefficients[f])?;
    }
    Ok(sum_sq)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::shape("Adam parameters", state.m.len(), params.len().min(grads.len())));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= state.lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after every `every` iterations.
    Exponential { factor: f64, every: usize },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Exponential { factor, every } => base * factor.powi((iteration / every.max(1)) as i32),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: String,
    pub epsilon: Option<f64>,
    pub wavelet: MotherWavelet,
    pub resolutions: Vec<(i32, i32)>,
    pub depth: usize,
    pub width: usize,
    pub encoder_width: usize,
    pub activation: Activation,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_initial: usize,
    pub iterations: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub history_stride: usize,
    pub loss_floor: f64,
    pub max_members: usize,
    /// Adam steps taken directly on the expansion coefficients and biases
    /// after the network phase.
    #[serde(default)]
    pub finetune_iterations: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "default_schedule")]
    pub finetune_schedule: LrSchedule,
    /// Wall-clock cap on the optimisation loop. Hitting it ends training
    /// early and sets [`TrainOutcome::time_limited`].
    #[serde(default)]
    pub time_limit_seconds: Option<f64>,
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

/// Coefficient fine-tuning steps appended to every preset.
pub const DEFAULT_FINETUNE_ITERATIONS: usize = 10_000;

fn default_finetune_lr() -> f64 {
    1e-4
}

impl TrainConfig {
    /// Paper preset for `problem` with the given wavelet.
    pub fn preset(problem: &str, wavelet: MotherWavelet) -> Result<Self> {
        let spec = get_problem(problem, None)?;
        let p = &spec.preset;
        Ok(Self {
            problem: problem.to_string(),
            epsilon: None,
            wavelet,
            resolutions: p.resolutions(wavelet).to_vec(),
            depth: p.depth,
            width: p.width,
            encoder_width: 16,
            activation: Activation::Tanh,
            n_interior: p.n_interior,
            n_boundary: p.n_boundary,
            n_initial: p.n_initial,
            iterations: p.iterations,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            seed: 1,
            loss_weights: LossWeights::default(),
            history_stride: 1,
            loss_floor: 1e-12,
            max_members: DEFAULT_MAX_MEMBERS,
            finetune_iterations: DEFAULT_FINETUNE_ITERATIONS,
            finetune_lr: default_finetune_lr(),
            finetune_schedule: LrSchedule::Constant,
            time_limit_seconds: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_interior == 0 {
            return Err(Error::config("at least one collocation point is required"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::config(format!("invalid fine-tuning learning rate {}", self.finetune_lr)));
        }
        if let Some(t) = self.time_limit_seconds {
            if !(t > 0.0) {
                return Err(Error::config("time limit must be positive"));
            }
        }
        if self.history_stride == 0 {
            return Err(Error::config("history stride must be positive"));
        }
        for schedule in [self.schedule, self.finetune_schedule] {
            if let LrSchedule::Exponential { factor, every } = schedule {
                if !(factor > 0.0) || every == 0 {
                    return Err(Error::config("exponential schedule needs factor > 0 and every > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        get_problem(&self.problem, self.epsilon)
    }
}

/// Sampled point sets for a config.
pub fn sample_points(spec: &ProblemSpec, config: &TrainConfig) -> Result<(PointSet, PointSet, PointSet)> {
    let bounds = spec.geometry.bounds();
    let interior = sobol_points(spec.dim(), config.n_interior, &bounds)?;
    let (boundary, initial) = boundary_points(&spec.geometry, config.n_boundary, config.n_initial)?;
    Ok((interior, boundary, initial))
}

/// One recorded point of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: ProblemSpec,
    pub net: CoefficientNet,
    /// Expansion coefficients per field at the end of training, after fine-tuning.
    pub coefficients: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub history: Vec<HistoryEntry>,
    pub final_loss: LossBreakdown,
    pub iterations_run: usize,
    /// Set when training stopped on a non-finite value.
    pub diverged: Option<String>,
    /// Set when the time limit ended training before the iteration budget.
    pub time_limited: bool,
    /// Seconds spent in the optimisation loop.
    pub train_seconds: f64,
}

/// Network and data for a config, ready to train.
pub struct Model {
    pub spec: ProblemSpec,
    pub data: TrainingData,
    pub net: CoefficientNet,
    pub interior: PointSet,
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let (interior, boundary, initial) = sample_points(&spec, config)?;
        let data = build_training_data(
            &spec,
            config.wavelet,
            &config.resolutions,
            &interior,
            &boundary,
            &initial,
            config.max_members,
        )?;
        let mut shape = NetShape::new(config.n_interior, config.depth, config.width, spec.fields, data.n_members())
            .with_activation(config.activation);
        if spec.dim() > 1 {
            shape = shape.with_encoder(spec.dim(), config.encoder_width);
        }
        let net = init(shape, config.seed)?;
        Ok(Self {
            spec,
            data,
            net,
            interior,
        })
    }

    /// Total loss and the gradient with respect to every network parameter.
    pub fn loss_and_gradient(&mut self, weights: LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
        let features = self.net.build_features(&self.interior)?;
        let out = self.net.forward(&features)?;
        let lg = loss_and_coefficient_gradient(&self.spec, &self.data, &out.coefficients, &out.biases, weights)?;
        let (mut grad, d_features) = self.net.backward(&lg.d_coefficients, &lg.d_biases)?;
        self.net.backward_encoder(&d_features, &mut grad)?;
        Ok((lg.loss, grad))
    }

    /// Loss only, at the current parameters.
    pub fn loss(&mut self, weights: LossWeights) -> Result<LossBreakdown> {
        let features = self.net.build_features(&self.interior)?;
        let out = self.net.forward(&features)?;
        Ok(loss_and_coefficient_gradient(&self.spec, &self.data, &out.coefficients, &out.biases, weights)?.loss)
    }
}

/// Trains a model from scratch.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(config)?;
    train_model(model, config)
}

/// Runs the optimisation loop on an already built model.
pub fn train_model(mut model: Model, config: &TrainConfig) -> Result<TrainOutcome> {
    let start = std::time::Instant::now();
    let mut adam = AdamState::new(model.net.n_params(), config.lr);
    let mut history = Vec::new();
    let mut last = LossBreakdown::default();
    let mut diverged = None;
    let mut it = 0;
    let mut reached_floor = false;
    let mut time_limited = false;
    // a network iteration costs about two fine-tuning steps
    let (net_deadline, deadline) = match config.time_limit_seconds {
        Some(limit) => {
            let net_work = 2.0 * config.iterations as f64;
            let share = net_work / (net_work + config.finetune_iterations as f64).max(1.0);
            (
                Some(start + std::time::Duration::from_secs_f64(limit * share)),
                Some(start + std::time::Duration::from_secs_f64(limit)),
            )
        }
        None => (None, None),
    };
    loop {
        let (loss, grad) = match model.loss_and_gradient(config.loss_weights) {
            Ok(v) => v,
            Err(Error::Numeric(what)) => {
                diverged = Some(format!("non-finite value in {what} at iteration {it}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            diverged = Some(format!("non-finite loss at iteration {it}"));
            break;
        }
        last = loss;
        reached_floor = loss.total < config.loss_floor;
        let out_of_time = it < config.iterations && net_deadline.is_some_and(|d| std::time::Instant::now() >= d);
        time_limited |= out_of_time;
        let done = it == config.iterations || reached_floor || out_of_time;
        if it % config.history_stride == 0 || done {
            history.push(HistoryEntry { iteration: it, loss });
        }
        if done {
            break;
        }
        adam.lr = config.schedule.rate(config.lr, it);
        adam_step(&mut adam, model.net.params_mut(), &grad)?;
        it += 1;
    }
    let (mut coefficients, mut biases) = match model.net.build_features(&model.interior).and_then(|f| model.net.forward(&f)) {
        Ok(out) => (out.coefficients, out.biases),
        Err(Error::Numeric(_)) if diverged.is_some() => {
            let f = model.spec.fields;
            (vec![vec![0.0; model.data.n_members()]; f], vec![0.0; f])
        }
        Err(e) => return Err(e),
    };
    if diverged.is_none() && !reached_floor && config.finetune_iterations > 0 {
        let ft = finetune(&model.spec, &model.data, &mut coefficients, &mut biases, config, it, deadline, &mut history)?;
        it += ft.steps;
        last = ft.last;
        diverged = ft.diverged;
        time_limited |= ft.time_limited;
    }
    Ok(TrainOutcome {
        spec: model.spec,
        net: model.net,
        coefficients,
        biases,
        history,
        final_loss: last,
        iterations_run: it,
        diverged,
        time_limited,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

struct FinetuneResult {
    steps: usize,
    last: LossBreakdown,
    diverged: Option<String>,
    time_limited: bool,
}

/// Adam directly on the expansion coefficients and biases. History entries
/// continue the iteration count of the network phase.
fn finetune(
    spec: &ProblemSpec,
    data: &TrainingData,
    coefficients: &mut [Vec<f64>],
    biases: &mut [f64],
    config: &TrainConfig,
    offset: usize,
    deadline: Option<std::time::Instant>,
    history: &mut Vec<HistoryEntry>,
) -> Result<FinetuneResult> {
    let m = data.n_members();
    let fields = coefficients.len();
    let mut flat: Vec<f64> = coefficients.iter().flatten().copied().chain(biases.iter().copied()).collect();
    let mut adam = AdamState::new(flat.len(), config.finetune_lr);
    let mut grad = vec![0.0; flat.len()];
    let mut last = LossBreakdown::default();
    let mut step = 0;
    let mut time_limited = false;
    // the state at `offset` is already recorded; start from the first update
    loop {
        let lg = loss_and_coefficient_gradient(spec, data, coefficients, biases, config.loss_weights)?;
        if !lg.loss.is_finite() {
            return Ok(FinetuneResult {
                steps: step,
                last,
                diverged: Some(format!("non-finite loss at iteration {}", offset + step)),
                time_limited: false,
            });
        }
        last = lg.loss;
        let it = offset + step;
        let out_of_time =
            step < config.finetune_iterations && deadline.is_some_and(|d| std::time::Instant::now() >= d);
        time_limited |= out_of_time;
        let done = step == config.finetune_iterations || lg.loss.total < config.loss_floor || out_of_time;
        if step > 0 && (it % config.history_stride == 0 || done) {
            history.push(HistoryEntry { iteration: it, loss: lg.loss });
        }
        if done {
            break;
        }
        for (k, d) in lg.d_coefficients.iter().enumerate() {
            grad[k * m..(k + 1) * m].copy_from_slice(d);
        }
        grad[fields * m..].copy_from_slice(&lg.d_biases);
        adam.lr = config.finetune_schedule.rate(config.finetune_lr, step);
        adam_step(&mut adam, &mut flat, &grad)?;
        for (k, c) in coefficients.iter_mut().enumerate() {
            c.copy_from_slice(&flat[k * m..(k + 1) * m]);
        }
        biases.copy_from_slice(&flat[fields * m..]);
        step += 1;
    }
    Ok(FinetuneResult {
        steps: step,
        last,
        diverged: None,
        time_limited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::PROBLEM_NAMES;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    /// Small config for any registered problem.
    pub(crate) fn mini_config(problem: &str) -> TrainConfig {
        let mut cfg = TrainConfig::preset(problem, MotherWavelet::Gaussian).unwrap();
        let spec = cfg.spec().unwrap();
        cfg.resolutions = if spec.dim() == 1 { vec![(0, 2)] } else { vec![(-1, 0), (-1, 0)] };
        cfg.depth = 2;
        cfg.width = 5;
        cfg.encoder_width = 3;
        cfg.n_interior = 9;
        cfg.n_boundary = if spec.dim() == 1 { 0 } else { 8 };
        cfg.n_initial = if spec.dim() == 2 && spec.geometry.has_time_axis() { 4 } else { 0 };
        cfg.iterations = 5;
        cfg.finetune_iterations = 0;
        cfg
    }

    fn random_coefficients(rng: &mut Pcg64, fields: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let c = (0..fields).map(|_| (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
        let b = (0..fields).map(|_| rng.gen_range(-0.5..0.5)).collect();
        (c, b)
    }

    #[test]
    fn advdiff_zero_coefficients() {
        let model = Model::new(&mini_config("advdiff")).unwrap();
        let m = model.data.n_members();
        let lg = loss_and_coefficient_gradient(&model.spec, &model.data, &[vec![0.0; m]], &[0.0], LossWeights::default())
            .unwrap();
        assert_eq!(lg.loss.residual, 0.0);
        assert_eq!(lg.loss.ic, 0.0);
        assert_eq!(lg.loss.bc, 0.5);
        assert_eq!(lg.loss.total, 0.5);
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let mut rng = Pcg64::seed_from_u64(3);
        for name in PROBLEM_NAMES {
            let model = Model::new(&mini_config(name)).unwrap();
            let (spec, data) = (&model.spec, &model.data);
            let m = data.n_members();
            let (mut c, mut b) = random_coefficients(&mut rng, spec.fields, m);
            let w = LossWeights::default();
            let lg = loss_and_coefficient_gradient(spec, data, &c, &b, w).unwrap();
            let total = |c: &[Vec<f64>], b: &[f64]| loss_and_coefficient_gradient(spec, data, c, b, w).unwrap().loss.total;
            let h = 1e-6;
            for f in 0..spec.fields {
                for k in 0..m {
                    let orig = c[f][k];
                    c[f][k] = orig + h;
                    let lp = total(&c, &b);
                    c[f][k] = orig - h;
                    let lm = total(&c, &b);
                    c[f][k] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = lg.d_coefficients[f][k];
                    let scale = an.abs().max(fd.abs()).max(1e-3 * lg.loss.total.max(1.0));
                    assert!((fd - an).abs() / scale < 1e-5, "{name} c[{f}][{k}]: fd {fd} vs {an}");
                }
                let orig = b[f];
                b[f] = orig + h;
                let lp = total(&c, &b);
                b[f] = orig - h;
                let lm = total(&c, &b);
                b[f] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = lg.d_biases[f];
                let scale = an.abs().max(fd.abs()).max(1e-3 * lg.loss.total.max(1.0));
                assert!((fd - an).abs() / scale < 1e-5, "{name} B[{f}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn doubling_weights_doubles_everything() {
        let mut rng = Pcg64::seed_from_u64(5);
        for name in ["advdiff", "allen_cahn", "maxwell_homog"] {
            let model = Model::new(&mini_config(name)).unwrap();
            let (c, b) = random_coefficients(&mut rng, model.spec.fields, model.data.n_members());
            let one = loss_and_coefficient_gradient(&model.spec, &model.data, &c, &b, LossWeights::default()).unwrap();
            let two_w = LossWeights {
                residual: 2.0,
                ic: 2.0,
                bc: 2.0,
            };
            let two = loss_and_coefficient_gradient(&model.spec, &model.data, &c, &b, two_w).unwrap();
            assert_eq!(two.loss.total, 2.0 * one.loss.total);
            for (a, b) in two.d_coefficients.concat().iter().zip(one.d_coefficients.concat()) {
                assert_eq!(*a, 2.0 * b);
            }
            for (a, b) in two.d_biases.iter().zip(&one.d_biases) {
                assert_eq!(*a, 2.0 * b);
            }
        }
    }

    #[test]
    fn periodic_rows_pair_opposite_walls() {
        let model = Model::new(&mini_config("allen_cahn")).unwrap();
        let cm = model.data.conditions.as_ref().unwrap();
        let pairs: Vec<_> = model.data.rows.iter().filter(|r| r.terms.len() == 2).collect();
        assert_eq!(pairs.len(), 8);
        for r in pairs {
            let (a, b) = (cm.points().point(r.terms[0].0), cm.points().point(r.terms[1].0));
            assert_eq!((a[0], b[0]), (-1.0, 1.0));
            assert_eq!(a[1], b[1]);
            assert_eq!((r.terms[0].1, r.terms[1].1), (1.0, -1.0));
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        for name in ["advdiff", "fhn", "heat2d"] {
            let mut model = Model::new(&mini_config(name)).unwrap();
            assert!(model.data.n_members() * model.spec.fields <= 40);
            let w = LossWeights::default();
            let (loss, grad) = model.loss_and_gradient(w).unwrap();
            let h = 1e-6;
            for k in 0..model.net.n_params() {
                let orig = model.net.params()[k];
                model.net.params_mut()[k] = orig + h;
                let lp = model.loss(w).unwrap().total;
                model.net.params_mut()[k] = orig - h;
                let lm = model.loss(w).unwrap().total;
                model.net.params_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let scale = grad[k].abs().max(fd.abs()).max(1e-4 * loss.total.max(1.0));
                assert!((fd - grad[k]).abs() / scale < 1e-4, "{name} param {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(3, 1e-3);
        let mut p = vec![0.0, 0.0, 1.0];
        adam_step(&mut st, &mut p, &[2.0, -2.0, 0.0]).unwrap();
        let expected: f64 = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((expected + 9.99999995e-4).abs() < 1e-15);
        assert!((p[0] - expected).abs() < 1e-18);
        assert_eq!(p[0], -p[1]);
        assert_eq!(p[2], 1.0);
        assert_eq!(st.t, 1);
        adam_step(&mut st, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(st.t, 2);
        assert!(adam_step(&mut st, &mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = AdamState::new(4, 1e-2);
        let mut p = vec![0.3, -0.2, 5.0, 0.0];
        let before = p.clone();
        for _ in 0..3 {
            adam_step(&mut st, &mut p, &[0.0; 4]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn zero_iterations_returns_initial_loss() {
        let mut cfg = mini_config("advdiff");
        cfg.iterations = 0;
        let mut model = Model::new(&cfg).unwrap();
        let init_params = model.net.params().to_vec();
        let loss = model.loss(cfg.loss_weights).unwrap();
        let out = train(&cfg).unwrap();
        assert_eq!(out.iterations_run, 0);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.final_loss, loss);
        assert_eq!(out.net.params(), init_params.as_slice());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut cfg = mini_config("heat2d");
        cfg.lr = 0.0;
        let out = train(&cfg).unwrap();
        assert!(out.history.windows(2).all(|w| w[0].loss == w[1].loss));
        assert_eq!(out.history.len(), 6);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut cfg = mini_config("fhn");
        cfg.iterations = 30;
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.net.params(), b.net.params());
        assert!(a.final_loss.total < a.history[0].loss.total);
        assert!(a.history.iter().all(|h| h.loss.is_finite()));
    }

    #[test]
    fn history_stride_and_floor() {
        let mut cfg = mini_config("advdiff");
        cfg.iterations = 10;
        cfg.history_stride = 4;
        let out = train(&cfg).unwrap();
        let its: Vec<usize> = out.history.iter().map(|h| h.iteration).collect();
        assert_eq!(its, vec![0, 4, 8, 10]);
        cfg.loss_floor = f64::INFINITY;
        let out = train(&cfg).unwrap();
        assert_eq!(out.iterations_run, 0);
    }

    #[test]
    fn exponential_schedule() {
        let s = LrSchedule::Exponential { factor: 0.99, every: 500 };
        assert_eq!(s.rate(1e-3, 499), 1e-3);
        assert_eq!(s.rate(1e-3, 500), 1e-3 * 0.99);
        assert_eq!(LrSchedule::Constant.rate(2.0, 10_000), 2.0);
    }

    #[test]
    fn finetuning_continues_from_the_network() {
        let mut cfg = mini_config("advdiff");
        cfg.iterations = 10;
        cfg.history_stride = 4;
        let net_only = train(&cfg).unwrap();
        cfg.finetune_iterations = 6;
        cfg.finetune_lr = 1e-2;
        let out = train(&cfg).unwrap();
        let its: Vec<usize> = out.history.iter().map(|h| h.iteration).collect();
        assert_eq!(its, vec![0, 4, 8, 10, 12, 16]);
        assert_eq!(out.iterations_run, 16);
        // the network itself is left as the first phase produced it
        assert_eq!(out.net.params(), net_only.net.params());
        assert!(out.final_loss.total < net_only.final_loss.total);
        let lg = loss_and_coefficient_gradient(&out.spec, &Model::new(&cfg).unwrap().data, &out.coefficients, &out.biases, cfg.loss_weights).unwrap();
        assert_eq!(lg.loss, out.final_loss);
    }

    #[test]
    fn zero_finetune_rate_keeps_network_coefficients() {
        let mut cfg = mini_config("nonlinear_ivp");
        cfg.iterations = 3;
        let a = train(&cfg).unwrap();
        cfg.finetune_iterations = 4;
        cfg.finetune_lr = 0.0;
        let b = train(&cfg).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.biases, b.biases);
        assert_eq!(a.final_loss, b.final_loss);
    }

    #[test]
    fn time_limit_stops_both_phases() {
        let mut cfg = mini_config("advdiff");
        cfg.iterations = usize::MAX / 2;
        cfg.finetune_iterations = usize::MAX / 2;
        cfg.time_limit_seconds = Some(0.2);
        let out = train(&cfg).unwrap();
        assert!(out.time_limited);
        assert!(out.diverged.is_none());
        assert!(out.iterations_run > 0);
        assert!(out.train_seconds < 2.0);
        cfg.iterations = 3;
        cfg.finetune_iterations = 3;
        cfg.time_limit_seconds = Some(60.0);
        assert!(!train(&cfg).unwrap().time_limited);
        cfg.time_limit_seconds = Some(0.0);
        assert!(train(&cfg).is_err());
    }
}
