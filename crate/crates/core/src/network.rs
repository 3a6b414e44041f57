//! The trainable coefficient network.
//!
//! The network reads one fixed feature vector with an entry per collocation
//! point and emits the whole coefficient vector in one pass:
//! hidden layers compute `z^k = σ(ω^k z^{k−1} + b^k)`, the output layer is
//! affine. The output is split into `F` contiguous per-field blocks of length
//! `M`. Each field also owns a trainable expansion bias `B`.
//!
//! In 1D the features are the collocation coordinates themselves. In 2D a
//! small per-point encoder (`d → width → 1`, `σ` on the hidden layer) maps
//! every collocation point to its feature entry.
//!
//! All trainable values live in one flat vector so the optimiser can treat
//! them uniformly. Order: encoder (`W1`, `b1`, `W2`, `b2`), then every layer's
//! weights (row-major, `n_k × n_{k−1}`) followed by its biases, then the `F`
//! expansion biases.

use rand::RngCore;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::PointSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sin,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y = σ(x)`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sin => x.cos(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sin" => Ok(Activation::Sin),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub width: usize,
}

/// Architecture of a [`CoefficientNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// `n_0 = N_feat, n_1, …, n_L = F·M`.
    pub layer_sizes: Vec<usize>,
    pub fields: usize,
    pub members: usize,
    pub activation: Activation,
    pub encoder: Option<EncoderShape>,
}

impl NetShape {
    /// `depth` hidden layers of `width` neurons between `features` inputs and `fields · members` outputs.
    pub fn new(features: usize, depth: usize, width: usize, fields: usize, members: usize) -> Self {
        let mut layer_sizes = vec![features];
        layer_sizes.extend(std::iter::repeat(width).take(depth));
        layer_sizes.push(fields * members);
        Self {
            layer_sizes,
            fields,
            members,
            activation: Activation::Tanh,
            encoder: None,
        }
    }

    pub fn with_encoder(mut self, input_dim: usize, width: usize) -> Self {
        self.encoder = Some(EncoderShape { input_dim, width });
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::config(format!("invalid layer sizes {:?}", self.layer_sizes)));
        }
        if self.fields == 0 || self.members == 0 {
            return Err(Error::config("network needs at least one field and one member"));
        }
        let out = *self.layer_sizes.last().unwrap();
        if out != self.fields * self.members {
            return Err(Error::config(format!(
                "output width {out} does not equal fields × members = {}",
                self.fields * self.members
            )));
        }
        if let Some(e) = self.encoder {
            if e.input_dim == 0 || e.width == 0 {
                return Err(Error::config("encoder dimensions must be positive"));
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.layer_sizes[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn range(self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    encoder: Option<[Span; 4]>,
    weights: Vec<Span>,
    biases: Vec<Span>,
    expansion: Span,
    total: usize,
}

impl Layout {
    fn new(shape: &NetShape) -> Self {
        let mut pos = 0;
        let mut take = |len: usize| {
            let s = Span { start: pos, len };
            pos += len;
            s
        };
        let encoder = shape
            .encoder
            .map(|e| [take(e.width * e.input_dim), take(e.width), take(e.width), take(1)]);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in shape.layer_sizes.windows(2) {
            weights.push(take(w[1] * w[0]));
            biases.push(take(w[1]));
        }
        let expansion = take(shape.fields);
        Self {
            encoder,
            weights,
            biases,
            expansion,
            total: pos,
        }
    }
}

/// Network output: per-field coefficient blocks and expansion biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub coefficients: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct Cache {
    /// Inputs to every layer (`z^0 … z^{L−1}`) and the raw output.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
struct EncoderCache {
    points: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// The trainable part of the model.
#[derive(Debug, Clone)]
pub struct CoefficientNet {
    shape: NetShape,
    layout: Layout,
    params: Vec<f64>,
    cache: Option<Cache>,
    encoder_cache: Option<EncoderCache>,
}

/// Draws uniform values on `[-limit, limit)` from the top 53 bits of PCG64 outputs.
fn glorot_fill(rng: &mut Pcg64, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in out {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        *w = limit * (2.0 * u - 1.0);
    }
}

/// Glorot-uniform weights, zero biases and zero expansion biases.
///
/// Weights are drawn in parameter order from `Pcg64::seed_from_u64(seed)`
/// (PCG XSL-RR 128/64).
pub fn init(shape: NetShape, seed: u64) -> Result<CoefficientNet> {
    shape.validate()?;
    let layout = Layout::new(&shape);
    let mut params = vec![0.0; layout.total];
    let mut rng = Pcg64::seed_from_u64(seed);
    if let (Some(e), Some(spans)) = (shape.encoder, layout.encoder) {
        glorot_fill(&mut rng, &mut params[spans[0].range()], e.input_dim, e.width);
        glorot_fill(&mut rng, &mut params[spans[2].range()], e.width, 1);
    }
    for (k, w) in shape.layer_sizes.windows(2).enumerate() {
        glorot_fill(&mut rng, &mut params[layout.weights[k].range()], w[0], w[1]);
    }
    Ok(CoefficientNet {
        shape,
        layout,
        params,
        cache: None,
        encoder_cache: None,
    })
}

/// `out = W x + b` for a row-major `rows × cols` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend(w.chunks_exact(cols).zip(b).map(|(row, &bi)| {
        let mut acc = 0.0;
        for (a, v) in row.iter().zip(x) {
            acc += a * v;
        }
        acc + bi
    }));
}

impl CoefficientNet {
    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        self.encoder_cache = None;
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn expansion_biases(&self) -> &[f64] {
        &self.params[self.layout.expansion.range()]
    }

    /// Weight matrix (row-major) and bias vector of layer `k` (0-based).
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        (
            &self.params[self.layout.weights[k].range()],
            &self.params[self.layout.biases[k].range()],
        )
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = (self.layout.weights[k], self.layout.biases[k]);
        self.cache = None;
        // weights precede biases in the layout
        let (head, tail) = self.params.split_at_mut(b.start);
        (&mut head[w.range()], &mut tail[..b.len])
    }

    /// Encoder parameters `(W1, b1, W2, b2)`.
    pub fn encoder_params_mut(&mut self) -> Option<[&mut [f64]; 4]> {
        let spans = self.layout.encoder?;
        self.encoder_cache = None;
        let end = spans[3].start + 1;
        let enc = &mut self.params[spans[0].start..end];
        let (w1, rest) = enc.split_at_mut(spans[0].len);
        let (b1, rest) = rest.split_at_mut(spans[1].len);
        let (w2, b2) = rest.split_at_mut(spans[2].len);
        Some([w1, b1, w2, b2])
    }

    /// Feature vector for the collocation set: coordinates in 1D, encoder outputs in 2D.
    pub fn build_features(&mut self, points: &PointSet) -> Result<Vec<f64>> {
        let n = self.shape.n_features();
        if points.len() != n {
            return Err(Error::shape("collocation points", n, points.len()));
        }
        let Some(e) = self.shape.encoder else {
            if points.dim != 1 {
                return Err(Error::config("multi-dimensional points need an encoder"));
            }
            return Ok(points.coords.clone());
        };
        if points.dim != e.input_dim {
            return Err(Error::shape("encoder input", e.input_dim, points.dim));
        }
        let spans = self.layout.encoder.expect("encoder layout");
        let (w1, b1, w2, b2) = (
            &self.params[spans[0].range()],
            &self.params[spans[1].range()],
            &self.params[spans[2].range()],
            self.params[spans[3].start],
        );
        let act = self.shape.activation;
        let mut pre = Vec::with_capacity(n * e.width);
        let mut hidden = Vec::with_capacity(n * e.width);
        let mut features = Vec::with_capacity(n);
        for p in points.iter() {
            let mut out = b2;
            for h in 0..e.width {
                let row = &w1[h * e.input_dim..(h + 1) * e.input_dim];
                let s: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + b1[h];
                let y = act.apply(s);
                pre.push(s);
                hidden.push(y);
                out += w2[h] * y;
            }
            features.push(out);
        }
        self.encoder_cache = Some(EncoderCache {
            points: points.coords.clone(),
            pre,
            hidden,
        });
        Ok(features)
    }

    /// Feed-forward pass; caches intermediates for [`CoefficientNet::backward`].
    pub fn forward(&mut self, features: &[f64]) -> Result<NetOutput> {
        let n0 = self.shape.n_features();
        if features.len() != n0 {
            return Err(Error::shape("feature vector", n0, features.len()));
        }
        let n_layers = self.layout.weights.len();
        let mut cache = Cache::default();
        let mut z = features.to_vec();
        for k in 0..n_layers {
            let (w, b) = self.layer(k);
            let mut s = Vec::new();
            affine(w, b, &z, &mut s);
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("network layer {}", k + 1)));
            }
            cache.activations.push(std::mem::take(&mut z));
            if k + 1 < n_layers {
                z = s.iter().map(|&v| self.shape.activation.apply(v)).collect();
                cache.pre.push(s);
            } else {
                z = s;
            }
        }
        let out = split_output(&z, self.shape.fields, self.shape.members, self.expansion_biases());
        cache.activations.push(z);
        self.cache = Some(cache);
        Ok(out)
    }

    /// Output layer from the last forward pass, unsplit.
    pub fn raw_output(&self) -> Option<&[f64]> {
        self.cache.as_ref().and_then(|c| c.activations.last()).map(Vec::as_slice)
    }

    /// Reverse-mode gradient of a scalar loss given `∂L/∂coefficients`
    /// (per field) and `∂L/∂B` (per field). Returns a vector laid out like
    /// [`CoefficientNet::params`]; encoder entries are zero until
    /// [`CoefficientNet::backward_encoder`] fills them.
    pub fn backward(&self, d_coefficients: &[Vec<f64>], d_biases: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let (f, m) = (self.shape.fields, self.shape.members);
        if d_coefficients.len() != f || d_biases.len() != f {
            return Err(Error::shape("upstream fields", f, d_coefficients.len()));
        }
        if let Some(bad) = d_coefficients.iter().find(|d| d.len() != m) {
            return Err(Error::shape("upstream coefficients", m, bad.len()));
        }
        let mut grad = vec![0.0; self.layout.total];
        let mut delta: Vec<f64> = d_coefficients.iter().flatten().copied().collect();
        let n_layers = self.layout.weights.len();
        for k in (0..n_layers).rev() {
            let input = &cache.activations[k];
            let cols = input.len();
            {
                let gw = &mut grad[self.layout.weights[k].range()];
                for (row, &d) in gw.chunks_exact_mut(cols).zip(&delta) {
                    if d != 0.0 {
                        for (g, &x) in row.iter_mut().zip(input) {
                            *g = d * x;
                        }
                    }
                }
            }
            grad[self.layout.biases[k].range()].copy_from_slice(&delta);
            let (w, _) = self.layer(k);
            let mut back = vec![0.0; cols];
            for (row, &d) in w.chunks_exact(cols).zip(&delta) {
                if d != 0.0 {
                    for (b, &a) in back.iter_mut().zip(row) {
                        *b += d * a;
                    }
                }
            }
            if k > 0 {
                let pre = &cache.pre[k - 1];
                for ((b, &x), &y) in back.iter_mut().zip(pre).zip(input) {
                    *b *= self.shape.activation.derivative(x, y);
                }
            }
            delta = back;
        }
        grad[self.layout.expansion.range()].copy_from_slice(d_biases);
        Ok((grad, delta))
    }

    /// Adds encoder gradients to `grad` given `∂L/∂features` from [`CoefficientNet::backward`].
    pub fn backward_encoder(&self, d_features: &[f64], grad: &mut [f64]) -> Result<()> {
        let (Some(e), Some(spans)) = (self.shape.encoder, self.layout.encoder) else {
            return Ok(());
        };
        let cache = self
            .encoder_cache
            .as_ref()
            .ok_or_else(|| Error::State("encoder backward called before build_features".into()))?;
        let w2 = &self.params[spans[2].range()];
        let mut gw1 = vec![0.0; spans[0].len];
        let mut gb1 = vec![0.0; spans[1].len];
        let mut gw2 = vec![0.0; spans[2].len];
        let mut gb2 = 0.0;
        let act = self.shape.activation;
        for (i, &d) in d_features.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb2 += d;
            let p = &cache.points[i * e.input_dim..(i + 1) * e.input_dim];
            for h in 0..e.width {
                let y = cache.hidden[i * e.width + h];
                let x = cache.pre[i * e.width + h];
                gw2[h] += d * y;
                let dh = d * w2[h] * act.derivative(x, y);
                gb1[h] += dh;
                for (g, &pv) in gw1[h * e.input_dim..(h + 1) * e.input_dim].iter_mut().zip(p) {
                    *g += dh * pv;
                }
            }
        }
        grad[spans[0].range()].copy_from_slice(&gw1);
        grad[spans[1].range()].copy_from_slice(&gb1);
        grad[spans[2].range()].copy_from_slice(&gw2);
        grad[spans[3].start] = gb2;
        Ok(())
    }

    pub fn has_encoder(&self) -> bool {
        self.shape.encoder.is_some()
    }

    /// Saves a JSON snapshot (shape plus the flat parameter vector).
    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot {
            shape: self.shape.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_snapshot(snapshot: NetSnapshot) -> Result<Self> {
        snapshot.shape.validate()?;
        let layout = Layout::new(&snapshot.shape);
        if snapshot.params.len() != layout.total {
            return Err(Error::shape("snapshot parameters", layout.total, snapshot.params.len()));
        }
        Ok(Self {
            shape: snapshot.shape,
            layout,
            params: snapshot.params,
            cache: None,
            encoder_cache: None,
        })
    }
}

fn split_output(raw: &[f64], fields: usize, members: usize, biases: &[f64]) -> NetOutput {
    NetOutput {
        coefficients: raw.chunks_exact(members).take(fields).map(<[f64]>::to_vec).collect(),
        biases: biases.to_vec(),
    }
}

/// Serialisable trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub shape: NetShape,
    pub params: Vec<f64>,
}
