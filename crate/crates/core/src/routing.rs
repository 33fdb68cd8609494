//! Capsule layers, prediction maps and routing by agreement.
//!
//! Routing coefficients `c[i][j]` connect lower capsule `i` to upper capsule
//! `j` and are normalized over the lower layer: `sum_i c[i][j] == 1` for
//! every `j`, in both the forward (data) and reverse (generation)
//! directions.
//!
//! Every reduction over the lower-capsule axis is summed in sorted order,
//! which makes routing exactly equivariant under reordering of the lower
//! capsules.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::ordered_sum;
use crate::{Error, Result, SeededRng, Tensor};

pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

/// Shape of one capsule layer: `count` capsules of `dim` neurons each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CapsuleLayerSpec {
    pub count: usize,
    pub dim: usize,
}

impl CapsuleLayerSpec {
    pub fn new(count: usize, dim: usize) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::InvalidArgument {
                op: "CapsuleLayerSpec",
                reason: "capsule count and dimension must be positive",
            });
        }
        Ok(Self { count, dim })
    }

    /// Number of scalar neurons in the layer.
    pub fn width(&self) -> usize {
        self.count * self.dim
    }
}

/// A layer's capsule vectors, stored as a `[count, dim]` tensor. The flat
/// view is the layer's neuron vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleActivations {
    layer: CapsuleLayerSpec,
    values: Tensor,
}

impl CapsuleActivations {
    pub fn new(layer: CapsuleLayerSpec, values: Tensor) -> Result<Self> {
        if values.len() != layer.width() {
            return Err(Error::ShapeMismatch {
                op: "CapsuleActivations",
                expected: vec![layer.count, layer.dim],
                found: values.shape().to_vec(),
            });
        }
        Ok(Self {
            layer,
            values: values.reshape(&[layer.count, layer.dim])?,
        })
    }

    pub fn from_flat(layer: CapsuleLayerSpec, values: Vec<f64>) -> Result<Self> {
        Self::new(layer, Tensor::from_vec(&[layer.count, layer.dim], values)?)
    }

    pub fn zeros(layer: CapsuleLayerSpec) -> Self {
        Self {
            layer,
            values: Tensor::zeros(&[layer.count, layer.dim]),
        }
    }

    pub fn layer(&self) -> CapsuleLayerSpec {
        self.layer
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn flat(&self) -> &[f64] {
        self.values.data()
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn capsule(&self, i: usize) -> &[f64] {
        let d = self.layer.dim;
        &self.values.data()[i * d..(i + 1) * d]
    }

    pub fn capsule_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.layer.dim;
        &mut self.values.data_mut()[i * d..(i + 1) * d]
    }

    fn expect_layer(&self, op: &'static str, layer: CapsuleLayerSpec) -> Result<()> {
        if self.layer != layer {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![layer.count, layer.dim],
                found: vec![self.layer.count, self.layer.dim],
            });
        }
        Ok(())
    }
}

/// The matrices `W[i][j]`, each `N x M`, mapping lower capsule `i`
/// (dimension `M`) to its prediction for upper capsule `j` (dimension `N`).
/// Stored as one `[I, J, N, M]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    lower: CapsuleLayerSpec,
    upper: CapsuleLayerSpec,
    weights: Tensor,
}

impl PredictionMaps {
    pub fn new(lower: CapsuleLayerSpec, upper: CapsuleLayerSpec, weights: Tensor) -> Result<Self> {
        weights.expect_shape(
            "PredictionMaps",
            &[lower.count, upper.count, upper.dim, lower.dim],
        )?;
        weights.ensure_finite("PredictionMaps")?;
        Ok(Self {
            lower,
            upper,
            weights,
        })
    }

    pub fn zeros(lower: CapsuleLayerSpec, upper: CapsuleLayerSpec) -> Self {
        Self {
            lower,
            upper,
            weights: Tensor::zeros(&[lower.count, upper.count, upper.dim, lower.dim]),
        }
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn gaussian(
        lower: CapsuleLayerSpec,
        upper: CapsuleLayerSpec,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let shape = [lower.count, upper.count, upper.dim, lower.dim];
        let weights = crate::rng::gaussian_sample(rng, &shape)?.scale(std);
        Self::new(lower, upper, weights)
    }

    pub fn lower(&self) -> CapsuleLayerSpec {
        self.lower
    }

    pub fn upper(&self) -> CapsuleLayerSpec {
        self.upper
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    fn block(&self) -> usize {
        self.upper.dim * self.lower.dim
    }

    /// Row-major `N x M` matrix `W[i][j]`.
    pub fn matrix(&self, i: usize, j: usize) -> &[f64] {
        let b = self.block();
        let k = (i * self.upper.count + j) * b;
        &self.weights.data()[k..k + b]
    }

    pub fn matrix_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let b = self.block();
        let k = (i * self.upper.count + j) * b;
        &mut self.weights.data_mut()[k..k + b]
    }
}

/// Routing logits and coefficients, both `I x J` row-major (`[i * J + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    lower_count: usize,
    upper_count: usize,
    logits: Vec<f64>,
    coefficients: Vec<f64>,
    iterations_run: usize,
}

impl RoutingState {
    /// The state routing starts from: zero logits, `c = 1/I`.
    pub fn uniform(lower_count: usize, upper_count: usize) -> Self {
        let n = lower_count * upper_count;
        Self {
            lower_count,
            upper_count,
            logits: vec![0.0; n],
            coefficients: vec![1.0 / lower_count as f64; n],
            iterations_run: 0,
        }
    }

    /// Wraps externally chosen coefficients (zero logits). Coefficients
    /// must be finite and non-negative but need not be normalized, which
    /// lets tests and oracles inject arbitrary weightings.
    pub fn from_coefficients(
        lower_count: usize,
        upper_count: usize,
        coefficients: Vec<f64>,
    ) -> Result<Self> {
        if coefficients.len() != lower_count * upper_count {
            return Err(Error::ShapeMismatch {
                op: "RoutingState::from_coefficients",
                expected: vec![lower_count, upper_count],
                found: vec![coefficients.len()],
            });
        }
        if coefficients.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument {
                op: "RoutingState::from_coefficients",
                reason: "coefficients must be finite and non-negative",
            });
        }
        Ok(Self {
            lower_count,
            upper_count,
            logits: vec![0.0; coefficients.len()],
            coefficients,
            iterations_run: 0,
        })
    }

    pub fn lower_count(&self) -> usize {
        self.lower_count
    }

    pub fn upper_count(&self) -> usize {
        self.upper_count
    }

    pub fn coefficient(&self, i: usize, j: usize) -> f64 {
        self.coefficients[i * self.upper_count + j]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub(crate) fn expect_dims(&self, op: &'static str, lower: usize, upper: usize) -> Result<()> {
        if self.lower_count != lower || self.upper_count != upper {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![lower, upper],
                found: vec![self.lower_count, self.upper_count],
            });
        }
        Ok(())
    }

    /// `c[i][j] = softmax_i(b[i][j])` for every `j`.
    fn normalize(&mut self) {
        let (ni, nj) = (self.lower_count, self.upper_count);
        let mut scratch = vec![0.0; ni];
        for j in 0..nj {
            let max = (0..ni)
                .map(|i| self.logits[i * nj + j])
                .fold(f64::NEG_INFINITY, f64::max);
            for (i, e) in scratch.iter_mut().enumerate() {
                *e = libm::exp(self.logits[i * nj + j] - max);
                self.coefficients[i * nj + j] = *e;
            }
            let total = ordered_sum(&mut scratch);
            for i in 0..ni {
                self.coefficients[i * nj + j] /= total;
            }
        }
    }
}

/// `z[i][j] = W[i][j] . x[i]`, shape `[I, J, N]`.
pub fn predictions(maps: &PredictionMaps, x: &CapsuleActivations) -> Result<Tensor> {
    x.expect_layer("predictions", maps.lower)?;
    let (ni, nj) = (maps.lower.count, maps.upper.count);
    let (m, n) = (maps.lower.dim, maps.upper.dim);
    let mut out = Vec::with_capacity(ni * nj * n);
    for i in 0..ni {
        let xi = x.capsule(i);
        for j in 0..nj {
            let w = maps.matrix(i, j);
            for row in w.chunks_exact(m) {
                let mut acc = 0.0;
                for (wv, xv) in row.iter().zip(xi) {
                    acc += wv * xv;
                }
                out.push(acc);
            }
        }
    }
    let out = Tensor::from_vec(&[ni, nj, n], out)?;
    out.ensure_finite("predictions")?;
    Ok(out)
}

/// Reverse predictions `z[i][j] = transpose(W[i][j]) . h[j]`, shape
/// `[I, J, M]`. Uses the transpose of the same matrix, never `W[j][i]`.
pub fn reverse_predictions(maps: &PredictionMaps, h: &CapsuleActivations) -> Result<Tensor> {
    h.expect_layer("reverse_predictions", maps.upper)?;
    let (ni, nj) = (maps.lower.count, maps.upper.count);
    let m = maps.lower.dim;
    let mut out = vec![0.0; ni * nj * m];
    for i in 0..ni {
        for j in 0..nj {
            let w = maps.matrix(i, j);
            let hj = h.capsule(j);
            let dst = &mut out[(i * nj + j) * m..(i * nj + j + 1) * m];
            for (row, &hv) in w.chunks_exact(m).zip(hj) {
                for (d, wv) in dst.iter_mut().zip(row) {
                    *d += wv * hv;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[ni, nj, m], out)?;
    out.ensure_finite("reverse_predictions")?;
    Ok(out)
}

/// `squash(z) = |z|^2 / (1 + |z|^2) * z / |z|`, with `squash(0) = 0`.
pub fn squash(z: &[f64]) -> Vec<f64> {
    let norm_sq: f64 = z.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return vec![0.0; z.len()];
    }
    let norm = libm::sqrt(norm_sq);
    let scale = norm_sq / (1.0 + norm_sq) / norm;
    z.iter().map(|v| v * scale).collect()
}

/// Cosine of the angle between `a` and `b`; zero if either is the zero vector.
pub fn cosine_agreement(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (libm::sqrt(aa) * libm::sqrt(bb))).clamp(-1.0, 1.0)
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// `z[j] = sum_i c[i][j] * pred[i][j]`, shape `[J, D]`, for predictions
/// shaped `[I, J, D]`. Lower capsules are summed in the lexicographic order of
/// their prediction rows, so permuting them leaves every bit unchanged: equal
/// rows carry equal coefficients.
pub(crate) fn upper_collective(pred: &Tensor, state: &RoutingState) -> Vec<f64> {
    let (ni, nj, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let p = pred.data();
    let row = nj * d;
    let mut order: Vec<usize> = (0..ni).collect();
    order.sort_unstable_by(|&a, &b| {
        let (ra, rb) = (&p[a * row..(a + 1) * row], &p[b * row..(b + 1) * row]);
        ra.iter()
            .zip(rb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut out = vec![0.0; row];
    for &i in &order {
        let pi = &p[i * row..(i + 1) * row];
        for j in 0..nj {
            let c = state.coefficients[i * nj + j];
            for (o, v) in out[j * d..(j + 1) * d].iter_mut().zip(&pi[j * d..(j + 1) * d]) {
                *o += c * v;
            }
        }
    }
    out
}

/// `z[i] = sum_j c[i][j] * pred[i][j]`, shape `[I, D]`.
pub(crate) fn lower_collective(pred: &Tensor, state: &RoutingState) -> Vec<f64> {
    let (ni, nj, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let p = pred.data();
    let mut out = vec![0.0; ni * d];
    for i in 0..ni {
        let dst = &mut out[i * d..(i + 1) * d];
        for j in 0..nj {
            let c = state.coefficients[i * nj + j];
            for (o, v) in dst.iter_mut().zip(&p[(i * nj + j) * d..(i * nj + j + 1) * d]) {
                *o += c * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Reverse,
}

/// Shared loop. Each round normalizes the logits, forms the collective
/// prediction, squashes it and, unless it is the last round, adds the
/// cosine agreement of every individual prediction to its logit.
fn route(
    pred: &Tensor,
    direction: Direction,
    iterations: usize,
    observer: &mut dyn FnMut(&RoutingState),
) -> Result<(RoutingState, Vec<f64>, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument {
            op: "route",
            reason: "routing needs at least one iteration",
        });
    }
    let (ni, nj, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let p = pred.data();
    let mut state = RoutingState::uniform(ni, nj);
    let mut collective = Vec::new();
    let mut squashed = Vec::new();
    for round in 0..iterations {
        state.normalize();
        state.iterations_run = round + 1;
        collective = match direction {
            Direction::Forward => upper_collective(pred, &state),
            Direction::Reverse => lower_collective(pred, &state),
        };
        crate::tensor::ensure_finite("route", &collective)?;
        squashed = collective.chunks_exact(d).flat_map(squash).collect::<Vec<_>>();
        observer(&state);
        if round + 1 == iterations {
            break;
        }
        for i in 0..ni {
            for j in 0..nj {
                let u = &p[(i * nj + j) * d..(i * nj + j + 1) * d];
                let s = match direction {
                    Direction::Forward => &squashed[j * d..(j + 1) * d],
                    Direction::Reverse => &squashed[i * d..(i + 1) * d],
                };
                state.logits[i * nj + j] += cosine_agreement(u, s);
            }
        }
    }
    Ok((state, collective, squashed))
}

/// Result of routing data upward.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRouting {
    pub state: RoutingState,
    /// Pre-activation `z[j] = sum_i c[i][j] W[i][j] . x[i]`, shape `[J, N]`.
    pub z_out: Tensor,
    /// `|squash(z[j])|`, the probability that capsule `j` is on.
    pub activations: Vec<f64>,
}

pub fn route_forward(
    maps: &PredictionMaps,
    x: &CapsuleActivations,
    iterations: usize,
) -> Result<ForwardRouting> {
    route_forward_observed(maps, x, iterations, &mut |_| {})
}

/// [`route_forward`], calling `observer` with the state after every
/// normalization.
pub fn route_forward_observed(
    maps: &PredictionMaps,
    x: &CapsuleActivations,
    iterations: usize,
    observer: &mut dyn FnMut(&RoutingState),
) -> Result<ForwardRouting> {
    let pred = predictions(maps, x)?;
    let (state, z, squashed) = route(&pred, Direction::Forward, iterations, observer)?;
    let n = maps.upper.dim;
    Ok(ForwardRouting {
        state,
        z_out: Tensor::from_vec(&[maps.upper.count, n], z)?,
        activations: squashed.chunks_exact(n).map(norm).collect(),
    })
}

/// Result of routing hidden capsules back down to the lower layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseRouting {
    pub state: RoutingState,
    /// `z[i] = sum_j c[i][j] transpose(W[i][j]) . h[j]`, shape `[I, M]`.
    pub z_out: Tensor,
}

/// Routing in the generative direction. Agreement is measured between
/// each reverse prediction and the squashed lower-capsule collective, and
/// coefficients keep the `sum_i c[i][j] = 1` normalization.
pub fn route_reverse(
    maps: &PredictionMaps,
    h: &CapsuleActivations,
    iterations: usize,
) -> Result<ReverseRouting> {
    route_reverse_observed(maps, h, iterations, &mut |_| {})
}

pub fn route_reverse_observed(
    maps: &PredictionMaps,
    h: &CapsuleActivations,
    iterations: usize,
    observer: &mut dyn FnMut(&RoutingState),
) -> Result<ReverseRouting> {
    let pred = reverse_predictions(maps, h)?;
    let (state, z, _) = route(&pred, Direction::Reverse, iterations, observer)?;
    Ok(ReverseRouting {
        state,
        z_out: Tensor::from_vec(&[maps.lower.count, maps.lower.dim], z)?,
    })
}
