//! The routing-weighted product of expert neurons.
//!
//! Between a lower layer `x` (I capsules of dimension M) and an upper layer
//! `h` (J capsules of dimension N) the energy is
//!
//! ```text
//! E(x, h) = sum_{i,j} c[i][j] * E_ij(x_i, h_j),   E_ij = -h_j^T W[i][j] x_i
//! ```
//!
//! with routing coefficients `c` held fixed. There are no bias terms. The
//! Gibbs conditionals factorize over neurons:
//!
//! ```text
//! p(h[j][n] = 1 | x) = sigmoid(sum_i c[i][j] (W[i][j] x_i)[n])
//! p(x[i][m] = 1 | h) = sigmoid(sum_j c[i][j] (W[i][j]^T h_j)[m])
//! ```
//!
//! Learning ascends the log-likelihood with one-step contrastive
//! divergence: `dW[i][j] = c[i][j] (<h_j x_i^T>_data - <h_j x_i^T>_recon)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::activations::sigmoid_scalar;
use crate::optim::{SgdConfig, SgdMomentum};
use crate::routing::{
    lower_collective, predictions, reverse_predictions, route_forward, route_reverse,
    upper_collective, CapsuleActivations, CapsuleLayerSpec, PredictionMaps, RoutingState,
};
use crate::{Error, Result, SeededRng, Tensor};

/// Clamp for probabilities inside logarithms.
const XENT_EPS: f64 = 1e-12;

pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Bilinear capsule energy model. Its only parameters are the prediction
/// maps.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    maps: PredictionMaps,
}

impl EnergyModel {
    pub fn new(maps: PredictionMaps) -> Self {
        Self { maps }
    }

    pub fn lower(&self) -> CapsuleLayerSpec {
        self.maps.lower()
    }

    pub fn upper(&self) -> CapsuleLayerSpec {
        self.maps.upper()
    }

    pub fn maps(&self) -> &PredictionMaps {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut PredictionMaps {
        &mut self.maps
    }

    pub fn into_maps(self) -> PredictionMaps {
        self.maps
    }

    fn check(
        &self,
        op: &'static str,
        x: Option<&CapsuleActivations>,
        h: Option<&CapsuleActivations>,
        c: &RoutingState,
    ) -> Result<()> {
        c.expect_dims(op, self.lower().count, self.upper().count)?;
        for (acts, spec) in [(x, self.lower()), (h, self.upper())] {
            if let Some(a) = acts {
                if a.layer() != spec {
                    return Err(Error::ShapeMismatch {
                        op,
                        expected: vec![spec.count, spec.dim],
                        found: vec![a.layer().count, a.layer().dim],
                    });
                }
            }
        }
        Ok(())
    }
}

/// `-h_j^T W x_i` for one capsule pair; `w` is `N x M` row-major.
pub fn pair_energy(x_i: &[f64], h_j: &[f64], w: &[f64]) -> Result<f64> {
    if w.len() != x_i.len() * h_j.len() {
        return Err(Error::ShapeMismatch {
            op: "pair_energy",
            expected: vec![h_j.len(), x_i.len()],
            found: vec![w.len()],
        });
    }
    let mut e = 0.0;
    for (row, &hn) in w.chunks_exact(x_i.len().max(1)).zip(h_j) {
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x_i) {
            acc += wv * xv;
        }
        e += hn * acc;
    }
    Ok(-e)
}

/// `sum_{i,j} c[i][j] * pair_energy(x_i, h_j, W[i][j])`.
pub fn total_energy(
    model: &EnergyModel,
    x: &CapsuleActivations,
    h: &CapsuleActivations,
    c: &RoutingState,
) -> Result<f64> {
    model.check("total_energy", Some(x), Some(h), c)?;
    let mut total = 0.0;
    for i in 0..model.lower().count {
        for j in 0..model.upper().count {
            let cij = c.coefficient(i, j);
            if cij != 0.0 {
                total += cij * pair_energy(x.capsule(i), h.capsule(j), model.maps.matrix(i, j))?;
            }
        }
    }
    Ok(total)
}

/// Analytic `dE/dW[i][j] = -c[i][j] h_j x_i^T`, shaped like the maps.
pub fn energy_gradient(
    model: &EnergyModel,
    x: &CapsuleActivations,
    h: &CapsuleActivations,
    c: &RoutingState,
) -> Result<Tensor> {
    model.check("energy_gradient", Some(x), Some(h), c)?;
    let mut grad = PredictionMaps::zeros(model.lower(), model.upper());
    for i in 0..model.lower().count {
        for j in 0..model.upper().count {
            let cij = c.coefficient(i, j);
            let block = grad.matrix_mut(i, j);
            outer_axpy(-cij, h.capsule(j), x.capsule(i), block);
        }
    }
    Ok(grad.into_weights())
}

/// `block += alpha * a b^T`
fn outer_axpy(alpha: f64, a: &[f64], b: &[f64], block: &mut [f64]) {
    for (row, &av) in block.chunks_exact_mut(b.len()).zip(a) {
        let s = alpha * av;
        for (r, &bv) in row.iter_mut().zip(b) {
            *r += s * bv;
        }
    }
}

/// Routing-weighted hidden pre-activation `sum_i c[i][j] W[i][j] x_i`, `[J, N]`.
pub fn hidden_preactivation(
    model: &EnergyModel,
    x: &CapsuleActivations,
    c: &RoutingState,
) -> Result<Tensor> {
    model.check("hidden_preactivation", Some(x), None, c)?;
    let pred = predictions(&model.maps, x)?;
    let z = upper_collective(&pred, c);
    Tensor::from_vec(&[model.upper().count, model.upper().dim], z)
}

/// Routing-weighted visible pre-activation `sum_j c[i][j] W[i][j]^T h_j`, `[I, M]`.
pub fn visible_preactivation(
    model: &EnergyModel,
    h: &CapsuleActivations,
    c: &RoutingState,
) -> Result<Tensor> {
    model.check("visible_preactivation", None, Some(h), c)?;
    let pred = reverse_predictions(&model.maps, h)?;
    let z = lower_collective(&pred, c);
    Tensor::from_vec(&[model.lower().count, model.lower().dim], z)
}

pub fn p_hidden_given_visible(
    model: &EnergyModel,
    x: &CapsuleActivations,
    c: &RoutingState,
) -> Result<Tensor> {
    let z = hidden_preactivation(model, x, c)?;
    crate::activations::sigmoid(&z)
}

pub fn p_visible_given_hidden(
    model: &EnergyModel,
    h: &CapsuleActivations,
    c: &RoutingState,
) -> Result<Tensor> {
    let z = visible_preactivation(model, h, c)?;
    crate::activations::sigmoid(&z)
}

/// Independent Bernoulli draws, one uniform per entry in row-major order.
pub fn sample_bernoulli(probs: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument {
            op: "sample_bernoulli",
            reason: "probabilities must lie in [0, 1]",
        });
    }
    let mut out = probs.clone();
    for v in out.data_mut() {
        *v = if rng.next_f64() < *v { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// The four phase statistics of one CD-1 chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CdPhases {
    /// `p(h | x_data)`, `[J, N]`.
    pub h_probs: Tensor,
    /// Binary sample of `h_probs`.
    pub h_sample: Tensor,
    /// `p(x | h_sample)`, used as probabilities, `[I, M]`.
    pub x_recon: Tensor,
    /// `p(h | x_recon)`, `[J, N]`.
    pub h_recon: Tensor,
}

/// Runs one Gibbs step from `x` with fixed coefficients: sample the
/// hidden layer, then reconstruct the visible layer and re-infer the
/// hidden layer with mean-field probabilities.
pub fn cd1_phases(
    model: &EnergyModel,
    x: &CapsuleActivations,
    c: &RoutingState,
    rng: &mut SeededRng,
) -> Result<CdPhases> {
    let h_probs = p_hidden_given_visible(model, x, c)?;
    let h_sample = sample_bernoulli(&h_probs, rng)?;
    let h_acts = CapsuleActivations::new(model.upper(), h_sample.clone())?;
    let x_recon = p_visible_given_hidden(model, &h_acts, c)?;
    let x_recon_acts = CapsuleActivations::new(model.lower(), x_recon.clone())?;
    let h_recon = p_hidden_given_visible(model, &x_recon_acts, c)?;
    Ok(CdPhases {
        h_probs,
        h_sample,
        x_recon,
        h_recon,
    })
}

/// Batch-averaged CD-1 statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CdBatchResult {
    /// Ascent direction for the log-likelihood, shaped like the maps.
    pub grad: Tensor,
    /// `c[i][j] |h_probs_j| |x_i|`, averaged over the batch, `I x J`.
    pub data_stats: Vec<f64>,
    /// `c[i][j] |h_recon_j| |x_recon_i|`, averaged over the batch, `I x J`.
    pub model_stats: Vec<f64>,
    /// Mean binary cross-entropy between the data and its reconstruction.
    pub reconstruction_xent: f64,
    /// Per-sample phases, in batch order.
    pub phases: Vec<CdPhases>,
}

/// Mean binary cross-entropy `-[x ln r + (1 - x) ln(1 - r)]`.
pub fn binary_cross_entropy(data: &[f64], recon: &[f64]) -> f64 {
    let total: f64 = data
        .iter()
        .zip(recon)
        .map(|(&x, &r)| {
            let r = r.clamp(XENT_EPS, 1.0 - XENT_EPS);
            -(x * libm::log(r) + (1.0 - x) * libm::log(1.0 - r))
        })
        .sum();
    total / data.len() as f64
}

/// CD-1 over a batch. For every sample, routing by agreement on the data
/// fixes `c`, which then stays frozen through that sample's Gibbs step and
/// weights its gradient contribution.
pub fn cd1_step(
    model: &EnergyModel,
    batch: &[CapsuleActivations],
    routing_iterations: usize,
    rng: &mut SeededRng,
) -> Result<CdBatchResult> {
    let routings = batch
        .iter()
        .map(|x| route_forward(&model.maps, x, routing_iterations).map(|r| r.state))
        .collect::<Result<Vec<_>>>()?;
    cd1_step_with_routing(model, batch, &routings, rng)
}

/// [`cd1_step`] with externally supplied coefficients, one per sample.
pub fn cd1_step_with_routing(
    model: &EnergyModel,
    batch: &[CapsuleActivations],
    routings: &[RoutingState],
    rng: &mut SeededRng,
) -> Result<CdBatchResult> {
    if batch.is_empty() || batch.len() != routings.len() {
        return Err(Error::InvalidArgument {
            op: "cd1_step",
            reason: "need one routing state per sample and a non-empty batch",
        });
    }
    let (lo, up) = (model.lower(), model.upper());
    let mut grad = PredictionMaps::zeros(lo, up);
    let mut data_stats = vec![0.0; lo.count * up.count];
    let mut model_stats = vec![0.0; lo.count * up.count];
    let mut xent = 0.0;
    let mut phases = Vec::with_capacity(batch.len());
    for (x, c) in batch.iter().zip(routings) {
        model.check("cd1_step", Some(x), None, c)?;
        if x.flat().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument {
                op: "cd1_step",
                reason: "visible data must lie in [0, 1]",
            });
        }
        let ph = cd1_phases(model, x, c, rng)?;
        let x_recon = ph.x_recon.data();
        for i in 0..lo.count {
            let xi = x.capsule(i);
            let ri = &x_recon[i * lo.dim..(i + 1) * lo.dim];
            for j in 0..up.count {
                let cij = c.coefficient(i, j);
                if cij == 0.0 {
                    continue;
                }
                let hp = &ph.h_probs.data()[j * up.dim..(j + 1) * up.dim];
                let hr = &ph.h_recon.data()[j * up.dim..(j + 1) * up.dim];
                let block = grad.matrix_mut(i, j);
                for ((row, &p), &q) in block.chunks_exact_mut(lo.dim).zip(hp).zip(hr) {
                    for ((g, &xv), &rv) in row.iter_mut().zip(xi).zip(ri) {
                        *g += cij * (p * xv - q * rv);
                    }
                }
                data_stats[i * up.count + j] += cij * norm(hp) * norm(xi);
                model_stats[i * up.count + j] += cij * norm(hr) * norm(ri);
            }
        }
        xent += binary_cross_entropy(x.flat(), x_recon);
        phases.push(ph);
    }
    let inv = 1.0 / batch.len() as f64;
    let grad = grad.into_weights().scale(inv);
    data_stats.iter_mut().for_each(|v| *v *= inv);
    model_stats.iter_mut().for_each(|v| *v *= inv);
    grad.ensure_finite("cd1_step")?;
    Ok(CdBatchResult {
        grad,
        data_stats,
        model_stats,
        reconstruction_xent: xent * inv,
        phases,
    })
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// One optimizer step's worth of metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub reconstruction_xent: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Sample-weighted mean of the batch cross-entropies.
    pub mean_reconstruction_xent: f64,
    pub steps: Vec<StepRecord>,
}

/// Resumable CD-1 training state: model, optimizer, generator and the
/// number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleTrainer {
    pub model: EnergyModel,
    pub optimizer: SgdMomentum,
    pub rng: SeededRng,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub batch_size: usize,
    pub routing_iterations: usize,
}

impl CapsuleTrainer {
    pub fn new(
        model: EnergyModel,
        sgd: SgdConfig,
        rng: SeededRng,
        batch_size: usize,
        routing_iterations: usize,
    ) -> Result<Self> {
        if batch_size == 0 || routing_iterations == 0 {
            return Err(Error::InvalidArgument {
                op: "CapsuleTrainer",
                reason: "batch size and routing iterations must be positive",
            });
        }
        let optimizer = SgdMomentum::new(sgd, &[model.maps.weights()])?;
        Ok(Self {
            model,
            optimizer,
            rng,
            epochs_done: 0,
            steps_done: 0,
            batch_size,
            routing_iterations,
        })
    }

    /// One pass over `data` in an order shuffled by the trainer's generator.
    pub fn run_epoch(&mut self, data: &[CapsuleActivations]) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::InvalidArgument {
                op: "run_epoch",
                reason: "empty dataset",
            });
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let epoch = self.epochs_done + 1;
        let mut steps = Vec::new();
        let mut xent_total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let batch: Vec<CapsuleActivations> = chunk.iter().map(|&k| data[k].clone()).collect();
            let result = cd1_step(&self.model, &batch, self.routing_iterations, &mut self.rng)?;
            let learning_rate = self.optimizer.learning_rate;
            // The optimizer descends; CD gives the ascent direction.
            let descent = result.grad.scale(-1.0);
            self.optimizer
                .step(&mut [self.model.maps.weights_mut()], &[&descent])?;
            self.steps_done += 1;
            xent_total += result.reconstruction_xent * batch.len() as f64;
            steps.push(StepRecord {
                epoch,
                step: self.steps_done,
                reconstruction_xent: result.reconstruction_xent,
                grad_norm: result.grad.norm(),
                learning_rate,
            });
        }
        self.epochs_done = epoch;
        Ok(EpochSummary {
            epoch,
            mean_reconstruction_xent: xent_total / data.len() as f64,
            steps,
        })
    }
}

/// Trains for `epochs` passes and returns the model with per-epoch metrics.
pub fn train_capsule_layer(
    model: EnergyModel,
    data: &[CapsuleActivations],
    epochs: usize,
    sgd: SgdConfig,
    rng: SeededRng,
    batch_size: usize,
    routing_iterations: usize,
) -> Result<(EnergyModel, Vec<EpochSummary>)> {
    let mut trainer = CapsuleTrainer::new(model, sgd, rng, batch_size, routing_iterations)?;
    let log = (0..epochs)
        .map(|_| trainer.run_epoch(data))
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.model, log))
}

/// Maps lower-layer capsule activations to an image.
pub trait Decoder {
    fn decode_capsules(&self, x: &CapsuleActivations) -> Result<Tensor>;
}

/// Hidden layer with every capsule zero except `capsule_index`, which is
/// `sigmoid` of a standard normal draw.
pub fn seed_hidden(
    model: &EnergyModel,
    capsule_index: usize,
    rng: &mut SeededRng,
) -> Result<CapsuleActivations> {
    let up = model.upper();
    if capsule_index >= up.count {
        return Err(Error::IndexOutOfRange {
            op: "generate",
            index: capsule_index,
            len: up.count,
        });
    }
    let draw = crate::rng::gaussian_sample(rng, &[up.dim])?;
    let mut h = CapsuleActivations::zeros(up);
    for (dst, &z) in h.capsule_mut(capsule_index).iter_mut().zip(draw.data()) {
        *dst = sigmoid_scalar(z);
    }
    Ok(h)
}

/// Visible probabilities for a hidden configuration, using coefficients
/// obtained by routing `h` back down.
pub fn visible_from_hidden(
    model: &EnergyModel,
    h: &CapsuleActivations,
    routing_iterations: usize,
) -> Result<CapsuleActivations> {
    let reverse = route_reverse(&model.maps, h, routing_iterations)?;
    let probs = crate::activations::sigmoid(&reverse.z_out)?;
    CapsuleActivations::new(model.lower(), probs)
}

/// Samples one image from hidden capsule `capsule_index`.
pub fn generate(
    model: &EnergyModel,
    capsule_index: usize,
    rng: &mut SeededRng,
    routing_iterations: usize,
    decoder: &dyn Decoder,
) -> Result<Tensor> {
    let h = seed_hidden(model, capsule_index, rng)?;
    let x = visible_from_hidden(model, &h, routing_iterations)?;
    decoder.decode_capsules(&x)
}
