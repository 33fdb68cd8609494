//! Exact quantities for tiny capsule energy models by full enumeration of
//! binary configurations.
//!
//! Everything here is computed with its own loops over the raw weights, not
//! through the conditional and gradient code in [`crate::energy`], so the two
//! can be checked against each other. [`verify_suite`] runs that comparison
//! on random instances.

use alloc::vec;
use alloc::vec::Vec;

use crate::energy::{
    cd1_step_with_routing, energy_gradient, p_hidden_given_visible, p_visible_given_hidden,
    total_energy, EnergyModel,
};
use crate::routing::{
    route_forward, route_forward_observed, CapsuleActivations, CapsuleLayerSpec,
    PredictionMaps, RoutingState,
};
use crate::{Error, Result, SeededRng, Tensor};

/// Largest `I*M + J*N` the oracles will enumerate.
pub const MAX_TOTAL_NEURONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyModelBound {
    pub max_total_neurons: usize,
}

impl Default for TinyModelBound {
    fn default() -> Self {
        Self {
            max_total_neurons: MAX_TOTAL_NEURONS,
        }
    }
}

impl TinyModelBound {
    pub fn check(&self, model: &EnergyModel) -> Result<usize> {
        let n = model.lower().width() + model.upper().width();
        if n > self.max_total_neurons.min(MAX_TOTAL_NEURONS) {
            return Err(Error::BoundExceeded {
                neurons: n,
                max: self.max_total_neurons.min(MAX_TOTAL_NEURONS),
            });
        }
        Ok(n)
    }
}

/// The binary configuration whose neuron `k` is bit `k` of `bits`.
pub fn binary_config(layer: CapsuleLayerSpec, bits: u64) -> CapsuleActivations {
    let values = (0..layer.width())
        .map(|k| ((bits >> k) & 1) as f64)
        .collect();
    CapsuleActivations::from_flat(layer, values).expect("width matches by construction")
}

/// Independent evaluation of `a[j][n] = sum_i c[i][j] sum_m W[i][j][n][m] x[i][m]`.
fn hidden_field(model: &EnergyModel, c: &RoutingState, x: &[f64]) -> Vec<f64> {
    let (lo, up) = (model.lower(), model.upper());
    let w = model.maps().weights().data();
    let mut a = vec![0.0; up.width()];
    for j in 0..up.count {
        for n in 0..up.dim {
            let mut total = 0.0;
            for i in 0..lo.count {
                let mut dot = 0.0;
                for m in 0..lo.dim {
                    dot += w[((i * up.count + j) * up.dim + n) * lo.dim + m] * x[i * lo.dim + m];
                }
                total += c.coefficient(i, j) * dot;
            }
            a[j * up.dim + n] = total;
        }
    }
    a
}

fn for_each_joint(
    model: &EnergyModel,
    mut f: impl FnMut(&CapsuleActivations, &CapsuleActivations),
) {
    let (lo, up) = (model.lower(), model.upper());
    for xb in 0..(1u64 << lo.width()) {
        let x = binary_config(lo, xb);
        for hb in 0..(1u64 << up.width()) {
            f(&x, &binary_config(up, hb));
        }
    }
}

/// `Z = sum_{x,h} exp(-E(x, h))`, summing Boltzmann weights of the energy.
pub fn brute_partition(model: &EnergyModel, c: &RoutingState) -> Result<f64> {
    TinyModelBound::default().check(model)?;
    let mut z = 0.0;
    let mut err = None;
    for_each_joint(model, |x, h| match total_energy(model, x, h, c) {
        Ok(e) => z += libm::exp(-e),
        Err(e) => err = Some(e),
    });
    err.map_or(Ok(z), Err)
}

/// `Z` as a sum over configurations of the product of per-neuron expert
/// factors `prod_j prod_n exp(h[j][n] * a[j][n](x))`.
pub fn product_form_partition(model: &EnergyModel, c: &RoutingState) -> Result<f64> {
    TinyModelBound::default().check(model)?;
    c.expect_dims("product_form_partition", model.lower().count, model.upper().count)?;
    let mut z = 0.0;
    let up = model.upper();
    for xb in 0..(1u64 << model.lower().width()) {
        let x = binary_config(model.lower(), xb);
        let a = hidden_field(model, c, x.flat());
        for hb in 0..(1u64 << up.width()) {
            let mut product = 1.0;
            for (k, &ak) in a.iter().enumerate() {
                if (hb >> k) & 1 == 1 {
                    product *= libm::exp(ak);
                }
            }
            z += product;
        }
    }
    Ok(z)
}

fn check_binary(op: &'static str, model: &EnergyModel, x: &CapsuleActivations) -> Result<()> {
    if x.layer() != model.lower() {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![model.lower().count, model.lower().dim],
            found: vec![x.layer().count, x.layer().dim],
        });
    }
    if x.flat().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument {
            op,
            reason: "oracle configurations must be binary",
        });
    }
    Ok(())
}

/// `ln prod_j prod_n (1 + exp(a[j][n](x)))`, the unnormalized log marginal.
fn log_unnormalized_marginal(model: &EnergyModel, c: &RoutingState, x: &[f64]) -> f64 {
    hidden_field(model, c, x)
        .iter()
        .map(|&a| {
            // ln(1 + e^a), stable for large |a|
            if a > 0.0 {
                a + libm::log1p(libm::exp(-a))
            } else {
                libm::log1p(libm::exp(a))
            }
        })
        .sum()
}

/// Closed-form visible marginal `P(x) = prod_j prod_n (1 + exp(a[j][n](x))) / Z`.
pub fn brute_marginal(model: &EnergyModel, c: &RoutingState, x: &CapsuleActivations) -> Result<f64> {
    check_binary("brute_marginal", model, x)?;
    let z = brute_partition(model, c)?;
    Ok(libm::exp(log_unnormalized_marginal(model, c, x.flat())) / z)
}

/// `ln P(x)` from the closed form.
pub fn brute_log_marginal(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
) -> Result<f64> {
    check_binary("brute_log_marginal", model, x)?;
    let z = brute_partition(model, c)?;
    Ok(log_unnormalized_marginal(model, c, x.flat()) - libm::log(z))
}

/// `P(x) = sum_h exp(-E(x, h)) / Z` by enumerating the hidden layer.
pub fn enumerated_marginal(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
) -> Result<f64> {
    check_binary("enumerated_marginal", model, x)?;
    let z = brute_partition(model, c)?;
    let up = model.upper();
    let mut total = 0.0;
    for hb in 0..(1u64 << up.width()) {
        total += libm::exp(-total_energy(model, x, &binary_config(up, hb), c)?);
    }
    Ok(total / z)
}

/// `P(h[j][n] = 1 | x)` as joint over marginal, both enumerated.
pub fn enumerated_hidden_conditional(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
) -> Result<Tensor> {
    check_binary("enumerated_hidden_conditional", model, x)?;
    TinyModelBound::default().check(model)?;
    let up = model.upper();
    let mut on = vec![0.0; up.width()];
    let mut total = 0.0;
    for hb in 0..(1u64 << up.width()) {
        let w = libm::exp(-total_energy(model, x, &binary_config(up, hb), c)?);
        total += w;
        for (k, o) in on.iter_mut().enumerate() {
            if (hb >> k) & 1 == 1 {
                *o += w;
            }
        }
    }
    Tensor::from_vec(&[up.count, up.dim], on.into_iter().map(|v| v / total).collect())
}

/// `P(x[i][m] = 1 | h)` as joint over marginal, both enumerated.
pub fn enumerated_visible_conditional(
    model: &EnergyModel,
    c: &RoutingState,
    h: &CapsuleActivations,
) -> Result<Tensor> {
    TinyModelBound::default().check(model)?;
    let lo = model.lower();
    let mut on = vec![0.0; lo.width()];
    let mut total = 0.0;
    for xb in 0..(1u64 << lo.width()) {
        let w = libm::exp(-total_energy(model, &binary_config(lo, xb), h, c)?);
        total += w;
        for (k, o) in on.iter_mut().enumerate() {
            if (xb >> k) & 1 == 1 {
                *o += w;
            }
        }
    }
    Tensor::from_vec(&[lo.count, lo.dim], on.into_iter().map(|v| v / total).collect())
}

/// Exact `d ln P(x) / dW`: the expectation of `c[i][j] h_j x_i^T` under
/// `P(h | x)` minus its expectation under the model joint `P(x', h)`.
pub fn brute_loglik_grad(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
) -> Result<Tensor> {
    check_binary("brute_loglik_grad", model, x)?;
    TinyModelBound::default().check(model)?;
    let (lo, up) = (model.lower(), model.upper());
    let shape = model.maps().weights().shape().to_vec();
    let stat = |xs: &[f64], hs: &[f64], weight: f64, out: &mut [f64]| {
        for i in 0..lo.count {
            for j in 0..up.count {
                let cij = c.coefficient(i, j);
                for n in 0..up.dim {
                    for m in 0..lo.dim {
                        out[((i * up.count + j) * up.dim + n) * lo.dim + m] +=
                            weight * cij * hs[j * up.dim + n] * xs[i * lo.dim + m];
                    }
                }
            }
        }
    };
    let len: usize = shape.iter().product();

    let mut data = vec![0.0; len];
    let mut data_norm = 0.0;
    for hb in 0..(1u64 << up.width()) {
        let h = binary_config(up, hb);
        let w = libm::exp(-total_energy(model, x, &h, c)?);
        data_norm += w;
        stat(x.flat(), h.flat(), w, &mut data);
    }

    let mut model_term = vec![0.0; len];
    let mut z = 0.0;
    let mut err = None;
    for_each_joint(model, |xs, hs| match total_energy(model, xs, hs, c) {
        Ok(e) => {
            let w = libm::exp(-e);
            z += w;
            stat(xs.flat(), hs.flat(), w, &mut model_term);
        }
        Err(e) => err = Some(e),
    });
    if let Some(e) = err {
        return Err(e);
    }
    let grad = data
        .iter()
        .zip(&model_term)
        .map(|(d, m)| d / data_norm - m / z)
        .collect();
    Tensor::from_vec(&shape, grad)
}

/// Which check [`verify_suite`] should sabotage, to prove the harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Perturbs the analytic log-likelihood gradient before comparison.
    CorruptGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Worst observed error, or the worst similarity for direction checks.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Instance counts for [`verify_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSize {
    pub conditional_instances: usize,
    pub partition_instances: usize,
    pub gradient_instances: usize,
    pub cd_instances: usize,
    pub cd_chains: usize,
    pub routing_instances: usize,
}

impl Default for SuiteSize {
    fn default() -> Self {
        Self {
            conditional_instances: 200,
            partition_instances: 100,
            gradient_instances: 50,
            cd_instances: 20,
            cd_chains: 10_000,
            routing_instances: 100,
        }
    }
}

impl SuiteSize {
    /// A reduced suite that finishes in well under a second.
    pub fn quick() -> Self {
        Self {
            conditional_instances: 10,
            partition_instances: 4,
            gradient_instances: 3,
            cd_instances: 2,
            cd_chains: 2000,
            routing_instances: 5,
        }
    }
}

/// Random tiny model with at most `max_neurons` binary neurons and
/// `N(0, weight_std^2)` weights.
pub fn random_tiny_model(
    rng: &mut SeededRng,
    max_count: usize,
    max_dim: usize,
    max_neurons: usize,
    weight_std: f64,
) -> EnergyModel {
    loop {
        let ni = 1 + rng.below(max_count);
        let m = 1 + rng.below(max_dim);
        let nj = 1 + rng.below(max_count);
        let n = 1 + rng.below(max_dim);
        if ni * m + nj * n > max_neurons {
            continue;
        }
        let lo = CapsuleLayerSpec { count: ni, dim: m };
        let up = CapsuleLayerSpec { count: nj, dim: n };
        let maps = PredictionMaps::gaussian(lo, up, weight_std, rng).expect("positive extents");
        return EnergyModel::new(maps);
    }
}

/// Non-negative coefficients, normalized so `sum_i c[i][j] = 1`.
pub fn random_coefficients(rng: &mut SeededRng, ni: usize, nj: usize) -> RoutingState {
    let mut c: Vec<f64> = (0..ni * nj).map(|_| 0.05 + rng.next_f64()).collect();
    for j in 0..nj {
        let total: f64 = (0..ni).map(|i| c[i * nj + j]).sum();
        for i in 0..ni {
            c[i * nj + j] /= total;
        }
    }
    RoutingState::from_coefficients(ni, nj, c).expect("finite, non-negative")
}

pub fn random_binary(rng: &mut SeededRng, layer: CapsuleLayerSpec) -> CapsuleActivations {
    binary_config(layer, rng.next_u64() & ((1u64 << layer.width()) - 1))
}

/// `max |a - b| / max |b|`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Central finite differences of `ln P(x)` with respect to every weight.
pub fn finite_difference_loglik_grad(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
    step: f64,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(model.maps().weights().len());
    for k in 0..model.maps().weights().len() {
        let (mut plus, mut minus) = (model.clone(), model.clone());
        plus.maps_mut().weights_mut().data_mut()[k] += step;
        minus.maps_mut().weights_mut().data_mut()[k] -= step;
        let lp = brute_log_marginal(&plus, c, x)?;
        let lm = brute_log_marginal(&minus, c, x)?;
        out.push((lp - lm) / (2.0 * step));
    }
    Tensor::from_vec(model.maps().weights().shape(), out)
}

/// Worst relative error between the closed-form conditionals and
/// `sigmoid(E(unit off) - E(unit on))`, over every neuron of both layers.
pub fn conditional_energy_error(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
    h: &CapsuleActivations,
) -> Result<f64> {
    let ph = p_hidden_given_visible(model, x, c)?;
    let pv = p_visible_given_hidden(model, h, c)?;
    let mut worst = 0.0f64;
    let flip = |acts: &CapsuleActivations, k: usize, v: f64| {
        let mut a = acts.clone();
        a.flat_mut()[k] = v;
        a
    };
    for k in 0..h.flat().len() {
        let de = total_energy(model, x, &flip(h, k, 0.0), c)? - total_energy(model, x, &flip(h, k, 1.0), c)?;
        let expect = crate::activations::sigmoid_scalar(de);
        worst = worst.max((ph.data()[k] - expect).abs() / expect);
    }
    for k in 0..x.flat().len() {
        let de = total_energy(model, &flip(x, k, 0.0), h, c)? - total_energy(model, &flip(x, k, 1.0), h, c)?;
        let expect = crate::activations::sigmoid_scalar(de);
        worst = worst.max((pv.data()[k] - expect).abs() / expect);
    }
    Ok(worst)
}

/// Mean CD-1 gradient over `chains` independent chains started at `x`.
pub fn mean_cd1_gradient(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
    chains: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let batch = vec![x.clone(); chains];
    let routings = vec![c.clone(); chains];
    Ok(cd1_step_with_routing(model, &batch, &routings, rng)?.grad)
}

/// Runs every oracle comparison on random tiny instances drawn from `seed`.
pub fn verify_suite(seed: u64, size: SuiteSize, fault: Fault) -> Result<VerifyReport> {
    let mut rng = SeededRng::new(seed);
    let mut checks = Vec::new();
    let mut record = |name, instances, worst: f64, tolerance, higher_is_better: bool| {
        let passed = if higher_is_better {
            worst > tolerance
        } else {
            worst <= tolerance
        };
        checks.push(CheckOutcome {
            name,
            instances,
            worst,
            tolerance,
            passed,
        });
    };

    let n = size.conditional_instances;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let model = random_tiny_model(&mut rng, 3, 3, 18, 1.0);
        let c = random_coefficients(&mut rng, model.lower().count, model.upper().count);
        let x = random_binary(&mut rng, model.lower());
        let h = random_binary(&mut rng, model.upper());
        worst = worst.max(conditional_energy_error(&model, &c, &x, &h)?);
    }
    record("conditional_energy_consistency", n, worst, 1e-8, false);

    let n = size.partition_instances;
    let (mut worst_z, mut worst_sum, mut worst_marg, mut worst_cond) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let model = random_tiny_model(&mut rng, 3, 3, 16, 1.0);
        let c = random_coefficients(&mut rng, model.lower().count, model.upper().count);
        let p = partition_check(&model, &c)?;
        worst_z = worst_z.max(p.partition_error);
        worst_marg = worst_marg.max(p.marginal_error);
        worst_sum = worst_sum.max(p.normalization_error);
        let x = random_binary(&mut rng, model.lower());
        let closed = p_hidden_given_visible(&model, &x, &c)?;
        let joint = enumerated_hidden_conditional(&model, &c, &x)?;
        worst_cond = worst_cond.max(relative_error(closed.data(), joint.data()));
        let h = random_binary(&mut rng, model.upper());
        let closed = p_visible_given_hidden(&model, &h, &c)?;
        let joint = enumerated_visible_conditional(&model, &c, &h)?;
        worst_cond = worst_cond.max(relative_error(closed.data(), joint.data()));
    }
    record("partition_energy_vs_product_form", n, worst_z, 1e-10, false);
    record("marginal_closed_vs_enumerated", n, worst_marg, 1e-10, false);
    record("marginals_sum_to_one", n, worst_sum, 1e-10, false);
    record("conditional_from_joint", n, worst_cond, 1e-10, false);

    let n = size.gradient_instances;
    let (mut worst_ll, mut worst_e) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let model = random_tiny_model(&mut rng, 2, 3, 10, 1.0);
        let c = random_coefficients(&mut rng, model.lower().count, model.upper().count);
        let x = random_binary(&mut rng, model.lower());
        let mut exact = brute_loglik_grad(&model, &c, &x)?;
        if fault == Fault::CorruptGradient {
            let scale = exact.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            exact.data_mut()[0] += 1e-3 * scale.max(1e-3);
        }
        let fd = finite_difference_loglik_grad(&model, &c, &x, 1e-5)?;
        worst_ll = worst_ll.max(relative_error(exact.data(), fd.data()));
        let h = random_binary(&mut rng, model.upper());
        worst_e = worst_e.max(energy_gradient_error(&model, &c, &x, &h)?);
    }
    record("loglik_gradient_vs_finite_differences", n, worst_ll, 1e-6, false);
    record("energy_gradient_vs_finite_differences", n, worst_e, 1e-8, false);

    let n = size.cd_instances;
    let mut worst = if n == 0 { 1.0 } else { f64::INFINITY };
    for _ in 0..n {
        let (model, c, x) = cd_direction_instance(&mut rng)?;
        let exact = brute_loglik_grad(&model, &c, &x)?;
        let cd = mean_cd1_gradient(&model, &c, &x, size.cd_chains, &mut rng)?;
        worst = worst.min(cosine_similarity(cd.data(), exact.data()));
    }
    record("cd1_direction_cosine", n, worst, 0.5, true);

    let n = size.routing_instances;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let model = random_tiny_model(&mut rng, 6, 4, 60, 1.0);
        let x = CapsuleActivations::from_flat(
            model.lower(),
            (0..model.lower().width()).map(|_| rng.next_f64()).collect(),
        )?;
        let nj = model.upper().count;
        route_forward_observed(model.maps(), &x, 4, &mut |s| {
            for j in 0..nj {
                let total: f64 = (0..s.lower_count()).map(|i| s.coefficient(i, j)).sum();
                worst = worst.max((total - 1.0).abs());
            }
        })?;
    }
    record("routing_normalization", n, worst, 1e-12, false);

    Ok(VerifyReport { seed, checks })
}

/// Errors from one exhaustive pass over a model's configurations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionCheck {
    pub partition: f64,
    /// Relative gap between the energy-form and product-form sums.
    pub partition_error: f64,
    /// Worst relative gap between closed-form and enumerated marginals.
    pub marginal_error: f64,
    /// `|sum_x P(x) - 1|` for the closed-form marginals.
    pub normalization_error: f64,
}

/// Computes `Z` both ways and compares every visible marginal, sharing one
/// enumeration so that larger models stay cheap.
pub fn partition_check(model: &EnergyModel, c: &RoutingState) -> Result<PartitionCheck> {
    let z = brute_partition(model, c)?;
    let z_product = product_form_partition(model, c)?;
    let up = model.upper();
    let hidden: Vec<CapsuleActivations> = (0..(1u64 << up.width()))
        .map(|hb| binary_config(up, hb))
        .collect();
    let (mut total, mut marginal_error) = (0.0, 0.0f64);
    for xb in 0..(1u64 << model.lower().width()) {
        let x = binary_config(model.lower(), xb);
        let closed = libm::exp(log_unnormalized_marginal(model, c, x.flat())) / z;
        let mut enumerated = 0.0;
        for h in &hidden {
            enumerated += libm::exp(-total_energy(model, &x, h, c)?);
        }
        enumerated /= z;
        marginal_error = marginal_error.max((closed - enumerated).abs() / enumerated);
        total += closed;
    }
    Ok(PartitionCheck {
        partition: z,
        partition_error: (z - z_product).abs() / z,
        marginal_error,
        normalization_error: (total - 1.0).abs(),
    })
}

/// Relative error of the analytic energy gradient against central
/// differences of [`total_energy`].
pub fn energy_gradient_error(
    model: &EnergyModel,
    c: &RoutingState,
    x: &CapsuleActivations,
    h: &CapsuleActivations,
) -> Result<f64> {
    let analytic = energy_gradient(model, x, h, c)?;
    let step = 1e-5;
    let mut fd = Vec::with_capacity(analytic.len());
    for k in 0..analytic.len() {
        let (mut plus, mut minus) = (model.clone(), model.clone());
        plus.maps_mut().weights_mut().data_mut()[k] += step;
        minus.maps_mut().weights_mut().data_mut()[k] -= step;
        fd.push((total_energy(&plus, x, h, c)? - total_energy(&minus, x, h, c)?) / (2.0 * step));
    }
    Ok(relative_error(analytic.data(), &fd))
}

/// A tiny instance for the CD-1 direction comparison: weights `N(0, 1)`,
/// coefficients from routing a random binary visible configuration.
pub fn cd_direction_instance(
    rng: &mut SeededRng,
) -> Result<(EnergyModel, RoutingState, CapsuleActivations)> {
    let model = random_tiny_model(rng, 2, 3, 12, 1.0);
    let x = random_binary(rng, model.lower());
    let c = route_forward(model.maps(), &x, 3)?.state;
    Ok((model, c, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> EnergyModel {
        let l = CapsuleLayerSpec { count: 1, dim: 1 };
        EnergyModel::new(PredictionMaps::new(l, l, Tensor::from_vec(&[1, 1, 1, 1], vec![w]).unwrap()).unwrap())
    }

    #[test]
    fn one_by_one_partitions() {
        let c = RoutingState::from_coefficients(1, 1, vec![1.0]).unwrap();
        assert_eq!(brute_partition(&single(0.0), &c).unwrap(), 4.0);
        let w: f64 = 0.7;
        let z = brute_partition(&single(w), &c).unwrap();
        assert!((z - (3.0 + w.exp())).abs() < 1e-14);
        assert!((product_form_partition(&single(w), &c).unwrap() - z).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_give_uniform_marginal() {
        let lo = CapsuleLayerSpec { count: 2, dim: 2 };
        let up = CapsuleLayerSpec { count: 2, dim: 1 };
        let model = EnergyModel::new(PredictionMaps::zeros(lo, up));
        let c = random_coefficients(&mut SeededRng::new(1), 2, 2);
        for xb in 0..16 {
            let p = brute_marginal(&model, &c, &binary_config(lo, xb)).unwrap();
            assert!((p - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_gradient_is_centered_outer_product() {
        // All conditionals are 1/2 and the model marginal is uniform, so the
        // gradient is c * 0.5 * (x - 1/2) for every hidden unit.
        let lo = CapsuleLayerSpec { count: 2, dim: 2 };
        let up = CapsuleLayerSpec { count: 1, dim: 2 };
        let model = EnergyModel::new(PredictionMaps::zeros(lo, up));
        let c = RoutingState::from_coefficients(2, 1, vec![0.3, 0.7]).unwrap();
        let x = binary_config(lo, 0b0110);
        let g = brute_loglik_grad(&model, &c, &x).unwrap();
        for i in 0..2 {
            for n in 0..2 {
                for m in 0..2 {
                    let expect = c.coefficient(i, 0) * (0.5 * x.flat()[i * 2 + m] - 0.25);
                    assert!((g.data()[(i * 2 + n) * 2 + m] - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn bound_is_enforced() {
        let lo = CapsuleLayerSpec { count: 3, dim: 4 };
        let up = CapsuleLayerSpec { count: 3, dim: 3 };
        let model = EnergyModel::new(PredictionMaps::zeros(lo, up));
        let c = RoutingState::uniform(3, 3);
        assert!(matches!(
            brute_partition(&model, &c),
            Err(Error::BoundExceeded { neurons: 21, max: 20 })
        ));
        let x = binary_config(lo, 0);
        assert!(brute_loglik_grad(&model, &c, &x).is_err());
        let half = CapsuleActivations::from_flat(lo, vec![0.5; 12]).unwrap();
        assert!(brute_marginal(&model, &c, &half).is_err());
    }

    #[test]
    fn rbm_special_case_matches_textbook_enumerator() {
        // I = J = 1 and c = 1 is a bias-free RBM with weight matrix W.
        let mut rng = SeededRng::new(3);
        let lo = CapsuleLayerSpec { count: 1, dim: 3 };
        let up = CapsuleLayerSpec { count: 1, dim: 2 };
        let model = EnergyModel::new(PredictionMaps::gaussian(lo, up, 1.0, &mut rng).unwrap());
        let w = model.maps().weights().data().to_vec();
        let mut z = 0.0;
        for v in 0..8u32 {
            for h in 0..4u32 {
                let mut vwh = 0.0;
                for n in 0..2 {
                    for m in 0..3 {
                        vwh += ((h >> n) & 1) as f64 * w[n * 3 + m] * ((v >> m) & 1) as f64;
                    }
                }
                z += vwh.exp();
            }
        }
        let c = RoutingState::from_coefficients(1, 1, vec![1.0]).unwrap();
        let ours = brute_partition(&model, &c).unwrap();
        assert!((ours - z).abs() / z < 1e-13);
    }

    #[test]
    fn suite_passes_and_detects_fault() {
        let size = SuiteSize::quick();
        let report = verify_suite(17, size, Fault::None).unwrap();
        assert!(report.passed(), "{report:?}");
        let again = verify_suite(17, size, Fault::None).unwrap();
        assert_eq!(report, again);
        let broken = verify_suite(17, size, Fault::CorruptGradient).unwrap();
        assert!(!broken.passed());
    }
}
