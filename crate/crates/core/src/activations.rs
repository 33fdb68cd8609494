//! Elementwise nonlinearities and dropout masks.

use crate::{Error, Result, SeededRng, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Logistic function `1 / (1 + exp(-x))`.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("sigmoid")?;
    Ok(x.map(sigmoid_scalar))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::InvalidArgument {
            op: "leaky_relu",
            reason: "slope must lie in (0, 1)",
        });
    }
    x.ensure_finite("leaky_relu")?;
    Ok(x.map(|v| leaky_relu_scalar(v, slope)))
}

/// Multiplies `grad` in place by the leaky-ReLU derivative at `pre`.
pub(crate) fn leaky_relu_backward(pre: &Tensor, slope: f64, grad: &mut Tensor) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p < 0.0 {
            *g *= slope;
        }
    }
}

/// Multiplies `grad` in place by the sigmoid derivative, given the sigmoid
/// output `out`.
pub(crate) fn sigmoid_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
        *g *= y * (1.0 - y);
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`. One uniform draw per entry.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument {
            op: "dropout_mask",
            reason: "rate must lie in [0, 1)",
        });
    }
    let mut mask = Tensor::full(shape, 1.0);
    if rate == 0.0 {
        return Ok(mask);
    }
    let keep = 1.0 / (1.0 - rate);
    for m in mask.data_mut() {
        *m = if rng.next_f64() < rate { 0.0 } else { keep };
    }
    Ok(mask)
}
