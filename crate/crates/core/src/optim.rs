//! SGD with momentum, multiplicative learning-rate decay and L2 penalty.

use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// In `[0, 1)`.
    pub momentum: f64,
    /// Per-step factor applied to the learning rate, in `(0, 1]`.
    pub decay: f64,
    pub l2: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "SgdConfig";
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument {
                op,
                reason: "learning rate must be finite and non-negative",
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument {
                op,
                reason: "momentum must lie in [0, 1)",
            });
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument {
                op,
                reason: "decay must lie in (0, 1]",
            });
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument {
                op,
                reason: "l2 must be finite and non-negative",
            });
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
///
/// One call to [`SgdMomentum::step`] updates every parameter with the
/// current learning rate and then decays it once:
///
/// ```text
/// v <- momentum * v - lr * (grad + l2 * param)
/// param <- param + v
/// lr <- lr * decay
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub l2: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            decay: config.decay,
            l2: config.l2,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    /// Restores an optimizer from saved velocities.
    pub fn from_parts(config: SgdConfig, velocity: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            decay: config.decay,
            l2: config.l2,
            velocity,
        })
    }

    pub fn config(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            decay: self.decay,
            l2: self.l2,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Descends along `grads`. Parameters are only written if every update
    /// is finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: alloc::vec![self.velocity.len()],
                found: alloc::vec![params.len(), grads.len()],
            });
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            p.expect_shape("sgd_step", v.shape())?;
            g.expect_shape("sgd_step", v.shape())?;
        }
        let mut next = self.velocity.clone();
        for ((v, p), g) in next.iter_mut().zip(params.iter()).zip(grads) {
            for ((vi, &pi), &gi) in v.data_mut().iter_mut().zip(p.data()).zip(g.data()) {
                *vi = self.momentum * *vi - self.learning_rate * (gi + self.l2 * pi);
            }
            v.ensure_finite("sgd_step")?;
        }
        for (p, v) in params.iter_mut().zip(&next) {
            p.axpy(1.0, v)?;
            p.ensure_finite("sgd_step")?;
        }
        self.velocity = next;
        self.learning_rate *= self.decay;
        Ok(())
    }
}
