//! Two-layer convolutional autoencoder that produces the primary capsules.
//!
//! Encoder: `conv(k, stride 1) -> leaky ReLU -> dropout -> conv(k, stride 2)
//! -> sigmoid`. Decoder mirrors it with transposed convolutions:
//! `convT(stride 2) -> leaky ReLU -> convT(stride 1) -> sigmoid`. No biases.
//! Trained on mean squared reconstruction error.

use alloc::vec::Vec;

use crate::activations::{
    dropout_mask, leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, DEFAULT_LEAKY_SLOPE,
};
use crate::conv::{
    conv2d_backward, conv2d_filter_grad, conv2d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward, output_extent,
};
use crate::energy::Decoder;
use crate::optim::{SgdConfig, SgdMomentum};
use crate::routing::{CapsuleActivations, CapsuleLayerSpec};
use crate::rng::gaussian_sample;
use crate::{Error, Result, SeededRng, Tensor};

/// Neurons per primary capsule.
pub const CAPSULE_DIM: usize = 8;
pub const DEFAULT_KERNEL: usize = 9;
pub const DEFAULT_CHANNELS: usize = 128;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoencoderConfig {
    /// `[H, W, C]` of the input images.
    pub image_shape: [usize; 3],
    pub kernel: usize,
    pub channels: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
}

impl AutoencoderConfig {
    /// 9x9 kernels and 128 channels for images of the given shape.
    pub fn standard(image_shape: [usize; 3]) -> Self {
        Self {
            image_shape,
            kernel: DEFAULT_KERNEL,
            channels: DEFAULT_CHANNELS,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// `[H1, W1]` after the first convolution.
    pub fn hidden_hw(&self) -> Result<(usize, usize)> {
        let [h, w, _] = self.image_shape;
        Ok((output_extent(h, self.kernel, 1)?, output_extent(w, self.kernel, 1)?))
    }

    /// `[H', W', channels]` of the encoder output.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let (h1, w1) = self.hidden_hw()?;
        Ok([
            output_extent(h1, self.kernel, 2)?,
            output_extent(w1, self.kernel, 2)?,
            self.channels,
        ])
    }

    /// The primary capsule layer the encoder output is reshaped into.
    pub fn capsule_layer(&self) -> Result<CapsuleLayerSpec> {
        let [h, w, c] = self.feature_shape()?;
        CapsuleLayerSpec::new(h * w * c / CAPSULE_DIM, CAPSULE_DIM)
    }

    pub fn validate(&self) -> Result<()> {
        let op = "AutoencoderConfig";
        if self.image_shape.contains(&0) || self.channels == 0 {
            return Err(Error::InvalidArgument {
                op,
                reason: "image extents and channel count must be positive",
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument {
                op,
                reason: "dropout rate must lie in [0, 1)",
            });
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument {
                op,
                reason: "leaky slope must lie in (0, 1)",
            });
        }
        let [h, w, c] = self.feature_shape()?;
        if (h * w * c) % CAPSULE_DIM != 0 {
            return Err(Error::InvalidArgument {
                op,
                reason: "encoder output size must be divisible by the capsule dimension",
            });
        }
        Ok(())
    }
}

/// Filter banks, all `[k, k, Cin, Cout]` in the convolution's own
/// orientation. The decoder banks are used transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub config: AutoencoderConfig,
    /// `[k, k, C_img, channels]`
    pub enc1: Tensor,
    /// `[k, k, channels, channels]`
    pub enc2: Tensor,
    /// `[k, k, channels, channels]`
    pub dec1: Tensor,
    /// `[k, k, C_img, channels]`
    pub dec2: Tensor,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub pre1: Tensor,
    /// Leaky ReLU output after the dropout mask.
    pub hidden: Tensor,
    pub features: Tensor,
    pub pre_dec: Tensor,
    pub dec_hidden: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderGrads {
    pub enc1: Tensor,
    pub enc2: Tensor,
    pub dec1: Tensor,
    pub dec2: Tensor,
}

impl AutoencoderGrads {
    fn zeros_like(p: &AutoencoderParams) -> Self {
        Self {
            enc1: Tensor::zeros(p.enc1.shape()),
            enc2: Tensor::zeros(p.enc2.shape()),
            dec1: Tensor::zeros(p.dec1.shape()),
            dec2: Tensor::zeros(p.dec2.shape()),
        }
    }

    fn add(&mut self, other: &Self) -> Result<()> {
        self.enc1.axpy(1.0, &other.enc1)?;
        self.enc2.axpy(1.0, &other.enc2)?;
        self.dec1.axpy(1.0, &other.dec1)?;
        self.dec2.axpy(1.0, &other.dec2)
    }

    fn scale(&mut self, alpha: f64) {
        for t in [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2] {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }
}

fn filter_shape(k: usize, cin: usize, cout: usize) -> [usize; 4] {
    [k, k, cin, cout]
}

impl AutoencoderParams {
    pub fn zeros(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let (k, c, ci) = (config.kernel, config.channels, config.image_shape[2]);
        Ok(Self {
            config,
            enc1: Tensor::zeros(&filter_shape(k, ci, c)),
            enc2: Tensor::zeros(&filter_shape(k, c, c)),
            dec1: Tensor::zeros(&filter_shape(k, c, c)),
            dec2: Tensor::zeros(&filter_shape(k, ci, c)),
        })
    }

    /// Gaussian filters with standard deviation `1 / sqrt(fan_in)`, where
    /// fan-in counts the inputs feeding one output of each layer.
    pub fn init(config: AutoencoderConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let (k, c, ci) = (config.kernel, config.channels, config.image_shape[2]);
        let kk = (k * k) as f64;
        let fans = [
            kk * ci as f64,
            kk * c as f64,
            // A stride-2 transposed convolution reaches each output from
            // about a quarter of the kernel taps.
            (kk / 4.0).max(1.0) * c as f64,
            kk * c as f64,
        ];
        for (t, fan) in [&mut p.enc1, &mut p.enc2, &mut p.dec1, &mut p.dec2]
            .into_iter()
            .zip(fans)
        {
            let std = 1.0 / libm::sqrt(fan);
            *t = gaussian_sample(rng, t.shape())?.scale(std);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2]
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        image.expect_shape("autoencoder", &self.config.image_shape)?;
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument {
                op: "autoencoder",
                reason: "pixel values must lie in [0, 1]",
            });
        }
        Ok(())
    }

    /// Evaluation-mode encoder; no dropout. Outputs lie in `(0, 1)`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let pre1 = conv2d_forward(image, &self.enc1, 1)?;
        let hidden = leaky_relu(&pre1, self.config.leaky_slope)?;
        sigmoid(&conv2d_forward(&hidden, &self.enc2, 2)?)
    }

    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        features.expect_shape("decode", &self.config.feature_shape()?)?;
        let pre_dec = conv_transpose2d_forward(features, &self.dec1, 2, self.config.hidden_hw()?)?;
        let dec_hidden = leaky_relu(&pre_dec, self.config.leaky_slope)?;
        let [h, w, _] = self.config.image_shape;
        sigmoid(&conv_transpose2d_forward(&dec_hidden, &self.dec2, 1, (h, w))?)
    }

    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(image)?)
    }

    /// Full forward pass. `mask` multiplies the first hidden layer; `None`
    /// means no dropout.
    pub fn forward(&self, image: &Tensor, mask: Option<&Tensor>) -> Result<ForwardCache> {
        self.check_image(image)?;
        let pre1 = conv2d_forward(image, &self.enc1, 1)?;
        let mut hidden = leaky_relu(&pre1, self.config.leaky_slope)?;
        if let Some(m) = mask {
            m.expect_shape("autoencoder_forward", hidden.shape())?;
            for (h, &k) in hidden.data_mut().iter_mut().zip(m.data()) {
                *h *= k;
            }
        }
        let features = sigmoid(&conv2d_forward(&hidden, &self.enc2, 2)?)?;
        let pre_dec = conv_transpose2d_forward(&features, &self.dec1, 2, self.config.hidden_hw()?)?;
        let dec_hidden = leaky_relu(&pre_dec, self.config.leaky_slope)?;
        let [h, w, _] = self.config.image_shape;
        let output = sigmoid(&conv_transpose2d_forward(&dec_hidden, &self.dec2, 1, (h, w))?)?;
        Ok(ForwardCache {
            pre1,
            hidden,
            features,
            pre_dec,
            dec_hidden,
            output,
        })
    }

    /// Mean squared error over the pixels of one image and its gradient
    /// with respect to every filter bank.
    pub fn loss_and_grads(
        &self,
        image: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(f64, AutoencoderGrads)> {
        let cache = self.forward(image, mask)?;
        let n = image.len() as f64;
        let mut loss = 0.0;
        let mut g = Tensor::zeros(image.shape());
        for ((gv, &y), &x) in g.data_mut().iter_mut().zip(cache.output.data()).zip(image.data()) {
            let d = y - x;
            loss += d * d;
            *gv = 2.0 * d / n;
        }
        loss /= n;

        let slope = self.config.leaky_slope;
        sigmoid_backward(&cache.output, &mut g);
        let (mut g_dec_hidden, dec2) = conv_transpose2d_backward(&cache.dec_hidden, &self.dec2, 1, &g)?;
        leaky_relu_backward(&cache.pre_dec, slope, &mut g_dec_hidden);
        let (mut g_features, dec1) = conv_transpose2d_backward(&cache.features, &self.dec1, 2, &g_dec_hidden)?;
        sigmoid_backward(&cache.features, &mut g_features);
        let (mut g_hidden, enc2) = conv2d_backward(&cache.hidden, &self.enc2, 2, &g_features)?;
        if let Some(m) = mask {
            for (gv, &k) in g_hidden.data_mut().iter_mut().zip(m.data()) {
                *gv *= k;
            }
        }
        leaky_relu_backward(&cache.pre1, slope, &mut g_hidden);
        let enc1 = conv2d_filter_grad(image, self.enc1.shape(), 1, &g_hidden)?;
        Ok((loss, AutoencoderGrads { enc1, enc2, dec1, dec2 }))
    }

    /// Batch-mean loss and gradients, accumulated in batch order. One
    /// dropout mask per image is drawn from `rng` when the rate is positive.
    pub fn batch_loss_and_grads(
        &self,
        images: &[&Tensor],
        rng: &mut SeededRng,
    ) -> Result<(f64, AutoencoderGrads)> {
        if images.is_empty() {
            return Err(Error::InvalidArgument {
                op: "batch_loss_and_grads",
                reason: "empty batch",
            });
        }
        let hidden_shape = {
            let (h, w) = self.config.hidden_hw()?;
            [h, w, self.config.channels]
        };
        let mut total = AutoencoderGrads::zeros_like(self);
        let mut loss = 0.0;
        for image in images {
            let mask = if self.config.dropout_rate > 0.0 {
                Some(dropout_mask(&hidden_shape, self.config.dropout_rate, rng)?)
            } else {
                None
            };
            let (l, g) = self.loss_and_grads(image, mask.as_ref())?;
            loss += l;
            total.add(&g)?;
        }
        let inv = 1.0 / images.len() as f64;
        total.scale(inv);
        Ok((loss * inv, total))
    }
}

impl Decoder for AutoencoderParams {
    fn decode_capsules(&self, x: &CapsuleActivations) -> Result<Tensor> {
        self.decode(&decapsulize(x, self.config.feature_shape()?)?)
    }
}

/// Reshapes `[H', W', C]` features into capsules of [`CAPSULE_DIM`]
/// consecutive channels at one spatial location, in row-major order.
pub fn capsulize(features: &Tensor) -> Result<CapsuleActivations> {
    let shape = features.shape();
    if shape.len() != 3 || !shape[2].is_multiple_of(CAPSULE_DIM) {
        return Err(Error::InvalidArgument {
            op: "capsulize",
            reason: "features must be [H, W, C] with C divisible by the capsule dimension",
        });
    }
    let layer = CapsuleLayerSpec::new(features.len() / CAPSULE_DIM, CAPSULE_DIM)?;
    CapsuleActivations::from_flat(layer, features.data().to_vec())
}

/// Inverse of [`capsulize`].
pub fn decapsulize(capsules: &CapsuleActivations, feature_shape: [usize; 3]) -> Result<Tensor> {
    Tensor::from_vec(&feature_shape, capsules.flat().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeStepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Training-mode batch MSE, before the update.
    pub mse: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeEpochSummary {
    pub epoch: usize,
    pub mean_mse: f64,
    pub steps: Vec<AeStepRecord>,
}

/// Resumable autoencoder training state.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderTrainer {
    pub params: AutoencoderParams,
    pub optimizer: SgdMomentum,
    pub rng: SeededRng,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub batch_size: usize,
}

impl AutoencoderTrainer {
    pub fn new(
        params: AutoencoderParams,
        sgd: SgdConfig,
        rng: SeededRng,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument {
                op: "AutoencoderTrainer",
                reason: "batch size must be positive",
            });
        }
        let optimizer = SgdMomentum::new(sgd, &params.tensors())?;
        Ok(Self {
            params,
            optimizer,
            rng,
            epochs_done: 0,
            steps_done: 0,
            batch_size,
        })
    }

    /// One shuffled pass over `images`. `on_step` sees each record as it
    /// is produced.
    pub fn run_epoch_observed(
        &mut self,
        images: &[Tensor],
        on_step: &mut dyn FnMut(&AeStepRecord),
    ) -> Result<AeEpochSummary> {
        if images.is_empty() {
            return Err(Error::InvalidArgument {
                op: "run_epoch",
                reason: "empty dataset",
            });
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        self.rng.shuffle(&mut order);
        let epoch = self.epochs_done + 1;
        let mut steps = Vec::new();
        let mut total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&k| &images[k]).collect();
            let (mse, grads) = self.params.batch_loss_and_grads(&batch, &mut self.rng)?;
            let learning_rate = self.optimizer.learning_rate;
            self.optimizer
                .step(&mut self.params.tensors_mut(), &grads.tensors())?;
            self.steps_done += 1;
            total += mse * batch.len() as f64;
            let record = AeStepRecord {
                epoch,
                step: self.steps_done,
                mse,
                learning_rate,
            };
            on_step(&record);
            steps.push(record);
        }
        self.epochs_done = epoch;
        Ok(AeEpochSummary {
            epoch,
            mean_mse: total / images.len() as f64,
            steps,
        })
    }

    pub fn run_epoch(&mut self, images: &[Tensor]) -> Result<AeEpochSummary> {
        self.run_epoch_observed(images, &mut |_| {})
    }
}

/// Trains for `epochs` passes and returns the parameters and per-epoch log.
pub fn train_autoencoder(
    params: AutoencoderParams,
    images: &[Tensor],
    epochs: usize,
    sgd: SgdConfig,
    rng: SeededRng,
    batch_size: usize,
) -> Result<(AutoencoderParams, Vec<AeEpochSummary>)> {
    let mut trainer = AutoencoderTrainer::new(params, sgd, rng, batch_size)?;
    let log = (0..epochs)
        .map(|_| trainer.run_epoch(images))
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.params, log))
}
