//! Run configuration: a TOML file in which every key is required and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use capspoe_core::autoencoder::AutoencoderConfig;
use capspoe_core::optim::SgdConfig;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetName {
    /// `[H, W, C]` of one image.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => [28, 28, 1],
            DatasetName::Cifar10 => [32, 32, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// IDX image file or CIFAR-10 batch, relative to the data directory.
    pub path: PathBuf,
    /// Number of leading images to use.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub l2: f64,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSection {
    /// Number of upper capsules `J`.
    pub upper_count: usize,
    /// Dimension `N` of each upper capsule.
    pub upper_dim: usize,
    pub routing_iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub l2: f64,
    /// Standard deviation of the initial prediction maps.
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub samples_per_capsule: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagramSection {
    pub sample_index: usize,
    pub edge_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub autoencoder: AutoencoderSection,
    pub capsules: CapsuleSection,
    pub generate: GenerateSection,
    pub diagram: DiagramSection,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_sgd(section: &str, lr: f64, momentum: f64, decay: f64, l2: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid(format!("{section}.learning_rate must be positive")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(invalid(format!("{section}.momentum must lie in [0, 1)")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(invalid(format!("{section}.decay must lie in (0, 1]")));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(invalid(format!("{section}.l2 must be non-negative")));
    }
    Ok(())
}

impl Default for RunConfig {
    /// MNIST at desk scale: 2000 images, three epochs per stage.
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/mnist"),
            dataset: DatasetSpec {
                name: DatasetName::Mnist,
                path: PathBuf::from("mnist-2k/train-images-idx3-ubyte"),
                samples: 2000,
            },
            autoencoder: AutoencoderSection {
                epochs: 3,
                batch_size: 64,
                learning_rate: 0.05,
                momentum: 0.9,
                decay: 0.999,
                l2: 1e-4,
                dropout: 0.5,
                leaky_slope: 0.01,
                kernel: 9,
                channels: 128,
            },
            capsules: CapsuleSection {
                upper_count: 20,
                upper_dim: 16,
                routing_iterations: 3,
                epochs: 3,
                batch_size: 64,
                learning_rate: 10.0,
                momentum: 0.9,
                decay: 0.999,
                l2: 1e-4,
                init_std: 0.1,
            },
            generate: GenerateSection {
                samples_per_capsule: 4,
            },
            diagram: DiagramSection {
                sample_index: 0,
                edge_threshold: 0.01,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.autoencoder;
        let c = &self.capsules;
        if self.dataset.samples == 0 {
            return Err(invalid("dataset.samples must be at least 1"));
        }
        if a.epochs == 0 || c.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if a.batch_size == 0 || c.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        check_sgd("autoencoder", a.learning_rate, a.momentum, a.decay, a.l2)?;
        check_sgd("capsules", c.learning_rate, c.momentum, c.decay, c.l2)?;
        if c.upper_count == 0 || c.upper_dim == 0 || c.routing_iterations == 0 {
            return Err(invalid(
                "capsules.upper_count, upper_dim and routing_iterations must be at least 1",
            ));
        }
        if !(c.init_std > 0.0 && c.init_std.is_finite()) {
            return Err(invalid("capsules.init_std must be positive"));
        }
        if self.generate.samples_per_capsule == 0 {
            return Err(invalid("generate.samples_per_capsule must be at least 1"));
        }
        if !(self.diagram.edge_threshold >= 0.0 && self.diagram.edge_threshold <= 1.0) {
            return Err(invalid("diagram.edge_threshold must lie in [0, 1]"));
        }
        self.autoencoder_config()
            .validate()
            .map_err(|e| invalid(format!("autoencoder: {e}")))
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            image_shape: self.dataset.name.image_shape(),
            kernel: self.autoencoder.kernel,
            channels: self.autoencoder.channels,
            dropout_rate: self.autoencoder.dropout,
            leaky_slope: self.autoencoder.leaky_slope,
        }
    }

    pub fn autoencoder_sgd(&self) -> SgdConfig {
        let a = &self.autoencoder;
        SgdConfig {
            learning_rate: a.learning_rate,
            momentum: a.momentum,
            decay: a.decay,
            l2: a.l2,
        }
    }

    pub fn capsule_sgd(&self) -> SgdConfig {
        let c = &self.capsules;
        SgdConfig {
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            decay: c.decay,
            l2: c.l2,
        }
    }
}
