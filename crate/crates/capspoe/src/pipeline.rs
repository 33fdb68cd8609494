//! The three training and inference stages behind the subcommands.
//!
//! Every command is a function of the configuration, the seed and the input
//! files. Each stage draws its randomness from its own generator derived
//! from the seed, so stages can be rerun independently.

use std::path::{Path, PathBuf};

use capspoe_core::autoencoder::{
    capsulize, AeEpochSummary, AeStepRecord, AutoencoderParams, AutoencoderTrainer,
};
use capspoe_core::diagram::{routing_diagram, DiagramModel};
use capspoe_core::energy::{generate, CapsuleTrainer, EnergyModel, EpochSummary, StepRecord};
use capspoe_core::optim::SgdMomentum;
use capspoe_core::oracles::{verify_suite, Fault, SuiteSize, VerifyReport};
use capspoe_core::routing::{route_forward, CapsuleActivations, CapsuleLayerSpec, PredictionMaps};
use capspoe_core::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetName, RunConfig};
use crate::io::checkpoint::{fnv1a64, load_checkpoint, save_checkpoint, Checkpoint, CheckpointReader};
use crate::io::{cifar, idx, pnm, svg, write_file};
use crate::{Error, Result};

pub const AUTOENCODER_CHECKPOINT: &str = "autoencoder.cpoe";
pub const AUTOENCODER_LOG: &str = "autoencoder_epochs.jsonl";
pub const AUTOENCODER_STEPS: &str = "autoencoder_steps.jsonl";
pub const CAPSULE_CHECKPOINT: &str = "capsules.cpoe";
pub const CAPSULE_LOG: &str = "capsules_epochs.jsonl";
pub const CAPSULE_STEPS: &str = "capsules_steps.jsonl";
pub const DIAGRAM_FILE: &str = "routing.svg";
pub const VERIFY_SUMMARY: &str = "verify_summary.json";

/// Command-line overrides and switches that are not part of the config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Directory that `dataset.path` is resolved against.
    pub data_dir: Option<PathBuf>,
    /// Continue from an existing checkpoint in the output directory.
    pub resume: bool,
}

/// Independent generator streams, one per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    AutoencoderInit = 0,
    AutoencoderTrain = 1,
    CapsuleInit = 2,
    CapsuleTrain = 3,
    Generate = 4,
}

pub fn stage_rng(seed: u64, stage: Stage) -> SeededRng {
    let mut root = SeededRng::new(seed);
    for _ in 0..stage as usize {
        root.next_u64();
    }
    root.fork()
}

pub fn grid_file(cfg: &RunConfig) -> &'static str {
    match cfg.dataset.name.image_shape()[2] {
        1 => "generated.pgm",
        _ => "generated.ppm",
    }
}

pub fn dataset_path(cfg: &RunConfig, opts: &RunOptions) -> PathBuf {
    match &opts.data_dir {
        Some(dir) => dir.join(&cfg.dataset.path),
        None => cfg.dataset.path.clone(),
    }
}

/// The first `dataset.samples` images, each `[H, W, C]` in `[0, 1]`.
pub fn load_images(cfg: &RunConfig, opts: &RunOptions) -> Result<Vec<Tensor>> {
    let path = dataset_path(cfg, opts);
    let [h, w, c] = cfg.dataset.name.image_shape();
    let all = match cfg.dataset.name {
        DatasetName::Mnist | DatasetName::FashionMnist => idx::load_idx(&path)?,
        DatasetName::Cifar10 => cifar::load_cifar10(&path)?,
    };
    let per = h * w * c;
    let n = all.shape()[0];
    if all.len() != n * per {
        return Err(Error::DimensionMismatch(format!(
            "{}: images are {:?}, expected [{h}, {w}, {c}]",
            path.display(),
            &all.shape()[1..]
        )));
    }
    if n < cfg.dataset.samples {
        return Err(Error::Input(format!(
            "{}: {n} images available, {} requested",
            path.display(),
            cfg.dataset.samples
        )));
    }
    all.data()
        .chunks_exact(per)
        .take(cfg.dataset.samples)
        .map(|px| Ok(Tensor::from_vec(&[h, w, c], px.to_vec())?))
        .collect()
}

fn count(v: usize) -> f64 {
    v as f64
}

fn put_autoencoder_hparams(ck: &mut Checkpoint, cfg: &RunConfig) -> Result<()> {
    let a = &cfg.autoencoder;
    let shape = cfg.dataset.name.image_shape().map(count);
    ck.insert("hparams.image_shape", Tensor::from_vec(&[3], shape.to_vec())?)?;
    ck.insert_u64("hparams.seed", cfg.seed)?;
    ck.insert_scalar("hparams.samples", count(cfg.dataset.samples))?;
    ck.insert_scalar("hparams.ae.epochs", count(a.epochs))?;
    ck.insert_scalar("hparams.ae.batch_size", count(a.batch_size))?;
    ck.insert_scalar("hparams.ae.learning_rate", a.learning_rate)?;
    ck.insert_scalar("hparams.ae.momentum", a.momentum)?;
    ck.insert_scalar("hparams.ae.decay", a.decay)?;
    ck.insert_scalar("hparams.ae.l2", a.l2)?;
    ck.insert_scalar("hparams.ae.dropout", a.dropout)?;
    ck.insert_scalar("hparams.ae.leaky_slope", a.leaky_slope)?;
    ck.insert_scalar("hparams.ae.kernel", count(a.kernel))?;
    ck.insert_scalar("hparams.ae.channels", count(a.channels))?;
    Ok(())
}

fn mismatch(what: &str, stored: impl std::fmt::Debug, config: impl std::fmt::Debug) -> Error {
    Error::Checkpoint(format!(
        "{what} is {stored:?} in the checkpoint but {config:?} in the config"
    ))
}

fn expect_scalar(r: &CheckpointReader, name: &str, want: f64) -> Result<()> {
    let got = r.scalar(name)?;
    if got.to_bits() != want.to_bits() {
        return Err(mismatch(name, got, want));
    }
    Ok(())
}

/// Checks the architecture sections; with `training` also the seed, data
/// and optimizer settings, except the epoch target.
fn check_autoencoder_hparams(r: &CheckpointReader, cfg: &RunConfig, training: bool) -> Result<()> {
    let a = &cfg.autoencoder;
    let shape = r.tensor_shaped("hparams.image_shape", &[3])?;
    let want = cfg.dataset.name.image_shape().map(count);
    if shape.data() != want {
        return Err(mismatch("image shape", shape.data(), want));
    }
    expect_scalar(r, "hparams.ae.kernel", count(a.kernel))?;
    expect_scalar(r, "hparams.ae.channels", count(a.channels))?;
    expect_scalar(r, "hparams.ae.dropout", a.dropout)?;
    expect_scalar(r, "hparams.ae.leaky_slope", a.leaky_slope)?;
    let seed = r.u64("hparams.seed")?;
    r.scalar("hparams.ae.epochs")?;
    for name in ["learning_rate", "momentum", "decay", "l2", "batch_size"] {
        r.scalar(&format!("hparams.ae.{name}"))?;
    }
    r.scalar("hparams.samples")?;
    if training {
        if seed != cfg.seed {
            return Err(mismatch("seed", seed, cfg.seed));
        }
        expect_scalar(r, "hparams.samples", count(cfg.dataset.samples))?;
        expect_scalar(r, "hparams.ae.batch_size", count(a.batch_size))?;
        expect_scalar(r, "hparams.ae.learning_rate", a.learning_rate)?;
        expect_scalar(r, "hparams.ae.momentum", a.momentum)?;
        expect_scalar(r, "hparams.ae.decay", a.decay)?;
        expect_scalar(r, "hparams.ae.l2", a.l2)?;
    }
    Ok(())
}

const AE_LAYERS: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

pub fn autoencoder_checkpoint(trainer: &AutoencoderTrainer, cfg: &RunConfig) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    for (name, t) in AE_LAYERS.iter().zip(trainer.params.tensors()) {
        ck.insert(&format!("ae.{name}"), t.clone())?;
    }
    put_autoencoder_hparams(&mut ck, cfg)?;
    ck.insert_scalar("optim.learning_rate", trainer.optimizer.learning_rate)?;
    for (name, v) in AE_LAYERS.iter().zip(trainer.optimizer.velocity()) {
        ck.insert(&format!("optim.velocity.{name}"), v.clone())?;
    }
    ck.insert_u64("train.rng", trainer.rng.state())?;
    ck.insert_scalar("train.epochs_done", count(trainer.epochs_done))?;
    ck.insert_scalar("train.steps_done", count(trainer.steps_done))?;
    Ok(ck)
}

fn read_autoencoder_params(r: &CheckpointReader, cfg: &RunConfig) -> Result<AutoencoderParams> {
    let mut params = AutoencoderParams::zeros(cfg.autoencoder_config())?;
    for (name, t) in AE_LAYERS.iter().zip(params.tensors_mut()) {
        *t = r.tensor_shaped(&format!("ae.{name}"), t.shape())?;
    }
    Ok(params)
}

/// Restores the full training state for resuming.
pub fn autoencoder_trainer_from_checkpoint(
    ck: &Checkpoint,
    cfg: &RunConfig,
) -> Result<AutoencoderTrainer> {
    let r = ck.reader();
    check_autoencoder_hparams(&r, cfg, true)?;
    let params = read_autoencoder_params(&r, cfg)?;
    let mut sgd = cfg.autoencoder_sgd();
    sgd.learning_rate = r.scalar("optim.learning_rate")?;
    let velocity = AE_LAYERS
        .iter()
        .zip(params.tensors())
        .map(|(name, p)| r.tensor_shaped(&format!("optim.velocity.{name}"), p.shape()))
        .collect::<Result<Vec<_>>>()?;
    let trainer = AutoencoderTrainer {
        optimizer: SgdMomentum::from_parts(sgd, velocity)?,
        rng: SeededRng::from_state(r.u64("train.rng")?),
        epochs_done: r.usize("train.epochs_done")?,
        steps_done: r.usize("train.steps_done")?,
        batch_size: cfg.autoencoder.batch_size,
        params,
    };
    r.finish();
    Ok(trainer)
}

/// Frozen parameters for encoding and decoding. Only the architecture has
/// to agree with `cfg`.
pub fn autoencoder_params_from_checkpoint(
    ck: &Checkpoint,
    cfg: &RunConfig,
) -> Result<AutoencoderParams> {
    let r = ck.reader();
    check_autoencoder_hparams(&r, cfg, false)?;
    let params = read_autoencoder_params(&r, cfg)?;
    for name in ["optim.learning_rate", "train.rng", "train.epochs_done", "train.steps_done"] {
        let _ = r.tensor(name);
    }
    for name in AE_LAYERS {
        let _ = r.tensor(&format!("optim.velocity.{name}"));
    }
    r.finish();
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct EpochLine {
    epoch: usize,
    mean: f64,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    epoch: usize,
    step: usize,
    value: f64,
    learning_rate: f64,
}

/// Line-delimited records whose `epoch` field is at most `keep_epochs`,
/// from an earlier run being resumed.
fn kept_lines(path: &Path, keep_epochs: usize) -> Result<Vec<String>> {
    if keep_epochs == 0 {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let epoch = v.get("epoch").and_then(|e| e.as_u64()).ok_or_else(|| {
            Error::Input(format!("{}: record without an epoch", path.display()))
        })?;
        if epoch as usize <= keep_epochs {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("records serialize")
}

fn ae_step_line(s: &AeStepRecord) -> String {
    json(&StepLine {
        epoch: s.epoch,
        step: s.step,
        value: s.mse,
        learning_rate: s.learning_rate,
    })
}

fn caps_step_line(s: &StepRecord) -> String {
    json(&StepLine {
        epoch: s.epoch,
        step: s.step,
        value: s.reconstruction_xent,
        learning_rate: s.learning_rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderRun {
    /// Epochs trained by this invocation.
    pub epochs: Vec<AeEpochSummary>,
    pub checkpoint: PathBuf,
}

/// Trains the autoencoder, saving a checkpoint and the logs after every
/// epoch.
pub fn cmd_train_autoencoder(cfg: &RunConfig, opts: &RunOptions) -> Result<AutoencoderRun> {
    cfg.validate()?;
    let images = load_images(cfg, opts)?;
    let out = &cfg.out_dir;
    let ck_path = out.join(AUTOENCODER_CHECKPOINT);
    let mut trainer = if opts.resume && ck_path.exists() {
        autoencoder_trainer_from_checkpoint(&load_checkpoint(&ck_path)?, cfg)?
    } else {
        let mut init = stage_rng(cfg.seed, Stage::AutoencoderInit);
        let params = AutoencoderParams::init(cfg.autoencoder_config(), &mut init)?;
        AutoencoderTrainer::new(
            params,
            cfg.autoencoder_sgd(),
            stage_rng(cfg.seed, Stage::AutoencoderTrain),
            cfg.autoencoder.batch_size,
        )?
    };
    if trainer.epochs_done > cfg.autoencoder.epochs {
        return Err(Error::Checkpoint(format!(
            "checkpoint already has {} epochs, config asks for {}",
            trainer.epochs_done, cfg.autoencoder.epochs
        )));
    }
    let mut epoch_lines = kept_lines(&out.join(AUTOENCODER_LOG), trainer.epochs_done)?;
    let mut step_lines = kept_lines(&out.join(AUTOENCODER_STEPS), trainer.epochs_done)?;
    let mut epochs = Vec::new();
    while trainer.epochs_done < cfg.autoencoder.epochs {
        let summary = trainer.run_epoch_observed(&images, &mut |s| {
            if s.step % 8 == 1 {
                log::info!("autoencoder epoch {} step {} mse {:.6}", s.epoch, s.step, s.mse);
            }
        })?;
        log::info!("autoencoder epoch {} mean mse {:.6}", summary.epoch, summary.mean_mse);
        step_lines.extend(summary.steps.iter().map(ae_step_line));
        epoch_lines.push(json(&EpochLine {
            epoch: summary.epoch,
            mean: summary.mean_mse,
            steps: summary.steps.len(),
        }));
        save_checkpoint(&autoencoder_checkpoint(&trainer, cfg)?, &ck_path)?;
        write_lines(&out.join(AUTOENCODER_LOG), &epoch_lines)?;
        write_lines(&out.join(AUTOENCODER_STEPS), &step_lines)?;
        epochs.push(summary);
    }
    if epochs.is_empty() {
        save_checkpoint(&autoencoder_checkpoint(&trainer, cfg)?, &ck_path)?;
    }
    Ok(AutoencoderRun {
        epochs,
        checkpoint: ck_path,
    })
}

/// Encodes every image without dropout and reshapes it into capsules.
pub fn encode_dataset(params: &AutoencoderParams, images: &[Tensor]) -> Result<Vec<CapsuleActivations>> {
    images
        .iter()
        .map(|img| Ok(capsulize(&params.encode(img)?)?))
        .collect()
}

fn layer_tensor(l: CapsuleLayerSpec) -> Result<Tensor> {
    Ok(Tensor::from_vec(&[2], vec![count(l.count), count(l.dim)])?)
}

fn put_capsule_hparams(ck: &mut Checkpoint, cfg: &RunConfig) -> Result<()> {
    let c = &cfg.capsules;
    ck.insert_u64("hparams.seed", cfg.seed)?;
    ck.insert_scalar("hparams.samples", count(cfg.dataset.samples))?;
    ck.insert_scalar("hparams.caps.epochs", count(c.epochs))?;
    ck.insert_scalar("hparams.caps.batch_size", count(c.batch_size))?;
    ck.insert_scalar("hparams.caps.routing_iterations", count(c.routing_iterations))?;
    ck.insert_scalar("hparams.caps.learning_rate", c.learning_rate)?;
    ck.insert_scalar("hparams.caps.momentum", c.momentum)?;
    ck.insert_scalar("hparams.caps.decay", c.decay)?;
    ck.insert_scalar("hparams.caps.l2", c.l2)?;
    ck.insert_scalar("hparams.caps.init_std", c.init_std)?;
    Ok(())
}

pub fn capsule_checkpoint(
    trainer: &CapsuleTrainer,
    cfg: &RunConfig,
    autoencoder_fingerprint: u64,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert("caps.lower", layer_tensor(trainer.model.lower())?)?;
    ck.insert("caps.upper", layer_tensor(trainer.model.upper())?)?;
    ck.insert("caps.weights", trainer.model.maps().weights().clone())?;
    put_capsule_hparams(&mut ck, cfg)?;
    ck.insert_u64("source.autoencoder", autoencoder_fingerprint)?;
    ck.insert_scalar("optim.learning_rate", trainer.optimizer.learning_rate)?;
    ck.insert("optim.velocity", trainer.optimizer.velocity()[0].clone())?;
    ck.insert_u64("train.rng", trainer.rng.state())?;
    ck.insert_scalar("train.epochs_done", count(trainer.epochs_done))?;
    ck.insert_scalar("train.steps_done", count(trainer.steps_done))?;
    Ok(ck)
}

/// The layer shapes `cfg` implies: `I x 8` from the encoder output and
/// `J x N` from the capsule section.
pub fn capsule_layers(cfg: &RunConfig) -> Result<(CapsuleLayerSpec, CapsuleLayerSpec)> {
    let lower = cfg.autoencoder_config().capsule_layer()?;
    let upper = CapsuleLayerSpec::new(cfg.capsules.upper_count, cfg.capsules.upper_dim)?;
    Ok((lower, upper))
}

fn read_energy_model(r: &CheckpointReader, cfg: &RunConfig) -> Result<EnergyModel> {
    let (lower, upper) = capsule_layers(cfg)?;
    for (name, want) in [("caps.lower", lower), ("caps.upper", upper)] {
        let t = r.tensor_shaped(name, &[2])?;
        if t.data() != [count(want.count), count(want.dim)] {
            return Err(mismatch(name, t.data(), [want.count, want.dim]));
        }
    }
    let weights = r.tensor_shaped("caps.weights", &[lower.count, upper.count, upper.dim, lower.dim])?;
    Ok(EnergyModel::new(PredictionMaps::new(lower, upper, weights)?))
}

pub fn energy_model_from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<EnergyModel> {
    let r = ck.reader();
    let model = read_energy_model(&r, cfg)?;
    expect_scalar(&r, "hparams.caps.routing_iterations", count(cfg.capsules.routing_iterations))?;
    for name in [
        "hparams.seed",
        "hparams.samples",
        "hparams.caps.epochs",
        "hparams.caps.batch_size",
        "hparams.caps.learning_rate",
        "hparams.caps.momentum",
        "hparams.caps.decay",
        "hparams.caps.l2",
        "hparams.caps.init_std",
        "source.autoencoder",
        "optim.learning_rate",
        "optim.velocity",
        "train.rng",
        "train.epochs_done",
        "train.steps_done",
    ] {
        let _ = r.tensor(name);
    }
    r.finish();
    Ok(model)
}

fn capsule_trainer_from_checkpoint(
    ck: &Checkpoint,
    cfg: &RunConfig,
    autoencoder_fingerprint: u64,
) -> Result<CapsuleTrainer> {
    let r = ck.reader();
    let c = &cfg.capsules;
    let model = read_energy_model(&r, cfg)?;
    let seed = r.u64("hparams.seed")?;
    if seed != cfg.seed {
        return Err(mismatch("seed", seed, cfg.seed));
    }
    let source = r.u64("source.autoencoder")?;
    if source != autoencoder_fingerprint {
        return Err(Error::Checkpoint(
            "capsule checkpoint was trained on a different autoencoder".into(),
        ));
    }
    r.scalar("hparams.caps.epochs")?;
    expect_scalar(&r, "hparams.samples", count(cfg.dataset.samples))?;
    expect_scalar(&r, "hparams.caps.batch_size", count(c.batch_size))?;
    expect_scalar(&r, "hparams.caps.routing_iterations", count(c.routing_iterations))?;
    expect_scalar(&r, "hparams.caps.learning_rate", c.learning_rate)?;
    expect_scalar(&r, "hparams.caps.momentum", c.momentum)?;
    expect_scalar(&r, "hparams.caps.decay", c.decay)?;
    expect_scalar(&r, "hparams.caps.l2", c.l2)?;
    expect_scalar(&r, "hparams.caps.init_std", c.init_std)?;
    let mut sgd = cfg.capsule_sgd();
    sgd.learning_rate = r.scalar("optim.learning_rate")?;
    let velocity = r.tensor_shaped("optim.velocity", model.maps().weights().shape())?;
    let trainer = CapsuleTrainer {
        optimizer: SgdMomentum::from_parts(sgd, vec![velocity])?,
        rng: SeededRng::from_state(r.u64("train.rng")?),
        epochs_done: r.usize("train.epochs_done")?,
        steps_done: r.usize("train.steps_done")?,
        batch_size: c.batch_size,
        routing_iterations: c.routing_iterations,
        model,
    };
    r.finish();
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleRun {
    pub epochs: Vec<EpochSummary>,
    pub checkpoint: PathBuf,
    pub lower: CapsuleLayerSpec,
    pub upper: CapsuleLayerSpec,
}

/// Loads the frozen autoencoder from the output directory along with a
/// fingerprint of its checkpoint bytes.
pub fn load_frozen_autoencoder(cfg: &RunConfig) -> Result<(AutoencoderParams, u64)> {
    let path = cfg.out_dir.join(AUTOENCODER_CHECKPOINT);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let ck = Checkpoint::decode(&bytes)?;
    Ok((autoencoder_params_from_checkpoint(&ck, cfg)?, fnv1a64(&bytes)))
}

/// Encodes the dataset with the frozen autoencoder and trains the capsule
/// layer with CD-1, saving a checkpoint and logs after every epoch.
pub fn cmd_train_capsules(cfg: &RunConfig, opts: &RunOptions) -> Result<CapsuleRun> {
    cfg.validate()?;
    let (ae, fingerprint) = load_frozen_autoencoder(cfg)?;
    let (lower, upper) = capsule_layers(cfg)?;
    let out = &cfg.out_dir;
    let ck_path = out.join(CAPSULE_CHECKPOINT);
    let mut trainer = if opts.resume && ck_path.exists() {
        capsule_trainer_from_checkpoint(&load_checkpoint(&ck_path)?, cfg, fingerprint)?
    } else {
        let mut init = stage_rng(cfg.seed, Stage::CapsuleInit);
        let maps = PredictionMaps::gaussian(lower, upper, cfg.capsules.init_std, &mut init)?;
        CapsuleTrainer::new(
            EnergyModel::new(maps),
            cfg.capsule_sgd(),
            stage_rng(cfg.seed, Stage::CapsuleTrain),
            cfg.capsules.batch_size,
            cfg.capsules.routing_iterations,
        )?
    };
    if trainer.epochs_done > cfg.capsules.epochs {
        return Err(Error::Checkpoint(format!(
            "checkpoint already has {} epochs, config asks for {}",
            trainer.epochs_done, cfg.capsules.epochs
        )));
    }
    let images = load_images(cfg, opts)?;
    log::info!("encoding {} images into {} x {} capsules", images.len(), lower.count, lower.dim);
    let data = encode_dataset(&ae, &images)?;
    let mut epoch_lines = kept_lines(&out.join(CAPSULE_LOG), trainer.epochs_done)?;
    let mut step_lines = kept_lines(&out.join(CAPSULE_STEPS), trainer.epochs_done)?;
    let mut epochs = Vec::new();
    while trainer.epochs_done < cfg.capsules.epochs {
        let summary = trainer.run_epoch(&data)?;
        log::info!(
            "capsules epoch {} mean reconstruction cross-entropy {:.6}",
            summary.epoch,
            summary.mean_reconstruction_xent
        );
        step_lines.extend(summary.steps.iter().map(caps_step_line));
        epoch_lines.push(json(&EpochLine {
            epoch: summary.epoch,
            mean: summary.mean_reconstruction_xent,
            steps: summary.steps.len(),
        }));
        save_checkpoint(&capsule_checkpoint(&trainer, cfg, fingerprint)?, &ck_path)?;
        write_lines(&out.join(CAPSULE_LOG), &epoch_lines)?;
        write_lines(&out.join(CAPSULE_STEPS), &step_lines)?;
        epochs.push(summary);
    }
    if epochs.is_empty() {
        save_checkpoint(&capsule_checkpoint(&trainer, cfg, fingerprint)?, &ck_path)?;
    }
    Ok(CapsuleRun {
        epochs,
        checkpoint: ck_path,
        lower,
        upper,
    })
}

fn load_trained(cfg: &RunConfig) -> Result<(AutoencoderParams, EnergyModel)> {
    let (ae, _) = load_frozen_autoencoder(cfg)?;
    let ck = load_checkpoint(cfg.out_dir.join(CAPSULE_CHECKPOINT))?;
    Ok((ae, energy_model_from_checkpoint(&ck, cfg)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRun {
    /// Row-major: `rows` samples for each of the `cols` hidden capsules.
    pub images: Vec<Tensor>,
    pub rows: usize,
    pub cols: usize,
    pub path: PathBuf,
}

/// Samples `generate.samples_per_capsule` images from every hidden capsule
/// and writes them as one grid, one column per capsule.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateRun> {
    cfg.validate()?;
    let (ae, model) = load_trained(cfg)?;
    let rows = cfg.generate.samples_per_capsule;
    let cols = model.upper().count;
    let mut rng = stage_rng(cfg.seed, Stage::Generate);
    let mut images = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for j in 0..cols {
            images.push(generate(&model, j, &mut rng, cfg.capsules.routing_iterations, &ae)?);
        }
    }
    let path = cfg.out_dir.join(grid_file(cfg));
    pnm::emit_image_grid(&images, rows, cols, &path)?;
    Ok(GenerateRun {
        images,
        rows,
        cols,
        path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagramRun {
    pub diagram: DiagramModel,
    pub path: PathBuf,
}

/// Routes one encoded sample upward and draws the coefficients.
pub fn cmd_diagram(cfg: &RunConfig, opts: &RunOptions) -> Result<DiagramRun> {
    cfg.validate()?;
    let index = cfg.diagram.sample_index;
    if index >= cfg.dataset.samples {
        return Err(Error::Input(format!(
            "diagram.sample_index {index} is outside the {} loaded samples",
            cfg.dataset.samples
        )));
    }
    let (ae, model) = load_trained(cfg)?;
    let images = load_images(cfg, opts)?;
    let x = capsulize(&ae.encode(&images[index])?)?;
    let routed = route_forward(model.maps(), &x, cfg.capsules.routing_iterations)?;
    // Primary capsules are sigmoid outputs; scale their length into [0, 1].
    let scale = (x.layer().dim as f64).sqrt();
    let lower: Vec<f64> = (0..x.layer().count)
        .map(|i| x.capsule(i).iter().map(|v| v * v).sum::<f64>().sqrt() / scale)
        .collect();
    let diagram = routing_diagram(&routed.state, &lower, &routed.activations, cfg.diagram.edge_threshold)?;
    let path = cfg.out_dir.join(DIAGRAM_FILE);
    svg::emit_routing_svg(&diagram, &path)?;
    Ok(DiagramRun { diagram, path })
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    name: &'a str,
    passed: bool,
    worst: f64,
    tolerance: f64,
    instances: usize,
}

#[derive(Serialize)]
struct VerifySummary<'a> {
    seed: u64,
    passed: bool,
    checks: Vec<CheckSummary<'a>>,
}

/// Human-readable table of a verification report.
pub fn format_report(report: &VerifyReport) -> String {
    let mut s = format!("oracle verification, seed {}\n", report.seed);
    for c in &report.checks {
        s.push_str(&format!(
            "{:<4} {:<40} worst {:<12.3e} tolerance {:<8.1e} instances {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance,
            c.instances
        ));
    }
    s
}

/// Runs the oracle suite, prints the table and writes a JSON summary into
/// `out_dir`. A failed check is an error.
pub fn cmd_verify(seed: u64, out_dir: &Path, size: SuiteSize, fault: Fault) -> Result<VerifyReport> {
    let report = verify_suite(seed, size, fault)?;
    print!("{}", format_report(&report));
    let summary = VerifySummary {
        seed,
        passed: report.passed(),
        checks: report
            .checks
            .iter()
            .map(|c| CheckSummary {
                name: c.name,
                passed: c.passed,
                worst: c.worst,
                tolerance: c.tolerance,
                instances: c.instances,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write_file(out_dir.join(VERIFY_SUMMARY), text.as_bytes())?;
    if !report.passed() {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        return Err(Error::Verification(failed.join(", ")));
    }
    Ok(report)
}
