//! Self-reconstruction training: a source and a driving frame from the same
//! video, masks from both, and the pyramid perceptual loss between the
//! synthesized frame and the driving frame.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use keymask_core::{Frame, VideoDataset};
use log::{info, warn};

use crate::checkpoint::Checkpoint;
use crate::config::{DetectorMode, RunConfig};
use crate::convert::frames_to_tensor;
use crate::detector::{copy_detector_weights, DETECTOR_PREFIX};
use crate::error::{Error, Result};
use crate::model::{MotionModel, GENERATOR_PREFIX};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::perceptual::{pyramid_loss, FeatureExtractor};

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:07}.ckpt")
}

/// Steps after which periodic checkpoints are written: every multiple of
/// `every` up to `steps`, plus `steps` itself.
pub fn checkpoint_schedule(steps: u64, every: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=steps / every).map(|i| i * every).collect();
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sampling seed of pair `index` in the batch of `step`. Depending only on
/// these three numbers is what makes a resumed run replay the same batches.
pub fn pair_seed(seed: u64, step: u64, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(step)) ^ index as u64)
}

/// The `(sources, drivings)` batch for `step`.
pub fn sample_batch(dataset: &VideoDataset, seed: u64, step: u64, batch_size: usize) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let mut sources = Vec::with_capacity(batch_size);
    let mut drivings = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let (v, s, d) = dataset.sample_pair_indices(pair_seed(seed, step, i))?;
        let video = &dataset.videos[v];
        sources.push(video.frame(s)?);
        drivings.push(video.frame(d)?);
    }
    Ok((sources, drivings))
}

/// Builds the perceptual-loss extractor the configuration asks for.
pub fn extractor_for(config: &RunConfig, dtype: DType) -> Result<FeatureExtractor> {
    match &config.extractor_weights {
        Some(path) => FeatureExtractor::vgg19(path, dtype),
        None if config.allow_untrained_extractor => {
            warn!("no extractor weights configured; using the untrained miniature extractor");
            FeatureExtractor::default_miniature(dtype)
        }
        None => Err(Error::InvalidConfig(
            "extractor_weights is not set (set allow_untrained_extractor = true to use the miniature extractor)".into(),
        )),
    }
}

pub struct TrainState {
    pub model: MotionModel,
    pub optimizer: Adam,
    pub extractor: FeatureExtractor,
    /// Completed optimizer steps.
    pub step: u64,
}

fn trainable(model: &MotionModel) -> Vec<(String, candle_core::Var)> {
    let mut params = model.store.params_with_prefix(GENERATOR_PREFIX);
    if model.config.train.detector_mode == DetectorMode::Finetune {
        params.extend(model.store.params_with_prefix(DETECTOR_PREFIX));
    }
    params
}

fn adam_config(config: &RunConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: config.train.learning_rate,
        beta1: config.train.beta1,
        beta2: config.train.beta2,
        ..AdamConfig::default()
    }
}

impl TrainState {
    /// Fresh state; loads the pretrained detector when one is configured.
    pub fn new(config: &RunConfig, dtype: DType) -> Result<Self> {
        let model = MotionModel::new(config, dtype, config.train.seed)?;
        if let Some(path) = &config.detector_checkpoint {
            let ck = Checkpoint::load(path)?;
            ck.expect_kp(config.detector.num_kp)?;
            copy_detector_weights(&ck, &model.store)?;
            info!("loaded detector weights from {}", path.display());
        } else if config.train.detector_mode == DetectorMode::Frozen {
            warn!("frozen detector without detector_checkpoint: keypoints come from random weights");
        }
        let optimizer = Adam::new(trainable(&model), adam_config(config))?;
        let extractor = extractor_for(config, dtype)?;
        Ok(Self { model, optimizer, extractor, step: 0 })
    }

    /// Restores model, optimizer and step counter from a checkpoint.
    /// `overrides` may only change run length, logging and file locations.
    pub fn resume(ck: &Checkpoint, overrides: Option<&RunConfig>, dtype: DType) -> Result<Self> {
        let mut model = MotionModel::from_checkpoint(ck, dtype)?;
        if let Some(o) = overrides {
            model.config.train.steps = o.train.steps;
            model.config.train.checkpoint_every = o.train.checkpoint_every;
            model.config.out_dir = o.out_dir.clone();
            model.config.data_root = o.data_root.clone();
            model.config.extractor_weights = o.extractor_weights.clone();
            model.config.allow_untrained_extractor = o.allow_untrained_extractor;
        }
        let mut optimizer = Adam::new(trainable(&model), adam_config(&model.config))?;
        optimizer.load_state(ck.adam_t, |name| ck.tensor(name).cloned())?;
        let extractor = extractor_for(&model.config, dtype)?;
        Ok(Self { model, optimizer, extractor, step: ck.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(self.step, self.optimizer.steps_taken(), self.optimizer.state_tensors())
    }

    /// Loss of one batch without updating anything.
    pub fn loss(&self, sources: &Tensor, drivings: &Tensor) -> Result<Tensor> {
        let train = &self.model.config.train;
        let detector_mode = match train.detector_mode {
            DetectorMode::Finetune => Some(Mode::Train),
            DetectorMode::Frozen => None,
        };
        let pred = self.model.reconstruct(sources, drivings, train.mask_variant, detector_mode, Mode::Train)?;
        pyramid_loss(&pred, drivings, &self.extractor)
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn train_step(&mut self, sources: &[Frame], drivings: &[Frame]) -> Result<f64> {
        if sources.is_empty() || sources.len() != drivings.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch needs equal, nonzero numbers of sources and drivings ({} vs {})",
                sources.len(),
                drivings.len()
            )));
        }
        let dtype = self.model.dtype();
        let src = frames_to_tensor(sources, dtype)?;
        let drv = frames_to_tensor(drivings, dtype)?;
        let loss = self.loss(&src, &drv)?;
        let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
        if !value.is_finite() {
            let mut detail = format!("loss = {value}");
            for (name, var) in self.model.store.params() {
                let v: Vec<f32> = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                if v.iter().any(|x| !x.is_finite()) {
                    detail.push_str(&format!("; non-finite values in `{name}`"));
                }
            }
            return Err(Error::NonFiniteLoss { step: self.step + 1, detail });
        }
        let grads = loss.backward()?;
        self.optimizer.step(&grads)?;
        self.step += 1;
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Loss of each step run in this call, in order.
    pub losses: Vec<f64>,
}

/// Trains until `state.model.config.train.steps`, writing `loss.csv`,
/// periodic checkpoints and `model.ckpt` into `out_dir`.
pub fn fit_state(state: &mut TrainState, dataset: &VideoDataset, out_dir: &Path) -> Result<FitOutcome> {
    if dataset.videos.is_empty() {
        return Err(keymask_core::Error::DatasetTooSmall.into());
    }
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOSS_LOG);
    let fresh = state.step == 0 || !log_path.exists();
    let mut log = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&log_path)?;
    if fresh {
        writeln!(log, "step,loss,wall_ms")?;
    }
    let train = state.model.config.train.clone();
    let schedule = checkpoint_schedule(train.steps, train.checkpoint_every);
    let mut outcome = FitOutcome { final_checkpoint: out_dir.join(FINAL_CHECKPOINT), checkpoints: Vec::new(), losses: Vec::new() };
    while state.step < train.steps {
        let started = Instant::now();
        let (sources, drivings) = sample_batch(dataset, train.seed, state.step, train.batch_size)?;
        let loss = state.train_step(&sources, &drivings)?;
        let wall_ms = started.elapsed().as_millis();
        writeln!(log, "{},{loss},{wall_ms}", state.step)?;
        outcome.losses.push(loss);
        if state.step % 50 == 0 || state.step == 1 {
            info!("step {} loss {loss:.5} ({wall_ms} ms)", state.step);
        }
        if schedule.contains(&state.step) {
            let path = out_dir.join(checkpoint_name(state.step));
            state.checkpoint().save(&path)?;
            outcome.checkpoints.push(path);
        }
    }
    log.flush()?;
    state.checkpoint().save(&outcome.final_checkpoint)?;
    Ok(outcome)
}

/// Fresh training run from `config`.
pub fn fit(config: &RunConfig, dataset: &VideoDataset) -> Result<(TrainState, FitOutcome)> {
    config.validate()?;
    let mut state = TrainState::new(config, DType::F32)?;
    let outcome = fit_state(&mut state, dataset, &config.out_dir)?;
    Ok((state, outcome))
}
