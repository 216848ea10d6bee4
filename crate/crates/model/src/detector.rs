//! Hourglass keypoint detector producing `K` raw heatmap channels.

use std::path::Path;

use candle_core::{DType, Tensor};
use keymask_core::{Frame, HeatmapStack};

use crate::checkpoint::Checkpoint;
use crate::config::{DetectorConfig, RunConfig};
use crate::convert::frames_to_tensor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Hourglass, Mode, ParamStore};

pub struct KeypointDetector {
    config: DetectorConfig,
    hourglass: Hourglass,
    head: Conv2d,
}

impl KeypointDetector {
    /// Registers parameters under `{prefix}.`.
    pub fn new(store: &mut ParamStore, prefix: &str, config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let hourglass = Hourglass::new(
            store,
            &format!("{prefix}.hourglass"),
            3,
            config.block_expansion,
            config.max_features,
            config.num_blocks,
        )?;
        let head = Conv2d::new(store, &format!("{prefix}.kp"), hourglass.out_channels(), config.num_kp, 7, false)?;
        Ok(Self { config: config.clone(), hourglass, head })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// `(B, 3, S, S)` frames to `(B, K, S/4, S/4)` raw logits.
    pub fn forward(&self, frames: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        let side = self.config.input_side;
        if c != 3 || h != side || w != side {
            return Err(Error::ShapeMismatch(format!(
                "detector expects (B, 3, {side}, {side}), got {:?}",
                frames.dims()
            )));
        }
        let small = frames.avg_pool2d(4)?;
        let features = self.hourglass.forward(&small, mode)?;
        self.head.forward(&features)
    }
}

/// A detector with its own parameter store, as loaded from a detector file.
pub struct StandaloneDetector {
    pub store: ParamStore,
    pub net: KeypointDetector,
}

pub const DETECTOR_PREFIX: &str = "detector";

impl StandaloneDetector {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, seed);
        let net = KeypointDetector::new(&mut store, DETECTOR_PREFIX, config)?;
        Ok(Self { store, net })
    }

    pub fn predict_heatmaps(&self, frame: &Frame) -> Result<HeatmapStack> {
        predict_heatmaps(&self.net, frame)
    }
}

/// Raw heatmaps for one preprocessed frame, in inference mode.
pub fn predict_heatmaps(detector: &KeypointDetector, frame: &Frame) -> Result<HeatmapStack> {
    let cfg = detector.config();
    let x = frames_to_tensor(std::slice::from_ref(frame), DType::F32)?;
    let logits = detector.forward(&x, Mode::Eval)?;
    let data: Vec<f32> = logits.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    Ok(HeatmapStack::new(cfg.num_kp, cfg.grid(), data)?.with_source_shape((frame.height(), frame.width())))
}

fn detector_checkpoint(store: &ParamStore, config: &DetectorConfig) -> Result<Checkpoint> {
    let mut run = RunConfig::default();
    run.detector = config.clone();
    run.apply("input_side", &config.input_side.to_string())?;
    let tensors = store
        .all()
        .filter(|(n, _)| n.starts_with(DETECTOR_PREFIX))
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    Ok(Checkpoint {
        num_kp: config.num_kp as u32,
        grid: config.grid().width as u32,
        temperature: config.temperature,
        variance: config.variance,
        step: 0,
        adam_t: 0,
        config: run.to_text(),
        tensors,
    })
}

/// Writes the detector part of `store` as a detector file.
pub fn save_detector(store: &ParamStore, config: &DetectorConfig, path: &Path) -> Result<()> {
    detector_checkpoint(store, config)?.save(path)
}

/// Loads a detector file (or the detector part of a full checkpoint).
pub fn load_pretrained(path: &Path, expect_k: usize) -> Result<StandaloneDetector> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kp(expect_k)?;
    detector_from_checkpoint(&ck)
}

/// Loads a detector with whatever keypoint count the file declares.
pub fn load_detector(path: &Path) -> Result<StandaloneDetector> {
    detector_from_checkpoint(&Checkpoint::load(path)?)
}

fn detector_from_checkpoint(ck: &Checkpoint) -> Result<StandaloneDetector> {
    let run = RunConfig::from_text(&ck.config)
        .map_err(|e| Error::UnsupportedCheckpoint(format!("embedded configuration: {e}")))?;
    let det = StandaloneDetector::new(&run.detector, 0)?;
    copy_detector_weights(ck, &det.store)?;
    Ok(det)
}

/// Copies every `detector.*` tensor of `ck` into `store`; all must be present.
pub fn copy_detector_weights(ck: &Checkpoint, store: &ParamStore) -> Result<()> {
    for (name, _) in store.all().filter(|(n, _)| n.starts_with(DETECTOR_PREFIX)) {
        let t = ck
            .tensor(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks detector tensor `{name}`")))?;
        store.assign(name, t)?;
    }
    Ok(())
}
