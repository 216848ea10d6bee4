//! Detector and generator under one parameter store.

use std::path::Path;

use candle_core::{DType, Tensor};
use keymask_core::{
    circles_mask, extract_keypoints, heatmap_mask, spatial_softmax, Frame, HeatmapStack, KeypointSet,
    MaskVariant, StructuralMask,
};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::convert::{frames_to_tensor, masks_to_tensor, tensor_to_frames};
use crate::detector::{predict_heatmaps, KeypointDetector, DETECTOR_PREFIX};
use crate::diff;
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore};
use crate::generator::Generator;

pub const GENERATOR_PREFIX: &str = "generator";

pub struct MotionModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub detector: KeypointDetector,
    pub generator: Generator,
}

impl MotionModel {
    pub fn new(config: &RunConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let detector = KeypointDetector::new(&mut store, DETECTOR_PREFIX, &config.detector)?;
        let generator = Generator::new(&mut store, GENERATOR_PREFIX, &config.generator)?;
        Ok(Self { config: config.clone(), store, detector, generator })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn side(&self) -> usize {
        self.config.generator.input_side
    }

    /// Differentiable `(B, 1, g, g)` masks for a `(B, 3, S, S)` batch.
    pub fn mask_tensor(&self, frames: &Tensor, variant: MaskVariant, mode: Mode) -> Result<Tensor> {
        let logits = self.detector.forward(frames, mode)?;
        self.mask_from_logits(&logits, variant)
    }

    pub fn mask_from_logits(&self, logits: &Tensor, variant: MaskVariant) -> Result<Tensor> {
        let cfg = &self.config.detector;
        match variant {
            MaskVariant::Heatmap => diff::heatmap_mask(logits),
            MaskVariant::Circles => {
                let kps = diff::soft_argmax(&diff::spatial_softmax(logits, cfg.temperature)?)?;
                diff::circles_mask(&kps, cfg.variance, cfg.grid())
            }
        }
    }

    /// Reconstruction of `driving` from `source` for training.
    ///
    /// `detector_mode` is `None` for a frozen detector: it runs in inference
    /// mode and its masks carry no gradient.
    pub fn reconstruct(
        &self,
        source: &Tensor,
        driving: &Tensor,
        variant: MaskVariant,
        detector_mode: Option<Mode>,
        generator_mode: Mode,
    ) -> Result<Tensor> {
        let b = source.dim(0)?;
        let both = Tensor::cat(&[source, driving], 0)?;
        let masks = match detector_mode {
            Some(mode) => self.mask_tensor(&both, variant, mode)?,
            None => self.mask_tensor(&both, variant, Mode::Eval)?.detach(),
        };
        let source_mask = masks.narrow(0, 0, b)?;
        let driving_mask = masks.narrow(0, b, b)?;
        self.generator.synthesize(source, &source_mask, &driving_mask, generator_mode)
    }

    pub fn heatmaps(&self, frame: &Frame) -> Result<HeatmapStack> {
        predict_heatmaps(&self.detector, frame)
    }

    pub fn keypoints(&self, frame: &Frame) -> Result<KeypointSet> {
        let probs = spatial_softmax(&self.heatmaps(frame)?, self.config.detector.temperature)?;
        Ok(extract_keypoints(&probs))
    }

    /// Inference-time mask for one frame, via the core routines.
    pub fn frame_mask(&self, frame: &Frame, variant: MaskVariant) -> Result<StructuralMask> {
        match variant {
            MaskVariant::Heatmap => Ok(heatmap_mask(&self.heatmaps(frame)?)),
            MaskVariant::Circles => self.circles_from_keypoints(&self.keypoints(frame)?),
        }
    }

    pub fn circles_from_keypoints(&self, kps: &KeypointSet) -> Result<StructuralMask> {
        let cfg = &self.config.detector;
        Ok(circles_mask(kps, cfg.variance, cfg.grid())?)
    }

    /// One output frame in inference mode.
    pub fn synthesize_frame(
        &self,
        source: &Frame,
        source_mask: &StructuralMask,
        driving_mask: &StructuralMask,
    ) -> Result<Frame> {
        let src = frames_to_tensor(std::slice::from_ref(source), self.dtype())?;
        let sm = masks_to_tensor(&[source_mask], self.dtype())?;
        let dm = masks_to_tensor(&[driving_mask], self.dtype())?;
        let out = self.generator.synthesize(&src, &sm, &dm, Mode::Eval)?;
        Ok(tensor_to_frames(&out)?.remove(0))
    }

    /// Parameters, buffers and any extra tensors (optimizer state) as a checkpoint.
    pub fn to_checkpoint(&self, step: u64, adam_t: u64, extra: Vec<(String, Tensor)>) -> Checkpoint {
        let cfg = &self.config.detector;
        let mut tensors: Vec<(String, Tensor)> =
            self.store.all().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
        tensors.extend(extra);
        Checkpoint {
            num_kp: cfg.num_kp as u32,
            grid: cfg.grid().width as u32,
            temperature: cfg.temperature,
            variance: cfg.variance,
            step,
            adam_t,
            config: self.config.to_text(),
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint, loading every parameter and buffer.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let config = RunConfig::from_text(&ck.config)
            .map_err(|e| Error::UnsupportedCheckpoint(format!("embedded configuration: {e}")))?;
        ck.expect_kp(config.detector.num_kp)?;
        let model = Self::new(&config, dtype, 0)?;
        model.load_weights(ck)?;
        Ok(model)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, Checkpoint)> {
        let ck = Checkpoint::load(path)?;
        let model = Self::from_checkpoint(&ck, dtype)?;
        Ok((model, ck))
    }

    pub fn load_weights(&self, ck: &Checkpoint) -> Result<()> {
        for (name, _) in self.store.all() {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks tensor `{name}`")))?;
            self.store.assign(name, t)?;
        }
        Ok(())
    }
}
