//! Run configuration as flat `key = value` text.
//!
//! ```text
//! # comments and blank lines are ignored
//! num_kp = 3
//! input_side = 64
//! mask_variant = heatmap
//! ```
//!
//! Unknown keys are an error. Command-line overrides go through
//! [`RunConfig::apply`] after the file, so they win.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use keymask_core::{Grid, MaskVariant};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub num_kp: usize,
    pub block_expansion: usize,
    pub max_features: usize,
    pub num_blocks: usize,
    pub temperature: f64,
    pub variance: f64,
    /// Frame side the detector expects; heatmaps come out at a quarter of it.
    pub input_side: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_kp: 10,
            block_expansion: 32,
            max_features: 1024,
            num_blocks: 5,
            temperature: 0.1,
            variance: 0.01,
            input_side: 256,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> Grid {
        Grid::square(self.input_side / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_kp == 0 {
            return Err(Error::InvalidConfig("num_kp must be at least 1".into()));
        }
        if self.block_expansion == 0 || self.max_features == 0 || self.num_blocks == 0 {
            return Err(Error::InvalidConfig("detector widths and block count must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(keymask_core::Error::InvalidTemperature(self.temperature).into());
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(keymask_core::Error::InvalidVariance(self.variance).into());
        }
        let unit = 4usize << self.num_blocks;
        if self.input_side == 0 || self.input_side % unit != 0 {
            return Err(Error::ShapeMismatch(format!(
                "detector input side {} must be a multiple of {unit} for {} hourglass blocks",
                self.input_side, self.num_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub highres_depth: usize,
    pub input_side: usize,
    pub lowres_side: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 64, n_residual_blocks: 6, highres_depth: 5, input_side: 256, lowres_side: 64 }
    }
}

impl GeneratorConfig {
    /// `(input_side, base_channels, n_residual_blocks, highres_depth)` with the
    /// low-resolution side fixed at a quarter of the input.
    pub fn compact(input_side: usize, base_channels: usize, n_residual_blocks: usize, highres_depth: usize) -> Self {
        Self { base_channels, n_residual_blocks, highres_depth, input_side, lowres_side: input_side / 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be positive".into()));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::InvalidConfig("n_residual_blocks must be at least 1".into()));
        }
        if self.highres_depth == 0 {
            return Err(Error::InvalidConfig("highres_depth must be at least 1".into()));
        }
        // Two 2x upsamples take the low-res stage back to full size.
        if self.lowres_side == 0 || self.lowres_side * 4 != self.input_side {
            return Err(Error::ShapeMismatch(format!(
                "lowres_side {} must be input_side / 4 (input_side {})",
                self.lowres_side, self.input_side
            )));
        }
        let unit = 1usize << self.highres_depth;
        if self.input_side % unit != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input_side {} is not divisible by 2^{} = {unit}",
                self.input_side, self.highres_depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectorMode {
    /// Detector parameters are never updated.
    #[default]
    Frozen,
    /// Detector parameters are optimized jointly with the generator.
    Finetune,
}

impl fmt::Display for DetectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorMode::Frozen => "frozen",
            DetectorMode::Finetune => "finetune",
        })
    }
}

impl FromStr for DetectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(DetectorMode::Frozen),
            "finetune" => Ok(DetectorMode::Finetune),
            other => Err(Error::InvalidConfig(format!("unknown detector mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_variant: MaskVariant,
    pub detector_mode: DetectorMode,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_size: 4,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            mask_variant: MaskVariant::Heatmap,
            detector_mode: DetectorMode::Frozen,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {} is invalid", self.learning_rate)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a run needs: model shape, optimization, and file locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Pretrained detector weights; required for frozen mode.
    pub detector_checkpoint: Option<PathBuf>,
    /// VGG-19 weights in safetensors format for the perceptual loss.
    pub extractor_weights: Option<PathBuf>,
    pub allow_untrained_extractor: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            data_root: None,
            out_dir: PathBuf::from("runs"),
            detector_checkpoint: None,
            extractor_weights: None,
            allow_untrained_extractor: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` for `{key}`")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Small shapes that train in minutes on one CPU: 64-pixel frames,
    /// three keypoints, detector trained jointly from scratch.
    pub fn toy() -> Self {
        Self {
            detector: DetectorConfig {
                num_kp: 3,
                block_expansion: 8,
                max_features: 32,
                num_blocks: 2,
                temperature: 0.1,
                variance: 0.01,
                input_side: 64,
            },
            generator: GeneratorConfig::compact(64, 16, 2, 3),
            train: TrainConfig {
                steps: 2000,
                batch_size: 4,
                learning_rate: 2e-3,
                detector_mode: DetectorMode::Finetune,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            allow_untrained_extractor: true,
            ..Self::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "num_kp",
        "detector_block_expansion",
        "detector_max_features",
        "detector_blocks",
        "temperature",
        "variance",
        "input_side",
        "base_channels",
        "n_residual_blocks",
        "highres_depth",
        "lowres_side",
        "steps",
        "batch_size",
        "learning_rate",
        "beta1",
        "beta2",
        "mask_variant",
        "detector_mode",
        "seed",
        "checkpoint_every",
        "data_root",
        "out_dir",
        "detector_checkpoint",
        "extractor_weights",
        "allow_untrained_extractor",
    ];

    /// Sets one key. `input_side` also moves the detector input and the
    /// low-resolution side so the three stay consistent.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "num_kp" => self.detector.num_kp = parse(key, value)?,
            "detector_block_expansion" => self.detector.block_expansion = parse(key, value)?,
            "detector_max_features" => self.detector.max_features = parse(key, value)?,
            "detector_blocks" => self.detector.num_blocks = parse(key, value)?,
            "temperature" => self.detector.temperature = parse(key, value)?,
            "variance" => self.detector.variance = parse(key, value)?,
            "input_side" => {
                let side: usize = parse(key, value)?;
                self.detector.input_side = side;
                self.generator.input_side = side;
                self.generator.lowres_side = side / 4;
            }
            "base_channels" => self.generator.base_channels = parse(key, value)?,
            "n_residual_blocks" => self.generator.n_residual_blocks = parse(key, value)?,
            "highres_depth" => self.generator.highres_depth = parse(key, value)?,
            "lowres_side" => self.generator.lowres_side = parse(key, value)?,
            "steps" => self.train.steps = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "mask_variant" => self.train.mask_variant = value.parse()?,
            "detector_mode" => self.train.detector_mode = value.parse()?,
            "seed" => self.train.seed = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "data_root" => self.data_root = opt_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "detector_checkpoint" => self.detector_checkpoint = opt_path(value),
            "extractor_weights" => self.extractor_weights = opt_path(value),
            "allow_untrained_extractor" => self.allow_untrained_extractor = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "num_kp" => self.detector.num_kp.to_string(),
            "detector_block_expansion" => self.detector.block_expansion.to_string(),
            "detector_max_features" => self.detector.max_features.to_string(),
            "detector_blocks" => self.detector.num_blocks.to_string(),
            "temperature" => self.detector.temperature.to_string(),
            "variance" => self.detector.variance.to_string(),
            "input_side" => self.generator.input_side.to_string(),
            "base_channels" => self.generator.base_channels.to_string(),
            "n_residual_blocks" => self.generator.n_residual_blocks.to_string(),
            "highres_depth" => self.generator.highres_depth.to_string(),
            "lowres_side" => self.generator.lowres_side.to_string(),
            "steps" => self.train.steps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "mask_variant" => self.train.mask_variant.to_string(),
            "detector_mode" => self.train.detector_mode.to_string(),
            "seed" => self.train.seed.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "data_root" => path(&self.data_root),
            "out_dir" => self.out_dir.display().to_string(),
            "detector_checkpoint" => path(&self.detector_checkpoint),
            "extractor_weights" => path(&self.extractor_weights),
            "allow_untrained_extractor" => self.allow_untrained_extractor.to_string(),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Core(keymask_core::Error::NotFound(path.to_path_buf())),
            _ => Error::Io(e),
        })?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let v = self.get(key).expect("every listed key is readable");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        if self.detector.input_side != self.generator.input_side {
            return Err(Error::ConfigMismatch(format!(
                "detector side {} differs from generator side {}",
                self.detector.input_side, self.generator.input_side
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::toy();
        cfg.detector_checkpoint = Some(PathBuf::from("/tmp/det.ckpt"));
        cfg.train.mask_variant = MaskVariant::Circles;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn presets_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("colour", "red").is_err());
        assert!(cfg.apply("steps", "many").is_err());
        assert!(RunConfig::from_text("steps 5").is_err());
    }

    #[test]
    fn input_side_moves_dependent_sides() {
        let mut cfg = RunConfig::default();
        cfg.apply("input_side", "128").unwrap();
        assert_eq!(cfg.generator.lowres_side, 32);
        assert_eq!(cfg.detector.grid(), Grid::square(32));
    }

    #[test]
    fn generator_guards() {
        assert!(GeneratorConfig::compact(256, 64, 6, 5).validate().is_ok());
        assert_eq!(
            GeneratorConfig::compact(224, 64, 6, 6).validate().unwrap_err().category(),
            "ShapeMismatch"
        );
        let bad = GeneratorConfig { lowres_side: 32, ..GeneratorConfig::default() };
        assert!(bad.validate().is_err());
        assert!(GeneratorConfig::compact(32, 8, 0, 2).validate().is_err());
    }
}
