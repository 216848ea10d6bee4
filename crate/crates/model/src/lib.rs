//! Neural components for keypoint-mask image animation: the keypoint
//! detector, the two-stage generator, the perceptual loss, training,
//! checkpoints and the animation pipeline.
//!
//! Tensors run on the CPU through `candle-core`. Layers, batch
//! normalization and the optimizer are implemented here so that parameter
//! initialization is seeded and optimizer state can be checkpointed.

pub mod animate;
pub mod checkpoint;
pub mod config;
pub mod convert;
pub mod detector;
pub mod diff;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod generator;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod perceptual;
pub mod trainer;

pub use animate::{animate, animate_frames, AnimationJob};
pub use checkpoint::Checkpoint;
pub use config::{DetectorConfig, DetectorMode, GeneratorConfig, RunConfig, TrainConfig};
pub use detector::{load_detector, load_pretrained, predict_heatmaps, save_detector, KeypointDetector, StandaloneDetector};
pub use error::{Error, Result};
pub use evaluate::{evaluate_reconstruction, ToolOutputs};
pub use export::export_masks;
pub use generator::Generator;
pub use model::MotionModel;
pub use nn::{Mode, ParamStore};
pub use optim::{Adam, AdamConfig};
pub use perceptual::{pyramid_loss, reconstruction_loss, FeatureExtractor};
pub use trainer::{fit, fit_state, FitOutcome, TrainState};
