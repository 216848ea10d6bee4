//! Core data types and numerics for keypoint-mask image animation.
//!
//! A pretrained keypoint detector emits `K` raw heatmap channels per frame.
//! Two structural masks are derived from them:
//!
//! * the **heatmap mask**: the min-max rescaled sum of the raw channels,
//!   suitable for absolute motion transfer;
//! * the **circles mask**: Gaussians drawn at the soft-argmax keypoints,
//!   which also supports relative motion transfer.
//!
//! This crate holds everything that does not need a neural-network runtime:
//! frames and datasets, the keypoint and mask math, the relative transfer
//! rule and the evaluation metrics. It compiles to `wasm32`.

pub mod dataset;
pub mod error;
pub mod frame;
pub mod keypoints;
pub mod mask;
pub mod metrics;
pub mod synthetic;
pub mod transfer;

pub use dataset::{load_video, sample_training_pair, Split, Video, VideoDataset};
pub use error::{Error, Result};
pub use frame::{Frame, FrameSequence};
pub use keypoints::{
    extract_keypoints, render_gaussians, spatial_softmax, GaussianStack, Grid, HeatmapStack,
    KeypointSet, ProbabilityStack,
};
pub use mask::{circles_mask, heatmap_mask, MaskVariant, StructuralMask};
pub use metrics::{aed, akd, l1_metric, EmbeddingFile, MetricReport, PoseFile, VideoMetrics};
pub use synthetic::{make_synthetic_dataset, SyntheticDataset, TrackPoint};
pub use transfer::{relative_keypoints, TransferMode};
