//! Reconstruction evaluation: every eval video is regenerated from its own
//! first frame and compared with the original.

use std::path::{Path, PathBuf};

use keymask_core::dataset::frame_file_name;
use keymask_core::{aed, akd, l1_metric, EmbeddingFile, MetricReport, PoseFile, TransferMode, VideoDataset, VideoMetrics};
use log::warn;

use crate::animate::animate_frames;
use crate::error::Result;
use crate::model::MotionModel;

/// External tool outputs: `<dir>/generated/<video_id>.csv` and
/// `<dir>/truth/<video_id>.csv`.
#[derive(Debug, Clone, Default)]
pub struct ToolOutputs {
    pub poses: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

fn pair_paths(dir: &Path, video_id: &str) -> Option<(PathBuf, PathBuf)> {
    let g = dir.join("generated").join(format!("{video_id}.csv"));
    let t = dir.join("truth").join(format!("{video_id}.csv"));
    (g.exists() && t.exists()).then_some((g, t))
}

fn optional_metric(video_id: &str, what: &str, r: keymask_core::Result<f64>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("{what} for {video_id} left empty: {e}");
            None
        }
    }
}

/// Per-video AKD/AED/L1. Missing tool files leave AKD/AED empty; L1 is always filled.
/// When `generated_dir` is given, reconstructions are written there as
/// `<video_id>/%07d.png` for the external tools to consume.
pub fn evaluate_reconstruction(
    model: &MotionModel,
    dataset: &VideoDataset,
    tools: &ToolOutputs,
    generated_dir: Option<&Path>,
) -> Result<MetricReport> {
    let variant = model.config.train.mask_variant;
    let mut report = MetricReport::default();
    for video in &dataset.videos {
        let truth = video.frames()?;
        let Some(first) = truth.first() else {
            warn!("skipping empty video {}", video.id);
            continue;
        };
        let generated = animate_frames(model, first, &truth, TransferMode::Absolute, variant)?;
        if let Some(dir) = generated_dir {
            let out = dir.join(&video.id);
            std::fs::create_dir_all(&out)?;
            for (i, f) in generated.iter().enumerate() {
                f.write_png(&out.join(frame_file_name(i)))?;
            }
        }
        let l1 = l1_metric(&generated, &truth)?;
        let akd = tools.poses.as_deref().and_then(|d| pair_paths(d, &video.id)).and_then(|(g, t)| {
            optional_metric(&video.id, "AKD", PoseFile::read(&g).and_then(|g| akd(&g, &PoseFile::read(&t)?)))
        });
        let aed = tools.embeddings.as_deref().and_then(|d| pair_paths(d, &video.id)).and_then(|(g, t)| {
            optional_metric(
                &video.id,
                "AED",
                EmbeddingFile::read(&g).and_then(|g| aed(&g, &EmbeddingFile::read(&t)?)),
            )
        });
        report.videos.push(VideoMetrics { video_id: video.id.clone(), akd, aed, l1 });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use candle_core::DType;
    use keymask_core::make_synthetic_dataset;

    #[test]
    fn partial_results_without_tool_files() {
        let model = MotionModel::new(&RunConfig::toy(), DType::F32, 1).unwrap();
        let data = make_synthetic_dataset(2, 2, 64, 4).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let tools = ToolOutputs { poses: Some(dir.path().to_path_buf()), embeddings: None };
        let report = evaluate_reconstruction(&model, &data, &tools, Some(dir.path())).unwrap();
        assert_eq!(report.videos.len(), 2);
        assert!(report.videos.iter().all(|v| v.akd.is_none() && v.aed.is_none() && v.l1 > 0.0));
        assert!(dir.path().join(&data.videos[0].id).join(frame_file_name(1)).exists());
    }

    #[test]
    fn pose_files_are_picked_up() {
        let model = MotionModel::new(&RunConfig::toy(), DType::F32, 1).unwrap();
        let data = make_synthetic_dataset(1, 2, 64, 4).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let id = &data.videos[0].id;
        let truth = PoseFile::new(vec![vec![Some((1.0, 1.0))]; 2]).unwrap();
        let generated = PoseFile::new(vec![vec![Some((4.0, 5.0))]; 2]).unwrap();
        for (sub, file) in [("truth", &truth), ("generated", &generated)] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
            file.write(std::fs::File::create(dir.path().join(sub).join(format!("{id}.csv"))).unwrap()).unwrap();
        }
        let tools = ToolOutputs { poses: Some(dir.path().to_path_buf()), embeddings: None };
        let report = evaluate_reconstruction(&model, &data, &tools, None).unwrap();
        assert_eq!(report.videos[0].akd, Some(5.0));
    }
}
