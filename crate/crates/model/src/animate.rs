//! Per-frame animation of a source image by a driving video.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::RgbImage;
use keymask_core::dataset::frame_file_name;
use keymask_core::{load_video, relative_keypoints, Frame, KeypointSet, MaskVariant, StructuralMask, TransferMode};

use crate::error::Result;
use crate::model::MotionModel;

#[derive(Debug, Clone)]
pub struct AnimationJob {
    pub source_path: PathBuf,
    /// Directory of numbered frames, or a single image for a one-frame video.
    pub driving_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub mode: TransferMode,
    pub mask_variant: MaskVariant,
    pub output_dir: PathBuf,
    /// Recorded in the output directory for an external encoder; frames are PNGs either way.
    pub fps: Option<u32>,
    pub contact_sheet: bool,
}

/// Driving-side state shared by every frame of one animation.
pub struct Driver<'a> {
    model: &'a MotionModel,
    mode: TransferMode,
    variant: MaskVariant,
    source_kps: Option<KeypointSet>,
    first_kps: Option<KeypointSet>,
}

impl<'a> Driver<'a> {
    /// Checks mode against variant before touching any frame.
    pub fn new(
        model: &'a MotionModel,
        source: &Frame,
        driving_first: &Frame,
        mode: TransferMode,
        variant: MaskVariant,
    ) -> Result<Self> {
        mode.check_variant(variant)?;
        let (source_kps, first_kps) = match mode {
            TransferMode::Relative => (Some(model.keypoints(source)?), Some(model.keypoints(driving_first)?)),
            TransferMode::Absolute => (None, None),
        };
        Ok(Self { model, mode, variant, source_kps, first_kps })
    }

    pub fn driving_mask(&self, driving_t: &Frame) -> Result<StructuralMask> {
        match (self.mode, &self.source_kps, &self.first_kps) {
            (TransferMode::Relative, Some(src), Some(first)) => {
                let moved = relative_keypoints(src, &self.model.keypoints(driving_t)?, first)?;
                self.model.circles_from_keypoints(&moved)
            }
            _ => self.model.frame_mask(driving_t, self.variant),
        }
    }
}

/// One output frame per driving frame. Frames must already be at the model side.
pub fn animate_frames(
    model: &MotionModel,
    source: &Frame,
    driving: &[Frame],
    mode: TransferMode,
    variant: MaskVariant,
) -> Result<Vec<Frame>> {
    mode.check_variant(variant)?;
    let first = driving
        .first()
        .ok_or_else(|| keymask_core::Error::EmptyVideo(PathBuf::from("<driving frames>")))?;
    let driver = Driver::new(model, source, first, mode, variant)?;
    let source_mask = model.frame_mask(source, variant)?;
    driving
        .iter()
        .map(|d| model.synthesize_frame(source, &source_mask, &driver.driving_mask(d)?))
        .collect()
}

fn read_driving(path: &Path) -> Result<Vec<Frame>> {
    if path.is_dir() {
        Ok(load_video(path)?)
    } else {
        Ok(vec![Frame::read_png(path)?])
    }
}

/// Source on the top left, driving frames along the top row, outputs below.
pub fn contact_sheet(source: &Frame, driving: &[Frame], outputs: &[Frame]) -> RgbImage {
    let side = source.width() as u32;
    let cols = driving.len() as u32 + 1;
    let mut sheet = RgbImage::from_pixel(side * cols, side * 2, image::Rgb([255, 255, 255]));
    let mut put = |frame: &Frame, col: u32, row: u32| {
        image::imageops::replace(&mut sheet, &frame.to_rgb8(), i64::from(col * side), i64::from(row * side));
    };
    put(source, 0, 0);
    for (i, (d, o)) in driving.iter().zip(outputs).enumerate() {
        put(d, i as u32 + 1, 0);
        put(o, i as u32 + 1, 1);
    }
    sheet
}

/// Runs `job` and returns the written frames.
pub fn animate(job: &AnimationJob) -> Result<Vec<Frame>> {
    job.mode.check_variant(job.mask_variant)?;
    let (model, _) = MotionModel::load(&job.checkpoint_path, DType::F32)?;
    let side = model.side();
    let source = Frame::read_png(&job.source_path)?.preprocess(side)?;
    let driving = read_driving(&job.driving_path)?
        .iter()
        .map(|f| f.preprocess(side))
        .collect::<keymask_core::Result<Vec<_>>>()?;
    let outputs = animate_frames(&model, &source, &driving, job.mode, job.mask_variant)?;
    fs::create_dir_all(&job.output_dir)?;
    for (i, f) in outputs.iter().enumerate() {
        f.write_png(&job.output_dir.join(frame_file_name(i)))?;
    }
    if let Some(fps) = job.fps {
        fs::write(job.output_dir.join("fps.txt"), format!("{fps}\n"))?;
    }
    if job.contact_sheet {
        contact_sheet(&source, &driving, &outputs)
            .save(job.output_dir.join("contact_sheet.png"))
            .map_err(keymask_core::Error::from)?;
    }
    Ok(outputs)
}
