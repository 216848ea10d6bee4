//! Renders the detector's intermediate maps for one frame as PNG files.

use std::fs;
use std::path::{Path, PathBuf};

use keymask_core::mask::write_channel_png;
use keymask_core::{circles_mask, extract_keypoints, heatmap_mask, render_gaussians, spatial_softmax, Frame};

use crate::detector::StandaloneDetector;
use crate::error::Result;

/// Writes, for a `K`-keypoint detector, `2K + 2` PNGs into `out_dir`:
/// `heatmap_XX.png` (raw channels), `heatmap_mask.png`, `gaussian_XX.png`
/// (Gaussians at the soft-argmax keypoints) and `circles_mask.png`.
/// Single channels are min-max stretched for display; masks are written as is.
pub fn export_masks(frame: &Frame, detector: &StandaloneDetector, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = detector.net.config();
    let frame = frame.preprocess(cfg.input_side)?;
    let stack = detector.predict_heatmaps(&frame)?;
    let grid = stack.grid();
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(2 * stack.k() + 2);

    for c in 0..stack.k() {
        let path = out_dir.join(format!("heatmap_{c:02}.png"));
        write_channel_png(stack.channel(c), grid, &path)?;
        written.push(path);
    }
    let path = out_dir.join("heatmap_mask.png");
    heatmap_mask(&stack).write_png(&path)?;
    written.push(path);

    let kps = extract_keypoints(&spatial_softmax(&stack, cfg.temperature)?);
    let gaussians = render_gaussians(&kps, cfg.variance, grid)?;
    for c in 0..gaussians.k() {
        let path = out_dir.join(format!("gaussian_{c:02}.png"));
        write_channel_png(gaussians.channel(c), grid, &path)?;
        written.push(path);
    }
    let path = out_dir.join("circles_mask.png");
    circles_mask(&kps, cfg.variance, grid)?.write_png(&path)?;
    written.push(path);
    Ok(written)
}
