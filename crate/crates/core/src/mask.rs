//! Single-channel structural masks, the generator's only motion input.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::keypoints::{render_gaussians, Grid, HeatmapStack, KeypointSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MaskVariant {
    /// Min-max rescaled sum of the raw heatmap channels.
    #[default]
    Heatmap,
    /// Clipped sum of Gaussians drawn at the soft-argmax keypoints.
    Circles,
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskVariant::Heatmap => "heatmap",
            MaskVariant::Circles => "circles",
        })
    }
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heatmap" => Ok(MaskVariant::Heatmap),
            "circles" => Ok(MaskVariant::Circles),
            other => Err(Error::Parse(format!("unknown mask variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralMask {
    map: Vec<f32>,
    grid: Grid,
    pub variant: MaskVariant,
    /// Keypoints the mask was drawn from (circles masks only).
    pub origin_kps: Option<KeypointSet>,
    /// Set when a heatmap sum was constant and the map fell back to zeros.
    pub degenerate: bool,
}

impl StructuralMask {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.map
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.map
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_gray8(&self) -> GrayImage {
        to_gray8(&self.map, self.grid)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path)?;
        Ok(())
    }
}

pub(crate) fn to_gray8(values: &[f32], grid: Grid) -> GrayImage {
    let raw = values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(grid.width as u32, grid.height as u32, raw)
        .expect("buffer length matches grid")
}

/// Affine min-max rescale into `[0, 1]`; constant inputs map to zeros and report `true`.
pub fn min_max_normalize(values: &[f32]) -> (Vec<f32>, bool) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    let range = hi - lo;
    if !(range > 0.0 && range.is_finite()) {
        return (vec![0.0; values.len()], true);
    }
    let out = values.iter().map(|&v| ((f64::from(v) - lo) / range) as f32).collect();
    (out, false)
}

/// Writes a channel after per-channel min-max rescaling, for visual inspection.
pub fn write_channel_png(values: &[f32], grid: Grid, path: &Path) -> Result<()> {
    let (scaled, _) = min_max_normalize(values);
    to_gray8(&scaled, grid).save(path)?;
    Ok(())
}

/// Options for [`heatmap_mask_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeatmapMaskOptions {
    /// Values below this threshold (after rescaling) are zeroed. Off by default.
    pub threshold: Option<f32>,
}

/// Sum of the raw channels, rescaled per image to span `[0, 1]`.
pub fn heatmap_mask(stack: &HeatmapStack) -> StructuralMask {
    heatmap_mask_with(stack, HeatmapMaskOptions::default())
}

pub fn heatmap_mask_with(stack: &HeatmapStack, options: HeatmapMaskOptions) -> StructuralMask {
    let grid = stack.grid();
    let n = grid.cells();
    let mut sum = vec![0.0f32; n];
    for c in 0..stack.k() {
        for (s, &v) in sum.iter_mut().zip(stack.channel(c)) {
            *s += v;
        }
    }
    let (mut map, degenerate) = min_max_normalize(&sum);
    if let Some(t) = options.threshold {
        map.iter_mut().filter(|v| **v < t).for_each(|v| *v = 0.0);
    }
    StructuralMask { map, grid, variant: MaskVariant::Heatmap, origin_kps: None, degenerate }
}

/// Sum of the rendered keypoint Gaussians, clipped to `[0, 1]`.
pub fn circles_mask(kps: &KeypointSet, variance: f64, grid: Grid) -> Result<StructuralMask> {
    let gaussians = render_gaussians(kps, variance, grid)?;
    let n = grid.cells();
    let mut map = vec![0.0f32; n];
    for c in 0..gaussians.k() {
        for (m, &v) in map.iter_mut().zip(gaussians.channel(c)) {
            *m += v;
        }
    }
    map.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(StructuralMask {
        map,
        grid,
        variant: MaskVariant::Circles,
        origin_kps: Some(kps.clone()),
        degenerate: false,
    })
}
