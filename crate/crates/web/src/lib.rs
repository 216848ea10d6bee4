//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Coordinates cross the boundary as flat `[x0, y0, x1, y1, ...]` arrays in
//! normalized `[-1, 1]` units; grids are square and row-major.

use keymask_core::{
    circles_mask, extract_keypoints, relative_keypoints, spatial_softmax, Grid, HeatmapStack, KeypointSet,
};
use wasm_bindgen::prelude::*;

fn points(flat: &[f32]) -> keymask_core::Result<KeypointSet> {
    if flat.len() % 2 != 0 {
        return Err(keymask_core::Error::InvalidArgument(format!(
            "expected x,y pairs, got {} numbers",
            flat.len()
        )));
    }
    KeypointSet::new(flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
}

fn flatten(kps: &KeypointSet) -> Vec<f32> {
    kps.points().iter().flatten().copied().collect()
}

/// Circles mask over a `side × side` grid.
pub fn circles(flat: &[f32], variance: f64, side: usize) -> keymask_core::Result<Vec<f32>> {
    Ok(circles_mask(&points(flat)?, variance, Grid::square(side))?.data().to_vec())
}

/// One logit channel to its probability map followed by the soft-argmax `[x, y]`.
pub fn softmax_and_argmax(logits: &[f32], side: usize, temperature: f64) -> keymask_core::Result<Vec<f32>> {
    let stack = HeatmapStack::new(1, Grid::square(side), logits.to_vec())?;
    let probs = spatial_softmax(&stack, temperature)?;
    let mut out = probs.data().to_vec();
    out.extend(flatten(&extract_keypoints(&probs)));
    Ok(out)
}

/// `source + (driving − first)`, clamped.
pub fn transfer(source: &[f32], driving: &[f32], first: &[f32]) -> keymask_core::Result<Vec<f32>> {
    Ok(flatten(&relative_keypoints(&points(source)?, &points(driving)?, &points(first)?)?))
}

fn js(e: keymask_core::Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.category()))
}

#[wasm_bindgen(js_name = circlesMask)]
pub fn circles_mask_js(points: &[f32], variance: f64, side: usize) -> Result<Vec<f32>, JsError> {
    circles(points, variance, side).map_err(js)
}

/// Returns `side²` probabilities followed by the keypoint.
#[wasm_bindgen(js_name = softArgmax)]
pub fn soft_argmax_js(logits: &[f32], side: usize, temperature: f64) -> Result<Vec<f32>, JsError> {
    softmax_and_argmax(logits, side, temperature).map_err(js)
}

#[wasm_bindgen(js_name = relativeTransfer)]
pub fn relative_transfer_js(source: &[f32], driving: &[f32], first: &[f32]) -> Result<Vec<f32>, JsError> {
    transfer(source, driving, first).map_err(js)
}
