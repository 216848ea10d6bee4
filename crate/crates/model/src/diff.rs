//! Batched, differentiable tensor versions of the keypoint and mask math in
//! `keymask_core`. Training goes through these; inference results are
//! checked against the core routines in the tests below.
//!
//! Shapes: heatmaps and probabilities are `(B, K, h, w)`, keypoints are
//! `(B, K, 2)` holding `(x, y)`, masks are `(B, 1, h, w)`.

use candle_core::{DType, Device, Tensor, D};
use keymask_core::Grid;

use crate::error::{Error, Result};

fn grid_coords(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..n).map(|i| (2 * i + 1) as f64 / n as f64 - 1.0).collect();
    Ok(Tensor::from_vec(v, n, device)?.to_dtype(dtype)?)
}

/// Per-channel softmax over the spatial grid of `logits / temperature`.
pub fn spatial_softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(keymask_core::Error::InvalidTemperature(temperature).into());
    }
    let (b, k, h, w) = logits.dims4()?;
    let flat = (logits.reshape((b, k, h * w))? / temperature)?;
    let max = flat.max_keepdim(D::Minus1)?.detach();
    let exp = flat.broadcast_sub(&max)?.exp()?;
    let total = exp.sum_keepdim(D::Minus1)?;
    Ok(exp.broadcast_div(&total)?.reshape((b, k, h, w))?)
}

/// Soft-argmax: expected cell-center coordinate per channel, `(B, K, 2)`.
pub fn soft_argmax(probs: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = probs.dims4()?;
    let xs = grid_coords(w, probs.dtype(), probs.device())?.reshape((1, 1, 1, w))?;
    let ys = grid_coords(h, probs.dtype(), probs.device())?.reshape((1, 1, h, 1))?;
    let x = probs.broadcast_mul(&xs)?.sum((2, 3))?;
    let y = probs.broadcast_mul(&ys)?.sum((2, 3))?;
    Ok(Tensor::stack(&[x, y], 2)?.clamp(-1.0, 1.0)?)
}

/// `exp(-‖cell − kp‖² / (2·variance))` per keypoint, `(B, K, h, w)`.
pub fn render_gaussians(kps: &Tensor, variance: f64, grid: Grid) -> Result<Tensor> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(keymask_core::Error::InvalidVariance(variance).into());
    }
    let (b, k, two) = kps.dims3()?;
    if two != 2 {
        return Err(Error::ShapeMismatch(format!("keypoints must be (B, K, 2), got {:?}", kps.dims())));
    }
    let xs = grid_coords(grid.width, kps.dtype(), kps.device())?.reshape((1, 1, 1, grid.width))?;
    let ys = grid_coords(grid.height, kps.dtype(), kps.device())?.reshape((1, 1, grid.height, 1))?;
    let kx = kps.narrow(2, 0, 1)?.reshape((b, k, 1, 1))?;
    let ky = kps.narrow(2, 1, 1)?.reshape((b, k, 1, 1))?;
    let dx2 = xs.broadcast_sub(&kx)?.sqr()?;
    let dy2 = ys.broadcast_sub(&ky)?.sqr()?;
    let d2 = dx2.broadcast_add(&dy2)?;
    Ok((d2 * (-0.5 / variance))?.exp()?)
}

/// Clipped channel sum of the Gaussians drawn at `kps`.
pub fn circles_mask(kps: &Tensor, variance: f64, grid: Grid) -> Result<Tensor> {
    let g = render_gaussians(kps, variance, grid)?;
    Ok(g.sum_keepdim(1)?.clamp(0.0, 1.0)?)
}

/// Channel sum of raw heatmaps, min-max rescaled per image. Constant sums
/// map to zeros.
pub fn heatmap_mask(logits: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = logits.dims4()?;
    let sum = logits.sum_keepdim(1)?;
    let flat = sum.reshape((b, h * w))?;
    let lo = flat.min_keepdim(1)?;
    let hi = flat.max_keepdim(1)?;
    let range = (hi - &lo)?.maximum(1e-12)?;
    let scaled = flat.broadcast_sub(&lo)?.broadcast_div(&range)?;
    Ok(scaled.reshape((b, 1, h, w))?)
}
