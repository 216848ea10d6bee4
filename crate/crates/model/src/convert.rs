//! Conversions between core frames/masks and `(B, C, H, W)` tensors.

use candle_core::{DType, Device, Tensor};
use keymask_core::{Frame, StructuralMask};

use crate::error::{Error, Result};

/// Stacks equally sized frames into a `(B, 3, H, W)` tensor.
pub fn frames_to_tensor(frames: &[Frame], dtype: DType) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::ShapeMismatch("empty frame batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "frame {}x{} in a batch of {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        data.extend(f.to_chw());
    }
    Ok(Tensor::from_vec(data, (frames.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor into frames, clamping into `[0, 1]`.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    let per = 3 * h * w;
    (0..b).map(|i| Ok(Frame::from_chw(h, w, &data[i * per..(i + 1) * per])?)).collect()
}

/// Stacks masks into a `(B, 1, h, w)` tensor.
pub fn masks_to_tensor(masks: &[&StructuralMask], dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::ShapeMismatch("no masks".into()))?;
    let grid = first.grid();
    let mut data = Vec::with_capacity(masks.len() * grid.cells());
    for m in masks {
        if m.grid() != grid {
            return Err(Error::ShapeMismatch(format!("mask grid {:?} in a batch of {grid:?}", m.grid())));
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, grid.height, grid.width), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let px: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 18.0).collect();
        let f = Frame::new(2, 3, px).unwrap();
        let t = frames_to_tensor(&[f.clone(), f.clone()], DType::F64).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 3]);
        let back = tensor_to_frames(&t).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].pixels(), f.pixels());
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let a = Frame::filled(4, 4, [0.0; 3]).unwrap();
        let b = Frame::filled(4, 5, [0.0; 3]).unwrap();
        assert!(frames_to_tensor(&[a, b], DType::F32).is_err());
        assert!(frames_to_tensor(&[], DType::F32).is_err());
    }
}
