//! Multi-scale perceptual loss over a frozen convolutional feature extractor.
//!
//! Features are tapped at the first activation of each of five stages. The
//! extractor is either VGG-19 loaded from a safetensors file (torchvision
//! parameter names) or a small random-weight network that needs no download.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Scales the loss is evaluated at, largest first.
pub const PYRAMID_SCALES: [usize; 4] = [256, 128, 64, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pool {
    Max,
    Avg,
}

struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pad = self.weight.dim(3)? / 2;
        let y = crate::ops::conv2d(x, &self.weight, pad)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?.relu()?)
    }
}

/// Frozen feature network. Its weights are plain tensors, so gradients reach
/// the input image but never the extractor.
pub struct FeatureExtractor {
    stages: Vec<Vec<ConvLayer>>,
    pool: Pool,
    mean: Tensor,
    std: Tensor,
    dtype: DType,
}

/// One feature map per tapped layer, each `(B, C_i, h_i, w_i)`.
pub type FeaturePyramid = Vec<Tensor>;

fn channel_constants(v: [f64; 3], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(v.to_vec(), (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

impl FeatureExtractor {
    fn with_stages(stages: Vec<Vec<ConvLayer>>, pool: Pool, dtype: DType) -> Result<Self> {
        Ok(Self {
            stages,
            pool,
            mean: channel_constants(IMAGENET_MEAN, dtype)?,
            std: channel_constants(IMAGENET_STD, dtype)?,
            dtype,
        })
    }

    /// Random-weight stand-in: one 3×3 conv per stage with the given widths,
    /// average pooling between stages, He-uniform weights.
    pub fn miniature(widths: &[usize], dtype: DType, seed: u64) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::InvalidConfig("extractor needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(widths.len());
        let mut in_c = 3;
        for &out_c in widths {
            let fan_in = in_c * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..out_c * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..out_c).map(|_| rng.random_range(-0.1..0.1)).collect();
            stages.push(vec![ConvLayer {
                weight: Tensor::from_vec(w, (out_c, in_c, 3, 3), &Device::Cpu)?.to_dtype(dtype)?,
                bias: Tensor::from_vec(b, out_c, &Device::Cpu)?.to_dtype(dtype)?,
            }]);
            in_c = out_c;
        }
        Self::with_stages(stages, Pool::Avg, dtype)
    }

    /// The default stand-in used when no pretrained weights are configured.
    pub fn default_miniature(dtype: DType) -> Result<Self> {
        Self::miniature(&[8, 16, 16, 32, 32], dtype, 0x5eed)
    }

    /// VGG-19 `features.*` weights from a safetensors file.
    pub fn vgg19(path: &Path, dtype: DType) -> Result<Self> {
        if !path.exists() {
            return Err(keymask_core::Error::NotFound(path.to_path_buf()).into());
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let fetch = |idx: usize, what: &str| -> Result<Tensor> {
            let candidates = [format!("features.{idx}.{what}"), format!("{idx}.{what}")];
            candidates
                .iter()
                .find_map(|k| tensors.get(k))
                .ok_or_else(|| Error::ConfigMismatch(format!("VGG-19 file lacks `features.{idx}.{what}`")))
                .and_then(|t| Ok(t.to_dtype(dtype)?))
        };
        // Conv indices of `torchvision.models.vgg19().features`, grouped by stage,
        // up to the first conv of stage five.
        let layout: [&[usize]; 5] = [&[0, 2], &[5, 7], &[10, 12, 14, 16], &[19, 21, 23, 25], &[28]];
        let mut stages = Vec::new();
        for convs in layout {
            let layers = convs
                .iter()
                .map(|&i| Ok(ConvLayer { weight: fetch(i, "weight")?, bias: fetch(i, "bias")? }))
                .collect::<Result<Vec<_>>>()?;
            stages.push(layers);
        }
        Self::with_stages(stages, Pool::Max, dtype)
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Features of `(B, 3, H, W)` images with values in `[0, 1]`.
    pub fn feature_maps(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut x = images.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = match self.pool {
                    Pool::Max => x.max_pool2d(2)?,
                    Pool::Avg => x.avg_pool2d(2)?,
                };
            }
            x = stage[0].forward(&x)?;
            taps.push(x.clone());
            if i + 1 < self.stages.len() {
                for layer in &stage[1..] {
                    x = layer.forward(&x)?;
                }
            }
        }
        Ok(taps)
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Sum over tapped layers of the mean absolute feature difference.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    check_pair(pred, target)?;
    let a = extractor.feature_maps(pred)?;
    let b = extractor.feature_maps(target)?;
    let mut total: Option<Tensor> = None;
    for (fa, fb) in a.iter().zip(&b) {
        let term = (fa - fb)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one level"))
}

/// The pyramid scales reachable from `side` by power-of-two downsampling.
pub fn pyramid_scales(side: usize) -> Result<Vec<usize>> {
    let scales: Vec<usize> = PYRAMID_SCALES
        .iter()
        .copied()
        .filter(|&s| s <= side && side % s == 0 && (side / s).is_power_of_two())
        .collect();
    if scales.is_empty() {
        return Err(Error::ConfigMismatch(format!(
            "side {side} reaches none of the pyramid scales {PYRAMID_SCALES:?}"
        )));
    }
    Ok(scales)
}

/// Equal-weight sum of [`reconstruction_loss`] over the pyramid scales,
/// downsampling by average pooling.
pub fn pyramid_loss(pred: &Tensor, target: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    check_pair(pred, target)?;
    let side = pred.dim(3)?;
    if pred.dim(2)? != side {
        return Err(Error::ShapeMismatch(format!("frames must be square, got {:?}", pred.dims())));
    }
    let mut total: Option<Tensor> = None;
    for scale in pyramid_scales(side)? {
        let factor = side / scale;
        let (p, t) = if factor == 1 {
            (pred.clone(), target.clone())
        } else {
            (pred.avg_pool2d(factor)?, target.avg_pool2d(factor)?)
        };
        let term = reconstruction_loss(&p, &t, extractor)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn image(b: usize, side: usize, dtype: DType) -> Tensor {
        Tensor::rand(0.0f32, 1.0, (b, 3, side, side), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn tap_sides_halve_per_stage() {
        let ex = FeatureExtractor::default_miniature(DType::F32).unwrap();
        let f = ex.feature_maps(&image(1, 64, DType::F32)).unwrap();
        let sides: Vec<usize> = f.iter().map(|t| t.dim(3).unwrap()).collect();
        assert_eq!(sides, vec![64, 32, 16, 8, 4]);
    }

    #[test]
    fn scale_selection() {
        assert_eq!(pyramid_scales(256).unwrap(), vec![256, 128, 64, 32]);
        assert_eq!(pyramid_scales(64).unwrap(), vec![64, 32]);
        assert_eq!(pyramid_scales(32).unwrap(), vec![32]);
        assert_eq!(pyramid_scales(16).unwrap_err().category(), "ConfigMismatch");
        assert!(pyramid_scales(96).is_err());
    }

    #[test]
    fn zero_at_identity_symmetric_and_dominant() {
        let ex = FeatureExtractor::default_miniature(DType::F32).unwrap();
        let a = image(2, 64, DType::F32);
        let b = image(2, 64, DType::F32);
        assert_eq!(scalar(&pyramid_loss(&a, &a, &ex).unwrap()), 0.0);
        let ab = scalar(&pyramid_loss(&a, &b, &ex).unwrap());
        let ba = scalar(&pyramid_loss(&b, &a, &ex).unwrap());
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= scalar(&reconstruction_loss(&a, &b, &ex).unwrap()));
    }

    #[test]
    fn gradient_reaches_input_only() {
        let ex = FeatureExtractor::miniature(&[4, 4], DType::F64, 1).unwrap();
        let x = Var::from_tensor(&image(1, 32, DType::F64)).unwrap();
        let loss = pyramid_loss(x.as_tensor(), &image(1, 32, DType::F64), &ex).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&x).unwrap();
        assert!(scalar(&g.abs().unwrap().sum_all().unwrap()) > 0.0);
        assert!(ex.stages.iter().flatten().all(|l| !l.weight.is_variable() && !l.bias.is_variable()));
    }

    #[test]
    fn mismatched_shapes_fail() {
        let ex = FeatureExtractor::default_miniature(DType::F32).unwrap();
        let err = pyramid_loss(&image(1, 32, DType::F32), &image(1, 64, DType::F32), &ex).unwrap_err();
        assert_eq!(err.category(), "ShapeMismatch");
    }

    #[test]
    fn missing_vgg_file() {
        let err = FeatureExtractor::vgg19(Path::new("/nonexistent/vgg19.safetensors"), DType::F32)
            .err()
            .unwrap();
        assert_eq!(err.category(), "NotFound");
    }
}
