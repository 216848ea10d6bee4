//! Two-stage generator: a residual low-resolution synthesizer conditioned on
//! the source and both masks, then a U-Net refiner at full resolution.

use candle_core::{Tensor, D};

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, upsample2, BatchNorm2d, Conv2d, Hourglass, Mode, ParamStore};

struct ResBlock {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            norm1: BatchNorm2d::new(store, &format!("{name}.norm1"), channels)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, false)?,
            norm2: BatchNorm2d::new(store, &format!("{name}.norm2"), channels)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, false)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward(&self.norm1.forward(x, mode)?.relu()?)?;
        let y = self.conv2.forward(&self.norm2.forward(&y, mode)?.relu()?)?;
        Ok((y + x)?)
    }
}

pub struct LowResGenerator {
    encode: Conv2d,
    encode_norm: BatchNorm2d,
    source_encode: Conv2d,
    source_norm: BatchNorm2d,
    blocks: Vec<ResBlock>,
    up_norms: [BatchNorm2d; 2],
    out: Conv2d,
    side: usize,
}

impl LowResGenerator {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let blocks = (0..cfg.n_residual_blocks)
            .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encode: Conv2d::new(store, &format!("{name}.encode"), 5, c, 7, false)?,
            encode_norm: BatchNorm2d::new(store, &format!("{name}.encode_norm"), c)?,
            source_encode: Conv2d::new(store, &format!("{name}.source_encode"), 3, c, 7, false)?,
            source_norm: BatchNorm2d::new(store, &format!("{name}.source_norm"), c)?,
            blocks,
            up_norms: [
                BatchNorm2d::new(store, &format!("{name}.up0_norm"), c)?,
                BatchNorm2d::new(store, &format!("{name}.up1_norm"), c)?,
            ],
            out: Conv2d::new(store, &format!("{name}.out"), c, 3, 7, true)?,
            side: cfg.lowres_side,
        })
    }

    pub fn forward(&self, source_small: &Tensor, source_mask: &Tensor, driving_mask: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, _, _, _) = source_small.dims4()?;
        for (what, t, channels) in
            [("source", source_small, 3), ("source mask", source_mask, 1), ("driving mask", driving_mask, 1)]
        {
            if t.dims() != [b, channels, self.side, self.side] {
                return Err(Error::ShapeMismatch(format!(
                    "{what} must be ({b}, {channels}, {s}, {s}), got {:?}",
                    t.dims(),
                    s = self.side
                )));
            }
        }
        let x = Tensor::cat(&[source_small, source_mask, driving_mask], 1)?;
        let trunk = self.encode_norm.forward(&self.encode.forward(&x)?, mode)?.relu()?;
        let source = self.source_norm.forward(&self.source_encode.forward(source_small)?, mode)?.relu()?;
        let mut h = (trunk + source)?;
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        for norm in &self.up_norms {
            h = norm.forward(&upsample2(&h)?, mode)?.relu()?;
        }
        sigmoid(&self.out.forward(&h)?)
    }
}

pub struct HighResRefiner {
    unet: Hourglass,
    out: Conv2d,
    side: usize,
}

impl HighResRefiner {
    fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let unet = Hourglass::new(store, &format!("{name}.unet"), 6, c, c, cfg.highres_depth)?;
        let out = Conv2d::new(store, &format!("{name}.out"), unet.out_channels(), 3, 1, true)?;
        Ok(Self { unet, out, side: cfg.input_side })
    }

    pub fn forward(&self, coarse: &Tensor, source: &Tensor, mode: Mode) -> Result<Tensor> {
        if coarse.dims() != source.dims() || source.dim(D::Minus1)? != self.side || source.dim(1)? != 3 {
            return Err(Error::ShapeMismatch(format!(
                "refiner inputs must both be (B, 3, {s}, {s}), got {:?} and {:?}",
                coarse.dims(),
                source.dims(),
                s = self.side
            )));
        }
        let x = Tensor::cat(&[coarse, source], 1)?;
        sigmoid(&self.out.forward(&self.unet.forward(&x, mode)?)?)
    }
}

pub struct Generator {
    config: GeneratorConfig,
    pub low: LowResGenerator,
    pub high: HighResRefiner,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            low: LowResGenerator::new(store, &format!("{prefix}.low"), config)?,
            high: HighResRefiner::new(store, &format!("{prefix}.high"), config)?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `(B, 3, S, S)` source plus `(B, 1, S/4, S/4)` masks to a `(B, 3, S, S)` frame.
    pub fn synthesize(&self, source: &Tensor, source_mask: &Tensor, driving_mask: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = source.dims4()?;
        let s = self.config.input_side;
        if c != 3 || h != s || w != s {
            return Err(Error::ShapeMismatch(format!("source must be (B, 3, {s}, {s}), got {:?}", source.dims())));
        }
        let small = source.avg_pool2d(s / self.config.lowres_side)?;
        let coarse = self.low.forward(&small, source_mask, driving_mask, mode)?;
        self.high.forward(&coarse, source, mode)
    }
}
