//! Parameter storage and the convolutional building blocks shared by the
//! detector and the generator.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Whether batch-norm layers use batch statistics (and update their running
/// averages) or the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Names are dotted paths such as `generator.low.res0.conv1.weight`.
///
/// Initial values come from a seeded host RNG, so construction is reproducible.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, var: Var, buffer: bool) -> Result<Var> {
        let map = if buffer { &mut self.buffers } else { &mut self.params };
        if map.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name `{name}`")));
        }
        map.insert(name, var.clone());
        Ok(var)
    }

    /// Centered uniform values in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name.to_owned(), Var::from_tensor(&t)?, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, buffer: bool) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name.to_owned(), Var::from_tensor(&t)?, buffer)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Parameters and buffers together, in name order.
    pub fn all(&self) -> impl Iterator<Item = (&String, &Var)> {
        let mut merged: Vec<(&String, &Var)> = self.params.iter().chain(&self.buffers).collect();
        merged.sort_by(|a, b| a.0.cmp(b.0));
        merged.into_iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Overwrites `name` with `value` (converted to the store dtype).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ConfigMismatch(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form keeps gradients finite where exp would overflow.
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    padding: usize,
}

impl Conv2d {
    /// Square kernel, stride 1, "same" padding. Weights are uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[out_channels], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::ops::conv2d(x, self.weight.as_tensor(), self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(N, H, W)` with momentum 0.1 running averages.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0, false)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0, false)?,
            running_mean: store.constant(&format!("{name}.running_mean"), &[channels], 0.0, true)?,
            running_var: store.constant(&format!("{name}.running_var"), &[channels], 1.0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            let (y, mean, var) =
                crate::ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), BN_EPS)?;
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let blend = |running: &Var, batch: Vec<f64>, factor: f64| -> Result<()> {
                let batch = Tensor::from_vec(batch, running.dims(), running.device())?.to_dtype(running.dtype())?;
                let next = ((running.as_tensor() * (1.0 - BN_MOMENTUM))? + (batch * (BN_MOMENTUM * factor))?)?;
                Ok(running.set(&next)?)
            };
            blend(&self.running_mean, mean, 1.0)?;
            blend(&self.running_var, var, unbiased)?;
            return Ok(y);
        }
        let mean = self.running_mean.as_tensor().reshape((1, (), 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, (), 1, 1))?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let gamma = self.gamma.as_tensor().reshape((1, (), 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, (), 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

pub use crate::ops::upsample2;

/// conv3×3 → batch-norm → relu → 2×2 average pool.
pub struct DownBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

impl DownBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_c, out_c, 3, false)?,
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?, mode)?.relu()?;
        Ok(y.avg_pool2d(2)?)
    }
}

/// 2× upsample → conv3×3 → batch-norm → relu.
pub struct UpBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

impl UpBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_c, out_c, 3, false)?,
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(&upsample2(x)?)?;
        Ok(self.norm.forward(&y, mode)?.relu()?)
    }
}

/// U-Net hourglass: `blocks` down blocks, `blocks` up blocks, and every
/// encoder output (including the raw input) concatenated onto the decoder
/// output of matching resolution.
///
/// Width of level `i` is `min(max_features, block_expansion · 2^(i+1))`; the
/// output carries `block_expansion + in_channels` channels at input resolution.
pub struct Hourglass {
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    out_channels: usize,
}

impl Hourglass {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        block_expansion: usize,
        max_features: usize,
        blocks: usize,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::InvalidConfig("hourglass needs at least one block".into()));
        }
        let width = |i: usize| max_features.min(block_expansion << i);
        let mut down = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let in_c = if i == 0 { in_channels } else { width(i) };
            down.push(DownBlock::new(store, &format!("{name}.down{i}"), in_c, width(i + 1))?);
        }
        let mut up = Vec::with_capacity(blocks);
        for i in (0..blocks).rev() {
            let in_c = if i == blocks - 1 { width(i + 1) } else { 2 * width(i + 1) };
            up.push(UpBlock::new(store, &format!("{name}.up{i}"), in_c, width(i))?);
        }
        Ok(Self { down, up, out_channels: width(0) + in_channels })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut skips = vec![x.clone()];
        for block in &self.down {
            let next = block.forward(skips.last().expect("non-empty"), mode)?;
            skips.push(next);
        }
        let mut out = skips.pop().expect("bottleneck");
        for block in &self.up {
            out = block.forward(&out, mode)?;
            let skip = skips.pop().expect("one skip per up block");
            out = Tensor::cat(&[&out, &skip], 1)?;
        }
        Ok(out)
    }
}

/// `(1, C, H, W)` tensor from channel-first values.
pub fn image_tensor(chw: Vec<f32>, channels: usize, height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(chw, (1, channels, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}
