//! Custom tensor ops for layers whose stock backward passes dominate CPU
//! training time: convolution, nearest-neighbour upsampling and batch norm.
//!
//! The convolution lowers both passes to im2col plus one matrix product per
//! image and accumulates the input gradient with col2im.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};
use gemm::Parallelism;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &Layout, weight: &Layout, pad: usize) -> candle_core::Result<Self> {
        let (batch, c_in, h, w) = x.shape().dims4()?;
        let (c_out, wc, k, k2) = weight.shape().dims4()?;
        if wc != c_in || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!(
                "conv: input {:?} incompatible with kernel {:?} at padding {pad}",
                x.shape(),
                weight.shape()
            );
        }
        Ok(Self { batch, c_in, h, w, c_out, k, pad, oh: h + 2 * pad - k + 1, ow: w + 2 * pad - k + 1 })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 unpadded kernel reads the input plane as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

trait Float: Copy + Default + 'static + std::ops::AddAssign {
    const ZERO: Self;
    const ONE: Self;
}

impl Float for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}

impl Float for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
}

/// Row-major `dst (m × n) (+)= a (m × k) · b (k × n)`, where `a` and `b` may
/// be given transposed.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Float>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
) {
    assert!(dst.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    let (a_rs, a_cs) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        );
    }
}

fn im2col<T: Float>(g: &Geometry, image: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let src = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src_line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    // Valid output columns satisfy 0 <= ox + kx - pad < w.
                    let lo = g.pad.saturating_sub(kx).min(g.ow);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.ow).max(lo);
                    if lo == hi {
                        line.fill(T::ZERO);
                        continue;
                    }
                    line[..lo].fill(T::ZERO);
                    line[hi..].fill(T::ZERO);
                    let start = lo + kx - g.pad;
                    line[lo..hi].copy_from_slice(&src_line[start..start + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &Geometry, col: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let lo = g.pad.saturating_sub(kx).min(g.ow);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.ow).max(lo);
                    if lo == hi {
                        continue;
                    }
                    let start = lo + kx - g.pad;
                    let dst_line = &mut dst[iy as usize * g.w + start..iy as usize * g.w + start + (hi - lo)];
                    for (d, &s) in dst_line.iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn forward<T: Float>(g: &Geometry, x: &[T], weight: &[T]) -> Vec<T> {
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * g.out_plane();
    let mut out = vec![T::ZERO; g.batch * out_size];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; g.rows() * g.out_plane()] };
    for n in 0..g.batch {
        let image = &x[n * in_size..(n + 1) * in_size];
        let cols: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut col);
            &col
        };
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        matmul(g.c_out, g.out_plane(), g.rows(), dst, false, weight, false, cols, false);
    }
    out
}

fn grad_input<T: Float>(g: &Geometry, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * g.out_plane();
    let mut grad_x = vec![T::ZERO; g.batch * in_size];
    let mut col = vec![T::ZERO; g.rows() * g.out_plane()];
    for n in 0..g.batch {
        let go = &grad_out[n * out_size..(n + 1) * out_size];
        let dst = &mut grad_x[n * in_size..(n + 1) * in_size];
        if g.is_pointwise() {
            matmul(g.rows(), g.out_plane(), g.c_out, dst, false, weight, true, go, false);
        } else {
            matmul(g.rows(), g.out_plane(), g.c_out, &mut col, false, weight, true, go, false);
            col2im(g, &col, dst);
        }
    }
    grad_x
}

fn grad_weight<T: Float>(g: &Geometry, x: &[T], grad_out: &[T]) -> Vec<T> {
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * g.out_plane();
    let mut grad_w = vec![T::ZERO; g.c_out * g.rows()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; g.rows() * g.out_plane()] };
    for n in 0..g.batch {
        let image = &x[n * in_size..(n + 1) * in_size];
        let cols: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut col);
            &col
        };
        let go = &grad_out[n * out_size..(n + 1) * out_size];
        matmul(g.c_out, g.rows(), g.out_plane(), &mut grad_w, n > 0, go, false, cols, true);
    }
    grad_w
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv: operands must be contiguous"),
    }
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(d1), CpuStorage::F32(d2)) => {
                let ($a, $b) = (contiguous(d1, $l1)?, contiguous(d2, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(d1), CpuStorage::F64(d2)) => {
                let ($a, $b) = (contiguous(d1, $l1)?, contiguous(d2, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv: operands must both be f32 or both f64"),
        }
    };
}

/// `conv(x, weight)` with autograd.
struct Conv {
    pad: usize,
}

/// Input gradient: `(grad_out, weight) -> grad_x`, given the forward geometry.
struct ConvGradInput {
    geometry: Geometry,
}

/// Weight gradient: `(x, grad_out) -> grad_weight`.
struct ConvGradWeight {
    geometry: Geometry,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1, l2, self.pad)?;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(&g, x, w));
        Ok((out, Shape::from((g.batch, g.c_out, g.oh, g.ow))))
    }

    fn bwd(&self, x: &Tensor, weight: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let geometry = Geometry::new(x.layout(), weight.layout(), self.pad)?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(weight, &ConvGradInput { geometry })?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight { geometry })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-im2col-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let out = dispatch!(s1, l1, s2, l2, |go, w| grad_input(&g, go, w));
        Ok((out, Shape::from((g.batch, g.c_in, g.h, g.w))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-im2col-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let out = dispatch!(s1, l1, s2, l2, |x, go| grad_weight(&g, x, go));
        Ok((out, Shape::from((g.c_out, g.c_in, g.k, g.k))))
    }
}

/// Stride-1 convolution of `(B, C, H, W)` by `(C_out, C, k, k)` with zero padding `pad`.
pub fn conv2d(x: &Tensor, weight: &Tensor, pad: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Conv { pad })?)
}

/// Nearest-neighbour 2× upsampling whose backward is a 2×2 sum pool.
struct Upsample2;

fn upsample2_plane<T: Copy>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len() * 4);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for row in plane.chunks_exact(w) {
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + 2 * w);
        }
    }
    out
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(upsample2_plane(contiguous(d, l)?, b * c, h, w)),
            CpuStorage::F64(d) => CpuStorage::F64(upsample2_plane(contiguous(d, l)?, b * c, h, w)),
            _ => candle_core::bail!("upsample: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((grad.avg_pool2d(2)? * 4.0)?))
    }
}

/// Nearest-neighbour 2× upsampling of a `(B, C, H, W)` tensor.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

/// Training-mode batch norm with the batch statistics precomputed.
struct BatchNormTrain {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()
}

fn bn_dims(shape: &Shape) -> candle_core::Result<(usize, usize, usize)> {
    let (b, c, h, w) = shape.dims4()?;
    Ok((b, c, h * w))
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = bn_dims(l1.shape())?;
        macro_rules! run {
            ($x:expr, $g:expr, $be:expr, $t:ty) => {{
                let (x, g, be) = (contiguous($x, l1)?, contiguous($g, l2)?, contiguous($be, l3)?);
                let mut out = Vec::with_capacity(x.len());
                for n in 0..b {
                    for ch in 0..c {
                        let scale = self.inv_std[ch] * g[ch] as f64;
                        let shift = be[ch] as f64 - self.mean[ch] * scale;
                        let base = (n * c + ch) * hw;
                        out.extend(x[base..base + hw].iter().map(|&v| (v as f64 * scale + shift) as $t));
                    }
                }
                out
            }};
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(be)) => CpuStorage::F32(run!(x, g, be, f32)),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(be)) => CpuStorage::F64(run!(x, g, be, f64)),
            _ => candle_core::bail!("batch norm: operands must all be f32 or all f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, hw) = bn_dims(x.shape())?;
        let (xs, gs, dy) = (to_f64(x)?, to_f64(gamma)?, to_f64(grad)?);
        let count = (b * hw) as f64;
        let xhat = |i: usize, ch: usize| (xs[i] - self.mean[ch]) * self.inv_std[ch];
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    dbeta[ch] += dy[i];
                    dgamma[ch] += dy[i] * xhat(i, ch);
                }
            }
        }
        let mut dx = vec![0.0; xs.len()];
        for n in 0..b {
            for ch in 0..c {
                let k = gs[ch] * self.inv_std[ch] / count;
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    dx[i] = k * (count * dy[i] - dbeta[ch] - xhat(i, ch) * dgamma[ch]);
                }
            }
        }
        let dtype = x.dtype();
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, x.shape(), dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dtype)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dtype)?),
        ))
    }
}

/// Batch norm of `(B, C, H, W)` over batch statistics. Returns the output with
/// the per-channel mean and biased variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let x = x.contiguous()?;
    let (b, c, hw) = bn_dims(x.shape())?;
    let xs = to_f64(&x)?;
    let count = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            mean[ch] += xs[base..base + hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * hw;
            var[ch] += xs[base..base + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let op = BatchNormTrain { mean: mean.clone(), inv_std };
    let y = x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    Ok((y, mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn matches_backend_convolution_and_its_gradients() {
        let dev = Device::Cpu;
        for (c_in, c_out, k, pad, h, w) in [(3, 4, 3, 1, 7, 5), (2, 3, 7, 3, 9, 9), (5, 2, 1, 0, 4, 6), (2, 2, 3, 0, 6, 6)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, c_in, h, w), &dev).unwrap()).unwrap();
            let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (c_out, c_in, k, k), &dev).unwrap()).unwrap();
            let probe = Tensor::randn(0f64, 1.0, (2, c_out, h + 2 * pad - k + 1, w + 2 * pad - k + 1), &dev).unwrap();

            let ours = conv2d(x.as_tensor(), wt.as_tensor(), pad).unwrap();
            let reference = x.as_tensor().conv2d(wt.as_tensor(), pad, 1, 1, 1).unwrap();
            assert!(max_diff(&ours, &reference) < 1e-10);

            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(g1.get(&wt).unwrap(), g2.get(&wt).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn f32_path_runs() {
        let dev = Device::Cpu;
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &dev).unwrap();
        let w = Tensor::ones((1, 2, 3, 3), DType::F32, &dev).unwrap();
        let y: Vec<f32> = conv2d(&x, &w, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // Corner sees 2×2 taps per channel, edge 2×3, interior 3×3.
        assert_eq!(y[0], 8.0);
        assert_eq!(y[1], 12.0);
        assert_eq!(y[5], 18.0);
    }

    #[test]
    fn upsample_matches_backend() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 8, 10), &dev).unwrap();
        let ours = upsample2(x.as_tensor()).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(8, 10).unwrap();
        assert_eq!(max_diff(&ours, &reference), 0.0);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(1f64, 3.0, (3, 4, 5, 6), &dev).unwrap()).unwrap();
        let gamma = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 4, 5, 6), &dev).unwrap();
        let (ours, mean, _) = batch_norm_train(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 1e-5).unwrap();

        let xt = x.as_tensor();
        let mu = xt.mean_keepdim((0, 2, 3)).unwrap();
        let centered = xt.broadcast_sub(&mu).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        let reference = centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let mu: Vec<f64> = mu.flatten_all().unwrap().to_vec1().unwrap();
        assert!(mean.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-12));

        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn mixed_dtypes_fail() {
        let dev = Device::Cpu;
        let x = Tensor::ones((1, 1, 3, 3), DType::F32, &dev).unwrap();
        let w = Tensor::ones((1, 1, 3, 3), DType::F64, &dev).unwrap();
        assert!(conv2d(&x, &w, 1).is_err());
    }
}
