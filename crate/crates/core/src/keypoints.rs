//! Heatmap stacks, spatial softmax, soft-argmax keypoints and Gaussian rendering.
//!
//! Coordinates are normalized to `[-1, 1]²` with the origin at the image
//! center, `x` pointing right and `y` pointing down. Grid cells are sampled at
//! their centers, so cell `(row, col)` of an `h × w` grid sits at
//! `((2·col + 1)/w − 1, (2·row + 1)/h − 1)`.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell_x(&self, col: usize) -> f64 {
        (2 * col + 1) as f64 / self.width as f64 - 1.0
    }

    #[inline]
    pub fn cell_y(&self, row: usize) -> f64 {
        (2 * row + 1) as f64 / self.height as f64 - 1.0
    }

    /// `(row, col)` of the cell whose center is closest to `(x, y)`.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let to_index = |v: f64, n: usize| {
            let i = ((v + 1.0) * n as f64 / 2.0).floor();
            i.clamp(0.0, (n - 1) as f64) as usize
        };
        (to_index(y, self.height), to_index(x, self.width))
    }

    fn check(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::ShapeMismatch(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn check_stack(k: usize, grid: Grid, len: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::ShapeMismatch("stack needs at least one channel".into()));
    }
    grid.check()?;
    if len != k * grid.cells() {
        return Err(Error::ShapeMismatch(format!(
            "expected {k}x{}x{} = {} values, got {len}",
            grid.height,
            grid.width,
            k * grid.cells()
        )));
    }
    Ok(())
}

/// Raw, pre-activation detector output: `K` channels over a coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    channels: Vec<f32>,
    k: usize,
    grid: Grid,
    /// `(height, width)` of the frame the stack was predicted from.
    pub source_frame_shape: (usize, usize),
}

impl HeatmapStack {
    pub fn new(k: usize, grid: Grid, channels: Vec<f32>) -> Result<Self> {
        check_stack(k, grid, channels.len())?;
        Ok(Self { channels, k, grid, source_frame_shape: (grid.height * 4, grid.width * 4) })
    }

    pub fn with_source_shape(mut self, shape: (usize, usize)) -> Self {
        self.source_frame_shape = shape;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.channels[c * n..(c + 1) * n]
    }
}

/// Per-channel spatial distributions: every channel is nonnegative and sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityStack {
    channels: Vec<f32>,
    k: usize,
    grid: Grid,
}

impl ProbabilityStack {
    /// Accepts already-normalized channels (tolerance `1e-4` on each channel sum).
    pub fn new(k: usize, grid: Grid, channels: Vec<f32>) -> Result<Self> {
        check_stack(k, grid, channels.len())?;
        let stack = Self { channels, k, grid };
        for c in 0..k {
            let ch = stack.channel(c);
            let sum: f64 = ch.iter().map(|&v| f64::from(v)).sum();
            if ch.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(stack)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.channels[c * n..(c + 1) * n]
    }
}

/// `K` points `(x, y)` in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<[f32; 2]>,
}

impl KeypointSet {
    /// Coordinates must be finite and inside `[-1, 1]`.
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("keypoint set is empty".into()));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !(-1.0..=1.0).contains(v))) {
            return Err(Error::InvalidArgument(format!("keypoint {p:?} outside [-1, 1]")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    /// Pixel position of each point in a `height × width` image.
    pub fn to_pixels(&self, height: usize, width: usize) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|&[x, y]| {
                ((f64::from(x) + 1.0) * width as f64 / 2.0, (f64::from(y) + 1.0) * height as f64 / 2.0)
            })
            .collect()
    }
}

/// Unnormalized Gaussian blobs rendered at keypoint locations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStack {
    channels: Vec<f32>,
    k: usize,
    grid: Grid,
    pub variance: f64,
}

impl GaussianStack {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.channels[c * n..(c + 1) * n]
    }
}

/// Softmax over the spatial grid of each channel, with logits divided by `temperature`.
pub fn spatial_softmax(stack: &HeatmapStack, temperature: f64) -> Result<ProbabilityStack> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidTemperature(temperature));
    }
    let n = stack.grid.cells();
    let mut out = Vec::with_capacity(stack.channels.len());
    for c in 0..stack.k {
        let ch = stack.channel(c);
        let max = ch.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = ch.iter().map(|&v| ((f64::from(v) - max) / temperature).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
        debug_assert_eq!(out.len(), (c + 1) * n);
    }
    Ok(ProbabilityStack { channels: out, k: stack.k, grid: stack.grid })
}

/// Soft-argmax: the expected cell-center coordinate under each channel.
pub fn extract_keypoints(probs: &ProbabilityStack) -> KeypointSet {
    let grid = probs.grid;
    let points = (0..probs.k)
        .map(|c| {
            let ch = probs.channel(c);
            let (mut x, mut y) = (0.0f64, 0.0f64);
            for row in 0..grid.height {
                let cy = grid.cell_y(row);
                for col in 0..grid.width {
                    let p = f64::from(ch[row * grid.width + col]);
                    x += p * grid.cell_x(col);
                    y += p * cy;
                }
            }
            [x.clamp(-1.0, 1.0) as f32, y.clamp(-1.0, 1.0) as f32]
        })
        .collect();
    KeypointSet { points }
}

/// Renders `exp(-‖cell − kp‖² / (2·variance))` per keypoint; peak value is 1.
pub fn render_gaussians(kps: &KeypointSet, variance: f64, grid: Grid) -> Result<GaussianStack> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidVariance(variance));
    }
    grid.check()?;
    let mut channels = Vec::with_capacity(kps.len() * grid.cells());
    for &[kx, ky] in &kps.points {
        let (kx, ky) = (f64::from(kx), f64::from(ky));
        for row in 0..grid.height {
            let dy = grid.cell_y(row) - ky;
            for col in 0..grid.width {
                let dx = grid.cell_x(col) - kx;
                channels.push((-(dx * dx + dy * dy) / (2.0 * variance)).exp() as f32);
            }
        }
    }
    Ok(GaussianStack { channels, k: kps.len(), grid, variance })
}

/// CSV columns: `frame,point_id,x,y` (normalized coordinates).
pub fn write_keypoints_csv<W: Write>(frames: &[KeypointSet], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "point_id", "x", "y"])?;
    for (t, kps) in frames.iter().enumerate() {
        for (i, [x, y]) in kps.points.iter().enumerate() {
            w.write_record([t.to_string(), i.to_string(), x.to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
