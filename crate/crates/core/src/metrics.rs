//! Reconstruction metrics: L1, average keypoint distance (AKD) and average
//! Euclidean distance between identity embeddings (AED).
//!
//! Pose and embedding networks are external tools; their outputs are read
//! from CSV files:
//!
//! * pose file: `frame,kp_id,x,y,present` (pixels; `present` is 0/1)
//! * embedding file: `frame,d0,d1,...`

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Mean over frames of the per-frame mean absolute pixel difference.
pub fn l1_metric(generated: &[Frame], truth: &[Frame]) -> Result<f64> {
    if generated.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequence lengths differ: {} vs {}",
            generated.len(),
            truth.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::ShapeMismatch("empty sequences".into()));
    }
    let mut total = 0.0;
    for (g, t) in generated.iter().zip(truth) {
        total += g.mean_abs_diff(t)?;
    }
    Ok(total / generated.len() as f64)
}

/// Per-frame body keypoints; `None` marks an undetected keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFile {
    pub frames: Vec<Vec<Option<(f64, f64)>>>,
}

impl PoseFile {
    pub fn new(frames: Vec<Vec<Option<(f64, f64)>>>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.len() != first.len()) {
                return Err(Error::ConfigMismatch("keypoint count varies between frames".into()));
            }
        }
        Ok(Self { frames })
    }

    pub fn keypoints_per_frame(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rows: BTreeMap<usize, BTreeMap<usize, Option<(f64, f64)>>> = BTreeMap::new();
        let mut r = csv::Reader::from_reader(reader);
        for record in r.records() {
            let record = record?;
            let field = |i: usize| {
                record.get(i).map(str::trim).ok_or_else(|| Error::Parse("short pose row".into()))
            };
            let parse_err = |e: std::num::ParseIntError| Error::Parse(e.to_string());
            let parse_f = |e: std::num::ParseFloatError| Error::Parse(e.to_string());
            let frame: usize = field(0)?.parse().map_err(parse_err)?;
            let kp: usize = field(1)?.parse().map_err(parse_err)?;
            let x: f64 = field(2)?.parse().map_err(parse_f)?;
            let y: f64 = field(3)?.parse().map_err(parse_f)?;
            let present = matches!(field(4)?, "1" | "true" | "True");
            rows.entry(frame).or_default().insert(kp, present.then_some((x, y)));
        }
        let n_kp = rows.values().map(|r| r.keys().max().map_or(0, |m| m + 1)).max().unwrap_or(0);
        let n_frames = rows.keys().max().map_or(0, |m| m + 1);
        let frames = (0..n_frames)
            .map(|f| {
                (0..n_kp)
                    .map(|k| rows.get(&f).and_then(|r| r.get(&k).copied().flatten()))
                    .collect()
            })
            .collect();
        Self::new(frames)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frame", "kp_id", "x", "y", "present"])?;
        for (f, kps) in self.frames.iter().enumerate() {
            for (k, kp) in kps.iter().enumerate() {
                let (x, y, p) = kp.map_or((0.0, 0.0, 0), |(x, y)| (x, y, 1));
                w.write_record([f.to_string(), k.to_string(), x.to_string(), y.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-frame identity embeddings of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub frames: Vec<Vec<f64>>,
}

impl EmbeddingFile {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.len() != first.len()) {
                return Err(Error::ConfigMismatch("embedding dimension varies between frames".into()));
            }
        }
        Ok(Self { frames })
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut r = csv::Reader::from_reader(reader);
        for record in r.records() {
            let record = record?;
            let mut fields = record.iter().map(str::trim);
            let frame: usize = fields
                .next()
                .ok_or_else(|| Error::Parse("empty embedding row".into()))?
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?;
            let values = fields
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.insert(frame, values);
        }
        if rows.keys().enumerate().any(|(i, &f)| i != f) {
            return Err(Error::Parse("embedding frames must be numbered 0..n without gaps".into()));
        }
        Self::new(rows.into_values().collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["frame".to_string()];
        header.extend((0..self.dim()).map(|i| format!("d{i}")));
        w.write_record(&header)?;
        for (f, v) in self.frames.iter().enumerate() {
            let mut rec = vec![f.to_string()];
            rec.extend(v.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean pixel distance over `(frame, keypoint)` pairs detected in both files.
pub fn akd(generated: &PoseFile, truth: &PoseFile) -> Result<f64> {
    if generated.frames.len() != truth.frames.len() {
        return Err(Error::ConfigMismatch(format!(
            "pose files cover {} and {} frames",
            generated.frames.len(),
            truth.frames.len()
        )));
    }
    if generated.keypoints_per_frame() != truth.keypoints_per_frame() {
        return Err(Error::ConfigMismatch(format!(
            "pose schemas differ: {} vs {} keypoints",
            generated.keypoints_per_frame(),
            truth.keypoints_per_frame()
        )));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (g, t) in generated.frames.iter().zip(&truth.frames) {
        for (a, b) in g.iter().zip(t) {
            if let (Some((ax, ay)), Some((bx, by))) = (a, b) {
                total += (ax - bx).hypot(ay - by);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Undefined("no keypoint is present in both pose files".into()));
    }
    Ok(total / count as f64)
}

/// Mean over frames of the Euclidean distance between embeddings.
pub fn aed(generated: &EmbeddingFile, truth: &EmbeddingFile) -> Result<f64> {
    if generated.frames.len() != truth.frames.len() {
        return Err(Error::ConfigMismatch(format!(
            "embedding files cover {} and {} frames",
            generated.frames.len(),
            truth.frames.len()
        )));
    }
    if generated.dim() != truth.dim() {
        return Err(Error::ConfigMismatch(format!(
            "embedding dimensions differ: {} vs {}",
            generated.dim(),
            truth.dim()
        )));
    }
    if generated.frames.is_empty() {
        return Err(Error::Undefined("embedding files are empty".into()));
    }
    let total: f64 = generated
        .frames
        .iter()
        .zip(&truth.frames)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(total / generated.frames.len() as f64)
}

/// Metrics of one reconstructed video. AKD/AED are absent without tool outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoMetrics {
    pub video_id: String,
    pub akd: Option<f64>,
    pub aed: Option<f64>,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub videos: Vec<VideoMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn akd(&self) -> Option<f64> {
        mean(self.videos.iter().filter_map(|v| v.akd))
    }

    pub fn aed(&self) -> Option<f64> {
        mean(self.videos.iter().filter_map(|v| v.aed))
    }

    pub fn l1(&self) -> Option<f64> {
        mean(self.videos.iter().map(|v| v.l1))
    }

    /// CSV `video_id,akd,aed,l1`, one row per video plus a final `mean` row.
    /// Missing values are left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["video_id", "akd", "aed", "l1"])?;
        for v in &self.videos {
            w.write_record([v.video_id.clone(), cell(v.akd), cell(v.aed), cell(Some(v.l1))])?;
        }
        w.write_record(["mean".to_string(), cell(self.akd()), cell(self.aed()), cell(self.l1())])?;
        w.flush()?;
        Ok(())
    }

    /// Plain-text table in the `Method | AKD | AED | L1` layout.
    pub fn table(&self, label: &str) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:>8.3}")).unwrap_or_else(|| format!("{:>8}", "n/a"));
        let mut out = format!("{:<24}{:>8}{:>8}{:>8}\n", "Method", "AKD", "AED", "L1");
        out.push_str(&format!("{label:<24}{}{}{}\n", cell(self.akd()), cell(self.aed()), cell(self.l1())));
        out
    }
}
