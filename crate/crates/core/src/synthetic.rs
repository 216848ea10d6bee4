//! Deterministic toy videos: a large disc ("body") moving along a smooth
//! Lissajous path with a smaller disc ("limb") orbiting it, drawn over a fixed
//! textured background. Centers are known analytically and exported as tracks.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_splits, Split, Video, VideoDataset};
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Body disc color, exact in 8 bits so PNG round trips are lossless.
pub const BODY_RGB: [u8; 3] = [230, 40, 40];
pub const LIMB_RGB: [u8; 3] = [40, 60, 230];
/// Background channels stay inside this 8-bit range, disjoint from both disc colors.
const BACKGROUND_RANGE: (f64, f64) = (80.0, 176.0);

/// Ground-truth center of one disc, in pixel coordinates (pixel `x` covers `[x, x+1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub video_id: String,
    pub frame: usize,
    pub point_id: usize,
    pub x: f64,
    pub y: f64,
}

impl TrackPoint {
    fn new(video_id: &str, frame: usize, point_id: usize, (x, y): (f64, f64)) -> Self {
        Self { video_id: video_id.to_owned(), frame, point_id, x, y }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: VideoDataset,
    pub tracks: Vec<TrackPoint>,
    pub side: usize,
}

#[derive(Debug, Clone, Copy)]
struct Trajectory {
    amp: (f64, f64),
    freq: (f64, f64),
    phase: (f64, f64),
    arm_phase: f64,
    arm_speed: f64,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    side: f64,
    body_radius: f64,
    limb_radius: f64,
    arm: f64,
}

impl Geometry {
    fn new(side: usize) -> Self {
        let side = side as f64;
        let body_radius = 0.09 * side;
        let limb_radius = 0.06 * side;
        let arm = body_radius + limb_radius + 0.06 * side;
        Self { side, body_radius, limb_radius, arm }
    }

    /// Largest distance the body center may move from the image center while
    /// keeping the limb fully inside the frame.
    fn travel(&self) -> f64 {
        self.side / 2.0 - (self.arm + self.limb_radius + 1.0)
    }

    fn centers(&self, traj: &Trajectory, t: f64) -> ((f64, f64), (f64, f64)) {
        let c = self.side / 2.0;
        let body = (
            c + traj.amp.0 * (TAU * traj.freq.0 * t + traj.phase.0).sin(),
            c + traj.amp.1 * (TAU * traj.freq.1 * t + traj.phase.1).sin(),
        );
        let angle = traj.arm_phase + traj.arm_speed * t;
        let limb = (body.0 + self.arm * angle.cos(), body.1 + self.arm * angle.sin());
        (body, limb)
    }
}

fn background(side: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (lo, hi) = BACKGROUND_RANGE;
    let mid = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    let params: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(2.0..5.0),
                rng.random_range(2.0..5.0),
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let s = side as f64;
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            for &(fx, fy, px, py) in &params {
                let u = (TAU * fx * x as f64 / s + px).sin() * (TAU * fy * y as f64 / s + py).cos();
                out.push((mid + half * u).round().clamp(lo, hi) as u8);
            }
        }
    }
    out
}

fn paint_disc(buf: &mut [u8], side: usize, center: (f64, f64), radius: f64, rgb: [u8; 3]) {
    let r2 = radius * radius;
    let y0 = (center.1 - radius).floor().max(0.0) as usize;
    let y1 = ((center.1 + radius).ceil() as usize).min(side);
    let x0 = (center.0 - radius).floor().max(0.0) as usize;
    let x1 = ((center.0 + radius).ceil() as usize).min(side);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - center.0;
            let dy = y as f64 + 0.5 - center.1;
            if dx * dx + dy * dy <= r2 {
                buf[(y * side + x) * 3..][..3].copy_from_slice(&rgb);
            }
        }
    }
}

/// Builds `n_videos` videos of `n_frames` frames each at `side × side`.
pub fn make_synthetic_dataset(
    n_videos: usize,
    n_frames: usize,
    side: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_videos < 1 || n_frames < 2 || side < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs n_videos >= 1, n_frames >= 2, side >= 32 \
             (got {n_videos}, {n_frames}, {side})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = Geometry::new(side);
    let backdrop = background(side, &mut rng);
    let travel = geometry.travel();

    let mut videos = Vec::with_capacity(n_videos);
    let mut tracks = Vec::with_capacity(n_videos * n_frames * 2);
    for v in 0..n_videos {
        let id = format!("synth_{v:04}");
        let traj = Trajectory {
            amp: (rng.random_range(0.3..0.9) * travel, rng.random_range(0.3..0.9) * travel),
            freq: (
                rng.random_range(0.3..1.0) / n_frames as f64,
                rng.random_range(0.3..1.0) / n_frames as f64,
            ),
            phase: (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)),
            arm_phase: rng.random_range(0.0..TAU),
            arm_speed: rng.random_range(0.2..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        };
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let (body, limb) = geometry.centers(&traj, t as f64);
            let mut buf = backdrop.clone();
            paint_disc(&mut buf, side, body, geometry.body_radius, BODY_RGB);
            paint_disc(&mut buf, side, limb, geometry.limb_radius, LIMB_RGB);
            let pixels = buf.iter().map(|&b| f32::from(b) / 255.0).collect();
            frames.push(Frame::new(side, side, pixels)?);
            tracks.push(TrackPoint::new(&id, t, 0, body));
            tracks.push(TrackPoint::new(&id, t, 1, limb));
        }
        videos.push(Video::from_frames(id, frames));
    }
    Ok(SyntheticDataset {
        dataset: VideoDataset::in_memory(videos, Split::Train),
        tracks,
        side,
    })
}

impl SyntheticDataset {
    /// Writes videos under `root/{train,test}/` and tracks to `root/tracks.csv`.
    pub fn write(&self, root: &Path, eval_ratio: f64) -> Result<()> {
        let ids: Vec<String> = self.dataset.videos.iter().map(|v| v.id.clone()).collect();
        let splits = assign_splits(&ids, eval_ratio)?;
        for split in [Split::Train, Split::Eval] {
            let videos = self
                .dataset
                .videos
                .iter()
                .zip(&splits)
                .filter(|(_, s)| **s == split)
                .map(|(v, _)| v.clone())
                .collect();
            VideoDataset::in_memory(videos, split).write(root)?;
        }
        write_tracks_csv(&self.tracks, std::fs::File::create(root.join("tracks.csv"))?)
    }

    pub fn track(&self, video_id: &str, frame: usize, point_id: usize) -> Option<&TrackPoint> {
        self.tracks
            .iter()
            .find(|p| p.video_id == video_id && p.frame == frame && p.point_id == point_id)
    }
}

/// CSV columns: `video_id,frame,point_id,x,y` (pixel coordinates).
pub fn write_tracks_csv<W: Write>(tracks: &[TrackPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in tracks {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracks_csv(path: &Path) -> Result<Vec<TrackPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Centroid of the pixels painted in exactly `rgb`, in pixel coordinates.
pub fn color_centroid(frame: &Frame, rgb: [u8; 3]) -> Option<(f64, f64)> {
    let target = rgb.map(|c| f32::from(c) / 255.0);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if (0..3).all(|c| frame.get(y, x, c) == target[c]) {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_bit_identical() {
        let a = make_synthetic_dataset(2, 4, 48, 7).unwrap();
        let b = make_synthetic_dataset(2, 4, 48, 7).unwrap();
        for (va, vb) in a.dataset.videos.iter().zip(&b.dataset.videos) {
            assert_eq!(va.frames().unwrap(), vb.frames().unwrap());
        }
        assert_eq!(a.tracks, b.tracks);
    }

    #[test]
    fn tracks_match_pixel_centroids() {
        let synth = make_synthetic_dataset(3, 12, 64, 11).unwrap();
        for video in &synth.dataset.videos {
            for (t, frame) in video.frames().unwrap().iter().enumerate() {
                for (point, rgb) in [(0, BODY_RGB), (1, LIMB_RGB)] {
                    let track = synth.track(&video.id, t, point).unwrap();
                    let (cx, cy) = color_centroid(frame, rgb).expect("disc visible");
                    let dev = (cx - track.x).abs().max((cy - track.y).abs());
                    assert!(dev <= 1.0, "{} frame {t} point {point}: deviation {dev}", video.id);
                }
            }
        }
    }

    #[test]
    fn displacement_follows_trajectory() {
        let synth = make_synthetic_dataset(1, 2, 64, 3).unwrap();
        let frames = synth.dataset.videos[0].frames().unwrap();
        let t0 = synth.track("synth_0000", 0, 0).unwrap();
        let t1 = synth.track("synth_0000", 1, 0).unwrap();
        let c0 = color_centroid(&frames[0], BODY_RGB).unwrap();
        let c1 = color_centroid(&frames[1], BODY_RGB).unwrap();
        assert!(((c1.0 - c0.0) - (t1.x - t0.x)).abs() <= 1.0);
        assert!(((c1.1 - c0.1) - (t1.y - t0.y)).abs() <= 1.0);
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(make_synthetic_dataset(0, 2, 64, 0).is_err());
        assert!(make_synthetic_dataset(1, 1, 64, 0).is_err());
        assert!(make_synthetic_dataset(1, 2, 16, 0).is_err());
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let synth = make_synthetic_dataset(4, 3, 32, 5).unwrap();
        synth.write(dir.path(), 0.25).unwrap();
        let train = VideoDataset::open(dir.path(), Split::Train, None).unwrap();
        let eval = VideoDataset::open(dir.path(), Split::Eval, None).unwrap();
        assert_eq!(train.videos.len(), 3);
        assert_eq!(eval.videos.len(), 1);
        for v in train.videos.iter().chain(&eval.videos) {
            assert!(eval.video(&v.id).is_none() || train.video(&v.id).is_none());
            let original = synth.dataset.video(&v.id).unwrap();
            assert_eq!(v.frames().unwrap(), original.frames().unwrap());
        }
        let tracks = read_tracks_csv(&dir.path().join("tracks.csv")).unwrap();
        assert_eq!(tracks, synth.tracks);
    }
}
