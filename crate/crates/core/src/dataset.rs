//! Videos stored as directories of numbered PNG frames.
//!
//! On-disk layout: `<root>/<split>/<video_id>/<frame>.png`, frames ordered
//! lexicographically by file name (zero-padded numbering keeps that equal to
//! temporal order).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "eval" => Ok(Split::Eval),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// File name of frame `index` inside a video directory.
pub fn frame_file_name(index: usize) -> String {
    format!("{index:07}.png")
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every frame of a video directory in temporal order.
pub fn load_video(path: &Path) -> Result<FrameSequence> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let id = video_id_of(path);
    let paths = if path.is_dir() { sorted_pngs(path)? } else { vec![path.to_path_buf()] };
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        // Non-image files with a .png suffix are skipped rather than fatal.
        match Frame::read_png(p) {
            Ok(frame) => frames.push(frame.with_origin(id.clone(), frames.len())),
            Err(Error::Image(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let Some(first) = frames.first() else {
        return Err(Error::EmptyVideo(path.to_path_buf()));
    };
    let shape = (first.height(), first.width());
    if let Some(bad) = frames.iter().find(|f| (f.height(), f.width()) != shape) {
        return Err(Error::InconsistentFrames(format!(
            "{}: frame {} is {}x{}, expected {}x{}",
            path.display(),
            bad.index,
            bad.height(),
            bad.width(),
            shape.0,
            shape.1
        )));
    }
    Ok(frames)
}

fn video_id_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone)]
enum FrameStore {
    Memory(FrameSequence),
    Disk(Vec<PathBuf>),
}

/// One video. Disk-backed videos decode frames on demand.
#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    store: FrameStore,
    side: Option<usize>,
}

impl Video {
    pub fn from_frames(id: impl Into<String>, frames: FrameSequence) -> Self {
        let id = id.into();
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.with_origin(id.clone(), i))
            .collect();
        Self { id, store: FrameStore::Memory(frames), side: None }
    }

    pub fn open(dir: &Path, side: Option<usize>) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let paths = sorted_pngs(dir)?;
        if paths.is_empty() {
            return Err(Error::EmptyVideo(dir.to_path_buf()));
        }
        Ok(Self { id: video_id_of(dir), store: FrameStore::Disk(paths), side })
    }

    pub fn len(&self) -> usize {
        match &self.store {
            FrameStore::Memory(frames) => frames.len(),
            FrameStore::Disk(paths) => paths.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame `index`, preprocessed to the dataset side when one is set.
    pub fn frame(&self, index: usize) -> Result<Frame> {
        let frame = match &self.store {
            FrameStore::Memory(frames) => frames
                .get(index)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("frame {index} out of range")))?,
            FrameStore::Disk(paths) => {
                let path = paths
                    .get(index)
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {index} out of range")))?;
                Frame::read_png(path)?.with_origin(self.id.clone(), index)
            }
        };
        match self.side {
            Some(side) if frame.side() != Some(side) => frame.preprocess(side),
            _ => Ok(frame),
        }
    }

    pub fn frames(&self) -> Result<FrameSequence> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct VideoDataset {
    pub videos: Vec<Video>,
    pub split: Split,
    pub root: Option<PathBuf>,
}

impl VideoDataset {
    pub fn in_memory(videos: Vec<Video>, split: Split) -> Self {
        Self { videos, split, root: None }
    }

    /// Indexes `<root>/<split>/*`; frames are decoded lazily and resized to `side`.
    pub fn open(root: &Path, split: Split, side: Option<usize>) -> Result<Self> {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            return Err(Error::NotFound(dir));
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut videos = Vec::with_capacity(dirs.len());
        for d in dirs {
            match Video::open(&d, side) {
                Ok(v) => videos.push(v),
                Err(Error::EmptyVideo(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(Self { videos, split, root: Some(root.to_path_buf()) })
    }

    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Writes the dataset below `root/<split>/` using numbered PNGs.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join(self.split.dir_name()))?;
        for video in &self.videos {
            let dir = root.join(self.split.dir_name()).join(&video.id);
            fs::create_dir_all(&dir)?;
            for i in 0..video.len() {
                video.frame(i)?.write_png(&dir.join(frame_file_name(i)))?;
            }
        }
        Ok(())
    }

    /// Picks `(video, source frame, driving frame)` indices for one training pair.
    pub fn sample_pair_indices(&self, seed: u64) -> Result<(usize, usize, usize)> {
        let eligible: Vec<usize> =
            (0..self.videos.len()).filter(|&i| self.videos[i].len() >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::DatasetTooSmall);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = eligible[rng.random_range(0..eligible.len())];
        let n = self.videos[video].len();
        let source = rng.random_range(0..n);
        // Uniform over the other n - 1 frames.
        let mut driving = rng.random_range(0..n - 1);
        if driving >= source {
            driving += 1;
        }
        Ok((video, source, driving))
    }
}

/// Draws a `(source, driving)` pair of distinct frames from one video.
pub fn sample_training_pair(dataset: &VideoDataset, seed: u64) -> Result<(Frame, Frame)> {
    let (v, s, d) = dataset.sample_pair_indices(seed)?;
    let video = &dataset.videos[v];
    Ok((video.frame(s)?, video.frame(d)?))
}

/// 64-bit FNV-1a, used to order video ids for split assignment.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Assigns each id to a split: ids are sorted by hash and the first
/// `round(eval_ratio * n)` go to evaluation, always leaving at least one
/// training video when `eval_ratio < 1`.
pub fn assign_splits(ids: &[String], eval_ratio: f64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&eval_ratio) {
        return Err(Error::InvalidArgument(format!("eval ratio {eval_ratio} outside [0, 1]")));
    }
    let n = ids.len();
    let mut n_eval = (eval_ratio * n as f64).round() as usize;
    if eval_ratio < 1.0 && n > 0 {
        n_eval = n_eval.min(n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv1a64(ids[i].as_bytes()), i));
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_eval] {
        splits[i] = Split::Eval;
    }
    Ok(splits)
}
