//! Training data: a deterministic synthetic moving-shapes corpus and a
//! frame-folder loader, plus the clip-sampling protocol (uniform random start,
//! keep every `frame_stride`-th frame).

use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A pixel video: shape `(H, W, L, 3)`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    pub pixels: Array4<f64>,
}

impl VideoTensor {
    pub fn new(pixels: Array4<f64>) -> Self {
        Self { pixels }
    }

    /// `(H, W, L)` — channel count is always 3.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (h, w, l, _) = self.pixels.dim();
        (h, w, l)
    }

    pub fn num_frames(&self) -> usize {
        self.pixels.dim().2
    }

    /// Repack to the network layout `[3, L, H, W]`.
    pub fn to_net(&self) -> ArrayD<f64> {
        let (h, w, l, c) = self.pixels.dim();
        let mut out = ArrayD::zeros(IxDyn(&[c, l, h, w]));
        for ((y, x, t, ch), &v) in self.pixels.indexed_iter() {
            out[[ch, t, y, x]] = v;
        }
        out
    }

    /// Inverse of [`VideoTensor::to_net`]; `net` is `[3, L, H, W]`.
    pub fn from_net(net: &ArrayD<f64>) -> Result<Self> {
        let s = net.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::shape(format!(
                "expected video in [3, L, H, W] layout, got {s:?}"
            )));
        }
        let (c, l, h, w) = (s[0], s[1], s[2], s[3]);
        let mut pixels = Array4::zeros((h, w, l, c));
        for ((ch, t, y, x), &v) in net
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .indexed_iter()
        {
            pixels[[y, x, t, ch]] = v;
        }
        Ok(Self { pixels })
    }

    /// Temporal slice `[start, start + len)` as a new video.
    pub fn frames(&self, start: usize, len: usize) -> VideoTensor {
        VideoTensor::new(
            self.pixels
                .slice(ndarray::s![.., .., start..start + len, ..])
                .to_owned(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    SyntheticShapes,
    FrameFolder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    /// Frames per training clip.
    pub clip_length: usize,
    /// Source frames skipped between selected frames (1 = consecutive).
    pub frame_stride: usize,
    /// (H, W).
    pub resolution: (usize, usize),
    pub seed: u64,
    /// Synthetic corpus: number of distinct videos.
    pub num_videos: usize,
    /// Synthetic corpus: frames per video.
    pub video_frames: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length < 2 {
            return Err(Error::config(format!(
                "clip_length must be >= 2, got {}",
                self.clip_length
            )));
        }
        if self.frame_stride < 1 {
            return Err(Error::config("frame_stride must be >= 1"));
        }
        if self.source == Source::SyntheticShapes {
            let (h, w) = self.resolution;
            if h < 16 || w < 16 {
                return Err(Error::config(format!(
                    "synthetic resolution must be at least 16x16, got {h}x{w}"
                )));
            }
            if self.num_videos == 0 {
                return Err(Error::config("num_videos must be >= 1"));
            }
            if self.video_frames < self.clip_length * self.frame_stride {
                return Err(Error::config(format!(
                    "video_frames {} shorter than clip span {} (clip_length * frame_stride)",
                    self.video_frames,
                    self.clip_length * self.frame_stride
                )));
            }
        }
        Ok(())
    }
}

// ---- synthetic moving shapes ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
}

/// One shape's full trajectory: the generator's audit log, and the single
/// source of truth the rasterizer draws from.
#[derive(Debug, Clone)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub radius: f64,
    pub color: [f64; 3],
    /// Center per frame, (x, y) in pixel coordinates.
    pub centers: Vec<(f64, f64)>,
    /// Speed per axis; sign flips on wall contact, magnitude is constant.
    pub speed: (f64, f64),
}

/// One constant-velocity step with wall reflection, keeping the center inside
/// `[lo, hi]` on each axis. Velocity magnitude is preserved; only sign flips.
fn bounce_step(c: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut c = c + v;
    let mut v = v;
    // interval is wide relative to speeds, so one reflection suffices, but
    // loop for safety with tiny resolutions
    loop {
        if c < lo {
            c = 2.0 * lo - c;
            v = -v;
        } else if c > hi {
            c = 2.0 * hi - c;
            v = -v;
        } else {
            break;
        }
    }
    (c, v)
}

/// Deterministic trajectories for video `index` of a synthetic spec.
pub fn synthetic_tracks(spec: &DatasetSpec, index: usize) -> Result<Vec<ShapeTrack>> {
    spec.validate()?;
    let (h, w) = spec.resolution;
    let mut rng = rng::stream(spec.seed, "shape-video", index as u64);
    let n_shapes = rng.gen_range(2..=4usize);
    let max_r = (h.min(w) as f64 / 6.0).max(2.0);
    let mut tracks = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = if rng.gen_bool(0.5) { ShapeKind::Square } else { ShapeKind::Disc };
        let radius = rng.gen_range(2.0..=max_r);
        let color = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ];
        let (xlo, xhi) = (radius, w as f64 - 1.0 - radius);
        let (ylo, yhi) = (radius, h as f64 - 1.0 - radius);
        let mut cx = rng.gen_range(xlo..=xhi);
        let mut cy = rng.gen_range(ylo..=yhi);
        let speed_mag = |rng: &mut ChaCha8Rng| {
            let m: f64 = rng.gen_range(0.4..=1.2);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let mut vx = speed_mag(&mut rng);
        let mut vy = speed_mag(&mut rng);
        let speed = (vx.abs(), vy.abs());
        let mut centers = Vec::with_capacity(spec.video_frames);
        for _ in 0..spec.video_frames {
            centers.push((cx, cy));
            let (nx, nvx) = bounce_step(cx, vx, xlo, xhi);
            let (ny, nvy) = bounce_step(cy, vy, ylo, yhi);
            cx = nx;
            cy = ny;
            vx = nvx;
            vy = nvy;
        }
        tracks.push(ShapeTrack { kind, radius, color, centers, speed });
    }
    Ok(tracks)
}

fn rasterize(spec: &DatasetSpec, tracks: &[ShapeTrack]) -> VideoTensor {
    let (h, w) = spec.resolution;
    let l = spec.video_frames;
    let mut px = Array4::from_elem((h, w, l, 3), -1.0);
    for t in 0..l {
        for track in tracks {
            let (cx, cy) = track.centers[t];
            let r = track.radius;
            let y0 = ((cy - r).floor().max(0.0)) as usize;
            let y1 = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
            let x0 = ((cx - r).floor().max(0.0)) as usize;
            let x1 = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let inside = match track.kind {
                        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
                        ShapeKind::Disc => dx * dx + dy * dy <= r * r,
                    };
                    if inside {
                        for ch in 0..3 {
                            px[[y, x, t, ch]] = track.color[ch];
                        }
                    }
                }
            }
        }
    }
    VideoTensor::new(px)
}

// ---- datasets ----

#[derive(Debug)]
enum Backing {
    Synthetic,
    Folder { videos: Vec<FolderVideo> },
}

#[derive(Debug)]
struct FolderVideo {
    frames: Vec<PathBuf>,
}

/// An immutable dataset; clips are drawn via [`sample_clip`].
#[derive(Debug)]
pub struct VideoDataset {
    pub spec: DatasetSpec,
    backing: Backing,
}

/// Build the synthetic moving-shapes corpus.
pub fn make_moving_shapes(spec: DatasetSpec) -> Result<VideoDataset> {
    if spec.source != Source::SyntheticShapes {
        return Err(Error::config("make_moving_shapes requires source = synthetic-shapes"));
    }
    spec.validate()?;
    Ok(VideoDataset { spec, backing: Backing::Synthetic })
}

/// Ingest `<root>/<video_id>/<frame>.png` folders. Videos shorter than
/// `clip_length * frame_stride` are skipped with a warning.
pub fn load_video_dir(path: &Path, spec: DatasetSpec) -> Result<VideoDataset> {
    spec.validate()?;
    let mut videos = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for dir in entries {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut frames: Vec<(u64, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if !p.is_file() {
                continue;
            }
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
            let Some(num) = stem.as_deref().and_then(|s| s.parse::<u64>().ok()) else {
                return Err(Error::ingest(format!(
                    "frame file {} is not numerically named",
                    p.display()
                )));
            };
            frames.push((num, p));
        }
        frames.sort_by_key(|(n, _)| *n);
        let frames: Vec<PathBuf> = frames.into_iter().map(|(_, p)| p).collect();
        if frames.len() < spec.clip_length * spec.frame_stride {
            log::warn!(
                "skipping video `{id}`: {} frames < required {}",
                frames.len(),
                spec.clip_length * spec.frame_stride
            );
            continue;
        }
        videos.push(FolderVideo { frames });
    }
    if videos.is_empty() {
        return Err(Error::ingest(format!(
            "no usable videos under {}",
            path.display()
        )));
    }
    Ok(VideoDataset { spec, backing: Backing::Folder { videos } })
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        match &self.backing {
            Backing::Synthetic => self.spec.num_videos,
            Backing::Folder { videos } => videos.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn video_len(&self, index: usize) -> usize {
        match &self.backing {
            Backing::Synthetic => self.spec.video_frames,
            Backing::Folder { videos } => videos[index].frames.len(),
        }
    }

    /// Materialize a full video. Synthetic videos are regenerated (bit-stably)
    /// from their tracks; folder videos are decoded from disk.
    pub fn video(&self, index: usize) -> Result<VideoTensor> {
        if index >= self.len() {
            return Err(Error::config(format!(
                "video index {index} out of range ({} videos)",
                self.len()
            )));
        }
        match &self.backing {
            Backing::Synthetic => {
                let tracks = synthetic_tracks(&self.spec, index)?;
                Ok(rasterize(&self.spec, &tracks))
            }
            Backing::Folder { videos } => decode_folder_video(&videos[index], &self.spec),
        }
    }
}

fn decode_folder_video(video: &FolderVideo, spec: &DatasetSpec) -> Result<VideoTensor> {
    let (h, w) = spec.resolution;
    let l = video.frames.len();
    let mut px = Array4::zeros((h, w, l, 3));
    for (t, path) in video.frames.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::ingest(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::ingest(format!(
                "{}: frame is {}x{}, dataset expects {h}x{w}",
                path.display(),
                img.height(),
                img.width()
            )));
        }
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                px[[y as usize, x as usize, t, ch]] = pixel_to_unit(p.0[ch]);
            }
        }
    }
    Ok(VideoTensor::new(px))
}

/// `v -> 2v/255 - 1`: 0 maps to -1, 255 maps to +1.
pub fn pixel_to_unit(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// Inverse map for writing frames out, with rounding and saturation.
pub fn unit_to_pixel(v: f64) -> u8 {
    (((v + 1.0) * 255.0 / 2.0).round()).clamp(0.0, 255.0) as u8
}

/// Draw one training clip: a uniformly random video, then a uniformly random
/// start, keeping every `frame_stride`-th frame. The two draws happen in that
/// order, each as a single `gen_range` call on `rng`.
pub fn sample_clip(dataset: &VideoDataset, rng: &mut ChaCha8Rng) -> Result<VideoTensor> {
    let spec = &dataset.spec;
    let vi = rng.gen_range(0..dataset.len());
    let vlen = dataset.video_len(vi);
    let span = (spec.clip_length - 1) * spec.frame_stride + 1;
    if vlen < spec.clip_length * spec.frame_stride {
        return Err(Error::config(format!(
            "video {vi} has {vlen} frames, need {}",
            spec.clip_length * spec.frame_stride
        )));
    }
    let max_start = vlen - span;
    let start = rng.gen_range(0..=max_start);
    let video = dataset.video(vi)?;
    let mut clip = Array4::zeros((
        spec.resolution.0,
        spec.resolution.1,
        spec.clip_length,
        3,
    ));
    for j in 0..spec.clip_length {
        let src = start + j * spec.frame_stride;
        clip.slice_mut(ndarray::s![.., .., j, ..])
            .assign(&video.pixels.slice(ndarray::s![.., .., src, ..]));
    }
    Ok(VideoTensor::new(clip))
}
