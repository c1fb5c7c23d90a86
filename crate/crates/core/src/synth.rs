//! Deterministic synthetic videos: a square sprite moves through a window of
//! frames over a noisy constant background, with exact box and segment labels.
//!
//! Every random draw comes from [`SeededRng`](crate::rng::SeededRng) (PCG32,
//! documented in that module), so a `(config, class, seed)` triple fixes every
//! pixel on any platform. Per video, draws happen in this order: background
//! level, sprite level, start x, start y, then per-pixel noise frame by frame.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::localization::{write_spatial_gt, write_temporal_gt, BBox, FrameBox, GroundTruth, Segment};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

/// Motion executed by the sprite inside the action window, by class index.
pub const MOTIONS: [&str; 4] = ["translate-right", "translate-down", "oscillate", "grow"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Side of the square sprite, in pixels.
    pub sprite_size: usize,
    /// Pixels moved (or grown) per frame. Oscillation instead jumps one sprite
    /// width right and back on alternate frames.
    pub step: usize,
    /// 1-based inclusive frame range in which the sprite appears and moves.
    pub window: (usize, usize),
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Range of the per-video background intensity.
    pub background: (f64, f64),
    /// Range of the per-video sprite intensity.
    pub foreground: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            height: 56,
            width: 56,
            n_classes: 4,
            sprite_size: 20,
            step: 4,
            window: (3, 6),
            noise: 0.05,
            background: (0.1, 0.4),
            foreground: (0.7, 1.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.window;
        if !(1 <= a && a <= b && b <= self.n_frames) {
            return Err(Error::Config(format!(
                "window [{a},{b}] must satisfy 1 <= start <= end <= {}",
                self.n_frames
            )));
        }
        if self.sprite_size == 0 || self.sprite_size > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "sprite of side {} does not fit a {}x{} frame",
                self.sprite_size, self.height, self.width
            )));
        }
        if self.n_classes == 0 || self.n_classes > MOTIONS.len() {
            return Err(Error::Config(format!("between 1 and {} classes supported", MOTIONS.len())));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        for (name, (lo, hi)) in [("background", self.background), ("foreground", self.foreground)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} range [{lo},{hi}] must lie in [0,1]")));
            }
        }
        Ok(())
    }

    fn window_len(&self) -> usize {
        self.window.1 - self.window.0 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    /// `[n,1,H,W]`, values in `[0,1]` and exactly representable as `f32`.
    pub frames: Tensor,
    pub label: usize,
    /// Sprite box per frame; `None` outside the action window.
    pub gt_boxes: Vec<Option<BBox>>,
    pub gt_segment: Segment,
}

/// Sprite box on the `k`-th frame of the window, before clamping.
fn placement(cfg: &SynthConfig, class: usize, k: usize, x0: usize, y0: usize) -> (usize, usize, usize) {
    let (s, step) = (cfg.sprite_size, cfg.step);
    match class {
        0 => (x0 + k * step, y0, s),
        1 => (x0, y0 + k * step, s),
        2 => (x0 + (k % 2) * s, y0, s),
        _ => (x0, y0, s + k * step),
    }
}

/// Horizontal and vertical room the motion needs beyond the sprite itself.
fn travel(cfg: &SynthConfig, class: usize) -> (usize, usize) {
    let span = (cfg.window_len() - 1) * cfg.step;
    match class {
        0 => (span, 0),
        1 => (0, span),
        2 => (if cfg.window_len() > 1 { cfg.sprite_size } else { 0 }, 0),
        _ => (span, span),
    }
}

pub fn generate_video(cfg: &SynthConfig, class: usize, seed: u64) -> Result<LabeledVideo> {
    cfg.validate()?;
    if class >= cfg.n_classes {
        return Err(Error::Usage(format!("class {class} out of range for {} classes", cfg.n_classes)));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = SeededRng::new(seed);
    let background = rng.uniform_in(cfg.background.0, cfg.background.1);
    let sprite = rng.uniform_in(cfg.foreground.0, cfg.foreground.1);
    let (tx, ty) = travel(cfg, class);
    let room_x = w.saturating_sub(cfg.sprite_size + tx) + 1;
    let room_y = h.saturating_sub(cfg.sprite_size + ty) + 1;
    let x0 = rng.below(room_x);
    let y0 = rng.below(room_y);

    let mut frames = Vec::with_capacity(cfg.n_frames * h * w);
    let mut gt_boxes = Vec::with_capacity(cfg.n_frames);
    for t in 1..=cfg.n_frames {
        let bbox = (cfg.window.0..=cfg.window.1).contains(&t).then(|| {
            let (x, y, side) = placement(cfg, class, t - cfg.window.0, x0, y0);
            // clamp so the sprite stays whole and inside the frame
            let side = side.min(h).min(w);
            let (x, y) = (x.min(w - side), y.min(h - side));
            BBox {
                x_min: x,
                y_min: y,
                x_max: x + side,
                y_max: y + side,
            }
        });
        for py in 0..h {
            for px in 0..w {
                let clean = match bbox {
                    Some(b) if b.contains(px, py) => sprite,
                    _ => background,
                };
                let noisy = if cfg.noise > 0.0 { clean + cfg.noise * rng.normal() } else { clean };
                frames.push(noisy.clamp(0.0, 1.0) as f32 as f64);
            }
        }
        gt_boxes.push(bbox);
    }
    Ok(LabeledVideo {
        frames: Tensor::new(vec![cfg.n_frames, 1, h, w], frames)?,
        label: class,
        gt_boxes,
        gt_segment: Segment::new(cfg.window.0, cfg.window.1)?,
    })
}

const MAGIC: &[u8; 4] = b"STAV";
const VERSION: u16 = 1;

/// Writes the binary container: magic, `u16` version, then `n, H, W, label,
/// t_a, t_b` as `u32`, the frames as `f32`, and one `i32` quadruple
/// `x_min, y_min, x_max, y_max` per frame (`-1` when absent). Little endian.
pub fn write_video(path: &Path, video: &LabeledVideo) -> Result<()> {
    let [n, _, h, w] = video.frames.shape() else {
        return Err(Error::dim("write_video", None, "frames must be [n,1,H,W]"));
    };
    let mut buf = Vec::with_capacity(32 + 4 * video.frames.len() + 16 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [*n, *h, *w, video.label, video.gt_segment.t_start, video.gt_segment.t_end] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in video.frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for b in &video.gt_boxes {
        let quad = b.map_or([-1; 4], |b| [b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v as i32));
        for v in quad {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<LabeledVideo> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut cursor = bytes.as_slice();
    let mut take = |len: usize| -> Result<&[u8]> {
        if cursor.len() < len {
            return Err(bad("truncated file"));
        }
        let (head, rest) = cursor.split_at(len);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("not a video container"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut header = [0usize; 6];
    for v in &mut header {
        *v = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let [n, h, w, label, t_a, t_b] = header;
    if n == 0 || h == 0 || w == 0 {
        return Err(bad("empty video"));
    }
    let raw = take(4 * n * h * w)?;
    let frames: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let mut gt_boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let q: Vec<i32> = take(16)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
        gt_boxes.push(if q.iter().all(|&v| v == -1) {
            None
        } else if q.iter().any(|&v| v < 0) {
            return Err(bad("negative box coordinate"));
        } else {
            Some(BBox::new(q[0] as usize, q[1] as usize, q[2] as usize, q[3] as usize).map_err(|e| bad(&e.to_string()))?)
        });
    }
    if !cursor.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(LabeledVideo {
        frames: Tensor::new(vec![n, 1, h, w], frames)?,
        label,
        gt_boxes,
        gt_segment: Segment::new(t_a, t_b).map_err(|e| bad(&e.to_string()))?,
    })
}

/// A video together with its identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: LabeledVideo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `count_per_class` videos per class; video `v` has class `v % K` and seed
/// `derive_seed(seed, v)`. The last `test_per_class` videos of each class form
/// the test split.
pub fn generate_dataset(cfg: &SynthConfig, count_per_class: usize, test_per_class: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if count_per_class < 2 || test_per_class == 0 || test_per_class >= count_per_class {
        return Err(Error::Config(format!(
            "need at least 2 videos per class and 0 < test share < {count_per_class}, got {test_per_class}"
        )));
    }
    let k = cfg.n_classes;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for v in 0..count_per_class * k {
        let class = v % k;
        let sample = Sample {
            id: format!("v{v:05}"),
            video: generate_video(cfg, class, derive_seed(seed, v as u64))?,
        };
        if v / k >= count_per_class - test_per_class {
            test.push(sample);
        } else {
            train.push(sample);
        }
    }
    Ok(Dataset { train, test })
}

pub fn spatial_ground_truth(samples: &[Sample]) -> Vec<GroundTruth<FrameBox>> {
    let mut out = Vec::new();
    for s in samples {
        for (t, b) in s.video.gt_boxes.iter().enumerate() {
            if let Some(bbox) = b {
                out.push(GroundTruth {
                    video: s.id.clone(),
                    class: s.video.label,
                    region: FrameBox { frame: t + 1, bbox: *bbox },
                });
            }
        }
    }
    out
}

pub fn temporal_ground_truth(samples: &[Sample]) -> Vec<GroundTruth<Segment>> {
    samples
        .iter()
        .map(|s| GroundTruth {
            video: s.id.clone(),
            class: s.video.label,
            region: s.video.gt_segment,
        })
        .collect()
}

/// Writes `<dir>/<split>/<id>.stav` for every video plus
/// `<dir>/<split>_spatial_gt.csv` and `<dir>/<split>_temporal_gt.csv`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for (name, samples) in [("train", &data.train), ("test", &data.test)] {
        let split = dir.join(name);
        fs::create_dir_all(&split).map_err(|e| Error::io(&split, e))?;
        for s in samples {
            write_video(&split.join(format!("{}.stav", s.id)), &s.video)?;
        }
        write_spatial_gt(&dir.join(format!("{name}_spatial_gt.csv")), &spatial_ground_truth(samples))?;
        write_temporal_gt(&dir.join(format!("{name}_temporal_gt.csv")), &temporal_ground_truth(samples))?;
    }
    Ok(())
}

/// Loads every `.stav` file of a directory, ordered by file name.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "stav") {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(Sample { id, video: read_video(&p)? })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(&dir.join("train"))?,
        test: load_split(&dir.join("test"))?,
    })
}
