//! Greyscale images of a model's attention on one video.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::localization::{frame_importance, upsample_mask};
use crate::model::Prediction;
use crate::spatial::{export_mask, quantize, write_pgm};
use crate::tensor::Tensor;

/// Width and height, in pixels, of each frame's cell in the temporal strip.
pub const STRIP_CELL: usize = 16;

/// Pixels of the temporal strip: one `STRIP_CELL`-square cell per frame with
/// brightness `round(255 w / max w)`.
pub fn temporal_strip(weights: &[f64]) -> Result<Vec<u8>> {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Usage("frame weights must be non-negative and not all zero".into()));
    }
    let levels: Vec<u8> = weights.iter().map(|w| quantize(w / max)).collect();
    let mut pixels = Vec::with_capacity(weights.len() * STRIP_CELL * STRIP_CELL);
    for _ in 0..STRIP_CELL {
        for &level in &levels {
            pixels.extend(std::iter::repeat_n(level, STRIP_CELL));
        }
    }
    Ok(pixels)
}

/// Frame blended half and half with its mask upsampled to frame size.
pub fn overlay(frame: &[f64], mask: &[f64]) -> Vec<u8> {
    frame
        .iter()
        .zip(mask)
        .map(|(f, m)| quantize(0.5 * f + 0.5 * m))
        .collect()
}

/// Files written by [`write_heatmaps`].
#[derive(Clone, Debug, Default)]
pub struct HeatmapFiles {
    pub masks: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
    pub strip: PathBuf,
}

/// Writes, for each frame `t` (1-based), `<video>_<t>_mask.pgm` at feature
/// resolution and `<video>_<t>_overlay.pgm` at frame resolution, plus
/// `<video>_temporal.pgm`. `frames` is `[n,C,H,W]`; overlays use channel 0.
pub fn write_heatmaps(dir: &Path, video: &str, frames: &Tensor, prediction: &Prediction) -> Result<HeatmapFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fs = frames.shape();
    let ms = prediction.masks.shape();
    if fs.len() != 4 || ms.len() != 4 || fs[0] != ms[0] {
        return Err(Error::dim(
            "write_heatmaps",
            Some(0),
            format!("frames {fs:?} do not match masks {ms:?}"),
        ));
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let (mh, mw) = (ms[2], ms[3]);
    let mut files = HeatmapFiles::default();
    for t in 0..n {
        let mask = &prediction.masks.data()[t * mh * mw..(t + 1) * mh * mw];
        files.masks.push(export_mask(dir, video, t + 1, mw, mh, mask)?);
        let up = upsample_mask(mask, mh, mw, h, w)?;
        let frame = &frames.data()[t * c * h * w..][..h * w];
        let path = dir.join(format!("{video}_{}_overlay.pgm", t + 1));
        write_pgm(&path, w, h, &overlay(frame, &up))?;
        files.overlays.push(path);
    }
    let weights = frame_importance(&prediction.attention);
    files.strip = dir.join(format!("{video}_temporal.pgm"));
    write_pgm(&files.strip, n * STRIP_CELL, STRIP_CELL, &temporal_strip(&weights)?)?;
    Ok(files)
}
