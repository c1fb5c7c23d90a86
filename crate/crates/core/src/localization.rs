//! Boxes and segments from attention outputs, overlap measures, and mean
//! average precision over detections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Usage(format!("empty box [{x_min},{x_max})x[{y_min},{y_max})")));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

/// Inclusive range of 1-based frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub t_start: usize,
    pub t_end: usize,
}

impl Segment {
    pub fn new(t_start: usize, t_end: usize) -> Result<Self> {
        if t_start == 0 || t_start > t_end {
            return Err(Error::Usage(format!("invalid segment [{t_start},{t_end}]")));
        }
        Ok(Self { t_start, t_end })
    }

    pub fn len(&self) -> usize {
        self.t_end - self.t_start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.t_start..=self.t_end).contains(&t)
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let h = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = w * h;
    inter as f64 / (a.area() + b.area() - inter) as f64
}

pub fn interval_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.t_end.min(b.t_end) + 1).saturating_sub(a.t_start.max(b.t_start));
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Bilinear resize of a row-major `h x w` map to `th x tw`, sampling pixel
/// centres (corners not aligned). Coordinates before the first centre clamp to it.
pub fn upsample_mask(mask: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f64>> {
    assert_eq!(mask.len(), h * w, "mask size");
    if th < h || tw < w {
        return Err(Error::Usage(format!("cannot upsample {h}x{w} to smaller {th}x{tw}")));
    }
    let axis = |dst: usize, src: usize, out: usize| {
        let pos = ((dst as f64 + 0.5) * src as f64 / out as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = axis(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = axis(x, w, tw);
            let top = mask[y0 * w + x0] * (1.0 - fx) + mask[y0 * w + x1] * fx;
            let bottom = mask[y1 * w + x0] * (1.0 - fx) + mask[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Tightest box around pixels strictly above `theta`, if any.
pub fn mask_to_bbox(mask: &[f64], h: usize, w: usize, theta: f64) -> Option<BBox> {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut found: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] > theta {
                found = Some(match found {
                    None => BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x + 1,
                        y_max: y + 1,
                    },
                    Some(b) => BBox {
                        x_min: b.x_min.min(x),
                        y_min: b.y_min.min(y),
                        x_max: b.x_max.max(x + 1),
                        y_max: b.y_max.max(y + 1),
                    },
                });
            }
        }
    }
    found
}

/// Mean of `mask` over the pixels of `bbox`.
pub fn mean_inside(mask: &[f64], w: usize, bbox: &BBox) -> f64 {
    let mut sum = 0.0;
    for y in bbox.y_min..bbox.y_max {
        sum += mask[y * w + bbox.x_min..y * w + bbox.x_max].iter().sum::<f64>();
    }
    sum / bbox.area() as f64
}

/// Importance of each frame: the attention matrix averaged over steps.
pub fn frame_importance(attention: &Tensor) -> Vec<f64> {
    let (steps, frames) = (attention.shape()[0], attention.shape()[1]);
    (0..frames)
        .map(|i| (0..steps).map(|t| attention.data()[t * frames + i]).sum::<f64>() / steps as f64)
        .collect()
}

/// Maximal runs of frames whose weight, divided by the largest weight, exceeds
/// `theta`. Each run is scored by its mean raw weight.
pub fn temporal_segments(weights: &[f64], theta: f64) -> Result<Vec<(Segment, f64)>> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Usage("frame weights must be non-negative".into()));
    }
    let max = weights.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Usage("frame weights are all zero".into()));
    }
    let mut out = Vec::new();
    let mut start = None;
    for i in 0..=weights.len() {
        let active = i < weights.len() && weights[i] / max > theta;
        match (active, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let score = weights[s..i].iter().sum::<f64>() / (i - s) as f64;
                out.push((Segment::new(s + 1, i)?, score));
                start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Something detections are matched against.
pub trait Region {
    fn iou(&self, other: &Self) -> f64;
}

/// A box on one 1-based frame; boxes on different frames do not overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameBox {
    pub frame: usize,
    pub bbox: BBox,
}

impl Region for FrameBox {
    fn iou(&self, other: &Self) -> f64 {
        if self.frame == other.frame {
            box_iou(&self.bbox, &other.bbox)
        } else {
            0.0
        }
    }
}

impl Region for Segment {
    fn iou(&self, other: &Self) -> f64 {
        interval_iou(self, other)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<R> {
    pub video: String,
    pub class: usize,
    pub region: R,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection<R> {
    pub video: String,
    pub class: usize,
    pub region: R,
    pub score: f64,
}

/// Whether each detection (in the given order) matched a ground truth.
///
/// Detections are visited by descending score, ties in input order. Each takes
/// the unmatched ground truth of its class and video with the highest IoU at or
/// above `alpha`, the lower index on ties.
pub fn match_detections<R: Region>(dets: &[Detection<R>], gts: &[GroundTruth<R>], alpha: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut hit = vec![false; dets.len()];
    for d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class != det.class || gt.video != det.video {
                continue;
            }
            let iou = det.region.iou(&gt.region);
            if iou >= alpha && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            hit[d] = true;
        }
    }
    hit
}

/// All-points interpolated average precision of hits ranked best first.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &h) in ranked_hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope: best precision at this rank or any later one
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = ranked_hits.iter().zip(&precision).filter(|(h, _)| **h).map(|(_, p)| p).sum();
    sum / n_gt as f64
}

/// Mean over classes with ground truth of the average precision at IoU `alpha`.
pub fn map_at_iou<R: Region>(dets: &[Detection<R>], gts: &[GroundTruth<R>], alpha: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Usage("no ground truth to score against".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Usage(format!("IoU threshold must lie in (0,1), got {alpha}")));
    }
    let hits = match_detections(dets, gts, alpha);
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let mut ranked: Vec<usize> = (0..dets.len()).filter(|&d| dets[d].class == c).collect();
        ranked.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let ranked_hits: Vec<bool> = ranked.iter().map(|&d| hits[d]).collect();
        total += average_precision(&ranked_hits, gts.iter().filter(|g| g.class == c).count());
    }
    Ok(total / classes.len() as f64)
}

/// IoU thresholds reported by evaluation.
pub const ALPHAS: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5];

pub fn write_map_table(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["alpha", "map"])?;
    for (alpha, map) in rows {
        out.write_record([alpha.to_string(), format!("{map:.16e}")])?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SpatialRow {
    video_id: String,
    frame: usize,
    class: usize,
    x_min: usize,
    y_min: usize,
    x_max: usize,
    y_max: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpatialDetRow {
    video_id: String,
    frame: usize,
    class: usize,
    x_min: usize,
    y_min: usize,
    x_max: usize,
    y_max: usize,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TemporalRow {
    video_id: String,
    class: usize,
    t_start: usize,
    t_end: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TemporalDetRow {
    video_id: String,
    class: usize,
    t_start: usize,
    t_end: usize,
    score: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

fn frame_box(path: &Path, frame: usize, x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<FrameBox> {
    let bbox = BBox::new(x_min, y_min, x_max, y_max).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(FrameBox { frame, bbox })
}

fn segment(path: &Path, t_start: usize, t_end: usize) -> Result<Segment> {
    Segment::new(t_start, t_end).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn write_spatial_gt(path: &Path, gts: &[GroundTruth<FrameBox>]) -> Result<()> {
    write_rows(
        path,
        gts.iter().map(|g| SpatialRow {
            video_id: g.video.clone(),
            frame: g.region.frame,
            class: g.class,
            x_min: g.region.bbox.x_min,
            y_min: g.region.bbox.y_min,
            x_max: g.region.bbox.x_max,
            y_max: g.region.bbox.y_max,
        }),
    )
}

pub fn read_spatial_gt(path: &Path) -> Result<Vec<GroundTruth<FrameBox>>> {
    read_rows::<SpatialRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(GroundTruth {
                region: frame_box(path, r.frame, r.x_min, r.y_min, r.x_max, r.y_max)?,
                video: r.video_id,
                class: r.class,
            })
        })
        .collect()
}

pub fn write_spatial_detections(path: &Path, dets: &[Detection<FrameBox>]) -> Result<()> {
    write_rows(
        path,
        dets.iter().map(|d| SpatialDetRow {
            video_id: d.video.clone(),
            frame: d.region.frame,
            class: d.class,
            x_min: d.region.bbox.x_min,
            y_min: d.region.bbox.y_min,
            x_max: d.region.bbox.x_max,
            y_max: d.region.bbox.y_max,
            score: d.score,
        }),
    )
}

pub fn read_spatial_detections(path: &Path) -> Result<Vec<Detection<FrameBox>>> {
    read_rows::<SpatialDetRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(Detection {
                region: frame_box(path, r.frame, r.x_min, r.y_min, r.x_max, r.y_max)?,
                video: r.video_id,
                class: r.class,
                score: r.score,
            })
        })
        .collect()
}

pub fn write_temporal_gt(path: &Path, gts: &[GroundTruth<Segment>]) -> Result<()> {
    write_rows(
        path,
        gts.iter().map(|g| TemporalRow {
            video_id: g.video.clone(),
            class: g.class,
            t_start: g.region.t_start,
            t_end: g.region.t_end,
        }),
    )
}

pub fn read_temporal_gt(path: &Path) -> Result<Vec<GroundTruth<Segment>>> {
    read_rows::<TemporalRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(GroundTruth {
                region: segment(path, r.t_start, r.t_end)?,
                video: r.video_id,
                class: r.class,
            })
        })
        .collect()
}

pub fn write_temporal_detections(path: &Path, dets: &[Detection<Segment>]) -> Result<()> {
    write_rows(
        path,
        dets.iter().map(|d| TemporalDetRow {
            video_id: d.video.clone(),
            class: d.class,
            t_start: d.region.t_start,
            t_end: d.region.t_end,
            score: d.score,
        }),
    )
}

pub fn read_temporal_detections(path: &Path) -> Result<Vec<Detection<Segment>>> {
    read_rows::<TemporalDetRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(Detection {
                region: segment(path, r.t_start, r.t_end)?,
                video: r.video_id,
                class: r.class,
                score: r.score,
            })
        })
        .collect()
}
