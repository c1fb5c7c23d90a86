//! Classification accuracy and weakly supervised localization scores.

use std::path::Path;

use crate::error::{Error, Result};
use crate::localization::{
    frame_importance, map_at_iou, mask_to_bbox, mean_inside, temporal_segments, upsample_mask, write_map_table,
    Detection, FrameBox, Segment, ALPHAS,
};
use crate::model::{Model, Prediction};
use crate::synth::{spatial_ground_truth, temporal_ground_truth, Sample};
use crate::train::check_samples;

/// Threshold applied to upsampled masks and to normalized frame importance.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub videos: usize,
    pub correct: usize,
    /// `(alpha, mAP)` over [`ALPHAS`].
    pub spatial_map: Vec<(f64, f64)>,
    pub temporal_map: Vec<(f64, f64)>,
    pub spatial_detections: Vec<Detection<FrameBox>>,
    pub temporal_detections: Vec<Detection<Segment>>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.videos as f64
    }

    pub fn spatial_at(&self, alpha: f64) -> Option<f64> {
        lookup(&self.spatial_map, alpha)
    }

    pub fn temporal_at(&self, alpha: f64) -> Option<f64> {
        lookup(&self.temporal_map, alpha)
    }

    /// Writes `spatial_map.csv`, `temporal_map.csv` and `accuracy.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_map_table(&dir.join("spatial_map.csv"), &self.spatial_map)?;
        write_map_table(&dir.join("temporal_map.csv"), &self.temporal_map)?;
        let path = dir.join("accuracy.txt");
        std::fs::write(&path, format!("{}\n", self.accuracy())).map_err(|e| Error::io(&path, e))
    }
}

fn lookup(table: &[(f64, f64)], alpha: f64) -> Option<f64> {
    table.iter().find(|(a, _)| *a == alpha).map(|&(_, m)| m)
}

/// Spatial detections for one video: one box per frame whose upsampled mask
/// exceeds the threshold anywhere, scored by the mean mask value inside it.
pub fn spatial_detections(id: &str, class: usize, masks: &crate::tensor::Tensor, frame_size: (usize, usize)) -> Result<Vec<Detection<FrameBox>>> {
    let shape = masks.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let (th, tw) = frame_size;
    let mut out = Vec::new();
    for t in 0..n {
        let mask = &masks.data()[t * h * w..(t + 1) * h * w];
        let up = upsample_mask(mask, h, w, th, tw)?;
        if let Some(bbox) = mask_to_bbox(&up, th, tw, THRESHOLD) {
            out.push(Detection {
                video: id.to_string(),
                class,
                region: FrameBox { frame: t + 1, bbox },
                score: mean_inside(&up, tw, &bbox),
            });
        }
    }
    Ok(out)
}

/// Temporal detections for one video from its thresholded frame importance.
pub fn temporal_detections(id: &str, class: usize, attention: &crate::tensor::Tensor) -> Result<Vec<Detection<Segment>>> {
    Ok(temporal_segments(&frame_importance(attention), THRESHOLD)?
        .into_iter()
        .map(|(region, score)| Detection {
            video: id.to_string(),
            class,
            region,
            score,
        })
        .collect())
}

/// Scores `model` on `samples`. Detections carry the predicted class, so a
/// misclassified video can only produce false positives.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    check_samples(model, samples)?;
    let mut report = EvalReport {
        videos: samples.len(),
        correct: 0,
        spatial_map: Vec::new(),
        temporal_map: Vec::new(),
        spatial_detections: Vec::new(),
        temporal_detections: Vec::new(),
        predictions: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let p = model.predict(&s.video.frames)?;
        report.correct += usize::from(p.class == s.video.label);
        report
            .spatial_detections
            .extend(spatial_detections(&s.id, p.class, &p.masks, model.config.frame_size)?);
        report.temporal_detections.extend(temporal_detections(&s.id, p.class, &p.attention)?);
        report.predictions.push(p);
    }
    let spatial_gt = spatial_ground_truth(samples);
    let temporal_gt = temporal_ground_truth(samples);
    for alpha in ALPHAS {
        report.spatial_map.push((alpha, map_at_iou(&report.spatial_detections, &spatial_gt, alpha)?));
        report.temporal_map.push((alpha, map_at_iou(&report.temporal_detections, &temporal_gt, alpha)?));
    }
    Ok(report)
}
