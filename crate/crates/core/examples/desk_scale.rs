//! Trains on the synthetic set and reports test scores after every epoch.
//!
//! Arguments are `key=value` training config overrides, plus `sprite=`,
//! `step=` and `noise=` for the generator and `every=` for the report interval.

use std::time::Instant;

use stattn::config::TrainConfig;
use stattn::eval::evaluate;
use stattn::localization::{box_iou, frame_importance};
use stattn::synth::{generate_dataset, SynthConfig};
use stattn::train::Trainer;

fn main() -> stattn::Result<()> {
    let mut config = TrainConfig::default();
    let mut synth = SynthConfig::default();
    let mut every = 1;
    for arg in std::env::args().skip(1) {
        let parse = |v: &str| v.parse().map_err(|_| stattn::Error::Usage(format!("bad value in {arg}")));
        if let Some(v) = arg.strip_prefix("sprite=") {
            synth.sprite_size = parse(v)?;
        } else if let Some(v) = arg.strip_prefix("step=") {
            synth.step = parse(v)?;
        } else if let Some(v) = arg.strip_prefix("noise=") {
            synth.noise = v.parse().map_err(|_| stattn::Error::Usage(format!("bad value in {arg}")))?;
        } else if let Some(v) = arg.strip_prefix("every=") {
            every = parse(v)?;
        } else {
            config.apply_text(&arg)?;
        }
    }
    let data = generate_dataset(&synth, 70, 20, 2024)?;
    let k = config.n_classes;
    let mut trainer = Trainer::new(config.clone())?;
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let (mut ce, mut steps) = (0.0, 0);
        trainer.fit(&data.train, 1, |_, b| {
            ce += b.ce;
            steps += 1;
            Ok(())
        })?;
        if epoch % every != 0 && epoch != config.epochs {
            continue;
        }
        let r = evaluate(&trainer.model, &data.test)?;
        let mut confusion = vec![vec![0; k]; k];
        let mut ious = Vec::new();
        for (s, p) in data.test.iter().zip(&r.predictions) {
            confusion[s.video.label][p.class] += 1;
            for d in r.spatial_detections.iter().filter(|d| d.video == s.id) {
                if let Some(gt) = s.video.gt_boxes[d.region.frame - 1] {
                    ious.push(box_iou(&gt, &d.region.bbox));
                }
            }
        }
        let mut importance = vec![0.0; synth.n_frames];
        for p in &r.predictions {
            for (acc, w) in importance.iter_mut().zip(frame_importance(&p.attention)) {
                *acc += w / r.predictions.len() as f64;
            }
        }
        let importance: Vec<String> = importance.iter().map(|w| format!("{w:.2}")).collect();
        let mean_iou = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        let good = ious.iter().filter(|&&v| v >= 0.3).count();
        println!(
            "epoch {epoch:3} {:6.1}s ce {:.4} acc {:.3} spatial {:.3} temporal {:.3} iou {mean_iou:.3} hits {good}/{} frames [{}] confusion {confusion:?}",
            start.elapsed().as_secs_f64(),
            ce / steps as f64,
            r.accuracy(),
            r.spatial_at(0.3).unwrap_or(0.0),
            r.temporal_at(0.3).unwrap_or(0.0),
            ious.len(),
            importance.join(" "),
        );
    }
    Ok(())
}
