//! Minibatch training with momentum SGD, metrics logging and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::Model;
use crate::nn::{apply_bn_updates, Mode, TensorStore};
use crate::optim::{clip_global_norm, sgd_step, zero_velocity};
use crate::rng::{derive_seed, SeededRng};
use crate::synth::Sample;
use crate::tensor::{Tensor, Var};

pub const METRICS_HEADER: &str = "step,ce,tv,contrast,unimodal,total";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.stck";

const SHUFFLE_STREAM: u64 = 0x5348_5546;

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub velocity: TensorStore,
    pub step: u64,
}

/// Fails with a configuration error unless every sample matches the model's
/// frame shape and class count.
pub fn check_samples(model: &Model, samples: &[Sample]) -> Result<()> {
    let cfg = &model.config;
    let expected = [cfg.n_frames, cfg.in_channels, cfg.frame_size.0, cfg.frame_size.1];
    for s in samples {
        if s.video.frames.shape() != expected {
            return Err(Error::Config(format!(
                "video {} has frames {:?}, model expects {expected:?}",
                s.id,
                s.video.frames.shape()
            )));
        }
        if s.video.label >= cfg.n_classes {
            return Err(Error::Config(format!(
                "video {} has label {}, model has {} classes",
                s.id, s.video.label, cfg.n_classes
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), config.seed)?;
        let velocity = zero_velocity(&model.params);
        Ok(Self {
            config,
            model,
            velocity,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let mut velocity = zero_velocity(&model.params);
        for (name, t) in ck.velocity.iter() {
            velocity.assign(name, t.clone())?;
        }
        Ok(Self {
            config: ck.config.clone(),
            model,
            velocity,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            params: self.model.params.clone(),
            buffers: self.model.buffers.clone(),
            velocity: self.velocity.clone(),
        }
    }

    /// Mean loss terms and parameter gradients over `batch` in training mode.
    /// Batch norm statistics are taken per video, over its frames, and folded
    /// into the running averages in batch order.
    fn batch_gradients(&mut self, batch: &[&Sample]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let weights = self.config.loss_weights();
        let scale = 1.0 / batch.len() as f64;
        let mut ctx = self.model.context(Mode::Train);
        let mut sum = LossBreakdown::default();
        let mut total: Option<Var> = None;
        for s in batch {
            let frames = ctx.tape.leaf(s.video.frames.clone());
            let out = self.model.forward(&mut ctx, frames)?;
            let (loss, breakdown) = total_loss(&mut ctx.tape, out.logits, s.video.label, out.masks, out.attention, &weights)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!("loss diverged on video {} at step {}", s.id, self.step + 1)));
            }
            sum.accumulate(&breakdown);
            total = Some(match total {
                Some(t) => ctx.tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
        let mean = ctx.tape.scale(total, scale);
        ctx.tape.backward(mean)?;
        let grads = ctx.param_grads();
        let updates = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        apply_bn_updates(&mut self.model.buffers, &updates);
        Ok((sum.scaled(scale), grads))
    }

    /// One parameter update from the mean gradient over `batch`. Returns the
    /// mean loss terms. A non-finite loss or gradient is a numeric error, and in
    /// that case parameters are left untouched.
    pub fn train_batch(&mut self, batch: &[&Sample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let (mean, mut grads) = self.batch_gradients(batch)?;
        if grads.iter().all(Tensor::all_finite) {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        let saved = (self.model.params.clone(), self.velocity.clone());
        sgd_step(
            &mut self.model.params,
            &mut self.velocity,
            &grads,
            self.config.learning_rate,
            self.config.momentum,
        )?;
        let overflowed = self.model.params.iter().find(|(_, p)| !p.all_finite()).map(|(n, _)| n.to_string());
        if let Some(name) = overflowed {
            (self.model.params, self.velocity) = saved;
            return Err(Error::Numeric(format!("parameter {name} overflowed at step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(mean)
    }

    /// Runs `epochs` passes over `samples`, calling `on_step` after each update.
    /// The visiting order of each epoch is a shuffle seeded from the config seed
    /// and the epoch index.
    pub fn fit(&mut self, samples: &[Sample], epochs: usize, mut on_step: impl FnMut(&Self, &LossBreakdown) -> Result<()>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        check_samples(&self.model, samples)?;
        let batch_size = self.config.batch_size;
        let steps_per_epoch = samples.len().div_ceil(batch_size) as u64;
        let start_epoch = self.step / steps_per_epoch;
        for epoch in start_epoch..start_epoch + epochs as u64 {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            SeededRng::new(derive_seed(self.config.seed ^ SHUFFLE_STREAM, epoch)).shuffle(&mut order);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let breakdown = self.train_batch(&batch)?;
                on_step(self, &breakdown)?;
            }
        }
        Ok(())
    }
}

pub fn metrics_row(step: u64, b: &LossBreakdown) -> String {
    format!("{step},{},{},{},{},{}", b.ce, b.tv, b.contrast, b.unimodal, b.total)
}

/// Where [`train`] put its outputs.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: Option<LossBreakdown>,
}

/// Trains a fresh model on `samples` for `config.epochs` epochs, writing one
/// metrics row per update to `out_dir/metrics.csv` and the final state to
/// `out_dir/model.stck`.
///
/// On divergence the last finite state is checkpointed before the numeric
/// error is returned.
pub fn train(config: &TrainConfig, samples: &[Sample], out_dir: &Path) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone())?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_samples(&trainer.model, samples)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut last = None;
    let steps_per_epoch = samples.len().div_ceil(config.batch_size) as u64;
    let mut epoch_loss = LossBreakdown::default();
    let result = trainer.fit(samples, config.epochs, |t, b| {
        writeln!(metrics, "{}", metrics_row(t.step, b)).map_err(|e| Error::io(&metrics_path, e))?;
        last = Some(*b);
        epoch_loss.accumulate(b);
        if t.step % steps_per_epoch == 0 {
            let mean = epoch_loss.scaled(1.0 / steps_per_epoch as f64);
            log::info!("epoch {} ce {:.4} total {:.4}", t.step / steps_per_epoch, mean.ce, mean.total);
            epoch_loss = LossBreakdown::default();
        }
        Ok(())
    });
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    trainer.checkpoint().save(&checkpoint_path)?;
    result?;
    Ok(TrainOutput {
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        final_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    pub(crate) fn tiny() -> (TrainConfig, Vec<Sample>) {
        let synth = SynthConfig {
            n_frames: 4,
            height: 16,
            width: 16,
            sprite_size: 4,
            step: 2,
            window: (2, 3),
            ..SynthConfig::default()
        };
        let data = generate_dataset(&synth, 3, 1, 9).unwrap();
        let config = TrainConfig {
            n_frames: 4,
            frame_height: 16,
            frame_width: 16,
            encoder_channels: vec![4, 4],
            hidden: 4,
            energy_width: 4,
            mask_width1: 4,
            mask_width2: 4,
            batch_size: 3,
            epochs: 2,
            ..TrainConfig::default()
        };
        (config, data.train)
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_and_header_only() {
        let (mut config, samples) = tiny();
        config.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = train(&config, &samples, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&out.metrics).unwrap(), format!("{METRICS_HEADER}\n"));
        let ck = Checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(ck.step, 0);
        assert_eq!(ck.params, Trainer::new(config).unwrap().model.params);
    }

    #[test]
    fn runs_are_byte_identical() {
        let (config, samples) = tiny();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let oa = train(&config, &samples, a.path()).unwrap();
        let ob = train(&config, &samples, b.path()).unwrap();
        let metrics = std::fs::read(&oa.metrics).unwrap();
        assert_eq!(metrics, std::fs::read(&ob.metrics).unwrap());
        assert_eq!(std::fs::read(&oa.checkpoint).unwrap(), std::fs::read(&ob.checkpoint).unwrap());
        let rows = String::from_utf8(metrics).unwrap().lines().count() - 1;
        assert_eq!(rows, 2 * samples.len().div_ceil(config.batch_size));
    }

    #[test]
    fn divergence_checkpoints_last_finite_state() {
        let (mut config, samples) = tiny();
        config.learning_rate = 1e300;
        config.grad_clip = 0.0;
        config.momentum = 0.0;
        config.epochs = 5;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&config, &samples, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err:?}");
        let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert!(ck.params.tensors().iter().all(Tensor::all_finite));
    }

    #[test]
    fn resuming_from_checkpoint_continues_identically() {
        let (config, samples) = tiny();
        let mut straight = Trainer::new(config.clone()).unwrap();
        straight.fit(&samples, 2, |_, _| Ok(())).unwrap();
        let mut first = Trainer::new(config).unwrap();
        first.fit(&samples, 1, |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.fit(&samples, 1, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint(), straight.checkpoint());
    }

    #[test]
    fn empty_or_mismatched_data_is_config_error() {
        let (config, mut samples) = tiny();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(train(&config, &[], dir.path()), Err(Error::Config(_))));
        samples[0].video.label = 9;
        assert!(matches!(train(&config, &samples, dir.path()), Err(Error::Config(_))));
    }
}
