//! The full video classifier: a strided convolutional frame encoder followed by
//! spatial masks, temporal attention and a ConvLSTM readout.

use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Linear, Mode, TensorStore};
use crate::rng::SeededRng;
use crate::spatial::{apply_mask, MaskNetwork};
use crate::temporal::{aggregate, attention_weights, ConvLstmCell, EnergyNetworks, InitNetwork, LstmState};
use crate::tensor::{conv_output_extent, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of each input frame.
    pub in_channels: usize,
    /// Input frame height and width.
    pub frame_size: (usize, usize),
    /// Output widths of the stride-2 encoder layers; empty feeds frames straight
    /// to the attention model.
    pub encoder_channels: Vec<usize>,
    pub n_frames: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub energy_width: usize,
    pub mask_widths: (usize, usize),
    /// Scale aggregated features by `1/n`.
    pub mean_aggregate: bool,
    /// Initial bias of the last mask layer.
    pub mask_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            frame_size: (56, 56),
            encoder_channels: vec![8, 8, 8],
            n_frames: 8,
            n_classes: 4,
            hidden: 16,
            energy_width: 16,
            mask_widths: (64, 32),
            mean_aggregate: true,
            mask_bias: -2.0,
        }
    }
}

impl ModelConfig {
    /// Channels and spatial size of the encoder output.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = self.frame_size;
        let mut c = self.in_channels;
        let layers = self.encoder_channels.len();
        for (i, &width) in self.encoder_channels.iter().enumerate() {
            let p = encoder_padding(i, layers);
            h = conv_output_extent(h, 3, 2, p).ok_or_else(|| Error::Config("frames too small for the encoder".into()))?;
            w = conv_output_extent(w, 3, 2, p).ok_or_else(|| Error::Config("frames too small for the encoder".into()))?;
            c = width;
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("in_channels", self.in_channels),
            ("frame height", self.frame_size.0),
            ("frame width", self.frame_size.1),
            ("n_frames", self.n_frames),
            ("n_classes", self.n_classes),
            ("hidden", self.hidden),
            ("energy_width", self.energy_width),
            ("mask width 1", self.mask_widths.0),
            ("mask width 2", self.mask_widths.1),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !self.mask_bias.is_finite() {
            return Err(Error::Config("mask_bias must be finite".into()));
        }
        self.feature_shape().map(|_| ())
    }
}

/// Padding of encoder layer `i` of `layers`: 0, or 1 on the last layer. Feature
/// cells then sit within half a pixel of the centres an align-corners-false
/// resize assigns them.
pub fn encoder_padding(i: usize, layers: usize) -> usize {
    usize::from(i + 1 == layers)
}

/// Stride-2 3x3 convolutions with ReLU, applied to each frame independently.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<Conv>,
}

impl Encoder {
    pub fn new(params: &mut TensorStore, in_channels: usize, widths: &[usize], rng: &mut SeededRng) -> Self {
        let mut c = in_channels;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let padding = encoder_padding(i, widths.len());
                let name = format!("encoder.conv{}", i + 1);
                let layer = Conv::new(params, &name, c, w, 3, 2, padding, true, 2f64.sqrt(), rng);
                c = w;
                layer
            })
            .collect();
        Self { layers }
    }

    /// Per-frame features of `[n,C,H,W]` frames.
    pub fn frame_features(&self, ctx: &mut Ctx<'_>, frames: Var) -> Result<Var> {
        let mut x = frames;
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
            x = ctx.tape.relu(x);
        }
        Ok(x)
    }
}

/// Spatial masks, temporal attention and the recurrent classifier over
/// `[n,C,H,W]` frame features.
#[derive(Clone, Debug)]
pub struct AttentionModel {
    pub mask: MaskNetwork,
    pub energy: EnergyNetworks,
    pub cell: ConvLstmCell,
    pub g_c: InitNetwork,
    pub g_h: InitNetwork,
    pub classifier: Linear,
    pub n_frames: usize,
    pub mean_aggregate: bool,
}

/// Everything a forward pass exposes for the loss and for interpretation.
#[derive(Clone, Copy, Debug)]
pub struct VideoOutput {
    /// `[K]` class scores.
    pub logits: Var,
    /// `[n,n]`; row `t` holds the frame weights used at step `t`.
    pub attention: Var,
    /// `[n,1,H,W]` masks at feature resolution.
    pub masks: Var,
}

impl AttentionModel {
    pub fn new(params: &mut TensorStore, buffers: &mut TensorStore, cfg: &ModelConfig, channels: usize, rng: &mut SeededRng) -> Self {
        let mask = MaskNetwork::new(params, buffers, "mask", channels, cfg.mask_widths, rng);
        *params.get_mut(mask.conv3.bias.expect("mask output has a bias")) = Tensor::vector(vec![cfg.mask_bias]);
        Self {
            mask,
            energy: EnergyNetworks::new(params, "energy", cfg.hidden, channels, cfg.energy_width, cfg.n_frames, rng),
            cell: ConvLstmCell::new(params, "lstm", channels, cfg.hidden, rng),
            g_c: InitNetwork::new(params, buffers, "init_c", channels, cfg.hidden, rng),
            g_h: InitNetwork::new(params, buffers, "init_h", channels, cfg.hidden, rng),
            classifier: Linear::new(params, "classifier", cfg.hidden, cfg.n_classes, rng),
            n_frames: cfg.n_frames,
            mean_aggregate: cfg.mean_aggregate,
        }
    }

    pub fn forward_video(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<VideoOutput> {
        Ok(self.forward_videos(ctx, features, 1)?.remove(0))
    }

    /// Outputs for `videos` videos whose `[n,C,H,W]` features are concatenated
    /// along the first axis. The mask and init networks see all videos in one
    /// call, so their batch-norm statistics span the whole batch.
    pub fn forward_videos(&self, ctx: &mut Ctx<'_>, features: Var, videos: usize) -> Result<Vec<VideoOutput>> {
        let n = self.n_frames;
        let shape = ctx.tape.shape(features).to_vec();
        if videos == 0 || shape.len() != 4 || shape[0] != videos * n {
            return Err(Error::dim(
                "forward_video",
                Some(0),
                format!("expected {videos} x {n} frames of [C,H,W], got {shape:?}"),
            ));
        }
        let all_masks = self.mask.forward(ctx, features)?;
        let all_attended = apply_mask(&mut ctx.tape, features, all_masks)?;
        let mut slices = Vec::with_capacity(videos);
        let mut means = Vec::with_capacity(videos);
        for v in 0..videos {
            let masks = ctx.tape.narrow(all_masks, 0, v * n, n)?;
            let attended = ctx.tape.narrow(all_attended, 0, v * n, n)?;
            means.push(ctx.tape.mean(attended, &[0])?);
            slices.push((masks, attended));
        }
        let means = ctx.tape.stack(&means)?;
        let c0 = self.g_c.forward(ctx, means)?;
        let h0 = self.g_h.forward(ctx, means)?;
        let state_shape = ctx.tape.shape(c0)[1..].to_vec();

        let mut outputs = Vec::with_capacity(videos);
        for (v, (masks, attended)) in slices.into_iter().enumerate() {
            let c = ctx.tape.narrow(c0, 0, v, 1)?;
            let h = ctx.tape.narrow(h0, 0, v, 1)?;
            let state = LstmState {
                c: ctx.tape.reshape(c, &state_shape)?,
                h: ctx.tape.reshape(h, &state_shape)?,
            };
            outputs.push(self.recur(ctx, masks, attended, state)?);
        }
        Ok(outputs)
    }

    fn recur(&self, ctx: &mut Ctx<'_>, masks: Var, attended: Var, mut state: LstmState) -> Result<VideoOutput> {
        let frame_scores = self.energy.frame_scores(ctx, attended)?;
        let mut rows = Vec::with_capacity(self.n_frames);
        let mut hiddens = Vec::with_capacity(self.n_frames);
        for _ in 0..self.n_frames {
            let hidden_scores = self.energy.hidden_scores(ctx, state.h)?;
            let energies = ctx.tape.add(hidden_scores, frame_scores)?;
            let w = attention_weights(&mut ctx.tape, energies)?;
            let y = aggregate(&mut ctx.tape, w, attended, self.mean_aggregate)?;
            state = self.cell.step(ctx, y, state)?;
            rows.push(w);
            hiddens.push(state.h);
        }
        let attention = ctx.tape.stack(&rows)?;
        let stacked = ctx.tape.stack(&hiddens)?;
        let mean_hidden = ctx.tape.mean(stacked, &[0])?;
        let pooled = ctx.tape.mean(mean_hidden, &[1, 2])?;
        let logits = self.classifier.forward(ctx, pooled)?;
        Ok(VideoOutput {
            logits,
            attention,
            masks,
        })
    }
}

/// Encoder plus attention model, with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    pub encoder: Encoder,
    pub attention: AttentionModel,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub class: usize,
    pub attention: Tensor,
    pub masks: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (channels, _, _) = config.feature_shape()?;
        let mut rng = SeededRng::new(seed);
        let (mut params, mut buffers) = (TensorStore::new(), TensorStore::new());
        let encoder = Encoder::new(&mut params, config.in_channels, &config.encoder_channels, &mut rng);
        let attention = AttentionModel::new(&mut params, &mut buffers, &config, channels, &mut rng);
        Ok(Self {
            config,
            params,
            buffers,
            encoder,
            attention,
        })
    }

    pub fn context(&self, mode: Mode) -> Ctx<'_> {
        Ctx::new(&self.params, &self.buffers, mode)
    }

    /// Runs `[n,C,H,W]` frames through encoder and attention model.
    pub fn forward(&self, ctx: &mut Ctx<'_>, frames: Var) -> Result<VideoOutput> {
        Ok(self.forward_batch(ctx, &[frames])?.remove(0))
    }

    /// Runs several videos through the model in one pass. In training mode
    /// batch-norm statistics are shared by all of them.
    pub fn forward_batch(&self, ctx: &mut Ctx<'_>, videos: &[Var]) -> Result<Vec<VideoOutput>> {
        let (h, w) = self.config.frame_size;
        let expected = [self.config.n_frames, self.config.in_channels, h, w];
        for &frames in videos {
            let shape = ctx.tape.shape(frames);
            if shape != expected {
                return Err(Error::dim("forward", None, format!("expected frames {expected:?}, got {shape:?}")));
            }
        }
        let frames = if videos.len() == 1 { videos[0] } else { ctx.tape.concat(videos, 0)? };
        let features = self.encoder.frame_features(ctx, frames)?;
        self.attention.forward_videos(ctx, features, videos.len())
    }

    /// Eval-mode prediction for one video.
    pub fn predict(&self, frames: &Tensor) -> Result<Prediction> {
        let mut ctx = self.context(Mode::Eval);
        let x = ctx.tape.leaf(frames.clone());
        let out = self.forward(&mut ctx, x)?;
        let logits = ctx.tape.value(out.logits).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let class = argmax(&logits);
        Ok(Prediction {
            logits,
            class,
            attention: ctx.tape.value(out.attention).clone(),
            masks: ctx.tape.value(out.masks).clone(),
        })
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
