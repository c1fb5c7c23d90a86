//! Per-frame importance masks and mask-weighted features.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, TensorStore};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Var};

/// Three 3x3 convolutions: `C -> c1 -> c2 -> 1`, batch norm and ReLU after the
/// first two, sigmoid after the last.
#[derive(Clone, Debug)]
pub struct MaskNetwork {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub conv3: Conv,
    pub in_channels: usize,
}

impl MaskNetwork {
    pub fn new(
        params: &mut TensorStore,
        buffers: &mut TensorStore,
        name: &str,
        in_channels: usize,
        widths: (usize, usize),
        rng: &mut SeededRng,
    ) -> Self {
        let (c1, c2) = widths;
        let relu_gain = 2f64.sqrt();
        Self {
            conv1: Conv::new(params, &format!("{name}.conv1"), in_channels, c1, 3, 1, 1, false, relu_gain, rng),
            bn1: BatchNorm::new(params, buffers, &format!("{name}.bn1"), c1),
            conv2: Conv::new(params, &format!("{name}.conv2"), c1, c2, 3, 1, 1, false, relu_gain, rng),
            bn2: BatchNorm::new(params, buffers, &format!("{name}.bn2"), c2),
            conv3: Conv::new(params, &format!("{name}.conv3"), c2, 1, 3, 1, 1, true, 1.0, rng),
            in_channels,
        }
    }

    /// Masks for `[C,H,W]` or `[N,C,H,W]` features; the channel axis of the
    /// result has extent 1. Batch-norm statistics span everything presented.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        let axis = shape.len().saturating_sub(3);
        if shape.len() < 3 || shape[axis] != self.in_channels {
            return Err(Error::dim(
                "mask_forward",
                Some(axis),
                format!("expected {} channels, got shape {shape:?}", self.in_channels),
            ));
        }
        let mut h = self.conv1.forward(ctx, x)?;
        h = self.bn1.forward(ctx, h)?;
        h = ctx.tape.relu(h);
        h = self.conv2.forward(ctx, h)?;
        h = self.bn2.forward(ctx, h)?;
        h = ctx.tape.relu(h);
        h = self.conv3.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(h))
    }
}

/// `x * m` with the single-channel mask repeated across the channels of `x`.
pub fn apply_mask(tape: &mut Tape, x: Var, mask: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ms = tape.shape(mask).to_vec();
    if xs.len() < 3 || xs.len() != ms.len() {
        return Err(Error::dim("apply_mask", None, format!("features {xs:?} and mask {ms:?}")));
    }
    let axis = xs.len() - 3;
    if ms[axis] != 1 {
        return Err(Error::dim("apply_mask", Some(axis), format!("mask must have one channel, got {ms:?}")));
    }
    if let Some(a) = (0..xs.len()).find(|&a| a != axis && xs[a] != ms[a]) {
        return Err(Error::dim("apply_mask", Some(a), format!("features {xs:?} and mask {ms:?}")));
    }
    let spread = tape.repeat(mask, axis, xs[axis])?;
    tape.mul(x, spread)
}

/// 8-bit grey level of a value in `[0,1]`.
pub fn quantize(value: f64) -> u8 {
    (255.0 * value.clamp(0.0, 1.0)).round() as u8
}

/// Writes a binary greyscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder =
        PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder.write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(())
}

/// Writes one mask (row-major `height x width` values in `[0,1]`) as
/// `<video>_<frame>_mask.pgm` inside `dir`, returning the path.
pub fn export_mask(dir: &Path, video: &str, frame: usize, width: usize, height: usize, mask: &[f64]) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("{video}_{frame}_mask.pgm"));
    let pixels: Vec<u8> = mask.iter().map(|&m| quantize(m)).collect();
    write_pgm(&path, width, height, &pixels)?;
    Ok(path)
}
