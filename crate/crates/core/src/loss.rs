//! The training objective: cross-entropy plus weighted mask smoothness, mask
//! contrast and temporal unimodality terms.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub tv: f64,
    pub contrast: f64,
    pub unimodal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tv: 1e-5,
            contrast: 1e-4,
            unimodal: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tv", self.tv), ("contrast", self.contrast), ("unimodal", self.unimodal)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Values of each loss term for one video (or averaged over a batch).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub tv: f64,
    pub contrast: f64,
    pub unimodal: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise sum, used to average over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.tv += other.tv;
        self.contrast += other.contrast;
        self.unimodal += other.unimodal;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce * factor,
            tv: self.tv * factor,
            contrast: self.contrast * factor,
            unimodal: self.unimodal * factor,
            total: self.total * factor,
        }
    }
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

fn zero(tape: &mut Tape) -> Var {
    tape.leaf(Tensor::scalar(0.0))
}

/// Sum of absolute differences between vertically and horizontally adjacent
/// pixels. The last two axes of `masks` are the spatial ones; pairs that would
/// leave the image are not counted.
pub fn tv_loss(tape: &mut Tape, masks: Var) -> Result<Var> {
    let shape = tape.shape(masks).to_vec();
    if shape.len() < 2 {
        return Err(Error::dim("tv_loss", None, format!("masks need two spatial axes, got {shape:?}")));
    }
    let mut total = zero(tape);
    for axis in [shape.len() - 2, shape.len() - 1] {
        let extent = shape[axis];
        if extent < 2 {
            continue;
        }
        let next = tape.narrow(masks, axis, 1, extent - 1)?;
        let prev = tape.narrow(masks, axis, 0, extent - 1)?;
        let diff = tape.sub(next, prev)?;
        let mag = tape.abs(diff);
        let s = tape.sum_all(mag);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// `sum M (1/2 - B)` with `B = 1[M > 0.5]` held constant: rewards confident
/// foreground and penalizes background mass.
pub fn contrast_loss(tape: &mut Tape, masks: Var) -> Result<Var> {
    let shape = tape.shape(masks).to_vec();
    let b = tape.indicator_gt(masks, 0.5);
    let half = tape.leaf(Tensor::full(&shape, 0.5));
    let coeff = tape.sub(half, b)?;
    let prod = tape.mul(masks, coeff)?;
    Ok(tape.sum_all(prod))
}

/// Log-concavity penalty summed over every row of an `[n,n]` attention matrix.
pub fn unimodal_loss(tape: &mut Tape, weights: Var) -> Result<Var> {
    let shape = tape.shape(weights).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("unimodal_loss", None, format!("expected a matrix, got {shape:?}")));
    }
    let n = shape[1];
    if n < 3 {
        return Ok(zero(tape));
    }
    let left = tape.narrow(weights, 1, 0, n - 2)?;
    let mid = tape.narrow(weights, 1, 1, n - 2)?;
    let right = tape.narrow(weights, 1, 2, n - 2)?;
    let outer = tape.mul(left, right)?;
    let square = tape.mul(mid, mid)?;
    let gap = tape.sub(outer, square)?;
    let hinge = tape.max0(gap);
    Ok(tape.sum_all(hinge))
}

/// The weighted objective for one video. Returns the scalar to differentiate and
/// the value of each term.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    label: usize,
    masks: Var,
    weights: Var,
    lambda: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let ce = cross_entropy(tape, logits, label)?;
    let tv = tv_loss(tape, masks)?;
    let contrast = contrast_loss(tape, masks)?;
    let unimodal = unimodal_loss(tape, weights)?;

    let mut total = ce;
    for (term, factor) in [(tv, lambda.tv), (contrast, lambda.contrast), (unimodal, lambda.unimodal)] {
        let weighted = tape.scale(term, factor);
        total = tape.add(total, weighted)?;
    }
    let value = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        ce: value(ce),
        tv: value(tv),
        contrast: value(contrast),
        unimodal: value(unimodal),
        total: value(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::SeededRng;

    fn eval(build: impl Fn(&mut Tape, Var) -> Result<Var>, input: Tensor) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let out = build(&mut tape, x).unwrap();
        tape.value(out).item().unwrap()
    }

    fn mask(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = eval(|t, x| cross_entropy(t, x, 2), Tensor::vector(vec![0.3; 4]));
        assert!((ce - 4f64.ln()).abs() < 1e-9);
        let ce = eval(|t, x| cross_entropy(t, x, 0), Tensor::vector(vec![10.0, -10.0]));
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((ce - expected).abs() < 1e-15);
        assert!((ce - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(eval(tv_loss, Tensor::full(&[2, 1, 3, 3], 0.4)), 0.0);
        let tv = eval(tv_loss, mask(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        assert!((tv - 2.0).abs() < 1e-9);
        // a single row has only horizontal pairs
        let tv = eval(tv_loss, mask(&[1, 3], &[0.2, 0.7, 0.1]));
        assert!((tv - 1.1).abs() < 1e-12);
    }

    #[test]
    fn contrast_examples() {
        assert_eq!(eval(contrast_loss, Tensor::zeros(&[1, 1, 3, 3])), 0.0);
        assert_eq!(eval(contrast_loss, Tensor::ones(&[2, 1, 2, 3])), -6.0);
        let c = eval(contrast_loss, mask(&[1, 1, 1, 2], &[0.8, 0.2]));
        assert!((c + 0.3).abs() < 1e-9);
        // exactly 0.5 is background, so each pixel contributes 0.5 * 0.5
        assert_eq!(eval(contrast_loss, Tensor::full(&[1, 4], 0.5)), 1.0);
    }

    #[test]
    fn unimodal_examples() {
        let row = [0.1, 0.2, 0.4, 0.2, 0.1];
        let w: Vec<f64> = (0..5).flat_map(|_| row).collect();
        assert_eq!(eval(unimodal_loss, mask(&[5, 5], &w)), 0.0);

        let row: Vec<f64> = [0.3, 0.1, 0.3].iter().map(|x| x / 0.7).collect();
        let u = eval(unimodal_loss, mask(&[1, 3], &row));
        assert!((u - 0.08 / 0.49).abs() < 1e-9);
        assert!((u - 0.16327).abs() < 1e-5);

        assert_eq!(eval(unimodal_loss, Tensor::full(&[4, 4], 0.25)), 0.0);
        assert_eq!(eval(unimodal_loss, Tensor::full(&[2, 2], 0.5)), 0.0);
    }

    fn inputs(rng: &mut SeededRng) -> (Tensor, Tensor, Tensor) {
        let logits = Tensor::from_fn(&[3], |_| rng.uniform_in(-1.0, 1.0));
        let masks = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.uniform());
        let w = Tensor::from_fn(&[4, 4], |_| rng.uniform_in(0.05, 1.0));
        (logits, masks, w)
    }

    #[test]
    fn zero_weights_leave_only_cross_entropy() {
        let (logits, masks, w) = inputs(&mut SeededRng::new(4));
        let mut tape = Tape::new();
        let (l, m, a) = (tape.leaf(logits), tape.leaf(masks), tape.leaf(w));
        let zero = LossWeights {
            tv: 0.0,
            contrast: 0.0,
            unimodal: 0.0,
        };
        let (_, b) = total_loss(&mut tape, l, 1, m, a, &zero).unwrap();
        assert_eq!(b.total, b.ce);
        assert!(b.tv > 0.0 && b.unimodal >= 0.0);
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let (logits, masks, w) = inputs(&mut SeededRng::new(5));
        let mut tape = Tape::new();
        let (l, m, a) = (tape.leaf(logits), tape.leaf(masks), tape.leaf(w));
        let lambda = LossWeights {
            tv: 0.3,
            contrast: 0.7,
            unimodal: 1.9,
        };
        let (_, b) = total_loss(&mut tape, l, 0, m, a, &lambda).unwrap();
        let expected = b.ce + 0.3 * b.tv + 0.7 * b.contrast + 1.9 * b.unimodal;
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let (logits, masks, w) = inputs(&mut SeededRng::new(6));
        let lambda = LossWeights {
            tv: 0.5,
            contrast: 0.25,
            unimodal: 2.0,
        };
        let report = gradcheck::check_fn(&[logits, masks, w], |tape, v| {
            Ok(total_loss(tape, v[0], 2, v[1], v[2], &lambda)?.0)
        })
        .unwrap();
        assert!(report.checked() > 30);
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn label_out_of_range_is_usage_error() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(cross_entropy(&mut tape, l, 3), Err(Error::Usage(_))));
    }
}
