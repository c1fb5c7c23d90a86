//! Central finite-difference checks of tape gradients.
//!
//! Evaluations report the [`Tape::kink_pattern`](crate::tensor::Tape::kink_pattern)
//! they produced. A difference quotient is only formed when every stencil point
//! shares the base pattern; otherwise the step shrinks tenfold (up to two times)
//! and the coordinate is skipped if it still straddles a non-smooth point.
//!
//! Quotients at `h` and `h/2` are combined by Richardson extrapolation, which
//! cancels the `h^2` truncation term of the central difference. Without it the
//! oracle's own error approaches 1e-4 on deeper networks.

use crate::error::Result;
use crate::loss::{total_loss, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::nn::{Ctx, Mode, TensorStore};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

/// Denominator floor of [`relative_error`], so exact zeros compare by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

const REFINEMENTS: usize = 3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome for one group of coordinates (one tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate, if any was checked.
    pub worst: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub groups: Vec<GroupReport>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol && self.checked() > 0
    }
}

/// Compares `analytic` against central differences of `eval` over every entry of `inputs`.
///
/// `eval` maps the (perturbed) inputs to a scalar and a kink pattern.
pub fn check<F>(names: &[String], inputs: &[Tensor], analytic: &[Tensor], step: f64, mut eval: F) -> Result<Report>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<bool>)>,
{
    let mut point = inputs.to_vec();
    let (_, base) = eval(&point)?;
    let mut groups = Vec::with_capacity(inputs.len());
    for (t, name) in names.iter().enumerate() {
        let mut group = GroupReport {
            name: name.clone(),
            count: point[t].len(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for i in 0..point[t].len() {
            match difference(&mut point, t, i, step, &base, &mut eval)? {
                Some(numeric) => {
                    let err = relative_error(analytic[t].data()[i], numeric);
                    group.checked += 1;
                    if err > group.max_rel_err || group.worst.is_none() {
                        group.max_rel_err = group.max_rel_err.max(err);
                        group.worst = Some(i);
                    }
                }
                None => group.skipped += 1,
            }
        }
        groups.push(group);
    }
    Ok(Report { groups })
}

/// Checks `build` against finite differences with respect to every entry of `inputs`.
///
/// Non-scalar outputs are contracted with a fixed positive random tensor so that
/// every output entry contributes to the checked scalar.
pub fn check_fn(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Report> {
    let forward = |point: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let root = contract(&mut tape, out)?;
        Ok((tape, vars, root))
    };
    let (mut tape, vars, root) = forward(inputs)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("param leaf")).collect();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    check(&names, inputs, &analytic, FD_STEP, |point| {
        let (tape, _, root) = forward(point)?;
        Ok((tape.value(root).item()?, tape.kink_pattern()))
    })
}

/// Checks every tensor of `params`, one report group per named tensor.
///
/// `build` runs a forward pass on the context and returns its output, which is
/// contracted to a scalar as in [`check_fn`]. Batch-norm running statistics are
/// read from `buffers` but never updated.
pub fn check_params(
    params: &TensorStore,
    buffers: &TensorStore,
    mode: Mode,
    build: impl Fn(&mut Ctx<'_>) -> Result<Var>,
) -> Result<Report> {
    let forward = |store: &TensorStore| -> Result<(f64, Vec<Tensor>, Vec<bool>)> {
        let mut ctx = Ctx::new(store, buffers, mode);
        let out = build(&mut ctx)?;
        let root = contract(&mut ctx.tape, out)?;
        let value = ctx.tape.value(root).item()?;
        let pattern = ctx.tape.kink_pattern();
        ctx.tape.backward(root)?;
        Ok((value, ctx.param_grads(), pattern))
    };
    let (_, analytic, _) = forward(params)?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut scratch = params.clone();
    check(&names, params.tensors(), &analytic, FD_STEP, |point| {
        scratch.tensors_mut().clone_from_slice(point);
        let mut ctx = Ctx::new(&scratch, buffers, mode);
        let out = build(&mut ctx)?;
        let root = contract(&mut ctx.tape, out)?;
        Ok((ctx.tape.value(root).item()?, ctx.tape.kink_pattern()))
    })
}

/// The small model used for whole-model gradient checks: 4-channel 7x7
/// features fed straight to the attention model, 4 frames, 3 classes.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        frame_size: (7, 7),
        encoder_channels: Vec::new(),
        n_frames: 4,
        n_classes: 3,
        hidden: 8,
        energy_width: 4,
        mask_widths: (6, 4),
        mean_aggregate: true,
        mask_bias: 0.0,
    }
}

/// Checks the gradient of the full training loss with respect to every
/// parameter of a toy model on random features, in training mode.
///
/// With `corrupt` set, the first parameter tensor also enters the loss through
/// a path the tape does not see, so its analytic gradient is wrong.
pub fn check_model(config: &ModelConfig, weights: &LossWeights, seed: u64, corrupt: bool) -> Result<Report> {
    let model = Model::new(config.clone(), seed)?;
    let mut rng = SeededRng::new(seed ^ 0xfea7);
    let (h, w) = config.frame_size;
    let frames = Tensor::from_fn(&[config.n_frames, config.in_channels, h, w], |_| rng.uniform_in(-1.0, 1.0));
    let label = rng.below(config.n_classes);
    check_params(&model.params, &model.buffers, Mode::Train, |ctx| {
        let x = ctx.tape.leaf(frames.clone());
        let out = model.forward(ctx, x)?;
        let (mut loss, _) = total_loss(&mut ctx.tape, out.logits, label, out.masks, out.attention, weights)?;
        if corrupt {
            let first = ctx.tape.value(ctx.param_vars()[0]).clone();
            let hidden = ctx.tape.leaf(first);
            let sq = ctx.tape.mul(hidden, hidden)?;
            let extra = ctx.tape.sum_all(sq);
            loss = ctx.tape.add(loss, extra)?;
        }
        Ok(loss)
    })
}

fn contract(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(tape.sum_all(out));
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = SeededRng::new(0x5eed);
    let proj = tape.leaf(Tensor::from_fn(&shape, |_| rng.uniform_in(0.5, 1.5)));
    let prod = tape.mul(out, proj)?;
    Ok(tape.sum_all(prod))
}

fn difference<F>(point: &mut [Tensor], t: usize, i: usize, step: f64, base: &[bool], eval: &mut F) -> Result<Option<f64>>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<bool>)>,
{
    let orig = point[t].data()[i];
    let mut h = step;
    let mut quotient = |h: f64, point: &mut [Tensor]| -> Result<Option<f64>> {
        point[t].data_mut()[i] = orig + h;
        let (fp, pp) = eval(point)?;
        point[t].data_mut()[i] = orig - h;
        let (fm, pm) = eval(point)?;
        point[t].data_mut()[i] = orig;
        Ok((pp == base && pm == base).then(|| (fp - fm) / (2.0 * h)))
    };
    for _ in 0..REFINEMENTS {
        if let (Some(coarse), Some(fine)) = (quotient(h, point)?, quotient(h / 2.0, point)?) {
            return Ok(Some((4.0 * fine - coarse) / 3.0));
        }
        h /= 10.0;
    }
    Ok(None)
}
