//! Named parameter storage and the small set of layers the model is built from.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{BatchStats, NormMode, Tape, Tensor, Var};

/// Index of an entry in a [`TensorStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot(usize);

/// Ordered, named tensors. Order is registration order and is what checkpoints use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Slot {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate tensor name {name}");
        self.names.push(name);
        self.tensors.push(value);
        Slot(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: Slot) -> &Tensor {
        &self.tensors[slot.0]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut Tensor {
        &mut self.tensors[slot.0]
    }

    pub fn name(&self, slot: Slot) -> &str {
        &self.names[slot.0]
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.names.iter().position(|n| n == name).map(Slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the value under `name`, which must exist with the same shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
        let current = &self.tensors[slot.0];
        if current.shape() != value.shape() {
            return Err(Error::Config(format!(
                "tensor {name} has shape {:?}, got {:?}",
                current.shape(),
                value.shape()
            )));
        }
        self.tensors[slot.0] = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass: the tape, the parameters bound onto
/// it, and batch-norm statistics gathered in training mode.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: Vec<Var>,
    buffers: &'a TensorStore,
    pub mode: Mode,
    pub bn_updates: Vec<(BatchNorm, BatchStats)>,
}

impl<'a> Ctx<'a> {
    /// Registers every parameter as a gradient-tracking leaf on a fresh tape.
    pub fn new(params: &TensorStore, buffers: &'a TensorStore, mode: Mode) -> Self {
        let mut tape = Tape::new();
        let params = params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        Self {
            tape,
            params,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, slot: Slot) -> Var {
        self.params[slot.0]
    }

    /// Parameter leaves in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Gradients of every parameter after [`Tape::backward`], in store order.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&v| {
                self.tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)))
            })
            .collect()
    }
}

fn kaiming(rng: &mut SeededRng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// Square-kernel convolution with optional per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Slot,
    pub bias: Option<Slot>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut TensorStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            kaiming(rng, &[c_out, c_in, k, k], c_in * k * k, gain),
        );
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = ctx.tape.conv2d(x, ctx.var(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let axis = ctx.tape.shape(y).len() - 3;
                ctx.tape.add_along(y, ctx.var(b), axis)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over `[C,H,W]` or `[N,C,H,W]`, momentum 0.1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: Slot,
    pub beta: Slot,
    pub running_mean: Slot,
    pub running_var: Slot,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(params: &mut TensorStore, buffers: &mut TensorStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.insert(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: params.insert(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.insert(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batchnorm2d(x, gamma, beta, NormMode::Train)?;
                ctx.bn_updates.push((*self, stats.expect("train mode yields stats")));
                Ok(y)
            }
            Mode::Eval => {
                let buffers = ctx.buffers;
                let mode = NormMode::Eval {
                    running_mean: buffers.get(self.running_mean).data(),
                    running_var: buffers.get(self.running_var).data(),
                };
                Ok(ctx.tape.batchnorm2d(x, gamma, beta, mode)?.0)
            }
        }
    }

    /// `running <- (1 - momentum) running + momentum batch`.
    pub fn update_running(&self, buffers: &mut TensorStore, stats: &BatchStats) {
        let blend = |t: &mut Tensor, batch: &[f64]| {
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        };
        blend(buffers.get_mut(self.running_mean), &stats.mean);
        blend(buffers.get_mut(self.running_var), &stats.var);
    }
}

/// Affine map `x W^T + b` on `[k]` or `[rows,k]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(store: &mut TensorStore, name: &str, k: usize, m: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        Self {
            weight: store.insert(
                format!("{name}.weight"),
                Tensor::from_fn(&[m, k], |_| rng.uniform_in(-bound, bound)),
            ),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[m])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = ctx.tape.linear(x, ctx.var(self.weight))?;
        let axis = ctx.tape.shape(y).len() - 1;
        ctx.tape.add_along(y, ctx.var(self.bias), axis)
    }
}

/// Applies collected batch statistics to the running averages, in call order.
pub fn apply_bn_updates(buffers: &mut TensorStore, updates: &[(BatchNorm, BatchStats)]) {
    for (bn, stats) in updates {
        bn.update_running(buffers, stats);
    }
}
