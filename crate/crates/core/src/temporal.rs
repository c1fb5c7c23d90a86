//! Temporal attention: per-step frame energies, softmax weights, weighted frame
//! aggregation, and the convolutional LSTM the aggregate feeds.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Linear, TensorStore};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

/// Scores frames for one step as `phi_h(H)[i] + phi_x(X_i)`.
///
/// Each branch is a 3x3 convolution, ReLU, spatial mean and an affine map:
/// `phi_h` to one score per frame, `phi_x` to a single score per frame.
#[derive(Clone, Debug)]
pub struct EnergyNetworks {
    pub h_conv: Conv,
    pub h_fc: Linear,
    pub x_conv: Conv,
    pub x_fc: Linear,
    pub n_frames: usize,
}

impl EnergyNetworks {
    pub fn new(
        params: &mut TensorStore,
        name: &str,
        hidden: usize,
        in_channels: usize,
        width: usize,
        n_frames: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let gain = 2f64.sqrt();
        Self {
            h_conv: Conv::new(params, &format!("{name}.h_conv"), hidden, width, 3, 1, 1, true, gain, rng),
            h_fc: Linear::new(params, &format!("{name}.h_fc"), width, n_frames, rng),
            x_conv: Conv::new(params, &format!("{name}.x_conv"), in_channels, width, 3, 1, 1, true, gain, rng),
            x_fc: Linear::new(params, &format!("{name}.x_fc"), width, 1, rng),
            n_frames,
        }
    }

    /// `phi_h(H)`: one score per frame from a `[C_h,H,W]` hidden state.
    pub fn hidden_scores(&self, ctx: &mut Ctx<'_>, hidden: Var) -> Result<Var> {
        let h = self.h_conv.forward(ctx, hidden)?;
        let h = ctx.tape.relu(h);
        let pooled = ctx.tape.mean(h, &[1, 2])?;
        self.h_fc.forward(ctx, pooled)
    }

    /// `phi_x(X_i)` for every frame of `[n,C,H,W]` features, as an `[n]` vector.
    pub fn frame_scores(&self, ctx: &mut Ctx<'_>, frames: Var) -> Result<Var> {
        let n = ctx.tape.shape(frames)[0];
        let h = self.x_conv.forward(ctx, frames)?;
        let h = ctx.tape.relu(h);
        let pooled = ctx.tape.mean(h, &[2, 3])?;
        let scores = self.x_fc.forward(ctx, pooled)?;
        ctx.tape.reshape(scores, &[n])
    }

    /// Energies of all frames at one step.
    pub fn energies(&self, ctx: &mut Ctx<'_>, hidden: Var, frames: Var) -> Result<Var> {
        let fs = ctx.tape.shape(frames);
        if fs.len() != 4 || fs[0] != self.n_frames {
            return Err(Error::dim(
                "energies",
                Some(0),
                format!("expected {} frames of [C,H,W], got {fs:?}", self.n_frames),
            ));
        }
        let h = self.hidden_scores(ctx, hidden)?;
        let x = self.frame_scores(ctx, frames)?;
        ctx.tape.add(h, x)
    }
}

/// Softmax over frame energies.
pub fn attention_weights(tape: &mut Tape, energies: Var) -> Result<Var> {
    tape.softmax(energies)
}

/// `sum_i w[i] X_i`, scaled by `1/n` when `prefactor` is set.
pub fn aggregate(tape: &mut Tape, weights: Var, frames: Var, prefactor: bool) -> Result<Var> {
    let n = tape.shape(frames)[0];
    let y = tape.weighted_sum(weights, frames)?;
    Ok(if prefactor { tape.scale(y, 1.0 / n as f64) } else { y })
}

/// Hidden and cell tensors, both `[C_h,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Convolutional LSTM without peepholes. Every gate sees `[Y_t, H_{t-1}]`
/// stacked along channels.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub input: Conv,
    pub forget: Conv,
    pub output: Conv,
    pub candidate: Conv,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new(params: &mut TensorStore, name: &str, in_channels: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut gate = |g: &str| Conv::new(params, &format!("{name}.{g}"), in_channels + hidden, hidden, 3, 1, 1, true, 1.0, rng);
        Self {
            input: gate("input"),
            forget: gate("forget"),
            output: gate("output"),
            candidate: gate("candidate"),
            hidden,
        }
    }

    pub fn step(&self, ctx: &mut Ctx<'_>, y: Var, state: LstmState) -> Result<LstmState> {
        let z = ctx.tape.concat(&[y, state.h], 0)?;
        let i = self.input.forward(ctx, z)?;
        let i = ctx.tape.sigmoid(i);
        let f = self.forget.forward(ctx, z)?;
        let f = ctx.tape.sigmoid(f);
        let o = self.output.forward(ctx, z)?;
        let o = ctx.tape.sigmoid(o);
        let g = self.candidate.forward(ctx, z)?;
        let g = ctx.tape.tanh(g);

        let keep = ctx.tape.mul(f, state.c)?;
        let write = ctx.tape.mul(i, g)?;
        let c = ctx.tape.add(keep, write)?;
        let squashed = ctx.tape.tanh(c);
        let h = ctx.tape.mul(o, squashed)?;
        Ok(LstmState { h, c })
    }
}

/// Two 3x3 convolutions with batch norm, ReLU between them, mapping the mean
/// attended frame to an initial LSTM tensor.
#[derive(Clone, Debug)]
pub struct InitNetwork {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl InitNetwork {
    pub fn new(
        params: &mut TensorStore,
        buffers: &mut TensorStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let gain = 2f64.sqrt();
        Self {
            conv1: Conv::new(params, &format!("{name}.conv1"), in_channels, hidden, 3, 1, 1, false, gain, rng),
            bn1: BatchNorm::new(params, buffers, &format!("{name}.bn1"), hidden),
            conv2: Conv::new(params, &format!("{name}.conv2"), hidden, hidden, 3, 1, 1, false, 1.0, rng),
            bn2: BatchNorm::new(params, buffers, &format!("{name}.bn2"), hidden),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        self.bn2.forward(ctx, h)
    }
}

/// Initial state from the mean over the frames of `[n,C,H,W]` features.
pub fn init_states(ctx: &mut Ctx<'_>, g_c: &InitNetwork, g_h: &InitNetwork, frames: Var) -> Result<LstmState> {
    let mean = ctx.tape.mean(frames, &[0])?;
    let c = g_c.forward(ctx, mean)?;
    let h = g_h.forward(ctx, mean)?;
    Ok(LstmState { h, c })
}

/// Writes an attention matrix as `t,i,w` rows (1-based indices, 17 significant digits).
pub fn write_weights_csv(path: &Path, weights: &Tensor) -> Result<()> {
    let [steps, frames] = weights.shape() else {
        return Err(Error::dim("write_weights_csv", None, format!("expected a matrix, got {:?}", weights.shape())));
    };
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["t", "i", "w"])?;
    for t in 0..*steps {
        for i in 0..*frames {
            let w = weights.data()[t * frames + i];
            out.write_record([(t + 1).to_string(), (i + 1).to_string(), format!("{w:.16e}")])?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a matrix written by [`write_weights_csv`].
pub fn read_weights_csv(path: &Path) -> Result<Tensor> {
    let mut rows = Vec::new();
    for record in csv::Reader::from_path(path)?.deserialize() {
        let (t, i, w): (usize, usize, f64) = record?;
        rows.push((t, i, w));
    }
    let steps = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let frames = rows.iter().map(|r| r.1).max().unwrap_or(0);
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if rows.len() != steps * frames || steps == 0 {
        return Err(bad(format!("{} rows do not fill a {steps}x{frames} matrix", rows.len())));
    }
    let mut data = vec![f64::NAN; steps * frames];
    for (t, i, w) in rows {
        if t == 0 || i == 0 {
            return Err(bad("indices are 1-based".into()));
        }
        data[(t - 1) * frames + i - 1] = w;
    }
    if data.iter().any(|w| w.is_nan()) {
        return Err(bad("missing entries".into()));
    }
    Tensor::new(vec![steps, frames], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::Mode;

    fn zero_all(params: &mut TensorStore) {
        for t in params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }

    #[test]
    fn zero_energy_networks_give_zero_energies() {
        let mut rng = SeededRng::new(1);
        let mut params = TensorStore::new();
        let nets = EnergyNetworks::new(&mut params, "e", 3, 2, 4, 5, &mut rng);
        zero_all(&mut params);
        let buffers = TensorStore::new();
        let mut ctx = Ctx::new(&params, &buffers, Mode::Eval);
        let h = ctx.tape.leaf(Tensor::from_fn(&[3, 4, 4], |_| rng.normal()));
        let x = ctx.tape.leaf(Tensor::from_fn(&[5, 2, 4, 4], |_| rng.normal()));
        let e = nets.energies(&mut ctx, h, x).unwrap();
        assert_eq!(ctx.tape.value(e), &Tensor::zeros(&[5]));
    }

    #[test]
    fn identical_frames_without_hidden_path_score_equally() {
        let mut rng = SeededRng::new(2);
        let mut params = TensorStore::new();
        let nets = EnergyNetworks::new(&mut params, "e", 3, 2, 4, 5, &mut rng);
        for slot in [nets.h_conv.weight, nets.h_fc.weight, nets.h_fc.bias] {
            let shape = params.get(slot).shape().to_vec();
            *params.get_mut(slot) = Tensor::zeros(&shape);
        }
        let buffers = TensorStore::new();
        let mut ctx = Ctx::new(&params, &buffers, Mode::Eval);
        let frame = Tensor::from_fn(&[2, 4, 4], |_| rng.normal());
        let frames: Vec<f64> = (0..5).flat_map(|_| frame.data().to_vec()).collect();
        let x = ctx.tape.leaf(Tensor::new(vec![5, 2, 4, 4], frames).unwrap());
        let h = ctx.tape.leaf(Tensor::from_fn(&[3, 4, 4], |_| rng.normal()));
        let e = nets.energies(&mut ctx, h, x).unwrap();
        let e = ctx.tape.value(e).data().to_vec();
        assert!(e.iter().all(|&v| v == e[0]));
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3);
        let mut params = TensorStore::new();
        let nets = EnergyNetworks::new(&mut params, "e", 3, 2, 4, 5, &mut rng);
        let h = params.insert("hidden", Tensor::from_fn(&[3, 4, 4], |_| rng.normal()));
        let x = params.insert("frames", Tensor::from_fn(&[5, 2, 4, 4], |_| rng.normal()));
        let buffers = TensorStore::new();
        let report = gradcheck::check_params(&params, &buffers, Mode::Train, |ctx| {
            let (hv, xv) = (ctx.var(h), ctx.var(x));
            nets.energies(ctx, hv, xv)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_weight_examples() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::zeros(&[5]));
        let w = attention_weights(&mut tape, e).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let e = tape.leaf(Tensor::vector(vec![0.0, 3f64.ln()]));
        let w = attention_weights(&mut tape, e).unwrap();
        let w = tape.value(w).data();
        assert!((w[0] - 0.25).abs() < 1e-9 && (w[1] - 0.75).abs() < 1e-9);

        let base = Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]);
        let e = tape.leaf(base.clone());
        let shifted = tape.leaf(base.map(|v| v + 7.0));
        let (a, b) = (attention_weights(&mut tape, e).unwrap(), attention_weights(&mut tape, shifted).unwrap());
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut tape = Tape::new();
        let frame = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let frames: Vec<f64> = (0..4).flat_map(|_| frame.data().to_vec()).collect();
        let x = tape.leaf(Tensor::new(vec![4, 2, 3, 3], frames).unwrap());
        let w = tape.leaf(Tensor::full(&[4], 0.25));
        let y = aggregate(&mut tape, w, x, true).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(frame.data()) {
            assert!((a - b / 4.0).abs() < 1e-15);
        }
        let y = aggregate(&mut tape, w, x, false).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(frame.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        let one = tape.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
        let w1 = tape.leaf(Tensor::vector(vec![1.0]));
        let y = aggregate(&mut tape, w1, one, true).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(one).data());

        let two: Vec<f64> = [2.0; 4].iter().chain(&[4.0; 4]).cloned().collect();
        let x = tape.leaf(Tensor::new(vec![2, 1, 2, 2], two).unwrap());
        let w = tape.leaf(Tensor::vector(vec![0.25, 0.75]));
        let y = aggregate(&mut tape, w, x, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));

        let bad = tape.leaf(Tensor::vector(vec![0.5; 3]));
        assert!(matches!(aggregate(&mut tape, bad, x, true), Err(Error::Dimension { .. })));
    }

    fn cell(rng: &mut SeededRng) -> (TensorStore, ConvLstmCell) {
        let mut params = TensorStore::new();
        let cell = ConvLstmCell::new(&mut params, "lstm", 2, 3, rng);
        (params, cell)
    }

    #[test]
    fn zero_cell_keeps_zero_state() {
        let mut rng = SeededRng::new(4);
        let (mut params, cell) = cell(&mut rng);
        zero_all(&mut params);
        let buffers = TensorStore::new();
        let mut ctx = Ctx::new(&params, &buffers, Mode::Eval);
        let y = ctx.tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let h = ctx.tape.leaf(Tensor::zeros(&[3, 4, 4]));
        let c = ctx.tape.leaf(Tensor::zeros(&[3, 4, 4]));
        let next = cell.step(&mut ctx, y, LstmState { h, c }).unwrap();
        assert_eq!(ctx.tape.value(next.h), &Tensor::zeros(&[3, 4, 4]));
        assert_eq!(ctx.tape.value(next.c), &Tensor::zeros(&[3, 4, 4]));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut rng = SeededRng::new(5);
        let (mut params, cell) = cell(&mut rng);
        *params.get_mut(cell.forget.bias.unwrap()) = Tensor::full(&[3], 20.0);
        *params.get_mut(cell.input.bias.unwrap()) = Tensor::full(&[3], -20.0);
        for slot in [cell.forget.weight, cell.input.weight] {
            let shape = params.get(slot).shape().to_vec();
            *params.get_mut(slot) = Tensor::zeros(&shape);
        }
        let buffers = TensorStore::new();
        let mut ctx = Ctx::new(&params, &buffers, Mode::Eval);
        let y = ctx.tape.leaf(Tensor::from_fn(&[2, 4, 4], |_| rng.normal()));
        let h = ctx.tape.leaf(Tensor::from_fn(&[3, 4, 4], |_| rng.normal()));
        let c0 = Tensor::from_fn(&[3, 4, 4], |_| rng.normal());
        let c = ctx.tape.leaf(c0.clone());
        let next = cell.step(&mut ctx, y, LstmState { h, c }).unwrap();
        for (a, b) in ctx.tape.value(next.c).data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unrolled_cell_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(6);
        let (mut params, cell) = cell(&mut rng);
        let ys = params.insert("inputs", Tensor::from_fn(&[3, 2, 4, 4], |_| rng.normal()));
        let h0 = params.insert("h0", Tensor::from_fn(&[3, 4, 4], |_| rng.normal()));
        let c0 = params.insert("c0", Tensor::from_fn(&[3, 4, 4], |_| rng.normal()));
        let buffers = TensorStore::new();
        let report = gradcheck::check_params(&params, &buffers, Mode::Train, |ctx| {
            let mut state = LstmState {
                h: ctx.var(h0),
                c: ctx.var(c0),
            };
            let inputs = ctx.var(ys);
            for t in 0..3 {
                let y = ctx.tape.narrow(inputs, 0, t, 1)?;
                let y = ctx.tape.reshape(y, &[2, 4, 4])?;
                state = cell.step(ctx, y, state)?;
            }
            ctx.tape.concat(&[state.h, state.c], 0)
        })
        .unwrap();
        assert_eq!(report.groups.len(), 11);
        assert!(report.max_rel_err() < 1e-3, "{report:?}");
    }

    fn init_nets(rng: &mut SeededRng) -> (TensorStore, TensorStore, InitNetwork, InitNetwork) {
        let (mut params, mut buffers) = (TensorStore::new(), TensorStore::new());
        let g_c = InitNetwork::new(&mut params, &mut buffers, "g_c", 2, 3, rng);
        let g_h = InitNetwork::new(&mut params, &mut buffers, "g_h", 2, 3, rng);
        (params, buffers, g_c, g_h)
    }

    #[test]
    fn init_state_of_identical_frames_matches_single_frame() {
        let mut rng = SeededRng::new(7);
        let (params, buffers, g_c, g_h) = init_nets(&mut rng);
        let frame = Tensor::from_fn(&[2, 5, 5], |_| rng.normal());
        let run = |frames: Tensor| {
            let mut ctx = Ctx::new(&params, &buffers, Mode::Train);
            let x = ctx.tape.leaf(frames);
            let s = init_states(&mut ctx, &g_c, &g_h, x).unwrap();
            (ctx.tape.value(s.h).clone(), ctx.tape.value(s.c).clone())
        };
        let many: Vec<f64> = (0..3).flat_map(|_| frame.data().to_vec()).collect();
        let (h3, c3) = run(Tensor::new(vec![3, 2, 5, 5], many).unwrap());
        let (h1, c1) = run(frame.reshape(&[1, 2, 5, 5]).unwrap());
        for (a, b) in h3.data().iter().zip(h1.data()).chain(c3.data().iter().zip(c1.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_init_networks_give_zero_state() {
        let mut rng = SeededRng::new(8);
        let (mut params, buffers, g_c, g_h) = init_nets(&mut rng);
        zero_all(&mut params);
        let mut ctx = Ctx::new(&params, &buffers, Mode::Train);
        let x = ctx.tape.leaf(Tensor::from_fn(&[3, 2, 5, 5], |_| rng.normal()));
        let s = init_states(&mut ctx, &g_c, &g_h, x).unwrap();
        assert_eq!(ctx.tape.value(s.h), &Tensor::zeros(&[3, 5, 5]));
        assert_eq!(ctx.tape.value(s.c), &Tensor::zeros(&[3, 5, 5]));
    }

    #[test]
    fn init_state_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(9);
        let (mut params, buffers, g_c, g_h) = init_nets(&mut rng);
        let x = params.insert("frames", Tensor::from_fn(&[3, 2, 5, 5], |_| rng.normal()));
        let report = gradcheck::check_params(&params, &buffers, Mode::Train, |ctx| {
            let xv = ctx.var(x);
            let s = init_states(ctx, &g_c, &g_h, xv)?;
            ctx.tape.concat(&[s.h, s.c], 0)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn weights_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let w = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.7, 1.0 / 3.0, 1e-17, 2.0 / 3.0]).unwrap();
        write_weights_csv(&path, &w).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,i,w\n1,1,1.0000000000000001e-1\n"));
        assert_eq!(read_weights_csv(&path).unwrap(), w);
    }
}
