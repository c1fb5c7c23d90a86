use super::*;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::rng::SeededRng;

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let report = gradcheck::check_fn(inputs, build).unwrap();
    assert!(report.checked() > 0);
    report.max_rel_err()
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[1, 3, 3]));
    let k = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::ones(&[1, 3, 3]));

    // centre tap of a 3x3 kernel with padding 1, per channel
    let mut rng = SeededRng::new(1);
    let input = random(&mut rng, &[2, 5, 4]);
    let kernel = Tensor::from_fn(&[2, 2, 3, 3], |i| {
        let (co, ci, pos) = (i / 18, (i / 9) % 2, i % 9);
        if co == ci && pos == 4 {
            1.0
        } else {
            0.0
        }
    });
    let x = tape.leaf(input.clone());
    let k = tape.leaf(kernel);
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv2d_zero_kernel_gives_zero() {
    let mut rng = SeededRng::new(2);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[3, 6, 6]));
    let k = tape.leaf(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[4, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_direct_sum() {
    // Independent evaluation of one output entry with explicit padding checks.
    let mut rng = SeededRng::new(3);
    let input = random(&mut rng, &[2, 7, 6]);
    let kernel = random(&mut rng, &[3, 2, 3, 3]);
    let mut tape = Tape::new();
    let (x, k) = (tape.leaf(input.clone()), tape.leaf(kernel.clone()));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 3]);
    for co in 0..3 {
        for oy in 0..4 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                s += kernel.at(&[co, ci, ky, kx]) * input.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                assert!((tape.value(y).at(&[co, oy, ox]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(4);
    let inputs = [random(&mut rng, &[2, 5, 5]), random(&mut rng, &[3, 2, 3, 3])];
    let err = fd_check(&inputs, |t, v| t.conv2d(v[0], v[1], 1, 1));
    assert!(err < 1e-4, "{err}");
    let batched = [random(&mut rng, &[2, 2, 6, 5]), random(&mut rng, &[3, 2, 3, 3])];
    let err = fd_check(&batched, |t, v| t.conv2d(v[0], v[1], 2, 1));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv2d_channel_mismatch_names_axis() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3, 4, 4]));
    let k = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
    match tape.conv2d(x, k, 1, 1) {
        Err(Error::Dimension { axis: Some(0), .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item().unwrap(), 0.5);

    let mut rng = SeededRng::new(5);
    let xv = random(&mut rng, &[3, 4]);
    let x = tape.leaf(xv.clone());
    let ones = tape.leaf(Tensor::ones(&[3, 4]));
    let y = tape.mul(x, ones).unwrap();
    assert_eq!(tape.value(y), &xv);

    let bad = tape.leaf(Tensor::ones(&[4, 3]));
    assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(6);
    // keep values away from the kinks at 0
    let away = |rng: &mut SeededRng| {
        Tensor::from_fn(&[4, 5], |_| {
            let m = rng.uniform_in(0.1, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
    };
    let a = away(&mut rng);
    let b = away(&mut rng);
    for op in [UnaryOp::Sigmoid, UnaryOp::Tanh, UnaryOp::Relu, UnaryOp::Abs, UnaryOp::Max0, UnaryOp::Neg] {
        let err = fd_check(&[a.clone()], |t, v| Ok(t.unary(op, v[0])));
        assert!(err < 1e-4, "{op:?}: {err}");
    }
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
        let err = fd_check(&[a.clone(), b.clone()], |t, v| t.binary(op, v[0], v[1]));
        assert!(err < 1e-4, "{op:?}: {err}");
    }
    let err = fd_check(&[a.clone()], |t, v| Ok(t.scale(v[0], -2.5)));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn subgradient_is_zero_at_kinks() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let r = tape.relu(x);
    let a = tape.abs(x);
    let m = tape.max0(x);
    let s1 = tape.add(r, a).unwrap();
    let s2 = tape.add(s1, m).unwrap();
    let root = tape.sum_all(s2);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let e = tape.leaf(Tensor::vector(vec![1.3; 4]));
    let w = tape.softmax(e).unwrap();
    for &v in tape.value(w).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let e = tape.leaf(Tensor::vector(vec![0.0, 3f64.ln()]));
    let w = tape.softmax(e).unwrap();
    let got = tape.value(w).data();
    assert!((got[0] - 0.25).abs() < 1e-12 && (got[1] - 0.75).abs() < 1e-12, "{got:?}");

    let e = tape.leaf(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(tape.softmax(e), Err(Error::Numeric(_))));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = SeededRng::new(7);
    let v = random(&mut rng, &[6]);
    let err = fd_check(&[v], |t, v| t.softmax(v[0]));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let m = tape.mean(x, &[0]).unwrap();
    assert_eq!(tape.value(m).item().unwrap(), 2.0);

    let z = tape.leaf(Tensor::zeros(&[2, 3]));
    let s = tape.sum(z, &[0, 1]).unwrap();
    assert_eq!(tape.value(s).item().unwrap(), 0.0);

    let t = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    let r = tape.sum(t, &[0, 2]).unwrap();
    assert_eq!(tape.value(r).data(), &[60.0, 92.0, 124.0]);
    assert!(matches!(tape.sum(t, &[3]), Err(Error::Dimension { axis: Some(3), .. })));
}

#[test]
fn mean_gradient_is_one_over_count() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[2, 5], |i| i as f64));
    let m = tape.mean(x, &[0, 1]).unwrap();
    tape.backward(m).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| (g - 0.1).abs() < 1e-15));

    let mut rng = SeededRng::new(8);
    let err = fd_check(&[random(&mut rng, &[3, 4, 2])], |t, v| t.mean(v[0], &[1]));
    assert!(err < 1e-4, "{err}");
    let err = fd_check(&[random(&mut rng, &[3, 4, 2])], |t, v| t.sum(v[0], &[0, 2]));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batchnorm_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 3, 3], 4.2));
    let gamma = tape.leaf(Tensor::vector(vec![1.5, -0.5]));
    let beta = tape.leaf(Tensor::vector(vec![0.25, -2.0]));
    let (y, stats) = tape.batchnorm2d(x, gamma, beta, NormMode::Train).unwrap();
    let y = tape.value(y);
    for c in 0..2 {
        for p in 0..9 {
            assert_eq!(y.data()[c * 9 + p], [0.25, -2.0][c]);
        }
    }
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![4.2, 4.2]);

    let mut rng = SeededRng::new(9);
    let input = random(&mut rng, &[2, 3, 3]);
    let x = tape.leaf(input.clone());
    let g = tape.leaf(Tensor::ones(&[2]));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let mode = NormMode::Eval {
        running_mean: &[0.0, 0.0],
        running_var: &[1.0, 1.0],
    };
    let (y, stats) = tape.batchnorm2d(x, g, b, mode).unwrap();
    assert!(stats.is_none());
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for (o, i) in tape.value(y).data().iter().zip(input.data()) {
        assert!((o - i * scale).abs() < 1e-15);
        assert!((o - i).abs() < 1e-5);
    }

    let bad = tape.leaf(Tensor::ones(&[3]));
    assert!(matches!(
        tape.batchnorm2d(x, bad, b, NormMode::Train),
        Err(Error::Dimension { axis: Some(0), .. })
    ));
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(10);
    let inputs = [random(&mut rng, &[3, 4, 4]), random(&mut rng, &[3]), random(&mut rng, &[3])];
    let err = fd_check(&inputs, |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], NormMode::Train)?.0));
    assert!(err < 1e-4, "train: {err}");
    let batched = [random(&mut rng, &[2, 3, 3, 4]), random(&mut rng, &[3]), random(&mut rng, &[3])];
    let err = fd_check(&batched, |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], NormMode::Train)?.0));
    assert!(err < 1e-4, "batched: {err}");
    let err = fd_check(&inputs, |t, v| {
        let mode = NormMode::Eval {
            running_mean: &[0.1, -0.2, 0.3],
            running_var: &[0.5, 1.5, 2.0],
        };
        Ok(t.batchnorm2d(v[0], v[1], v[2], mode)?.0)
    });
    assert!(err < 1e-4, "eval: {err}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
    // repeated calls accumulate
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 12.0);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());

    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.leaf(Tensor::scalar(5.0));
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0, 0.0]);

    assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
}

#[test]
fn shape_ops_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(11);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 2, 4]);
    let err = fd_check(&[a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], 1));
    assert!(err < 1e-4, "concat: {err}");
    let err = fd_check(&[a.clone(), a.clone()], |t, v| t.stack(&[v[0], v[1]]));
    assert!(err < 1e-4, "stack: {err}");
    let err = fd_check(&[a.clone()], |t, v| t.narrow(v[0], 2, 1, 2));
    assert!(err < 1e-4, "narrow: {err}");
    let err = fd_check(&[random(&mut rng, &[2, 1, 3])], |t, v| t.repeat(v[0], 1, 4));
    assert!(err < 1e-4, "repeat: {err}");
    let err = fd_check(&[a.clone()], |t, v| t.reshape(v[0], &[6, 4]));
    assert!(err < 1e-4, "reshape: {err}");
    let err = fd_check(&[random(&mut rng, &[3]), a.clone().reshape(&[3, 8]).unwrap()], |t, v| {
        t.weighted_sum(v[0], v[1])
    });
    assert!(err < 1e-4, "weighted_sum: {err}");
    let err = fd_check(&[random(&mut rng, &[3, 5]), random(&mut rng, &[4, 5])], |t, v| t.linear(v[0], v[1]));
    assert!(err < 1e-4, "linear: {err}");
    let err = fd_check(&[a.clone(), random(&mut rng, &[3])], |t, v| t.add_along(v[0], v[1], 1));
    assert!(err < 1e-4, "add_along: {err}");
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = SeededRng::new(12);
    let logits = random(&mut rng, &[5]);
    let mut tape = Tape::new();
    let l = tape.param(logits.clone());
    let ce = tape.cross_entropy(l, 2).unwrap();
    tape.backward(ce).unwrap();
    let g = tape.grad(l).unwrap();
    let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
    for i in 0..5 {
        let expect = logits.data()[i].exp() / z - if i == 2 { 1.0 } else { 0.0 };
        assert!((g.data()[i] - expect).abs() < 1e-12);
    }
    let err = fd_check(&[logits], |t, v| t.cross_entropy(v[0], 2));
    assert!(err < 1e-4, "{err}");
    assert!(matches!(tape.cross_entropy(l, 5), Err(Error::Usage(_))));
}

#[test]
fn indicator_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.2, 0.5, 0.9]));
    let b = tape.indicator_gt(x, 0.5);
    assert_eq!(tape.value(b).data(), &[0.0, 0.0, 1.0]);
    let y = tape.mul(x, b).unwrap();
    let root = tape.sum_all(y);
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = SeededRng::new(13);
        let mut tape = Tape::new();
        let x = tape.param(random(&mut rng, &[2, 2, 6, 6]));
        let k = tape.param(random(&mut rng, &[3, 2, 3, 3]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let g = tape.param(Tensor::ones(&[3]));
        let b = tape.param(Tensor::zeros(&[3]));
        let (y, _) = tape.batchnorm2d(y, g, b, NormMode::Train).unwrap();
        let y = tape.tanh(y);
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::vector(v.clone()));
            let b = tape.leaf(Tensor::vector(v.iter().map(|x| x + shift).collect()));
            let wa = tape.softmax(a).unwrap();
            let wb = tape.softmax(b).unwrap();
            let (wa, wb) = (tape.value(wa).data(), tape.value(wb).data());
            prop_assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in wa.iter().zip(wb) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn conv_with_centre_tap_kernel_is_identity(
            c in 1usize..3, h in 1usize..6, w in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5]),
            seed in any::<u64>(),
        ) {
            let mut rng = SeededRng::new(seed);
            let input = random(&mut rng, &[c, h, w]);
            let kernel = Tensor::from_fn(&[c, c, k, k], |i| {
                let (co, ci, pos) = (i / (c * k * k), (i / (k * k)) % c, i % (k * k));
                if co == ci && pos == (k * k) / 2 { 1.0 } else { 0.0 }
            });
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let kk = tape.leaf(kernel);
            let y = tape.conv2d(x, kk, 1, (k - 1) / 2).unwrap();
            prop_assert_eq!(tape.value(y), &input);
        }
    }
}
