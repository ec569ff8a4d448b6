use rand::{Rng, SeedableRng};

use super::gradcheck::{check_gradients, GradCheckConfig};
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Direct summation oracle for a single-image valid/same cross-correlation.
fn conv_oracle(x: &Tensor, k: &Tensor, pad: usize) -> Tensor {
    let [c_in, h, w] = x.shape()[..] else {
        panic!()
    };
    let [c_out, _, kh, kw] = k.shape()[..] else {
        panic!()
    };
    let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let mut out = Tensor::zeros([c_out, ho, wo]);
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for u in 0..kh {
                        for v in 0..kw {
                            let iy = (oy + u) as isize - pad as isize;
                            let ix = (ox + v) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc +=
                                    x.get(&[ci, iy as usize, ix as usize]) * k.get(&[co, ci, u, v]);
                            }
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

fn conv_value(x: &Tensor, k: &Tensor, padding: Padding) -> Tensor {
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv2d(xv, kv, None, padding).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(1);
    let x = random(&[1, 4, 6], &mut r);
    let y = conv_value(&x, &t(&[1, 1, 1, 1], &[1.0]), Padding::Valid);
    assert_eq!(y, x);
}

#[test]
fn conv_sum_kernel() {
    let y = conv_value(
        &t(&[1, 2, 2], &[1., 2., 3., 4.]),
        &Tensor::full([1, 1, 2, 2], 1.0),
        Padding::Valid,
    );
    assert_eq!(y, t(&[1, 1, 1], &[10.0]));
}

#[test]
fn conv_matches_direct_summation() {
    let mut r = rng(2);
    let x = random(&[1, 5, 5], &mut r);
    let k = random(&[1, 1, 3, 3], &mut r);
    let y = conv_value(&x, &k, Padding::Valid);
    assert!(y.max_abs_diff(&conv_oracle(&x, &k, 0)) < 1e-12);

    // Multi-channel, same padding.
    let x = random(&[3, 6, 7], &mut r);
    let k = random(&[4, 3, 3, 3], &mut r);
    let y = conv_value(&x, &k, Padding::Same);
    assert!(y.max_abs_diff(&conv_oracle(&x, &k, 1)) < 1e-12);
}

#[test]
fn conv_is_exact_on_integers() {
    let mut r = rng(3);
    let x = Tensor::from_fn([2, 6, 6], |_| r.random_range(-5..=5) as f64);
    let k = Tensor::from_fn([3, 2, 3, 3], |_| r.random_range(-3..=3) as f64);
    for (padding, pad) in [(Padding::Valid, 0), (Padding::Same, 1)] {
        assert_eq!(conv_value(&x, &k, padding), conv_oracle(&x, &k, pad));
    }
}

#[test]
fn conv_batched_equals_per_image() {
    let mut r = rng(4);
    let x = random(&[3, 2, 5, 5], &mut r);
    let k = random(&[2, 2, 3, 3], &mut r);
    let y = conv_value(&x, &k, Padding::Same);
    for b in 0..3 {
        let xi = Tensor::new([2, 5, 5], x.data()[b * 50..(b + 1) * 50].to_vec()).unwrap();
        let yi = conv_oracle(&xi, &k, 1);
        let got = &y.data()[b * 50..(b + 1) * 50];
        for (a, e) in got.iter().zip(yi.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([2, 4, 4]));
    let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, k, None, Padding::Valid),
        Err(Error::Dimension(_))
    ));
}

fn pool_value(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.maxpool2d(xv).unwrap();
    tape.value(y).clone()
}

#[test]
fn maxpool_examples() {
    assert_eq!(
        pool_value(&t(&[1, 2, 2], &[1., 2., 3., 4.])),
        t(&[1, 1, 1], &[4.0])
    );
    assert_eq!(
        pool_value(&Tensor::full([2, 4, 4], 0.7)),
        Tensor::full([2, 2, 2], 0.7)
    );
}

#[test]
fn maxpool_matches_window_enumeration() {
    let mut r = rng(5);
    let x = random(&[1, 8, 8], &mut r);
    let y = pool_value(&x);
    for oy in 0..4 {
        for ox in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    best = best.max(x.get(&[0, 2 * oy + dy, 2 * ox + dx]));
                }
            }
            assert_eq!(y.get(&[0, oy, ox]), best);
        }
    }
}

#[test]
fn maxpool_backward_routes_to_one_cell_with_first_index_ties() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full([1, 4, 4], 1.0));
    let y = tape.maxpool2d(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap();
    for oy in 0..2 {
        for ox in 0..2 {
            let mut window = Vec::new();
            for dy in 0..2 {
                for dx in 0..2 {
                    window.push(gx.get(&[0, 2 * oy + dy, 2 * ox + dx]));
                }
            }
            assert_eq!(window, vec![1.0, 0.0, 0.0, 0.0]);
        }
    }
}

#[test]
fn maxpool_rejects_odd_extents() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 5, 4]));
    assert!(matches!(tape.maxpool2d(x), Err(Error::Dimension(_))));
}

#[test]
fn leaky_relu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[1.0, -1.0, 0.0]));
    let y = tape.leaky_relu(x, 0.1);
    assert_eq!(tape.value(y).data(), &[1.0, -0.1, 0.0]);
}

fn bn_train(x: &Tensor, gamma: f64, beta: f64) -> Tensor {
    let c = x.shape()[1];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full([c], gamma));
    let b = tape.constant(Tensor::full([c], beta));
    let (y, _) = tape
        .batchnorm(xv, g, b, BatchNormMode::Train, 1e-5)
        .unwrap();
    tape.value(y).clone()
}

#[test]
fn batchnorm_on_normalized_batch_is_near_identity() {
    // Per channel: values ±1 → mean 0, variance 1.
    let x = t(&[2, 2, 2], &[1., -1., 1., -1., -1., 1., -1., 1.]);
    let y = bn_train(&x, 1.0, 0.0);
    let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * expected).abs() < 1e-15);
    }
    assert!(y.max_abs_diff(&x) < 1e-5);
}

#[test]
fn batchnorm_constant_batch_yields_shift() {
    let y = bn_train(&Tensor::full([4, 3, 2, 2], 2.5), 1.7, 0.3);
    assert!(y.data().iter().all(|&v| v == 0.3));
}

#[test]
fn batchnorm_statistics_recomputed_independently() {
    let mut r = rng(6);
    let x = Tensor::from_fn([5, 3, 4, 4], |_| r.random_range(-10.0..30.0));
    let y = bn_train(&x, 1.0, 0.0);
    for c in 0..3 {
        let vals: Vec<f64> = (0..5)
            .flat_map(|b| (0..16).map(move |i| (b, i)))
            .map(|(b, i)| y.data()[(b * 3 + c) * 16 + i])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batchnorm_train_rejects_single_sample() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 3]));
    let g = tape.constant(Tensor::zeros([2]));
    let b = tape.constant(Tensor::zeros([2]));
    assert!(matches!(
        tape.batchnorm(x, g, b, BatchNormMode::Train, 1e-5),
        Err(Error::Config(_))
    ));
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[3.0, 5.0]));
    let g = tape.constant(t(&[2], &[2.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.5, 0.0]));
    let (y, stats) = tape
        .batchnorm(
            x,
            g,
            b,
            BatchNormMode::Eval {
                mean: &[1.0, 5.0],
                var: &[4.0, 1.0],
            },
            0.0,
        )
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(tape.value(y).data(), &[2.0 * (2.0 / 2.0) + 0.5, 0.0]);
}

fn dropout_value(x: &Tensor, rate: f64, mode: Mode, seed: u64) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.dropout(xv, rate, mode, &mut rng(seed)).unwrap();
    tape.value(y).clone()
}

#[test]
fn dropout_identity_cases() {
    let x = random(&[10, 10], &mut rng(7));
    assert_eq!(dropout_value(&x, 0.0, Mode::Train, 1), x);
    assert_eq!(dropout_value(&x, 0.5, Mode::Eval, 1), x);
}

#[test]
fn dropout_preserves_expectation() {
    let y = dropout_value(&Tensor::full([1_000_000], 1.0), 0.5, Mode::Train, 8);
    let mean = y.sum() / y.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_rejects_rate_one() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([3]));
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng(0)).is_err());
}

fn dense_value(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.dense(xv, wv, bv).unwrap();
    tape.value(y).clone()
}

#[test]
fn dense_examples() {
    let mut r = rng(9);
    let x = random(&[2, 3], &mut r);
    let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    assert_eq!(dense_value(&x, &eye, &Tensor::zeros([3])), x);

    let b = t(&[2], &[0.5, -2.0]);
    assert_eq!(
        dense_value(&x, &Tensor::zeros([2, 3]), &b),
        t(&[2, 2], &[0.5, -2.0, 0.5, -2.0])
    );

    let w = random(&[4, 3], &mut r);
    let bias = random(&[4], &mut r);
    let y = dense_value(&x, &w, &bias);
    for row in 0..2 {
        for o in 0..4 {
            let mut acc = bias.data()[o];
            for i in 0..3 {
                acc += x.get(&[row, i]) * w.get(&[o, i]);
            }
            assert!((y.get(&[row, o]) - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn dense_shape_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([2, 3]));
    let w = tape.constant(Tensor::zeros([4, 2]));
    let b = tape.constant(Tensor::zeros([4]));
    assert!(matches!(tape.dense(x, w, b), Err(Error::Dimension(_))));
}

fn softmax_value(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.softmax(xv);
    tape.value(y).clone()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_value(&t(&[2], &[0.0, 0.0])).data(), &[0.5, 0.5]);
    let y = softmax_value(&t(&[2], &[2f64.ln(), 0.0]));
    assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(softmax_value(&t(&[1], &[-4.0])).data(), &[1.0]);
}

#[test]
fn softmax_rows_normalized_and_shift_invariant() {
    let mut r = rng(10);
    for _ in 0..50 {
        let k = r.random_range(1..12);
        let x = Tensor::from_fn([3, k], |_| r.random_range(-30.0..30.0));
        let c = r.random_range(-100.0..100.0);
        let y = softmax_value(&x);
        let ys = softmax_value(&x.map(|v| v + c));
        for row in y.data().chunks(k) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(y.max_abs_diff(&ys) < 1e-12);
    }
}

fn mse_value(a: &Tensor, b: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = tape.mse(av, bv).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn mse_examples() {
    let mut r = rng(11);
    let a = random(&[3, 4], &mut r);
    assert_eq!(mse_value(&a, &a), 0.0);
    assert_eq!(mse_value(&t(&[1], &[1.0]), &t(&[1], &[0.0])), 1.0);
    let b = random(&[3, 4], &mut r);
    // two-pass: differences first, then squares
    let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let oracle = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
    assert!((mse_value(&a, &b) - oracle).abs() < 1e-15);

    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(Tensor::zeros([4, 3])));
    assert!(matches!(tape.mse(av, bv), Err(Error::Dimension(_))));
}

#[test]
fn clip_examples() {
    let mut x = t(&[3], &[1.5, -0.2, 0.3]);
    clip_values(&mut x, 0.0, 1.0);
    assert_eq!(x.data(), &[1.0, 0.0, 0.3]);

    let mut tape = Tape::new();
    let v = tape.param(t(&[3], &[1.5, -0.2, 0.3]));
    let c = tape.clamp(v, 0.0, 1.0);
    assert_eq!(tape.value(c).data(), &[1.0, 0.0, 0.3]);
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full([2, 3, 2], 0.4));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    let l = tape.mse(x, zero).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.param(Tensor::full([2], 1.0));
    let unused = tape.param(Tensor::full([3], 1.0));
    let s = tape.sum(used);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros([3]));
}

#[test]
fn backward_twice_is_usage_error_until_reset() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
    tape.reset();
    let x = tape.param(Tensor::scalar(1.0));
    let s = tape.sum(x);
    assert!(tape.backward(s).is_ok());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn determinism_of_forward_and_backward() {
    let run = || {
        let mut r = rng(12);
        let mut tape = Tape::new();
        let x = tape.param(random(&[2, 2, 6, 6], &mut r));
        let k = tape.param(random(&[3, 2, 3, 3], &mut r));
        let y = tape.conv2d(x, k, None, Padding::Same).unwrap();
        let y = tape.dropout(y, 0.25, Mode::Train, &mut r).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        (g.get(x).unwrap().to_bytes(), g.get(k).unwrap().to_bytes())
    };
    assert_eq!(run(), run());
}

// ---- finite-difference checks, one per differentiable operation ----

const TOL: f64 = 1e-4;

/// Loss = Σ w ⊙ f(x) with fixed random weights, giving O(1) gradients.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let shape = tape.value(y).shape().to_vec();
    let mut r = rng(seed);
    let w = tape.constant(Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_grad(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var, Error>) {
    let report = check_gradients(inputs, build, GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn gradcheck_conv2d() {
    let mut r = rng(20);
    let inputs = [
        random(&[2, 2, 4, 4], &mut r),
        random(&[2, 2, 3, 3], &mut r),
        random(&[2], &mut r),
    ];
    for padding in [Padding::Valid, Padding::Same] {
        assert_grad(&inputs, |tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), padding)?;
            weighted(tp, y, 1)
        });
    }
}

#[test]
fn gradcheck_maxpool_and_leaky_relu() {
    let mut r = rng(21);
    let inputs = [random(&[2, 1, 4, 4], &mut r)];
    assert_grad(&inputs, |tp, v| {
        let y = tp.maxpool2d(v[0])?;
        weighted(tp, y, 2)
    });
    assert_grad(&inputs, |tp, v| {
        let y = tp.leaky_relu(v[0], 0.1);
        weighted(tp, y, 3)
    });
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    let mut r = rng(22);
    let inputs = [
        random(&[4, 2, 3, 2], &mut r),
        random(&[2], &mut r),
        random(&[2], &mut r),
    ];
    assert_grad(&inputs, |tp, v| {
        let (y, _) = tp.batchnorm(v[0], v[1], v[2], BatchNormMode::Train, 1e-5)?;
        weighted(tp, y, 4)
    });
    assert_grad(&inputs, |tp, v| {
        let mode = BatchNormMode::Eval {
            mean: &[0.1, -0.2],
            var: &[0.5, 2.0],
        };
        let (y, _) = tp.batchnorm(v[0], v[1], v[2], mode, 1e-5)?;
        weighted(tp, y, 5)
    });
}

#[test]
fn gradcheck_dropout_dense_softmax() {
    let mut r = rng(23);
    let inputs = [
        random(&[3, 4], &mut r),
        random(&[5, 4], &mut r),
        random(&[5], &mut r),
    ];
    assert_grad(&inputs, |tp, v| {
        let y = tp.dropout(v[0], 0.25, Mode::Train, &mut rng(99))?;
        let y = tp.dense(y, v[1], v[2])?;
        let y = tp.softmax(y);
        weighted(tp, y, 6)
    });
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut r = rng(24);
    let inputs = [random(&[2, 3], &mut r), random(&[2, 3], &mut r)];
    assert_grad(&inputs, |tp, v| {
        let s = tp.add(v[0], v[1])?;
        let m = tp.mul(s, v[1])?;
        let c = tp.scale(m, 1.7);
        let c = tp.add_const(c, &Tensor::full([2, 3], 0.3))?;
        let c = tp.reshape(c, [6])?;
        weighted(tp, c, 7)
    });
    assert_grad(&inputs, |tp, v| tp.mse(v[0], v[1]));
    assert_grad(
        &[Tensor::from_fn([8], |i| 0.1 + 0.1 * i as f64)],
        |tp, v| {
            let c = tp.clamp(v[0], 0.15, 0.62);
            weighted(tp, c, 8)
        },
    );
}

#[test]
fn gradcheck_outer3_and_stamp() {
    let mut r = rng(25);
    let inputs = [
        random(&[2, 3], &mut r),
        random(&[2, 4], &mut r),
        random(&[2, 2], &mut r),
        random(&[2, 1, 3, 2], &mut r),
    ];
    assert_grad(&inputs, |tp, v| {
        let sl = tp.outer3(v[0], v[1], v[2])?;
        let o = tp.stamp(sl, v[3])?;
        weighted(tp, o, 9)
    });
}

#[test]
fn gradcheck_separable_stamp() {
    let mut r = rng(27);
    let inputs = [
        random(&[2, 3], &mut r),
        random(&[2, 4], &mut r),
        random(&[2, 2], &mut r),
        random(&[2, 2, 3, 2], &mut r),
    ];
    assert_grad(&inputs, |tp, v| {
        let o = tp.stamp_separable(v[0], v[1], v[2], v[3])?;
        weighted(tp, o, 10)
    });
}

#[test]
fn separable_stamp_matches_general_stamp() {
    let mut r = rng(28);
    let (py, px, ps) = (
        random(&[3, 5], &mut r),
        random(&[3, 4], &mut r),
        random(&[3, 3], &mut r),
    );
    let bank = random(&[3, 2, 4, 6], &mut r);
    let mut tp = Tape::new();
    let v: Vec<Var> = [py, px, ps, bank]
        .into_iter()
        .map(|t| tp.param(t))
        .collect();
    let sl = tp.outer3(v[0], v[1], v[2]).unwrap();
    let general = tp.stamp(sl, v[3]).unwrap();
    let fast = tp.stamp_separable(v[0], v[1], v[2], v[3]).unwrap();
    assert_eq!(tp.value(fast).shape(), &[3, 2, 8, 9]);
    assert!(tp.value(general).max_abs_diff(tp.value(fast)) < 1e-12);
}

#[test]
fn separable_stamp_rejects_mismatched_factors() {
    let mut tp = Tape::new();
    let py = tp.param(Tensor::zeros([2, 3]));
    let px = tp.param(Tensor::zeros([2, 3]));
    let ps = tp.param(Tensor::zeros([2, 4]));
    let bank = tp.param(Tensor::zeros([3, 1, 2, 2]));
    assert!(matches!(
        tp.stamp_separable(py, px, ps, bank),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn gradient_shapes_match_parameters() {
    let mut r = rng(26);
    let mut tape = Tape::new();
    let x = tape.param(random(&[2, 1, 4, 4], &mut r));
    let k = tape.param(random(&[3, 1, 3, 3], &mut r));
    let y = tape.conv2d(x, k, None, Padding::Same).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().shape(), &[2, 1, 4, 4]);
    assert_eq!(g.get(k).unwrap().shape(), &[3, 1, 3, 3]);
}
