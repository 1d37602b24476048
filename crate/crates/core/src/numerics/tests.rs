use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            s += x.data()[(ic * h + y * stride + i) * w + xx * stride + j]
                                * k.data()[((oc * c + ic) * kh + i) * kw + j];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_annihilator() {
    let tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
    let v = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]));
    assert_eq!(p.matmul(v).unwrap().value().data(), &[0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(11);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
    let oracle = naive_matmul(&a, &b);
    for (x, y) in out.data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn transposed_products_match_triple_loop() {
    let mut rng = Rng::new(12);
    let a = rand_tensor(&[5, 3], &mut rng);
    let b = rand_tensor(&[4, 3], &mut rng);
    let bt = Tensor::from_fn(&[3, 4], |i| b.data()[(i % 4) * 3 + i / 4]);
    let at = Tensor::from_fn(&[3, 5], |i| a.data()[(i % 5) * 3 + i / 5]);
    let tape = Tape::new();
    let nt = tape.constant(a.clone()).matmul_nt(tape.constant(b.clone())).unwrap().value();
    let oracle = naive_matmul(&a, &bt);
    assert!(nt.data().iter().zip(&oracle).all(|(x, y)| (x - y).abs() < 1e-12));
    let c = rand_tensor(&[5, 2], &mut rng);
    let tn = tape.constant(a.clone()).matmul_tn(tape.constant(c.clone())).unwrap().value();
    let oracle = naive_matmul(&at, &c);
    assert!(tn.data().iter().zip(&oracle).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = x.conv2d(k, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_delta_kernel_crops_input() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&[1, 6, 7], &mut rng);
    let mut kd = vec![0.0; 9];
    kd[4] = 1.0;
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(Tensor::new(&[1, 1, 3, 3], kd).unwrap()), 1)
        .unwrap()
        .value();
    assert_eq!(y.shape(), &[1, 4, 5]);
    for r in 0..4 {
        for c in 0..5 {
            assert_eq!(y.data()[r * 5 + c], x.data()[(r + 1) * 7 + c + 1]);
        }
    }
}

#[test]
fn conv_matches_direct_loop_oracle() {
    let mut rng = Rng::new(6);
    let x = rand_tensor(&[1, 8, 8], &mut rng);
    let k = rand_tensor(&[3, 1, 3, 3], &mut rng);
    let tape = Tape::new();
    for stride in [1, 5] {
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k.clone()), stride)
            .unwrap()
            .value();
        let oracle = naive_conv(&x, &k, stride);
        assert!(y.data().iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12));
    }
    // multi-channel input, batched path agrees with per-image path
    let x2 = rand_tensor(&[2, 2, 6, 6], &mut rng);
    let k2 = rand_tensor(&[4, 2, 3, 3], &mut rng);
    let y = tape.constant(x2.clone()).conv2d(tape.constant(k2.clone()), 1).unwrap().value();
    for n in 0..2 {
        let xi = Tensor::new(&[2, 6, 6], x2.row(n).to_vec()).unwrap();
        let oracle = naive_conv(&xi, &k2, 1);
        assert!(y.row(n).iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn conv_rejects_non_tiling_stride() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 8, 8]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(x.conv2d(k, 2), Err(Error::Dimension { .. })));
}

#[test]
fn activation_values() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[3], vec![-3.0, 0.0, 3.0]).unwrap());
    assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 3.0]);
    assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
    let big = tape.constant(Tensor::new(&[2], vec![-800.0, 800.0]).unwrap());
    assert_eq!(big.sigmoid().unwrap().value().data(), &[0.0, 1.0]);
    assert_eq!(big.softplus().unwrap().value().data(), &[0.0, 800.0]);

    let grid: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
    let g = tape.constant(Tensor::new(&[grid.len()], grid.clone()).unwrap());
    let t = g.tanh().unwrap().value();
    for (x, y) in grid.iter().zip(t.data()) {
        let oracle = (x.exp() - (-x).exp()) / (x.exp() + (-x).exp());
        assert!((y - oracle).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[2, 3, 4], 0.3));
    let loss = x.sum().unwrap();
    let g = tape.backward(loss).unwrap().get(x).unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));
    assert_eq!(g.shape(), &[2, 3, 4]);
}

#[test]
fn backward_product_rule() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.param(Tensor::scalar(3.0));
    let loss = x.mul(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 3.0);
    assert_eq!(grads.get(y).unwrap().item(), 2.0);
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn fan_out_gradients_sum() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
    let loss = x.add(x).unwrap().add(x.scale(3.0).unwrap()).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[5.0, 5.0]);
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = v.square().unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
    let err = grad_check(|_, v| v.square()?.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-7, "{err}");
}

fn smooth(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(shape, rng)
}

/// Inputs jittered away from zero so relu and max kinks are not straddled.
fn kink_free(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform_in(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

#[test]
fn primitive_gradients_are_sound() {
    let mut rng = Rng::new(99);
    let tol = 1e-6;
    let w = smooth(&mut rng, &[4, 3]);
    let check = |name: &str, err: f64| assert!(err < tol, "{name}: {err}");

    let a = smooth(&mut rng, &[2, 3]);
    let b = smooth(&mut rng, &[3, 4]);
    let gc = GradCheck::new(1e-5);
    check(
        "matmul",
        gc.run(|_, v| v[0].matmul(v[1])?.square()?.sum(), &[a.clone(), b.clone()]).unwrap(),
    );
    check(
        "matmul_nt",
        gc.run(|_, v| v[0].matmul_nt(v[1])?.square()?.sum(), &[a.clone(), w.clone()]).unwrap(),
    );
    let c = smooth(&mut rng, &[2, 5]);
    check(
        "matmul_tn",
        gc.run(|_, v| v[0].matmul_tn(v[1])?.square()?.sum(), &[a.clone(), c]).unwrap(),
    );
    for mode in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
        check(
            "activation",
            grad_check(|_, v| v.activation(mode)?.square()?.sum(), &a, 1e-5).unwrap(),
        );
    }
    check(
        "relu",
        grad_check(|_, v| v.relu()?.square()?.sum(), &kink_free(&mut rng, &[3, 3]), 1e-5).unwrap(),
    );
    let bias = smooth(&mut rng, &[3]);
    check(
        "add_row_bias",
        gc.run(|_, v| v[0].add_row_bias(v[1])?.square()?.sum(), &[a.clone(), bias]).unwrap(),
    );
    let x = smooth(&mut rng, &[2, 2, 6, 6]);
    let k = smooth(&mut rng, &[3, 2, 3, 3]);
    let cb = smooth(&mut rng, &[3]);
    check(
        "conv2d",
        gc.run(
            |_, v| v[0].conv2d(v[1], 1)?.add_channel_bias(v[2])?.square()?.sum(),
            &[x.clone(), k.clone(), cb],
        )
        .unwrap(),
    );
    // distinct values so the pooled maxima are unambiguous
    let pooled = Tensor::from_fn(&[1, 2, 4, 5], |i| ((i * 37) % 41) as f64 * 0.05 - 1.0);
    check(
        "max_pool2",
        grad_check(|_, v| v.max_pool2()?.square()?.sum(), &pooled, 1e-5).unwrap(),
    );
    check(
        "channels_last",
        grad_check(|t, v| {
            let w = t.constant(Tensor::from_fn(&[36 * 2, 2], |i| i as f64 * 0.01));
            v.channels_last()?.mul(w)?.sum()
        }, &x, 1e-5)
        .unwrap(),
    );
    let s = smooth(&mut rng, &[5, 1]);
    check(
        "softmax",
        grad_check(|t, v| {
            let w = t.constant(Tensor::from_fn(&[5, 1], |i| i as f64 - 2.0));
            v.softmax()?.mul(w)?.sum()
        }, &s, 1e-5)
        .unwrap(),
    );
    let mat = smooth(&mut rng, &[4, 3]);
    check(
        "gather_rows",
        grad_check(|_, v| v.gather_rows(&[2, 0, 2, 3])?.square()?.sum(), &mat, 1e-5).unwrap(),
    );
    check(
        "mean_rows",
        grad_check(|_, v| v.mean_rows()?.square()?.sum(), &mat, 1e-5).unwrap(),
    );
    check(
        "max_rows",
        grad_check(|_, v| v.max_rows()?.square()?.sum(), &mat, 1e-5).unwrap(),
    );
    check(
        "concat",
        gc.run(
            |_, v| {
                let c = concat_cols(&[v[0], v[1]])?;
                let r = concat_rows(&[c, c])?;
                r.square()?.mean()
            },
            &[mat.clone(), smooth(&mut rng, &[4, 2])],
        )
        .unwrap(),
    );
    check(
        "sub_mul_scale",
        gc.run(
            |_, v| v[0].sub(v[1])?.mul(v[0])?.scale(0.7)?.reshape(&[12])?.sum(),
            &[mat.clone(), smooth(&mut rng, &[4, 3])],
        )
        .unwrap(),
    );
}

#[test]
fn tape_is_linear_in_the_loss() {
    let mut rng = Rng::new(4);
    let a = smooth(&mut rng, &[3, 3]);
    let grad = |which: u8| {
        let tape = Tape::new();
        let x = tape.param(a.clone());
        let l1 = x.tanh().unwrap().sum().unwrap();
        let l2 = x.square().unwrap().mean().unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => l1.add(l2).unwrap(),
        };
        tape.backward(loss).unwrap().get(x).unwrap()
    };
    let (g1, g2, g12) = (grad(0), grad(1), grad(2));
    for i in 0..9 {
        assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-15);
    }
}

#[test]
fn finite_check_flags_nan() {
    let tape = Tape::<f64>::with_finite_checks(true);
    let x = tape.constant(Tensor::new(&[1], vec![f64::INFINITY]).unwrap());
    assert!(matches!(x.sub(x), Err(Error::NonFinite { .. })));
}

#[test]
fn tensor_invariants() {
    assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
    let t = Tensor::<f32>::from_fn(&[2, 2], |i| i as f32);
    assert_eq!(t.cast::<f64>().data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn single_precision_path_agrees() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![0.5], vec![-1.0]]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[-1.5, -2.5]);
}
