use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct convolution with explicit loops over every index.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (h, w, cin) = x.hwc().unwrap();
    let ks = k.shape()[0];
    let cout = k.shape()[3];
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..ks {
                    for kx in 0..ks {
                        for ci in 0..cin {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let kv = k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                            acc += x.at3(iy as usize, ix as usize, ci) * kv;
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    out
}

fn conv_eval(x: Tensor<f64>, k: Tensor<f64>, b: Vec<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let cout = b.len();
    let (x, k, b) = (
        g.constant(x),
        g.constant(k),
        g.constant(Tensor::new(vec![cout], b).unwrap()),
    );
    let y = g.conv2d(x, k, b, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_1x1() {
    let x = rand_tensor(&[4, 5, 3], 1);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let y = conv_eval(x.clone(), k, vec![0.0; 3], 1, 0);
    assert_eq!(y, x);
}

#[test]
fn conv_constant_field_interior_is_nine_v() {
    let v = 0.37;
    let x = Tensor::full(&[5, 5, 1], v);
    let k = Tensor::full(&[3, 3, 1, 1], 1.0);
    let y = conv_eval(x, k, vec![0.0], 1, 1);
    for yy in 1..4 {
        for xx in 1..4 {
            assert!((y.at3(yy, xx, 0) - 9.0 * v).abs() < 1e-12);
        }
    }
    // corners only see four taps
    assert!((y.at3(0, 0, 0) - 4.0 * v).abs() < 1e-12);
}

#[test]
fn conv_matches_naive_loop_oracle() {
    let x = rand_tensor(&[5, 5, 2], 7);
    let k = rand_tensor(&[3, 3, 2, 3], 8);
    let b = vec![0.1, -0.2, 0.3];
    for (stride, pad) in [(1, 1), (2, 1)] {
        let fast = conv_eval(x.clone(), k.clone(), b.clone(), stride, pad);
        let slow = naive_conv(&x, &k, &b, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
        }
    }
}

#[test]
fn conv_f32_matches_naive_loop_oracle() {
    let x = rand_tensor(&[5, 5, 2], 17);
    let k = rand_tensor(&[3, 3, 2, 3], 18);
    let slow = naive_conv(&x, &k, &[0.0; 3], 1, 1);
    let mut g: Graph<f32> = Graph::new();
    let (xv, kv, bv) = (
        g.constant(x.cast()),
        g.constant(k.cast()),
        g.constant(Tensor::zeros(&[3])),
    );
    let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
    for (a, e) in g.value(y).data().iter().zip(slow.data()) {
        assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0));
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    let err = g.conv2d(x, k, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("2 channels"), "{err}");
}

#[test]
fn conv_stride_two_halves_even_sizes() {
    for (h, w) in [(2, 2), (8, 6), (16, 32)] {
        let y = conv_eval(
            Tensor::zeros(&[h, w, 1]),
            Tensor::zeros(&[3, 3, 1, 2]),
            vec![0.0; 2],
            2,
            1,
        );
        assert_eq!(y.shape(), &[h / 2, w / 2, 2]);
    }
}

#[test]
fn gap_examples() {
    let mut g: Graph<f64> = Graph::new();
    let c = g.constant(Tensor::full(&[3, 4, 2], 0.25));
    let p = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(p).data(), &[0.25, 0.25]);

    let x = g.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);

    let r = rand_tensor(&[7, 5, 3], 3);
    let x = g.constant(r.clone());
    let p = g.global_avg_pool(x).unwrap();
    for ch in 0..3 {
        let mut s = 0.0;
        for i in 0..35 {
            s += r.data()[i * 3 + ch];
        }
        assert_eq!(g.value(p).data()[ch], s / 35.0);
    }
}

fn softmax_of(z: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![z.len()], z.to_vec()).unwrap());
    let s = g.softmax(v).unwrap();
    g.value(s).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.3; 4]), vec![0.25; 4]);
    assert_eq!(softmax_of(&[-7.0]), vec![1.0]);
    let s = softmax_of(&[0.0, 3f64.ln()]);
    assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
    // large logits stay finite
    let s = softmax_of(&[1000.0, 1000.0]);
    assert_eq!(s, vec![0.5, 0.5]);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        z in proptest::collection::vec(-20.0f64..20.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let s = softmax_of(&z);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(s.iter().all(|&v| v > 0.0));
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in s.iter().zip(softmax_of(&shifted)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_then_split_is_bit_exact(
        h in 1usize..5, w in 1usize..5, ca in 0usize..4, cb in 0usize..4, seed in any::<u64>()
    ) {
        let a = rand_tensor(&[h, w, ca], seed).cast::<f32>();
        let b = rand_tensor(&[h, w, cb], seed ^ 1).cast::<f32>();
        let mut g: Graph<f32> = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat_channels(va, vb).unwrap();
        let (sa, sb) = g.value(c).split_channels(ca).unwrap();
        prop_assert_eq!(sa, a);
        prop_assert_eq!(sb, b);
    }
}

#[test]
fn concat_examples() {
    let mut g: Graph<f64> = Graph::new();
    let x = rand_tensor(&[2, 3, 2], 4);
    let a = g.constant(x.clone());
    let e = g.constant(Tensor::zeros(&[2, 3, 0]));
    let c = g.concat_channels(a, e).unwrap();
    assert_eq!(g.value(c), &x);

    let a = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap());
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

    let d = g.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(g.concat_channels(a, d).is_err());
}

#[test]
fn upsample_examples() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 1], 0.6));
    let u = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.value(u), &Tensor::full(&[2, 2, 1], 0.6));

    let r = rand_tensor(&[3, 3, 2], 9);
    let x = g.constant(r.clone());
    let u = g.upsample_nearest2x(x).unwrap();
    let out = g.value(u).clone();
    assert_eq!(out.shape(), &[6, 6, 2]);
    for i in 0..6 {
        for j in 0..6 {
            for c in 0..2 {
                assert_eq!(out.at3(i, j, c), r.at3(i / 2, j / 2, c));
            }
        }
    }
    let p_in = g.global_avg_pool(x).unwrap();
    let p_up = g.global_avg_pool(u).unwrap();
    for (a, b) in g.value(p_in).data().iter().zip(g.value(p_up).data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn activation_examples() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.activation(x, Activation::Relu);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.activation(z, Activation::Sigmoid);
    assert_eq!(g.value(s).data(), &[0.5]);

    let grid: Vec<f64> = (0..=600).map(|i| -3.0 + i as f64 * 0.01).collect();
    let x = g.constant(Tensor::new(vec![grid.len()], grid.clone()).unwrap());
    let y = g.activation(x, Activation::Gelu);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for (&xv, &yv) in grid.iter().zip(g.value(y).data()) {
        let e = 0.5 * xv * (1.0 + (c * (xv + 0.044715 * xv.powi(3))).tanh());
        assert!((yv - e).abs() < 1e-6);
    }
}

#[test]
fn relu_grad_at_zero_is_zero() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.activation(x, Activation::Relu);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn l1_examples() {
    let mut g: Graph<f64> = Graph::new();
    let r = rand_tensor(&[3, 4, 3], 5);
    let a = g.constant(r.clone());
    let b = g.constant(r.clone());
    let l = g.l1_loss(a, b).unwrap();
    assert_eq!(g.value(l).data(), &[0.0]);

    let a = g.constant(Tensor::zeros(&[2, 2, 3]));
    let b = g.constant(Tensor::full(&[2, 2, 3], 1.0));
    let l = g.l1_loss(a, b).unwrap();
    assert_eq!(g.value(l).data(), &[1.0]);

    let t = rand_tensor(&[3, 4, 3], 6);
    let a = g.constant(r.clone());
    let b = g.constant(t.clone());
    let l = g.l1_loss(a, b).unwrap();
    let mut acc = 0.0;
    for i in 0..r.len() {
        acc += (t.data()[i] - r.data()[i]).abs();
    }
    assert!((g.value(l).data()[0] - acc / r.len() as f64).abs() < 1e-7);

    let c = g.constant(Tensor::zeros(&[3, 4, 2]));
    assert!(g.l1_loss(a, c).is_err());
}

#[test]
fn backward_examples() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.param(rand_tensor(&[2, 3, 4], 11));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    assert!(g.backward(s).is_err(), "second backward must be rejected");

    // l1(c*x, 0) -> c*sign(x)/size
    let c = 2.5;
    let xs = rand_tensor(&[2, 2, 2], 12);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param(xs.clone());
    let cx = g.scale(x, c);
    let z = g.constant(Tensor::zeros(&[2, 2, 2]));
    let l = g.l1_loss(cx, z).unwrap();
    g.backward(l).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(xs.data()) {
        assert!((gv - c * xv.signum() / 8.0).abs() < 1e-15);
    }
}

#[test]
fn backward_accumulates_over_fan_out() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap(); // 2x^2
    let s = g.sum(z);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0, -8.0]);
}

#[test]
fn gradcheck_linear_is_exact() {
    let a = rand_tensor(&[10], 21);
    let err = finite_diff_check(
        |g, x| {
            let av = g.constant(a.clone());
            let p = g.mul(x, av)?;
            Ok(g.sum(p))
        },
        &rand_tensor(&[10], 22),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn gradcheck_relu_away_from_kink() {
    // every coordinate at least 0.1 away from zero
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = Tensor::from_fn(&[4, 4, 2], |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let w = rand_tensor(&[4, 4, 2], 6);
    let err = finite_diff_check(
        |g, x| {
            let r = g.activation(x, Activation::Relu);
            let wv = g.constant(w.clone());
            let p = g.mul(r, wv)?;
            Ok(g.sum(p))
        },
        &point,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_conv_gelu_gap_composite() {
    let k = rand_tensor(&[3, 3, 2, 3], 31);
    let err = finite_diff_check(
        |g, x| {
            let kv = g.constant(k.clone());
            let b = g.constant(Tensor::zeros(&[3]));
            let c = g.conv2d(x, kv, b, 1, 1)?;
            let a = g.activation(c, Activation::Gelu);
            let p = g.global_avg_pool(a)?;
            Ok(g.sum(p))
        },
        &rand_tensor(&[5, 5, 2], 32),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(rand_tensor(&[6, 6, 3], 1).cast());
        let k = g.constant(rand_tensor(&[3, 3, 3, 4], 2).cast());
        let b = g.constant(rand_tensor(&[4], 3).cast());
        let c = g.conv2d(x, k, b, 2, 1).unwrap();
        let a = g.activation(c, Activation::Gelu);
        let u = g.upsample_nearest2x(a).unwrap();
        g.value(u).clone()
    };
    assert_eq!(run(), run());
}
