use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::{prop_assert, proptest, ProptestConfig};

use super::*;
use crate::gradcheck::{grad_check, GraphFunction};
use crate::Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut Rng::new(seed))
}

/// Contracts an output with fixed random weights so every element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand(g.shape(y), seed ^ 0xABCD));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let r = grad_check(&GraphFunction(f), inputs, 1e-5).unwrap();
    assert!(r.max_rel_error < tol, "{r:?}");
}

#[test]
fn matmul_identity_and_shape() {
    let mut g = Graph::<f64>::new();
    let a = rand(&[3, 4], 1);
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);
    let x = g.constant(rand(&[2, 3], 2));
    let y = g.constant(rand(&[3, 4], 3));
    let z = g.matmul(x, y).unwrap();
    assert_eq!(g.shape(z), &[2, 4]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[2, 3], 2));
    let y = g.constant(rand(&[4, 4], 3));
    let err = g.matmul(x, y).unwrap_err();
    assert_eq!(
        err,
        Error::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 4]
        }
    );
}

#[test]
fn matmul_gradient_of_sum() {
    check(&[rand(&[5, 7], 4), rand(&[7, 2], 5)], 1e-6, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        Ok(g.sum(y))
    });
}

#[test]
fn matmul_counts_macs() {
    let mut g = Graph::<f64>::new();
    g.count_flops();
    g.set_scope("fc");
    let a = g.constant(rand(&[5, 7], 1));
    let b = g.constant(rand(&[7, 3], 2));
    g.matmul(a, b).unwrap();
    assert_eq!(g.flops().unwrap().total_macs(), 5 * 7 * 3);
    assert_eq!(g.flops().unwrap().per_layer()["fc"], 105);
}

#[test]
fn bmm_gradients_both_layouts() {
    for trans in [false, true] {
        let b_shape = if trans { [2, 4, 3] } else { [2, 3, 4] };
        check(&[rand(&[2, 5, 3], 6), rand(&b_shape, 7)], 1e-6, move |g, v| {
            let y = g.bmm(v[0], v[1], trans)?;
            probe(g, y, 1)
        });
    }
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 6], 3.5));
    let gamma = g.constant(Tensor::ones(&[6]));
    let beta = g.constant(Tensor::zeros(&[6]));
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_standardises_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[4, 16], 8).map(|v| 3.0 * v + 1.5));
    let gamma = g.constant(Tensor::ones(&[16]));
    let beta = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_gradient() {
    check(&[rand(&[3, 5], 9), rand(&[5], 10), rand(&[5], 11)], 1e-5, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        probe(g, y, 2)
    });
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 5], 0.3));
    let y = g.softmax(x, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let base = rand(&[3, 6], 12);
    let a = g.constant(base.clone());
    let b = g.constant(base.map(|v| v + 17.25));
    let ya = g.softmax(a, None).unwrap();
    let yb = g.softmax(b, None).unwrap();
    assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
}

#[test]
fn softmax_mask_zeroes_keys() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[4, 3], 13));
    let mask = KeyMask {
        valid: vec![true, false, true, false, true, true],
        rows_per_group: 2,
    };
    let y = g.softmax(x, Some(&mask)).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[1], 0.0);
    assert_eq!(d[4], 0.0);
    assert_eq!(d[9], 0.0);
    for row in d.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient() {
    check(&[rand(&[4, 6], 14)], 1e-5, |g, v| {
        let y = g.softmax(v[0], None)?;
        probe(g, y, 3)
    });
}

#[test]
fn conv1x1_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = rand(&[2, 3, 4, 5], 15);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap());
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv3x3_pad1_preserves_size() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[1, 2, 7, 5], 16));
    let w = g.constant(rand(&[4, 2, 3, 3], 17));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 7, 5]);
    let y2 = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y2), &[1, 4, 4, 3]);
}

#[test]
fn conv_rejects_empty_output() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[1, 1, 2, 2], 1));
    let w = g.constant(rand(&[1, 1, 5, 5], 2));
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
}

#[test]
fn conv2d_gradients() {
    check(&[rand(&[2, 2, 5, 4], 18), rand(&[3, 2, 3, 3], 19), rand(&[3], 20)], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        probe(g, y, 4)
    });
    check(&[rand(&[1, 3, 3, 3], 21), rand(&[2, 3, 1, 1], 22), rand(&[2], 23)], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
        probe(g, y, 5)
    });
}

#[test]
fn deconv_doubles_spatial_dims() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[1, 8, 4, 3], 24));
    let w = g.constant(rand(&[8, 5, 4, 4], 25));
    let y = g.deconv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 5, 8, 6]);
}

/// Transposed convolution computed as zero interleaving, zero padding by
/// `k - 1 - p`, and a stride-1 correlation with the flipped kernel.
fn deconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let (uh, uw) = ((h - 1) * stride + 1, (wd - 1) * stride + 1);
    let p = k - 1 - pad;
    let (ph, pw) = (uh + 2 * p, uw + 2 * p);
    let mut up = vec![0.0; cin * ph * pw];
    for c in 0..cin {
        for y in 0..h {
            for xx in 0..wd {
                up[(c * ph + p + y * stride) * pw + p + xx * stride] = x.data()[(c * h + y) * wd + xx];
            }
        }
    }
    let (oh, ow) = (ph - k + 1, pw - k + 1);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = 0.0;
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w.data()[((c * cout + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                            s += wv * up[(c * ph + y + ky) * pw + xx + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    Tensor::new(&[1, cout, oh, ow], out).unwrap()
}

#[test]
fn deconv_matches_zero_interleave_oracle() {
    let x = rand(&[1, 2, 3, 3], 26);
    let w = rand(&[2, 3, 4, 4], 27);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.deconv2d(xv, wv, None, 2, 1).unwrap();
    let want = deconv_oracle(&x, &w, 2, 1);
    assert_eq!(g.shape(y), want.shape());
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn deconv_gradients() {
    check(&[rand(&[2, 3, 3, 2], 28), rand(&[3, 2, 4, 4], 29), rand(&[2], 30)], 1e-5, |g, v| {
        let y = g.deconv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        probe(g, y, 6)
    });
}

#[test]
fn bilinear_constant_stays_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2, 3, 5], 5.0));
    let y = g.upsample_bilinear(x, 4).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 12, 20]);
    assert!(g.value(y).data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
}

#[test]
fn bilinear_2x2_by_2_hand_weights() {
    // half-pixel centres: output o samples input (o + 0.5) / 2 - 0.5,
    // clamped at 0: taps -0.25->0, 0.25, 0.75, 1.25->(1,1)
    let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![a, b, c, d]).unwrap());
    let y = g.upsample_bilinear(x, 2).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], a);
    assert_eq!(v[3], b);
    assert_eq!(v[12], c);
    assert_eq!(v[15], d);
    assert!((v[1] - (0.75 * a + 0.25 * b)).abs() < 1e-15);
    assert!((v[5] - (0.75 * (0.75 * a + 0.25 * b) + 0.25 * (0.75 * c + 0.25 * d))).abs() < 1e-15);
    assert!((v[10] - (0.25 * (0.25 * a + 0.75 * b) + 0.75 * (0.25 * c + 0.75 * d))).abs() < 1e-15);
}

#[test]
fn bilinear_gradient() {
    check(&[rand(&[1, 2, 3, 2], 31)], 1e-5, |g, v| {
        let y = g.upsample_bilinear(v[0], 4)?;
        probe(g, y, 7)
    });
    check(&[rand(&[1, 1, 5, 4], 32)], 1e-5, |g, v| {
        let y = g.resize_bilinear(v[0], (3, 7))?;
        probe(g, y, 8)
    });
}

#[test]
fn pixel_shuffle_tiles_channels() {
    let mut g = Graph::<f64>::new();
    let data: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().flat_map(|&v| [v; 4]).collect();
    let x = g.constant(Tensor::new(&[1, 4, 2, 2], data).unwrap());
    let y = g.pixel_shuffle(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    let want = [1., 2., 1., 2., 3., 4., 3., 4., 1., 2., 1., 2., 3., 4., 3., 4.];
    assert_eq!(g.value(y).data(), &want);
}

#[test]
fn pixel_shuffle_heatmap_shapes_and_inverse() {
    let mut g = Graph::<f64>::new();
    let t = rand(&[1, 16 * 17, 16, 12], 33);
    let x = g.constant(t.clone());
    let y = g.pixel_shuffle(x, 4).unwrap();
    assert_eq!(g.shape(y), &[1, 17, 64, 48]);
    let back = g.pixel_unshuffle(y, 4).unwrap();
    assert_eq!(g.value(back), &t);
    let bad = g.constant(rand(&[1, 6, 2, 2], 1));
    assert!(g.pixel_shuffle(bad, 2).is_err());
}

#[test]
fn batch_norm_train_and_eval_gradients() {
    check(&[rand(&[3, 2, 2, 3], 34), rand(&[2], 35), rand(&[2], 36)], 1e-5, |g, v| {
        let (y, _, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Train, None, 1e-5)?;
        probe(g, y, 9)
    });
    check(&[rand(&[2, 2, 2, 2], 37), rand(&[2], 38), rand(&[2], 39)], 1e-5, |g, v| {
        let (y, _, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Eval, Some((&[0.3, -0.2], &[1.5, 0.7])), 1e-5)?;
        probe(g, y, 10)
    });
}

#[test]
fn data_movement_gradients() {
    check(&[rand(&[2, 3, 4], 40)], 1e-6, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let n = g.narrow(p, 2, 1, 2)?;
        let n = g.reshape(n, &[4, 4])?;
        let r = g.roll_grid(v[0], (1, 3), (0, 1))?;
        let s = g.segment_mean(n, vec![vec![0, 3], vec![2], vec![1, 2, 3]])?;
        let a = probe(g, s, 11)?;
        let b = probe(g, r, 12)?;
        g.add(a, b)
    });
    check(&[rand(&[2, 3], 41), rand(&[2, 2], 42)], 1e-6, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let t = g.repeat_leading(c, 3)?;
        probe(g, t, 13)
    });
}

#[test]
fn roll_then_unroll_is_identity() {
    let mut g = Graph::<f64>::new();
    let t = rand(&[2, 12, 3], 43);
    let x = g.constant(t.clone());
    let r = g.roll_grid(x, (3, 4), (1, 2)).unwrap();
    let back = g.roll_grid(r, (3, 4), (-1, -2)).unwrap();
    assert_eq!(g.value(back), &t);
}

#[test]
fn window_partition_merge_round_trip_with_padding() {
    for shift in [false, true] {
        let layout = WindowLayout::new(2, (5, 7), (2, 3), shift).unwrap();
        assert_eq!(layout.padded, (6, 9));
        assert_eq!(layout.windows_per_image(), 9);
        let mut g = Graph::<f64>::new();
        let t = rand(&[2, 35, 4], 44);
        let x = g.constant(t.clone());
        let w = g.window_partition(x, &layout).unwrap();
        assert_eq!(g.shape(w), &[18, 6, 4]);
        let back = g.window_merge(w, &layout).unwrap();
        assert_eq!(g.value(back), &t);
    }
}

#[test]
fn weighted_mse_hand_case_and_masking() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let t = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let l = g.weighted_mse(p, &t, vec![1.0, 1.0]).unwrap();
    // ((1 + 4) / 2 + (4 + 9) / 2) / 2
    assert_eq!(g.value(l).item(), 4.5);
    let l0 = g.weighted_mse(p, &t, vec![0.0, 0.0]).unwrap();
    assert_eq!(g.value(l0).item(), 0.0);
    let grads = g.backward(l0).unwrap();
    assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    check(&[rand(&[3, 4], 45)], 1e-6, |g, v| {
        let target = rand(&[3, 4], 46);
        g.weighted_mse(v[0], &target, vec![0.5, 0.0, 2.0])
    });
}

#[test]
fn ae_loss_gradient() {
    check(&[rand(&[7, 2], 47)], 1e-5, |g, v| g.ae_loss(v[0], vec![vec![0, 1, 2], vec![3, 4], vec![], vec![5, 6]]));
    check(&[rand(&[5, 1], 48)], 1e-5, |g, v| g.ae_loss(v[0], vec![vec![0, 4], vec![1, 2, 3]]));
}

#[test]
fn gelu_and_relu_gradients() {
    check(&[rand(&[10], 49)], 1e-6, |g, v| {
        let y = g.gelu(v[0]);
        probe(g, y, 14)
    });
    check(&[rand(&[10], 50)], 1e-6, |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 15)
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(rand(&[3], 1));
    let p = g.param(rand(&[3], 2));
    let y = g.mul(c, p).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(p).is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..32, seed in 0u64..1000) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand(&[rows, cols], seed).map(|v| 10.0 * v));
        let y = g.softmax(x, None).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn random_shape_gradients(
        n in 1usize..3, c in 1usize..4, h in 2usize..6, w in 2usize..6, o in 1usize..4, seed in 0u64..1000
    ) {
        let x = rand(&[n, c, h, w], seed);
        let k = rand(&[o, c, 3, 3], seed + 1);
        let dk = rand(&[c, o, 4, 4], seed + 2);
        let gamma = rand(&[w], seed + 3);
        let beta = rand(&[w], seed + 4);
        let f = GraphFunction(|g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let d = g.deconv2d(v[0], v[2], None, 2, 1)?;
            let u = g.upsample_bilinear(v[0], 2)?;
            let ln = g.layer_norm(v[0], v[3], v[4], 1e-5)?;
            let sm = g.softmax(v[0], None)?;
            let parts = [probe(g, y, 1)?, probe(g, d, 2)?, probe(g, u, 3)?, probe(g, ln, 4)?, probe(g, sm, 5)?];
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = g.add(acc, *p)?;
            }
            Ok(acc)
        });
        let r = grad_check(&f, &[x, k, dk, gamma, beta], 1e-5).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }
}
