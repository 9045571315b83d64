use pgl_core::gradcheck::{self, project};
use pgl_core::tensor::{BatchNormCfg, ConvGeom, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&[1, 1, 3, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
    let y = tape.conv3d(xv, w, None, ConvGeom::default()).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_all_ones_interior_is_27() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(vec![1, 1, 5, 5, 5]));
    let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
    let y = tape.conv3d(x, w, None, ConvGeom::default()).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 27.0));
}

#[test]
fn conv_output_size_formula() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 4, 8, 32, 32]));
    let w = tape.constant(Tensor::zeros(vec![6, 4, 3, 3, 3]));
    let g = ConvGeom::default().stride([2, 2, 2]).padding([1, 1, 1]);
    let y = tape.conv3d(x, w, None, g).unwrap();
    assert_eq!(tape.shape(y), &[2, 6, 4, 16, 16]);
    let g = ConvGeom::default().padding([4, 4, 4]).dilation([4, 4, 4]);
    let y = tape.conv3d(x, w, None, g).unwrap();
    assert_eq!(tape.shape(y), &[2, 6, 8, 32, 32]);
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![2, 2, 3, 3, 3]));
    let err = tape.conv3d(x, w, None, ConvGeom::default()).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 4, 4]));
    let err = tape.conv3d(x, w, None, ConvGeom::default()).unwrap_err().to_string();
    assert!(err.contains("depth"), "{err}");
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&[1, 2, 4, 5, 5], &mut rng);
    let w = randn(&[3, 2, 3, 3, 3], &mut rng);
    let b = randn(&[3], &mut rng);
    let geom = ConvGeom::default().padding([1, 1, 1]);
    let probe = randn(&[1, 3, 4, 5, 5], &mut rng);
    let r = gradcheck::check(&[x, w, b], |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), geom)?;
        project(t, y, &probe)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn conv_gradient_strided_dilated_grouped() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&[2, 4, 5, 6, 7], &mut rng);
    let w = randn(&[4, 2, 3, 3, 3], &mut rng);
    let geom = ConvGeom::default().stride([2, 1, 2]).padding([2, 2, 2]).dilation([2, 2, 2]).groups(2);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv3d(xv, wv, None, geom).unwrap();
    let probe = randn(tape.shape(y), &mut rng);
    let r = gradcheck::check(&[x, w], |t, v| {
        let y = t.conv3d(v[0], v[1], None, geom)?;
        project(t, y, &probe)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn conv_transpose_doubles_extent_and_checks_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&[2, 3, 2, 3, 2], &mut rng);
    let w = randn(&[3, 2, 2, 2, 2], &mut rng);
    let b = randn(&[2], &mut rng);
    let probe = randn(&[2, 2, 4, 6, 4], &mut rng);
    let r = gradcheck::check(&[x, w, b], |t, v| {
        let y = t.conv_transpose3d(v[0], v[1], Some(v[2]), [2, 2, 2])?;
        assert_eq!(t.shape(y), &[2, 2, 4, 6, 4]);
        project(t, y, &probe)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn batchnorm_training_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![3, 2, 2, 3, 3], |_| rng.random_range(-4.0..9.0f64));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let gamma = tape.constant(Tensor::ones(vec![2]));
    let beta = tape.constant(Tensor::zeros(vec![2]));
    let (mut rm, mut rv) = (Tensor::zeros(vec![2]), Tensor::ones(vec![2]));
    let y = tape
        .batch_norm3d(xv, gamma, beta, &mut rm, &mut rv, BatchNormCfg::default(), true)
        .unwrap();
    let out = tape.value(y);
    let spatial = 18;
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| out.data()[(n * 2 + ch) * spatial..(n * 2 + ch + 1) * spatial].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-4);
    }
    // running stats moved toward the batch statistics
    assert!(rm.data().iter().any(|&v| v != 0.0));
}

#[test]
fn batchnorm_zero_scale_collapses_to_shift() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(vec![2, 1, 2, 2, 2], |i| i as f32));
    let gamma = tape.constant(Tensor::zeros(vec![1]));
    let beta = tape.constant(Tensor::full(vec![1], 5.0));
    let (mut rm, mut rv) = (Tensor::zeros(vec![1]), Tensor::ones(vec![1]));
    let y = tape
        .batch_norm3d(x, gamma, beta, &mut rm, &mut rv, BatchNormCfg::default(), true)
        .unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batchnorm_single_element_batch_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 1, 1, 1]));
    let gamma = tape.constant(Tensor::ones(vec![2]));
    let beta = tape.constant(Tensor::zeros(vec![2]));
    let (mut rm, mut rv) = (Tensor::zeros(vec![2]), Tensor::ones(vec![2]));
    assert!(tape
        .batch_norm3d(x, gamma, beta, &mut rm, &mut rv, BatchNormCfg::default(), true)
        .is_err());
    // eval mode does not need batch statistics
    assert!(tape
        .batch_norm3d(x, gamma, beta, &mut rm, &mut rv, BatchNormCfg::default(), false)
        .is_ok());
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for training in [true, false] {
        let x = randn(&[2, 3, 2, 2, 3], &mut rng);
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let probe = randn(&[2, 3, 2, 2, 3], &mut rng);
        let r = gradcheck::check(&[x, gamma, beta], |t, v| {
            let (mut rm, mut rv) = (Tensor::full(vec![3], 0.1), Tensor::full(vec![3], 0.7));
            let y = t.batch_norm3d(v[0], v[1], v[2], &mut rm, &mut rv, BatchNormCfg::default(), training)?;
            project(t, y, &probe)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "training={training}: {r:?}");
    }
}

#[test]
fn relu_and_add_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![-2.0, 3.5]).unwrap(), true);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 3.5]);
    let z = tape.constant(Tensor::zeros(vec![2]));
    let s = tape.add(x, z).unwrap();
    assert_eq!(tape.value(s), tape.value(x));
    let bad = tape.constant(Tensor::zeros(vec![3]));
    assert!(tape.add(x, bad).is_err());
}

#[test]
fn relu_gradient_masks_nonpositive_inputs() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap(), true);
    let y = tape.relu(x);
    let probe = tape.constant(Tensor::new(vec![3], vec![5.0, 7.0, 9.0]).unwrap());
    let p = tape.mul(y, probe).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 7.0, 0.0]);
}

#[test]
fn trilinear_sample_on_grid_and_ramp() {
    let dims = [4usize, 5, 6];
    let ramp = Tensor::<f64>::from_fn(vec![1, 1, dims[0], dims[1], dims[2]], |i| {
        let w = i % dims[2];
        let h = (i / dims[2]) % dims[1];
        let d = i / (dims[1] * dims[2]);
        d as f64 + 2.0 * h as f64 + 3.0 * w as f64
    });
    let mut tape = Tape::new();
    let x = tape.constant(ramp);
    let y = tape.trilinear_sample(x, &[[2.0, 3.0, 1.0], [1.5, 0.25, 2.75]]).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2]);
    assert_eq!(tape.value(y).data()[0], 2.0 + 6.0 + 3.0);
    assert_eq!(tape.value(y).data()[1], 10.25);
    let empty = tape.trilinear_sample(x, &[]).unwrap();
    assert_eq!(tape.value(empty).numel(), 0);
}

#[test]
fn trilinear_sample_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&[2, 2, 3, 4, 5], &mut rng);
    let points: Vec<[f64; 3]> = (0..17)
        .map(|_| {
            [
                rng.random_range(-0.5..3.0),
                rng.random_range(-0.5..4.0),
                rng.random_range(0.0..4.9),
            ]
        })
        .collect();
    let probe = randn(&[2, 2, 17], &mut rng);
    let r = gradcheck::check(&[x], |t, v| {
        let y = t.trilinear_sample(v[0], &points)?;
        project(t, y, &probe)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn l2_normalize_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, 2, 1, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
    let y = tape.l2_normalize(x, 1e-12).unwrap();
    assert_eq!(tape.value(y).data(), &[0.6, 0.0, 0.8, 0.0]);
}

#[test]
fn l2_normalize_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&[2, 4, 2, 2, 3], &mut rng);
    let probe = randn(&[2, 4, 2, 2, 3], &mut rng);
    let r = gradcheck::check(&[x], |t, v| {
        let y = t.l2_normalize(v[0], 1e-12)?;
        project(t, y, &probe)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let x0 = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &x0.map(|v| 2.0 * v));
    // repeated calls accumulate
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &x0.map(|v| 4.0 * v));
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn stop_gradient_blocks_propagation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(vec![3], 2.0), true);
    let y = tape.leaf(Tensor::full(vec![3], 1.5), true);
    let sx = tape.scale(x, 3.0);
    let blocked = tape.stop_gradient(sx);
    let prod = tape.mul(blocked, y).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad_or_zeros(x).data(), &[0.0; 3]);
    assert_eq!(tape.grad(y).unwrap().data(), &[6.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn composite_conv_bn_relu_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = randn(&[2, 2, 3, 4, 4], &mut rng);
    let w = randn(&[3, 2, 3, 3, 3], &mut rng);
    let gamma = randn(&[3], &mut rng);
    let beta = randn(&[3], &mut rng);
    let probe = randn(&[2, 3, 3, 4, 4], &mut rng);
    let r = gradcheck::check(&[x, w, gamma, beta], |t, v| {
        let y = t.conv3d(v[0], v[1], None, ConvGeom::default().padding([1, 1, 1]))?;
        let (mut rm, mut rv) = (Tensor::zeros(vec![3]), Tensor::ones(vec![3]));
        let y = t.batch_norm3d(y, v[2], v[3], &mut rm, &mut rv, BatchNormCfg::default(), true)?;
        let y = t.relu(y);
        project(t, y, &probe)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-5, "{r:?}");
}

#[test]
fn reductions_and_channel_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = randn(&[2, 3, 2, 2, 2], &mut rng);
    let b = randn(&[2, 2, 2, 2, 2], &mut rng);
    let probe = randn(&[2, 5, 2, 2, 2], &mut rng);
    let r = gradcheck::check(&[a, b], |t, v| {
        let cat = t.concat_channels(&[v[0], v[1]])?;
        let pooled = t.global_avg_pool(cat)?;
        let wide = t.broadcast_spatial(pooled, [2, 2, 2])?;
        let mixed = t.mul(wide, cat)?;
        let soft = t.softmax_channels(mixed)?;
        let sig = t.sigmoid(cat);
        let both = t.add(soft, sig)?;
        let per_c = t.sum_per_channel(both)?;
        let lg = t.log_clamped(per_c, 1e-7);
        let s = t.sum(lg);
        let tail = project(t, both, &probe)?;
        let ratio = t.div(s, tail)?;
        Ok(t.add_scalar(ratio, 1.0))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-5, "{r:?}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x0 = randn(&[1, 2, 3, 3, 3], &mut rng);
    let w0 = randn(&[2, 2, 3, 3, 3], &mut rng);
    let grads = |a: f64, b: f64| {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone(), true);
        let w = tape.leaf(w0.clone(), true);
        let y = tape.conv3d(x, w, None, ConvGeom::default().padding([1, 1, 1])).unwrap();
        let r = tape.relu(y);
        let l1 = tape.sum(r);
        let sq = tape.mul(y, y).unwrap();
        let l2 = tape.sum(sq);
        let (s1, s2) = (tape.scale(l1, a), tape.scale(l2, b));
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(w).unwrap().clone()
    };
    let (g1, g2, g12) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(2.0, -3.0));
    for ((p, q), r) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
        assert!((2.0 * p - 3.0 * q - r).abs() <= 1e-9 * (1.0 + r.abs()));
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::<f32>::from_fn(vec![2, 2, 4, 4, 4], |_| rng.random_range(-1.0..1.0));
        let w0 = Tensor::<f32>::from_fn(vec![3, 2, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let x = tape.leaf(x0, true);
        let w = tape.leaf(w0, true);
        let y = tape.conv3d(x, w, None, ConvGeom::default().padding([1, 1, 1])).unwrap();
        let n = tape.l2_normalize(y, 1e-12).unwrap();
        let loss = tape.sum(n);
        tape.backward(loss).unwrap();
        (tape.value(n).clone(), tape.grad(w).unwrap().clone(), tape.grad(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn l2_normalized_channel_norm_is_one(
        vals in proptest::collection::vec(-10.0f64..10.0, 12),
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 3, 1, 2, 2], vals.clone()).unwrap());
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        let out = tape.value(y).data();
        for p in 0..4 {
            let norm_in: f64 = (0..3).map(|c| vals[c * 4 + p].powi(2)).sum::<f64>().sqrt();
            let norm_out: f64 = (0..3).map(|c| out[c * 4 + p].powi(2)).sum::<f64>().sqrt();
            prop_assert!(norm_out <= 1.0 + 1e-12);
            if norm_in >= 1e-11 {
                prop_assert!((norm_out - 1.0).abs() <= 1e-6);
            }
        }
    }
}
