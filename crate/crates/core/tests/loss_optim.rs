use std::collections::BTreeMap;

use pgl_core::loss::{dice_ce_binary, dice_ce_multiclass, global_consistency, local_consistency, LossConfig};
use pgl_core::networks::{ParamStore, Role};
use pgl_core::tensor::{Tape, Tensor};
use pgl_core::trainer::{cosine_lr, ema_omega, ema_update, Lars, LarsConfig, Sgd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(f: impl FnOnce(&mut Tape<f64>) -> pgl_core::Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item()
}

fn feats(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![2, 4, 1, 2, 2], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn consistency_ignores_feature_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let a = feats(&mut rng);
        let b = feats(&mut rng);
        let k = rng.random_range(0.1..10.0);
        let scaled = a.map(|v| v * k);
        for f in [local_consistency::<f64>, global_consistency::<f64>] {
            let base = scalar(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
                f(t, x, y, &cfg).unwrap()
            });
            let other = scalar(|t| {
                let (x, y) = (t.constant(scaled.clone()), t.constant(b.clone()));
                f(t, x, y, &cfg).unwrap()
            });
            assert!((base - other).abs() < 1e-10);
            assert!((-1e-12..=4.0 + 1e-12).contains(&base));
        }
    }
}

#[test]
fn consistency_of_identical_features_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = feats(&mut rng);
    let cfg = LossConfig::default();
    let l = scalar(|t| {
        let (x, y) = (t.constant(a.clone()), t.constant(a.clone()));
        local_consistency(t, x, y, &cfg).unwrap()
    });
    assert!(l.abs() < 1e-12);
}

#[test]
fn consistency_rejects_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones(vec![1, 2, 1, 1, 2]));
    let b = tape.constant(Tensor::ones(vec![1, 2, 1, 2, 1]));
    assert!(local_consistency(&mut tape, a, b, &LossConfig::default()).is_err());
}

/// Two voxels, one foreground and one background; predicting `t` on the
/// first and `1 - t` on the second gets strictly better as `t` grows.
#[test]
fn binary_loss_falls_as_prediction_improves() {
    let y = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    let mut last = f64::INFINITY;
    for i in 1..100 {
        let t = i as f64 / 100.0;
        let p = Tensor::new(vec![2], vec![t, 1.0 - t]).unwrap();
        let l = scalar(|tp| {
            let (p, y) = (tp.constant(p), tp.constant(y.clone()));
            dice_ce_binary(tp, p, y, 1e-5).unwrap()
        });
        assert!(l < last, "t={t}: {l} !< {last}");
        last = l;
    }
}

#[test]
fn multiclass_loss_falls_as_prediction_improves() {
    // N=1, C=2, two voxels; class 1 at voxel 0, class 0 at voxel 1
    let y = Tensor::new(vec![1, 2, 1, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut last = f64::INFINITY;
    for i in 1..100 {
        let t = i as f64 / 100.0;
        let p = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0 - t, t, t, 1.0 - t]).unwrap();
        let l = scalar(|tp| {
            let (p, y) = (tp.constant(p), tp.constant(y.clone()));
            dice_ce_multiclass(tp, p, y, 1e-5, 2).unwrap()
        });
        assert!(l < last);
        last = l;
    }
}

#[test]
fn multiclass_perfect_prediction_has_no_loss() {
    let y = Tensor::new(vec![1, 3, 1, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let l = scalar(|tp| {
        let (p, y) = (tp.constant(y.clone()), tp.constant(y.clone()));
        dice_ce_multiclass(tp, p, y, 1e-5, 3).unwrap()
    });
    assert!(l.abs() < 1e-4);
}

#[test]
fn multiclass_rejects_wrong_class_count() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::full(vec![1, 2, 1, 1, 2], 0.5));
    let y = tape.constant(Tensor::full(vec![1, 2, 1, 1, 2], 0.5));
    assert!(dice_ce_multiclass(&mut tape, p, y, 1e-5, 3).is_err());
}

fn quadratic_store(w: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(vec![w.len()], w.to_vec()).unwrap(), Role::Weight).unwrap();
    s.insert("b", Tensor::new(vec![1], vec![3.0]).unwrap(), Role::Bias).unwrap();
    s
}

/// `0.5 * sum((x - c)^2)` over every entry, with its gradient.
fn quadratic(store: &ParamStore<f64>, centre: f64) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut loss = 0.0;
    let mut grads = BTreeMap::new();
    for (k, p) in store.iter() {
        loss += p.value.data().iter().map(|v| 0.5 * (v - centre).powi(2)).sum::<f64>();
        grads.insert(k.to_string(), p.value.map(|v| v - centre));
    }
    (loss, grads)
}

#[test]
fn sgd_converges_on_a_convex_quadratic() {
    let mut store = quadratic_store(&[4.0, -2.0, 0.5]);
    let mut opt = Sgd::new(0.9, 0.0);
    let (start, _) = quadratic(&store, 1.0);
    for _ in 0..50 {
        let (_, g) = quadratic(&store, 1.0);
        opt.step(&mut store, &g, 0.1).unwrap();
    }
    let (end, _) = quadratic(&store, 1.0);
    assert!(end < 1e-2 * start, "{start} -> {end}");
}

#[test]
fn lars_decreases_a_convex_quadratic() {
    let mut store = quadratic_store(&[4.0, -2.0, 0.5]);
    let mut opt = Lars::new(LarsConfig {
        trust: 0.1,
        weight_decay: 0.0,
        momentum: 0.9,
    });
    let (start, _) = quadratic(&store, 1.0);
    let mut values = vec![start];
    for _ in 0..50 {
        let (_, g) = quadratic(&store, 1.0);
        opt.step(&mut store, &g, 0.5).unwrap();
        values.push(quadratic(&store, 1.0).0);
    }
    assert!(values.iter().all(|v| v.is_finite()));
    assert!(*values.last().unwrap() < 0.5 * start);
}

#[test]
fn optimizers_refuse_non_finite_gradients() {
    let mut store = quadratic_store(&[1.0, 2.0]);
    let before = store.clone();
    let mut g = BTreeMap::new();
    g.insert("w".to_string(), Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
    assert!(Lars::new(LarsConfig::default()).step(&mut store, &g, 0.1).is_err());
    assert!(Sgd::new(0.9, 0.0).step(&mut store, &g, 0.1).is_err());
    assert_eq!(store, before);
}

#[test]
fn ema_matches_the_closed_form() {
    let mut online = ParamStore::new();
    online
        .insert("encoder.w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), Role::Weight)
        .unwrap();
    online
        .insert("encoder.bn.running_mean", Tensor::new(vec![1], vec![5.0]).unwrap(), Role::RunningStat)
        .unwrap();
    let mut target = online.clone();
    *target.tensor_mut("encoder.w").unwrap() = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    *target.tensor_mut("encoder.bn.running_mean").unwrap() = Tensor::new(vec![1], vec![0.0]).unwrap();
    let omega: f64 = 0.9;
    for _ in 0..10 {
        ema_update(&mut target, &online, omega).unwrap();
    }
    let want = 1.0 - omega.powi(10);
    let got = target.tensor("encoder.w").unwrap().data();
    assert!((got[0] - want).abs() < 1e-12 && (got[1] + want).abs() < 1e-12);
    assert_eq!(target.tensor("encoder.bn.running_mean").unwrap().data(), &[5.0]);
}

#[test]
fn ema_rejects_mismatched_keys() {
    let mut online = ParamStore::<f64>::new();
    online.insert("encoder.a", Tensor::zeros(vec![1]), Role::Weight).unwrap();
    let mut target = ParamStore::new();
    target.insert("encoder.b", Tensor::zeros(vec![1]), Role::Weight).unwrap();
    assert!(matches!(
        ema_update(&mut target, &online, 0.9),
        Err(pgl_core::Error::KeyMismatch(_))
    ));
}

#[test]
fn schedules_hit_their_endpoints() {
    let (base, total) = (0.2, 100);
    assert!((ema_omega(0, total, 0.996) - 0.996).abs() < 1e-12);
    assert!((ema_omega(total, total, 0.996) - 1.0).abs() < 1e-12);
    let mut last = 0.0;
    for s in 0..=total {
        let m = ema_omega(s, total, 0.996);
        assert!(m >= last - 1e-15);
        last = m;
    }
    assert!(cosine_lr(total, total, 0, base) < 1e-12);
    assert!((cosine_lr(0, total, 0, base) - base).abs() < 1e-12);
}
