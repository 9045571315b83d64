use std::collections::BTreeMap;
use std::path::PathBuf;

use pgl_core::data::{check_disjoint, preprocess, sample_patch, synth_generate, DatasetManifest, Split, SynthSpec, Volume};
use pgl_core::networks::{
    encode, init_online, init_segmentation, segment, target_from_online, Bound, NetworkConfig, ParamStore, PredictorMode,
    Role, ENCODER, PREDICTOR, PROJECTOR, SEG_HEAD,
};
use pgl_core::rng::{stream, streams};
use pgl_core::tensor::{Tape, Tensor};
use pgl_core::trainer::Checkpoint;
use pgl_core::Error;

fn trainable_with_prefix(store: &ParamStore<f32>, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(k, p)| k.starts_with(prefix) && p.role.is_trainable())
        .map(|(_, p)| p.value.numel())
        .sum()
}

#[test]
fn desk_parameter_counts() {
    let net = NetworkConfig::desk();
    let online = init_online::<f32>(&net, &mut stream(0, streams::INIT)).unwrap();
    // stem 27*8 + bn 16; stage0 2*(8*8*27 + 16) + proj 64 + 16;
    // stage1 8*16*27 + 32 + 16*16*27 + 32 + proj 128 + 32
    assert_eq!(trainable_with_prefix(&online, ENCODER), 232 + 3568 + 10592);
    // 16->32 conv, bn, 32->16 conv with bias
    assert_eq!(trainable_with_prefix(&online, PROJECTOR), 512 + 64 + 512 + 16);
    assert_eq!(trainable_with_prefix(&online, PREDICTOR), 1104);
    assert_eq!(online.num_trainable(), 16600);

    let mut ident = net.clone();
    ident.predictor_mode = PredictorMode::Identity;
    let online = init_online::<f32>(&ident, &mut stream(0, streams::INIT)).unwrap();
    assert_eq!(trainable_with_prefix(&online, PREDICTOR), 0);
}

#[test]
fn target_mirrors_online_encoder_and_projector() {
    let online = init_online::<f32>(&NetworkConfig::desk(), &mut stream(1, streams::INIT)).unwrap();
    let target = target_from_online(&online);
    assert!(target.names().all(|k| k.starts_with(ENCODER) || k.starts_with(PROJECTOR)));
    for (k, p) in target.iter() {
        assert_eq!(&p.value, online.tensor(k).unwrap());
    }
    assert_eq!(
        target.len(),
        online.names().filter(|k| !k.starts_with(PREDICTOR)).count()
    );
}

#[test]
fn fresh_parameters_follow_their_init() {
    let online = init_online::<f32>(&NetworkConfig::desk(), &mut stream(2, streams::INIT)).unwrap();
    for (k, p) in online.iter() {
        let d = p.value.data();
        match p.role {
            Role::Weight => assert!(d.iter().all(|v| v.abs() <= 0.04 + 1e-6), "{k}"),
            Role::Bias | Role::NormShift => assert!(d.iter().all(|&v| v == 0.0), "{k}"),
            Role::NormScale => assert!(d.iter().all(|&v| v == 1.0), "{k}"),
            Role::RunningStat => {}
        }
    }
}

#[test]
fn encoding_is_deterministic_and_seed_dependent() {
    let net = NetworkConfig::desk();
    let x = Tensor::<f32>::from_fn(vec![2, 1, 8, 32, 32], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
    let run = |seed: u64| {
        let store = init_online::<f32>(&net, &mut stream(seed, streams::INIT)).unwrap();
        let mut tape = Tape::new();
        let mut b = Bound::bind(&mut tape, &store, true, |_| false);
        let xv = tape.constant(x.clone());
        let f = encode(&mut tape, &mut b, xv, &net.encoder).unwrap();
        tape.value(f).clone()
    };
    let a = run(3);
    assert_eq!(a.shape(), &[2, 16, 2, 4, 4]);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
}

#[test]
fn segmentation_output_matches_input_resolution() {
    let net = NetworkConfig::desk();
    let store = init_segmentation::<f32>(&net, 3, &mut stream(5, streams::INIT)).unwrap();
    assert!(store.names().any(|k| k.starts_with(SEG_HEAD)));
    let mut tape = Tape::new();
    let mut b = Bound::bind(&mut tape, &store, false, |_| false);
    let x = tape.constant(Tensor::zeros(vec![1, 1, 8, 32, 32]));
    let y = segment(&mut tape, &mut b, x, &net).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 8, 32, 32]);
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let net = NetworkConfig::desk();
    let online = init_online::<f32>(&net, &mut stream(6, streams::INIT)).unwrap();
    let target = target_from_online(&online);
    let mut opt = BTreeMap::new();
    opt.insert("encoder.stem.conv.weight".to_string(), Tensor::full(vec![3], 0.25f32));
    let ckpt = Checkpoint {
        online: online.clone(),
        target: target.clone(),
        opt,
        step: 42,
        rng: [1, 2, 3, 4, 5, 6, 7],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.pgl");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, &online, &target).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn checkpoint_errors_are_typed() {
    let net = NetworkConfig::desk();
    let online = init_online::<f32>(&net, &mut stream(7, streams::INIT)).unwrap();
    let target = target_from_online(&online);
    let ckpt = Checkpoint {
        online: online.clone(),
        target: target.clone(),
        opt: BTreeMap::new(),
        step: 0,
        rng: [0; 7],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.pgl");
    ckpt.save(&path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.pgl");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        Checkpoint::load(&cut, &online, &target),
        Err(Error::Truncated { .. } | Error::Format(_))
    ));

    let mut other = NetworkConfig::desk();
    other.encoder.widths = vec![8, 24];
    let wrong = init_online::<f32>(&other, &mut stream(7, streams::INIT)).unwrap();
    assert!(matches!(
        Checkpoint::load(&path, &wrong, &target_from_online(&wrong)),
        Err(Error::KeyMismatch(_))
    ));

    let missing = dir.path().join("absent.pgl");
    assert!(Checkpoint::load(&missing, &online, &target).is_err());
}

#[test]
fn volumes_round_trip_through_disk() {
    let spec = SynthSpec {
        dims: [6, 10, 12],
        ..SynthSpec::default()
    };
    let vol = synth_generate(&spec, &mut stream(8, streams::SYNTH)).unwrap();
    assert_eq!(vol.dims(), [6, 10, 12]);
    assert!(vol.labels().unwrap().iter().all(|&l| (l as usize) < spec.num_classes));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.rvf");
    vol.save(&path).unwrap();
    let back = Volume::load(&path).unwrap();
    assert_eq!(back.dims(), vol.dims());
    assert_eq!(back.values(), vol.values());
    assert_eq!(back.labels(), vol.labels());
    assert!(Volume::from_bytes(b"nope").is_err());
}

#[test]
fn synthetic_volumes_depend_only_on_seed() {
    let spec = SynthSpec::default();
    let a = synth_generate(&spec, &mut stream(9, streams::SYNTH)).unwrap();
    let b = synth_generate(&spec, &mut stream(9, streams::SYNTH)).unwrap();
    let c = synth_generate(&spec, &mut stream(10, streams::SYNTH)).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
}

#[test]
fn preprocess_clips_then_standardizes() {
    let vol = Volume::new([1, 1, 4], vec![-3000.0, 0.0, 100.0, 5000.0], None).unwrap();
    let out = preprocess(&vol, -1024.0, 325.0).unwrap();
    let v = out.values();
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / 4.0;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
    // the two clipped extremes keep their order at the ends
    assert!(v[0] < v[1] && v[1] < v[2] && v[2] < v[3]);
    assert!(preprocess(&vol, 1.0, 1.0).is_err());
}

#[test]
fn patches_stay_inside_the_volume() {
    let vol = synth_generate(&SynthSpec::default(), &mut stream(11, streams::SYNTH)).unwrap();
    let mut rng = stream(11, streams::DATA);
    for _ in 0..200 {
        let p = sample_patch(&vol, [8, 32, 32], &mut rng).unwrap();
        for a in 0..3 {
            assert!(p.origin[a] + [8, 32, 32][a] <= vol.dims()[a]);
        }
        assert_eq!(p.labels.as_ref().unwrap().len(), 8 * 32 * 32);
    }
    assert!(sample_patch(&vol, [64, 1, 1], &mut rng).is_err());
}

#[test]
fn manifests_parse_and_resolve_paths() {
    let m = DatasetManifest::parse("# split=train seed=3\na.rvf\n\n/abs/b.rvf\n", std::path::Path::new("/data")).unwrap();
    assert_eq!(m.split, Split::Train);
    assert_eq!(m.seed, 3);
    assert_eq!(m.paths, vec![PathBuf::from("/data/a.rvf"), PathBuf::from("/abs/b.rvf")]);
    assert!(DatasetManifest::parse("a.rvf\n", std::path::Path::new(".")).is_err());
    assert!(DatasetManifest::parse("# split=bogus seed=1\n", std::path::Path::new(".")).is_err());

    let other = DatasetManifest {
        split: Split::Val,
        seed: 0,
        paths: vec![PathBuf::from("/data/a.rvf")],
    };
    assert!(check_disjoint(&[&m, &other]).is_err());
}
