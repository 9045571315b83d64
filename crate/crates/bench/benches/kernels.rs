use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pgl_core::align::{align_pair, compute_overlap, AlignConfig};
use pgl_core::augment::{sample_crop_pair, AugmentConfig};
use pgl_core::rng::{stream, streams};
use pgl_core::tensor::{ConvGeom, Tape, Tensor};

fn conv3d(c: &mut Criterion) {
    let x = Tensor::<f32>::from_fn(vec![2, 8, 8, 32, 32], |i| ((i % 17) as f32 - 8.0) * 0.1);
    let w = Tensor::<f32>::from_fn(vec![16, 8, 3, 3, 3], |i| ((i % 7) as f32 - 3.0) * 0.05);
    let geom = ConvGeom {
        padding: [1; 3],
        ..ConvGeom::default()
    };
    c.bench_function("conv3d_forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            black_box(tape.conv3d(xv, wv, None, geom).unwrap());
        })
    });
    c.bench_function("conv3d_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv3d(xv, wv, None, geom).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(&tape);
        })
    });
}

fn alignment(c: &mut Criterion) {
    let view = [8, 32, 32];
    let source = [12, 45, 45];
    let cfg = AugmentConfig::default();
    let mut rng = stream(7, streams::AUGMENT);
    let pairs: Vec<_> = (0..256)
        .map(|_| sample_crop_pair(source, view, &cfg, &mut rng).unwrap())
        .collect();
    c.bench_function("compute_overlap_256", |b| {
        b.iter(|| {
            for (r1, r2) in &pairs {
                black_box(compute_overlap(r1, r2));
            }
        })
    });

    let n = 4;
    let recs1: Vec<_> = pairs[..n].iter().map(|p| p.0.clone()).collect();
    let recs2: Vec<_> = pairs[..n].iter().map(|p| p.1.clone()).collect();
    let feats = Tensor::<f32>::from_fn(vec![n, 32, 2, 4, 4], |i| (i % 11) as f32);
    let align = AlignConfig::default();
    c.bench_function("align_pair_batch4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let f1 = tape.leaf(feats.clone(), true);
            let f2 = tape.constant(feats.clone());
            black_box(align_pair(&mut tape, f1, f2, &recs1, &recs2, [4, 8, 8], &align).unwrap());
        })
    });
}

criterion_group!(benches, conv3d, alignment);
criterion_main!(benches);
