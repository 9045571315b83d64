//! Encoder, projector/predictor heads and the segmentation network.
//!
//! All forward functions read parameters through a [`Bound`] store on a
//! [`Tape`]. Parameter names are dotted paths such as
//! `encoder.stage1.block0.conv1.weight`.

mod config;
mod store;

use std::sync::Arc;

pub use config::{EncoderConfig, HeadConfig, NetworkConfig, PredictorMode, SegConfig};
pub use store::{truncated_normal, Bound, Param, ParamStore, Role};

use store::Init;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{resize_map, ConvGeom, Scalar, Tape, Var};

pub const ENCODER: &str = "encoder.";
pub const PROJECTOR: &str = "projector.";
pub const PREDICTOR: &str = "predictor.";
pub const SEG_HEAD: &str = "seg.";

fn conv<T: Scalar>(tape: &mut Tape<T>, b: &Bound<T>, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias_name = format!("{name}.bias");
    let bias = if b.has(&bias_name) { Some(b.var(&bias_name)?) } else { None };
    tape.conv3d(x, w, bias, geom)
}

fn pad_for(k: usize, dilation: usize) -> [usize; 3] {
    [dilation * (k - 1) / 2; 3]
}

fn init_encoder<T: Scalar>(init: &mut Init<T>, cfg: &EncoderConfig) -> Result<()> {
    let stem = cfg.stem_channels;
    init.conv("encoder.stem.conv", cfg.in_channels, stem, cfg.stem_kernel, 1, false)?;
    init.batch_norm("encoder.stem.bn", stem)?;
    let mut cin = stem;
    for (s, (&blocks, &width)) in cfg.blocks.iter().zip(&cfg.widths).enumerate() {
        for j in 0..blocks {
            let p = format!("encoder.stage{s}.block{j}");
            let stride = if j == 0 { cfg.strides[s] } else { [1; 3] };
            if cfg.bottleneck {
                let mid = width / 4;
                init.conv(&format!("{p}.conv1"), cin, mid, 1, 1, false)?;
                init.batch_norm(&format!("{p}.bn1"), mid)?;
                init.conv(&format!("{p}.conv2"), mid, mid, 3, 1, false)?;
                init.batch_norm(&format!("{p}.bn2"), mid)?;
                init.conv(&format!("{p}.conv3"), mid, width, 1, 1, false)?;
                init.batch_norm(&format!("{p}.bn3"), width)?;
            } else {
                init.conv(&format!("{p}.conv1"), cin, width, 3, 1, false)?;
                init.batch_norm(&format!("{p}.bn1"), width)?;
                init.conv(&format!("{p}.conv2"), width, width, 3, 1, false)?;
                init.batch_norm(&format!("{p}.bn2"), width)?;
            }
            if cin != width || stride != [1; 3] {
                init.conv(&format!("{p}.proj.conv"), cin, width, 1, 1, false)?;
                init.batch_norm(&format!("{p}.proj.bn"), width)?;
            }
            cin = width;
        }
    }
    Ok(())
}

fn init_head<T: Scalar>(init: &mut Init<T>, prefix: &str, cin: usize, cfg: HeadConfig) -> Result<()> {
    init.conv(&format!("{prefix}conv1"), cin, cfg.hidden, 1, 1, false)?;
    init.batch_norm(&format!("{prefix}bn"), cfg.hidden)?;
    init.conv(&format!("{prefix}conv2"), cfg.hidden, cfg.out, 1, 1, true)
}

/// Online store: encoder, projector and (unless identity) predictor.
pub fn init_online<T: Scalar>(cfg: &NetworkConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng,
        kaiming: false,
    };
    init_encoder(&mut init, &cfg.encoder)?;
    init_head(&mut init, PROJECTOR, cfg.encoder.out_channels(), cfg.projector)?;
    if cfg.predictor_mode == PredictorMode::Mlp {
        init_head(&mut init, PREDICTOR, cfg.projector.out, cfg.predictor)?;
    }
    Ok(store)
}

/// Target store: a copy of the online encoder and projector.
pub fn target_from_online<T: Scalar>(online: &ParamStore<T>) -> ParamStore<T> {
    let mut t = online.filter_prefix(ENCODER);
    for (k, p) in online.iter().filter(|(k, _)| k.starts_with(PROJECTOR)) {
        t.insert(k, p.value.clone(), p.role).expect("disjoint prefixes");
    }
    t
}

/// Segmentation store: a freshly initialized encoder plus the ASPP/decoder
/// head (the head uses Kaiming-uniform init).
pub fn init_segmentation<T: Scalar>(cfg: &NetworkConfig, num_classes: usize, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng,
        kaiming: false,
    };
    init_encoder(&mut init, enc)?;
    init.kaiming = true;
    let a = cfg.seg.aspp_channels;
    let cin = enc.out_channels();
    init.conv("seg.aspp.b0.conv", cin, a, 1, 1, false)?;
    init.batch_norm("seg.aspp.b0.bn", a)?;
    init.conv("seg.aspp.pool.conv", cin, a, 1, 1, true)?;
    for r in 0..3 {
        init.conv(&format!("seg.aspp.sep{r}.depthwise"), cin, cin, 3, cin, false)?;
        init.conv(&format!("seg.aspp.sep{r}.pointwise"), cin, a, 1, 1, false)?;
        init.batch_norm(&format!("seg.aspp.sep{r}.bn"), a)?;
    }
    init.conv("seg.aspp.fuse.conv", 5 * a, a, 1, 1, false)?;
    init.batch_norm("seg.aspp.fuse.bn", a)?;
    let mut c = a;
    for k in (0..enc.widths.len() - 1).rev() {
        let skip = enc.widths[k];
        let p = format!("seg.decoder{k}");
        init.conv_transpose(&format!("{p}.up"), c, skip, enc.strides[k + 1])?;
        init.conv(&format!("{p}.depthwise"), skip, skip, 3, skip, false)?;
        init.conv(&format!("{p}.pointwise"), skip, skip, 1, 1, false)?;
        init.batch_norm(&format!("{p}.bn"), skip)?;
        c = skip;
    }
    init.conv("seg.head", c, num_classes, 1, 1, true)?;
    Ok(store)
}

fn residual_block<T: Scalar>(
    tape: &mut Tape<T>,
    b: &mut Bound<T>,
    p: &str,
    x: Var,
    stride: [usize; 3],
    bottleneck: bool,
) -> Result<Var> {
    let k3 = ConvGeom::default().padding([1; 3]);
    let body = if bottleneck {
        let h = conv(tape, b, &format!("{p}.conv1"), x, ConvGeom::default())?;
        let h = b.batch_norm(tape, &format!("{p}.bn1"), h)?;
        let h = tape.relu(h);
        let h = conv(tape, b, &format!("{p}.conv2"), h, k3.stride(stride))?;
        let h = b.batch_norm(tape, &format!("{p}.bn2"), h)?;
        let h = tape.relu(h);
        let h = conv(tape, b, &format!("{p}.conv3"), h, ConvGeom::default())?;
        b.batch_norm(tape, &format!("{p}.bn3"), h)?
    } else {
        let h = conv(tape, b, &format!("{p}.conv1"), x, k3.stride(stride))?;
        let h = b.batch_norm(tape, &format!("{p}.bn1"), h)?;
        let h = tape.relu(h);
        let h = conv(tape, b, &format!("{p}.conv2"), h, k3)?;
        b.batch_norm(tape, &format!("{p}.bn2"), h)?
    };
    let skip = if b.has(&format!("{p}.proj.conv.weight")) {
        let s = conv(tape, b, &format!("{p}.proj.conv"), x, ConvGeom::default().stride(stride))?;
        b.batch_norm(tape, &format!("{p}.proj.bn"), s)?
    } else {
        x
    };
    let sum = tape.add(body, skip)?;
    Ok(tape.relu(sum))
}

/// Encoder features after every stage; the last entry is the encoder output.
pub fn encode_levels<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, x: Var, cfg: &EncoderConfig) -> Result<Vec<Var>> {
    let [_, _, d, h, w] = tape.value(x).dims5("encode")?;
    cfg.check_input([d, h, w])?;
    let stem = ConvGeom::default()
        .stride(cfg.stem_stride)
        .padding(pad_for(cfg.stem_kernel, 1));
    let mut y = conv(tape, b, "encoder.stem.conv", x, stem)?;
    y = b.batch_norm(tape, "encoder.stem.bn", y)?;
    y = tape.relu(y);
    let mut levels = Vec::with_capacity(cfg.blocks.len());
    for (s, &blocks) in cfg.blocks.iter().enumerate() {
        for j in 0..blocks {
            let stride = if j == 0 { cfg.strides[s] } else { [1; 3] };
            y = residual_block(tape, b, &format!("encoder.stage{s}.block{j}"), y, stride, cfg.bottleneck)?;
        }
        levels.push(y);
    }
    Ok(levels)
}

pub fn encode<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    Ok(*encode_levels(tape, b, x, cfg)?.last().expect("at least one stage"))
}

fn head<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, prefix: &str, f: Var) -> Result<Var> {
    let h = conv(tape, b, &format!("{prefix}conv1"), f, ConvGeom::default())?;
    let h = b.batch_norm(tape, &format!("{prefix}bn"), h)?;
    let h = tape.relu(h);
    conv(tape, b, &format!("{prefix}conv2"), h, ConvGeom::default())
}

pub fn project<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, f: Var) -> Result<Var> {
    head(tape, b, PROJECTOR, f)
}

pub fn predict<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, f: Var, mode: PredictorMode) -> Result<Var> {
    match mode {
        PredictorMode::Mlp => head(tape, b, PREDICTOR, f),
        PredictorMode::Identity => Ok(f),
    }
}

fn separable<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, p: &str, x: Var, dilation: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let dw = ConvGeom::default()
        .padding(pad_for(3, dilation))
        .dilation([dilation; 3])
        .groups(c);
    let h = conv(tape, b, &format!("{p}.depthwise"), x, dw)?;
    let h = conv(tape, b, &format!("{p}.pointwise"), h, ConvGeom::default())?;
    let h = b.batch_norm(tape, &format!("{p}.bn"), h)?;
    Ok(tape.relu(h))
}

fn aspp<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, f: Var, rates: [usize; 3]) -> Result<Var> {
    let [_, _, d, h, w] = tape.value(f).dims5("aspp")?;
    let b0 = conv(tape, b, "seg.aspp.b0.conv", f, ConvGeom::default())?;
    let b0 = b.batch_norm(tape, "seg.aspp.b0.bn", b0)?;
    let b0 = tape.relu(b0);
    let pooled = tape.global_avg_pool(f)?;
    let pooled = conv(tape, b, "seg.aspp.pool.conv", pooled, ConvGeom::default())?;
    let pooled = tape.relu(pooled);
    let pooled = tape.broadcast_spatial(pooled, [d, h, w])?;
    let mut branches = vec![b0, pooled];
    for (r, &rate) in rates.iter().enumerate() {
        branches.push(separable(tape, b, &format!("seg.aspp.sep{r}"), f, rate)?);
    }
    let cat = tape.concat_channels(&branches)?;
    let y = conv(tape, b, "seg.aspp.fuse.conv", cat, ConvGeom::default())?;
    let y = b.batch_norm(tape, "seg.aspp.fuse.bn", y)?;
    Ok(tape.relu(y))
}

/// Segmentation logits `N x num_classes x D x H x W` at input resolution.
pub fn segment<T: Scalar>(tape: &mut Tape<T>, b: &mut Bound<T>, x: Var, cfg: &NetworkConfig) -> Result<Var> {
    let [_, _, d, h, w] = tape.value(x).dims5("segment")?;
    let enc = &cfg.encoder;
    let levels = encode_levels(tape, b, x, enc)?;
    let mut y = aspp(tape, b, *levels.last().expect("stages"), cfg.seg.rates)?;
    for k in (0..levels.len() - 1).rev() {
        let p = format!("seg.decoder{k}");
        let up_w = b.var(&format!("{p}.up.weight"))?;
        let up_b = b.var(&format!("{p}.up.bias"))?;
        let up = tape.conv_transpose3d(y, up_w, Some(up_b), enc.strides[k + 1])?;
        let merged = tape.add(up, levels[k])?;
        let refined = separable(tape, b, &p, merged, 1)?;
        y = tape.add(merged, refined)?;
    }
    let logits = conv(tape, b, "seg.head", y, ConvGeom::default())?;
    let [n, _, fd, fh, fw] = tape.value(logits).dims5("segment")?;
    if [fd, fh, fw] == [d, h, w] {
        return Ok(logits);
    }
    let extent = [fd as f64, fh as f64, fw as f64];
    let map = Arc::new(resize_map([fd, fh, fw], [0.0; 3], extent, [d, h, w]));
    tape.resample(logits, (0..n).map(|i| (i, map.clone())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    #[test]
    fn desk_encoder_shapes() {
        let cfg = NetworkConfig::desk();
        let store = init_online::<f32>(&cfg, &mut seeded(0)).unwrap();
        let mut tape = Tape::new();
        let mut b = Bound::bind(&mut tape, &store, false, |_| false);
        let x = tape.constant(Tensor::from_fn(vec![2, 1, 8, 32, 32], |i| (i as f32 * 0.01).sin()));
        let f = encode(&mut tape, &mut b, x, &cfg.encoder).unwrap();
        assert_eq!(tape.shape(f), &[2, 16, 2, 4, 4]);
        let p = project(&mut tape, &mut b, f).unwrap();
        assert_eq!(tape.shape(p), &[2, 16, 2, 4, 4]);
        let bad = tape.constant(Tensor::zeros(vec![1, 1, 8, 30, 32]));
        let err = encode(&mut tape, &mut b, bad, &cfg.encoder).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn target_has_no_predictor() {
        let online = init_online::<f32>(&NetworkConfig::desk(), &mut seeded(0)).unwrap();
        let target = target_from_online(&online);
        assert!(online.names().any(|k| k.starts_with(PREDICTOR)));
        assert!(!target.names().any(|k| k.starts_with(PREDICTOR)));
        assert!(target.names().all(|k| online.contains(k)));
    }

    #[test]
    fn full_strides() {
        let p = EncoderConfig::full();
        assert_eq!(p.output_stride(), [8, 16, 16]);
        assert_eq!(EncoderConfig::desk().output_stride(), [4, 8, 8]);
    }
}
