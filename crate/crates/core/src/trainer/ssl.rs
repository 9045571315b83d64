use std::collections::BTreeMap;

use crate::align::{align_pair, AlignConfig};
use crate::augment::{TransformRecord, ViewPair};
use crate::error::{Error, Result};
use crate::loss::{global_consistency, local_consistency, total_ssl_loss, LossConfig};
use crate::networks::{encode, predict, project, target_from_online, Bound, NetworkConfig, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::ema::ema_update;
use super::optim::{Lars, LarsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Both role orders on one tape, one backward pass.
    Fused,
    /// One tape and backward pass per role order; gradients are summed.
    Sequential,
}

/// Everything the SSL forward pass needs besides parameters.
#[derive(Clone, Copy, Debug)]
pub struct SslModel<'a> {
    pub net: &'a NetworkConfig,
    pub align: &'a AlignConfig,
    pub loss: &'a LossConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslState {
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub opt: Lars<f32>,
    pub step: u64,
}

impl SslState {
    /// Target starts as an exact copy of the online encoder and projector.
    pub fn new(online: ParamStore<f32>, lars: LarsConfig) -> Self {
        SslState {
            target: target_from_online(&online),
            online,
            opt: Lars::new(lars),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub omega: f64,
    pub skipped_pairs: usize,
    /// L2 norm of the gradient that reached target parameters.
    pub target_grad_norm: f64,
}

/// Stack both views of every pair into `N x 1 x D x H x W` batches.
pub fn stack_views(pairs: &[ViewPair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let add_channel = |t: &Tensor<f32>| t.clone().reshape([vec![1], t.shape().to_vec()].concat());
    let v1 = pairs.iter().map(|p| add_channel(&p.view1)).collect::<Result<Vec<_>>>()?;
    let v2 = pairs.iter().map(|p| add_channel(&p.view2)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&v1)?, Tensor::stack(&v2)?))
}

/// One role order: `xa` through the online path, `xb` through the target
/// path under stop-gradient. Returns the loss term and the number of pairs
/// dropped for lack of overlap, or `None` when every pair was dropped.
#[allow(clippy::too_many_arguments)]
pub fn role_order_term<T: Scalar>(
    tape: &mut Tape<T>,
    online: &mut Bound<T>,
    target: &mut Bound<T>,
    xa: Var,
    xb: Var,
    recs_a: &[TransformRecord],
    recs_b: &[TransformRecord],
    model: SslModel,
) -> Result<(Option<Var>, usize)> {
    let enc = &model.net.encoder;
    let f = encode(tape, online, xa, enc)?;
    let f_online = project(tape, online, f)?;
    let g = encode(tape, target, xb, enc)?;
    let g = project(tape, target, g)?;
    let f_target = tape.stop_gradient(g);
    if !model.align.use_flipalign && !model.align.use_csalign {
        let p = predict(tape, online, f_online, model.net.predictor_mode)?;
        return Ok((Some(global_consistency(tape, p, f_target, model.loss)?), 0));
    }
    let n = tape.shape(xa)[0];
    let aligned = align_pair(
        tape,
        f_online,
        f_target,
        recs_a,
        recs_b,
        enc.output_stride(),
        model.align,
    )?;
    let Some(aligned) = aligned else {
        return Ok((None, n));
    };
    let p = predict(tape, online, aligned.online, model.net.predictor_mode)?;
    let term = local_consistency(tape, p, aligned.target, model.loss)?;
    Ok((Some(term), aligned.skipped))
}

fn grad_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

fn add_grads(acc: &mut BTreeMap<String, Tensor<f32>>, grads: BTreeMap<String, Tensor<f32>>) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

/// Symmetrized loss, LARS update of the online store, then the EMA update
/// of the target with `omega`.
pub fn ssl_train_step(
    state: &mut SslState,
    batch: &[ViewPair],
    model: SslModel,
    lr: f64,
    omega: f64,
    mode: StepMode,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (x1, x2) = stack_views(batch)?;
    let rec1: Vec<TransformRecord> = batch.iter().map(|p| p.rec1.clone()).collect();
    let rec2: Vec<TransformRecord> = batch.iter().map(|p| p.rec2.clone()).collect();
    let orders = [(&x1, &x2, &rec1, &rec2), (&x2, &x1, &rec2, &rec1)];

    let mut loss = 0.0;
    let mut skipped = 0;
    let mut terms_seen = 0;
    let mut grads = BTreeMap::new();
    let mut target_grads = BTreeMap::new();
    match mode {
        StepMode::Fused => {
            let mut tape = Tape::new();
            let mut ob = Bound::bind(&mut tape, &state.online, true, |_| true);
            let mut tb = Bound::bind(&mut tape, &state.target, true, |_| true);
            let mut terms = Vec::new();
            for (xa, xb, ra, rb) in orders {
                let a = tape.constant(xa.clone());
                let b = tape.constant(xb.clone());
                let (term, s) = role_order_term(&mut tape, &mut ob, &mut tb, a, b, ra, rb, model)?;
                skipped += s;
                terms.extend(term);
            }
            if !terms.is_empty() {
                terms_seen = terms.len();
                let total = total_ssl_loss(&mut tape, &terms)?;
                loss = tape.value(total).item().as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFinite { name: "loss".into() });
                }
                tape.backward(total)?;
                grads = ob.grads(&tape);
                target_grads = tb.grads(&tape);
                ob.commit(&mut state.online)?;
            }
        }
        StepMode::Sequential => {
            for (xa, xb, ra, rb) in orders {
                let mut tape = Tape::new();
                let mut ob = Bound::bind(&mut tape, &state.online, true, |_| true);
                let mut tb = Bound::bind(&mut tape, &state.target, true, |_| true);
                let a = tape.constant(xa.clone());
                let b = tape.constant(xb.clone());
                let (term, s) = role_order_term(&mut tape, &mut ob, &mut tb, a, b, ra, rb, model)?;
                skipped += s;
                let Some(term) = term else { continue };
                terms_seen += 1;
                let value = tape.value(term).item().as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite { name: "loss".into() });
                }
                loss += value;
                tape.backward(term)?;
                add_grads(&mut grads, ob.grads(&tape));
                add_grads(&mut target_grads, tb.grads(&tape));
                ob.commit(&mut state.online)?;
            }
        }
    }
    let step = state.step;
    if terms_seen == 0 {
        log::warn!("step {step}: no pair had overlapping views; update skipped");
        state.step += 1;
        return Ok(StepMetrics {
            step,
            loss: 0.0,
            lr,
            omega,
            skipped_pairs: skipped,
            target_grad_norm: 0.0,
        });
    }
    state.opt.step(&mut state.online, &grads, lr)?;
    ema_update(&mut state.target, &state.online, omega)?;
    state.step += 1;
    Ok(StepMetrics {
        step,
        loss,
        lr,
        omega,
        skipped_pairs: skipped,
        target_grad_norm: grad_norm(&target_grads),
    })
}
