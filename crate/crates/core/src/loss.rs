//! Training objectives: the local consistency loss between aligned feature
//! maps and the Dice + cross-entropy segmentation losses.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub norm_eps: f64,
    pub dice_eps: f64,
    /// Also divide the consistency loss by the channel count.
    pub normalize_channels: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            norm_eps: 1e-12,
            dice_eps: 1e-5,
            normalize_channels: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.norm_eps > 0.0 && self.dice_eps > 0.0) {
            return Err(Error::Config("loss eps values must be positive".into()));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        });
    }
    Ok(())
}

/// Squared distance between channel-normalized `online` and `target`,
/// summed over channels and averaged over batch and spatial positions.
/// The caller stops gradients on `target`.
pub fn local_consistency<T: Scalar>(tape: &mut Tape<T>, online: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    same_shape(tape, "local_consistency", online, target)?;
    let shape = tape.shape(online).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("local_consistency", format!("need N x C x ..., got {shape:?}")));
    }
    let p = tape.l2_normalize(online, cfg.norm_eps)?;
    let z = tape.l2_normalize(target, cfg.norm_eps)?;
    let diff = tape.sub(p, z)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let mut positions = shape[0] * shape[2..].iter().product::<usize>();
    if cfg.normalize_channels {
        positions *= shape[1];
    }
    Ok(tape.scale(total, 1.0 / positions as f64))
}

/// Consistency of globally averaged features; the loss used when both
/// alignment stages are disabled.
pub fn global_consistency<T: Scalar>(tape: &mut Tape<T>, online: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    let p = tape.global_avg_pool(online)?;
    let z = tape.global_avg_pool(target)?;
    local_consistency(tape, p, z, cfg)
}

/// Sum of the two role-order terms.
pub fn total_ssl_loss<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::Invalid("total loss over zero terms".into()))?;
    it.try_fold(first, |acc, t| tape.add(acc, t))
}

/// `1 - 2 sum(p y) / sum(p + y + eps)` over all elements of `p`.
fn dice_term<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var, eps: f64) -> Result<Var> {
    let n = tape.shape(p).iter().product::<usize>() as f64;
    let inter = tape.mul(p, y)?;
    let inter = tape.sum(inter);
    let sp = tape.sum(p);
    let sy = tape.sum(y);
    let denom = tape.add(sp, sy)?;
    let denom = tape.add_scalar(denom, eps * n);
    let ratio = tape.div(inter, denom)?;
    let ratio = tape.scale(ratio, -2.0);
    Ok(tape.add_scalar(ratio, 1.0))
}

/// Binary Dice term plus binary cross-entropy; `prob` holds sigmoid outputs.
pub fn dice_ce_binary<T: Scalar>(tape: &mut Tape<T>, prob: Var, gt: Var, eps: f64) -> Result<Var> {
    same_shape(tape, "dice_ce_binary", prob, gt)?;
    let dice = dice_term(tape, prob, gt, eps)?;
    let log_p = tape.log_clamped(prob, LOG_CLAMP);
    let neg_p = tape.scale(prob, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.log_clamped(one_minus_p, LOG_CLAMP);
    let neg_y = tape.scale(gt, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let a = tape.mul(gt, log_p)?;
    let b = tape.mul(one_minus_y, log_q)?;
    let ll = tape.add(a, b)?;
    let ll = tape.mean(ll);
    tape.sub(dice, ll)
}

/// Mean over classes of the per-class Dice term minus `E[y_c log p_c]`;
/// `prob` is a channel softmax and `gt_onehot` has the same `N x C x ...` shape.
pub fn dice_ce_multiclass<T: Scalar>(tape: &mut Tape<T>, prob: Var, gt_onehot: Var, eps: f64, classes: usize) -> Result<Var> {
    same_shape(tape, "dice_ce_multiclass", prob, gt_onehot)?;
    let shape = tape.shape(prob).to_vec();
    if shape.len() < 2 || shape[1] != classes || classes == 0 {
        return Err(Error::shape(
            "dice_ce_multiclass",
            format!("{classes} classes but prediction shape {shape:?}"),
        ));
    }
    let positions = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
    // per-class sums, each of shape [C]
    let inter = tape.mul(prob, gt_onehot)?;
    let inter = tape.sum_per_channel(inter)?;
    let sp = tape.sum_per_channel(prob)?;
    let sy = tape.sum_per_channel(gt_onehot)?;
    let denom = tape.add(sp, sy)?;
    let denom = tape.add_scalar(denom, eps * positions);
    let ratio = tape.div(inter, denom)?;
    let ratio = tape.scale(ratio, -2.0);
    let dice = tape.add_scalar(ratio, 1.0);
    let log_p = tape.log_clamped(prob, LOG_CLAMP);
    let ll = tape.mul(gt_onehot, log_p)?;
    let ll = tape.sum_per_channel(ll)?;
    let ll = tape.scale(ll, 1.0 / positions);
    let per_class = tape.sub(dice, ll)?;
    Ok(tape.mean(per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn consistency_known_values() {
        let t = |v: Vec<f64>| Tensor::new(vec![1, 2, 1, 1, 2], v).unwrap();
        let cfg = LossConfig::default();
        let same = eval(|tp| {
            let a = tp.constant(t(vec![1.0, 2.0, 3.0, 4.0]));
            let b = tp.constant(t(vec![2.0, 4.0, 6.0, 8.0]));
            local_consistency(tp, a, b, &cfg).unwrap()
        });
        assert!(same.abs() < 1e-12);
        let opposite = eval(|tp| {
            let a = tp.constant(t(vec![1.0, 2.0, 3.0, 4.0]));
            let b = tp.constant(t(vec![-1.0, -2.0, -3.0, -4.0]));
            local_consistency(tp, a, b, &cfg).unwrap()
        });
        assert!((opposite - 4.0).abs() < 1e-12);
        let orth = eval(|tp| {
            let a = tp.constant(t(vec![1.0, 0.0, 0.0, 1.0]));
            let b = tp.constant(t(vec![0.0, 1.0, 1.0, 0.0]));
            local_consistency(tp, a, b, &cfg).unwrap()
        });
        assert!((orth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn binary_dice_arithmetic() {
        let y = Tensor::new(vec![8], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = Tensor::new(vec![8], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let eps = 1e-5;
        let got = eval(|tp| {
            let (p, y) = (tp.constant(p), tp.constant(y));
            dice_term(tp, p, y, eps).unwrap()
        });
        assert!((got - (1.0 - 4.0 / (8.0 + 8.0 * eps))).abs() < 1e-12);
    }

    #[test]
    fn empty_foreground_dice_is_one() {
        let z = Tensor::<f64>::zeros(vec![2, 3]);
        let total = eval(|tp| {
            let (p, y) = (tp.constant(z.clone()), tp.constant(z.clone()));
            dice_ce_binary(tp, p, y, 1e-5).unwrap()
        });
        // Dice term 1, cross-entropy -log(1 - 0) = 0
        assert!((total - 1.0).abs() < 1e-12);
    }
}
