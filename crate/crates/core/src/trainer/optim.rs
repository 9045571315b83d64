use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::networks::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LarsConfig {
    pub trust: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        LarsConfig {
            trust: 0.001,
            weight_decay: 1.5e-6,
            momentum: 0.9,
        }
    }
}

fn check_finite<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((k, _)) => Err(Error::NonFinite {
            name: format!("gradient of {k}"),
        }),
        None => Ok(()),
    }
}

fn norm<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Momentum buffers keyed by parameter name, created on first use.
pub type Buffers<T> = BTreeMap<String, Tensor<T>>;

/// LARS: weights get a per-tensor trust ratio and weight decay; biases and
/// norm parameters take plain momentum SGD steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Lars<T> {
    pub cfg: LarsConfig,
    pub buffers: Buffers<T>,
}

impl<T: Scalar> Lars<T> {
    pub fn new(cfg: LarsConfig) -> Self {
        Lars {
            cfg,
            buffers: BTreeMap::new(),
        }
    }

    /// The trust ratio of one weight tensor.
    pub fn local_lr(&self, w: &Tensor<T>, g: &Tensor<T>) -> f64 {
        let (wn, gn) = (norm(w), norm(g));
        self.cfg.trust * wn / (gn + self.cfg.weight_decay * wn + 1e-12)
    }

    /// One update of every parameter in `grads`; nothing changes when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        check_finite(grads)?;
        let m = T::lit(self.cfg.momentum);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::KeyMismatch(vec![format!("gradient for unknown `{name}`")]))?;
            if !p.role.is_trainable() {
                continue;
            }
            let (scale, wd) = if p.role.is_exempt() {
                (lr, 0.0)
            } else {
                (lr * self.local_lr(&p.value, g), self.cfg.weight_decay)
            };
            let (scale, wd) = (T::lit(scale), T::lit(wd));
            let v = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = m * *vi + scale * (gi + wd * *wi);
                *wi = *wi - *vi;
            }
        }
        Ok(())
    }
}

/// Momentum SGD with optional weight decay on weights only.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Buffers<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        check_finite(grads)?;
        let (m, lr) = (T::lit(self.momentum), T::lit(lr));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::KeyMismatch(vec![format!("gradient for unknown `{name}`")]))?;
            if !p.role.is_trainable() {
                continue;
            }
            let wd = T::lit(if p.role.is_exempt() { 0.0 } else { self.weight_decay });
            let v = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = m * *vi + (gi + wd * *wi);
                *wi = *wi - lr * *vi;
            }
        }
        Ok(())
    }
}
