use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchNormCfg, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningStat,
}

impl Role {
    /// Exempt from LARS adaptation and weight decay.
    pub fn is_exempt(self) -> bool {
        !matches!(self, Role::Weight)
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, Role::RunningStat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub role: Role,
}

/// Named parameter tensors in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, role: Role) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, role });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::KeyMismatch(vec![format!("missing parameter `{name}`")]))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::KeyMismatch(vec![format!("missing parameter `{name}`")]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.role.is_trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// The entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every `prefix` entry of `src` into `self`; both sides must hold
    /// exactly the same `prefix` keys with the same shapes.
    pub fn copy_prefix_from(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<()> {
        let mine: Vec<&String> = self.params.keys().filter(|k| k.starts_with(prefix)).collect();
        let theirs: Vec<&String> = src.params.keys().filter(|k| k.starts_with(prefix)).collect();
        let mut problems = Vec::new();
        for k in &mine {
            match src.params.get(k.as_str()) {
                None => problems.push(format!("missing `{k}`")),
                Some(p) if p.value.shape() != self.params[k.as_str()].value.shape() => problems.push(format!(
                    "`{k}` shape {:?} vs {:?}",
                    p.value.shape(),
                    self.params[k.as_str()].value.shape()
                )),
                _ => {}
            }
        }
        for k in theirs {
            if !self.params.contains_key(k.as_str()) {
                problems.push(format!("unexpected `{k}`"));
            }
        }
        if mine.is_empty() {
            problems.push(format!("no `{prefix}` parameters"));
        }
        if !problems.is_empty() {
            return Err(Error::KeyMismatch(problems));
        }
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.value = src.params[k].value.clone();
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.params.iter().find(|(_, p)| !p.value.all_finite()) {
            Some((k, _)) => Err(k.clone()),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Build-time helper that creates named parameters with their initializers.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
    pub kaiming: bool,
}

impl<T: Scalar> Init<'_, T> {
    /// Conv weight `Co x Ci/groups x k x k x k`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> Result<()> {
        let shape = vec![cout, cin / groups, k, k, k];
        let fan_in = (cin / groups) * k * k * k;
        let w = if self.kaiming {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)))
        } else {
            truncated_normal(shape, 0.02, self.rng)
        };
        self.store.insert(format!("{name}.weight"), w, Role::Weight)?;
        if bias {
            self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]), Role::Bias)?;
        }
        Ok(())
    }

    /// Transposed conv weight `Ci x Co x k`, kernel equal to stride.
    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: [usize; 3]) -> Result<()> {
        let shape = vec![cin, cout, k[0], k[1], k[2]];
        let fan_in = cin * k.iter().product::<usize>();
        let w = if self.kaiming {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)))
        } else {
            truncated_normal(shape, 0.02, self.rng)
        };
        self.store.insert(format!("{name}.weight"), w, Role::Weight)?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]), Role::Bias)
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}.weight"), Tensor::ones(vec![c]), Role::NormScale)?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![c]), Role::NormShift)?;
        self.store.insert(format!("{name}.running_mean"), Tensor::zeros(vec![c]), Role::RunningStat)?;
        self.store.insert(format!("{name}.running_var"), Tensor::ones(vec![c]), Role::RunningStat)
    }
}

/// Normal samples redrawn until they fall within two standard deviations.
pub fn truncated_normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

/// A parameter store placed on a tape: trainable entries become leaves and
/// running statistics are working copies written back by [`Bound::commit`].
pub struct Bound<T> {
    vars: BTreeMap<String, Var>,
    running: BTreeMap<String, Tensor<T>>,
    pub training: bool,
    pub bn: BatchNormCfg,
    /// BN layers under these prefixes run in eval mode even when training.
    pub eval_prefixes: Vec<String>,
}

impl<T: Scalar> Bound<T> {
    /// `tracked` decides per name whether a leaf collects gradients.
    pub fn bind(tape: &mut Tape<T>, store: &ParamStore<T>, training: bool, tracked: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        let mut running = BTreeMap::new();
        for (name, p) in store.iter() {
            if p.role.is_trainable() {
                vars.insert(name.to_string(), tape.leaf(p.value.clone(), tracked(name)));
            } else {
                running.insert(name.to_string(), p.value.clone());
            }
        }
        Bound {
            vars,
            running,
            training,
            bn: BatchNormCfg::default(),
            eval_prefixes: Vec::new(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::KeyMismatch(vec![format!("missing parameter `{name}`")]))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of the tracked leaves (zeros where none reached them).
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.is_tracked(v))
            .map(|(k, &v)| (k.clone(), tape.grad_or_zeros(v)))
            .collect()
    }

    pub(crate) fn batch_norm(&mut self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.weight"))?;
        let beta = self.var(&format!("{name}.bias"))?;
        let (km, kv) = (format!("{name}.running_mean"), format!("{name}.running_var"));
        let mut rm = self
            .running
            .remove(&km)
            .ok_or_else(|| Error::KeyMismatch(vec![format!("missing parameter `{km}`")]))?;
        let mut rv = self
            .running
            .remove(&kv)
            .ok_or_else(|| Error::KeyMismatch(vec![format!("missing parameter `{kv}`")]))?;
        let training = self.training && !self.eval_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let out = tape.batch_norm3d(x, gamma, beta, &mut rm, &mut rv, self.bn, training);
        self.running.insert(km, rm);
        self.running.insert(kv, rv);
        out
    }

    /// Write the updated running statistics back into `store`.
    pub fn commit(self, store: &mut ParamStore<T>) -> Result<()> {
        for (k, v) in self.running {
            *store.tensor_mut(&k)? = v;
        }
        Ok(())
    }
}
