use crate::error::{Error, Result};
use crate::networks::{ParamStore, Role, ENCODER, PROJECTOR};
use crate::tensor::Scalar;

/// `mu <- omega * mu + (1 - omega) * theta` over the target's trainable
/// entries; running statistics are copied from the online store. The
/// target must hold exactly the online encoder and projector keys.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, omega: f64) -> Result<()> {
    let expected: Vec<&str> = online
        .names()
        .filter(|k| k.starts_with(ENCODER) || k.starts_with(PROJECTOR))
        .collect();
    let actual: Vec<&str> = target.names().collect();
    if expected != actual {
        let mut problems: Vec<String> = expected
            .iter()
            .filter(|k| !target.contains(k))
            .map(|k| format!("target lacks `{k}`"))
            .collect();
        problems.extend(
            actual
                .iter()
                .filter(|k| !expected.contains(k))
                .map(|k| format!("target has extra `{k}`")),
        );
        return Err(Error::KeyMismatch(problems));
    }
    let w = T::lit(omega);
    let rest = T::lit(1.0 - omega);
    for (name, mu) in target.iter_mut() {
        let theta = online.get(name).expect("keys checked");
        if mu.value.shape() != theta.value.shape() {
            return Err(Error::KeyMismatch(vec![format!(
                "`{name}` shape {:?} vs online {:?}",
                mu.value.shape(),
                theta.value.shape()
            )]));
        }
        if mu.role == Role::RunningStat {
            mu.value = theta.value.clone();
            continue;
        }
        for (m, &t) in mu.value.data_mut().iter_mut().zip(theta.value.data()) {
            *m = w * *m + rest * t;
        }
    }
    Ok(())
}
