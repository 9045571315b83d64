use crate::tensor::Scalar;

/// Saved forward state of a batch-norm evaluation.
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch statistics over `(N, D, H, W)`: (mean, biased variance).
pub(crate) fn channel_stats<T: Scalar>(x: &[T], dims: [usize; 5]) -> (Vec<T>, Vec<T>) {
    let [n_batch, c, d, h, w] = dims;
    let spatial = d * h * w;
    let count = T::lit((n_batch * spatial) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for n in 0..n_batch {
            let base = (n * c + ch) * spatial;
            s = s + x[base..base + spatial].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut ss = T::zero();
        for n in 0..n_batch {
            let base = (n * c + ch) * spatial;
            for &v in &x[base..base + spatial] {
                ss = ss + (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

pub(crate) fn normalize_forward<T: Scalar>(
    x: &[T],
    dims: [usize; 5],
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let [n_batch, c, d, h, w] = dims;
    let spatial = d * h * w;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..n_batch {
        for ch in 0..c {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, BnSaved { xhat, inv_std })
}

/// Gradients of training-mode batch norm: (input, gamma, beta).
pub(crate) fn batchnorm_train_backward<T: Scalar>(
    grad_out: &[T],
    dims: [usize; 5],
    saved: &BnSaved<T>,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n_batch, c, d, h, w] = dims;
    let spatial = d * h * w;
    let m = T::lit((n_batch * spatial) as f64);
    let (ggamma, gbeta) = affine_grads(grad_out, dims, &saved.xhat);
    let mut gx = vec![T::zero(); grad_out.len()];
    for ch in 0..c {
        // sum(dxhat) = gamma * sum(dy); sum(dxhat * xhat) = gamma * dgamma
        let k = gamma[ch] * saved.inv_std[ch] / m;
        for n in 0..n_batch {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                gx[i] = k * (m * grad_out[i] - gbeta[ch] - saved.xhat[i] * ggamma[ch]);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Gradients of eval-mode batch norm, where the statistics are constants.
pub(crate) fn batchnorm_eval_backward<T: Scalar>(
    grad_out: &[T],
    dims: [usize; 5],
    saved: &BnSaved<T>,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n_batch, c, d, h, w] = dims;
    let spatial = d * h * w;
    let (ggamma, gbeta) = affine_grads(grad_out, dims, &saved.xhat);
    let mut gx = vec![T::zero(); grad_out.len()];
    for n in 0..n_batch {
        for ch in 0..c {
            let k = gamma[ch] * saved.inv_std[ch];
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                gx[i] = k * grad_out[i];
            }
        }
    }
    (gx, ggamma, gbeta)
}

fn affine_grads<T: Scalar>(grad_out: &[T], dims: [usize; 5], xhat: &[T]) -> (Vec<T>, Vec<T>) {
    let [n_batch, c, d, h, w] = dims;
    let spatial = d * h * w;
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for n in 0..n_batch {
        for ch in 0..c {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                ggamma[ch] = ggamma[ch] + grad_out[i] * xhat[i];
                gbeta[ch] = gbeta[ch] + grad_out[i];
            }
        }
    }
    (ggamma, gbeta)
}

/// Channel-wise l2 normalization of an `N x C x ...` tensor: each channel
/// vector is divided by `max(norm, eps)`. Returns the output and the
/// per-position divisors.
pub(crate) fn l2_normalize_forward<T: Scalar>(x: &[T], n_batch: usize, c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let spatial = x.len() / (n_batch * c).max(1);
    let mut out = vec![T::zero(); x.len()];
    let mut denom = vec![T::zero(); n_batch * spatial];
    for n in 0..n_batch {
        for p in 0..spatial {
            let mut ss = T::zero();
            for ch in 0..c {
                let v = x[(n * c + ch) * spatial + p];
                ss = ss + v * v;
            }
            let dn = ss.sqrt().max(eps);
            denom[n * spatial + p] = dn;
            for ch in 0..c {
                let i = (n * c + ch) * spatial + p;
                out[i] = x[i] / dn;
            }
        }
    }
    (out, denom)
}

pub(crate) fn l2_normalize_backward<T: Scalar>(
    grad_out: &[T],
    out: &[T],
    denom: &[T],
    n_batch: usize,
    c: usize,
    eps: T,
) -> Vec<T> {
    let spatial = out.len() / (n_batch * c).max(1);
    let mut gx = vec![T::zero(); out.len()];
    for n in 0..n_batch {
        for p in 0..spatial {
            let dn = denom[n * spatial + p];
            // Where the eps floor is active the divisor is constant.
            let clamped = dn <= eps;
            let mut dot = T::zero();
            if !clamped {
                for ch in 0..c {
                    let i = (n * c + ch) * spatial + p;
                    dot = dot + grad_out[i] * out[i];
                }
            }
            for ch in 0..c {
                let i = (n * c + ch) * spatial + p;
                gx[i] = (grad_out[i] - out[i] * dot) / dn;
            }
        }
    }
    gx
}
