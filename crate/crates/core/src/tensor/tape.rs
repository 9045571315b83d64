use std::sync::Arc;

use super::kernels::conv::{self, ConvDims, ConvGeom};
use super::kernels::norm::{self, BnSaved};
use super::kernels::resample::SparseMap;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormCfg {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormCfg {
    fn default() -> Self {
        BatchNormCfg {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Leaf,
    StopGrad,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
        training: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    LogClamped(Var, T),
    SoftmaxChannels(Var),
    L2Normalize {
        x: Var,
        eps: T,
        denom: Vec<T>,
    },
    Sum(Var),
    SumPerChannel(Var),
    GlobalAvgPool(Var),
    BroadcastSpatial(Var),
    Concat(Vec<Var>),
    Resample {
        x: Var,
        items: Vec<(usize, Arc<SparseMap<T>>)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Straight-line record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. Gradients of tracked leaves accumulate across [`Tape::backward`] calls
/// until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. Gradients are collected for it when `tracked`.
    pub fn leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.push_raw(value, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient, or zeros shaped like the value.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.value(*v).all_finite()) || value.all_finite(),
            "non-finite output from finite inputs"
        );
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_raw(value, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn per_channel_param(&self, op: &'static str, p: Var, channels: usize, what: &str) -> Result<()> {
        if self.value(p).numel() != channels {
            return Err(Error::shape(
                op,
                format!(
                    "{what} has {} values, expected one per channel ({channels})",
                    self.value(p).numel()
                ),
            ));
        }
        Ok(())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        const OP: &str = "conv3d";
        let xs = self.value(x).dims5(OP)?;
        let ws = self.value(w).dims5(OP)?;
        if geom.groups == 0 || xs[1] % geom.groups != 0 || ws[0] % geom.groups != 0 {
            return Err(Error::shape(
                OP,
                format!("groups {} incompatible with channels in={} out={}", geom.groups, xs[1], ws[0]),
            ));
        }
        if ws[1] * geom.groups != xs[1] {
            return Err(Error::shape(
                OP,
                format!(
                    "channel axis: input has {} channels, weight expects {}",
                    xs[1],
                    ws[1] * geom.groups
                ),
            ));
        }
        if let Some(b) = b {
            self.per_channel_param(OP, b, ws[0], "bias")?;
        }
        let mut out = [xs[0], ws[0], 0, 0, 0];
        for (a, name) in ["depth", "height", "width"].iter().enumerate() {
            if geom.dilation[a] == 0 || geom.stride[a] == 0 {
                return Err(Error::shape(OP, format!("{name} axis: stride and dilation must be >= 1")));
            }
            out[a + 2] = conv::conv_out_len(xs[a + 2], ws[a + 2], geom.stride[a], geom.padding[a], geom.dilation[a])
                .ok_or_else(|| {
                    Error::shape(
                        OP,
                        format!("{name} axis: kernel {} does not fit input {} with padding {}", ws[a + 2], xs[a + 2], geom.padding[a]),
                    )
                })?;
        }
        let dims = ConvDims { x: xs, w: ws, out };
        let data = conv::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            &geom,
        );
        let value = Tensor::new(out.to_vec(), data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution with kernel `weight` (`C_in x C_out x k...`), no
    /// padding.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        const OP: &str = "conv_transpose3d";
        let xs = self.value(x).dims5(OP)?;
        let ws = self.value(w).dims5(OP)?;
        if ws[0] != xs[1] {
            return Err(Error::shape(
                OP,
                format!("channel axis: input has {} channels, weight expects {}", xs[1], ws[0]),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::shape(OP, "stride must be >= 1"));
        }
        if let Some(b) = b {
            self.per_channel_param(OP, b, ws[1], "bias")?;
        }
        let out = [
            xs[0],
            ws[1],
            (xs[2] - 1) * stride[0] + ws[2],
            (xs[3] - 1) * stride[1] + ws[3],
            (xs[4] - 1) * stride[2] + ws[4],
        ];
        let dims = ConvDims { x: xs, w: ws, out };
        let data = conv::conv_transpose3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            stride,
        );
        let value = Tensor::new(out.to_vec(), data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT { x, w, b, stride }, &inputs))
    }

    /// Batch normalization over `(N, D, H, W)` per channel.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// running statistics are updated in place (unbiased variance). In eval
    /// mode the running statistics are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        cfg: BatchNormCfg,
        training: bool,
    ) -> Result<Var> {
        const OP: &str = "batchnorm3d";
        let dims = self.value(x).dims5(OP)?;
        let c = dims[1];
        self.per_channel_param(OP, gamma, c, "gamma")?;
        self.per_channel_param(OP, beta, c, "beta")?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::shape(OP, "running statistics must have one value per channel"));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::Invalid("batchnorm eps must be > 0".into()));
        }
        let eps = T::lit(cfg.eps);
        let (mean, var) = if training {
            let count = dims[0] * dims[2] * dims[3] * dims[4];
            if count < 2 {
                return Err(Error::DegenerateBatch { channel: 0 });
            }
            let (mean, var) = norm::channel_stats(self.value(x).data(), dims);
            let m = T::lit(cfg.momentum);
            let unbias = T::lit(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let (out, saved) = norm::normalize_forward(
            self.value(x).data(),
            dims,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(dims.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                training,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip(a, b, |p, q| p / q);
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `ln(max(x, floor))`; no gradient where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::lit(floor);
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push(value, Op::LogClamped(x, floor), &[x])
    }

    /// Softmax across the channel axis (axis 1) at every position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::shape("softmax", "expected N x C x ..."));
        }
        let (n_batch, c) = (t.shape()[0], t.shape()[1]);
        let spatial = t.numel() / (n_batch * c).max(1);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for n in 0..n_batch {
            for p in 0..spatial {
                let at = |ch: usize| (n * c + ch) * spatial + p;
                let mx = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[at(ch)] - mx).exp();
                    out[at(ch)] = e;
                    z = z + e;
                }
                for ch in 0..c {
                    out[at(ch)] = out[at(ch)] / z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxChannels(x), &[x]))
    }

    /// Divide every channel vector by `max(norm, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid("l2_normalize eps must be > 0".into()));
        }
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::shape("l2_normalize", "expected N x C x ..."));
        }
        let eps = T::lit(eps);
        let (out, denom) = norm::l2_normalize_forward(t.data(), t.shape()[0], t.shape()[1], eps);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { x, eps, denom }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over every axis except the channel axis: `N x C x ... -> C`.
    pub fn sum_per_channel(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::shape("sum_per_channel", "expected N x C x ..."));
        }
        let (n_batch, c) = (t.shape()[0], t.shape()[1]);
        let spatial = t.numel() / (n_batch * c).max(1);
        let mut out = vec![T::zero(); c];
        for n in 0..n_batch {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (n * c + ch) * spatial;
                *o = *o + t.data()[base..base + spatial].iter().copied().sum::<T>();
            }
        }
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(value, Op::SumPerChannel(x), &[x]))
    }

    /// `N x C x D x H x W -> N x C x 1 x 1 x 1` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n_batch, c, d, h, w] = self.value(x).dims5("global_avg_pool")?;
        let spatial = d * h * w;
        let inv = T::lit(1.0 / spatial as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n_batch, c, 1, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `N x C x 1 x 1 x 1 -> N x C x D x H x W` by repetition.
    pub fn broadcast_spatial(&mut self, x: Var, spatial: [usize; 3]) -> Result<Var> {
        let [n_batch, c, d, h, w] = self.value(x).dims5("broadcast_spatial")?;
        if (d, h, w) != (1, 1, 1) {
            return Err(Error::shape("broadcast_spatial", "input must be spatially 1 x 1 x 1"));
        }
        let len: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(n_batch * c * len);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, len));
        }
        let value = Tensor::new(vec![n_batch, c, spatial[0], spatial[1], spatial[2]], data)?;
        Ok(self.push(value, Op::BroadcastSpatial(x), &[x]))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let [n_batch, _, d, h, w] = self.value(first).dims5(OP)?;
        let spatial = d * h * w;
        let mut total_c = 0;
        for &v in xs {
            let s = self.value(v).dims5(OP)?;
            if s[0] != n_batch || s[2..] != [d, h, w] {
                return Err(Error::shape(OP, format!("{:?} vs {:?}", s, self.shape(first))));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n_batch * total_c * spatial);
        for n in 0..n_batch {
            for &v in xs {
                let c = self.shape(v)[1];
                data.extend_from_slice(&self.value(v).data()[n * c * spatial..(n + 1) * c * spatial]);
            }
        }
        let value = Tensor::new(vec![n_batch, total_c, d, h, w], data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Apply per-output-sample spatial maps. Output sample `k` is
    /// `items[k].1` applied to input sample `items[k].0`.
    pub fn resample(&mut self, x: Var, items: Vec<(usize, Arc<SparseMap<T>>)>) -> Result<Var> {
        const OP: &str = "resample";
        let [n_batch, c, d, h, w] = self.value(x).dims5(OP)?;
        let out_spatial = match items.first() {
            Some((_, m)) => m.out_spatial().to_vec(),
            None => return Err(Error::Invalid("resample with no output samples".into())),
        };
        for (src, m) in &items {
            if *src >= n_batch {
                return Err(Error::shape(OP, format!("sample {src} out of range for batch {n_batch}")));
            }
            if m.in_spatial() != [d, h, w] || m.out_spatial() != out_spatial.as_slice() {
                return Err(Error::shape(
                    OP,
                    format!("map {:?} -> {:?} does not fit input {:?}", m.in_spatial(), m.out_spatial(), [d, h, w]),
                ));
            }
        }
        let in_len = d * h * w;
        let out_len: usize = out_spatial.iter().product();
        let src = self.value(x).data();
        let mut data = vec![T::zero(); items.len() * c * out_len];
        for (k, (sn, m)) in items.iter().enumerate() {
            for ch in 0..c {
                let ib = (sn * c + ch) * in_len;
                let ob = (k * c + ch) * out_len;
                m.apply(&src[ib..ib + in_len], &mut data[ob..ob + out_len]);
            }
        }
        let mut shape = vec![items.len(), c];
        shape.extend(out_spatial);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Resample { x, items }, &[x]))
    }

    /// Trilinear samples at voxel-center coordinates: `N x C x P`.
    pub fn trilinear_sample(&mut self, x: Var, points: &[[f64; 3]]) -> Result<Var> {
        let [n_batch, c, d, h, w] = self.value(x).dims5("trilinear_sample")?;
        if points.is_empty() {
            return Ok(self.constant(Tensor::zeros(vec![n_batch, c, 0])));
        }
        let map = Arc::new(SparseMap::points([d, h, w], points));
        self.resample(x, (0..n_batch).map(|n| (n, map.clone())).collect())
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_raw(value, Op::StopGrad, false)
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].tracked;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let add_into = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Conv { x, w, b, geom } => {
                let dims = ConvDims {
                    x: nodes[x.0].value.dims5("conv3d").unwrap(),
                    w: nodes[w.0].value.dims5("conv3d").unwrap(),
                    out: out.dims5("conv3d").unwrap(),
                };
                let (gx, gw, gb) = conv::conv3d_backward(val(*x), val(*w), g, &dims, geom, tracked(*x), tracked(*w));
                if let Some(gx) = gx {
                    acc(*x, &mut |d| add_into(d, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |d| add_into(d, &gw));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, &gb));
                }
            }
            Op::ConvT { x, w, b, stride } => {
                let dims = ConvDims {
                    x: nodes[x.0].value.dims5("conv_transpose3d").unwrap(),
                    w: nodes[w.0].value.dims5("conv_transpose3d").unwrap(),
                    out: out.dims5("conv_transpose3d").unwrap(),
                };
                let (gx, gw, gb) =
                    conv::conv_transpose3d_backward(val(*x), val(*w), g, &dims, *stride, tracked(*x), tracked(*w));
                if let Some(gx) = gx {
                    acc(*x, &mut |d| add_into(d, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |d| add_into(d, &gw));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, &gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                training,
            } => {
                let dims = out.dims5("batchnorm3d").unwrap();
                let (gx, gg, gb) = if *training {
                    norm::batchnorm_train_backward(g, dims, saved, val(*gamma))
                } else {
                    norm::batchnorm_eval_backward(g, dims, saved, val(*gamma))
                };
                acc(*x, &mut |d| add_into(d, &gx));
                acc(*gamma, &mut |d| add_into(d, &gg));
                acc(*beta, &mut |d| add_into(d, &gb));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &gv), &q) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * q;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &gv), &p) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * p;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &gv), &q) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv / q;
                    }
                });
                acc(*b, &mut |d| {
                    for (((d, &gv), &p), &q) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d = *d - gv * p / (q * q);
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * s));
            }
            Op::AddScalar(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::LogClamped(x, floor) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > *floor {
                            *d = *d + gv / v;
                        }
                    }
                });
            }
            Op::SoftmaxChannels(x) => {
                let y = out.data();
                let (n_batch, c) = (out.shape()[0], out.shape()[1]);
                let spatial = out.numel() / (n_batch * c).max(1);
                acc(*x, &mut |d| {
                    for n in 0..n_batch {
                        for p in 0..spatial {
                            let at = |ch: usize| (n * c + ch) * spatial + p;
                            let dot = (0..c).map(|ch| g[at(ch)] * y[at(ch)]).sum::<T>();
                            for ch in 0..c {
                                let k = at(ch);
                                d[k] = d[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, eps, denom } => {
                let (n_batch, c) = (out.shape()[0], out.shape()[1]);
                let gx = norm::l2_normalize_backward(g, out.data(), denom, n_batch, c, *eps);
                acc(*x, &mut |d| add_into(d, &gx));
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + gv));
            }
            Op::SumPerChannel(x) => {
                let shape = nodes[x.0].value.shape();
                let (n_batch, c) = (shape[0], shape[1]);
                let spatial = nodes[x.0].value.numel() / (n_batch * c).max(1);
                acc(*x, &mut |d| {
                    for (k, chunk) in d.chunks_mut(spatial.max(1)).enumerate().take(n_batch * c) {
                        let gv = g[k % c];
                        chunk.iter_mut().for_each(|d| *d = *d + gv);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.spatial();
                let spatial = s[0] * s[1] * s[2];
                let inv = T::lit(1.0 / spatial as f64);
                acc(*x, &mut |d| {
                    for (k, chunk) in d.chunks_mut(spatial).enumerate() {
                        let gv = g[k] * inv;
                        chunk.iter_mut().for_each(|d| *d = *d + gv);
                    }
                });
            }
            Op::BroadcastSpatial(x) => {
                let s = out.spatial();
                let spatial = s[0] * s[1] * s[2];
                acc(*x, &mut |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        *d = *d + g[k * spatial..(k + 1) * spatial].iter().copied().sum::<T>();
                    }
                });
            }
            Op::Concat(xs) => {
                let [n_batch, total_c, dd, hh, ww] = out.dims5("concat_channels").unwrap();
                let spatial = dd * hh * ww;
                let mut c0 = 0;
                for &v in xs {
                    let c = nodes[v.0].value.shape()[1];
                    acc(v, &mut |d| {
                        for n in 0..n_batch {
                            let src = &g[(n * total_c + c0) * spatial..(n * total_c + c0 + c) * spatial];
                            add_into(&mut d[n * c * spatial..(n + 1) * c * spatial], src);
                        }
                    });
                    c0 += c;
                }
            }
            Op::Resample { x, items } => {
                let c = out.shape()[1];
                let in_len = nodes[x.0].value.spatial().iter().product::<usize>();
                let out_len = out.numel() / (items.len() * c).max(1);
                acc(*x, &mut |d| {
                    for (k, (sn, m)) in items.iter().enumerate() {
                        for ch in 0..c {
                            let ib = (sn * c + ch) * in_len;
                            let ob = (k * c + ch) * out_len;
                            m.apply_transpose(&g[ob..ob + out_len], &mut d[ib..ib + in_len]);
                        }
                    }
                });
            }
        }
    }
}
