//! Stochastic view generation with a full record of the applied transforms.
//!
//! Per view the pipeline is crop + resize, flip, then the intensity ops
//! (noise, blur, brightness, gamma). The spatial part of every view is
//! reproducible from its [`TransformRecord`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{resize_map, SparseMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Required intersection volume as a fraction of each crop's own volume.
    pub min_overlap: f64,
    pub max_attempts: usize,
    pub flip_prob: f64,
    pub intensity: bool,
    pub noise_prob: f64,
    pub noise_var_max: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub brightness_prob: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub gamma_prob: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 1.1,
            scale_max: 1.4,
            min_overlap: 0.1,
            max_attempts: 100,
            flip_prob: 0.5,
            intensity: true,
            noise_prob: 0.1,
            noise_var_max: 0.1,
            blur_prob: 0.2,
            blur_sigma_min: 0.5,
            blur_sigma_max: 1.0,
            brightness_prob: 0.5,
            brightness_min: 0.75,
            brightness_max: 1.25,
            gamma_prob: 0.5,
            gamma_min: 0.7,
            gamma_max: 1.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_prob,
            self.noise_prob,
            self.blur_prob,
            self.brightness_prob,
            self.gamma_prob,
            self.min_overlap,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        let ranges = [
            (self.scale_min, self.scale_max),
            (self.blur_sigma_min, self.blur_sigma_max),
            (self.brightness_min, self.brightness_max),
            (self.gamma_min, self.gamma_max),
            (0.0, self.noise_var_max),
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config("augment ranges need min <= max".into()));
        }
        if self.scale_min <= 0.0 || self.gamma_min <= 0.0 || self.blur_sigma_min < 0.0 {
            return Err(Error::Config("augment scale, gamma and sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Intensity-op parameters actually applied; `None` when an op was skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntensityParams {
    pub noise_var: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub brightness: Option<f64>,
    pub gamma: Option<f64>,
}

/// The transforms that produced one view.
///
/// The crop box `[crop_start, crop_end)` is continuous, in voxel units of
/// the source patch (voxel `i` spans `[i, i+1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct TransformRecord {
    pub crop_start: [f64; 3],
    pub crop_end: [f64; 3],
    pub view_shape: [usize; 3],
    pub flip: [bool; 3],
    pub intensity: IntensityParams,
    /// Raw uniform draws in the order they were taken.
    pub draws: Vec<f64>,
}

impl TransformRecord {
    /// Record for a crop box with no flips and no intensity ops.
    pub fn new(crop_start: [f64; 3], crop_end: [f64; 3], view_shape: [usize; 3]) -> Self {
        TransformRecord {
            crop_start,
            crop_end,
            view_shape,
            flip: [false; 3],
            intensity: IntensityParams::default(),
            draws: Vec::new(),
        }
    }

    pub fn crop_shape(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.crop_end[a] - self.crop_start[a])
    }

    /// `view_shape / crop_shape` per axis: crop space to view space.
    pub fn resize_scale(&self) -> [f64; 3] {
        let c = self.crop_shape();
        [0, 1, 2].map(|a| self.view_shape[a] as f64 / c[a])
    }

    pub fn volume(&self) -> f64 {
        self.crop_shape().iter().product()
    }
}

/// Two augmented views of one source patch.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub rec1: TransformRecord,
    pub rec2: TransformRecord,
}

/// Crop coordinates live on this dyadic grid, so differences and sums of
/// box coordinates are exact in `f64`.
pub const COORD_GRID: f64 = 1.0 / 1_048_576.0;

fn snap_down(x: f64) -> f64 {
    (x / COORD_GRID).floor() * COORD_GRID
}

fn snap_extent(scale: f64, view: f64, cfg: &AugmentConfig) -> f64 {
    let mut size = ((scale * view) / COORD_GRID).round() * COORD_GRID;
    while size / view > cfg.scale_max {
        size -= COORD_GRID;
    }
    while size / view < cfg.scale_min {
        size += COORD_GRID;
    }
    size
}

/// Intersection volume of two crop boxes.
pub fn intersection_volume(a: &TransformRecord, b: &TransformRecord) -> f64 {
    (0..3)
        .map(|i| (a.crop_end[i].min(b.crop_end[i]) - a.crop_start[i].max(b.crop_start[i])).max(0.0))
        .product()
}

/// Intersection volume relative to each box's own volume.
pub fn overlap_fractions(a: &TransformRecord, b: &TransformRecord) -> (f64, f64) {
    let inter = intersection_volume(a, b);
    (inter / a.volume(), inter / b.volume())
}

pub fn sample_crop_pair(
    source_shape: [usize; 3],
    view_shape: [usize; 3],
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(TransformRecord, TransformRecord)> {
    for a in 0..3 {
        if view_shape[a] == 0 || (source_shape[a] as f64) < cfg.scale_max * view_shape[a] as f64 {
            return Err(Error::Invalid(format!(
                "source {source_shape:?} too small for {}x crops of view {view_shape:?}",
                cfg.scale_max
            )));
        }
    }
    let mut recs = [0, 1].map(|_| {
        let mut draws = Vec::new();
        let mut crop = [0f64; 3];
        for a in 0..3 {
            let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
            draws.push(s);
            crop[a] = snap_extent(s, view_shape[a] as f64, cfg);
        }
        let mut rec = TransformRecord::new([0.0; 3], crop, view_shape);
        rec.draws = draws;
        rec
    });
    let place = |rec: &mut TransformRecord, rng: &mut Rng| {
        for a in 0..3 {
            let size = rec.crop_shape()[a];
            let u: f64 = rng.random();
            rec.draws.push(u);
            let start = snap_down(u * (source_shape[a] as f64 - size));
            rec.crop_start[a] = start;
            rec.crop_end[a] = start + size;
        }
    };
    let mut accepted = false;
    for _ in 0..cfg.max_attempts {
        for rec in recs.iter_mut() {
            place(rec, rng);
        }
        let (f1, f2) = overlap_fractions(&recs[0], &recs[1]);
        if f1 >= cfg.min_overlap && f2 >= cfg.min_overlap {
            accepted = true;
            break;
        }
    }
    if !accepted {
        // concentric fallback
        for rec in recs.iter_mut() {
            for a in 0..3 {
                let size = rec.crop_shape()[a];
                let start = (source_shape[a] as f64 - size) / 2.0;
                rec.crop_start[a] = start;
                rec.crop_end[a] = start + size;
            }
        }
    }
    for rec in recs.iter_mut() {
        for a in 0..3 {
            let u: f64 = rng.random();
            rec.draws.push(u);
            rec.flip[a] = u < cfg.flip_prob;
        }
    }
    let [r1, r2] = recs;
    Ok((r1, r2))
}

/// Map taking a `D x H x W` patch to the record's view grid.
pub fn crop_resize_map(patch_dims: [usize; 3], rec: &TransformRecord) -> Result<SparseMap<f32>> {
    for a in 0..3 {
        let (s, e) = (rec.crop_start[a], rec.crop_end[a]);
        if !(s >= 0.0 && s < e && e <= patch_dims[a] as f64) {
            return Err(Error::Invalid(format!(
                "crop box [{s}, {e}) on axis {a} lies outside patch extent {}",
                patch_dims[a]
            )));
        }
    }
    Ok(resize_map(patch_dims, rec.crop_start, rec.crop_shape(), rec.view_shape))
}

pub fn apply_crop_resize(patch: &Tensor<f32>, rec: &TransformRecord) -> Result<Tensor<f32>> {
    let dims = dhw(patch)?;
    let map = crop_resize_map(dims, rec)?;
    let mut out = vec![0f32; rec.view_shape.iter().product()];
    map.apply(patch.data(), &mut out);
    Tensor::new(rec.view_shape.to_vec(), out)
}

pub fn apply_flip(view: &Tensor<f32>, mask: [bool; 3]) -> Tensor<f32> {
    if !mask.contains(&true) {
        return view.clone();
    }
    let s = view.shape();
    let dims = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
    let map = SparseMap::<f32>::flip(dims, mask);
    let block: usize = dims.iter().product();
    let mut out = vec![0f32; view.numel()];
    for (src, dst) in view.data().chunks(block).zip(out.chunks_mut(block)) {
        map.apply(src, dst);
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

fn dhw(t: &Tensor<f32>) -> Result<[usize; 3]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape("augment", format!("expected D x H x W, got {:?}", t.shape())))
}

fn min_max(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub fn add_noise(view: &Tensor<f32>, variance: f64, rng: &mut Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    let data = view.data().iter().map(|&v| v + normal.sample(rng) as f32).collect();
    Tensor::new(view.shape().to_vec(), data).expect("same shape")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(view: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let dims: [usize; 3] = view.shape().try_into().expect("D x H x W view");
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut cur: Vec<f64> = view.data().iter().map(|&v| v as f64).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let base = i as isize - pos * strides[axis] as isize;
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let p = (pos + k as isize - radius).clamp(0, n - 1);
                acc += w * cur[(base + p * strides[axis] as isize) as usize];
            }
            *out = acc;
        }
        cur = next;
    }
    Tensor::new(dims.to_vec(), cur.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

/// Multiply by `factor`, then clip to the view's pre-op range.
pub fn adjust_brightness(view: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let (lo, hi) = min_max(view.data());
    view.map(|v| ((v as f64 * factor) as f32).clamp(lo, hi))
}

/// Min-max map to `[0, 1]`, raise to `lambda`, map back to the original range.
pub fn gamma_transform(view: &Tensor<f32>, lambda: f64) -> Tensor<f32> {
    let (lo, hi) = min_max(view.data());
    if !(hi > lo) {
        return view.clone();
    }
    let (lo, hi) = (lo as f64, hi as f64);
    view.map(|v| {
        let unit = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        ((lo + unit.powf(lambda) * (hi - lo)) as f32).clamp(lo as f32, hi as f32)
    })
}

pub fn intensity_pipeline(view: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> (Tensor<f32>, IntensityParams) {
    let mut params = IntensityParams::default();
    let mut out = view.clone();
    if !cfg.intensity {
        return (out, params);
    }
    if rng.random_bool(cfg.noise_prob) {
        let var = rng.random_range(0.0..=cfg.noise_var_max);
        out = add_noise(&out, var, rng);
        params.noise_var = Some(var);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
        params.blur_sigma = Some(sigma);
    }
    if rng.random_bool(cfg.brightness_prob) {
        let f = rng.random_range(cfg.brightness_min..=cfg.brightness_max);
        out = adjust_brightness(&out, f);
        params.brightness = Some(f);
    }
    if rng.random_bool(cfg.gamma_prob) {
        let lambda = rng.random_range(cfg.gamma_min..=cfg.gamma_max);
        out = gamma_transform(&out, lambda);
        params.gamma = Some(lambda);
    }
    (out, params)
}

/// Crop + resize + flip of `patch` as described by `rec`.
pub fn render_spatial(patch: &Tensor<f32>, rec: &TransformRecord) -> Result<Tensor<f32>> {
    Ok(apply_flip(&apply_crop_resize(patch, rec)?, rec.flip))
}

/// Render a view from a fixed spatial record, then run the intensity ops.
pub fn render_view(
    patch: &Tensor<f32>,
    mut rec: TransformRecord,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, TransformRecord)> {
    let spatial = render_spatial(patch, &rec)?;
    let (view, params) = intensity_pipeline(&spatial, cfg, rng);
    rec.intensity = params;
    Ok((view, rec))
}

pub fn make_view_pair(patch: &Tensor<f32>, view_shape: [usize; 3], cfg: &AugmentConfig, rng: &mut Rng) -> Result<ViewPair> {
    let source = dhw(patch)?;
    let (r1, r2) = sample_crop_pair(source, view_shape, cfg, rng)?;
    let (view1, rec1) = render_view(patch, r1, cfg, rng)?;
    let (view2, rec2) = render_view(patch, r2, cfg, rng)?;
    Ok(ViewPair { view1, view2, rec1, rec2 })
}
