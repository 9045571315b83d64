//! Prior-guided alignment of two views' feature maps.
//!
//! Features of each view are un-flipped, the shared crop region is located
//! from the two [`TransformRecord`]s, mapped to feature coordinates and
//! resampled with RoIAlign onto the feature map's own grid.

use std::sync::Arc;

use crate::augment::TransformRecord;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, SparseMap, Tape, Tensor, Var};

/// Half-open box in one view's crop frame (crop voxel units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapBox {
    pub start: [f64; 3],
    pub end: [f64; 3],
}

/// Half-open box in feature-cell units; cell `i` covers `[i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureRoi {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub feature_shape: [usize; 3],
}

impl FeatureRoi {
    /// The whole feature map.
    pub fn full(feature_shape: [usize; 3]) -> Self {
        FeatureRoi {
            start: [0.0; 3],
            end: feature_shape.map(|v| v as f64),
            feature_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            let (s, e) = (self.start[a], self.end[a]);
            if !(s >= 0.0 && s < e && e <= self.feature_shape[a] as f64) {
                return Err(Error::Invalid(format!(
                    "roi [{s}, {e}) on axis {a} outside feature extent {}",
                    self.feature_shape[a]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub use_flipalign: bool,
    pub use_csalign: bool,
    pub samples_per_bin: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            use_flipalign: true,
            use_csalign: true,
            samples_per_bin: 2,
        }
    }
}

/// Aligned online/target features plus the batch rows that survived.
#[derive(Clone, Debug)]
pub struct AlignedPair {
    pub online: Var,
    pub target: Var,
    /// Input sample index of every output row.
    pub kept: Vec<usize>,
    pub skipped: usize,
}

/// Permutation of flat `D x H x W` indices that reverses the masked axes.
fn flip_index(dims: [usize; 3], mask: [bool; 3]) -> impl Fn(usize) -> usize {
    move |i| {
        let w = i % dims[2];
        let h = (i / dims[2]) % dims[1];
        let d = i / (dims[1] * dims[2]);
        let r = |v: usize, a: usize| if mask[a] { dims[a] - 1 - v } else { v };
        (r(d, 0) * dims[1] + r(h, 1)) * dims[2] + r(w, 2)
    }
}

/// Reverse the spatial axes of an `N x C x D x H x W` tensor where `mask` is set.
pub fn flip_align<T: Scalar>(f: &Tensor<T>, mask: [bool; 3]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = f.dims5("flip_align")?;
    let dims = [d, h, w];
    let perm = flip_index(dims, mask);
    let block = d * h * w;
    let mut out = vec![T::zero(); f.numel()];
    for b in 0..n * c {
        let src = &f.data()[b * block..(b + 1) * block];
        for (i, o) in out[b * block..(b + 1) * block].iter_mut().enumerate() {
            *o = src[perm(i)];
        }
    }
    Tensor::new(vec![n, c, d, h, w], out)
}

/// Shared region of two crops, in each crop's own frame; `None` when the
/// crops are disjoint.
pub fn compute_overlap(rec1: &TransformRecord, rec2: &TransformRecord) -> Option<(OverlapBox, OverlapBox)> {
    let mut o1 = OverlapBox { start: [0.0; 3], end: [0.0; 3] };
    let mut o2 = o1;
    for a in 0..3 {
        let lo = rec1.crop_start[a].max(rec2.crop_start[a]);
        let hi = rec1.crop_end[a].min(rec2.crop_end[a]);
        if !(lo < hi) {
            return None;
        }
        o1.start[a] = lo - rec1.crop_start[a];
        o1.end[a] = hi - rec1.crop_start[a];
        o2.start[a] = lo - rec2.crop_start[a];
        o2.end[a] = hi - rec2.crop_start[a];
    }
    Some((o1, o2))
}

/// Crop-frame box to feature cells: scale into view space, then divide by
/// the output stride.
pub fn to_feature_coords(o: &OverlapBox, rec: &TransformRecord, output_stride: [usize; 3]) -> Result<FeatureRoi> {
    let crop = rec.crop_shape();
    let mut roi = FeatureRoi {
        start: [0.0; 3],
        end: [0.0; 3],
        feature_shape: [0; 3],
    };
    for a in 0..3 {
        let view = rec.view_shape[a];
        let stride = output_stride[a];
        if stride == 0 || view % stride != 0 {
            return Err(Error::Invalid(format!(
                "output stride {stride} does not divide view extent {view} on axis {a}"
            )));
        }
        let fs = view / stride;
        let map = |x: f64| (x * view as f64 / crop[a] / stride as f64).clamp(0.0, fs as f64);
        roi.start[a] = map(o.start[a]);
        roi.end[a] = map(o.end[a]);
        roi.feature_shape[a] = fs;
    }
    Ok(roi)
}

/// RoIAlign map from the feature grid to `out_shape` bins over `roi`.
pub fn roi_map<T: Scalar>(roi: &FeatureRoi, out_shape: [usize; 3], samples_per_bin: usize) -> Result<SparseMap<T>> {
    roi.validate()?;
    if out_shape.contains(&0) || samples_per_bin == 0 {
        return Err(Error::Invalid("roi output shape and samples_per_bin must be positive".into()));
    }
    Ok(SparseMap::roi_align(roi.feature_shape, roi.start, roi.end, out_shape, samples_per_bin))
}

/// Per-sample RoIAlign on the tape; output row `k` is `rois[k]` taken from
/// input sample `k`.
pub fn extract_aligned<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    rois: &[FeatureRoi],
    out_shape: [usize; 3],
    samples_per_bin: usize,
) -> Result<Var> {
    let items = rois
        .iter()
        .enumerate()
        .map(|(n, roi)| Ok((n, Arc::new(roi_map(roi, out_shape, samples_per_bin)?))))
        .collect::<Result<Vec<_>>>()?;
    tape.resample(f, items)
}

/// Flip-align and overlap-align both views' feature maps in one resample
/// per path. Pairs with disjoint crops are dropped and counted; `None` when
/// every pair was dropped.
pub fn align_pair<T: Scalar>(
    tape: &mut Tape<T>,
    f_online: Var,
    f_target: Var,
    recs_online: &[TransformRecord],
    recs_target: &[TransformRecord],
    output_stride: [usize; 3],
    cfg: &AlignConfig,
) -> Result<Option<AlignedPair>> {
    let [n, _, d, h, w] = tape.value(f_online).dims5("align_pair")?;
    if tape.shape(f_online) != tape.shape(f_target) {
        return Err(Error::shape(
            "align_pair",
            format!("online {:?} vs target {:?}", tape.shape(f_online), tape.shape(f_target)),
        ));
    }
    if recs_online.len() != n || recs_target.len() != n {
        return Err(Error::shape(
            "align_pair",
            format!("{n} samples but {}/{} records", recs_online.len(), recs_target.len()),
        ));
    }
    let fshape = [d, h, w];
    let mut online_items = Vec::with_capacity(n);
    let mut target_items = Vec::with_capacity(n);
    let mut kept = Vec::with_capacity(n);
    for (i, (r1, r2)) in recs_online.iter().zip(recs_target).enumerate() {
        let (roi1, roi2) = if cfg.use_csalign {
            let Some((o1, o2)) = compute_overlap(r1, r2) else {
                continue;
            };
            let roi1 = to_feature_coords(&o1, r1, output_stride)?;
            let roi2 = to_feature_coords(&o2, r2, output_stride)?;
            if roi1.feature_shape != fshape {
                return Err(Error::shape(
                    "align_pair",
                    format!("features {fshape:?} but records imply {:?}", roi1.feature_shape),
                ));
            }
            (roi1, roi2)
        } else {
            (FeatureRoi::full(fshape), FeatureRoi::full(fshape))
        };
        let build = |roi: &FeatureRoi, rec: &TransformRecord| -> Result<Arc<SparseMap<T>>> {
            let map = if cfg.use_csalign {
                roi_map(roi, fshape, cfg.samples_per_bin)?
            } else {
                roi_map(roi, fshape, 1)?
            };
            Ok(Arc::new(if cfg.use_flipalign && rec.flip.contains(&true) {
                map.permute_input(flip_index(fshape, rec.flip))
            } else {
                map
            }))
        };
        online_items.push((i, build(&roi1, r1)?));
        target_items.push((i, build(&roi2, r2)?));
        kept.push(i);
    }
    if kept.is_empty() {
        return Ok(None);
    }
    let online = tape.resample(f_online, online_items)?;
    let target = tape.resample(f_target, target_items)?;
    Ok(Some(AlignedPair {
        online,
        target,
        skipped: n - kept.len(),
        kept,
    }))
}
