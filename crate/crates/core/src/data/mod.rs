//! Volume I/O, intensity preprocessing, patch sampling and synthetic data.

mod manifest;
mod synth;
mod volume;

pub use manifest::{check_disjoint, DatasetManifest, Split};
pub use synth::{synth_generate, SynthSpec};
pub use volume::{Volume, RVF_MAGIC};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// CT window used before normalization, in HU.
pub const HU_CLIP: (f32, f32) = (-1024.0, 325.0);

const STD_FLOOR: f64 = 1e-8;

/// Clamp to `[clip_lo, clip_hi]`, then z-score over the whole volume.
pub fn preprocess(vol: &Volume, clip_lo: f32, clip_hi: f32) -> Result<Volume> {
    if !(clip_lo < clip_hi) {
        return Err(Error::Invalid(format!("clip range [{clip_lo}, {clip_hi}] is empty")));
    }
    let clipped = vol.map_values(|v| v.clamp(clip_lo, clip_hi));
    let n = clipped.len() as f64;
    let mean = clipped.values().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = clipped
        .values()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(STD_FLOOR);
    Ok(clipped.map_values(|v| ((v as f64 - mean) / std) as f32))
}

/// Source patch shape that fits crops of up to 140% of `view`:
/// `ceil(1.4 * view)` per axis.
pub fn ssl_source_shape(view: [usize; 3]) -> [usize; 3] {
    view.map(|v| (v * 14).div_ceil(10))
}

/// An axis-aligned block cut from a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    /// `D x H x W` values.
    pub values: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
}

/// Uniformly positioned, integer-aligned patch (labels copied exactly).
pub fn sample_patch(vol: &Volume, patch_shape: [usize; 3], rng: &mut Rng) -> Result<Patch> {
    let dims = vol.dims();
    if (0..3).any(|a| patch_shape[a] == 0 || patch_shape[a] > dims[a]) {
        return Err(Error::Invalid(format!(
            "volume {dims:?} too small for patch {patch_shape:?}"
        )));
    }
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.random_range(0..=dims[a] - patch_shape[a]);
    }
    Ok(extract_patch(vol, origin, patch_shape))
}

pub fn extract_patch(vol: &Volume, origin: [usize; 3], shape: [usize; 3]) -> Patch {
    let dims = vol.dims();
    let mut values = Vec::with_capacity(shape.iter().product());
    let mut labels = vol.labels().map(|_| Vec::with_capacity(values.capacity()));
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let start = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            values.extend_from_slice(&vol.values()[start..start + shape[2]]);
            if let (Some(dst), Some(src)) = (labels.as_mut(), vol.labels()) {
                dst.extend_from_slice(&src[start..start + shape[2]]);
            }
        }
    }
    Patch {
        origin,
        values: Tensor::new(shape.to_vec(), values).expect("patch shape"),
        labels,
    }
}
