//! Synthetic labeled volumes: Gaussian background with randomly placed
//! ellipsoids and cuboids whose intensities depend on their class.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Volume;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    /// Class count including background (class 0).
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Per-class intensity mean in HU; index 0 is background.
    pub class_mean: Vec<f64>,
    /// Per-class intensity std; index 0 is the background noise level.
    pub class_std: Vec<f64>,
    /// Object semi-axis range as a fraction of each volume dim.
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: [16, 48, 48],
            num_classes: 3,
            objects_min: 3,
            objects_max: 6,
            class_mean: vec![-100.0, 60.0, 180.0],
            class_std: vec![60.0, 40.0, 40.0],
            radius_min: 0.12,
            radius_max: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Invalid("synthetic spec needs at least one class".into()));
        }
        if self.num_classes > 256 {
            return Err(Error::Invalid("labels are stored as u8; at most 256 classes".into()));
        }
        if self.class_mean.len() != self.num_classes || self.class_std.len() != self.num_classes {
            return Err(Error::Invalid(format!(
                "class_mean/class_std need {} entries, got {}/{}",
                self.num_classes,
                self.class_mean.len(),
                self.class_std.len()
            )));
        }
        if self.class_std.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Invalid("class_std entries must be finite and >= 0".into()));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Invalid("objects_min exceeds objects_max".into()));
        }
        if self.objects_max > 0 && self.num_classes < 2 {
            return Err(Error::Invalid("objects need a foreground class".into()));
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max) {
            return Err(Error::Invalid("need 0 < radius_min <= radius_max".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Invalid("dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid,
    Cuboid,
}

pub fn synth_generate(spec: &SynthSpec, rng: &mut Rng) -> Result<Volume> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let count = d * h * w;
    let mut labels = vec![0u8; count];
    let n_objects = rng.random_range(spec.objects_min..=spec.objects_max);
    for _ in 0..n_objects {
        let class = rng.random_range(1..spec.num_classes) as u8;
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipsoid
        } else {
            Shape::Cuboid
        };
        let mut center = [0f64; 3];
        let mut radius = [0f64; 3];
        for a in 0..3 {
            let n = spec.dims[a] as f64;
            center[a] = rng.random_range(0.0..n);
            radius[a] = (rng.random_range(spec.radius_min..=spec.radius_max) * n).max(0.5);
        }
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    let rel = |a: usize| (p[a] - center[a]) / radius[a];
                    let inside = match shape {
                        Shape::Ellipsoid => (0..3).map(|a| rel(a) * rel(a)).sum::<f64>() <= 1.0,
                        Shape::Cuboid => (0..3).all(|a| rel(a).abs() <= 1.0),
                    };
                    if inside {
                        labels[(z * h + y) * w + x] = class;
                    }
                }
            }
        }
    }
    let dists: Vec<Normal<f64>> = spec
        .class_mean
        .iter()
        .zip(&spec.class_std)
        .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::Invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let values = labels
        .iter()
        .map(|&l| dists[l as usize].sample(rng) as f32)
        .collect();
    Volume::new(spec.dims, values, Some(labels))
}
