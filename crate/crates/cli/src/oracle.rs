//! Exact reference for crop overlaps, independent of the aligner's code.
//!
//! Every crop coordinate is a finite `f64`, hence an exact rational. Per axis
//! the boundary points of both crops cut the line into elementary intervals;
//! the overlap is the union of intervals inside both crops. The result is
//! mapped into each crop's frame and then to feature cells through the
//! centers of view voxels.

use num_rational::BigRational;
use num_traits::ToPrimitive;
use pgl_core::align::{compute_overlap, to_feature_coords, FeatureRoi, OverlapBox};
use pgl_core::augment::TransformRecord;

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite coordinate")
}

fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("representable")
}

/// Overlap of two crops on one axis in source coordinates, or `None`.
fn axis_overlap(a: (f64, f64), b: (f64, f64)) -> Option<(BigRational, BigRational)> {
    let mut cuts = vec![q(a.0), q(a.1), q(b.0), q(b.1)];
    cuts.sort();
    cuts.dedup();
    let inside = |lo: &BigRational, hi: &BigRational, s: f64, e: f64| *lo >= q(s) && *hi <= q(e);
    let covered: Vec<(BigRational, BigRational)> = cuts
        .windows(2)
        .filter(|w| inside(&w[0], &w[1], a.0, a.1) && inside(&w[0], &w[1], b.0, b.1))
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect();
    let lo = covered.iter().map(|c| c.0.clone()).min()?;
    let hi = covered.iter().map(|c| c.1.clone()).max()?;
    Some((lo, hi))
}

/// Expected overlap boxes in each crop's frame, exact.
pub fn overlap_boxes(r1: &TransformRecord, r2: &TransformRecord) -> Option<[[(BigRational, BigRational); 3]; 2]> {
    let mut out: [[(BigRational, BigRational); 3]; 2] = Default::default();
    for a in 0..3 {
        let (lo, hi) = axis_overlap((r1.crop_start[a], r1.crop_end[a]), (r2.crop_start[a], r2.crop_end[a]))?;
        for (k, r) in [r1, r2].into_iter().enumerate() {
            let s = q(r.crop_start[a]);
            out[k][a] = (&lo - &s, &hi - &s);
        }
    }
    Some(out)
}

/// Feature-cell coordinate of a crop-frame coordinate, via voxel centers.
/// View voxel `v` has its center at `v + 1/2`; feature cell `j` has its
/// center at view coordinate `(j + 1/2) * stride`.
fn feature_coord(x: &BigRational, crop: &BigRational, view: usize, stride: usize) -> BigRational {
    let half = BigRational::new(1.into(), 2.into());
    let u = x * BigRational::from_integer(view.into()) / crop;
    let s = BigRational::from_integer(stride.into());
    (u - &s * &half) / s + half
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agreement {
    /// Both sides agree on whether the crops overlap and on both boxes, exactly.
    pub boxes: bool,
    /// Both boxes cover the same source region, exactly.
    pub same_region: bool,
    /// Largest feature-coordinate difference.
    pub roi_error: f64,
}

impl Agreement {
    pub fn holds(&self, roi_tol: f64) -> bool {
        self.boxes && self.same_region && self.roi_error <= roi_tol
    }
}

pub struct Inspection {
    pub boxes: Option<(OverlapBox, OverlapBox)>,
    pub rois: Option<(FeatureRoi, FeatureRoi)>,
    pub agreement: Agreement,
}

/// Run the aligner's geometry on a record pair and score it against the oracle.
pub fn inspect(r1: &TransformRecord, r2: &TransformRecord, stride: [usize; 3]) -> pgl_core::Result<Inspection> {
    let got = compute_overlap(r1, r2);
    let want = overlap_boxes(r1, r2);
    let (boxes, same_region, rois, roi_error) = match (&got, &want) {
        (None, None) => (true, true, None, 0.0),
        (Some((o1, o2)), Some(w)) => {
            let mut boxes = true;
            let mut region = true;
            for a in 0..3 {
                boxes &= q(o1.start[a]) == w[0][a].0 && q(o1.end[a]) == w[0][a].1;
                boxes &= q(o2.start[a]) == w[1][a].0 && q(o2.end[a]) == w[1][a].1;
                let s1 = q(r1.crop_start[a]);
                let s2 = q(r2.crop_start[a]);
                region &= &s1 + q(o1.start[a]) == &s2 + q(o2.start[a]);
                region &= &s1 + q(o1.end[a]) == &s2 + q(o2.end[a]);
            }
            let f1 = to_feature_coords(o1, r1, stride)?;
            let f2 = to_feature_coords(o2, r2, stride)?;
            let mut err = 0f64;
            for (f, r, wb) in [(&f1, r1, &w[0]), (&f2, r2, &w[1])] {
                for a in 0..3 {
                    let crop = q(r.crop_end[a]) - q(r.crop_start[a]);
                    let lo = feature_coord(&wb[a].0, &crop, r.view_shape[a], stride[a]);
                    let hi = feature_coord(&wb[a].1, &crop, r.view_shape[a], stride[a]);
                    err = err.max((f.start[a] - to_f64(&lo)).abs()).max((f.end[a] - to_f64(&hi)).abs());
                }
            }
            (boxes, region, Some((f1, f2)), err)
        }
        _ => (false, false, None, f64::INFINITY),
    };
    Ok(Inspection {
        boxes: got,
        rois,
        agreement: Agreement {
            boxes,
            same_region,
            roi_error,
        },
    })
}
