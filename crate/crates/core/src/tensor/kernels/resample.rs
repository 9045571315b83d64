//! Sparse linear spatial maps: trilinear sampling, resizing, RoIAlign and
//! axis flips all reduce to `out[o] = sum_k w_k * in[idx_k]` per channel.

use crate::tensor::Scalar;

/// A fixed linear map from a `D x H x W` grid to an output grid, applied
/// independently to every channel. Rows are stored in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    in_spatial: [usize; 3],
    out_spatial: Vec<usize>,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn new(in_spatial: [usize; 3], out_spatial: Vec<usize>) -> Self {
        SparseMap {
            in_spatial,
            out_spatial,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    /// Append the next output row.
    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, f64)>) {
        for (i, w) in taps {
            debug_assert!(i < self.in_len());
            self.index.push(i);
            self.weight.push(T::lit(w));
        }
        self.offsets.push(self.index.len());
    }

    pub fn in_spatial(&self) -> [usize; 3] {
        self.in_spatial
    }

    pub fn out_spatial(&self) -> &[usize] {
        &self.out_spatial
    }

    pub fn in_len(&self) -> usize {
        self.in_spatial.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_spatial.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.index[span.clone()]
            .iter()
            .copied()
            .zip(self.weight[span].iter().copied())
    }

    /// The same map reading input voxel `perm(i)` wherever it read `i`;
    /// composes a permutation (such as a flip) in front of the map.
    pub fn permute_input(&self, perm: impl Fn(usize) -> usize) -> Self {
        let mut out = self.clone();
        for i in out.index.iter_mut() {
            *i = perm(*i);
            debug_assert!(*i < self.in_len());
        }
        out
    }

    /// Apply to one channel block.
    pub(crate) fn apply(&self, src: &[T], dst: &mut [T]) {
        for (r, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in self.offsets[r]..self.offsets[r + 1] {
                acc = acc + self.weight[k] * src[self.index[k]];
            }
            *d = acc;
        }
    }

    /// Accumulate the transpose applied to `grad` into `dst`.
    pub(crate) fn apply_transpose(&self, grad: &[T], dst: &mut [T]) {
        for (r, &g) in grad.iter().enumerate() {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let i = self.index[k];
                dst[i] = dst[i] + self.weight[k] * g;
            }
        }
    }

    /// Map that reverses the flagged axes.
    pub fn flip(dims: [usize; 3], mask: [bool; 3]) -> Self {
        let mut map = SparseMap::new(dims, dims.to_vec());
        for d in 0..dims[0] {
            let sd = if mask[0] { dims[0] - 1 - d } else { d };
            for h in 0..dims[1] {
                let sh = if mask[1] { dims[1] - 1 - h } else { h };
                for w in 0..dims[2] {
                    let sw = if mask[2] { dims[2] - 1 - w } else { w };
                    map.push_row([((sd * dims[1] + sh) * dims[2] + sw, 1.0)]);
                }
            }
        }
        map
    }

    /// One output row per point, each a trilinear blend at a voxel-center
    /// coordinate.
    pub fn points(dims: [usize; 3], points: &[[f64; 3]]) -> Self {
        let mut map = SparseMap::new(dims, vec![points.len()]);
        for p in points {
            map.push_row(trilinear_taps(*p, dims));
        }
        map
    }

    /// RoIAlign over the continuous box `[start, end)` (cell units, where
    /// cell `i` spans `[i, i+1)` and has its center at `i + 0.5`): the box is
    /// split into `out` bins and each bin averages `samples^3` regularly spaced
    /// trilinear samples.
    pub fn roi_align(dims: [usize; 3], start: [f64; 3], end: [f64; 3], out: [usize; 3], samples: usize) -> Self {
        let samples = samples.max(1);
        let axis_coords = |a: usize| -> Vec<Vec<f64>> {
            let bin = (end[a] - start[a]) / out[a] as f64;
            (0..out[a])
                .map(|j| {
                    (0..samples)
                        .map(|s| {
                            let frac = (j as f64) + (s as f64 + 0.5) / samples as f64;
                            // cell-unit coordinate to voxel-center index
                            start[a] + frac * bin - 0.5
                        })
                        .collect()
                })
                .collect()
        };
        let (cd, ch, cw) = (axis_coords(0), axis_coords(1), axis_coords(2));
        let norm = 1.0 / (samples * samples * samples) as f64;
        let mut map = SparseMap::new(dims, out.to_vec());
        for bd in &cd {
            for bh in &ch {
                for bw in &cw {
                    let mut taps = Vec::with_capacity(8 * samples * samples * samples);
                    for &zd in bd {
                        for &zh in bh {
                            for &zw in bw {
                                taps.extend(
                                    trilinear_taps([zd, zh, zw], dims)
                                        .into_iter()
                                        .map(|(i, w)| (i, w * norm)),
                                );
                            }
                        }
                    }
                    map.push_row(taps);
                }
            }
        }
        map
    }
}

/// Resize the box `[start, start + extent)` of a grid onto an `out` grid,
/// sampling each output voxel at its mapped center.
pub fn resize_map<T: Scalar>(dims: [usize; 3], start: [f64; 3], extent: [f64; 3], out: [usize; 3]) -> SparseMap<T> {
    let end = [start[0] + extent[0], start[1] + extent[1], start[2] + extent[2]];
    SparseMap::roi_align(dims, start, end, out, 1)
}

/// Up to eight `(flat index, weight)` taps of a trilinear sample at a
/// voxel-center coordinate (voxel `i` has center `i.0`). Coordinates outside
/// the grid clamp to the border; zero-weight taps are omitted.
pub fn trilinear_taps(coord: [f64; 3], dims: [usize; 3]) -> Vec<(usize, f64)> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let c = coord[a].clamp(0.0, max);
        let f = c.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        frac[a] = c - f;
    }
    let mut taps = Vec::with_capacity(8);
    for (zd, wd) in [(lo[0], 1.0 - frac[0]), (hi[0], frac[0])] {
        if wd == 0.0 {
            continue;
        }
        for (zh, wh) in [(lo[1], 1.0 - frac[1]), (hi[1], frac[1])] {
            if wh == 0.0 {
                continue;
            }
            for (zw, ww) in [(lo[2], 1.0 - frac[2]), (hi[2], frac[2])] {
                if ww == 0.0 {
                    continue;
                }
                taps.push(((zd * dims[1] + zh) * dims[2] + zw, wd * wh * ww));
            }
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinate_is_a_single_tap() {
        let taps = trilinear_taps([2.0, 3.0, 1.0], [4, 5, 6]);
        assert_eq!(taps, vec![((2 * 5 + 3) * 6 + 1, 1.0)]);
    }

    #[test]
    fn taps_clamp_at_border() {
        let taps = trilinear_taps([-3.0, 10.0, 5.5], [2, 2, 8]);
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert_eq!(total, 1.0);
        assert!(taps.iter().all(|&(i, _)| i < 2 * 2 * 8));
    }

    #[test]
    fn flip_map_reverses_axis() {
        let map = SparseMap::<f64>::flip([4, 1, 1], [true, false, false]);
        let src = [1.0, 2.0, 3.0, 4.0];
        let mut dst = [0.0; 4];
        map.apply(&src, &mut dst);
        assert_eq!(dst, [4.0, 3.0, 2.0, 1.0]);
    }
}
