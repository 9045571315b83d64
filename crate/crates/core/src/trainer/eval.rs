use crate::data::Volume;
use crate::error::{Error, Result};
use crate::networks::{segment, Bound, NetworkConfig, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Per-class Dice and IoU of hard label maps, from counts pooled over all
/// evaluated volumes. A class absent from both prediction and ground truth
/// scores 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SegReport {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    inter: Vec<u64>,
    pred: Vec<u64>,
    gt: Vec<u64>,
}

impl SegReport {
    pub fn new(classes: usize) -> Self {
        SegReport {
            dice: vec![1.0; classes],
            iou: vec![1.0; classes],
            inter: vec![0; classes],
            pred: vec![0; classes],
            gt: vec![0; classes],
        }
    }

    pub fn from_labels(pred: &[u8], gt: &[u8], classes: usize) -> Result<Self> {
        let mut r = SegReport::new(classes);
        r.accumulate(pred, gt)?;
        Ok(r)
    }

    pub fn classes(&self) -> usize {
        self.dice.len()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("seg_report", format!("{} vs {} voxels", pred.len(), gt.len())));
        }
        let c = self.classes();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= c || g >= c {
                return Err(Error::Invalid(format!("label {} outside {c} classes", p.max(g))));
            }
            self.pred[p] += 1;
            self.gt[g] += 1;
            if p == g {
                self.inter[p] += 1;
            }
        }
        for k in 0..c {
            let (i, a, b) = (self.inter[k] as f64, self.pred[k] as f64, self.gt[k] as f64);
            if a + b > 0.0 {
                self.dice[k] = 2.0 * i / (a + b);
                self.iou[k] = i / (a + b - i);
            }
        }
        Ok(())
    }

    /// Mean over foreground classes (all classes when there is only one).
    pub fn mean_dice(&self) -> f64 {
        let fg = if self.classes() > 1 { &self.dice[1..] } else { &self.dice[..] };
        fg.iter().sum::<f64>() / fg.len() as f64
    }

    pub fn mean_iou(&self) -> f64 {
        let fg = if self.classes() > 1 { &self.iou[1..] } else { &self.iou[..] };
        fg.iter().sum::<f64>() / fg.len() as f64
    }
}

fn window_starts(dim: usize, window: usize) -> Vec<usize> {
    let step = (window / 2).max(1);
    let mut s: Vec<usize> = (0..=dim - window).step_by(step).collect();
    if *s.last().expect("dim >= window") != dim - window {
        s.push(dim - window);
    }
    s
}

/// Hard label map of a whole (preprocessed) volume from overlapping windows
/// whose logits are averaged. One output channel means sigmoid/threshold,
/// otherwise argmax.
pub fn predict_volume(params: &ParamStore<f32>, net: &NetworkConfig, vol: &Volume, window: [usize; 3]) -> Result<Vec<u8>> {
    let dims = vol.dims();
    if (0..3).any(|a| window[a] > dims[a]) {
        return Err(Error::Invalid(format!("volume {dims:?} smaller than window {window:?}")));
    }
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims[a], window[a])).collect();
    let count = dims.iter().product::<usize>();
    let mut acc: Vec<f32> = Vec::new();
    let mut hits = vec![0u32; count];
    let mut channels = 0;
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let patch = crate::data::extract_patch(vol, [z, y, x], window);
                let input = patch.values.reshape([vec![1, 1], window.to_vec()].concat())?;
                let mut tape = Tape::new();
                let mut b = Bound::bind(&mut tape, params, false, |_| false);
                let xv = tape.constant(input);
                let logits = segment(&mut tape, &mut b, xv, net)?;
                let out = tape.value(logits);
                channels = out.shape()[1];
                if acc.is_empty() {
                    acc = vec![0.0; channels * count];
                }
                let wlen = window.iter().product::<usize>();
                for c in 0..channels {
                    for i in 0..wlen {
                        let (wd, wh, ww) = (i / (window[1] * window[2]), (i / window[2]) % window[1], i % window[2]);
                        let g = ((z + wd) * dims[1] + y + wh) * dims[2] + x + ww;
                        acc[c * count + g] += out.data()[c * wlen + i];
                        if c == 0 {
                            hits[g] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((0..count)
        .map(|g| {
            if channels == 1 {
                (acc[g] / hits[g] as f32 >= 0.0) as u8
            } else {
                let mut best = 0;
                for c in 1..channels {
                    if acc[c * count + g] > acc[best * count + g] {
                        best = c;
                    }
                }
                best as u8
            }
        })
        .collect())
}

pub fn evaluate(params: &ParamStore<f32>, net: &NetworkConfig, vols: &[Volume], window: [usize; 3], classes: usize) -> Result<SegReport> {
    let mut report = SegReport::new(classes);
    for v in vols {
        let gt = v
            .labels()
            .ok_or_else(|| Error::Invalid(format!("volume `{}` has no labels", v.provenance)))?;
        let pred = predict_volume(params, net, v, window)?;
        report.accumulate(&pred, gt)?;
    }
    Ok(report)
}

/// One-hot `N x C x D x H x W` targets from `N` label patches.
pub fn one_hot(labels: &[&[u8]], spatial: [usize; 3], classes: usize) -> Result<Tensor<f32>> {
    let len = spatial.iter().product::<usize>();
    let mut data = vec![0f32; labels.len() * classes * len];
    for (n, l) in labels.iter().enumerate() {
        for (i, &c) in l.iter().enumerate() {
            if c as usize >= classes {
                return Err(Error::Invalid(format!("label {c} outside {classes} classes")));
            }
            data[(n * classes + c as usize) * len + i] = 1.0;
        }
    }
    Tensor::new([vec![labels.len(), classes], spatial.to_vec()].concat(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let gt = [0u8, 1, 1, 2, 2, 2];
        let r = SegReport::from_labels(&gt, &gt, 3).unwrap();
        assert_eq!(r.dice, vec![1.0; 3]);
        assert_eq!(r.iou, vec![1.0; 3]);
        let r = SegReport::from_labels(&[0, 0, 1], &[1, 1, 0], 2).unwrap();
        assert_eq!(r.dice, vec![0.0, 0.0]);
        assert_eq!(r.iou, vec![0.0, 0.0]);
    }

    #[test]
    fn dice_iou_identity() {
        let pred = [0u8, 1, 1, 2, 0, 2, 1, 1, 0, 2];
        let gt = [0u8, 1, 2, 2, 1, 2, 1, 0, 0, 2];
        let r = SegReport::from_labels(&pred, &gt, 3).unwrap();
        for k in 0..3 {
            assert!((r.dice[k] - 2.0 * r.iou[k] / (1.0 + r.iou[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn windows_cover_the_axis() {
        assert_eq!(window_starts(48, 32), vec![0, 16]);
        assert_eq!(window_starts(16, 8), vec![0, 4, 8]);
        assert_eq!(window_starts(40, 32), vec![0, 8]);
        assert_eq!(window_starts(32, 32), vec![0]);
    }
}
