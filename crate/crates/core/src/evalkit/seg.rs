//! Map segmentation IoU and occupancy mIoU.

use crate::error::{Error, Result};
use crate::synthworld::gt::OccGrid;
use crate::synthworld::world::OCC_FREE;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// `None` where prediction and truth are both empty.
    pub iou: Vec<Option<f64>>,
    pub mean: f64,
}

/// Intersection and union counts per category.
#[derive(Clone, Debug, Default, PartialEq)]
struct Counts {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl Counts {
    fn new(n: usize) -> Self {
        Counts { inter: vec![0; n], union: vec![0; n] }
    }

    fn add(&mut self, cat: usize, pred: bool, truth: bool) {
        self.inter[cat] += u64::from(pred && truth);
        self.union[cat] += u64::from(pred || truth);
    }

    fn finish(&self, include: impl Fn(usize) -> bool) -> SegMetrics {
        let iou: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let vals: Vec<f64> = iou.iter().enumerate().filter(|(c, _)| include(*c)).filter_map(|(_, v)| *v).collect();
        let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        SegMetrics { iou, mean }
    }
}

/// Per-category IoU of thresholded map logits, pooled over frames.
pub fn map_iou(logits: &[&Tensor], masks: &[&Tensor]) -> Result<SegMetrics> {
    if logits.len() != masks.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", logits.len(), masks.len())));
    }
    let n_cat = logits[0].dims3().0;
    let mut counts = Counts::new(n_cat);
    for (l, m) in logits.iter().zip(masks) {
        if l.shape() != m.shape() {
            return Err(Error::Shape(format!("map logits {:?} vs masks {:?}", l.shape(), m.shape())));
        }
        let hw = l.numel() / n_cat;
        for (i, (&x, &t)) in l.data().iter().zip(m.data()).enumerate() {
            // sigmoid(x) > 0.5
            counts.add(i / hw, x > 0.0, t > 0.5);
        }
    }
    Ok(counts.finish(|_| true))
}

/// Per-category voxel IoU of argmax occupancy, pooled over frames. The
/// mean skips the free category.
pub fn occ_miou(logits: &[&Tensor], grids: &[&OccGrid], c_occ: usize) -> Result<SegMetrics> {
    if logits.len() != grids.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", logits.len(), grids.len())));
    }
    let mut counts = Counts::new(c_occ);
    for (l, g) in logits.iter().zip(grids) {
        let (ch, h, w) = l.dims3();
        if ch != g.n_z * c_occ || h != g.h || w != g.w {
            return Err(Error::Shape(format!("occ logits {:?} vs grid {}x{}x{}", l.shape(), g.h, g.w, g.n_z)));
        }
        let hw = h * w;
        for p in 0..hw {
            for z in 0..g.n_z {
                let pred = (0..c_occ)
                    .max_by(|&a, &b| l.data()[(z * c_occ + a) * hw + p].total_cmp(&l.data()[(z * c_occ + b) * hw + p]).then(b.cmp(&a)))
                    .expect("nonempty");
                let truth = g.labels[p * g.n_z + z] as usize;
                for cat in 0..c_occ {
                    counts.add(cat, pred == cat, truth == cat);
                }
            }
        }
    }
    Ok(counts.finish(|c| c != OCC_FREE as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_complement_maps() {
        let m = Tensor::from_vec(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let perfect = m.map(|t| if t > 0.5 { 5.0 } else { -5.0 });
        assert_eq!(map_iou(&[&perfect], &[&m]).unwrap().mean, 1.0);
        let comp = perfect.map(|x| -x);
        assert_eq!(map_iou(&[&comp], &[&m]).unwrap().mean, 0.0);
    }

    #[test]
    fn hand_four_pixel_case() {
        let truth = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::from_vec(&[1, 2, 2], vec![2.0, -1.0, 3.0, -4.0]).unwrap();
        // intersection {0}, union {0, 1, 2}
        let r = map_iou(&[&pred], &[&truth]).unwrap();
        assert!((r.mean - 1.0 / 3.0).abs() < 1e-12);
    }

    fn occ_logits_for(labels: &[u8], h: usize, w: usize, n_z: usize, c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n_z * c, h, w]);
        for p in 0..h * w {
            for z in 0..n_z {
                t.data_mut()[(z * c + labels[p * n_z + z] as usize) * h * w + p] = 1.0;
            }
        }
        t
    }

    #[test]
    fn occupancy_cases() {
        let g = OccGrid { h: 2, w: 2, n_z: 2, labels: vec![0, 4, 1, 4, 3, 4, 3, 0] };
        let perfect = occ_logits_for(&g.labels, 2, 2, 2, 5);
        let r = occ_miou(&[&perfect], &[&g], 5).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.iou[2], None);
        let free = occ_logits_for(&[4; 8], 2, 2, 2, 5);
        let r = occ_miou(&[&free], &[&g], 5).unwrap();
        assert_eq!(r.iou[0], Some(0.0));
        assert_eq!(r.iou[1], Some(0.0));
        assert_eq!(r.mean, 0.0);
        // hand 8-voxel case: one car voxel predicted as ground
        let mut labels = g.labels.clone();
        labels[0] = 3;
        let r = occ_miou(&[&occ_logits_for(&labels, 2, 2, 2, 5)], &[&g], 5).unwrap();
        assert!((r.iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.iou[3].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.mean - (0.5 + 1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    fn brute_iou(pred: &[usize], truth: &[usize], cat: usize) -> Option<f64> {
        let i = pred.iter().zip(truth).filter(|(p, t)| **p == cat && **t == cat).count();
        let u = pred.iter().zip(truth).filter(|(p, t)| **p == cat || **t == cat).count();
        (u > 0).then(|| i as f64 / u as f64)
    }

    #[test]
    fn agree_with_brute_force_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
            let n_z = rng.random_range(1..4);
            let labels: Vec<u8> = (0..h * w * n_z).map(|_| rng.random_range(0..5)).collect();
            let logits = Tensor::from_fn(&[n_z * 5, h, w], |_| rng.random_range(-2.0..2.0));
            let g = OccGrid { h, w, n_z, labels: labels.clone() };
            let r = occ_miou(&[&logits], &[&g], 5).unwrap();
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for p in 0..h * w {
                for z in 0..n_z {
                    let scores: Vec<f64> = (0..5).map(|c| logits.data()[(z * 5 + c) * h * w + p]).collect();
                    let mut best = 0;
                    for c in 1..5 {
                        if scores[c] > scores[best] {
                            best = c;
                        }
                    }
                    pred.push(best);
                    truth.push(labels[p * n_z + z] as usize);
                }
            }
            let ious: Vec<Option<f64>> = (0..5).map(|c| brute_iou(&pred, &truth, c)).collect();
            assert_eq!(r.iou, ious);
            let used: Vec<f64> = ious[..4].iter().flatten().copied().collect();
            let want = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
            assert!((r.mean - want).abs() < 1e-9);

            let masks = Tensor::from_fn(&[3, h, w], |_| f64::from(rng.random_range(0..2u8)));
            let ml = Tensor::from_fn(&[3, h, w], |_| rng.random_range(-1.0..1.0));
            let r = map_iou(&[&ml], &[&masks]).unwrap();
            for c in 0..3 {
                let p: Vec<usize> = ml.channel(c).iter().map(|&x| usize::from(x > 0.0)).collect();
                let t: Vec<usize> = masks.channel(c).iter().map(|&x| usize::from(x > 0.5)).collect();
                assert_eq!(r.iou[c], brute_iou(&p, &t, 1));
            }
        }
    }
}
