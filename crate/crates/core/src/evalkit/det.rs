//! Detection decoding, matching and the mAP / NDS family of metrics.

use crate::bevgeom::BevGridSpec;
use crate::ops::sigmoid;
use crate::synthworld::world::{wrap_angle, Box3D};
use crate::tensor::Tensor;

/// Center-distance thresholds in meters.
pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
pub const NMS_IOU: f64 = 0.5;
const MIN_RECALL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Axis-aligned BEV IoU of two footprints, ignoring yaw.
pub fn bev_aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let overlap = |ca: f64, ea: f64, cb: f64, eb: f64| {
        ((ca + ea / 2.0).min(cb + eb / 2.0) - (ca - ea / 2.0).max(cb - eb / 2.0)).max(0.0)
    };
    let inter = overlap(a.center[0], a.length(), b.center[0], b.length())
        * overlap(a.center[1], a.width(), b.center[1], b.width());
    let union = a.length() * a.width() + b.length() * b.width() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Peak picking, box decoding and per-class NMS on raw head outputs.
pub fn decode_detections(
    heatmap_logits: &Tensor,
    reg: &Tensor,
    grid: &BevGridSpec,
    score_thresh: f64,
    max_k: usize,
) -> Vec<Detection> {
    let (c, h, w) = heatmap_logits.dims3();
    let mut peaks = Vec::new();
    for cls in 0..c {
        for r in 0..h {
            for col in 0..w {
                let v = heatmap_logits.at3(cls, r, col);
                let mut is_max = true;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (rr, cc) = (r as isize + dr, col as isize + dc);
                        if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        if heatmap_logits.at3(cls, rr as usize, cc as usize) > v {
                            is_max = false;
                        }
                    }
                }
                let score = sigmoid(v);
                if is_max && score >= score_thresh {
                    peaks.push((score, cls, r, col));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    peaks.truncate(max_k);

    let mut kept: Vec<Detection> = Vec::new();
    for (score, cls, r, col) in peaks {
        let (cx, cy) = grid.cell_center(r, col);
        let at = |ch| reg.at3(ch, r, col);
        let bbox = Box3D {
            center: [cx + at(0), cy + at(1), at(2)],
            size: [at(3).exp(), at(4).exp(), at(5).exp()],
            yaw: at(6).atan2(at(7)),
            category: cls,
        };
        let suppressed = kept.iter().any(|k| k.bbox.category == cls && bev_aligned_iou(&k.bbox, &bbox) > NMS_IOU);
        if !suppressed {
            kept.push(Detection { bbox, score });
        }
    }
    kept
}

/// Area under the 101-point precision envelope for recall at least 0.1,
/// normalized to the covered recall range. `hits` are true/false positive
/// flags in descending score order.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let first = (MIN_RECALL * 100.0).round() as usize;
    let mut total = 0.0;
    for k in first..=100 {
        let r = k as f64 / 100.0;
        let p = curve.iter().filter(|(rc, _)| *rc >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        total += p;
    }
    total / (101 - first) as f64
}

/// Matches one class at one distance threshold across frames. Returns hit
/// flags in global score order plus `(pred, gt)` index pairs per match.
#[allow(clippy::type_complexity)]
fn match_class(
    preds: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    cls: usize,
    thresh: f64,
) -> (Vec<bool>, usize, Vec<(usize, usize, usize)>) {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (f, ps) in preds.iter().enumerate() {
        for (i, p) in ps.iter().enumerate() {
            if p.bbox.category == cls {
                order.push((f, i));
            }
        }
    }
    order.sort_by(|a, b| {
        let (pa, pb) = (&preds[a.0][a.1], &preds[b.0][b.1]);
        pb.score.total_cmp(&pa.score).then(a.cmp(b))
    });
    let n_gt = gts.iter().map(|g| g.iter().filter(|b| b.category == cls).count()).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    let mut pairs = Vec::new();
    for (f, i) in order {
        let p = &preds[f][i].bbox;
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts[f].iter().enumerate() {
            if g.category != cls || taken[f][j] {
                continue;
            }
            let d = (p.center[0] - g.center[0]).hypot(p.center[1] - g.center[1]);
            if d <= thresh && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[f][j] = true;
                hits.push(true);
                pairs.push((f, i, j));
            }
            None => hits.push(false),
        }
    }
    (hits, n_gt, pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMetrics {
    /// `ap[class][threshold]`, `None` when the class has neither
    /// predictions nor ground truth.
    pub ap: Vec<[Option<f64>; 4]>,
    pub map: f64,
    /// Mean over classes at each distance threshold.
    pub map_by_threshold: [f64; 4],
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
}

impl DetectionMetrics {
    pub fn map_at(&self, thresh: f64) -> f64 {
        let i = DIST_THRESHOLDS.iter().position(|&t| t == thresh).expect("known threshold");
        self.map_by_threshold[i]
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One minus IoU of two boxes after aligning their centers and yaw.
pub fn aligned_scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Per-frame predictions against per-frame ground truth.
pub fn compute_map_nds(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], n_classes: usize) -> DetectionMetrics {
    assert_eq!(preds.len(), gts.len(), "one prediction list per frame");
    let mut ap = vec![[None; 4]; n_classes];
    let mut tp_err: [Vec<f64>; 3] = Default::default();
    for (cls, row) in ap.iter_mut().enumerate() {
        let mut class_err: [Vec<f64>; 3] = Default::default();
        for (t, &thresh) in DIST_THRESHOLDS.iter().enumerate() {
            let (hits, n_gt, pairs) = match_class(preds, gts, cls, thresh);
            if hits.is_empty() && n_gt == 0 {
                continue;
            }
            row[t] = Some(average_precision(&hits, n_gt));
            if thresh == TP_THRESHOLD {
                for (f, i, j) in pairs {
                    let (p, g) = (&preds[f][i].bbox, &gts[f][j]);
                    class_err[0].push((p.center[0] - g.center[0]).hypot(p.center[1] - g.center[1]));
                    class_err[1].push(aligned_scale_error(p, g));
                    class_err[2].push(wrap_angle(p.yaw - g.yaw).abs());
                }
            }
        }
        for k in 0..3 {
            if let Some(m) = mean(&class_err[k]) {
                tp_err[k].push(m);
            }
        }
    }
    let mut map_by_threshold = [0.0; 4];
    for (t, m) in map_by_threshold.iter_mut().enumerate() {
        let vals: Vec<f64> = ap.iter().filter_map(|r| r[t]).collect();
        *m = mean(&vals).unwrap_or(0.0);
    }
    let all: Vec<f64> = ap.iter().flat_map(|r| r.iter().flatten().copied()).collect();
    let map = mean(&all).unwrap_or(0.0);
    // no true positives at all means maximal error
    let [mate, mase, maoe] = [0, 1, 2].map(|k| mean(&tp_err[k]).unwrap_or(1.0));
    let tp_score: f64 = [mate, mase, maoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    let nds = (5.0 * map + tp_score) / 8.0;
    DetectionMetrics { ap, map, map_by_threshold, mate, mase, maoe, nds }
}
