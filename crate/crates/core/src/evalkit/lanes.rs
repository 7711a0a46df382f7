//! Lane decoding from raster outputs and the lane F-score.

use crate::bevgeom::BevGridSpec;
use crate::losses::PUSH_MARGIN;
use crate::synthworld::world::LanePolyline;
use crate::tensor::Tensor;

pub const LANE_TOLERANCE: f64 = 0.5;
pub const LANE_COVERAGE: f64 = 0.75;
const RESAMPLE_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct LaneInstance {
    /// Ego-frame points ordered along the lane.
    pub points: Vec<[f64; 2]>,
    pub category: usize,
}

/// Raw lane head outputs for one frame.
pub struct LaneRasters<'a> {
    pub conf: &'a Tensor,
    pub offset: &'a Tensor,
    pub embed: &'a Tensor,
    pub cls: &'a Tensor,
}

/// Thresholds confidence, clusters cells by embedding and orders each
/// cluster along its principal axis. Single-cell clusters are dropped.
pub fn decode_lanes(r: &LaneRasters<'_>, grid: &BevGridSpec) -> Vec<LaneInstance> {
    let (_, h, w) = r.conf.dims3();
    let hw = h * w;
    let e_dim = r.embed.dims3().0;
    let n_cls = r.cls.dims3().0;
    struct Cluster {
        sum: Vec<f64>,
        cells: Vec<usize>,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for p in 0..hw {
        if r.conf.data()[p] <= 0.0 {
            continue;
        }
        let e: Vec<f64> = (0..e_dim).map(|d| r.embed.data()[d * hw + p]).collect();
        let nearest = clusters
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let n = c.cells.len() as f64;
                let d2: f64 = e.iter().zip(&c.sum).map(|(x, s)| (x - s / n).powi(2)).sum();
                (d2.sqrt(), i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match nearest {
            Some((d, i)) if d < PUSH_MARGIN / 2.0 => {
                clusters[i].sum.iter_mut().zip(&e).for_each(|(s, x)| *s += x);
                clusters[i].cells.push(p);
            }
            _ => clusters.push(Cluster { sum: e, cells: vec![p] }),
        }
    }
    clusters
        .into_iter()
        .filter(|c| c.cells.len() >= 2)
        .map(|c| {
            let pts: Vec<[f64; 2]> = c
                .cells
                .iter()
                .map(|&p| {
                    let (x, y) = grid.cell_center(p / w, p % w);
                    [x, y + r.offset.data()[p] * grid.cell_size]
                })
                .collect();
            let mut votes = vec![0usize; n_cls];
            for &p in &c.cells {
                let best = (0..n_cls)
                    .max_by(|&a, &b| r.cls.data()[a * hw + p].total_cmp(&r.cls.data()[b * hw + p]).then(b.cmp(&a)))
                    .expect("classes");
                votes[best] += 1;
            }
            let category = (0..n_cls).max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a))).expect("classes");
            LaneInstance { points: order_along_principal_axis(pts), category }
        })
        .collect()
}

fn order_along_principal_axis(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (c, s) = (theta.cos(), theta.sin());
    pts.sort_by(|a, b| (a[0] * c + a[1] * s).total_cmp(&(b[0] * c + b[1] * s)));
    pts
}

/// Points at uniform arc-length spacing, endpoints included.
pub fn resample(points: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = vec![points[0]];
    for s in points.windows(2) {
        let (a, b) = (s[0], s[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Whether enough of the prediction lies within `tol` of the ground truth.
pub fn lane_matches(pred: &LaneInstance, gt: &LanePolyline, tol: f64) -> bool {
    let pts = resample(&pred.points, RESAMPLE_STEP);
    let close = pts.iter().filter(|p| gt.distance_to(p[0], p[1]) <= tol).count();
    close as f64 >= LANE_COVERAGE * pts.len() as f64
}

/// Size of a maximum bipartite matching on a compatibility matrix.
pub fn max_matching(compat: &[Vec<bool>]) -> usize {
    let n_right = compat.first().map_or(0, |r| r.len());
    let mut owner: Vec<Option<usize>> = vec![None; n_right];
    fn augment(i: usize, compat: &[Vec<bool>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for j in 0..owner.len() {
            if compat[i][j] && !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, compat, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    (0..compat.len()).filter(|&i| augment(i, compat, &mut vec![false; n_right], &mut owner)).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// One-to-one matching per frame, counts pooled over frames.
pub fn lane_fscore(preds: &[Vec<LaneInstance>], gts: &[Vec<LanePolyline>], tol: f64) -> LaneMetrics {
    assert_eq!(preds.len(), gts.len(), "one prediction list per frame");
    let (mut tp, mut n_pred, mut n_gt) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let compat: Vec<Vec<bool>> = p.iter().map(|pl| g.iter().map(|gl| lane_matches(pl, gl, tol)).collect()).collect();
        tp += max_matching(&compat);
        n_pred += p.len();
        n_gt += g.len();
    }
    let precision = if n_pred > 0 { tp as f64 / n_pred as f64 } else { 0.0 };
    let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    LaneMetrics { precision, recall, f1, true_positives: tp, n_pred, n_gt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::gt::rasterize_gt;
    use crate::synthworld::world::{generate_world, GenerationSpec};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight(y: f64, id: i32) -> LanePolyline {
        LanePolyline { points: vec![[-20.0, y], [20.0, y]], category: 0, instance_id: id }
    }

    fn pred(y: f64) -> LaneInstance {
        LaneInstance { points: vec![[-10.0, y], [0.0, y], [10.0, y]], category: 0 }
    }

    #[test]
    fn ground_truth_rasters_decode_to_perfect_score() {
        let grid = BevGridSpec::default();
        for seed in 0..4 {
            let world = generate_world(seed, &GenerationSpec::default(), &grid).unwrap();
            let gt = rasterize_gt(&world, &grid, &[], &[], 8).unwrap();
            let (h, w) = (grid.height(), grid.width());
            let conf = gt.lane_conf.map(|v| if v > 0.5 { 10.0 } else { -10.0 });
            let mut embed = Tensor::zeros(&[4, h, w]);
            let mut cls = Tensor::zeros(&[2, h, w]);
            for p in 0..h * w {
                if gt.lane_embed_id[p] >= 0 {
                    embed.data_mut()[p] = 3.0 * gt.lane_embed_id[p] as f64;
                    cls.data_mut()[gt.lane_class[p] as usize * h * w + p] = 10.0;
                }
            }
            let r = LaneRasters { conf: &conf, offset: &gt.lane_offset, embed: &embed, cls: &cls };
            let lanes = decode_lanes(&r, &grid);
            let visible: Vec<LanePolyline> = world
                .lanes
                .iter()
                .filter(|l| gt.lane_embed_id.contains(&l.instance_id))
                .cloned()
                .collect();
            assert_eq!(lanes.len(), visible.len());
            let m = lane_fscore(&[lanes.clone()], &[visible.clone()], LANE_TOLERANCE);
            assert_eq!(m.f1, 1.0, "seed {seed}");
            for l in &lanes {
                let g = visible.iter().find(|g| lane_matches(l, g, LANE_TOLERANCE)).unwrap();
                assert_eq!(l.category, g.category);
            }
        }
    }

    #[test]
    fn hand_cases() {
        let m = lane_fscore(&[vec![]], &[vec![straight(0.0, 0)]], LANE_TOLERANCE);
        assert_eq!((m.recall, m.f1), (0.0, 0.0));
        let m = lane_fscore(&[vec![pred(0.2)]], &[vec![straight(0.0, 0), straight(3.5, 1)]], LANE_TOLERANCE);
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        // a prediction straddling two lanes matches neither
        let far = LaneInstance { points: vec![[-10.0, 0.0], [10.0, 3.5]], category: 0 };
        assert!(!lane_matches(&far, &straight(0.0, 0), LANE_TOLERANCE));
    }

    fn brute_matching(compat: &[Vec<bool>]) -> usize {
        // try every injective assignment of predictions to gt or nothing
        fn go(i: usize, compat: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
            if i == compat.len() {
                return 0;
            }
            let mut best = go(i + 1, compat, used);
            for j in 0..used.len() {
                if compat[i][j] && !used[j] {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, compat, used));
                    used[j] = false;
                }
            }
            best
        }
        let n = compat.first().map_or(0, |r| r.len());
        go(0, compat, &mut vec![false; n])
    }

    #[test]
    fn f1_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let gts: Vec<LanePolyline> =
                (0..rng.random_range(0..5)).map(|i| straight(rng.random_range(-6.0..6.0), i)).collect();
            let preds: Vec<LaneInstance> = (0..rng.random_range(0..5)).map(|_| pred(rng.random_range(-6.0..6.0))).collect();
            let compat: Vec<Vec<bool>> = preds
                .iter()
                .map(|p| gts.iter().map(|g| p.points.iter().all(|q| (q[1] - g.points[0][1]).abs() <= LANE_TOLERANCE)).collect())
                .collect();
            let tp = brute_matching(&compat);
            let m = lane_fscore(&[preds.clone()], &[gts.clone()], LANE_TOLERANCE);
            assert_eq!(m.true_positives, tp);
            let p = if preds.is_empty() { 0.0 } else { tp as f64 / preds.len() as f64 };
            let r = if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert!((m.f1 - f).abs() < 1e-9);
            let mut rp = preds.clone();
            rp.reverse();
            let mut rg = gts.clone();
            rg.reverse();
            assert_eq!(lane_fscore(&[rp], &[rg], LANE_TOLERANCE).true_positives, tp);
        }
    }
}
