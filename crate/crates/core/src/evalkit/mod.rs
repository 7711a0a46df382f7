//! Decoders and metrics for the four tasks, the discount factor and the
//! efficiency benchmark.

pub mod bench;
pub mod det;
pub mod discount;
pub mod lanes;
pub mod seg;

use std::fmt::Write as _;

use crate::bevgeom::BevGridSpec;
use crate::error::{Error, Result};
use crate::nets::model::{history_plan, pooled_bev, FrameInput, HistoryEntry};
use crate::nets::{forward, ModelConfig, ParamStore, Task, TaskHeadOutputs};
use crate::synthworld::dataset::Frame;
use crate::synthworld::gt::GtRasters;
use crate::synthworld::world::{Box3D, LanePolyline, N_DET_CLASSES};
use crate::tensor::Tensor;

pub use bench::{efficiency_benchmark, EfficiencyReport};
pub use det::{compute_map_nds, decode_detections, Detection, DetectionMetrics};
pub use discount::{discount_factor, DiscountFactor};
pub use lanes::{decode_lanes, lane_fscore, LaneInstance, LaneMetrics, LaneRasters};
pub use seg::{map_iou, occ_miou, SegMetrics};

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const MAX_DETECTIONS: usize = 100;

/// Metrics of the evaluated tasks; the others stay `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub n_frames: usize,
    pub det: Option<DetectionMetrics>,
    pub map: Option<SegMetrics>,
    pub lane: Option<LaneMetrics>,
    pub occ: Option<SegMetrics>,
}

impl EvalReport {
    /// Mean of the headline metric of every evaluated task, each in [0, 1].
    pub fn combined_score(&self) -> f64 {
        let v: Vec<f64> = [
            self.det.as_ref().map(|d| d.map),
            self.map.as_ref().map(|m| m.mean),
            self.lane.as_ref().map(|l| l.f1),
            self.occ.as_ref().map(|o| o.mean),
        ]
        .into_iter()
        .flatten()
        .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// `(metric, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if let Some(d) = &self.det {
            out.push(("det.mAP".into(), d.map));
            for (t, thr) in det::DIST_THRESHOLDS.iter().enumerate() {
                out.push((format!("det.mAP@{thr}m"), d.map_by_threshold[t]));
            }
            out.push(("det.mATE".into(), d.mate));
            out.push(("det.mASE".into(), d.mase));
            out.push(("det.mAOE".into(), d.maoe));
            out.push(("det.NDS".into(), d.nds));
        }
        let seg = |out: &mut Vec<(String, f64)>, name: &str, m: &SegMetrics| {
            out.push((format!("{name}.mIoU"), m.mean));
            for (c, v) in m.iou.iter().enumerate() {
                if let Some(v) = v {
                    out.push((format!("{name}.IoU.{c}"), *v));
                }
            }
        };
        if let Some(m) = &self.map {
            seg(&mut out, "map", m);
        }
        if let Some(l) = &self.lane {
            out.push(("lane.precision".into(), l.precision));
            out.push(("lane.recall".into(), l.recall));
            out.push(("lane.F1".into(), l.f1));
        }
        if let Some(o) = &self.occ {
            seg(&mut out, "occ", o);
        }
        out
    }

    /// One `key = value` block per task.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut last = String::new();
        for (k, v) in self.entries() {
            let task = k.split('.').next().unwrap_or_default().to_string();
            if task != last {
                let _ = writeln!(s, "{}[{task}]", if last.is_empty() { "" } else { "\n" });
                last = task;
            }
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        let _ = writeln!(s, "\ncombined_score = {:.6}", self.combined_score());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k},{v:?}");
        }
        s
    }
}

/// Boxes whose center lies inside the grid.
pub fn gt_boxes(frame: &Frame, grid: &BevGridSpec) -> Vec<Box3D> {
    frame.sample.world.boxes.iter().filter(|b| grid.contains_xy(b.center[0], b.center[1])).cloned().collect()
}

/// Lanes with at least one rasterized cell.
pub fn gt_lanes(frame: &Frame) -> Vec<LanePolyline> {
    let ids = &frame.gt.lane_embed_id;
    frame.sample.world.lanes.iter().filter(|l| ids.contains(&l.instance_id)).cloned().collect()
}

fn logit(p: f64) -> f64 {
    const CAP: f64 = 30.0;
    if p >= 1.0 {
        CAP
    } else if p <= 0.0 {
        -CAP
    } else {
        (p / (1.0 - p)).ln().clamp(-CAP, CAP)
    }
}

/// Head outputs that reproduce the ground truth; evaluating them must give
/// perfect scores.
pub fn gt_as_outputs(gt: &GtRasters, embed_dim: usize, c_occ: usize) -> TaskHeadOutputs {
    let (_, h, w) = gt.lane_conf.dims3();
    let hw = h * w;
    let mut embed = Tensor::zeros(&[embed_dim, h, w]);
    let n_lane_cls = gt.lane_class.iter().copied().max().unwrap_or(0).max(1) as usize + 1;
    let mut cls = Tensor::zeros(&[n_lane_cls, h, w]);
    for p in 0..hw {
        if gt.lane_embed_id[p] >= 0 {
            embed.data_mut()[p] = 3.0 * gt.lane_embed_id[p] as f64;
            cls.data_mut()[gt.lane_class[p] as usize * hw + p] = 10.0;
        }
    }
    let occ = &gt.occ_grid;
    let mut occ_logits = Tensor::zeros(&[occ.n_z * c_occ, h, w]);
    for p in 0..hw {
        for z in 0..occ.n_z {
            occ_logits.data_mut()[(z * c_occ + occ.labels[p * occ.n_z + z] as usize) * hw + p] = 10.0;
        }
    }
    TaskHeadOutputs {
        shared: Tensor::zeros(&[1]),
        det_heatmap: gt.det_heatmap.map(logit),
        det_reg: gt.det_reg.clone(),
        map_logits: gt.map_masks.map(|v| if v > 0.5 { 10.0 } else { -10.0 }),
        lane_conf: gt.lane_conf.map(|v| if v > 0.5 { 10.0 } else { -10.0 }),
        lane_offset: gt.lane_offset.clone(),
        lane_embed: embed,
        lane_cls: cls,
        occ_logits,
        depth_logits: gt.depth_bins.iter().map(|b| b.map(|v| if v > 0.5 { 10.0 } else { -10.0 })).collect(),
    }
}

/// Inference over frames in order, feeding each frame the pooled BEV of
/// its predecessors in the same sequence.
pub fn run_model(store: &ParamStore, cfg: &ModelConfig, frames: &[Frame]) -> Result<Vec<TaskHeadOutputs>> {
    let keys: Vec<(u32, u32)> = frames.iter().map(|f| (f.sample.sequence_id, f.sample.frame_index)).collect();
    let plan = history_plan(&keys, cfg.t_hist);
    let inputs: Vec<FrameInput> = frames.iter().map(|f| FrameInput::from_sample(&f.sample)).collect();
    let pooled: Vec<Option<Tensor>> = if cfg.t_hist == 0 {
        vec![None; frames.len()]
    } else {
        inputs.iter().map(|i| pooled_bev(store, cfg, i).map(Some)).collect::<Result<_>>()?
    };
    let mut out = Vec::with_capacity(frames.len());
    for (i, input) in inputs.iter().enumerate() {
        let history: Vec<HistoryEntry> = plan[i]
            .iter()
            .map(|&j| HistoryEntry { pooled: pooled[j].clone().expect("history enabled"), pose: inputs[j].pose.clone() })
            .collect();
        out.push(forward(store, cfg, input, &history)?);
    }
    Ok(out)
}

/// Metrics for `tasks` over per-frame outputs.
pub fn evaluate_outputs(
    outputs: &[TaskHeadOutputs],
    frames: &[Frame],
    grid: &BevGridSpec,
    c_occ: usize,
    tasks: &[Task],
) -> Result<EvalReport> {
    if outputs.len() != frames.len() {
        return Err(Error::Shape(format!("{} outputs for {} frames", outputs.len(), frames.len())));
    }
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = EvalReport { n_frames: frames.len(), ..Default::default() };
    if tasks.contains(&Task::Det) {
        let preds: Vec<Vec<Detection>> = outputs
            .iter()
            .map(|o| decode_detections(&o.det_heatmap, &o.det_reg, grid, SCORE_THRESHOLD, MAX_DETECTIONS))
            .collect();
        let gts: Vec<Vec<Box3D>> = frames.iter().map(|f| gt_boxes(f, grid)).collect();
        report.det = Some(compute_map_nds(&preds, &gts, N_DET_CLASSES));
    }
    if tasks.contains(&Task::Map) {
        let l: Vec<&Tensor> = outputs.iter().map(|o| &o.map_logits).collect();
        let m: Vec<&Tensor> = frames.iter().map(|f| &f.gt.map_masks).collect();
        report.map = Some(map_iou(&l, &m)?);
    }
    if tasks.contains(&Task::Lane) {
        let preds: Vec<Vec<LaneInstance>> = outputs
            .iter()
            .map(|o| {
                let r = LaneRasters { conf: &o.lane_conf, offset: &o.lane_offset, embed: &o.lane_embed, cls: &o.lane_cls };
                decode_lanes(&r, grid)
            })
            .collect();
        let gts: Vec<Vec<LanePolyline>> = frames.iter().map(gt_lanes).collect();
        report.lane = Some(lane_fscore(&preds, &gts, lanes::LANE_TOLERANCE));
    }
    if tasks.contains(&Task::Occ) {
        let l: Vec<&Tensor> = outputs.iter().map(|o| &o.occ_logits).collect();
        let g: Vec<_> = frames.iter().map(|f| &f.gt.occ_grid).collect();
        report.occ = Some(occ_miou(&l, &g, c_occ)?);
    }
    Ok(report)
}

/// Runs the model over frames and evaluates every task.
pub fn evaluate_model(store: &ParamStore, cfg: &ModelConfig, frames: &[Frame], tasks: &[Task]) -> Result<EvalReport> {
    let outputs = run_model(store, cfg, frames)?;
    evaluate_outputs(&outputs, frames, &cfg.grid, cfg.c_occ, tasks)
}
