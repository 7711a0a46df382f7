//! Task losses, their weighted combination and GradNorm weight adaptation.
//!
//! Each loss is a fused tape operation: the value and the gradient with
//! respect to the raw logits are computed together in closed form, and the
//! backward rule only scales the stored gradient.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::model::{DetVars, LaneVars};
use crate::ops::{add_all, sigmoid};
use crate::synthworld::gt::GtRasters;
use crate::tensor::Tensor;

pub const N_COMPONENTS: usize = 5;
pub const COMPONENT_NAMES: [&str; N_COMPONENTS] = ["det", "map", "lane", "occ", "depth"];
pub const PUSH_MARGIN: f64 = 3.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn xlogx(t: f64) -> f64 {
    if t > 0.0 {
        t * t.ln()
    } else {
        0.0
    }
}

/// Binary cross-entropy of `sigmoid(x)` against `t`, minus the entropy of `t`
/// so the minimum is zero for soft targets as well.
pub fn bce_excess(x: f64, t: f64) -> f64 {
    softplus(x) - t * x + xlogx(t) + xlogx(1.0 - t)
}

/// Records a scalar whose gradient with respect to `input` is `grad`.
fn fused<'t>(input: Var<'t>, value: f64, grad: Tensor) -> Var<'t> {
    let grad = Rc::new(grad);
    input.tape().op(
        &[input],
        Tensor::scalar(value),
        Box::new(move |g, _| {
            let s = g.item();
            vec![Some(grad.map(|v| v * s))]
        }),
    )
}

fn zero_loss<'t>(tape: &'t Tape) -> Var<'t> {
    tape.constant(Tensor::scalar(0.0))
}

fn check_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: {got:?} vs {want:?}")));
    }
    Ok(())
}

/// Mean binary cross-entropy (excess over target entropy) of logits.
pub fn bce_mean<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let x = logits.value();
    check_shape("bce", x.shape(), target.shape())?;
    let n = x.numel() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(x.shape());
    for ((g, &xi), &ti) in grad.data_mut().iter_mut().zip(x.data()).zip(target.data()) {
        value += bce_excess(xi, ti);
        *g = (sigmoid(xi) - ti) / n;
    }
    Ok(fused(logits, value / n, grad))
}

/// Per-element binary focal loss with a uniform `alpha`, averaged.
pub fn focal_mean<'t>(logits: Var<'t>, target: &Tensor, alpha: f64, gamma: f64) -> Result<Var<'t>> {
    let x = logits.value();
    check_shape("focal", x.shape(), target.shape())?;
    let n = x.numel() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(x.shape());
    for ((g, &xi), &ti) in grad.data_mut().iter_mut().zip(x.data()).zip(target.data()) {
        let s = if ti > 0.5 { 1.0 } else { -1.0 };
        let z = s * xi;
        let ln_pt = -softplus(-z);
        let pt = sigmoid(z);
        let q = sigmoid(-z);
        let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        value += -alpha * qg * ln_pt;
        *g = s * alpha * (gamma * qg * pt * ln_pt - qg * q) / n;
    }
    Ok(fused(logits, value / n, grad))
}

/// Detection loss pieces; `total = l1 cls + l2 reg + l3 iou`.
pub struct DetLoss<'t> {
    pub cls: Var<'t>,
    pub reg: Var<'t>,
    pub iou: Var<'t>,
    pub total: Var<'t>,
}

/// Axis-aligned BEV IoU of boxes `(cx, cy, extent_x, extent_y)` and its
/// gradient with respect to the first box.
pub fn aligned_iou_grad(p: [f64; 4], q: [f64; 4]) -> (f64, [f64; 4]) {
    let mut inter = [0.0; 2];
    let mut d_inter = [[0.0; 2]; 2]; // d(inter_k)/d(center_k), d(inter_k)/d(extent_k)
    for k in 0..2 {
        let (pc, pe, qc, qe) = (p[k], p[k + 2], q[k], q[k + 2]);
        let hi = (pc + pe / 2.0).min(qc + qe / 2.0);
        let lo = (pc - pe / 2.0).max(qc - qe / 2.0);
        if hi > lo {
            inter[k] = hi - lo;
            let a = if pc + pe / 2.0 < qc + qe / 2.0 { 1.0 } else { 0.0 };
            let b = if pc - pe / 2.0 > qc - qe / 2.0 { 1.0 } else { 0.0 };
            d_inter[k] = [a - b, 0.5 * a + 0.5 * b];
        }
    }
    let i = inter[0] * inter[1];
    let u = p[2] * p[3] + q[2] * q[3] - i;
    let iou = i / u;
    let di = [
        d_inter[0][0] * inter[1],
        d_inter[1][0] * inter[0],
        d_inter[0][1] * inter[1],
        d_inter[1][1] * inter[0],
    ];
    let da = [0.0, 0.0, p[3], p[2]];
    let mut g = [0.0; 4];
    for j in 0..4 {
        let du = da[j] - di[j];
        g[j] = (di[j] * u - i * du) / (u * u);
    }
    (iou, g)
}

fn center_cells(mask: &Tensor) -> Vec<usize> {
    mask.data().iter().enumerate().filter(|(_, &m)| m > 0.5).map(|(i, _)| i).collect()
}

pub fn detection_loss<'t>(det: &DetVars<'t>, gt: &GtRasters, lambdas: [f64; 3]) -> Result<DetLoss<'t>> {
    let tape = det.heatmap.tape();
    let cls = bce_mean(det.heatmap, &gt.det_heatmap)?;
    let rv = det.reg.value();
    check_shape("det reg", rv.shape(), gt.det_reg.shape())?;
    let (c, h, w) = rv.dims3();
    let hw = h * w;
    let cells = center_cells(&gt.det_mask);
    let (reg, iou) = if cells.is_empty() {
        (zero_loss(tape), zero_loss(tape))
    } else {
        let n = cells.len() as f64;
        let mut reg_v = 0.0;
        let mut reg_g = Tensor::zeros(&[c, h, w]);
        let mut iou_v = 0.0;
        let mut iou_g = Tensor::zeros(&[c, h, w]);
        for &p in &cells {
            for ch in 0..c {
                let d = rv.data()[ch * hw + p] - gt.det_reg.data()[ch * hw + p];
                reg_v += d.abs();
                reg_g.data_mut()[ch * hw + p] = d.signum() * f64::from(d != 0.0) / n;
            }
            let at = |t: &Tensor, ch: usize| t.data()[ch * hw + p];
            // extent along x is the box length, along y its width
            let pb = [at(&rv, 0), at(&rv, 1), at(&rv, 4).exp(), at(&rv, 3).exp()];
            let qb = [at(&gt.det_reg, 0), at(&gt.det_reg, 1), at(&gt.det_reg, 4).exp(), at(&gt.det_reg, 3).exp()];
            let (v, g) = aligned_iou_grad(pb, qb);
            iou_v += 1.0 - v;
            let gd = iou_g.data_mut();
            gd[p] = -g[0] / n;
            gd[hw + p] = -g[1] / n;
            gd[4 * hw + p] = -g[2] * pb[2] / n;
            gd[3 * hw + p] = -g[3] * pb[3] / n;
        }
        (fused(det.reg, reg_v / n, reg_g), fused(det.reg, iou_v / n, iou_g))
    };
    let total = add_all(&[cls.scale(lambdas[0]), reg.scale(lambdas[1]), iou.scale(lambdas[2])]);
    Ok(DetLoss { cls, reg, iou, total })
}

pub fn map_loss<'t>(logits: Var<'t>, masks: &Tensor) -> Result<Var<'t>> {
    focal_mean(logits, masks, FOCAL_ALPHA, FOCAL_GAMMA)
}

pub struct LaneLoss<'t> {
    pub conf: Var<'t>,
    pub offset: Var<'t>,
    pub emb: Var<'t>,
    pub cls: Var<'t>,
    pub total: Var<'t>,
}

/// Pull and push terms of the instance embedding loss for `(embed_dim, H, W)`
/// embeddings, with value and gradient.
pub fn push_pull(embed: &Tensor, ids: &[i32], margin: f64) -> (f64, f64, Tensor) {
    let (e, h, w) = embed.dims3();
    let hw = h * w;
    let mut inst: Vec<i32> = ids.iter().copied().filter(|&i| i >= 0).collect();
    inst.sort_unstable();
    inst.dedup();
    let mut grad = Tensor::zeros(&[e, h, w]);
    if inst.is_empty() {
        return (0.0, 0.0, grad);
    }
    let k = inst.len() as f64;
    let members: Vec<Vec<usize>> =
        inst.iter().map(|&id| (0..hw).filter(|&p| ids[p] == id).collect()).collect();
    let means: Vec<Vec<f64>> = members
        .iter()
        .map(|m| (0..e).map(|d| m.iter().map(|&p| embed.data()[d * hw + p]).sum::<f64>() / m.len() as f64).collect())
        .collect();
    let mut pull = 0.0;
    for (m, mu) in members.iter().zip(&means) {
        let n = m.len() as f64;
        for &p in m {
            for d in 0..e {
                let diff = embed.data()[d * hw + p] - mu[d];
                pull += diff * diff / (n * k);
                grad.data_mut()[d * hw + p] += 2.0 * diff / (n * k);
            }
        }
    }
    let mut push = 0.0;
    let n_pairs = inst.len() * (inst.len() - 1) / 2;
    for a in 0..inst.len() {
        for b in a + 1..inst.len() {
            let diff: Vec<f64> = (0..e).map(|d| means[a][d] - means[b][d]).collect();
            let dist = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            if dist >= margin {
                continue;
            }
            push += (margin - dist).powi(2) / n_pairs as f64;
            if dist == 0.0 {
                continue;
            }
            let coef = -2.0 * (margin - dist) / dist / n_pairs as f64;
            for (idx, sign) in [(a, 1.0), (b, -1.0)] {
                let n = members[idx].len() as f64;
                for &p in &members[idx] {
                    for d in 0..e {
                        grad.data_mut()[d * hw + p] += sign * coef * diff[d] / n;
                    }
                }
            }
        }
    }
    (pull, push, grad)
}

/// Mean softmax cross-entropy over the given cells of a `(C, H, W)` raster.
fn cross_entropy_cells<'t>(logits: Var<'t>, cells: &[(usize, usize)]) -> Var<'t> {
    let x = logits.value();
    let (c, h, w) = x.dims3();
    let hw = h * w;
    if cells.is_empty() {
        return zero_loss(logits.tape());
    }
    let n = cells.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(&[c, h, w]);
    for &(p, target) in cells {
        let m = (0..c).map(|k| x.data()[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (x.data()[k * hw + p] - m).exp()).sum();
        value += z.ln() + m - x.data()[target * hw + p];
        for k in 0..c {
            let prob = (x.data()[k * hw + p] - m).exp() / z;
            grad.data_mut()[k * hw + p] = (prob - f64::from(k == target)) / n;
        }
    }
    fused(logits, value / n, grad)
}

pub fn lane_loss<'t>(lane: &LaneVars<'t>, gt: &GtRasters, lambdas: [f64; 4]) -> Result<LaneLoss<'t>> {
    let tape = lane.conf.tape();
    let conf = bce_mean(lane.conf, &gt.lane_conf)?;
    let ov = lane.offset.value();
    check_shape("lane offset", ov.shape(), gt.lane_offset.shape())?;
    let cells: Vec<usize> = (0..gt.lane_embed_id.len()).filter(|&p| gt.lane_embed_id[p] >= 0).collect();
    let (offset, emb, cls) = if cells.is_empty() {
        (zero_loss(tape), zero_loss(tape), zero_loss(tape))
    } else {
        let n = cells.len() as f64;
        let mut v = 0.0;
        let mut g = Tensor::zeros(ov.shape());
        for &p in &cells {
            let d = ov.data()[p] - gt.lane_offset.data()[p];
            v += d * d / n;
            g.data_mut()[p] = 2.0 * d / n;
        }
        let offset = fused(lane.offset, v, g);
        let (pull, push, eg) = push_pull(&lane.embed.value(), &gt.lane_embed_id, PUSH_MARGIN);
        let emb = fused(lane.embed, pull + push, eg);
        let targets: Vec<(usize, usize)> = cells.iter().map(|&p| (p, gt.lane_class[p] as usize)).collect();
        (offset, emb, cross_entropy_cells(lane.cls, &targets))
    };
    let total = add_all(&[
        conf.scale(lambdas[0]),
        offset.scale(lambdas[1]),
        emb.scale(lambdas[2]),
        cls.scale(lambdas[3]),
    ]);
    Ok(LaneLoss { conf, offset, emb, cls, total })
}

/// Mean per-voxel cross-entropy; logits channel `z * C + c`.
pub fn occ_loss<'t>(logits: Var<'t>, gt: &GtRasters, c_occ: usize) -> Result<Var<'t>> {
    let x = logits.value();
    let (ch, h, w) = x.dims3();
    let occ = &gt.occ_grid;
    if ch != occ.n_z * c_occ || h != occ.h || w != occ.w {
        return Err(Error::Shape(format!("occ logits {:?} vs grid {}x{}x{}", x.shape(), occ.h, occ.w, occ.n_z)));
    }
    let hw = h * w;
    let n = (hw * occ.n_z) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(x.shape());
    for p in 0..hw {
        for z in 0..occ.n_z {
            let target = occ.labels[p * occ.n_z + z] as usize;
            let idx = |k: usize| (z * c_occ + k) * hw + p;
            let m = (0..c_occ).map(|k| x.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c_occ).map(|k| (x.data()[idx(k)] - m).exp()).sum();
            value += s.ln() + m - x.data()[idx(target)];
            for k in 0..c_occ {
                let prob = (x.data()[idx(k)] - m).exp() / s;
                grad.data_mut()[idx(k)] = (prob - f64::from(k == target)) / n;
            }
        }
    }
    Ok(fused(logits, value / n, grad))
}

/// Per-bin sigmoid cross-entropy over pixels with a valid one-hot target,
/// pooled across cameras. Returns the loss and whether any pixel was valid.
pub fn depth_loss<'t>(logits: &[Var<'t>], bins: &[Tensor]) -> Result<(Var<'t>, bool)> {
    if logits.len() != bins.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} depth outputs vs {} targets", logits.len(), bins.len())));
    }
    let tape = logits[0].tape();
    let mut valid = Vec::with_capacity(bins.len());
    let mut count = 0usize;
    for (l, b) in logits.iter().zip(bins) {
        check_shape("depth", &l.shape(), b.shape())?;
        let (d, h, w) = b.dims3();
        let hw = h * w;
        let v: Vec<bool> = (0..hw).map(|p| (0..d).any(|k| b.data()[k * hw + p] > 0.5)).collect();
        count += v.iter().filter(|&&x| x).count();
        valid.push(v);
    }
    if count == 0 {
        return Ok((zero_loss(tape), false));
    }
    let mut parts = Vec::with_capacity(logits.len());
    for ((l, b), v) in logits.iter().zip(bins).zip(&valid) {
        let x = l.value();
        let (d, h, w) = x.dims3();
        let hw = h * w;
        let n = (count * d) as f64;
        let mut value = 0.0;
        let mut grad = Tensor::zeros(x.shape());
        for p in (0..hw).filter(|&p| v[p]) {
            for k in 0..d {
                let i = k * hw + p;
                value += bce_excess(x.data()[i], b.data()[i]);
                grad.data_mut()[i] = (sigmoid(x.data()[i]) - b.data()[i]) / n;
            }
        }
        parts.push(fused(*l, value / n, grad));
    }
    Ok((add_all(&parts), true))
}

/// Fixed loss weights for the five components and the inner lambdas.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// `(det, map, lane, occ, depth)`.
    pub components: [f64; N_COMPONENTS],
    pub det_lambdas: [f64; 3],
    pub lane_lambdas: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { components: [1.0; N_COMPONENTS], det_lambdas: [1.0; 3], lane_lambdas: [1.0; 4] }
    }
}

impl LossWeights {
    /// Manual emphasis on the lane task.
    pub fn high_lane() -> Self {
        LossWeights { components: [1.0, 1.0, 4.0, 1.0, 1.0], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.components.iter().chain(&self.det_lambdas).chain(&self.lane_lambdas);
        if all.clone().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Weighted sum of the available components. Missing components contribute
/// nothing regardless of weight.
pub fn combine<'t>(parts: &[Option<Var<'t>>; N_COMPONENTS], weights: &[f64; N_COMPONENTS]) -> Var<'t> {
    let tape = parts.iter().flatten().next().expect("at least one loss component").tape();
    let mut terms: Vec<Var<'t>> = parts.iter().zip(weights).filter_map(|(p, &w)| p.map(|p| p.scale(w))).collect();
    if terms.is_empty() {
        terms.push(zero_loss(tape));
    }
    add_all(&terms)
}

/// Per-component shared-layer gradient norms `|| d(w_i L_i) / d ref ||`.
pub fn component_grad_norms<'t>(
    parts: &[Option<Var<'t>>; N_COMPONENTS],
    weights: &[f64; N_COMPONENTS],
    reference: &[Var<'t>],
) -> [f64; N_COMPONENTS] {
    let mut out = [0.0; N_COMPONENTS];
    let Some(first) = reference.first() else { return out };
    let tape = first.tape();
    let cutoff = reference.iter().map(|v| v.id()).min().expect("nonempty");
    for (i, p) in parts.iter().enumerate() {
        let Some(p) = p else { continue };
        let grads = tape.backward_until(*p, cutoff);
        let sq: f64 = reference.iter().filter_map(|r| grads.get(*r)).map(|g| g.sq_norm()).sum();
        out[i] = weights[i].abs() * sq.sqrt();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradNormState {
    pub weights: Vec<f64>,
    pub initial_losses: Option<Vec<f64>>,
    /// Asymmetry exponent.
    pub alpha: f64,
    pub lr: f64,
    /// Set when an initial loss was nonpositive and replaced by 1.
    pub fallback_warning: bool,
}

pub const MIN_WEIGHT: f64 = 1e-4;

impl GradNormState {
    pub fn new(n_tasks: usize) -> Self {
        GradNormState { weights: vec![1.0; n_tasks], initial_losses: None, alpha: 1.5, lr: 0.025, fallback_warning: false }
    }

    pub fn n_tasks(&self) -> usize {
        self.weights.len()
    }
}

/// Clamps to the positivity floor and rescales to sum `n`, repeating until
/// both hold.
fn renormalize(w: &mut [f64]) {
    let n = w.len() as f64;
    for _ in 0..64 {
        for x in w.iter_mut() {
            *x = x.max(MIN_WEIGHT);
        }
        let s: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x *= n / s;
        }
        if w.iter().all(|&x| x >= MIN_WEIGHT) {
            return;
        }
    }
}

/// One GradNorm step. `grad_norms[i]` is `G_i = w_i ||grad L_i||` at the
/// shared reference layer.
pub fn gradnorm_update(state: &mut GradNormState, losses: &[f64], grad_norms: &[f64]) -> Result<()> {
    let n = state.n_tasks();
    if losses.len() != n || grad_norms.len() != n {
        return Err(Error::Shape(format!("gradnorm expects {n} losses and norms")));
    }
    let initial = state.initial_losses.get_or_insert_with(|| {
        losses
            .iter()
            .map(|&l| {
                if l > 0.0 {
                    l
                } else {
                    state.fallback_warning = true;
                    1.0
                }
            })
            .collect()
    });
    let ratios: Vec<f64> = losses.iter().zip(initial.iter()).map(|(l, l0)| l / l0).collect();
    let mean_ratio = ratios.iter().sum::<f64>() / n as f64;
    let mean_g = grad_norms.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        let r = if mean_ratio > 0.0 { ratios[i] / mean_ratio } else { 1.0 };
        let target = mean_g * r.powf(state.alpha);
        let diff = grad_norms[i] - target;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        // d G_i / d w_i is the unweighted gradient norm
        let unweighted = if state.weights[i] > 0.0 { grad_norms[i] / state.weights[i] } else { 0.0 };
        state.weights[i] -= state.lr * sign * unweighted;
    }
    renormalize(&mut state.weights);
    Ok(())
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub raw: [f64; N_COMPONENTS],
    pub weights: [f64; N_COMPONENTS],
    pub combined: f64,
    pub grad_norms: [f64; N_COMPONENTS],
    pub warning: bool,
}

impl LossReport {
    pub fn new(step: u64, raw: [f64; N_COMPONENTS], weights: [f64; N_COMPONENTS]) -> Self {
        let combined = raw.iter().zip(&weights).map(|(l, w)| l * w).sum();
        LossReport { step, raw, weights, combined, grad_norms: [0.0; N_COMPONENTS], warning: false }
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["step".to_string()];
        for prefix in ["loss", "weight"] {
            cols.extend(COMPONENT_NAMES.iter().map(|c| format!("{prefix}_{c}")));
        }
        cols.push("combined".into());
        cols.extend(COMPONENT_NAMES.iter().map(|c| format!("gradnorm_{c}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string()];
        cols.extend(self.raw.iter().map(|v| format!("{v:?}")));
        cols.extend(self.weights.iter().map(|v| format!("{v:?}")));
        cols.push(format!("{:?}", self.combined));
        cols.extend(self.grad_norms.iter().map(|v| format!("{v:?}")));
        cols.join(",")
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let v: Vec<&str> = line.trim().split(',').collect();
        if v.len() != 1 + 3 * N_COMPONENTS + 1 {
            return Err(Error::Config(format!("loss log row has {} columns", v.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?} in loss log")));
        let arr = |off: usize| -> Result<[f64; N_COMPONENTS]> {
            let mut a = [0.0; N_COMPONENTS];
            for (i, x) in a.iter_mut().enumerate() {
                *x = f(v[off + i])?;
            }
            Ok(a)
        };
        let raw = arr(1)?;
        let weights = arr(1 + N_COMPONENTS)?;
        let grad_norms = arr(2 + 2 * N_COMPONENTS)?;
        Ok(LossReport {
            step: v[0].parse().map_err(|_| Error::Config("bad step".into()))?,
            raw,
            weights,
            combined: f(v[1 + 2 * N_COMPONENTS])?,
            grad_norms,
            warning: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, ScalarFn};
    use crate::synthworld::gt::OccGrid;
    use proptest::prelude::*;

    fn empty_gt(h: usize, w: usize, n_z: usize) -> GtRasters {
        GtRasters {
            det_heatmap: Tensor::zeros(&[3, h, w]),
            det_reg: Tensor::zeros(&[8, h, w]),
            det_mask: Tensor::zeros(&[1, h, w]),
            map_masks: Tensor::zeros(&[3, h, w]),
            lane_conf: Tensor::zeros(&[1, h, w]),
            lane_offset: Tensor::zeros(&[1, h, w]),
            lane_embed_id: vec![-1; h * w],
            lane_class: vec![-1; h * w],
            occ_grid: OccGrid::filled(h, w, n_z, 4),
            depth_bins: vec![],
        }
    }

    /// Small scene: two boxes, two lane instances, mixed occupancy.
    fn toy_gt() -> GtRasters {
        let (h, w) = (4, 5);
        let mut gt = empty_gt(h, w, 2);
        for (p, c) in [(6, 0), (13, 2)] {
            gt.det_mask.data_mut()[p] = 1.0;
            gt.det_heatmap.data_mut()[c * 20 + p] = 1.0;
            gt.det_heatmap.data_mut()[c * 20 + p + 1] = 0.6;
            let vals = [0.1, -0.2, 0.8, 0.5f64.ln(), 1.2f64.ln(), 0.4, 0.6, 0.8];
            for (ch, v) in vals.iter().enumerate() {
                gt.det_reg.data_mut()[ch * 20 + p] = *v;
            }
        }
        for p in [0, 1, 2, 3] {
            gt.lane_conf.data_mut()[p] = 1.0;
            gt.lane_offset.data_mut()[p] = 0.2;
            gt.lane_embed_id[p] = 0;
            gt.lane_class[p] = 0;
        }
        for p in [15, 16, 17] {
            gt.lane_conf.data_mut()[p] = 1.0;
            gt.lane_offset.data_mut()[p] = -0.3;
            gt.lane_embed_id[p] = 5;
            gt.lane_class[p] = 1;
        }
        for (i, l) in gt.occ_grid.labels.iter_mut().enumerate() {
            *l = (i % 5) as u8;
        }
        gt
    }

    fn pseudo(n: usize, seed: usize) -> Vec<f64> {
        (0..n).map(|i| (((i * 7919 + seed * 104729) % 1000) as f64 / 1000.0 - 0.5) * 2.0).collect()
    }

    #[test]
    fn focal_closed_form_and_degenerate_case() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0).reshape(&[1, 1, 1]).unwrap());
        let t = Tensor::full(&[1, 1, 1], 1.0);
        let l = focal_mean(x, &t, 0.25, 2.0).unwrap();
        let want = -0.25 * 0.25 * 0.5f64.ln();
        assert!((l.item() - want).abs() < 1e-12);
        assert!((want - 0.04332).abs() < 1e-5);
        let xs = Tensor::from_vec(&[1, 2, 3], vec![-3.0, -0.5, 0.0, 0.7, 2.0, 9.0]).unwrap();
        let ts = Tensor::from_vec(&[1, 2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let tape = Tape::new();
        let f = focal_mean(tape.leaf(xs.clone()), &ts, 1.0, 0.0).unwrap().item();
        let b = bce_mean(tape.leaf(xs), &ts).unwrap().item();
        assert!((f - b).abs() < 1e-6);
        let extreme = Tensor::from_vec(&[1, 1, 2], vec![40.0, -40.0]).unwrap();
        let tm = Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert!(focal_mean(tape.leaf(extreme), &tm, 0.25, 2.0).unwrap().item() < 1e-6);
    }

    #[test]
    fn iou_loss_of_half_overlapping_unit_squares() {
        let (iou, _) = aligned_iou_grad([0.5, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]);
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
        let mut gt = empty_gt(2, 2, 1);
        gt.det_mask.data_mut()[0] = 1.0;
        // unit square: ln 1 = 0 sizes
        gt.det_reg.data_mut()[6 * 4] = 0.0;
        gt.det_reg.data_mut()[7 * 4] = 1.0;
        let mut pred = gt.det_reg.clone();
        pred.data_mut()[0] = 0.5;
        let tape = Tape::new();
        let det = DetVars { heatmap: tape.leaf(Tensor::full(&[3, 2, 2], -30.0)), reg: tape.leaf(pred) };
        let l = detection_loss(&det, &gt, [1.0; 3]).unwrap();
        assert!((l.iou.item() - 2.0 / 3.0).abs() < 1e-12);
        assert!((l.reg.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_zero_losses() {
        let gt = toy_gt();
        let tape = Tape::new();
        let inflate = |t: &Tensor| t.map(|v| if v >= 1.0 { 40.0 } else if v <= 0.0 { -40.0 } else { (v / (1.0 - v)).ln() });
        let det = DetVars { heatmap: tape.leaf(inflate(&gt.det_heatmap)), reg: tape.leaf(gt.det_reg.clone()) };
        let d = detection_loss(&det, &gt, [1.0; 3]).unwrap();
        assert!(d.cls.item() < 1e-6 && d.reg.item() == 0.0 && d.iou.item().abs() < 1e-12);
        assert!(map_loss(tape.leaf(inflate(&gt.map_masks)), &gt.map_masks).unwrap().item() < 1e-6);
        let mut embed = Tensor::zeros(&[2, 4, 5]);
        for p in [15, 16, 17] {
            embed.data_mut()[p] = 5.0;
        }
        let mut cls = Tensor::zeros(&[2, 4, 5]);
        for p in 0..20 {
            let c = gt.lane_class[p].max(0) as usize;
            cls.data_mut()[c * 20 + p] = 40.0;
        }
        let lane = LaneVars {
            conf: tape.leaf(inflate(&gt.lane_conf)),
            offset: tape.leaf(gt.lane_offset.clone()),
            embed: tape.leaf(embed),
            cls: tape.leaf(cls),
        };
        let l = lane_loss(&lane, &gt, [1.0; 4]).unwrap();
        assert!(l.total.item() < 1e-6, "{}", l.total.item());
        let mut occ = Tensor::full(&[10, 4, 5], -20.0);
        for p in 0..20 {
            for z in 0..2 {
                let c = gt.occ_grid.labels[p * 2 + z] as usize;
                occ.data_mut()[(z * 5 + c) * 20 + p] = 20.0;
            }
        }
        assert!(occ_loss(tape.leaf(occ), &gt, 5).unwrap().item() < 1e-6);
    }

    #[test]
    fn closed_form_small_cases() {
        let tape = Tape::new();
        let gt = empty_gt(1, 2, 1);
        // uniform logits over K categories
        let occ = occ_loss(tape.leaf(Tensor::zeros(&[5, 1, 2])), &gt, 5).unwrap();
        assert!((occ.item() - 5f64.ln()).abs() < 1e-12);
        // hand two-voxel case, targets 4 and 4
        let logits = Tensor::from_vec(&[5, 1, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0]).unwrap();
        let ce = |xs: [f64; 5], t: usize| xs.iter().map(|x| x.exp()).sum::<f64>().ln() - xs[t];
        let want = (ce([1.0, 0.0, 0.0, 0.0, 2.0], 4) + ce([0.0, 0.0, 0.0, 0.0, 1.0], 4)) / 2.0;
        assert!((occ_loss(tape.leaf(logits), &gt, 5).unwrap().item() - want).abs() < 1e-12);
        // depth: one valid two-bin pixel, one invalid
        let bins = Tensor::from_vec(&[2, 1, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[2, 1, 2], vec![0.3, 5.0, -0.2, 7.0]).unwrap();
        let (l, valid) = depth_loss(&[tape.leaf(x)], &[bins]).unwrap();
        let want = (softplus(0.3) + softplus(-0.2) + 0.2) / 2.0;
        assert!(valid && (l.item() - want).abs() < 1e-12);
        let (z, valid) = depth_loss(&[tape.leaf(Tensor::zeros(&[2, 1, 2]))], &[Tensor::zeros(&[2, 1, 2])]).unwrap();
        assert!(!valid && z.item() == 0.0);
    }

    #[test]
    fn push_pull_closed_forms() {
        let ids = vec![0, 0, 1, 1];
        let same = Tensor::from_vec(&[2, 1, 4], vec![1.0, 1.0, 1.0 + PUSH_MARGIN, 1.0 + PUSH_MARGIN, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (pull, push, _) = push_pull(&same, &ids, PUSH_MARGIN);
        assert_eq!((pull, push), (0.0, 0.0));
        let half = Tensor::from_vec(&[2, 1, 4], vec![0.0, 0.0, 1.5, 1.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, push, _) = push_pull(&half, &ids, PUSH_MARGIN);
        assert!((push - (PUSH_MARGIN / 2.0).powi(2)).abs() < 1e-12);
        let single = push_pull(&half, &[0, 0, 0, 0], PUSH_MARGIN);
        assert_eq!(single.1, 0.0);
        assert!(single.0 > 0.0);
    }

    #[test]
    fn losses_are_invariant_to_instance_relabeling() {
        let gt = toy_gt();
        let mut relabeled = gt.clone();
        for id in relabeled.lane_embed_id.iter_mut() {
            *id = match *id {
                0 => 9,
                5 => 2,
                x => x,
            };
        }
        let e = Tensor::from_vec(&[2, 4, 5], pseudo(40, 3)).unwrap();
        let a = push_pull(&e, &gt.lane_embed_id, PUSH_MARGIN);
        let b = push_pull(&e, &relabeled.lane_embed_id, PUSH_MARGIN);
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        assert!(a.2.max_abs_diff(&b.2) < 1e-12);
    }

    #[test]
    fn every_loss_gradient_matches_finite_differences() {
        let gt = toy_gt();
        let coords = |n: usize, arg: usize| -> Vec<(usize, usize)> { (0..12).map(|j| (arg, (j * 7 + 3) % n)).collect() };
        let heat = Tensor::from_vec(&[3, 4, 5], pseudo(60, 1)).unwrap();
        let reg = Tensor::from_vec(&[8, 4, 5], pseudo(160, 2)).unwrap();
        let f: &ScalarFn = &|_, xs| {
            detection_loss(&DetVars { heatmap: xs[0], reg: xs[1] }, &gt, [1.0, 0.7, 1.3]).unwrap().total
        };
        let mut cs = coords(60, 0);
        // centre cells 6 and 13 across all regression channels
        cs.extend((0..8).flat_map(|c| [(1, c * 20 + 6), (1, c * 20 + 13)]));
        let r = check_gradients(&[heat, reg], f, &cs, 1e-4);
        assert!(r.passes(1e-4), "det {r:?}");

        let masks = gt.map_masks.map(|_| 0.0).zip_map(&Tensor::from_vec(&[3, 4, 5], pseudo(60, 9)).unwrap(), |_, b| if b > 0.0 { 1.0 } else { 0.0 });
        let f: &ScalarFn = &|_, xs| { map_loss(xs[0], &masks).unwrap() };
        let r = check_gradients(&[Tensor::from_vec(&[3, 4, 5], pseudo(60, 4)).unwrap()], f, &coords(60, 0), 1e-4);
        assert!(r.passes(1e-4), "map {r:?}");

        let lane_in = [
            Tensor::from_vec(&[1, 4, 5], pseudo(20, 5)).unwrap(),
            Tensor::from_vec(&[1, 4, 5], pseudo(20, 6)).unwrap(),
            Tensor::from_vec(&[2, 4, 5], pseudo(40, 7)).unwrap(),
            Tensor::from_vec(&[2, 4, 5], pseudo(40, 8)).unwrap(),
        ];
        let f: &ScalarFn = &|_, xs| {
            let lv = LaneVars { conf: xs[0], offset: xs[1], embed: xs[2], cls: xs[3] };
            lane_loss(&lv, &gt, [1.0, 0.5, 2.0, 1.5]).unwrap().total
        };
        let cs: Vec<_> = (0..4).flat_map(|a| [0usize, 1, 2, 3, 15, 16, 17, 20, 35].into_iter().map(move |p| (a, p))).filter(|&(a, p)| p < [20, 20, 40, 40][a]).collect();
        let r = check_gradients(&lane_in, f, &cs, 1e-4);
        assert!(r.passes(1e-4), "lane {r:?}");

        let f: &ScalarFn = &|_, xs| { occ_loss(xs[0], &gt, 5).unwrap() };
        let r = check_gradients(&[Tensor::from_vec(&[10, 4, 5], pseudo(200, 10)).unwrap()], f, &coords(200, 0), 1e-4);
        assert!(r.passes(1e-4), "occ {r:?}");

        let bins = Tensor::from_fn(&[3, 2, 2], |i| if i == 1 || i == 6 { 1.0 } else { 0.0 });
        let f: &ScalarFn = &|_, xs| { depth_loss(&[xs[0]], &[bins.clone()]).unwrap().0 };
        let r = check_gradients(&[Tensor::from_vec(&[3, 2, 2], pseudo(12, 11)).unwrap()], f, &coords(12, 0), 1e-4);
        assert!(r.passes(1e-4), "depth {r:?}");
    }

    #[test]
    fn combine_sums_weighted_parts_and_zero_weight_kills_gradient() {
        let tape = Tape::new();
        let xs: Vec<Var> = (1..=5).map(|i| tape.leaf(Tensor::scalar(i as f64))).collect();
        let parts = [Some(xs[0]), Some(xs[1]), Some(xs[2]), Some(xs[3]), Some(xs[4])];
        assert_eq!(combine(&parts, &[1.0; 5]).item(), 15.0);
        let c = combine(&parts, &[2.0, 0.0, 1.0, 1.0, 1.0]);
        let g = tape.backward(c);
        assert_eq!(g.get(xs[1]).unwrap().item(), 0.0);
        let norms = component_grad_norms(&parts, &[2.0, 0.0, 1.0, 1.0, 1.0], &xs[..2]);
        assert_eq!(norms[1], 0.0);
        assert_eq!(norms[0], 2.0);
        // linearity in the weights
        let a = combine(&parts, &[0.5, 1.0, 2.0, 0.25, 3.0]).item();
        let b = combine(&parts, &[1.5, 3.0, 6.0, 0.75, 9.0]).item();
        assert!((b - 3.0 * a).abs() < 1e-12);
        assert_eq!(LossWeights::high_lane().components[2], 4.0);
    }

    #[test]
    fn gradnorm_symmetric_fixed_point() {
        let mut s = GradNormState::new(5);
        gradnorm_update(&mut s, &[2.0; 5], &[0.7; 5]).unwrap();
        gradnorm_update(&mut s, &[1.0; 5], &[0.3; 5]).unwrap();
        assert_eq!(s.weights, vec![1.0; 5]);
    }

    #[test]
    fn gradnorm_two_task_step_matches_closed_form() {
        let mut s = GradNormState { alpha: 0.0, ..GradNormState::new(2) };
        let (g1, g2) = (3.0, 1.0);
        gradnorm_update(&mut s, &[1.0, 1.0], &[g1, g2]).unwrap();
        // w <- w - lr * sign(G - mean G) * G / w, then rescale to sum 2
        let lr = 0.025;
        let raw = [1.0 - lr * g1, 1.0 + lr * g2];
        let sum = raw[0] + raw[1];
        let want = [2.0 * raw[0] / sum, 2.0 * raw[1] / sum];
        assert!((s.weights[0] - want[0]).abs() < 1e-8 && (s.weights[1] - want[1]).abs() < 1e-8);
        assert!(s.weights[0] < 1.0);
    }

    #[test]
    fn nonpositive_initial_loss_falls_back() {
        let mut s = GradNormState::new(2);
        gradnorm_update(&mut s, &[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(s.fallback_warning);
        assert_eq!(s.initial_losses, Some(vec![1.0, 1.0]));
    }

    proptest! {
        #[test]
        fn gradnorm_keeps_sum_and_positivity(
            steps in proptest::collection::vec(
                (proptest::collection::vec(0.01f64..10.0, 5), proptest::collection::vec(0.0f64..50.0, 5)), 1..200)
        ) {
            let mut s = GradNormState::new(5);
            for (l, g) in &steps {
                gradnorm_update(&mut s, l, g).unwrap();
                let sum: f64 = s.weights.iter().sum();
                prop_assert!((sum - 5.0).abs() < 1e-6);
                prop_assert!(s.weights.iter().all(|&w| w >= MIN_WEIGHT * (1.0 - 1e-12)));
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut r = LossReport::new(7, [1.0, 2.0, 3.0, 4.0, 5.0], [1.0, 0.5, 1.5, 1.0, 1.0]);
        r.grad_norms = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert!((r.combined - (1.0 + 1.0 + 4.5 + 4.0 + 5.0)).abs() < 1e-12);
        let back = LossReport::parse_csv_row(&r.csv_row()).unwrap();
        assert_eq!(back, r);
        assert_eq!(LossReport::csv_header().split(',').count(), r.csv_row().split(',').count());
    }
}
