//! Forward passes: backbone, depth estimator, lift-splat, temporal fusion,
//! BEV encoder and the four heads.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::bevgeom::{self, build_frustum, CameraModel, EgoPose, SplatIndex};
use crate::error::{Error, Result};
use crate::ops::{add_all, conv2d, instance_norm};
use crate::synthworld::render::Sample;
use crate::tensor::Tensor;

use super::{Bound, ModelConfig, ParamStore, Task};

const NORM_EPS: f64 = 1e-5;

/// Network input for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    /// Per camera `(3, H, W)`.
    pub images: Vec<Tensor>,
    pub cameras: Vec<CameraModel>,
    pub pose: EgoPose,
}

impl FrameInput {
    pub fn from_sample(s: &Sample) -> Self {
        FrameInput { images: s.images.clone(), cameras: s.cameras.clone(), pose: s.ego_pose.clone() }
    }
}

/// Detached pooled BEV of a past frame together with its pose.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub pooled: Tensor,
    pub pose: EgoPose,
}

/// For each frame, the indices of up to `t_hist` earlier frames of the same
/// sequence, most recent first. `keys` are `(sequence, frame index)`.
pub fn history_plan(keys: &[(u32, u32)], t_hist: usize) -> Vec<Vec<usize>> {
    keys.iter()
        .map(|&(seq, f)| {
            (1..=t_hist as u32)
                .take_while(|&k| k <= f)
                .filter_map(|k| keys.iter().position(|&(s2, f2)| s2 == seq && f2 == f - k))
                .collect()
        })
        .collect()
}

fn conv_layer<'t>(b: &Bound<'t, '_>, name: &str, x: Var<'t>, stride: usize, norm: bool, relu: bool) -> Var<'t> {
    let w = b.param(&format!("{name}.w"));
    let k = w.value().shape()[2];
    let mut y = conv2d(x, w, b.param(&format!("{name}.b")), stride, k / 2);
    if norm {
        y = instance_norm(y, b.param(&format!("{name}.gamma")), b.param(&format!("{name}.beta")), NORM_EPS);
    }
    if relu {
        y = y.relu();
    }
    y
}

/// `(3, H, W)` image to `(C_feat, H/stride, W/stride)` features.
pub fn backbone_forward<'t>(b: &Bound<'t, '_>, cfg: &ModelConfig, image: Var<'t>) -> Var<'t> {
    let mut x = image;
    for s in 0..cfg.backbone_widths.len() {
        x = conv_layer(b, &format!("backbone.{s}.down"), x, 2, true, true);
        x = conv_layer(b, &format!("backbone.{s}.mid"), x, 1, true, true);
    }
    x
}

/// Depth logits `(D, Hf, Wf)` and lift context `(C_lift, Hf, Wf)`.
pub fn depth_head_forward<'t>(b: &Bound<'t, '_>, feat: Var<'t>) -> (Var<'t>, Var<'t>) {
    let hidden = conv_layer(b, "depth.hidden", feat, 1, false, true);
    let logits = conv_layer(b, "depth.logits", hidden, 1, false, false);
    let context = conv_layer(b, "depth.context", feat, 1, false, false);
    (logits, context)
}

/// Precomputed splat targets for each camera of a rig.
pub struct RigGeometry {
    pub splat: Vec<Rc<SplatIndex>>,
}

impl RigGeometry {
    pub fn new(cfg: &ModelConfig, cameras: &[CameraModel]) -> Result<Self> {
        let splat = cameras
            .iter()
            .map(|c| {
                let f = build_frustum(c, &cfg.grid, cfg.feature_stride)?;
                Ok(Rc::new(SplatIndex::new(&f, c, &cfg.grid)))
            })
            .collect::<Result<_>>()?;
        Ok(RigGeometry { splat })
    }
}

fn check_input(cfg: &ModelConfig, input: &FrameInput) -> Result<()> {
    if input.images.len() != input.cameras.len() || input.images.is_empty() {
        return Err(Error::Shape(format!("{} images for {} cameras", input.images.len(), input.cameras.len())));
    }
    let (w, h) = cfg.image_size;
    for im in &input.images {
        if im.shape() != [3, h, w] {
            return Err(Error::Shape(format!("image shape {:?}, expected [3, {h}, {w}]", im.shape())));
        }
    }
    Ok(())
}

/// Lift-splat of every camera, summed into one `(C_lift, H_bev, W_bev)` raster.
pub fn lift<'t>(
    b: &Bound<'t, '_>,
    cfg: &ModelConfig,
    input: &FrameInput,
    geom: &RigGeometry,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    check_input(cfg, input)?;
    let tape = b.tape();
    let mut pooled = Vec::with_capacity(input.images.len());
    let mut depth_logits = Vec::with_capacity(input.images.len());
    for (im, splat) in input.images.iter().zip(&geom.splat) {
        let feat = backbone_forward(b, cfg, tape.constant(im.clone()));
        let (logits, context) = depth_head_forward(b, feat);
        let probs = logits.softmax_channels();
        pooled.push(bevgeom::lift_and_splat_var(context, probs, splat.clone())?);
        depth_logits.push(logits);
    }
    Ok((add_all(&pooled), depth_logits))
}

/// Detached pooled BEV of one frame, used as temporal history.
pub fn pooled_bev(store: &ParamStore, cfg: &ModelConfig, input: &FrameInput) -> Result<Tensor> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, store);
    let geom = RigGeometry::new(cfg, &input.cameras)?;
    let (pooled, _) = lift(&b, cfg, input, &geom)?;
    let v = (*pooled.value()).clone();
    Ok(v)
}

/// Warps and concatenates history, then runs the BEV encoder. Returns the
/// shared BEV map and per-camera depth logits.
pub fn extract_bev<'t>(
    b: &Bound<'t, '_>,
    cfg: &ModelConfig,
    input: &FrameInput,
    history: &[HistoryEntry],
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    if history.len() > cfg.t_hist {
        return Err(Error::Contract(format!("{} history frames, at most {}", history.len(), cfg.t_hist)));
    }
    let geom = RigGeometry::new(cfg, &input.cameras)?;
    let (pooled, depth_logits) = lift(b, cfg, input, &geom)?;
    let tape = b.tape();
    let aligned: Vec<Var<'t>> = history
        .iter()
        .map(|h| Ok(tape.constant(bevgeom::warp_bev(&h.pooled, &h.pose, &input.pose, &cfg.grid)?)))
        .collect::<Result<_>>()?;
    let mut x = bevgeom::temporal_concat_var(pooled, &aligned, cfg.t_hist)?;
    for i in 0..cfg.bev_widths.len() {
        x = conv_layer(b, &format!("bev.{i}"), x, 1, true, true);
    }
    Ok((x, depth_logits))
}

fn head_encoder<'t>(b: &Bound<'t, '_>, task: Task, shared: Var<'t>) -> Var<'t> {
    let mut x = shared;
    for i in 0..3 {
        x = conv_layer(b, &format!("{}.enc.{i}", task.name()), x, 1, true, true);
    }
    x
}

pub struct DetVars<'t> {
    pub heatmap: Var<'t>,
    pub reg: Var<'t>,
}

pub struct LaneVars<'t> {
    pub conf: Var<'t>,
    pub offset: Var<'t>,
    pub embed: Var<'t>,
    pub cls: Var<'t>,
}

pub fn head_forward_det<'t>(b: &Bound<'t, '_>, shared: Var<'t>) -> DetVars<'t> {
    let x = head_encoder(b, Task::Det, shared);
    DetVars {
        heatmap: conv_layer(b, "det.heatmap", x, 1, false, false),
        reg: conv_layer(b, "det.reg", x, 1, false, false),
    }
}

pub fn head_forward_map<'t>(b: &Bound<'t, '_>, shared: Var<'t>) -> Var<'t> {
    let x = head_encoder(b, Task::Map, shared);
    conv_layer(b, "map.logits", x, 1, false, false)
}

pub fn head_forward_lane<'t>(b: &Bound<'t, '_>, shared: Var<'t>) -> LaneVars<'t> {
    let x = head_encoder(b, Task::Lane, shared);
    LaneVars {
        conf: conv_layer(b, "lane.conf", x, 1, false, false),
        offset: conv_layer(b, "lane.offset", x, 1, false, false),
        embed: conv_layer(b, "lane.embed", x, 1, false, false),
        cls: conv_layer(b, "lane.cls", x, 1, false, false),
    }
}

/// Occupancy logits `(n_z * C_occ, H, W)` with channel `z * C_occ + c`.
pub fn head_forward_occ<'t>(b: &Bound<'t, '_>, shared: Var<'t>) -> Var<'t> {
    let x = head_encoder(b, Task::Occ, shared);
    let x = conv_layer(b, "occ.final", x, 1, false, true);
    let x = conv_layer(b, "occ.mlp0", x, 1, false, true);
    conv_layer(b, "occ.mlp1", x, 1, false, false)
}

/// Differentiable outputs of the requested heads on one shared map.
pub struct HeadVars<'t> {
    pub shared: Var<'t>,
    pub depth: Vec<Var<'t>>,
    pub det: Option<DetVars<'t>>,
    pub map: Option<Var<'t>>,
    pub lane: Option<LaneVars<'t>>,
    pub occ: Option<Var<'t>>,
}

pub fn forward_vars<'t>(
    b: &Bound<'t, '_>,
    cfg: &ModelConfig,
    input: &FrameInput,
    history: &[HistoryEntry],
    tasks: &[Task],
) -> Result<HeadVars<'t>> {
    let (shared, depth) = extract_bev(b, cfg, input, history)?;
    let has = |t| tasks.contains(&t);
    Ok(HeadVars {
        shared,
        depth,
        det: has(Task::Det).then(|| head_forward_det(b, shared)),
        map: has(Task::Map).then(|| head_forward_map(b, shared)),
        lane: has(Task::Lane).then(|| head_forward_lane(b, shared)),
        occ: has(Task::Occ).then(|| head_forward_occ(b, shared)),
    })
}

/// Raw prediction rasters of all four heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeadOutputs {
    pub shared: Tensor,
    pub det_heatmap: Tensor,
    pub det_reg: Tensor,
    pub map_logits: Tensor,
    pub lane_conf: Tensor,
    pub lane_offset: Tensor,
    pub lane_embed: Tensor,
    pub lane_cls: Tensor,
    pub occ_logits: Tensor,
    /// Per camera `(D, Hf, Wf)`.
    pub depth_logits: Vec<Tensor>,
}

impl TaskHeadOutputs {
    pub fn occ_voxels(&self, n_z: usize, c_occ: usize) -> Tensor {
        occ_to_voxels(&self.occ_logits, n_z, c_occ)
    }
}

fn val(v: Var<'_>) -> Tensor {
    (*v.value()).clone()
}

impl HeadVars<'_> {
    /// Detached values; panics if any head was not evaluated.
    pub fn values(&self) -> TaskHeadOutputs {
        let det = self.det.as_ref().expect("det head evaluated");
        let lane = self.lane.as_ref().expect("lane head evaluated");
        TaskHeadOutputs {
            shared: val(self.shared),
            det_heatmap: val(det.heatmap),
            det_reg: val(det.reg),
            map_logits: val(self.map.expect("map head evaluated")),
            lane_conf: val(lane.conf),
            lane_offset: val(lane.offset),
            lane_embed: val(lane.embed),
            lane_cls: val(lane.cls),
            occ_logits: val(self.occ.expect("occ head evaluated")),
            depth_logits: self.depth.iter().map(|&d| val(d)).collect(),
        }
    }
}

/// Inference forward with all heads on one shared map.
pub fn forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &FrameInput,
    history: &[HistoryEntry],
) -> Result<TaskHeadOutputs> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, store);
    Ok(forward_vars(&b, cfg, input, history, &Task::ALL)?.values())
}

/// `(n_z * C, H, W)` channel-major logits to `(H, W, n_z, C)`.
pub fn occ_to_voxels(t: &Tensor, n_z: usize, c: usize) -> Tensor {
    let (ch, h, w) = t.dims3();
    assert_eq!(ch, n_z * c, "occupancy channels");
    let mut out = Tensor::zeros(&[h, w, n_z, c]);
    let src = t.data();
    let dst = out.data_mut();
    for z in 0..n_z {
        for k in 0..c {
            let plane = &src[(z * c + k) * h * w..(z * c + k + 1) * h * w];
            for (p, &v) in plane.iter().enumerate() {
                dst[(p * n_z + z) * c + k] = v;
            }
        }
    }
    out
}

/// Inverse of [`occ_to_voxels`].
pub fn voxels_to_occ(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, n_z, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n_z * c, h, w]);
    let src = t.data();
    let dst = out.data_mut();
    for p in 0..h * w {
        for z in 0..n_z {
            for k in 0..c {
                dst[(z * c + k) * h * w + p] = src[(p * n_z + z) * c + k];
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bevgeom::{BevGridSpec, Rigid3};
    use crate::gradcheck::{check_gradients, ScalarFn};
    use crate::nets::ModuleGroup;
    use crate::synthworld::dataset::RigSpec;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone_widths: vec![4, 6],
            c_lift: 3,
            depth_hidden: 5,
            bev_widths: vec![5, 4],
            head_width: 4,
            occ_hidden: 5,
            n_cameras: 2,
            image_size: (16, 8),
            grid: BevGridSpec {
                x_range: (-4.0, 4.0),
                y_range: (-4.0, 4.0),
                cell_size: 1.0,
                z_range: (-1.0, 2.0),
                n_z: 2,
                depth_range: (1.0, 9.0),
                n_depth_bins: 4,
            },
            feature_stride: 4,
            t_hist: 1,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_input(cfg: &ModelConfig, seed: u64) -> FrameInput {
        let rig = RigSpec { n_cameras: cfg.n_cameras, focal: 8.0, image_size: cfg.image_size, mount_height: 1.0 };
        let (w, h) = cfg.image_size;
        let images = (0..cfg.n_cameras)
            .map(|c| {
                Tensor::from_fn(&[3, h, w], |i| {
                    (((i as u64 * 2654435761 + seed * 97 + c as u64 * 13) % 1000) as f64) / 1000.0
                })
            })
            .collect();
        FrameInput { images, cameras: rig.cameras(), pose: EgoPose::new(Rigid3::identity(), 0.0) }
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&cfg).unwrap();
        let input = FrameInput {
            images: vec![Tensor::zeros(&[3, 64, 128]); 4],
            cameras: RigSpec::default().cameras(),
            pose: EgoPose::new(Rigid3::identity(), 0.0),
        };
        let out = forward(&store, &cfg, &input, &[]).unwrap();
        assert_eq!(out.shared.shape(), [32, 64, 64]);
        assert_eq!(out.det_heatmap.shape(), [3, 64, 64]);
        assert_eq!(out.det_reg.shape(), [8, 64, 64]);
        assert_eq!(out.map_logits.shape(), [3, 64, 64]);
        assert_eq!(out.lane_conf.shape(), [1, 64, 64]);
        assert_eq!(out.lane_offset.shape(), [1, 64, 64]);
        assert_eq!(out.lane_embed.shape(), [4, 64, 64]);
        assert_eq!(out.lane_cls.shape(), [2, 64, 64]);
        assert_eq!(out.occ_logits.shape(), [40, 64, 64]);
        assert_eq!(out.depth_logits.len(), 4);
        assert_eq!(out.depth_logits[0].shape(), [16, 8, 16]);
        assert!(out.det_heatmap.all_finite() && out.occ_logits.all_finite());
    }

    #[test]
    fn identical_cameras_share_weights() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg).unwrap();
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &store);
        let im = tiny_input(&cfg, 0).images[0].clone();
        let a = backbone_forward(&b, &cfg, tape.constant(im.clone()));
        let c = backbone_forward(&b, &cfg, tape.constant(im));
        assert_eq!(*a.value(), *c.value());
        assert_eq!(a.shape(), [6, 2, 4]);
        let (logits, _) = depth_head_forward(&b, a);
        let p = logits.softmax_channels();
        let pv = p.value();
        for i in 0..8 {
            let s: f64 = (0..4).map(|d| pv.data()[d * 8 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic_and_heads_are_independent() {
        let cfg = tiny_config();
        let mut store = ParamStore::init(&cfg).unwrap();
        let input = tiny_input(&cfg, 1);
        let hist = vec![HistoryEntry { pooled: pooled_bev(&store, &cfg, &tiny_input(&cfg, 2)).unwrap(), pose: input.pose.clone() }];
        let a = forward(&store, &cfg, &input, &hist).unwrap();
        let b = forward(&store, &cfg, &input, &hist).unwrap();
        assert_eq!(a, b);
        store.zero_group(ModuleGroup::HeadMap);
        let c = forward(&store, &cfg, &input, &hist).unwrap();
        assert_eq!(a.det_heatmap, c.det_heatmap);
        assert_eq!(a.det_reg, c.det_reg);
        assert_eq!(a.lane_embed, c.lane_embed);
        assert_eq!(a.occ_logits, c.occ_logits);
        assert_eq!(a.shared, c.shared);
        assert_ne!(a.map_logits, c.map_logits);
    }

    #[test]
    fn missing_history_is_zero_and_too_much_is_rejected() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg).unwrap();
        let input = tiny_input(&cfg, 3);
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &store);
        let geom = RigGeometry::new(&cfg, &input.cameras).unwrap();
        let (pooled, _) = lift(&b, &cfg, &input, &geom).unwrap();
        let cat = bevgeom::temporal_concat_var(pooled, &[], cfg.t_hist).unwrap();
        assert!(cat.value().data()[pooled.value().numel()..].iter().all(|&v| v == 0.0));
        let h = HistoryEntry { pooled: (*pooled.value()).clone(), pose: input.pose.clone() };
        assert!(extract_bev(&b, &cfg, &input, &[h.clone(), h]).is_err());
    }

    #[test]
    fn occ_reshape_round_trip_is_exact() {
        let t = Tensor::from_fn(&[6, 3, 4], |i| (i as f64).sin());
        let v = occ_to_voxels(&t, 2, 3);
        assert_eq!(v.shape(), [3, 4, 2, 3]);
        assert_eq!(v.data()[((1 * 4 + 2) * 2 + 1) * 3 + 2], t.data()[(1 * 3 + 2) * 12 + 1 * 4 + 2]);
        assert_eq!(voxels_to_occ(&v), t);
    }

    #[test]
    fn end_to_end_gradient_to_image() {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg).unwrap();
        let input = tiny_input(&cfg, 4);
        let probe = Tensor::from_fn(&[cfg.occ_channels(), 8, 8], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        let f: &ScalarFn = &|tape, xs| {
            let b = Bound::frozen(tape, &store);
            let geom = RigGeometry::new(&cfg, &input.cameras).unwrap();
            let mut inp = input.clone();
            inp.images[0] = (*xs[0].value()).clone();
            // rebuild the lift with the image as a differentiable input
            let feat0 = backbone_forward(&b, &cfg, xs[0]);
            let (l0, c0) = depth_head_forward(&b, feat0);
            let p0 = bevgeom::lift_and_splat_var(c0, l0.softmax_channels(), geom.splat[0].clone()).unwrap();
            let feat1 = backbone_forward(&b, &cfg, tape.constant(inp.images[1].clone()));
            let (l1, c1) = depth_head_forward(&b, feat1);
            let p1 = bevgeom::lift_and_splat_var(c1, l1.softmax_channels(), geom.splat[1].clone()).unwrap();
            let mut x = bevgeom::temporal_concat_var(add_all(&[p0, p1]), &[], cfg.t_hist).unwrap();
            for i in 0..cfg.bev_widths.len() {
                x = conv_layer(&b, &format!("bev.{i}"), x, 1, true, true);
            }
            let occ = head_forward_occ(&b, x);
            occ.mul(tape.constant(probe.clone())).sum()
        };
        let coords: Vec<(usize, usize)> = (0..5).map(|j| (0, (j * 83 + 5) % 384)).collect();
        let r = check_gradients(&[input.images[0].clone()], f, &coords, 1e-4);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        let cfg = ModelConfig { backbone_widths: vec![3, 4], feature_stride: 4, image_size: (8, 4), ..tiny_config() };
        let store = ParamStore::init(&cfg).unwrap();
        let img = Tensor::from_fn(&[3, 4, 8], |i| ((i * 37) % 17) as f64 / 17.0);
        let w_idx = store.index_of("backbone.0.down.w").unwrap();
        let w0 = store.params[w_idx].value.clone();
        let f: &ScalarFn = &|tape, xs| {
            let mut s = store.clone();
            s.params[w_idx].value = (*xs[1].value()).clone();
            let b = Bound::frozen(tape, &s);
            // substitute the differentiable weight for the stored one
            let y = conv2d(xs[0], xs[1], b.param("backbone.0.down.b"), 2, 1);
            let y = instance_norm(y, b.param("backbone.0.down.gamma"), b.param("backbone.0.down.beta"), NORM_EPS).relu();
            let y = conv_layer(&b, "backbone.0.mid", y, 1, true, true);
            let y = conv_layer(&b, "backbone.1.down", y, 2, true, true);
            let y = conv_layer(&b, "backbone.1.mid", y, 1, true, true);
            let probe = tape.constant(Tensor::from_fn(&y.shape(), |i| (i as f64 * 0.37).cos()));
            y.mul(probe).sum()
        };
        let coords: Vec<(usize, usize)> =
            (0..6).map(|j| (0, (j * 13) % 96)).chain((0..6).map(|j| (1, (j * 11) % 81))).collect();
        let r = check_gradients(&[img, w0], f, &coords, 1e-4);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn history_plan_follows_sequences() {
        let keys = [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1)];
        let plan = history_plan(&keys, 2);
        assert_eq!(plan, vec![vec![], vec![0], vec![], vec![1, 0], vec![2]]);
        assert_eq!(history_plan(&keys, 0), vec![Vec::<usize>::new(); 5]);
    }
}
