//! Trainable network: shared camera-to-BEV extractor and four task heads.
//!
//! Parameters live in a [`ParamStore`] keyed by layer name. A forward pass
//! binds the store to a [`Tape`] through [`Bound`], which creates each
//! parameter variable lazily on first use. Frozen groups bind as constants,
//! so no gradient flows into them and backward sweeps stop early.

pub mod checkpoint;
pub mod flops;
pub mod model;
pub mod optim;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::bevgeom::BevGridSpec;
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::synthworld::dataset::{read_grid, write_grid, DatasetSpec};
use crate::synthworld::world::{N_DET_CLASSES, N_LANE_CLASSES, N_MAP_CLASSES, N_OCC_CLASSES};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, StageId};
pub use flops::{flops_count, FlopsMode};
pub use model::{extract_bev, forward, pooled_bev, FrameInput, HeadVars, TaskHeadOutputs};
pub use optim::{AdamState, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleGroup {
    Backbone,
    DepthEstimator,
    ViewProjector,
    TemporalFusor,
    BevEncoder,
    HeadDet,
    HeadMap,
    HeadLane,
    HeadOcc,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 9] = [
        ModuleGroup::Backbone,
        ModuleGroup::DepthEstimator,
        ModuleGroup::ViewProjector,
        ModuleGroup::TemporalFusor,
        ModuleGroup::BevEncoder,
        ModuleGroup::HeadDet,
        ModuleGroup::HeadMap,
        ModuleGroup::HeadLane,
        ModuleGroup::HeadOcc,
    ];

    pub const HEADS: [ModuleGroup; 4] =
        [ModuleGroup::HeadDet, ModuleGroup::HeadMap, ModuleGroup::HeadLane, ModuleGroup::HeadOcc];

    pub fn name(self) -> &'static str {
        match self {
            ModuleGroup::Backbone => "backbone",
            ModuleGroup::DepthEstimator => "depth_estimator",
            ModuleGroup::ViewProjector => "view_projector",
            ModuleGroup::TemporalFusor => "temporal_fusor",
            ModuleGroup::BevEncoder => "bev_encoder",
            ModuleGroup::HeadDet => "head_det",
            ModuleGroup::HeadMap => "head_map",
            ModuleGroup::HeadLane => "head_lane",
            ModuleGroup::HeadOcc => "head_occ",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown module group {s:?}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_head(self) -> bool {
        Self::HEADS.contains(&self)
    }
}

impl fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the four prediction tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Det,
    Map,
    Lane,
    Occ,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Det, Task::Map, Task::Lane, Task::Occ];

    pub fn head(self) -> ModuleGroup {
        match self {
            Task::Det => ModuleGroup::HeadDet,
            Task::Map => ModuleGroup::HeadMap,
            Task::Lane => ModuleGroup::HeadLane,
            Task::Occ => ModuleGroup::HeadOcc,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Map => "map",
            Task::Lane => "lane",
            Task::Occ => "occ",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone_widths: Vec<usize>,
    /// Channels lifted into the BEV per camera.
    pub c_lift: usize,
    pub depth_hidden: usize,
    pub bev_widths: Vec<usize>,
    pub head_width: usize,
    pub occ_hidden: usize,
    pub n_cameras: usize,
    /// `(width, height)` of the input images.
    pub image_size: (usize, usize),
    pub grid: BevGridSpec,
    pub feature_stride: usize,
    pub t_hist: usize,
    pub c_det: usize,
    pub c_map: usize,
    pub c_lane_cls: usize,
    /// Occupancy categories including free.
    pub c_occ: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_widths: vec![16, 32, 64],
            c_lift: 16,
            depth_hidden: 64,
            bev_widths: vec![32, 32],
            head_width: 24,
            occ_hidden: 32,
            n_cameras: 4,
            image_size: (128, 64),
            grid: BevGridSpec::default(),
            feature_stride: 8,
            t_hist: 3,
            c_det: N_DET_CLASSES,
            c_map: N_MAP_CLASSES,
            c_lane_cls: N_LANE_CLASSES,
            c_occ: N_OCC_CLASSES,
            embed_dim: 4,
            seed: 0,
        }
    }
}

/// Convolution layer description shared by parameter creation and the
/// analytic cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub group: ModuleGroup,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub norm: bool,
    /// Output raster `(H, W)`.
    pub out_hw: (usize, usize),
    /// Applications per frame (per camera layers run once per camera).
    pub repeats: usize,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in scaled uniform suited to a following ReLU.
    Relu,
    /// Small uniform weights with a constant bias.
    Output { scale: f64, bias: f64 },
}

impl ModelConfig {
    pub fn for_dataset(spec: &DatasetSpec) -> Self {
        ModelConfig {
            n_cameras: spec.rig.n_cameras,
            image_size: spec.rig.image_size,
            grid: spec.grid.clone(),
            feature_stride: spec.feature_stride,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let widths = self.backbone_widths.iter().chain(&self.bev_widths);
        if widths.clone().any(|&w| w == 0)
            || self.backbone_widths.is_empty()
            || self.bev_widths.is_empty()
            || [self.c_lift, self.depth_hidden, self.head_width, self.occ_hidden, self.n_cameras].contains(&0)
            || [self.c_det, self.c_map, self.c_lane_cls, self.c_occ].contains(&0)
        {
            return Err(Error::Config("all widths and counts must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.feature_stride != 1 << self.backbone_widths.len() {
            return Err(Error::Config(format!(
                "feature stride {} does not match {} stride-2 backbone stages",
                self.feature_stride,
                self.backbone_widths.len()
            )));
        }
        let (w, h) = self.image_size;
        if w % self.feature_stride != 0 || h % self.feature_stride != 0 {
            return Err(Error::Config(format!("image {w}x{h} not divisible by stride {}", self.feature_stride)));
        }
        Ok(())
    }

    /// `key = value` text, the format of config files and checkpoint headers.
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.list("model.backbone_widths", &self.backbone_widths)
            .put("model.c_lift", self.c_lift)
            .put("model.depth_hidden", self.depth_hidden)
            .list("model.bev_widths", &self.bev_widths)
            .put("model.head_width", self.head_width)
            .put("model.occ_hidden", self.occ_hidden)
            .put("model.n_cameras", self.n_cameras)
            .list("model.image_size", &[self.image_size.0, self.image_size.1])
            .put("model.feature_stride", self.feature_stride)
            .put("model.t_hist", self.t_hist)
            .list("model.head_channels", &[self.c_det, self.c_map, self.c_lane_cls, self.c_occ, self.embed_dim])
            .put("model.seed", self.seed);
        write_grid(w, &self.grid);
    }

    /// Reads keys written by [`ModelConfig::write_kv`]; absent keys keep
    /// their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let list_or = |key: &str, def: Vec<usize>| if kv.has(key) { kv.list(key) } else { Ok(def) };
        let heads = list_or("model.head_channels", vec![d.c_det, d.c_map, d.c_lane_cls, d.c_occ, d.embed_dim])?;
        if heads.len() != 5 {
            return Err(Error::Config("model.head_channels needs five values".into()));
        }
        let cfg = ModelConfig {
            backbone_widths: list_or("model.backbone_widths", d.backbone_widths)?,
            c_lift: kv.get_or("model.c_lift", d.c_lift)?,
            depth_hidden: kv.get_or("model.depth_hidden", d.depth_hidden)?,
            bev_widths: list_or("model.bev_widths", d.bev_widths)?,
            head_width: kv.get_or("model.head_width", d.head_width)?,
            occ_hidden: kv.get_or("model.occ_hidden", d.occ_hidden)?,
            n_cameras: kv.get_or("model.n_cameras", d.n_cameras)?,
            image_size: if kv.has("model.image_size") { kv.pair("model.image_size")? } else { d.image_size },
            grid: if kv.has("grid.x_range") { read_grid(kv)? } else { d.grid },
            feature_stride: kv.get_or("model.feature_stride", d.feature_stride)?,
            t_hist: kv.get_or("model.t_hist", d.t_hist)?,
            c_det: heads[0],
            c_map: heads[1],
            c_lane_cls: heads[2],
            c_occ: heads[3],
            embed_dim: heads[4],
            seed: kv.get_or("model.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn c_feat(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }

    pub fn c_bev(&self) -> usize {
        *self.bev_widths.last().expect("validated")
    }

    pub fn feat_hw(&self) -> (usize, usize) {
        (self.image_size.1 / self.feature_stride, self.image_size.0 / self.feature_stride)
    }

    pub fn bev_hw(&self) -> (usize, usize) {
        (self.grid.height(), self.grid.width())
    }

    pub fn occ_channels(&self) -> usize {
        self.grid.n_z * self.c_occ
    }

    /// Every convolution in the network, in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let relu = Init::Relu;
        let mut push = |name: String, group, c_in, c_out, k, stride, norm, out_hw, repeats, init| {
            out.push(LayerSpec { name, group, c_in, c_out, k, stride, norm, out_hw, repeats, init })
        };
        let (w, h) = self.image_size;
        let (mut hh, mut ww) = (h, w);
        let mut c_prev = 3;
        for (s, &c) in self.backbone_widths.iter().enumerate() {
            hh /= 2;
            ww /= 2;
            let g = ModuleGroup::Backbone;
            push(format!("backbone.{s}.down"), g, c_prev, c, 3, 2, true, (hh, ww), self.n_cameras, relu);
            push(format!("backbone.{s}.mid"), g, c, c, 3, 1, true, (hh, ww), self.n_cameras, relu);
            c_prev = c;
        }
        let feat = self.feat_hw();
        let cf = self.c_feat();
        let d = self.grid.n_depth_bins;
        let g = ModuleGroup::DepthEstimator;
        push("depth.hidden".into(), g, cf, self.depth_hidden, 1, 1, false, feat, self.n_cameras, relu);
        let out0 = Init::Output { scale: 0.1, bias: 0.0 };
        push("depth.logits".into(), g, self.depth_hidden, d, 3, 1, false, feat, self.n_cameras, out0);
        push("depth.context".into(), g, cf, self.c_lift, 1, 1, false, feat, self.n_cameras, relu);
        let bev = self.bev_hw();
        let mut c_prev = self.c_lift * (1 + self.t_hist);
        for (i, &c) in self.bev_widths.iter().enumerate() {
            push(format!("bev.{i}"), ModuleGroup::BevEncoder, c_prev, c, 3, 1, true, bev, 1, relu);
            c_prev = c;
        }
        let hw = self.head_width;
        for task in Task::ALL {
            let g = task.head();
            let mut c_prev = self.c_bev();
            for i in 0..3 {
                push(format!("{}.enc.{i}", task.name()), g, c_prev, hw, 3, 1, true, bev, 1, relu);
                c_prev = hw;
            }
            let mut out = |name: &str, c_in: usize, c_out: usize, k: usize, init: Init| {
                push(format!("{}.{name}", task.name()), g, c_in, c_out, k, 1, false, bev, 1, init)
            };
            match task {
                Task::Det => {
                    out("heatmap", hw, self.c_det, 1, Init::Output { scale: 0.1, bias: -2.19 });
                    out("reg", hw, 8, 1, out0);
                }
                Task::Map => out("logits", hw, self.c_map, 1, out0),
                Task::Lane => {
                    out("conf", hw, 1, 1, Init::Output { scale: 0.1, bias: -2.19 });
                    out("offset", hw, 1, 1, out0);
                    out("embed", hw, self.embed_dim, 1, Init::Output { scale: 1.0, bias: 0.0 });
                    out("cls", hw, self.c_lane_cls, 1, out0);
                }
                Task::Occ => {
                    out("final", hw, hw, 3, relu);
                    out("mlp0", hw, self.occ_hidden, 1, relu);
                    out("mlp1", self.occ_hidden, self.occ_channels(), 1, out0);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ModuleGroup,
    pub value: Tensor,
}

/// All trainable arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_params(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ParamStore { params, index }
    }

    /// Seeded initialization from the layer list.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for l in config.layers() {
            let fan_in = (l.c_in * l.k * l.k) as f64;
            let (bound, bias) = match l.init {
                Init::Relu => ((6.0 / fan_in).sqrt(), 0.0),
                Init::Output { scale, bias } => (scale * (3.0 / fan_in).sqrt(), bias),
            };
            let wshape = [l.c_out, l.c_in, l.k, l.k];
            let w = Tensor::from_fn(&wshape, |_| rng.random_range(-bound..bound));
            params.push(Param { name: format!("{}.w", l.name), group: l.group, value: w });
            params.push(Param { name: format!("{}.b", l.name), group: l.group, value: Tensor::full(&[l.c_out], bias) });
            if l.norm {
                params.push(Param { name: format!("{}.gamma", l.name), group: l.group, value: Tensor::full(&[l.c_out], 1.0) });
                params.push(Param { name: format!("{}.beta", l.name), group: l.group, value: Tensor::zeros(&[l.c_out]) });
            }
        }
        Ok(Self::from_params(params))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn group_numel(&self, group: ModuleGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Order-sensitive digest of a group's exact bit patterns.
    pub fn group_checksum(&self, group: ModuleGroup) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn zero_group(&mut self, group: ModuleGroup) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// A parameter store attached to a tape.
pub struct Bound<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: [bool; 9],
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Bound<'t, 's> {
    /// Binds with the given groups trainable; the rest become constants.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: &[ModuleGroup]) -> Self {
        let mut mask = [false; 9];
        for g in trainable {
            mask[g.index()] = true;
        }
        Bound { tape, store, trainable: mask, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn all_trainable(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, &ModuleGroup::ALL)
    }

    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, &[])
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Var<'t> {
        let i = self.store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.vars.borrow()[i] {
            return v;
        }
        let p = &self.store.params[i];
        let v = if self.trainable[p.group.index()] {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.vars.borrow_mut()[i] = Some(v);
        v
    }

    /// Variable of parameter `i` if it was used and is trainable.
    pub fn trainable_var(&self, i: usize) -> Option<Var<'t>> {
        let p = &self.store.params[i];
        if !self.trainable[p.group.index()] {
            return None;
        }
        self.vars.borrow()[i]
    }
}
