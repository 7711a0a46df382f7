//! Three-stage training: map-only pretraining, rotating head warm-up with a
//! frozen extractor, and end-to-end training with GradNorm.

mod config;

pub use config::{ScheduleConfig, StageConfig, ABLATIONS};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::ops::add_all;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_outputs, EvalReport};
use crate::kv::{KvMap, KvWriter};
use crate::losses::{
    combine, component_grad_norms, depth_loss, detection_loss, gradnorm_update, lane_loss, map_loss, occ_loss,
    GradNormState, LossReport, N_COMPONENTS,
};
use crate::nets::checkpoint::RngState;
use crate::nets::model::{
    extract_bev, head_forward_det, head_forward_lane, head_forward_map, head_forward_occ, history_plan, HeadVars,
    HistoryEntry,
};
use crate::nets::optim::clip_global_norm;
use crate::nets::{
    load_checkpoint, pooled_bev, save_checkpoint, AdamState, AdamW, Bound, CheckpointBundle, FrameInput, ModelConfig,
    ModuleGroup, ParamStore, StageId, Task,
};
use crate::synthworld::dataset::{sha256_hex, Frame};
use crate::tensor::Tensor;

pub const LOSS_LOG_NAME: &str = "loss_log.csv";
pub const SCHEDULE_MANIFEST_NAME: &str = "schedule_manifest";

/// Checkpoint file name of the stage at 0-based position `pos`.
pub fn checkpoint_name(pos: usize, stage: StageId) -> String {
    format!("stage{}_{}.qbck", pos + 1, stage.name())
}

/// Mutable progress of a running stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub slot: Option<Task>,
    pub best_score: f64,
    pub rng: ChaCha8Rng,
    pub gradnorm: Option<GradNormState>,
}

/// What an observer sees after every optimizer step.
pub struct StepInfo<'a> {
    pub stage: StageId,
    pub epoch: usize,
    pub slot: Option<Task>,
    /// Learning rate per [`ModuleGroup::index`].
    pub lrs: [f64; 9],
    pub report: &'a LossReport,
    pub params: &'a ParamStore,
}

pub type Observer<'o> = dyn FnMut(&StepInfo<'_>) + 'o;

/// Frames with a training and a validation index set.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub frames: &'a [Frame],
    pub train: &'a [usize],
    pub val: &'a [usize],
}

impl<'a> TrainData<'a> {
    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.train.iter().chain(self.val).any(|&i| i >= self.frames.len()) {
            return Err(Error::Contract("split index out of range".into()));
        }
        Ok(())
    }

    /// Validation indices, falling back to the training set when empty.
    fn val_or_train(&self) -> &'a [usize] {
        if self.val.is_empty() {
            self.train
        } else {
            self.val
        }
    }
}

/// Result of one stage: the retained best weights and the step range run.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub best: CheckpointBundle,
    pub best_epoch: usize,
    pub first_step: u64,
    pub last_step: u64,
    /// Validation score after every epoch.
    pub scores: Vec<f64>,
}

/// Per-frame inputs plus cached detached tensors.
struct FrameCache {
    inputs: Vec<FrameInput>,
    plan: Vec<Vec<usize>>,
    pooled: Vec<Option<Tensor>>,
    /// Shared BEV map and depth logits when the whole extractor is frozen.
    extracted: Vec<Option<(Tensor, Vec<Tensor>)>>,
}

impl FrameCache {
    fn new(cfg: &ModelConfig, frames: &[Frame]) -> Self {
        let keys: Vec<(u32, u32)> = frames.iter().map(|f| (f.sample.sequence_id, f.sample.frame_index)).collect();
        FrameCache {
            inputs: frames.iter().map(|f| FrameInput::from_sample(&f.sample)).collect(),
            plan: history_plan(&keys, cfg.t_hist),
            pooled: vec![None; frames.len()],
            extracted: vec![None; frames.len()],
        }
    }

    /// Recomputes pooled history maps for the frames that feed `targets`.
    fn refresh_pooled(&mut self, store: &ParamStore, cfg: &ModelConfig, targets: &[usize]) -> Result<()> {
        let mut need = vec![false; self.inputs.len()];
        for &i in targets {
            for &j in &self.plan[i] {
                need[j] = true;
            }
        }
        for (j, n) in need.into_iter().enumerate() {
            self.pooled[j] = if n { Some(pooled_bev(store, cfg, &self.inputs[j])?) } else { None };
        }
        Ok(())
    }

    fn history(&self, i: usize) -> Vec<HistoryEntry> {
        self.plan[i]
            .iter()
            .map(|&j| HistoryEntry {
                pooled: self.pooled[j].clone().expect("history refreshed"),
                pose: self.inputs[j].pose.clone(),
            })
            .collect()
    }

    fn fill_extracted(&mut self, store: &ParamStore, cfg: &ModelConfig, targets: &[usize]) -> Result<()> {
        self.refresh_pooled(store, cfg, targets)?;
        for &i in targets {
            if self.extracted[i].is_none() {
                let tape = Tape::new();
                let b = Bound::frozen(&tape, store);
                let (shared, depth) = extract_bev(&b, cfg, &self.inputs[i], &self.history(i))?;
                self.extracted[i] = Some(((*shared.value()).clone(), depth.iter().map(|d| (*d.value()).clone()).collect()));
            }
        }
        Ok(())
    }

    /// Forward of frame `i` with the requested heads.
    fn forward<'t>(&self, b: &Bound<'t, '_>, cfg: &ModelConfig, i: usize, tasks: &[Task]) -> Result<HeadVars<'t>> {
        let (shared, depth) = match &self.extracted[i] {
            Some((s, d)) => (b.tape().constant(s.clone()), d.iter().map(|t| b.tape().constant(t.clone())).collect()),
            None => extract_bev(b, cfg, &self.inputs[i], &self.history(i))?,
        };
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
}

fn extractor_frozen(cfg: &StageConfig) -> bool {
    [ModuleGroup::Backbone, ModuleGroup::DepthEstimator, ModuleGroup::BevEncoder].iter().all(|g| cfg.frozen.contains(g))
}

fn lift_frozen(cfg: &StageConfig) -> bool {
    [ModuleGroup::Backbone, ModuleGroup::DepthEstimator].iter().all(|g| cfg.frozen.contains(g))
}

/// Unweighted loss components `(det, map, lane, occ, depth)` of one frame.
fn frame_losses<'t>(
    hv: &HeadVars<'t>,
    frame: &Frame,
    model: &ModelConfig,
    cfg: &StageConfig,
) -> Result<[Option<Var<'t>>; N_COMPONENTS]> {
    let gt = &frame.gt;
    let lw = &cfg.loss_weights;
    let det = hv.det.as_ref().map(|d| detection_loss(d, gt, lw.det_lambdas)).transpose()?.map(|l| l.total);
    let map = hv.map.map(|m| map_loss(m, &gt.map_masks)).transpose()?;
    let lane = hv.lane.as_ref().map(|l| lane_loss(l, gt, lw.lane_lambdas)).transpose()?.map(|l| l.total);
    let occ = hv.occ.map(|o| occ_loss(o, gt, model.c_occ)).transpose()?;
    let (depth, valid) = depth_loss(&hv.depth, &gt.depth_bins)?;
    Ok([det, map, lane, occ, valid.then_some(depth)])
}

/// Component weights for the next step.
fn current_weights(cfg: &StageConfig, gn: Option<&GradNormState>) -> [f64; N_COMPONENTS] {
    let mut w = cfg.loss_weights.components;
    if let Some(gn) = gn {
        w[..gn.n_tasks()].copy_from_slice(&gn.weights);
    }
    w
}

/// Shared layer at which GradNorm measures gradient norms.
fn reference_param(model: &ModelConfig, include_depth: bool) -> String {
    if include_depth {
        format!("backbone.{}.mid.w", model.backbone_widths.len() - 1)
    } else {
        format!("bev.{}.w", model.bev_widths.len() - 1)
    }
}

/// Mean validation score over the stage's tasks.
fn validate(
    store: &ParamStore,
    model: &ModelConfig,
    cache: &FrameCache,
    frames: &[Frame],
    idx: &[usize],
    tasks: &[Task],
) -> Result<EvalReport> {
    let mut outputs = Vec::with_capacity(idx.len());
    for &i in idx {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, store);
        outputs.push(cache.forward(&b, model, i, &Task::ALL)?.values());
    }
    let sel: Vec<Frame> = idx.iter().map(|&i| frames[i].clone()).collect();
    evaluate_outputs(&outputs, &sel, &model.grid, model.c_occ, tasks)
}

/// Runs one stage from `init` weights. GradNorm state and the step counter
/// continue from `gradnorm` and `first_step`.
pub fn run_stage(
    cfg: &StageConfig,
    model: &ModelConfig,
    init: &ParamStore,
    data: TrainData<'_>,
    first_step: u64,
    log: &mut Vec<LossReport>,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    data.check()?;
    let frames = data.frames;
    let val_idx = data.val_or_train();
    let mut store = init.clone();
    let mut adam = AdamState::new(&store);
    let opt = AdamW::new(cfg.weight_decay);
    let mut state = TrainState {
        epoch: 0,
        step: first_step,
        slot: None,
        best_score: f64::NEG_INFINITY,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        gradnorm: cfg.gradnorm_enabled.then(|| GradNormState::new(if cfg.gradnorm_include_depth { 5 } else { 4 })),
    };
    let all_idx: Vec<usize> = data.train.iter().chain(val_idx).copied().collect();
    let mut cache = FrameCache::new(model, frames);
    if extractor_frozen(cfg) {
        cache.fill_extracted(&store, model, &all_idx)?;
    } else {
        cache.refresh_pooled(&store, model, &all_idx)?;
    }
    let reference = reference_param(model, cfg.gradnorm_include_depth);
    let mut best: Option<(CheckpointBundle, usize)> = None;
    let mut scores = Vec::new();
    let mut order: Vec<usize> = data.train.to_vec();

    for epoch in 0..cfg.total_epochs() {
        state.epoch = epoch;
        state.slot = cfg.slot_for_epoch(epoch);
        let lrs = cfg.lr_table(state.slot);
        let trainable = cfg.trainable_groups(state.slot);
        order.shuffle(&mut state.rng);
        for batch in order.chunks(cfg.batch_size) {
            let weights = current_weights(cfg, state.gradnorm.as_ref());
            let (report, mut grads, norms) = {
                let tape = Tape::new();
                let b = Bound::new(&tape, &store, &trainable);
                let mut per: Vec<Vec<Var<'_>>> = vec![Vec::new(); N_COMPONENTS];
                for &i in batch {
                    let hv = cache.forward(&b, model, i, &cfg.tasks)?;
                    for (c, part) in frame_losses(&hv, &frames[i], model, cfg)?.into_iter().enumerate() {
                        per[c].extend(part);
                    }
                }
                let parts: [Option<Var<'_>>; N_COMPONENTS] = std::array::from_fn(|c| {
                    (!per[c].is_empty()).then(|| add_all(&per[c]).scale(1.0 / per[c].len() as f64))
                });
                let raw: [f64; N_COMPONENTS] = std::array::from_fn(|c| parts[c].map_or(0.0, |p| p.item()));
                let total = combine(&parts, &weights);
                let norms = match &state.gradnorm {
                    Some(gn) if (state.step - first_step) % cfg.gradnorm_interval as u64 == 0 => {
                        let r = b.param(&reference);
                        let mut gp = parts;
                        gp.iter_mut().skip(gn.n_tasks()).for_each(|p| *p = None);
                        Some(component_grad_norms(&gp, &weights, &[r]))
                    }
                    _ => None,
                };
                let g = tape.backward(total);
                let grads: Vec<Option<Tensor>> =
                    (0..store.len()).map(|i| b.trainable_var(i).and_then(|v| g.get(v).cloned())).collect();
                let mut report = LossReport::new(state.step, raw, weights);
                if !report.combined.is_finite() {
                    return Err(Error::Contract(format!("non-finite loss at step {}", state.step)));
                }
                if let Some(n) = norms {
                    report.grad_norms = n;
                }
                (report, grads, norms)
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut store, &mut adam, &grads, &lrs);
            let mut report = report;
            if let (Some(gn), Some(n)) = (state.gradnorm.as_mut(), norms) {
                let k = gn.n_tasks();
                gradnorm_update(gn, &report.raw[..k], &n[..k])?;
                report.warning = gn.fallback_warning;
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(&StepInfo { stage: cfg.stage, epoch, slot: state.slot, lrs, report: &report, params: &store });
            }
            log.push(report);
            state.step += 1;
        }
        if !lift_frozen(cfg) {
            cache.refresh_pooled(&store, model, &all_idx)?;
        }
        let score = validate(&store, model, &cache, frames, val_idx, &cfg.tasks)?.combined_score();
        scores.push(score);
        if score > state.best_score || best.is_none() {
            state.best_score = state.best_score.max(score);
            let bundle = CheckpointBundle {
                stage: cfg.stage,
                epoch: epoch as u64,
                step: state.step,
                best_score: score,
                config: model.clone(),
                params: store.clone(),
                adam: adam.clone(),
                gradnorm: state.gradnorm.clone(),
                rng: RngState::capture(&state.rng),
            };
            best = Some((bundle, epoch));
        }
    }
    let (best, best_epoch) = match best {
        // the counter continues from the end of the stage, not from the retained epoch
        Some((b, e)) => (CheckpointBundle { step: state.step, ..b }, e),
        None => {
            let bundle = CheckpointBundle {
                stage: cfg.stage,
                epoch: 0,
                step: state.step,
                best_score: f64::NEG_INFINITY,
                config: model.clone(),
                params: store,
                adam,
                gradnorm: state.gradnorm,
                rng: RngState::capture(&state.rng),
            };
            (bundle, 0)
        }
    };
    Ok(StageOutcome { best, best_epoch, first_step, last_step: state.step, scores })
}

fn expect_stage(cfg: &StageConfig, want: StageId) -> Result<()> {
    if cfg.stage != want {
        return Err(Error::Config(format!("expected a {want} stage config, got {}", cfg.stage)));
    }
    Ok(())
}

/// Map-only pretraining from freshly initialized weights.
pub fn stage1_pretrain(
    cfg: &StageConfig,
    model: &ModelConfig,
    data: TrainData<'_>,
    log: &mut Vec<LossReport>,
    observer: Option<&mut Observer<'_>>,
) -> Result<StageOutcome> {
    expect_stage(cfg, StageId::Pretrain)?;
    data.check()?;
    let init = ParamStore::init(model)?;
    run_stage(cfg, model, &init, data, 0, log, observer)
}

/// Head warm-up with the extractor frozen; needs the pretraining bundle.
pub fn stage2_warmup(
    cfg: &StageConfig,
    prev: Option<&CheckpointBundle>,
    data: TrainData<'_>,
    log: &mut Vec<LossReport>,
    observer: Option<&mut Observer<'_>>,
) -> Result<StageOutcome> {
    expect_stage(cfg, StageId::Warmup)?;
    let prev = prev.ok_or_else(|| Error::MissingCheckpoint("warm-up needs a pretraining checkpoint".into()))?;
    run_stage(cfg, &prev.config, &prev.params, data, prev.step, log, observer)
}

/// End-to-end training. Without a previous bundle it starts from scratch.
pub fn stage3_e2e(
    cfg: &StageConfig,
    model: &ModelConfig,
    prev: Option<&CheckpointBundle>,
    data: TrainData<'_>,
    log: &mut Vec<LossReport>,
    observer: Option<&mut Observer<'_>>,
) -> Result<StageOutcome> {
    expect_stage(cfg, StageId::E2e)?;
    match prev {
        Some(p) => run_stage(cfg, &p.config, &p.params, data, p.step, log, observer),
        None => run_stage(cfg, model, &ParamStore::init(model)?, data, 0, log, observer),
    }
}

/// Options for [`run_schedule`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where checkpoints, the loss log and the manifest go.
    pub out_dir: Option<&'a Path>,
    /// 1-based stage positions to run; all when `None`.
    pub only_stages: Option<Vec<usize>>,
    /// Recorded in the manifest.
    pub dataset_hash: Option<String>,
    pub observer: Option<&'a mut Observer<'a>>,
}

/// One executed stage as recorded in the schedule manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub position: usize,
    pub stage: StageId,
    pub checkpoint: Option<PathBuf>,
    pub sha256: String,
    /// Hash of the checkpoint this stage started from, verified on load.
    pub loaded_sha256: Option<String>,
    pub first_step: u64,
    pub last_step: u64,
    pub best_epoch: usize,
    pub best_score: f64,
}

#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub final_bundle: CheckpointBundle,
    pub log: Vec<LossReport>,
    pub stages: Vec<StageRecord>,
}

/// Reads the checkpoint hashes recorded by an earlier run in `dir`.
fn recorded_hashes(dir: &Path) -> Vec<(String, String)> {
    let Ok(text) = fs::read_to_string(dir.join(SCHEDULE_MANIFEST_NAME)) else { return Vec::new() };
    let Ok(kv) = KvMap::parse(&text) else { return Vec::new() };
    let files = kv.list::<String>("artifacts.checkpoints").unwrap_or_default();
    let hashes = kv.list::<String>("artifacts.checkpoint_sha256").unwrap_or_default();
    files.into_iter().zip(hashes).collect()
}

/// Runs the stages of `sched` in order, handing each stage the best
/// weights of the previous one.
pub fn run_schedule(
    sched: &ScheduleConfig,
    model: &ModelConfig,
    data: TrainData<'_>,
    mut opts: RunOptions<'_>,
) -> Result<ScheduleOutcome> {
    sched.validate()?;
    model.validate()?;
    if let Some((w, h)) = sched.input_size {
        if model.image_size != (w, h) {
            return Err(Error::Config(format!(
                "preset {} expects {w}x{h} camera input, dataset has {}x{}",
                sched.preset, model.image_size.0, model.image_size.1
            )));
        }
    }
    data.check()?;
    let model = ModelConfig { seed: sched.seed, ..model.clone() };
    let selected: Vec<usize> = match &opts.only_stages {
        Some(s) => {
            if s.is_empty() || s.iter().any(|&p| p == 0 || p > sched.stages.len()) {
                return Err(Error::Config(format!("stage list {s:?} outside 1..={}", sched.stages.len())));
            }
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            s
        }
        None => (1..=sched.stages.len()).collect(),
    };
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let recorded = opts.out_dir.map(recorded_hashes).unwrap_or_default();

    let mut log = Vec::new();
    let mut records = Vec::new();
    let mut prev: Option<(CheckpointBundle, String)> = None;
    for (k, &pos) in selected.iter().enumerate() {
        let cfg = &sched.stages[pos - 1];
        let tag = format!("{} ({})", pos, cfg.stage);
        // a stage whose predecessor did not run in this invocation loads it from disk
        if pos > 1 && (k == 0 || selected[k - 1] != pos - 1) {
            let before = &sched.stages[pos - 2];
            let name = checkpoint_name(pos - 2, before.stage);
            let dir = opts
                .out_dir
                .ok_or_else(|| Error::MissingCheckpoint(format!("{name} (no run directory)")).in_stage(&tag))?;
            let expected = recorded.iter().find(|(f, _)| *f == name).map(|(_, h)| h.as_str());
            let path = dir.join(&name);
            let bundle = load_checkpoint(&path, expected).map_err(|e| e.in_stage(&tag))?;
            let sha = sha256_hex(&fs::read(&path)?);
            prev = Some((bundle, sha));
        } else if pos == 1 {
            prev = None;
        }
        let loaded_sha256 = prev.as_ref().map(|(_, s)| s.clone());
        let observer = opts.observer.as_deref_mut();
        let outcome = match cfg.stage {
            StageId::Pretrain => stage1_pretrain(cfg, &model, data, &mut log, observer),
            StageId::Warmup => stage2_warmup(cfg, prev.as_ref().map(|(b, _)| b), data, &mut log, observer),
            StageId::E2e => stage3_e2e(cfg, &model, prev.as_ref().map(|(b, _)| b), data, &mut log, observer),
        }
        .map_err(|e| e.in_stage(&tag))?;
        let name = checkpoint_name(pos - 1, cfg.stage);
        let (checkpoint, sha) = match opts.out_dir {
            Some(dir) => {
                let path = dir.join(&name);
                let sha = save_checkpoint(&outcome.best, &path).map_err(|e| e.in_stage(&tag))?;
                // reload through the hash check so the chain only carries verified bytes
                let bundle = load_checkpoint(&path, Some(&sha)).map_err(|e| e.in_stage(&tag))?;
                prev = Some((bundle, sha.clone()));
                (Some(path), sha)
            }
            None => {
                let sha = sha256_hex(&outcome.best.to_bytes());
                prev = Some((outcome.best.clone(), sha.clone()));
                (None, sha)
            }
        };
        records.push(StageRecord {
            position: pos,
            stage: cfg.stage,
            checkpoint,
            sha256: sha,
            loaded_sha256,
            first_step: outcome.first_step,
            last_step: outcome.last_step,
            best_epoch: outcome.best_epoch,
            best_score: outcome.best.best_score,
        });
    }
    let final_bundle = prev.expect("at least one stage ran").0;
    if let Some(dir) = opts.out_dir {
        write_loss_log(&dir.join(LOSS_LOG_NAME), &log)?;
        let manifest = render_schedule_manifest(sched, &model, &records, &recorded, opts.dataset_hash.as_deref());
        fs::write(dir.join(SCHEDULE_MANIFEST_NAME), manifest)?;
        fs::write(dir.join("schedule.cfg"), sched.to_kv())?;
    }
    Ok(ScheduleOutcome { final_bundle, log, stages: records })
}

fn render_schedule_manifest(
    sched: &ScheduleConfig,
    model: &ModelConfig,
    records: &[StageRecord],
    earlier: &[(String, String)],
    dataset_hash: Option<&str>,
) -> String {
    let mut w = KvWriter::new();
    w.comment("resolved training schedule");
    w.put("tool.version", env!("CARGO_PKG_VERSION"));
    if let Some(h) = dataset_hash {
        w.put("dataset.sha256", h);
    }
    sched.write_kv(&mut w);
    model.write_kv(&mut w);
    for r in records {
        let p = format!("run.stage{}", r.position);
        w.put(&format!("{p}.name"), r.stage.name())
            .put(&format!("{p}.sha256"), &r.sha256)
            .put(&format!("{p}.loaded_sha256"), r.loaded_sha256.as_deref().unwrap_or("none"))
            .list(&format!("{p}.steps"), &[r.first_step, r.last_step])
            .put(&format!("{p}.best_epoch"), r.best_epoch)
            .float(&format!("{p}.best_score"), r.best_score);
    }
    // checkpoints from earlier invocations stay listed unless rewritten now
    let mut ckpts: Vec<(String, String)> = records
        .iter()
        .filter_map(|r| Some((r.checkpoint.as_ref()?.file_name()?.to_string_lossy().into_owned(), r.sha256.clone())))
        .collect();
    for (f, h) in earlier {
        if !ckpts.iter().any(|(g, _)| g == f) {
            ckpts.push((f.clone(), h.clone()));
        }
    }
    ckpts.sort();
    let files: Vec<&str> = ckpts.iter().map(|(f, _)| f.as_str()).collect();
    let hashes: Vec<&str> = ckpts.iter().map(|(_, h)| h.as_str()).collect();
    w.list("artifacts.checkpoints", &files);
    w.list("artifacts.checkpoint_sha256", &hashes);
    w.list("artifacts.files", &[LOSS_LOG_NAME, SCHEDULE_MANIFEST_NAME, "schedule.cfg"]);
    w.finish()
}

pub fn write_loss_log(path: &Path, log: &[LossReport]) -> Result<()> {
    let mut text = LossReport::csv_header();
    text.push('\n');
    for r in log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(LossReport::parse_csv_row).collect()
}

/// Population variance of the combined loss over the final half of `log`.
pub fn final_half_variance(log: &[LossReport]) -> f64 {
    let tail = &log[log.len() / 2..];
    if tail.is_empty() {
        return 0.0;
    }
    let n = tail.len() as f64;
    let mean = tail.iter().map(|r| r.combined).sum::<f64>() / n;
    tail.iter().map(|r| (r.combined - mean).powi(2)).sum::<f64>() / n
}

/// Steps of `log` that belong to the last stage of a schedule outcome.
pub fn last_stage_log(outcome: &ScheduleOutcome) -> &[LossReport] {
    let first = outcome.stages.last().map_or(0, |r| r.first_step);
    let start = outcome.log.iter().position(|r| r.step >= first).unwrap_or(outcome.log.len());
    &outcome.log[start..]
}

/// Deterministic validation split: a sequence goes to validation when its
/// hash falls in the lowest fifth. Returns `(train, val)` frame indices.
pub fn split_by_sequence(frames: &[Frame]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let h = sha256_hex(format!("sequence-{}", f.sample.sequence_id).as_bytes());
        let bucket = u8::from_str_radix(&h[..2], 16).expect("hex") as u32 * 5 / 256;
        if bucket == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synthworld::dataset::{generate_dataset, DatasetSpec, RigSpec};
    use crate::bevgeom::BevGridSpec;
    use crate::synthworld::world::GenerationSpec;

    pub(crate) fn tiny_data() -> (ModelConfig, Vec<Frame>) {
        let spec = DatasetSpec {
            n_samples: 4,
            n_sequences: 2,
            grid: BevGridSpec {
                x_range: (-8.0, 8.0),
                y_range: (-8.0, 8.0),
                cell_size: 1.0,
                z_range: (-1.0, 3.0),
                n_z: 2,
                depth_range: (1.0, 13.0),
                n_depth_bins: 4,
            },
            rig: RigSpec { n_cameras: 2, focal: 12.0, image_size: (24, 12), mount_height: 1.6 },
            feature_stride: 4,
            generation: GenerationSpec { n_boxes: 2, n_lanes: 2, ..Default::default() },
            ..Default::default()
        };
        let frames = generate_dataset(&spec).unwrap();
        let cfg = ModelConfig {
            backbone_widths: vec![4, 6],
            c_lift: 3,
            depth_hidden: 5,
            bev_widths: vec![5, 4],
            head_width: 4,
            occ_hidden: 5,
            t_hist: 1,
            ..ModelConfig::for_dataset(&spec)
        };
        (cfg, frames)
    }

    pub(crate) fn tiny_schedule(seed: u64) -> ScheduleConfig {
        let mut s = ScheduleConfig::desk(seed);
        for st in &mut s.stages {
            st.epochs = 1;
        }
        s
    }

    fn all(frames: &[Frame]) -> Vec<usize> {
        (0..frames.len()).collect()
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let (cfg, frames) = tiny_data();
        let idx = all(&frames);
        let data = TrainData { frames: &frames, train: &idx, val: &[] };
        let a = run_schedule(&tiny_schedule(7), &cfg, data, RunOptions::default()).unwrap();
        let b = run_schedule(&tiny_schedule(7), &cfg, data, RunOptions::default()).unwrap();
        assert_eq!(a.final_bundle.to_bytes(), b.final_bundle.to_bytes());
        assert_eq!(a.log, b.log);
        let c = run_schedule(&tiny_schedule(8), &cfg, data, RunOptions::default()).unwrap();
        assert_ne!(a.final_bundle.to_bytes(), c.final_bundle.to_bytes());
        let steps: Vec<u64> = a.log.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn stage_contracts_hold_at_every_step() {
        let (cfg, frames) = tiny_data();
        let idx = all(&frames);
        let data = TrainData { frames: &frames, train: &idx, val: &[] };
        let sched = tiny_schedule(3);
        let init = ParamStore::init(&ModelConfig { seed: 3, ..cfg.clone() }).unwrap();
        let mut seen = Vec::new();
        let mut obs = |s: &StepInfo<'_>| {
            let sums: Vec<String> = ModuleGroup::ALL.iter().map(|&g| s.params.group_checksum(g)).collect();
            seen.push((s.stage, s.slot, s.lrs, sums, s.report.weights));
        };
        let opts = RunOptions { observer: Some(&mut obs), ..Default::default() };
        run_schedule(&sched, &cfg, data, opts).unwrap();
        let before: Vec<String> = ModuleGroup::ALL.iter().map(|&g| init.group_checksum(g)).collect();
        let mut stage1_sums = None;
        for (stage, slot, lrs, sums, weights) in &seen {
            let st = sched.stages.iter().find(|s| s.stage == *stage).unwrap();
            assert_eq!(*lrs, st.lr_table(*slot));
            match stage {
                StageId::Pretrain => {
                    for g in [ModuleGroup::HeadDet, ModuleGroup::HeadLane, ModuleGroup::HeadOcc] {
                        assert_eq!(sums[g.index()], before[g.index()]);
                    }
                    stage1_sums = Some(sums.clone());
                }
                StageId::Warmup => {
                    let s1 = stage1_sums.as_ref().unwrap();
                    for g in [ModuleGroup::Backbone, ModuleGroup::DepthEstimator, ModuleGroup::BevEncoder] {
                        assert_eq!(sums[g.index()], s1[g.index()]);
                    }
                    let heads = ModuleGroup::HEADS.iter().filter(|g| lrs[g.index()] == st.base_lr).count();
                    assert_eq!(heads, 1);
                    assert_eq!(lrs[slot.unwrap().head().index()], st.base_lr);
                }
                StageId::E2e => {
                    assert!((weights.iter().sum::<f64>() - 5.0).abs() < 1e-9);
                }
            }
        }
        let slots: Vec<Task> = seen.iter().filter_map(|s| s.1).collect();
        assert!(Task::ALL.iter().all(|t| slots.contains(t)));
        let e2e_first = seen.iter().find(|s| s.0 == StageId::E2e).unwrap();
        assert_eq!(e2e_first.4, [1.0; 5]);
    }

    #[test]
    fn checkpoint_chain_is_recorded_and_subset_runs_resume() {
        let (cfg, frames) = tiny_data();
        let idx = all(&frames);
        let data = TrainData { frames: &frames, train: &idx, val: &[] };
        let dir = tempfile::tempdir().unwrap();
        let sched = tiny_schedule(5);
        let full = run_schedule(&sched, &cfg, data, RunOptions { out_dir: Some(dir.path()), ..Default::default() }).unwrap();
        assert_eq!(full.stages.len(), 3);
        for w in full.stages.windows(2) {
            assert_eq!(w[1].loaded_sha256.as_deref(), Some(w[0].sha256.as_str()));
        }
        let log = read_loss_log(&dir.path().join(LOSS_LOG_NAME)).unwrap();
        assert_eq!(log.len(), full.log.len());

        let only3 = RunOptions { out_dir: Some(dir.path()), only_stages: Some(vec![3]), ..Default::default() };
        let again = run_schedule(&sched, &cfg, data, only3).unwrap();
        assert_eq!(again.stages.len(), 1);
        assert_eq!(again.final_bundle.to_bytes(), full.final_bundle.to_bytes());

        // a tampered predecessor is rejected by its recorded hash
        let p2 = dir.path().join(checkpoint_name(1, StageId::Warmup));
        let mut bytes = fs::read(&p2).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p2, bytes).unwrap();
        let only3 = RunOptions { out_dir: Some(dir.path()), only_stages: Some(vec![3]), ..Default::default() };
        let err = run_schedule(&sched, &cfg, data, only3).unwrap_err();
        assert_eq!(err.code(), "E_CHECKPOINT");
        assert!(err.to_string().starts_with("stage 3 (e2e)"));

        let empty = tempfile::tempdir().unwrap();
        let only2 = RunOptions { out_dir: Some(empty.path()), only_stages: Some(vec![2]), ..Default::default() };
        let err = run_schedule(&sched, &cfg, data, only2).unwrap_err();
        assert_eq!(err.code(), "E_MISSING_CHECKPOINT");
    }

    #[test]
    fn paper_preset_rejects_desk_input() {
        let (cfg, frames) = tiny_data();
        let idx = all(&frames);
        let data = TrainData { frames: &frames, train: &idx, val: &[] };
        let err = run_schedule(&ScheduleConfig::paper(0), &cfg, data, RunOptions::default()).unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
        let err = run_schedule(&tiny_schedule(0), &cfg, TrainData { frames: &frames, train: &[], val: &[] }, RunOptions::default())
            .unwrap_err();
        assert_eq!(err.code(), "E_EMPTY_DATASET");
    }

    #[test]
    fn split_is_by_whole_sequence() {
        let (_, frames) = tiny_data();
        let (train, val) = split_by_sequence(&frames);
        assert_eq!(train.len() + val.len(), frames.len());
        for &v in &val {
            assert!(train.iter().all(|&t| frames[t].sample.sequence_id != frames[v].sample.sequence_id));
        }
        assert_eq!(split_by_sequence(&frames), (train, val));
    }

    #[test]
    fn variance_of_the_final_half() {
        let log: Vec<LossReport> = [9.0, 9.0, 1.0, 3.0].iter().enumerate().map(|(i, &c)| {
            LossReport::new(i as u64, [c, 0.0, 0.0, 0.0, 0.0], [1.0; 5])
        }).collect();
        assert!((final_half_variance(&log) - 1.0).abs() < 1e-12);
    }
}
