//! Stage and schedule configuration, presets and their key-value form.

use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::losses::LossWeights;
use crate::nets::{ModuleGroup, StageId, Task};

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageId,
    pub base_lr: f64,
    /// Learning rate of the non-primary heads during warm-up.
    pub aux_lr: f64,
    /// Learning rate of the backbone during end-to-end training.
    pub backbone_lr: f64,
    pub weight_decay: f64,
    /// Epoch count, per rotation slot in warm-up.
    pub epochs: usize,
    pub frozen: Vec<ModuleGroup>,
    /// Primary-task order of the warm-up slots.
    pub rotation: Vec<Task>,
    /// Heads attached during the stage.
    pub tasks: Vec<Task>,
    pub gradnorm_enabled: bool,
    pub gradnorm_interval: usize,
    /// Include the depth component in the balanced set; the reference layer
    /// moves to the backbone when it is.
    pub gradnorm_include_depth: bool,
    pub loss_weights: LossWeights,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn pretrain() -> Self {
        StageConfig {
            stage: StageId::Pretrain,
            base_lr: 1e-4,
            aux_lr: 0.0,
            backbone_lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 20,
            frozen: vec![ModuleGroup::HeadDet, ModuleGroup::HeadLane, ModuleGroup::HeadOcc],
            rotation: Vec::new(),
            tasks: vec![Task::Map],
            gradnorm_enabled: false,
            gradnorm_interval: 1,
            gradnorm_include_depth: true,
            loss_weights: LossWeights::default(),
            batch_size: 8,
            clip_norm: 35.0,
            seed: 0,
        }
    }

    pub fn warmup() -> Self {
        StageConfig {
            stage: StageId::Warmup,
            base_lr: 2e-4,
            aux_lr: 2e-5,
            backbone_lr: 0.0,
            epochs: 10,
            frozen: vec![ModuleGroup::Backbone, ModuleGroup::DepthEstimator, ModuleGroup::BevEncoder],
            rotation: Task::ALL.to_vec(),
            tasks: Task::ALL.to_vec(),
            ..Self::pretrain()
        }
    }

    pub fn e2e() -> Self {
        StageConfig {
            stage: StageId::E2e,
            base_lr: 1e-4,
            aux_lr: 0.0,
            backbone_lr: 1e-5,
            epochs: 10,
            frozen: Vec::new(),
            tasks: Task::ALL.to_vec(),
            gradnorm_enabled: true,
            ..Self::pretrain()
        }
    }

    /// Total epochs including every rotation slot.
    pub fn total_epochs(&self) -> usize {
        match self.stage {
            StageId::Warmup => self.epochs * self.rotation.len(),
            _ => self.epochs,
        }
    }

    /// Primary task of a warm-up epoch.
    pub fn slot_for_epoch(&self, epoch: usize) -> Option<Task> {
        match self.stage {
            StageId::Warmup if self.epochs > 0 => self.rotation.get(epoch / self.epochs).copied(),
            _ => None,
        }
    }

    /// Per-group learning rates for a rotation slot; frozen groups get zero.
    pub fn lr_table(&self, slot: Option<Task>) -> [f64; 9] {
        let mut t = [0.0; 9];
        for g in ModuleGroup::ALL {
            let lr = match (self.stage, g) {
                (StageId::Warmup, g) if g.is_head() => {
                    if slot.map(Task::head) == Some(g) {
                        self.base_lr
                    } else {
                        self.aux_lr
                    }
                }
                (StageId::Warmup, _) => 0.0,
                (StageId::E2e, ModuleGroup::Backbone) => self.backbone_lr,
                _ => self.base_lr,
            };
            t[g.index()] = if self.frozen.contains(&g) { 0.0 } else { lr };
        }
        t
    }

    /// Groups that receive gradients.
    pub fn trainable_groups(&self, slot: Option<Task>) -> Vec<ModuleGroup> {
        let t = self.lr_table(slot);
        ModuleGroup::ALL.into_iter().filter(|g| t[g.index()] > 0.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        let lrs = [self.base_lr, self.aux_lr, self.backbone_lr, self.weight_decay, self.clip_norm];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("rates, decay and clip norm must be finite and nonnegative");
        }
        if self.batch_size == 0 || self.gradnorm_interval == 0 {
            return bad("batch size and GradNorm interval must be positive");
        }
        if self.tasks.is_empty() {
            return bad("no task heads");
        }
        if self.stage == StageId::Warmup && self.rotation.is_empty() {
            return bad("warm-up needs a rotation");
        }
        if self.rotation.iter().any(|t| !self.tasks.contains(t)) {
            return bad("rotation names a detached head");
        }
        self.loss_weights.validate()
    }

    pub fn write_kv(&self, w: &mut KvWriter, prefix: &str) {
        let k = |s: &str| format!("{prefix}.{s}");
        let names = |ts: &[Task]| ts.iter().map(|t| t.name()).collect::<Vec<_>>();
        w.put(&k("stage"), self.stage.name())
            .float(&k("base_lr"), self.base_lr)
            .float(&k("aux_lr"), self.aux_lr)
            .float(&k("backbone_lr"), self.backbone_lr)
            .float(&k("weight_decay"), self.weight_decay)
            .put(&k("epochs"), self.epochs)
            .list(&k("frozen"), &self.frozen.iter().map(|g| g.name()).collect::<Vec<_>>())
            .list(&k("rotation"), &names(&self.rotation))
            .list(&k("tasks"), &names(&self.tasks))
            .put(&k("gradnorm_enabled"), self.gradnorm_enabled)
            .put(&k("gradnorm_interval"), self.gradnorm_interval)
            .put(&k("gradnorm_include_depth"), self.gradnorm_include_depth)
            .floats(&k("loss_weights"), &self.loss_weights.components)
            .floats(&k("det_lambdas"), &self.loss_weights.det_lambdas)
            .floats(&k("lane_lambdas"), &self.loss_weights.lane_lambdas)
            .put(&k("batch_size"), self.batch_size)
            .float(&k("clip_norm"), self.clip_norm)
            .put(&k("seed"), self.seed);
    }

    /// Reads a stage; absent keys take the defaults of the named stage.
    pub fn from_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}.{s}");
        let stage = match kv.str(&k("stage"))? {
            "pretrain" => StageId::Pretrain,
            "warmup" => StageId::Warmup,
            "e2e" => StageId::E2e,
            other => return Err(Error::Config(format!("unknown stage {other:?}"))),
        };
        let d = match stage {
            StageId::Pretrain => Self::pretrain(),
            StageId::Warmup => Self::warmup(),
            StageId::E2e => Self::e2e(),
        };
        let tasks = |key: &str, def: &[Task]| -> Result<Vec<Task>> {
            if kv.has(key) {
                kv.list::<String>(key)?.iter().map(|s| Task::parse(s)).collect()
            } else {
                Ok(def.to_vec())
            }
        };
        let frozen = if kv.has(&k("frozen")) {
            kv.list::<String>(&k("frozen"))?.iter().map(|s| ModuleGroup::parse(s)).collect::<Result<_>>()?
        } else {
            d.frozen.clone()
        };
        let arr = |key: &str, def: &[f64]| -> Result<Vec<f64>> {
            let v = if kv.has(key) { kv.list::<f64>(key)? } else { def.to_vec() };
            if v.len() != def.len() {
                return Err(Error::Config(format!("{key} needs {} values", def.len())));
            }
            Ok(v)
        };
        let lw = &d.loss_weights;
        let loss_weights = LossWeights {
            components: arr(&k("loss_weights"), &lw.components)?.try_into().expect("length checked"),
            det_lambdas: arr(&k("det_lambdas"), &lw.det_lambdas)?.try_into().expect("length checked"),
            lane_lambdas: arr(&k("lane_lambdas"), &lw.lane_lambdas)?.try_into().expect("length checked"),
        };
        let cfg = StageConfig {
            stage,
            base_lr: kv.get_or(&k("base_lr"), d.base_lr)?,
            aux_lr: kv.get_or(&k("aux_lr"), d.aux_lr)?,
            backbone_lr: kv.get_or(&k("backbone_lr"), d.backbone_lr)?,
            weight_decay: kv.get_or(&k("weight_decay"), d.weight_decay)?,
            epochs: kv.get_or(&k("epochs"), d.epochs)?,
            frozen,
            rotation: tasks(&k("rotation"), &d.rotation)?,
            tasks: tasks(&k("tasks"), &d.tasks)?,
            gradnorm_enabled: kv.get_or(&k("gradnorm_enabled"), d.gradnorm_enabled)?,
            gradnorm_interval: kv.get_or(&k("gradnorm_interval"), d.gradnorm_interval)?,
            gradnorm_include_depth: kv.get_or(&k("gradnorm_include_depth"), d.gradnorm_include_depth)?,
            loss_weights,
            batch_size: kv.get_or(&k("batch_size"), d.batch_size)?,
            clip_norm: kv.get_or(&k("clip_norm"), d.clip_norm)?,
            seed: kv.get_or(&k("seed"), d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Names accepted after `ablation:`.
pub const ABLATIONS: [&str; 6] =
    ["baseline", "map-pretrain", "warm-up", "backbone-finetune", "high-lane-weights", "gradient-weighting"];

/// An ordered list of stages with a shared seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub preset: String,
    pub seed: u64,
    pub stages: Vec<StageConfig>,
    /// Camera input size the preset was specified for, `(width, height)`.
    pub input_size: Option<(usize, usize)>,
}

fn stage_seed(seed: u64, stage: StageId) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(u64::from(stage.number()))
}

impl ScheduleConfig {
    /// Published hyperparameters: batch 8 at 704x256.
    pub fn paper(seed: u64) -> Self {
        Self::from_stages("paper", seed, vec![StageConfig::pretrain(), StageConfig::warmup(), StageConfig::e2e()])
            .with_input((704, 256))
    }

    /// Small-data schedule: epochs (8, 4 per slot, 8), batch 2, rates
    /// raised for the short run with the same primary/auxiliary ratios.
    pub fn desk(seed: u64) -> Self {
        let p = StageConfig { base_lr: 5e-3, epochs: 8, batch_size: 2, ..StageConfig::pretrain() };
        let w = StageConfig { base_lr: 5e-3, aux_lr: 5e-4, epochs: 4, batch_size: 2, ..StageConfig::warmup() };
        let e = StageConfig { base_lr: 5e-3, backbone_lr: 5e-4, epochs: 8, batch_size: 2, ..StageConfig::e2e() };
        Self::from_stages("desk", seed, vec![p, w, e])
    }

    /// One training-schedule ablation built on the desk schedule.
    pub fn ablation(name: &str, seed: u64) -> Result<Self> {
        let desk = Self::desk(seed);
        let [p, w, e] = <[StageConfig; 3]>::try_from(desk.stages).expect("three desk stages");
        let fixed_uniform = StageConfig { backbone_lr: e.base_lr, gradnorm_enabled: false, ..e.clone() };
        let fixed = StageConfig { gradnorm_enabled: false, ..e.clone() };
        let stages = match name {
            "baseline" => vec![fixed_uniform],
            "map-pretrain" => vec![p, fixed_uniform],
            "warm-up" => vec![p, w, fixed_uniform],
            "backbone-finetune" => vec![p, w, fixed],
            "high-lane-weights" => vec![p, w, StageConfig { loss_weights: LossWeights::high_lane(), ..fixed }],
            "gradient-weighting" => vec![p, w, e],
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        };
        Ok(Self::from_stages(&format!("ablation:{name}"), seed, stages))
    }

    /// Resolves `paper`, `desk` or `ablation:<name>`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(seed)),
            "desk" => Ok(Self::desk(seed)),
            _ => match name.strip_prefix("ablation:") {
                Some(a) => Self::ablation(a, seed),
                None => Err(Error::Config(format!("unknown preset {name:?}; expected paper, desk or ablation:<name>"))),
            },
        }
    }

    fn from_stages(preset: &str, seed: u64, mut stages: Vec<StageConfig>) -> Self {
        for s in &mut stages {
            s.seed = stage_seed(seed, s.stage);
        }
        ScheduleConfig { preset: preset.to_string(), seed, stages, input_size: None }
    }

    fn with_input(mut self, size: (usize, usize)) -> Self {
        self.input_size = Some(size);
        self
    }

    /// Changes the seed and rederives the stage seeds.
    pub fn reseed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for s in &mut self.stages {
            s.seed = stage_seed(seed, s.stage);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("schedule.preset", &self.preset).put("schedule.seed", self.seed);
        w.list("schedule.stages", &self.stages.iter().map(|s| s.stage.name()).collect::<Vec<_>>());
        if let Some((iw, ih)) = self.input_size {
            w.list("schedule.input_size", &[iw, ih]);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.write_kv(w, &format!("stage{i}"));
        }
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let n = kv.list::<String>("schedule.stages")?.len();
        let stages = (0..n).map(|i| StageConfig::from_kv(kv, &format!("stage{i}"))).collect::<Result<Vec<_>>>()?;
        let input_size = if kv.has("schedule.input_size") { Some(kv.pair("schedule.input_size")?) } else { None };
        let cfg = ScheduleConfig {
            preset: kv.get_or("schedule.preset", "custom".to_string())?,
            seed: kv.get_or("schedule.seed", 0)?,
            stages,
            input_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Human-readable hyperparameter table, one line per stage.
    pub fn describe(&self) -> String {
        let mut out = format!("preset {} seed {}", self.preset, self.seed);
        if let Some((w, h)) = self.input_size {
            out.push_str(&format!(" input {w}x{h}"));
        }
        out.push('\n');
        for s in &self.stages {
            let line = match s.stage {
                StageId::Pretrain => format!(
                    "stage 1 pretrain: lr {:e} weight_decay {:e} epochs {} batch {}",
                    s.base_lr, s.weight_decay, s.epochs, s.batch_size
                ),
                StageId::Warmup => format!(
                    "stage 2 warmup: lr {:e} aux_lr {:e} epochs {} per task batch {}",
                    s.base_lr, s.aux_lr, s.epochs, s.batch_size
                ),
                StageId::E2e => format!(
                    "stage 3 e2e: lr {:e} backbone_lr {:e} epochs {} batch {} gradnorm {}",
                    s.base_lr, s.backbone_lr, s.epochs, s.batch_size, s.gradnorm_enabled
                ),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_echoes_published_values() {
        let s = ScheduleConfig::paper(0);
        let [p, w, e] = [&s.stages[0], &s.stages[1], &s.stages[2]];
        assert_eq!((p.base_lr, p.weight_decay, p.epochs), (1e-4, 1e-2, 20));
        assert_eq!((w.base_lr, w.aux_lr, w.epochs), (2e-4, 2e-5, 10));
        assert_eq!((e.base_lr, e.backbone_lr, e.epochs), (1e-4, 1e-5, 10));
        assert!(s.stages.iter().all(|st| st.batch_size == 8));
        assert_eq!(s.input_size, Some((704, 256)));
        assert_eq!(w.frozen, vec![ModuleGroup::Backbone, ModuleGroup::DepthEstimator, ModuleGroup::BevEncoder]);
    }

    #[test]
    fn warmup_slots_have_one_primary_head() {
        let w = StageConfig::warmup();
        for epoch in 0..w.total_epochs() {
            let slot = w.slot_for_epoch(epoch).unwrap();
            assert_eq!(slot, Task::ALL[epoch / w.epochs]);
            let t = w.lr_table(Some(slot));
            let heads: Vec<f64> = ModuleGroup::HEADS.iter().map(|g| t[g.index()]).collect();
            assert_eq!(heads.iter().filter(|&&x| x == w.base_lr).count(), 1);
            assert_eq!(heads.iter().filter(|&&x| x == w.base_lr / 10.0).count(), 3);
            assert_eq!(t[slot.head().index()], w.base_lr);
            assert_eq!(t[ModuleGroup::Backbone.index()], 0.0);
        }
    }

    #[test]
    fn e2e_backbone_rate_is_a_tenth() {
        let e = StageConfig::e2e();
        let t = e.lr_table(None);
        assert_eq!(t[ModuleGroup::Backbone.index()], e.base_lr / 10.0);
        assert!(ModuleGroup::ALL.iter().filter(|g| **g != ModuleGroup::Backbone).all(|g| t[g.index()] == e.base_lr));
    }

    #[test]
    fn presets_round_trip_through_text() {
        for name in ["paper", "desk"].into_iter().map(String::from).chain(ABLATIONS.iter().map(|a| format!("ablation:{a}"))) {
            let s = ScheduleConfig::preset(&name, 11).unwrap();
            let back = ScheduleConfig::from_kv(&KvMap::parse(&s.to_kv()).unwrap()).unwrap();
            assert_eq!(back, s, "{name}");
        }
        let err = ScheduleConfig::preset("ablation:nope", 0).unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
    }

    #[test]
    fn ablations_differ_as_labelled() {
        let get = |n| ScheduleConfig::ablation(n, 0).unwrap();
        assert_eq!(get("baseline").stages.len(), 1);
        assert_eq!(get("map-pretrain").stages.len(), 2);
        let bf = get("backbone-finetune");
        let gw = get("gradient-weighting");
        assert!(!bf.stages[2].gradnorm_enabled && gw.stages[2].gradnorm_enabled);
        assert_eq!(bf.stages[2].backbone_lr, bf.stages[2].base_lr / 10.0);
        assert_eq!(get("warm-up").stages[2].backbone_lr, bf.stages[2].base_lr);
        assert_eq!(get("high-lane-weights").stages[2].loss_weights.components[2], 4.0);
        assert_eq!(gw.stages, ScheduleConfig::desk(0).stages);
    }
}
