//! Command-line front end: dataset generation, training, evaluation,
//! benchmarking and reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::evalkit::{
    discount_factor, efficiency_benchmark, evaluate_model, evaluate_outputs, gt_as_outputs, EvalReport,
};
use crate::evalkit::discount::{PRETRAIN_TABLE, PRETRAIN_TABLE_BASELINE};
use crate::kv::{KvMap, KvWriter};
use crate::losses::LossReport;
use crate::nets::{load_checkpoint, FrameInput, ModelConfig, Task};
use crate::synthworld::dataset::{
    generate_dataset, write_dataset, DatasetReader, DatasetSpec, Frame, MANIFEST_NAME,
};
use crate::trainer::{
    final_half_variance, read_loss_log, run_schedule, split_by_sequence, RunOptions, ScheduleConfig, TrainData,
    LOSS_LOG_NAME, SCHEDULE_MANIFEST_NAME,
};

pub const RUN_MANIFEST_NAME: &str = "run_manifest";
pub const METRICS_TEXT_NAME: &str = "metrics.txt";
pub const METRICS_CSV_NAME: &str = "metrics.csv";
pub const EFFICIENCY_CSV_NAME: &str = "efficiency.csv";

#[derive(Parser, Debug)]
#[command(name = "quadbev", version, about = "Multitask BEV perception on synthetic driving scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Run the staged training schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Count MACs and time the shared model against four single-task models.
    Bench(BenchArgs),
    /// Loss curves, loss-variance table and discount table over runs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataPreset {
    Desk,
    Paperish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DataPreset::Desk)]
    pub preset: DataPreset,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated 1-based stage positions.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    /// `paper`, `desk` or `ablation:<name>`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Key-value schedule file; overrides `--preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frames used for training; validation uses the held-out sequences.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
    /// Print the resolved hyperparameters and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "det,map,lane,occ")]
    pub tasks: Vec<String>,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Score the ground truth itself as the prediction.
    #[arg(long)]
    pub oracle: bool,
    /// Directory for metrics files; defaults to the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Dataset whose first frame is used as input; a blank frame otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Run whose metrics are the reference of the discount table.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

/// Provenance of one command's outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub dataset_hash: Option<String>,
    /// Resolved configuration as key-value text.
    pub config: String,
    pub checkpoints: Vec<(String, String)>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest { tool_version: env!("CARGO_PKG_VERSION").to_string(), command: command.to_string(), ..Default::default() }
    }

    pub fn render(&self) -> String {
        let mut w = KvWriter::new();
        w.put("tool.version", &self.tool_version).put("command", &self.command).list("seeds", &self.seeds);
        w.put("dataset.sha256", self.dataset_hash.as_deref().unwrap_or("none"));
        w.list("checkpoints", &self.checkpoints.iter().map(|c| c.0.as_str()).collect::<Vec<_>>());
        w.list("checkpoint_sha256", &self.checkpoints.iter().map(|c| c.1.as_str()).collect::<Vec<_>>());
        w.list("artifacts", &self.artifacts);
        let mut text = w.finish();
        for line in self.config.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            text.push_str("config.");
            text.push_str(line);
            text.push('\n');
        }
        text
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let files = kv.list::<String>("checkpoints")?;
        let hashes = kv.list::<String>("checkpoint_sha256")?;
        if files.len() != hashes.len() {
            return Err(Error::Manifest("checkpoint names and hashes differ in length".into()));
        }
        let config = text
            .lines()
            .filter_map(|l| l.strip_prefix("config."))
            .map(|l| format!("{l}\n"))
            .collect::<String>();
        let dataset_hash = Some(kv.str("dataset.sha256")?.to_string()).filter(|h| h != "none");
        Ok(RunManifest {
            tool_version: kv.str("tool.version")?.to_string(),
            command: kv.str("command")?.to_string(),
            seeds: kv.list("seeds")?,
            dataset_hash,
            config,
            checkpoints: files.into_iter().zip(hashes).collect(),
            artifacts: kv.list("artifacts")?,
        })
    }

    /// Adds artifacts to the manifest in `dir`, creating it if absent.
    fn record_artifacts(dir: &Path, command: &str, artifacts: &[&str]) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_NAME);
        let mut m = match fs::read_to_string(&path) {
            Ok(text) => RunManifest::parse(&text)?,
            Err(_) => RunManifest::new(command),
        };
        for a in artifacts {
            if !m.artifacts.iter().any(|x| x == a) {
                m.artifacts.push(a.to_string());
            }
        }
        fs::write(path, m.render())?;
        Ok(())
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one `error[CODE]: message` line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|hash| println!("dataset {} manifest sha256 {hash}", a.out.display())),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|r| print!("{}", r.render_text())),
        Command::Bench(a) => cmd_bench(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Writes the dataset and returns its manifest hash.
pub fn cmd_gen_data(a: &GenDataArgs) -> Result<String> {
    let base = match a.preset {
        DataPreset::Desk => DatasetSpec::default(),
        DataPreset::Paperish => DatasetSpec::paperish(),
    };
    let spec = DatasetSpec { seed: a.seed, n_samples: a.samples, n_sequences: a.sequences, ..base };
    spec.validate()?;
    let frames = generate_dataset(&spec)?;
    write_dataset(&spec, &frames, &a.out)
}

/// Loads all frames and the manifest hash.
pub fn load_data(dir: &Path) -> Result<(DatasetSpec, Vec<Frame>, String)> {
    if !dir.join(MANIFEST_NAME).exists() {
        return Err(Error::MissingFile(dir.join(MANIFEST_NAME)));
    }
    let reader = DatasetReader::open(dir)?;
    let frames = reader.iter().collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((reader.spec().clone(), frames, reader.manifest_hash.clone()))
}

fn select(frames: &[Frame], split: Split) -> (Vec<usize>, Vec<usize>) {
    let (train, val) = split_by_sequence(frames);
    match split {
        Split::Train => (train, val),
        Split::Val => (val, Vec::new()),
        Split::All => ((0..frames.len()).collect(), val),
    }
}

fn resolve_schedule(a: &TrainArgs) -> Result<ScheduleConfig> {
    let sched = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
            ScheduleConfig::from_kv(&KvMap::parse(&text)?)?
        }
        None => ScheduleConfig::preset(&a.preset, a.seed.unwrap_or(0))?,
    };
    Ok(match a.seed {
        Some(s) => sched.reseed(s),
        None => sched,
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let sched = resolve_schedule(a)?;
    print!("{}", sched.describe());
    if a.print_config {
        return Ok(());
    }
    let data_dir = a.data.as_ref().ok_or_else(|| Error::Config("--data is required to train".into()))?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(sched.preset.replace(':', "_")));
    let (spec, frames, hash) = load_data(data_dir)?;
    let model = ModelConfig::for_dataset(&spec);
    let (train, val) = match a.split {
        Split::Val => return Err(Error::Config("cannot train on the validation split".into())),
        s => select(&frames, s),
    };
    let data = TrainData { frames: &frames, train: &train, val: &val };
    let opts = RunOptions {
        out_dir: Some(&out),
        only_stages: a.stages.clone(),
        dataset_hash: Some(hash.clone()),
        observer: None,
    };
    let outcome = run_schedule(&sched, &model, data, opts)?;
    let mut m = RunManifest::new("train");
    m.seeds = std::iter::once(sched.seed).chain(sched.stages.iter().map(|s| s.seed)).collect();
    m.dataset_hash = Some(hash);
    let mut w = KvWriter::new();
    sched.write_kv(&mut w);
    model.write_kv(&mut w);
    m.config = w.finish();
    for r in &outcome.stages {
        if let Some(p) = &r.checkpoint {
            let name = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            m.checkpoints.push((name.clone(), r.sha256.clone()));
            m.artifacts.push(name);
        }
        println!(
            "stage {} ({}) steps {}..{} best epoch {} score {:.4} sha256 {}",
            r.position, r.stage, r.first_step, r.last_step, r.best_epoch, r.best_score, r.sha256
        );
    }
    m.artifacts.extend([LOSS_LOG_NAME, SCHEDULE_MANIFEST_NAME, "schedule.cfg"].map(String::from));
    fs::write(out.join(RUN_MANIFEST_NAME), m.render())?;
    println!("run directory {}", out.display());
    Ok(())
}

fn parse_tasks(names: &[String]) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for n in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let t = Task::parse(n)?;
        if !tasks.contains(&t) {
            tasks.push(t);
        }
    }
    if tasks.is_empty() {
        return Err(Error::Config("no tasks requested".into()));
    }
    Ok(tasks)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let tasks = parse_tasks(&a.tasks)?;
    let (spec, frames, _) = load_data(&a.data)?;
    let (mut idx, _) = select(&frames, a.split);
    if idx.is_empty() {
        // too few sequences for a held-out fifth
        idx = (0..frames.len()).collect();
    }
    let sel: Vec<Frame> = idx.iter().map(|&i| frames[i].clone()).collect();
    let report = if a.oracle {
        let model = ModelConfig::for_dataset(&spec);
        let outputs: Vec<_> = sel.iter().map(|f| gt_as_outputs(&f.gt, model.embed_dim, model.c_occ)).collect();
        evaluate_outputs(&outputs, &sel, &spec.grid, model.c_occ, &tasks)?
    } else {
        let path = a.ckpt.as_ref().expect("clap requires --ckpt without --oracle");
        let bundle = load_checkpoint(path, None)?;
        if bundle.config.grid != spec.grid || bundle.config.image_size != spec.rig.image_size {
            return Err(Error::Config("checkpoint and dataset disagree on grid or camera input".into()));
        }
        evaluate_model(&bundle.params, &bundle.config, &sel, &tasks)?
    };
    let out = a.out.clone().or_else(|| a.ckpt.as_ref().and_then(|c| c.parent().map(Path::to_path_buf)));
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(METRICS_TEXT_NAME), report.render_text())?;
        fs::write(dir.join(METRICS_CSV_NAME), report.to_csv())?;
        RunManifest::record_artifacts(&dir, "eval", &[METRICS_TEXT_NAME, METRICS_CSV_NAME])?;
    }
    Ok(report)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let bundle = load_checkpoint(&a.ckpt, None)?;
    let cfg = &bundle.config;
    let input = match &a.data {
        Some(d) => {
            let reader = DatasetReader::open(d)?;
            FrameInput::from_sample(&reader.get(0)?.sample)
        }
        None => blank_input(cfg),
    };
    let report = efficiency_benchmark(&bundle.params, cfg, &input, a.repeats, a.warmup)?;
    let dir = a.out.clone().or_else(|| a.ckpt.parent().map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let csv = report.to_csv();
    fs::write(dir.join(EFFICIENCY_CSV_NAME), &csv)?;
    RunManifest::record_artifacts(&dir, "bench", &[EFFICIENCY_CSV_NAME])?;
    print!("{csv}");
    println!(
        "mac ratio analytic {:.6} measured {:.6} latency ratio {:.4}",
        report.mac_ratio_analytic, report.mac_ratio_measured, report.latency_ratio
    );
    Ok(())
}

/// A zero image on the default rig layout; MAC counts do not depend on
/// pixel values.
fn blank_input(cfg: &ModelConfig) -> FrameInput {
    use crate::synthworld::dataset::RigSpec;
    let rig = RigSpec { n_cameras: cfg.n_cameras, image_size: cfg.image_size, ..Default::default() };
    let (w, h) = cfg.image_size;
    FrameInput {
        images: (0..cfg.n_cameras).map(|_| crate::Tensor::zeros(&[3, h, w])).collect(),
        cameras: rig.cameras(),
        pose: crate::bevgeom::EgoPose::new(crate::bevgeom::Rigid3::identity(), 0.0),
    }
}

/// Metric entries of a run, read from its `metrics.csv`.
fn read_metrics(dir: &Path) -> Option<Vec<(String, f64)>> {
    let text = fs::read_to_string(dir.join(METRICS_CSV_NAME)).ok()?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',')?;
            Some((k.trim().to_string(), v.trim().parse().ok()?))
        })
        .collect()
}

/// Headline score per task: det mAP, map mIoU, lane F1, occ mIoU.
fn headline(metrics: &[(String, f64)]) -> Option<[f64; 4]> {
    let get = |k: &str| metrics.iter().find(|(n, _)| n == k).map(|(_, v)| *v);
    Some([get("det.mAP")?, get("map.mIoU")?, get("lane.F1")?, get("occ.mIoU")?])
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for dir in &a.runs {
        let log = read_loss_log(&dir.join(LOSS_LOG_NAME))?;
        if log.is_empty() {
            return Err(Error::Contract(format!("{} has no logged steps", dir.join(LOSS_LOG_NAME).display())));
        }
        runs.push((run_label(dir), dir.clone(), log));
    }
    fs::create_dir_all(&a.out)?;
    let mut artifacts = Vec::new();

    let mut var_csv = String::from("run,steps,final_half_variance,final_stage_final_half_variance\n");
    for (label, dir, log) in &runs {
        let svg = loss_curve_svg(label, log);
        let name = format!("loss_{label}.svg");
        fs::write(a.out.join(&name), svg)?;
        artifacts.push(name);
        let mut curve = String::from("step,combined\n");
        for r in log {
            curve.push_str(&format!("{},{}\n", r.step, r.combined));
        }
        let name = format!("loss_{label}.csv");
        fs::write(a.out.join(&name), curve)?;
        artifacts.push(name);
        var_csv.push_str(&format!(
            "{label},{},{},{}\n",
            log.len(),
            final_half_variance(log),
            final_half_variance(final_stage(dir, log))
        ));
    }
    fs::write(a.out.join("loss_variance.csv"), &var_csv)?;
    artifacts.push("loss_variance.csv".into());
    let panels: Vec<(&str, &[LossReport])> = runs.iter().map(|(l, _, log)| (l.as_str(), log.as_slice())).collect();
    fs::write(a.out.join("loss_panels.svg"), panel_svg(&panels))?;
    artifacts.push("loss_panels.svg".into());

    let mut disc = String::from("source,row,det,map,lane,occ,discount,reported\n");
    for (name, row, reported) in PRETRAIN_TABLE {
        let d = discount_factor(&row, &PRETRAIN_TABLE_BASELINE)?;
        disc.push_str(&format!(
            "table,{name},{},{},{},{},{:.6},{reported}\n",
            d.ratios[0], d.ratios[1], d.ratios[2], d.ratios[3], d.product
        ));
    }
    if let Some(base_dir) = &a.baseline {
        let base = read_metrics(base_dir)
            .and_then(|m| headline(&m))
            .ok_or_else(|| Error::MissingFile(base_dir.join(METRICS_CSV_NAME)))?;
        for (label, dir, _) in &runs {
            let Some(scores) = read_metrics(dir).and_then(|m| headline(&m)) else { continue };
            match discount_factor(&scores, &base) {
                Ok(d) => disc.push_str(&format!(
                    "run,{label},{},{},{},{},{:.6},\n",
                    d.ratios[0], d.ratios[1], d.ratios[2], d.ratios[3], d.product
                )),
                Err(e) => disc.push_str(&format!("run,{label},,,,,,{}\n", e.to_string().replace(',', ";"))),
            }
        }
    }
    fs::write(a.out.join("discount.csv"), &disc)?;
    artifacts.push("discount.csv".into());
    print!("{var_csv}");
    print!("{disc}");
    let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    RunManifest::record_artifacts(&a.out, "report", &refs)?;
    Ok(())
}

/// Steps of the last stage recorded in the run's schedule manifest; the
/// whole log when there is none.
fn final_stage<'a>(dir: &Path, log: &'a [LossReport]) -> &'a [LossReport] {
    let first = fs::read_to_string(dir.join(SCHEDULE_MANIFEST_NAME)).ok().and_then(|text| {
        let kv = KvMap::parse(&text).ok()?;
        let n = kv.list::<String>("schedule.stages").ok()?.len();
        (1..=n).rev().find_map(|p| kv.pair::<u64>(&format!("run.stage{p}.steps")).ok()).map(|(a, _)| a)
    });
    match first {
        Some(f) => &log[log.iter().position(|r| r.step >= f).unwrap_or(log.len())..],
        None => log,
    }
}

fn polyline(log: &[LossReport], x0: f64, y0: f64, w: f64, h: f64) -> (String, f64, f64) {
    let ys: Vec<f64> = log.iter().map(|r| r.combined).collect();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = (ys.len().max(2) - 1) as f64;
    let pts: Vec<String> = ys
        .iter()
        .enumerate()
        .map(|(i, y)| format!("{:.2},{:.2}", x0 + w * i as f64 / n, y0 + h - h * (y - lo) / span))
        .collect();
    (pts.join(" "), lo, hi)
}

fn panel(label: &str, log: &[LossReport], x: f64, y: f64, w: f64, h: f64) -> String {
    let (pts, lo, hi) = polyline(log, x + 50.0, y + 30.0, w - 70.0, h - 60.0);
    format!(
        "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"white\" stroke=\"#999\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{label}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\">{hi:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\">{lo:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">step</text>\n\
         <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.2\" points=\"{pts}\"/>\n",
        x + w / 2.0,
        y + 18.0,
        x + 4.0,
        y + 34.0,
        x + 4.0,
        y + h - 30.0,
        x + w / 2.0,
        y + h - 8.0,
    )
}

/// Combined loss against step as a standalone SVG.
pub fn loss_curve_svg(label: &str, log: &[LossReport]) -> String {
    let (w, h) = (480.0, 320.0);
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n{}</svg>\n",
        panel(label, log, 0.0, 0.0, w, h)
    )
}

/// All runs as panels on a three-column grid.
pub fn panel_svg(runs: &[(&str, &[LossReport])]) -> String {
    let (pw, ph) = (360.0, 240.0);
    let cols = runs.len().clamp(1, 3);
    let rows = runs.len().div_ceil(cols).max(1);
    let mut body = String::new();
    for (i, (label, log)) in runs.iter().enumerate() {
        body.push_str(&panel(label, log, (i % cols) as f64 * pw, (i / cols) as f64 * ph, pw, ph));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n{body}</svg>\n",
        cols as f64 * pw,
        rows as f64 * ph
    )
}

/// Number of panels in a panel figure.
pub fn count_panels(svg: &str) -> usize {
    svg.matches("<polyline").count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_manifest_round_trips() {
        let m = RunManifest {
            tool_version: "0.1.0".into(),
            command: "train".into(),
            seeds: vec![7, 8],
            dataset_hash: Some("ab".into()),
            config: "schedule.preset = desk\n".into(),
            checkpoints: vec![("stage1_pretrain.qbck".into(), "cd".into())],
            artifacts: vec!["loss_log.csv".into()],
        };
        assert_eq!(RunManifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn unknown_ablation_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with_args(["quadbev", "train", "--preset", "ablation:nope", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, 1);
        let cli = Cli::try_parse_from(["quadbev", "train", "--preset", "ablation:nope"]).unwrap();
        assert_eq!(run(cli).unwrap_err().code(), "E_CONFIG");
    }

    #[test]
    fn panel_figure_has_one_panel_per_run() {
        let log: Vec<LossReport> =
            (0..10).map(|i| LossReport::new(i, [1.0 / (i + 1) as f64, 0.0, 0.0, 0.0, 0.0], [1.0; 5])).collect();
        let runs: Vec<(&str, &[LossReport])> = (0..6).map(|_| ("r", log.as_slice())).collect();
        let svg = panel_svg(&runs);
        assert_eq!(count_panels(&svg), 6);
        assert!(svg.contains("width=\"1080\" height=\"480\""));
        assert_eq!(count_panels(&loss_curve_svg("one", &log)), 1);
    }

    #[test]
    fn missing_loss_log_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let a = ReportArgs { runs: vec![dir.path().to_path_buf()], baseline: None, out: dir.path().join("r") };
        let err = cmd_report(&a).unwrap_err();
        assert_eq!(err.code(), "E_MISSING_FILE");
        assert!(err.to_string().contains(LOSS_LOG_NAME));
    }
}
