//! Runs a shortened three-stage schedule on a small dataset and prints the
//! per-stage results. Pass a preset name to change the schedule, e.g.
//! `cargo run --release --example train_schedule -- ablation:baseline`.

use quadbev::nets::ModelConfig;
use quadbev::synthworld::{generate_dataset, DatasetSpec};
use quadbev::trainer::{final_half_variance, run_schedule, RunOptions, ScheduleConfig, TrainData};

fn main() -> quadbev::Result<()> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "desk".into());
    let spec = DatasetSpec { n_samples: 4, n_sequences: 2, ..Default::default() };
    let frames = generate_dataset(&spec)?;
    let cfg = ModelConfig::for_dataset(&spec);
    let mut sched = ScheduleConfig::preset(&preset, 7)?;
    for s in &mut sched.stages {
        s.epochs = 1;
    }
    print!("{}", sched.describe());
    let idx: Vec<usize> = (0..frames.len()).collect();
    let data = TrainData { frames: &frames, train: &idx, val: &[] };
    let out = run_schedule(&sched, &cfg, data, RunOptions::default())?;
    for r in &out.stages {
        println!("stage {} ({}): steps {}..{}, score {:.4}", r.position, r.stage, r.first_step, r.last_step, r.best_score);
    }
    let last = out.log.last().expect("steps ran");
    println!("final weights {:?}", last.weights);
    println!("final-half combined-loss variance {:.6}", final_half_variance(&out.log));
    Ok(())
}
