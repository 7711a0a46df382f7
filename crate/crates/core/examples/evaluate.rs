//! Scores ground truth fed back as predictions (all metrics perfect) and an
//! untrained model on the same frames.

use quadbev::evalkit::{evaluate_model, evaluate_outputs, gt_as_outputs};
use quadbev::nets::{ModelConfig, ParamStore, Task};
use quadbev::synthworld::{generate_dataset, DatasetSpec};

fn main() -> quadbev::Result<()> {
    let spec = DatasetSpec { n_samples: 4, n_sequences: 2, ..Default::default() };
    let frames = generate_dataset(&spec)?;
    let cfg = ModelConfig::for_dataset(&spec);
    let oracle: Vec<_> = frames.iter().map(|f| gt_as_outputs(&f.gt, cfg.embed_dim, cfg.c_occ)).collect();
    let report = evaluate_outputs(&oracle, &frames, &cfg.grid, cfg.c_occ, &Task::ALL)?;
    println!("ground truth as prediction:\n{}", report.render_text());
    let store = ParamStore::init(&cfg)?;
    let report = evaluate_model(&store, &cfg, &frames, &Task::ALL)?;
    println!("untrained model:\n{}", report.render_text());
    Ok(())
}
