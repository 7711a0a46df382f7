//! Analytic and measured multiply-accumulate counts of the shared model
//! against four single-task models, with latency.

use quadbev::evalkit::efficiency_benchmark;
use quadbev::nets::model::FrameInput;
use quadbev::nets::flops::total;
use quadbev::nets::{flops_count, FlopsMode, ModelConfig, ParamStore};
use quadbev::synthworld::{generate_dataset, DatasetSpec};

fn main() -> quadbev::Result<()> {
    let spec = DatasetSpec { n_samples: 1, n_sequences: 1, ..Default::default() };
    let frame = generate_dataset(&spec)?.remove(0);
    let cfg = ModelConfig::for_dataset(&spec);
    let store = ParamStore::init(&cfg)?;
    println!("quad MACs (analytic): {}", total(&flops_count(&cfg, FlopsMode::Quad)));
    let report = efficiency_benchmark(&store, &cfg, &FrameInput::from_sample(&frame.sample), 3, 1)?;
    print!("{}", report.to_csv());
    println!("MAC ratio quad / sum of single-task: analytic {:.4}, measured {:.4}", report.mac_ratio_analytic, report.mac_ratio_measured);
    println!("latency ratio {:.3}", report.latency_ratio);
    Ok(())
}
