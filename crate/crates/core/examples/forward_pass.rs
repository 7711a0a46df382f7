//! One inference pass of the four-head model on a generated frame.

use quadbev::nets::{forward, ModelConfig, ParamStore};
use quadbev::nets::model::FrameInput;
use quadbev::synthworld::{generate_dataset, DatasetSpec};

fn main() -> quadbev::Result<()> {
    let spec = DatasetSpec { n_samples: 1, n_sequences: 1, ..Default::default() };
    let frame = generate_dataset(&spec)?.remove(0);
    let cfg = ModelConfig::for_dataset(&spec);
    let store = ParamStore::init(&cfg)?;
    let out = forward(&store, &cfg, &FrameInput::from_sample(&frame.sample), &[])?;
    println!("parameters: {}", store.params.iter().map(|p| p.value.numel()).sum::<usize>());
    for (name, t) in [
        ("shared BEV", &out.shared),
        ("det heatmap", &out.det_heatmap),
        ("det regression", &out.det_reg),
        ("map logits", &out.map_logits),
        ("lane embedding", &out.lane_embed),
        ("occupancy logits", &out.occ_logits),
    ] {
        println!("{name:>17}: {:?}", t.shape());
    }
    Ok(())
}
