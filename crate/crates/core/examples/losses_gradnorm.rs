//! Computes the five loss components on one frame, their shared-layer
//! gradient norms, and a few GradNorm weight updates.

use quadbev::autograd::Tape;
use quadbev::losses::{
    combine, component_grad_norms, depth_loss, detection_loss, gradnorm_update, lane_loss, map_loss, occ_loss,
    GradNormState, COMPONENT_NAMES,
};
use quadbev::nets::model::{forward_vars, FrameInput};
use quadbev::nets::{Bound, ModelConfig, ParamStore, Task};
use quadbev::synthworld::{generate_dataset, DatasetSpec};

fn main() -> quadbev::Result<()> {
    let spec = DatasetSpec { n_samples: 1, n_sequences: 1, ..Default::default() };
    let frame = generate_dataset(&spec)?.remove(0);
    let cfg = ModelConfig::for_dataset(&spec);
    let store = ParamStore::init(&cfg)?;
    let mut state = GradNormState::new(5);
    for step in 0..3 {
        let tape = Tape::new();
        let b = Bound::all_trainable(&tape, &store);
        let hv = forward_vars(&b, &cfg, &FrameInput::from_sample(&frame.sample), &[], &Task::ALL)?;
        let gt = &frame.gt;
        let parts = [
            Some(detection_loss(hv.det.as_ref().expect("det head"), gt, [1.0; 3])?.total),
            Some(map_loss(hv.map.expect("map head"), &gt.map_masks)?),
            Some(lane_loss(hv.lane.as_ref().expect("lane head"), gt, [1.0; 4])?.total),
            Some(occ_loss(hv.occ.expect("occ head"), gt, cfg.c_occ)?),
            Some(depth_loss(&hv.depth, &gt.depth_bins)?.0),
        ];
        let weights: [f64; 5] = state.weights.clone().try_into().expect("five weights");
        let reference = b.param(&format!("backbone.{}.mid.w", cfg.backbone_widths.len() - 1));
        let norms = component_grad_norms(&parts, &weights, &[reference]);
        let raw: Vec<f64> = parts.iter().map(|p| p.expect("all present").item()).collect();
        println!("step {step}: combined {:.4}", combine(&parts, &weights).item());
        for i in 0..5 {
            println!("  {:>5} loss {:.4} weight {:.4} G {:.4}", COMPONENT_NAMES[i], raw[i], weights[i], norms[i]);
        }
        gradnorm_update(&mut state, &raw, &norms)?;
    }
    println!("weights now {:?} (sum {:.6})", state.weights, state.weights.iter().sum::<f64>());
    Ok(())
}
