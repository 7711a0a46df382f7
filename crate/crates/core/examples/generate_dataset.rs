//! Generates a small synthetic dataset, writes it to a temporary directory
//! and reads it back.

use quadbev::synthworld::{generate_dataset, read_dataset, write_dataset, DatasetSpec};

fn main() -> quadbev::Result<()> {
    let spec = DatasetSpec { seed: 3, n_samples: 6, n_sequences: 2, ..Default::default() };
    let frames = generate_dataset(&spec)?;
    let dir = std::env::temp_dir().join("quadbev_example_dataset");
    let hash = write_dataset(&spec, &frames, &dir)?;
    let back = read_dataset(&dir)?;
    assert_eq!(back, frames);
    println!("wrote {} frames to {} (manifest sha256 {hash})", frames.len(), dir.display());
    for f in &frames {
        let boxes = f.gt.det_mask.sum();
        println!(
            "{}: {} cameras, {boxes} box centers, {} lane cells",
            f.record_name(),
            f.sample.images.len(),
            f.gt.n_lane_cells()
        );
    }
    Ok(())
}
