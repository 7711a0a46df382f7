//! Procedural multiview driving scenes with exact ground truth for every head.

pub mod dataset;
pub mod gt;
pub mod render;
pub mod world;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, DatasetReader, DatasetSpec, Frame, Manifest, RigSpec,
};
pub use gt::{rasterize_gt, GtRasters, OccGrid};
pub use render::{render_sample, Sample};
pub use world::{generate_world, Box3D, GenerationSpec, LanePolyline, Region, World};
