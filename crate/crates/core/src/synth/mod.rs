//! Procedural day/night street scenes with exact labels.

pub mod dataset;
pub mod scene;
pub mod taxonomy;

pub use dataset::{build_dataset, dir_digest, Dataset, DatasetConfig, Manifest};
pub use scene::{
    generate_scene, night_offsets, render_day, render_night, Domain, DomainSample, NightConfig,
    PlacedObject, Primitive, SceneConfig, SceneSpec,
};
pub use taxonomy::{ClassInfo, Group, Kind, Taxonomy};
