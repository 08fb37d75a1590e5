//! Procedural skeletons, acupoint placement, rendering and dataset files.

pub mod dataset;
pub mod render;
pub mod rules;
pub mod skeleton;

pub use dataset::{build_dataset, generate_sample, manifest_hash, DataConfig, Dataset, Example, Manifest, Sample, Split};
pub use render::{render, RenderConfig};
pub use rules::{bilateral, default_rules, place_acupoints, AcupointRule, Anchor};
pub use skeleton::{sample_skeleton, Skeleton, SkeletonConfig};
