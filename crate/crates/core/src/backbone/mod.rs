//! Selective state-space feature extractor.

pub mod pyramid;
pub mod scan;
pub mod selective;
pub mod ssm;

pub use pyramid::{deserialize, serialize, Backbone, BackboneCache, BackboneConfig, FeatureMap, FeaturePyramid};
pub use selective::{ScanMode, SelectiveBlock};
pub use ssm::{discretize_zoh, scan_parallel, scan_recurrent, DiscreteSsm, SsmParams, StateMatrix};
