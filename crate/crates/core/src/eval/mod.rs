//! Accuracy metrics, latency benchmark and report output.

pub mod bench;
pub mod metrics;
pub mod report;

pub use bench::{benchmark, BenchReport};
pub use metrics::{align, epe, evaluate, pck, score, throughput, MetricsReport, Predictor};
pub use report::{metrics_table, overlay, write_json, write_metrics, write_overlay};
