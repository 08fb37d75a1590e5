//! Single-image latency benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{throughput, Predictor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MIN_ITERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub t_avg_ms: f64,
    pub std_ms: f64,
    pub throughput_per_s: f64,
    pub warmup: usize,
    pub iters: usize,
}

impl BenchReport {
    /// Build a report from per-iteration latencies in milliseconds.
    pub fn from_samples(samples_ms: &[f64], warmup: usize) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::param("no timing samples"));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            t_avg_ms: mean,
            std_ms: var.sqrt(),
            throughput_per_s: throughput(mean),
            warmup,
            iters: samples_ms.len(),
        })
    }
}

/// Time `iters` single-image predictions after `warmup` untimed ones,
/// cycling through `images`.
pub fn benchmark<P: Predictor + ?Sized>(model: &P, images: &[Tensor], warmup: usize, iters: usize) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(Error::param("benchmark needs at least one image"));
    }
    if warmup < 1 {
        return Err(Error::param("at least one warmup iteration is required"));
    }
    if iters < MIN_ITERS {
        return Err(Error::param(format!("at least {MIN_ITERS} timed iterations are required, got {iters}")));
    }
    let mut cycle = images.iter().cycle();
    for _ in 0..warmup {
        model.predict(cycle.next().expect("non-empty"))?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let img = cycle.next().expect("non-empty");
        let t = Instant::now();
        model.predict(img)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    BenchReport::from_samples(&samples, warmup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Detection;
    use std::time::Duration;

    #[test]
    fn sleep_stub_latency() {
        let stub = |_: &Tensor| -> Result<Vec<Detection>> {
            std::thread::sleep(Duration::from_millis(5));
            Ok(vec![])
        };
        let r = benchmark(&stub, &[Tensor::zeros(vec![1, 4, 4])], 1, 10).unwrap();
        assert!((r.t_avg_ms - 5.0).abs() <= 1.0, "{r:?}");
        assert_eq!(r.throughput_per_s, 1000.0 / r.t_avg_ms);
    }

    #[test]
    fn validation() {
        let stub = |_: &Tensor| -> Result<Vec<Detection>> { Ok(vec![]) };
        let img = [Tensor::zeros(vec![1, 4, 4])];
        assert!(benchmark(&stub, &[], 1, 10).is_err());
        assert!(benchmark(&stub, &img, 0, 10).is_err());
        assert!(benchmark(&stub, &img, 1, 9).is_err());
    }

    #[test]
    fn statistics() {
        let r = BenchReport::from_samples(&[10.0, 10.1, 10.05], 1).unwrap();
        assert!((r.t_avg_ms - 10.05).abs() < 1e-12);
        assert!((r.std_ms - (0.005f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.throughput_per_s, 1000.0 / r.t_avg_ms);
    }

    proptest::proptest! {
        #[test]
        fn json_round_trip_keeps_identity(samples in proptest::collection::vec(0.01f64..500.0, 11..40)) {
            let r = BenchReport::from_samples(&samples, 1).unwrap();
            let back: BenchReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.throughput_per_s, 1000.0 / back.t_avg_ms);
            proptest::prop_assert_eq!(back.t_avg_ms.to_bits(), r.t_avg_ms.to_bits());
        }
    }
}
