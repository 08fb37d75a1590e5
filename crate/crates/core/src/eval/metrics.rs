//! Keypoint accuracy metrics and per-split evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::head::{Detection, Keypoint};
use crate::model::KeypointDetector;
use crate::numerics::Tensor;

/// Anything that turns an image into detections.
pub trait Predictor {
    fn predict(&self, image: &Tensor) -> Result<Vec<Detection>>;
}

impl Predictor for KeypointDetector {
    fn predict(&self, image: &Tensor) -> Result<Vec<Detection>> {
        KeypointDetector::predict(self, image, self.threshold)
    }
}

impl<F> Predictor for F
where
    F: Fn(&Tensor) -> Result<Vec<Detection>>,
{
    fn predict(&self, image: &Tensor) -> Result<Vec<Detection>> {
        self(image)
    }
}

fn check_pairs(pred: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::param("no keypoints to score"));
    }
    Ok(())
}

fn distance(p: &(f64, f64), g: &(f64, f64)) -> f64 {
    let (dx, dy) = (p.0 - g.0, p.1 - g.1);
    (dx * dx + dy * dy).sqrt()
}

/// Mean Euclidean distance between index-aligned points.
pub fn epe(pred: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| distance(p, g)).sum();
    Ok(total / pred.len() as f64)
}

/// Fraction of points within `alpha · max(h, w)` pixels of their target.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], alpha: f64, h: usize, w: usize) -> Result<f64> {
    check_pairs(pred, gt)?;
    if !(alpha > 0.0) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    let limit = alpha * h.max(w) as f64;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| distance(p, g) <= limit)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Inverse of a latency in milliseconds, in items per second.
pub fn throughput(t_avg_ms: f64) -> f64 {
    1000.0 / t_avg_ms
}

/// String key used for an `alpha` in [`MetricsReport::pck`].
pub fn alpha_key(alpha: f64) -> String {
    format!("{alpha}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean pixel error over detected keypoints; absent when none were
    /// detected.
    pub epe: Option<f64>,
    pub pck: BTreeMap<String, f64>,
    pub t_avg_ms: f64,
    pub throughput_per_s: f64,
    pub n_images: usize,
    pub n_keypoints: usize,
    /// Ground-truth keypoints without a detection of their class.
    pub n_missing: usize,
}

impl MetricsReport {
    pub fn pck_at(&self, alpha: f64) -> Option<f64> {
        self.pck.get(&alpha_key(alpha)).copied()
    }

    /// Same report with the wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            t_avg_ms: 0.0,
            throughput_per_s: 0.0,
            ..self.clone()
        }
    }
}

/// Best detection of each ground-truth class, in pixels, or `None` when the
/// class was not detected.
pub fn align(dets: &[Detection], gts: &[Keypoint], h: usize, w: usize) -> Vec<Option<((f64, f64), (f64, f64))>> {
    gts.iter()
        .map(|g| {
            dets.iter()
                .filter(|d| d.class_id == g.class_id)
                .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
                .map(|d| ((d.x * w as f64, d.y * h as f64), (g.x * w as f64, g.y * h as f64)))
        })
        .collect()
}

/// Score precomputed detections. `dets[i]` belongs to `examples[i]`.
pub fn score(examples: &[Example], dets: &[Vec<Detection>], alphas: &[f64]) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::param("cannot evaluate an empty split"));
    }
    if dets.len() != examples.len() {
        return Err(Error::dim("one detection list per example is required"));
    }
    if alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::param("alpha must be positive"));
    }
    let mut dist = Vec::new();
    let mut hits = vec![0usize; alphas.len()];
    let mut n_keypoints = 0;
    let mut n_missing = 0;
    for (ex, d) in examples.iter().zip(dets) {
        let (_, h, w) = ex.image.dims3()?;
        let side = h.max(w) as f64;
        for pair in align(d, &ex.keypoints, h, w) {
            n_keypoints += 1;
            match pair {
                Some((p, g)) => {
                    let e = distance(&p, &g);
                    dist.push(e);
                    for (k, &a) in alphas.iter().enumerate() {
                        if e <= a * side {
                            hits[k] += 1;
                        }
                    }
                }
                None => n_missing += 1,
            }
        }
    }
    let denom = n_keypoints.max(1) as f64;
    Ok(MetricsReport {
        epe: (!dist.is_empty()).then(|| dist.iter().sum::<f64>() / dist.len() as f64),
        pck: alphas.iter().zip(&hits).map(|(&a, &n)| (alpha_key(a), n as f64 / denom)).collect(),
        t_avg_ms: 0.0,
        throughput_per_s: 0.0,
        n_images: examples.len(),
        n_keypoints,
        n_missing,
    })
}

/// Predict every example, timing each call, and score the results.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    examples: &[Example],
    alphas: &[f64],
) -> Result<(MetricsReport, Vec<Vec<Detection>>)> {
    if examples.is_empty() {
        return Err(Error::param("cannot evaluate an empty split"));
    }
    let mut dets = Vec::with_capacity(examples.len());
    let mut elapsed = 0.0;
    for ex in examples {
        let t = Instant::now();
        dets.push(model.predict(&ex.image)?);
        elapsed += t.elapsed().as_secs_f64() * 1e3;
    }
    let mut report = score(examples, &dets, alphas)?;
    report.t_avg_ms = elapsed / examples.len() as f64;
    report.throughput_per_s = throughput(report.t_avg_ms);
    Ok((report, dets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(c: usize, x: f64, y: f64) -> Detection {
        Detection {
            class_id: c,
            x,
            y,
            confidence: 0.9,
            sigma: [0.01, 0.01],
        }
    }

    fn example(id: usize, kps: Vec<Keypoint>) -> Example {
        Example {
            id,
            image: Tensor::zeros(vec![1, 128, 128]),
            keypoints: kps,
        }
    }

    #[test]
    fn epe_examples() {
        assert_eq!(epe(&[(1.0, 2.0)], &[(1.0, 2.0)]).unwrap(), 0.0);
        assert_eq!(epe(&[(3.0, 4.0)], &[(0.0, 0.0)]).unwrap(), 5.0);
        assert!(matches!(epe(&[(0.0, 0.0)], &[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn pck_examples() {
        let gt = [(0.0, 0.0); 4];
        let pred = [(6.0, 0.0), (0.0, 6.4), (6.5, 0.0), (5.0, 5.0)];
        assert_eq!(pck(&pred, &gt, 0.05, 128, 128).unwrap(), 0.5);
        assert_eq!(pck(&gt, &gt, 0.05, 128, 128).unwrap(), 1.0);
        assert_eq!(pck(&pred, &gt, 1e6, 128, 128).unwrap(), 1.0);
        assert!(pck(&pred, &gt, 0.0, 128, 128).is_err());
    }

    #[test]
    fn throughput_identity() {
        assert_eq!(throughput(1000.0), 1.0);
        assert_eq!(format!("{:.2}", throughput(10.05)), "99.50");
    }

    #[test]
    fn perfect_and_missing_predictors() {
        let kps = vec![
            Keypoint { class_id: 0, x: 0.25, y: 0.5 },
            Keypoint { class_id: 1, x: 0.75, y: 0.5 },
        ];
        let exs = vec![example(0, kps.clone()), example(1, kps.clone())];
        let perfect = |_: &Tensor| Ok(kps.iter().map(|k| det(k.class_id, k.x, k.y)).collect());
        let (r, _) = evaluate(&perfect, &exs, &[0.05, 0.1]).unwrap();
        assert_eq!(r.epe, Some(0.0));
        assert_eq!(r.pck_at(0.05), Some(1.0));
        assert_eq!(r.pck_at(0.1), Some(1.0));
        assert_eq!(r.throughput_per_s, throughput(r.t_avg_ms));

        let dets = vec![vec![det(0, 0.25, 0.5)], kps.iter().map(|k| det(k.class_id, k.x, k.y)).collect()];
        let r = score(&exs, &dets, &[0.05]).unwrap();
        assert_eq!((r.n_keypoints, r.n_missing), (4, 1));
        assert_eq!(r.pck_at(0.05), Some(0.75));
        assert_eq!(r.epe, Some(0.0));
    }

    proptest! {
        #[test]
        fn pck_monotone_in_alpha(pts in prop::collection::vec((0.0..128.0f64, 0.0..128.0f64, 0.0..128.0f64, 0.0..128.0f64), 1..20), a in 0.001..0.5f64, b in 0.001..0.5f64) {
            let pred: Vec<_> = pts.iter().map(|p| (p.0, p.1)).collect();
            let gt: Vec<_> = pts.iter().map(|p| (p.2, p.3)).collect();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(pck(&pred, &gt, lo, 128, 128).unwrap() <= pck(&pred, &gt, hi, 128, 128).unwrap());
        }

        #[test]
        fn epe_permutation_invariant(pts in prop::collection::vec((0.0..128.0f64, 0.0..128.0f64, 0.0..128.0f64, 0.0..128.0f64), 1..20), rot in 0usize..20) {
            let pred: Vec<_> = pts.iter().map(|p| (p.0, p.1)).collect();
            let gt: Vec<_> = pts.iter().map(|p| (p.2, p.3)).collect();
            let r = rot % pts.len();
            let (mut pp, mut gg) = (pred.clone(), gt.clone());
            pp.rotate_left(r);
            gg.rotate_left(r);
            prop_assert!((epe(&pred, &gt).unwrap() - epe(&pp, &gg).unwrap()).abs() < 1e-9);
        }
    }
}
