//! Query decoding, coordinate extraction, losses and detection filtering.

pub mod decoder;
pub mod dsnt;
pub mod loss;
pub mod matching;

pub use decoder::{DecoderLayer, HeadCache, PredictionHead};
pub use dsnt::soft_argmax;
pub use loss::{mse_loss, rle_loss, supervise, LossConfig, LossReport, LossWeights, Matching, QueryOutputGrad};

use serde::{Deserialize, Serialize};

use crate::encoder::boxes::Box;
use crate::numerics::ops::softmax_slice;

/// Ground-truth keypoint in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
}

/// Raw per-query head output.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutput {
    /// `num_classes + 1` logits; the last is background.
    pub class_logits: Vec<f64>,
    pub x: f64,
    pub y: f64,
    pub sigma: [f64; 2],
    pub bbox: Box,
    pub quality_logit: f64,
}

/// One keypoint hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub sigma: [f64; 2],
}

/// Turn query outputs into detections with confidence at least
/// `threshold`. In unique mode each class is reported once, by the query
/// most confident in it; otherwise every query reports its best
/// non-background class.
pub fn detections(outs: &[QueryOutput], threshold: f64, unique: bool) -> Vec<Detection> {
    let probs: Vec<Vec<f64>> = outs
        .iter()
        .map(|o| {
            let mut p = o.class_logits.clone();
            softmax_slice(&mut p);
            p
        })
        .collect();
    let classes = outs.first().map(|o| o.class_logits.len() - 1).unwrap_or(0);
    let make = |q: usize, c: usize| Detection {
        class_id: c,
        x: outs[q].x,
        y: outs[q].y,
        confidence: probs[q][c],
        sigma: outs[q].sigma,
    };
    let mut found: Vec<Detection> = if unique {
        (0..classes)
            .filter_map(|c| {
                (0..outs.len())
                    .max_by(|&a, &b| probs[a][c].total_cmp(&probs[b][c]).then(b.cmp(&a)))
                    .map(|q| make(q, c))
            })
            .collect()
    } else {
        (0..outs.len())
            .map(|q| {
                let c = (0..classes)
                    .max_by(|&a, &b| probs[q][a].total_cmp(&probs[q][b]).then(b.cmp(&a)))
                    .expect("at least one class");
                make(q, c)
            })
            .collect()
    };
    found.retain(|d| d.confidence >= threshold);
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(logits: Vec<f64>, x: f64) -> QueryOutput {
        QueryOutput {
            class_logits: logits,
            x,
            y: 0.5,
            sigma: [0.1, 0.1],
            bbox: Box::new(x, 0.5, 0.1, 0.1),
            quality_logit: 0.0,
        }
    }

    #[test]
    fn threshold_filtering() {
        let outs = vec![out(vec![2.0, 0.0, 0.0], 0.1), out(vec![0.0, 1.0, 0.5], 0.2), out(vec![0.0, 0.0, 3.0], 0.3)];
        assert!(detections(&outs, 1.0, true).is_empty());
        assert_eq!(detections(&outs, 0.0, false).len(), 3);
        let u = detections(&outs, 0.0, true);
        assert_eq!(u.len(), 2);
        assert_eq!((u[0].class_id, u[0].x), (0, 0.1));
        assert_eq!((u[1].class_id, u[1].x), (1, 0.2));
        for d in &u {
            assert!(d.confidence > 0.0 && d.confidence < 1.0);
        }
    }
}
