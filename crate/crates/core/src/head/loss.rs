//! Coordinate, class and box-quality losses with one-to-one matching.

use serde::{Deserialize, Serialize};

use super::matching::assign;
use super::{Keypoint, QueryOutput};
use crate::encoder::boxes::{iou_with_grad, Box};
use crate::error::{Error, Result};
use crate::numerics::ops::{sigmoid, softmax_slice};

/// `(1/2n)·Σ (p̂_j − q̂_j)²` over `2n` coordinates.
pub fn mse_loss(p_hat: &[f64], q_hat: &[f64]) -> Result<f64> {
    if p_hat.len() != q_hat.len() {
        return Err(Error::dim(format!("{} vs {} coordinates", p_hat.len(), q_hat.len())));
    }
    if p_hat.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = p_hat.iter().zip(q_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / p_hat.len() as f64)
}

/// Laplace negative log-likelihood of the residual, summed over both axes:
/// `Σ log(2σ) + |gt − pred|/σ`.
pub fn rle_loss(pred: (f64, f64), sigma: (f64, f64), gt: (f64, f64)) -> Result<f64> {
    if !(sigma.0 > 0.0 && sigma.1 > 0.0) {
        return Err(Error::param(format!("scale must be positive, got {sigma:?}")));
    }
    Ok((2.0 * sigma.0).ln() + (gt.0 - pred.0).abs() / sigma.0 + (2.0 * sigma.1).ln() + (gt.1 - pred.1).abs() / sigma.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mse: f64,
    pub rle: f64,
    pub class: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            rle: 1.0,
            class: 1.0,
            iou: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Class-loss weight of queries left unmatched.
    pub background_weight: f64,
    /// Side of the square box drawn around every ground-truth keypoint.
    pub gt_box: f64,
    /// Matching cost per unit of normalized distance.
    pub match_distance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            background_weight: 0.1,
            gt_box: 0.08,
            match_distance: 5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let all = [w.mse, w.rle, w.class, w.iou, self.background_weight, self.match_distance];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if !(self.gt_box > 0.0 && self.gt_box <= 1.0) {
            return Err(Error::param("gt_box must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mse_term: f64,
    pub rle_term: f64,
    pub class_term: f64,
    pub iou_term: f64,
}

impl LossReport {
    pub fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.total += s * other.total;
        self.mse_term += s * other.mse_term;
        self.rle_term += s * other.rle_term;
        self.class_term += s * other.class_term;
        self.iou_term += s * other.iou_term;
    }
}

/// `(ground truth index, query index)` pairs.
pub type Matching = Vec<(usize, usize)>;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutputGrad {
    pub class_logits: Vec<f64>,
    pub xy: [f64; 2],
    pub sigma: [f64; 2],
    pub bbox: [f64; 4],
    pub quality_logit: f64,
}

fn probabilities(q: &QueryOutput) -> Vec<f64> {
    let mut p = q.class_logits.clone();
    softmax_slice(&mut p);
    p
}

/// Minimum-cost matching with cost `−p(class) + λ·distance`.
pub fn match_queries(out: &[QueryOutput], gts: &[Keypoint], cfg: &LossConfig) -> Result<Matching> {
    let probs: Vec<Vec<f64>> = out.iter().map(probabilities).collect();
    let cost = |g: &Keypoint, q: usize| -> Result<f64> {
        let p = probs[q]
            .get(g.class_id)
            .ok_or_else(|| Error::param(format!("class {} out of range", g.class_id)))?;
        let d = ((out[q].x - g.x).powi(2) + (out[q].y - g.y).powi(2)).sqrt();
        Ok(-p + cfg.match_distance * d)
    };
    let mut table = Vec::with_capacity(gts.len());
    for g in gts {
        table.push((0..out.len()).map(|q| cost(g, q)).collect::<Result<Vec<f64>>>()?);
    }
    if gts.len() <= out.len() {
        Ok(assign(&table)?.into_iter().enumerate().collect())
    } else {
        let transposed: Vec<Vec<f64>> = (0..out.len()).map(|q| table.iter().map(|r| r[q]).collect()).collect();
        let mut pairs: Matching = assign(&transposed)?.into_iter().enumerate().map(|(q, g)| (g, q)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Loss terms and per-query gradients. When `fixed` is given it replaces
/// the matching search.
pub fn supervise(
    out: &[QueryOutput],
    gts: &[Keypoint],
    cfg: &LossConfig,
    fixed: Option<&Matching>,
) -> Result<(LossReport, Vec<QueryOutputGrad>, Matching)> {
    let k = out.len();
    let bg = out.first().map(|q| q.class_logits.len() - 1).unwrap_or(0);
    for g in gts {
        if g.class_id >= bg {
            return Err(Error::param(format!("class {} out of range", g.class_id)));
        }
    }
    let matching = match fixed {
        Some(m) => m.clone(),
        None => match_queries(out, gts, cfg)?,
    };
    let mut target = vec![None; k];
    for &(g, q) in &matching {
        if g >= gts.len() || q >= k || target[q].is_some() {
            return Err(Error::param("invalid matching"));
        }
        target[q] = Some(g);
    }
    let n = gts.len().max(1) as f64;
    let mut grads: Vec<QueryOutputGrad> = out
        .iter()
        .map(|q| QueryOutputGrad {
            class_logits: vec![0.0; q.class_logits.len()],
            xy: [0.0; 2],
            sigma: [0.0; 2],
            bbox: [0.0; 4],
            quality_logit: 0.0,
        })
        .collect();
    let w = cfg.weights;
    let mut rep = LossReport::default();

    // Coordinates: mean squared error and Laplace likelihood.
    for &(g, q) in &matching {
        let (gt, o) = (&gts[g], &out[q]);
        let r = [o.x - gt.x, o.y - gt.y];
        rep.mse_term += (r[0] * r[0] + r[1] * r[1]) / (2.0 * n);
        rep.rle_term += rle_loss((o.x, o.y), (o.sigma[0], o.sigma[1]), (gt.x, gt.y))?;
        for a in 0..2 {
            let s = o.sigma[a];
            grads[q].xy[a] += w.mse * r[a] / n + w.rle * r[a].signum() / s;
            grads[q].sigma[a] += w.rle * (1.0 / s - r[a].abs() / (s * s));
        }
    }

    // Classes: weighted cross-entropy, unmatched queries toward background.
    let mut weight_sum = 0.0;
    let mut ce = 0.0;
    let mut ce_grads = Vec::with_capacity(k);
    for (q, o) in out.iter().enumerate() {
        let p = probabilities(o);
        let (t, wq) = match target[q] {
            Some(g) => (gts[g].class_id, 1.0),
            None => (bg, cfg.background_weight),
        };
        ce += wq * -p[t].max(f64::MIN_POSITIVE).ln();
        weight_sum += wq;
        ce_grads.push((p, t, wq));
    }
    if weight_sum > 0.0 {
        rep.class_term = ce / weight_sum;
        for (q, (p, t, wq)) in ce_grads.into_iter().enumerate() {
            for (c, pc) in p.iter().enumerate() {
                let onehot = if c == t { 1.0 } else { 0.0 };
                grads[q].class_logits[c] = w.class * wq * (pc - onehot) / weight_sum;
            }
        }
    }

    // Box quality: score regressed onto the live IoU, plus L1 on the box.
    let kf = k.max(1) as f64;
    for (q, o) in out.iter().enumerate() {
        let s = sigmoid(o.quality_logit);
        let (t, dt) = match target[q] {
            Some(g) => iou_with_grad(&o.bbox, &gt_box(&gts[g], cfg)),
            None => (0.0, [0.0; 4]),
        };
        rep.iou_term += (s - t) * (s - t) / kf;
        let d = 2.0 * (s - t) / kf;
        grads[q].quality_logit += w.iou * d * s * (1.0 - s);
        for j in 0..4 {
            grads[q].bbox[j] -= w.iou * d * dt[j];
        }
    }
    for &(g, q) in &matching {
        let b = out[q].bbox.to_array();
        let gb = gt_box(&gts[g], cfg).to_array();
        for j in 0..4 {
            rep.iou_term += (b[j] - gb[j]).abs() / n;
            grads[q].bbox[j] += w.iou * (b[j] - gb[j]).signum() / n;
        }
    }

    rep.total = w.mse * rep.mse_term + w.rle * rep.rle_term + w.class * rep.class_term + w.iou * rep.iou_term;
    if !rep.total.is_finite() {
        return Err(Error::Evaluation("non-finite loss".into()));
    }
    Ok((rep, grads, matching))
}

pub fn gt_box(g: &Keypoint, cfg: &LossConfig) -> Box {
    Box::new(g.x, g.y, cfg.gt_box, cfg.gt_box)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_query(rng: &mut ChaCha8Rng, classes: usize) -> QueryOutput {
        QueryOutput {
            class_logits: (0..=classes).map(|_| rng.random_range(-2.0..2.0)).collect(),
            x: rng.random_range(0.05..0.95),
            y: rng.random_range(0.05..0.95),
            sigma: [rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)],
            bbox: Box::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
            ),
            quality_logit: rng.random_range(-2.0..2.0),
        }
    }

    fn random_gts(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Keypoint> {
        (0..n)
            .map(|i| Keypoint {
                class_id: i % classes,
                x: rng.random_range(0.1..0.9),
                y: rng.random_range(0.1..0.9),
            })
            .collect()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse_loss(&[0.0], &[1.0, 1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..10).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random()).collect();
        let mut s = 0.0;
        for i in 0..10 {
            s += (a[i] - b[i]).powi(2);
        }
        assert!((mse_loss(&a, &b).unwrap() - s / 10.0).abs() < 1e-15);
    }

    #[test]
    fn rle_examples() {
        assert_eq!(rle_loss((0.3, 0.4), (0.5, 0.5), (0.3, 0.4)).unwrap(), 0.0);
        let a = rle_loss((0.3, 0.4), (0.2, 0.3), (0.3, 0.4)).unwrap();
        let b = rle_loss((0.3, 0.4), (0.4, 0.6), (0.3, 0.4)).unwrap();
        assert!((b - a - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(matches!(rle_loss((0.0, 0.0), (0.0, 1.0), (0.0, 0.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn rle_minimum_at_residual() {
        for r in [0.01, 0.1, 1.0] {
            let step = r / 1000.0;
            let (mut best, mut at) = (f64::INFINITY, 0.0);
            let mut prev = f64::INFINITY;
            let mut descending = true;
            for i in 1..=5000 {
                let s = i as f64 * step;
                let v = rle_loss((0.0, 0.0), (s, 1.0), (r, 0.0)).unwrap();
                if v < best {
                    best = v;
                    at = s;
                }
                if v > prev {
                    descending = false;
                } else {
                    assert!(descending, "loss not unimodal in sigma");
                }
                prev = v;
            }
            assert!((at - r).abs() <= step, "r={r} argmin {at}");
        }
    }

    #[test]
    fn exact_prediction_leaves_class_term() {
        let cfg = LossConfig::default();
        let gt = Keypoint { class_id: 1, x: 0.4, y: 0.6 };
        let q = QueryOutput {
            class_logits: vec![0.0, 3.0, -1.0],
            x: 0.4,
            y: 0.6,
            sigma: [0.5, 0.5],
            bbox: gt_box(&gt, &cfg),
            quality_logit: 60.0,
        };
        let (rep, _, m) = supervise(&[q], &[gt], &cfg, None).unwrap();
        assert_eq!(m, vec![(0, 0)]);
        assert_eq!((rep.mse_term, rep.rle_term, rep.iou_term), (0.0, 0.0, 0.0));
        assert_eq!(rep.total, rep.class_term);
    }

    /// Reference: enumerate every injective map from ground truths to
    /// queries and keep the cheapest.
    fn brute_matching(out: &[QueryOutput], gts: &[Keypoint], cfg: &LossConfig) -> Matching {
        fn rec(costs: &[Vec<f64>], g: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            if g == costs.len() {
                let c: f64 = cur.iter().enumerate().map(|(i, &q)| costs[i][q]).sum();
                if c < best.0 {
                    *best = (c, cur.clone());
                }
                return;
            }
            for q in 0..used.len() {
                if !used[q] {
                    used[q] = true;
                    cur.push(q);
                    rec(costs, g + 1, used, cur, best);
                    cur.pop();
                    used[q] = false;
                }
            }
        }
        let costs: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| {
                out.iter()
                    .map(|o| {
                        let p = probabilities(o)[g.class_id];
                        -p + cfg.match_distance * ((o.x - g.x).powi(2) + (o.y - g.y).powi(2)).sqrt()
                    })
                    .collect()
            })
            .collect();
        let mut best = (f64::INFINITY, vec![]);
        rec(&costs, 0, &mut vec![false; out.len()], &mut vec![], &mut best);
        best.1.into_iter().enumerate().collect()
    }

    #[test]
    fn matching_agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = LossConfig::default();
        for _ in 0..100 {
            let out: Vec<QueryOutput> = (0..3).map(|_| random_query(&mut rng, 3)).collect();
            let gts = random_gts(&mut rng, 2, 3);
            assert_eq!(match_queries(&out, &gts, &cfg).unwrap(), brute_matching(&out, &gts, &cfg));
        }
    }

    #[test]
    fn total_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let out: Vec<QueryOutput> = (0..6).map(|_| random_query(&mut rng, 4)).collect();
            let gts = random_gts(&mut rng, 4, 4);
            let (base, _, _) = supervise(&out, &gts, &cfg, None).unwrap();
            let mut out2 = out.clone();
            out2.reverse();
            out2.swap(0, 3);
            let mut gts2 = gts.clone();
            gts2.rotate_left(1);
            let (other, _, _) = supervise(&out2, &gts2, &cfg, None).unwrap();
            assert!((base.total - other.total).abs() < 1e-12);
        }
    }

    #[test]
    fn more_truths_than_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out: Vec<QueryOutput> = (0..2).map(|_| random_query(&mut rng, 5)).collect();
        let gts = random_gts(&mut rng, 5, 5);
        let (rep, _, m) = supervise(&out, &gts, &LossConfig::default(), None).unwrap();
        assert_eq!(m.len(), 2);
        assert!(rep.total.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        let out: Vec<QueryOutput> = (0..4).map(|_| random_query(&mut rng, 3)).collect();
        let gts = random_gts(&mut rng, 2, 3);
        let (_, grads, m) = supervise(&out, &gts, &cfg, None).unwrap();
        let f = |o: &[QueryOutput]| supervise(o, &gts, &cfg, Some(&m)).unwrap().0.total;
        let eps = 1e-6;
        let check = |analytic: f64, mut set: Box2| {
            let mut p = out.clone();
            let mut q = out.clone();
            set(&mut p, eps);
            set(&mut q, -eps);
            let numeric = (f(&p) - f(&q)) / (2.0 * eps);
            assert!((numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "{numeric} vs {analytic}");
        };
        type Box2 = std::boxed::Box<dyn FnMut(&mut Vec<QueryOutput>, f64)>;
        for q in 0..4 {
            for c in 0..4 {
                check(grads[q].class_logits[c], std::boxed::Box::new(move |o, e| o[q].class_logits[c] += e));
            }
            check(grads[q].xy[0], std::boxed::Box::new(move |o, e| o[q].x += e));
            check(grads[q].xy[1], std::boxed::Box::new(move |o, e| o[q].y += e));
            for a in 0..2 {
                check(grads[q].sigma[a], std::boxed::Box::new(move |o, e| o[q].sigma[a] += e));
            }
            check(grads[q].quality_logit, std::boxed::Box::new(move |o, e| o[q].quality_logit += e));
            check(grads[q].bbox[0], std::boxed::Box::new(move |o, e| o[q].bbox.cx += e));
            check(grads[q].bbox[1], std::boxed::Box::new(move |o, e| o[q].bbox.cy += e));
            check(grads[q].bbox[2], std::boxed::Box::new(move |o, e| o[q].bbox.w += e));
            check(grads[q].bbox[3], std::boxed::Box::new(move |o, e| o[q].bbox.h += e));
        }
    }
}
