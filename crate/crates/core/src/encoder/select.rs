//! Per-token box/quality prediction and top-k query selection.

use super::boxes::Box;
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numerics::ops::{logit, sigmoid, LayerNormCache};
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamStore};

/// Side length of the prior box around every token, in normalized units.
pub const PRIOR_BOX: f64 = 0.08;

/// Indices of the `k` largest scores, highest first. Equal scores keep
/// their original order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::param(format!("cannot select {k} of {} tokens", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score in query selection".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Raster-ordered tokens of all levels, fine to coarse.
#[derive(Clone, Debug)]
pub struct FlatTokens {
    pub features: Tensor,
    /// Normalized cell centers.
    pub centers: Vec<(f64, f64)>,
    /// Token count of each level.
    pub counts: [usize; 3],
}

pub fn flatten(p: &FeaturePyramid) -> Result<FlatTokens> {
    let d = p.levels[0].channels();
    let total = p.total_tokens();
    let mut data = Vec::with_capacity(total * d);
    let mut centers = Vec::with_capacity(total);
    for l in &p.levels {
        if l.channels() != d {
            return Err(Error::dim("pyramid levels differ in width"));
        }
        data.extend_from_slice(l.tokens.data());
        for r in 0..l.h {
            for c in 0..l.w {
                centers.push(((c as f64 + 0.5) / l.w as f64, (r as f64 + 0.5) / l.h as f64));
            }
        }
    }
    Ok(FlatTokens {
        features: Tensor::new(vec![total, d], data)?,
        centers,
        counts: p.levels.clone().map(|l| l.h * l.w),
    })
}

/// Split a flat `[total, d]` gradient back into per-level tables.
pub fn unflatten(g: &Tensor, counts: [usize; 3]) -> Result<[Tensor; 3]> {
    let d = g.dims2()?.1;
    let mut start = 0;
    let mut out = Vec::with_capacity(3);
    for n in counts {
        out.push(Tensor::new(vec![n, d], g.data()[start * d..(start + n) * d].to_vec())?);
        start += n;
    }
    Ok(out.try_into().expect("three levels"))
}

/// Selected decoder queries, ordered by descending score.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub indices: Vec<usize>,
    /// `[k, d]`
    pub features: Tensor,
    pub boxes: Vec<Box>,
    /// Quality logits; the score is their sigmoid.
    pub score_logits: Vec<f64>,
    pub centers: Vec<(f64, f64)>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.score_logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Auxiliary head that scores every token and proposes a box around it.
#[derive(Clone, Debug)]
pub struct QuerySelector {
    pub norm: LayerNorm,
    pub score: Linear,
    pub bbox: Linear,
}

#[derive(Clone, Debug)]
pub struct SelectorCache {
    flat: FlatTokens,
    norm: LayerNormCache,
    normed: Tensor,
    /// `[total, 4]` box after the sigmoid.
    boxes: Tensor,
}

/// Gradients flowing back into a [`QuerySet`].
#[derive(Clone, Debug)]
pub struct QueryGrads {
    pub features: Tensor,
    pub boxes: Vec<[f64; 4]>,
    pub score_logits: Vec<f64>,
}

impl QueryGrads {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            features: Tensor::zeros(vec![k, d]),
            boxes: vec![[0.0; 4]; k],
            score_logits: vec![0.0; k],
        }
    }
}

impl QuerySelector {
    pub fn new(pb: &mut ParamBuilder<'_>, d: usize) -> Self {
        pb.scoped("select", |pb| Self {
            norm: LayerNorm::new(pb, "norm", d),
            score: Linear::new(pb, "score", d, 1, true, 0.1),
            bbox: Linear::new(pb, "bbox", d, 4, true, 0.1),
        })
    }

    /// Score and box every token, then keep the best `k`.
    pub fn forward(&self, ps: &ParamStore, enc: &FeaturePyramid, k: usize) -> Result<(QuerySet, SelectorCache)> {
        self.forward_with(ps, enc, k, None)
    }

    /// As [`forward`](Self::forward), optionally keeping a given selection
    /// instead of ranking.
    pub fn forward_with(
        &self,
        ps: &ParamStore,
        enc: &FeaturePyramid,
        k: usize,
        forced: Option<&[usize]>,
    ) -> Result<(QuerySet, SelectorCache)> {
        let flat = flatten(enc)?;
        let total = flat.centers.len();
        if k > total {
            return Err(Error::param(format!("cannot select {k} of {total} tokens")));
        }
        let (normed, norm) = self.norm.forward(ps, &flat.features)?;
        let logits = self.score.forward(ps, &normed)?;
        let raw = self.bbox.forward(ps, &normed)?;
        let prior = logit(PRIOR_BOX);
        let mut boxes = Tensor::zeros(vec![total, 4]);
        for i in 0..total {
            let (cx, cy) = flat.centers[i];
            let refs = [logit(cx), logit(cy), prior, prior];
            for j in 0..4 {
                boxes.data_mut()[i * 4 + j] = sigmoid(raw.get2(i, j) + refs[j]);
            }
        }
        let indices = match forced {
            Some(f) if f.len() != k || f.iter().any(|&i| i >= total) => {
                return Err(Error::param("forced selection does not fit the token set"));
            }
            Some(f) => f.to_vec(),
            None => top_k(logits.data(), k)?,
        };
        let d = flat.features.shape()[1];
        let mut feats = Vec::with_capacity(k * d);
        for &i in &indices {
            feats.extend_from_slice(flat.features.row(i));
        }
        let qs = QuerySet {
            features: Tensor::new(vec![k, d], feats)?,
            boxes: indices
                .iter()
                .map(|&i| {
                    let b = boxes.row(i);
                    Box::new(b[0], b[1], b[2], b[3])
                })
                .collect(),
            score_logits: indices.iter().map(|&i| logits.data()[i]).collect(),
            centers: indices.iter().map(|&i| flat.centers[i]).collect(),
            indices,
        };
        Ok((
            qs,
            SelectorCache {
                flat,
                norm,
                normed,
                boxes,
            },
        ))
    }

    /// Returns per-level gradients of the encoded tokens.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &SelectorCache,
        qs: &QuerySet,
        g: &QueryGrads,
        grads: &mut Grads,
    ) -> Result<[Tensor; 3]> {
        let total = cache.flat.centers.len();
        let d = cache.flat.features.shape()[1];
        let mut g_feat = Tensor::zeros(vec![total, d]);
        let mut g_logit = Tensor::zeros(vec![total, 1]);
        let mut g_raw = Tensor::zeros(vec![total, 4]);
        for (q, &i) in qs.indices.iter().enumerate() {
            for (a, b) in g_feat.row_mut(i).iter_mut().zip(g.features.row(q)) {
                *a += b;
            }
            g_logit.data_mut()[i] += g.score_logits[q];
            for j in 0..4 {
                let s = cache.boxes.get2(i, j);
                g_raw.data_mut()[i * 4 + j] += g.boxes[q][j] * s * (1.0 - s);
            }
        }
        let mut g_normed = self.score.backward(ps, &cache.normed, &g_logit, grads)?;
        g_normed.add_assign(&self.bbox.backward(ps, &cache.normed, &g_raw, grads)?)?;
        g_feat.add_assign(&self.norm.backward(ps, &cache.norm, &g_normed, grads)?)?;
        unflatten(&g_feat, cache.flat.counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_and_degenerate_cases() {
        assert_eq!(top_k(&[0.1, 0.9], 1).unwrap(), vec![1]);
        assert_eq!(top_k(&[0.3, 0.9, 0.1, 0.5], 4).unwrap(), vec![1, 3, 0, 2]);
        assert!(matches!(top_k(&[0.1], 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k(&[0.5, 0.7, 0.5, 0.7], 3).unwrap(), vec![1, 3, 0]);
    }

    proptest! {
        #[test]
        fn matches_full_sort(scores in prop::collection::vec(0u8..6, 1..40), k_frac in 0.0..=1.0f64) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 5.0).collect();
            let k = ((s.len() as f64) * k_frac) as usize;
            // Oracle: pair each score with its index and sort the pairs.
            let mut pairs: Vec<(f64, usize)> = s.iter().cloned().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = pairs.iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(top_k(&s, k).unwrap(), expect);
        }

        #[test]
        fn permutation_invariant_selection(scores in prop::collection::vec(0.0..1.0f64, 2..30), seed in any::<u64>()) {
            let n = scores.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed | 1;
            for i in (1..n).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                perm.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let permuted: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
            let k = n / 2;
            let mut a: Vec<usize> = top_k(&scores, k).unwrap();
            let mut b: Vec<usize> = top_k(&permuted, k).unwrap().into_iter().map(|i| perm[i]).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
