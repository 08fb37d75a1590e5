//! Query decoder and the per-query class / coordinate / scale head.

use super::dsnt::{cell_centers, soft_argmax_backward, soft_argmax_flat};
use super::loss::QueryOutputGrad;
use super::QueryOutput;
use crate::backbone::FeatureMap;
use crate::encoder::select::{QueryGrads, QuerySet};
use crate::error::{Error, Result};
use crate::layers::{
    grid_encoding, sinusoid_2d, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, Linear, MultiHeadAttention,
};
use crate::numerics::ops::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softplus, softplus_grad, LayerNormCache};
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamStore};

/// Pre-norm decoder layer: self-attention among queries, cross-attention
/// into the memory, then a feed-forward network, each with a residual.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerCache {
    n1: LayerNormCache,
    a1: AttentionCache,
    n2: LayerNormCache,
    a2: AttentionCache,
    n3: LayerNormCache,
    f: FeedForwardCache,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize, hidden: usize, out_gain: f64) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                self_norm: LayerNorm::new(pb, "self_norm", d),
                self_attn: MultiHeadAttention::new(pb, "self_attn", d, heads, out_gain)?,
                cross_norm: LayerNorm::new(pb, "cross_norm", d),
                cross_attn: MultiHeadAttention::new(pb, "cross_attn", d, heads, out_gain)?,
                ffn_norm: LayerNorm::new(pb, "ffn_norm", d),
                ffn: FeedForward::new(pb, "ffn", d, hidden, out_gain),
            })
        })
    }

    /// Cross-attention sublayer alone: `x + MHA(LN(x) + pos, mem + mem_pos, mem)`.
    pub fn cross(&self, ps: &ParamStore, x: &Tensor, pos: &Tensor, mem: &Tensor, mem_key: &Tensor) -> Result<(Tensor, LayerNormCache, AttentionCache)> {
        let (n, nc) = self.cross_norm.forward(ps, x)?;
        let (a, ac) = self.cross_attn.forward(ps, &n.add(pos)?, mem_key, mem)?;
        Ok((x.add(&a)?, nc, ac))
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, pos: &Tensor, mem: &Tensor, mem_key: &Tensor) -> Result<(Tensor, DecoderLayerCache)> {
        let (n, n1) = self.self_norm.forward(ps, x)?;
        let qk = n.add(pos)?;
        let (a, a1) = self.self_attn.forward(ps, &qk, &qk, &n)?;
        let x1 = x.add(&a)?;
        let (x2, n2, a2) = self.cross(ps, &x1, pos, mem, mem_key)?;
        let (n, n3) = self.ffn_norm.forward(ps, &x2)?;
        let (f, fc) = self.ffn.forward(ps, &n)?;
        Ok((x2.add(&f)?, DecoderLayerCache { n1, a1, n2, a2, n3, f: fc }))
    }

    /// Returns gradients of the input, of the memory values and of the
    /// memory keys.
    pub fn backward(&self, ps: &ParamStore, c: &DecoderLayerCache, g: &Tensor, grads: &mut Grads) -> Result<(Tensor, Tensor, Tensor)> {
        let gn = self.ffn.backward(ps, &c.f, g, grads)?;
        let mut g2 = self.ffn_norm.backward(ps, &c.n3, &gn, grads)?;
        g2.add_assign(g)?;
        let (gq, gk, gv) = self.cross_attn.backward(ps, &c.a2, &g2, grads)?;
        let mut g1 = self.cross_norm.backward(ps, &c.n2, &gq, grads)?;
        g1.add_assign(&g2)?;
        let (gq, gk1, gv1) = self.self_attn.backward(ps, &c.a1, &g1, grads)?;
        let gn = gq.add(&gk1)?.add(&gv1)?;
        let mut gx = self.self_norm.backward(ps, &c.n1, &gn, grads)?;
        gx.add_assign(&g1)?;
        Ok((gx, gv, gk))
    }
}

/// Decoder stack plus output projections.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub mem_norm: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
    pub class: Linear,
    pub response: Linear,
    pub sigma: Linear,
    pub num_classes: usize,
    pub sigma_floor: f64,
    pub d_model: usize,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    mem_norm: LayerNormCache,
    mem_key: Tensor,
    layers: Vec<DecoderLayerCache>,
    decoded: Tensor,
    out_norm: LayerNormCache,
    feats: Tensor,
    resp_q: Tensor,
    probs: Vec<Vec<f64>>,
    centers: Vec<(f64, f64)>,
    sigma_pre: Tensor,
}

/// Positional encoding of each query's reference point, `[k, d]`.
pub fn query_positions(qs: &QuerySet, d: usize) -> Tensor {
    let mut pos = Tensor::zeros(vec![qs.len(), d]);
    for (i, &(x, y)) in qs.centers.iter().enumerate() {
        sinusoid_2d(x, y, d, pos.row_mut(i));
    }
    pos
}

impl PredictionHead {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        d: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        num_classes: usize,
        sigma_floor: f64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::param("at least one keypoint class is required"));
        }
        pb.scoped("head", |pb| {
            let gain = 1.0 / ((2 * layers).max(1) as f64).sqrt();
            let layers = (0..layers)
                .map(|i| DecoderLayer::new(pb, &format!("layer{i}"), d, heads, hidden, gain))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                mem_norm: LayerNorm::new(pb, "mem_norm", d),
                layers,
                out_norm: LayerNorm::new(pb, "out_norm", d),
                class: Linear::new(pb, "class", d, num_classes + 1, true, 0.5),
                response: Linear::new(pb, "response", d, d, false, 1.0),
                sigma: Linear::new(pb, "sigma", d, 2, true, 0.1),
                num_classes,
                sigma_floor,
                d_model: d,
            })
        })
    }

    /// Decoder stack alone; `memory` is the finest encoded level.
    pub fn decode(&self, ps: &ParamStore, qs: &QuerySet, memory: &FeatureMap) -> Result<Tensor> {
        let (mem, _) = self.mem_norm.forward(ps, &memory.tokens)?;
        let mem_key = mem.add(&grid_encoding(memory.h, memory.w, self.d_model))?;
        let pos = query_positions(qs, self.d_model);
        let mut x = qs.features.clone();
        for l in &self.layers {
            x = l.forward(ps, &x, &pos, &mem, &mem_key)?.0;
        }
        Ok(x)
    }

    pub fn forward(&self, ps: &ParamStore, qs: &QuerySet, memory: &FeatureMap) -> Result<(Vec<QueryOutput>, HeadCache)> {
        let d = self.d_model;
        let (mem, mem_norm) = self.mem_norm.forward(ps, &memory.tokens)?;
        let mem_key = mem.add(&grid_encoding(memory.h, memory.w, d))?;
        let pos = query_positions(qs, d);
        let mut x = qs.features.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward(ps, &x, &pos, &mem, &mem_key)?;
            caches.push(c);
            x = y;
        }
        let (feats, out_norm) = self.out_norm.forward(ps, &x)?;
        let logits = self.class.forward(ps, &feats)?;
        let resp_q = self.response.forward(ps, &feats)?;
        let sigma_pre = self.sigma.forward(ps, &feats)?;
        let k = qs.len();
        let m = memory.h * memory.w;
        let mut resp = vec![0.0; k * m];
        gemm_nt_acc(k, d, m, resp_q.data(), mem_key.data(), &mut resp);
        let scale = 1.0 / (d as f64).sqrt();
        let centers = cell_centers(memory.h, memory.w);
        let mut probs = Vec::with_capacity(k);
        let mut outs = Vec::with_capacity(k);
        for q in 0..k {
            let mut p: Vec<f64> = resp[q * m..(q + 1) * m].iter().map(|v| v * scale).collect();
            let (x, y) = soft_argmax_flat(&mut p, &centers);
            probs.push(p);
            outs.push(QueryOutput {
                class_logits: logits.row(q).to_vec(),
                x,
                y,
                sigma: [
                    softplus(sigma_pre.get2(q, 0)) + self.sigma_floor,
                    softplus(sigma_pre.get2(q, 1)) + self.sigma_floor,
                ],
                bbox: qs.boxes[q],
                quality_logit: qs.score_logits[q],
            });
        }
        for o in &outs {
            if !o.class_logits.iter().all(|v| v.is_finite()) || !o.x.is_finite() || !o.y.is_finite() {
                return Err(Error::Evaluation("non-finite head output".into()));
            }
        }
        Ok((
            outs,
            HeadCache {
                mem_norm,
                mem_key,
                layers: caches,
                decoded: x,
                out_norm,
                feats,
                resp_q,
                probs,
                centers,
                sigma_pre,
            },
        ))
    }

    /// Returns gradients for the query set and for the memory level tokens.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &HeadCache,
        outs: &[QueryOutput],
        g: &[QueryOutputGrad],
        grads: &mut Grads,
    ) -> Result<(QueryGrads, Tensor)> {
        let d = self.d_model;
        let k = outs.len();
        let m = cache.centers.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut g_logits = Tensor::zeros(vec![k, self.num_classes + 1]);
        let mut g_sigma = Tensor::zeros(vec![k, 2]);
        let mut g_resp = vec![0.0; k * m];
        let mut qg = QueryGrads::zeros(k, d);
        for q in 0..k {
            g_logits.row_mut(q).copy_from_slice(&g[q].class_logits);
            for a in 0..2 {
                g_sigma.data_mut()[q * 2 + a] = g[q].sigma[a] * softplus_grad(cache.sigma_pre.get2(q, a));
            }
            let gr = soft_argmax_backward(&cache.probs[q], &cache.centers, (outs[q].x, outs[q].y), (g[q].xy[0], g[q].xy[1]));
            for (dst, v) in g_resp[q * m..(q + 1) * m].iter_mut().zip(gr) {
                *dst = v * scale;
            }
            qg.boxes[q] = g[q].bbox;
            qg.score_logits[q] = g[q].quality_logit;
        }
        let mut g_rq = vec![0.0; k * d];
        gemm_acc(k, m, d, &g_resp, cache.mem_key.data(), &mut g_rq);
        let mut g_mem_key = Tensor::zeros(vec![m, d]);
        gemm_tn_acc(k, m, d, &g_resp, cache.resp_q.data(), g_mem_key.data_mut());
        let g_rq = Tensor::new(vec![k, d], g_rq)?;
        let mut g_feats = self.class.backward(ps, &cache.feats, &g_logits, grads)?;
        g_feats.add_assign(&self.response.backward(ps, &cache.feats, &g_rq, grads)?)?;
        g_feats.add_assign(&self.sigma.backward(ps, &cache.feats, &g_sigma, grads)?)?;
        let mut gx = self.out_norm.backward(ps, &cache.out_norm, &g_feats, grads)?;
        debug_assert_eq!(gx.shape(), cache.decoded.shape());
        let mut g_mem = Tensor::zeros(vec![m, d]);
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (g_in, gv, gk) = l.backward(ps, c, &gx, grads)?;
            g_mem.add_assign(&gv)?;
            g_mem_key.add_assign(&gk)?;
            gx = g_in;
        }
        // The key table is the memory plus a constant encoding.
        g_mem.add_assign(&g_mem_key)?;
        let g_level = self.mem_norm.backward(ps, &cache.mem_norm, &g_mem, grads)?;
        qg.features = gx;
        Ok((qg, g_level))
    }
}
