//! Hybrid encoder: self-attention within the coarsest level, then linear
//! top-down and bottom-up fusion across levels.

pub mod boxes;
pub mod select;

pub use boxes::{iou, iou_with_grad, Box};
pub use select::{top_k, QueryGrads, QuerySelector, QuerySet, SelectorCache};

use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::layers::{grid_encoding, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::ops::LayerNormCache;
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamStore};

/// Encoder output; same geometry as the backbone pyramid.
pub type EncodedPyramid = FeaturePyramid;

/// Pre-norm self-attention sublayer with 2-D positions added to queries
/// and keys: `x + MHA(LN(x) + pe, LN(x) + pe, LN(x))`.
#[derive(Clone, Debug)]
pub struct IntraScaleAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct IntraScaleCache {
    norm: LayerNormCache,
    attn: AttentionCache,
}

impl IntraScaleCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl IntraScaleAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, d: usize, heads: usize) -> Result<Self> {
        pb.scoped("intra", |pb| {
            Ok(Self {
                norm: LayerNorm::new(pb, "norm", d),
                attn: MultiHeadAttention::new(pb, "attn", d, heads, 0.5)?,
            })
        })
    }

    pub fn forward(&self, ps: &ParamStore, level: &FeatureMap) -> Result<(Tensor, IntraScaleCache)> {
        let x = &level.tokens;
        x.ensure_finite("attention input")?;
        let (n, norm) = self.norm.forward(ps, x)?;
        let qk = n.add(&grid_encoding(level.h, level.w, level.channels()))?;
        let (a, attn) = self.attn.forward(ps, &qk, &qk, &n)?;
        Ok((x.add(&a)?, IntraScaleCache { norm, attn }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &IntraScaleCache, g: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let (gq, gk, gv) = self.attn.backward(ps, &cache.attn, g, grads)?;
        let gn = gq.add(&gk)?.add(&gv)?;
        let mut gx = self.norm.backward(ps, &cache.norm, &gn, grads)?;
        gx.add_assign(g)?;
        Ok(gx)
    }
}

/// Nearest-neighbour ×2 upsampling of an `h×w` token grid.
pub fn upsample(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = x.dims2()?.1;
    let mut out = Tensor::zeros(vec![4 * h * w, d]);
    for r in 0..2 * h {
        for c in 0..2 * w {
            out.row_mut(r * 2 * w + c).copy_from_slice(x.row((r / 2) * w + c / 2));
        }
    }
    Ok(out)
}

pub fn upsample_backward(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = g.dims2()?.1;
    let mut out = Tensor::zeros(vec![h * w, d]);
    for r in 0..2 * h {
        for c in 0..2 * w {
            let src = g.row(r * 2 * w + c);
            for (a, b) in out.row_mut((r / 2) * w + c / 2).iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// 2×2 average pooling of an `h×w` token grid.
pub fn downsample(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = x.dims2()?.1;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![oh * ow, d]);
    for r in 0..h {
        for c in 0..w {
            let src = x.row(r * w + c);
            for (a, b) in out.row_mut((r / 2) * ow + c / 2).iter_mut().zip(src) {
                *a += 0.25 * b;
            }
        }
    }
    Ok(out)
}

pub fn downsample_backward(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = g.dims2()?.1;
    let ow = w / 2;
    let mut out = Tensor::zeros(vec![h * w, d]);
    for r in 0..h {
        for c in 0..w {
            let src = g.row((r / 2) * ow + c / 2);
            for (a, b) in out.row_mut(r * w + c).iter_mut().zip(src) {
                *a = 0.25 * b;
            }
        }
    }
    Ok(out)
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if n != nb {
        return Err(Error::dim("fused tables differ in length"));
    }
    let mut out = Vec::with_capacity(n * (da + db));
    for r in 0..n {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Tensor::new(vec![n, da + db], out)
}

fn split_cols(g: &Tensor, da: usize) -> Result<(Tensor, Tensor)> {
    let (n, d) = g.dims2()?;
    let db = d - da;
    let mut a = Vec::with_capacity(n * da);
    let mut b = Vec::with_capacity(n * db);
    for r in 0..n {
        a.extend_from_slice(&g.row(r)[..da]);
        b.extend_from_slice(&g.row(r)[da..]);
    }
    Ok((Tensor::new(vec![n, da], a)?, Tensor::new(vec![n, db], b)?))
}

/// `[a ; b]·W + bias` with `W` initialized to `[I ; noise]`.
#[derive(Clone, Debug)]
pub struct Fuse {
    pub proj: Linear,
}

impl Fuse {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, noise: f64) -> Self {
        let proj = Linear::new(pb, name, 2 * d, d, true, noise * ((2 * d) as f64).sqrt());
        let w = pb.store.get_mut(proj.w).data_mut();
        for i in 0..d {
            for j in 0..d {
                w[i * d + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        Self { proj }
    }

    /// Overwrite with the exact `[I ; 0]` map.
    pub fn set_identity(&self, ps: &mut ParamStore) {
        let d = self.proj.d_out;
        let w = ps.get_mut(self.proj.w).data_mut();
        for (k, v) in w.iter_mut().enumerate() {
            *v = if k / d == k % d { 1.0 } else { 0.0 };
        }
        if let Some(b) = self.proj.b {
            ps.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn forward(&self, ps: &ParamStore, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let cat = concat_cols(a, b)?;
        Ok((self.proj.forward(ps, &cat)?, cat))
    }

    fn backward(&self, ps: &ParamStore, cat: &Tensor, g: &Tensor, grads: &mut Grads) -> Result<(Tensor, Tensor)> {
        let gc = self.proj.backward(ps, cat, g, grads)?;
        split_cols(&gc, self.proj.d_out)
    }
}

#[derive(Clone, Debug)]
pub struct HybridEncoder {
    pub intra: IntraScaleAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    /// Coarse-to-middle, then middle-to-fine.
    pub top_down: [Fuse; 2],
    /// Fine-to-middle, then middle-to-coarse.
    pub bottom_up: [Fuse; 2],
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    geometry: [(usize, usize); 3],
    intra: IntraScaleCache,
    ffn_norm: LayerNormCache,
    ffn: FeedForwardCache,
    cats: [Tensor; 4],
}

impl EncoderCache {
    pub fn intra(&self) -> &IntraScaleCache {
        &self.intra
    }
}

impl HybridEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, d: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        pb.scoped("encoder", |pb| {
            let noise = 0.1 / (d as f64).sqrt();
            Ok(Self {
                intra: IntraScaleAttention::new(pb, d, heads)?,
                ffn_norm: LayerNorm::new(pb, "ffn_norm", d),
                ffn: FeedForward::new(pb, "ffn", d, ffn_hidden, 0.5),
                top_down: [Fuse::new(pb, "td0", d, noise), Fuse::new(pb, "td1", d, noise)],
                bottom_up: [Fuse::new(pb, "bu0", d, noise), Fuse::new(pb, "bu1", d, noise)],
            })
        })
    }

    /// Attention then feed-forward on the coarsest level.
    fn coarse(&self, ps: &ParamStore, level: &FeatureMap) -> Result<(Tensor, IntraScaleCache, LayerNormCache, FeedForwardCache)> {
        let (a, intra) = self.intra.forward(ps, level)?;
        let (n, ffn_norm) = self.ffn_norm.forward(ps, &a)?;
        let (f, ffn) = self.ffn.forward(ps, &n)?;
        Ok((a.add(&f)?, intra, ffn_norm, ffn))
    }

    /// Attend within the coarsest level, then fuse across levels. With
    /// identity fuse weights the two finer levels pass through unchanged
    /// and the coarsest equals its attended form.
    pub fn forward(&self, ps: &ParamStore, p: &FeaturePyramid) -> Result<(EncodedPyramid, EncoderCache)> {
        let [l0, l1, l2] = &p.levels;
        for (fine, coarse) in [(l0, l1), (l1, l2)] {
            if fine.h != 2 * coarse.h || fine.w != 2 * coarse.w {
                return Err(Error::dim("pyramid levels must halve in size"));
            }
        }
        let (t2, intra, ffn_norm, ffn) = self.coarse(ps, l2)?;
        let (t1, c0) = self.top_down[0].forward(ps, &l1.tokens, &upsample(&t2, l2.h, l2.w)?)?;
        let (t0, c1) = self.top_down[1].forward(ps, &l0.tokens, &upsample(&t1, l1.h, l1.w)?)?;
        let o0 = t0;
        let (o1, c2) = self.bottom_up[0].forward(ps, &t1, &downsample(&o0, l0.h, l0.w)?)?;
        let (o2, c3) = self.bottom_up[1].forward(ps, &t2, &downsample(&o1, l1.h, l1.w)?)?;
        let mk = |l: &FeatureMap, tokens: Tensor| FeatureMap {
            h: l.h,
            w: l.w,
            stride: l.stride,
            tokens,
        };
        Ok((
            FeaturePyramid {
                levels: [mk(l0, o0), mk(l1, o1), mk(l2, o2)],
            },
            EncoderCache {
                geometry: [(l0.h, l0.w), (l1.h, l1.w), (l2.h, l2.w)],
                intra,
                ffn_norm,
                ffn,
                cats: [c0, c1, c2, c3],
            },
        ))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &EncoderCache, g: &[Tensor; 3], grads: &mut Grads) -> Result<[Tensor; 3]> {
        let [(h0, w0), (h1, w1), (h2, w2)] = cache.geometry;
        let [c0, c1, c2, c3] = &cache.cats;
        let mut g_o1 = g[1].clone();
        let mut g_o0 = g[0].clone();
        let (mut g_t2, g_down1) = self.bottom_up[1].backward(ps, c3, &g[2], grads)?;
        g_o1.add_assign(&downsample_backward(&g_down1, h1, w1)?)?;
        let (mut g_t1, g_down0) = self.bottom_up[0].backward(ps, c2, &g_o1, grads)?;
        g_o0.add_assign(&downsample_backward(&g_down0, h0, w0)?)?;
        let (g_l0, g_up1) = self.top_down[1].backward(ps, c1, &g_o0, grads)?;
        g_t1.add_assign(&upsample_backward(&g_up1, h1, w1)?)?;
        let (g_l1, g_up2) = self.top_down[0].backward(ps, c0, &g_t1, grads)?;
        g_t2.add_assign(&upsample_backward(&g_up2, h2, w2)?)?;
        let g_n = self.ffn.backward(ps, &cache.ffn, &g_t2, grads)?;
        let mut g_a = self.ffn_norm.backward(ps, &cache.ffn_norm, &g_n, grads)?;
        g_a.add_assign(&g_t2)?;
        let g_l2 = self.intra.backward(ps, &cache.intra, &g_a, grads)?;
        Ok([g_l0, g_l1, g_l2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check::{grad_check, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pyramid(d: usize, base: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        let level = |s: usize, rng: &mut ChaCha8Rng| {
            let n = base >> s;
            FeatureMap {
                h: n,
                w: n,
                stride: 8 << s,
                tokens: Tensor::from_fn(vec![n * n, d], |_| rng.random_range(-1.0..1.0)),
            }
        };
        FeaturePyramid {
            levels: [level(0, rng), level(1, rng), level(2, rng)],
        }
    }

    fn build(d: usize, seed: u64) -> (ParamStore, HybridEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let enc = HybridEncoder::new(&mut ParamBuilder::new(&mut ps, &mut rng), d, 2, 2 * d).unwrap();
        (ps, enc)
    }

    #[test]
    fn zero_value_projection_gives_residual() {
        let (mut ps, enc) = build(8, 1);
        let v = &enc.intra.attn.v;
        ps.get_mut(v.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let p = pyramid(8, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let (y, cache) = enc.intra.forward(&ps, &p.levels[2]).unwrap();
        assert_eq!(y, p.levels[2].tokens);
        for probs in &cache.attn.probs {
            for r in 0..probs.shape()[0] {
                assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let (ps, enc) = build(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let level = FeatureMap {
            h: 1,
            w: 1,
            stride: 32,
            tokens: Tensor::from_fn(vec![1, 8], |_| rng.random_range(-1.0..1.0)),
        };
        let (y, _) = enc.intra.forward(&ps, &level).unwrap();
        let (n, _) = enc.intra.norm.forward(&ps, &level.tokens).unwrap();
        let a = &enc.intra.attn;
        let expect = a.o.forward(&ps, &a.v.forward(&ps, &n).unwrap()).unwrap().add(&level.tokens).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn identity_fusion_passes_levels_through() {
        let (mut ps, enc) = build(8, 5);
        for f in enc.top_down.iter().chain(&enc.bottom_up) {
            f.set_identity(&mut ps);
        }
        let p = pyramid(8, 8, &mut ChaCha8Rng::seed_from_u64(6));
        let (out, _) = enc.forward(&ps, &p).unwrap();
        assert_eq!(out.levels[0], p.levels[0]);
        assert_eq!(out.levels[1], p.levels[1]);
        let (attended, ..) = enc.coarse(&ps, &p.levels[2]).unwrap();
        assert_eq!(out.levels[2].tokens, attended);
        for l in &out.levels {
            assert!(l.tokens.all_finite());
        }
    }

    #[test]
    fn shapes_are_preserved_and_coarse_reaches_fine() {
        let (ps, enc) = build(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for base in [4, 8, 16] {
            let p = pyramid(8, base, &mut rng);
            let (out, _) = enc.forward(&ps, &p).unwrap();
            for (a, b) in out.levels.iter().zip(&p.levels) {
                assert_eq!((a.h, a.w, a.tokens.shape()), (b.h, b.w, b.tokens.shape()));
            }
            let mut q = p.clone();
            q.levels[2].tokens.data_mut()[0] += 0.5;
            let (out2, _) = enc.forward(&ps, &q).unwrap();
            assert!(out.levels[0].tokens.max_abs_diff(&out2.levels[0].tokens) > 0.0);
        }
    }

    #[test]
    fn resampling_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(vec![6, 3], |_| rng.random_range(-1.0..1.0));
        let g = Tensor::from_fn(vec![24, 3], |_| rng.random_range(-1.0..1.0));
        let lhs = upsample(&x, 2, 3).unwrap().mul(&g).unwrap().sum();
        let rhs = x.mul(&upsample_backward(&g, 2, 3).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = downsample(&g, 4, 6).unwrap().mul(&x).unwrap().sum();
        let rhs = g.mul(&downsample_backward(&x, 4, 6).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn encoder_gradients() {
        let (ps, enc) = build(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = pyramid(8, 4, &mut rng);
        let weights: [Tensor; 3] = p
            .levels
            .clone()
            .map(|l| Tensor::from_fn(l.tokens.shape().to_vec(), |_| rng.random_range(-1.0..1.0)));
        let objective = |ps: &ParamStore, p: &FeaturePyramid| -> Result<f64> {
            let (o, _) = enc.forward(ps, p)?;
            let mut s = 0.0;
            for (l, w) in o.levels.iter().zip(&weights) {
                s += l.tokens.mul(w)?.sum();
            }
            Ok(s)
        };
        let (_, cache) = enc.forward(&ps, &p).unwrap();
        let mut grads = Grads::zeros_like(&ps);
        let g_in = enc.backward(&ps, &cache, &weights, &mut grads).unwrap();
        for (id, name, value) in ps.iter() {
            let mut local = ps.clone();
            let analytic = grads.get(id).clone();
            let r = grad_check(
                |v: &Tensor| {
                    *local.get_mut(id) = v.clone();
                    Ok((objective(&local, &p)?, analytic.clone()))
                },
                value,
                GradCheck::default(),
            )
            .unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
        for lvl in 0..3 {
            let r = grad_check(
                |v: &Tensor| {
                    let mut q = p.clone();
                    q.levels[lvl].tokens = v.clone();
                    Ok((objective(&ps, &q)?, g_in[lvl].clone()))
                },
                &p.levels[lvl].tokens,
                GradCheck::default(),
            )
            .unwrap();
            assert!(r.passed, "level {lvl}: {r:?}");
        }
    }

    #[test]
    fn selector_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamStore::new();
        let sel = QuerySelector::new(&mut ParamBuilder::new(&mut ps, &mut rng), 8);
        let p = pyramid(8, 4, &mut rng);
        let (qs, cache) = sel.forward(&ps, &p, 5).unwrap();
        let wf = Tensor::from_fn(vec![5, 8], |_| rng.random_range(-1.0..1.0));
        let wb: Vec<[f64; 4]> = (0..5).map(|_| [0.3, -0.7, 1.1, 0.4]).collect();
        let ws: Vec<f64> = (0..5).map(|i| i as f64 * 0.2 - 0.3).collect();
        // Objective over the fixed selection.
        let objective = |ps: &ParamStore, p: &FeaturePyramid| -> Result<f64> {
            let (q, _) = sel.forward(ps, p, 5)?;
            assert_eq!(q.indices, qs.indices);
            let mut s = q.features.mul(&wf)?.sum();
            for i in 0..5 {
                let b = q.boxes[i].to_array();
                s += (0..4).map(|j| b[j] * wb[i][j]).sum::<f64>() + q.score_logits[i] * ws[i];
            }
            Ok(s)
        };
        let g = QueryGrads {
            features: wf.clone(),
            boxes: wb.clone(),
            score_logits: ws.clone(),
        };
        let mut grads = Grads::zeros_like(&ps);
        let g_in = sel.backward(&ps, &cache, &qs, &g, &mut grads).unwrap();
        for (id, name, value) in ps.iter() {
            let mut local = ps.clone();
            let analytic = grads.get(id).clone();
            let r = grad_check(
                |v: &Tensor| {
                    *local.get_mut(id) = v.clone();
                    Ok((objective(&local, &p)?, analytic.clone()))
                },
                value,
                GradCheck::default(),
            )
            .unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
        let r = grad_check(
            |v: &Tensor| {
                let mut q = p.clone();
                q.levels[0].tokens = v.clone();
                Ok((objective(&ps, &q)?, g_in[0].clone()))
            },
            &p.levels[0].tokens,
            GradCheck::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn all_tokens_selected_in_score_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamStore::new();
        let sel = QuerySelector::new(&mut ParamBuilder::new(&mut ps, &mut rng), 4);
        let p = pyramid(4, 4, &mut rng);
        let total = p.total_tokens();
        let (qs, _) = sel.forward(&ps, &p, total).unwrap();
        let mut seen = qs.indices.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..total).collect::<Vec<_>>());
        assert!(qs.score_logits.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(sel.forward(&ps, &p, total + 1), Err(Error::Parameter(_))));
    }
}
