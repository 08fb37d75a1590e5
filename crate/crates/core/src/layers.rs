//! Parameterized building blocks with explicit backward passes.

use crate::error::{Error, Result};
use crate::numerics::ops::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, Activation, LayerNormCache};
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamId, ParamStore};

/// `y = x·W + b` over rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Gaussian init with standard deviation `gain / sqrt(d_in)`, zero bias.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Self {
        pb.scoped(name, |pb| {
            let w = pb.normal("w", vec![d_in, d_out], gain / (d_in as f64).sqrt());
            let b = bias.then(|| pb.constant("b", vec![d_out], 0.0));
            Self { w, b, d_in, d_out }
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (rows, d) = x.dims2()?;
        if d != self.d_in {
            return Err(Error::dim(format!("linear expects width {}, got {d}", self.d_in)));
        }
        let mut y = vec![0.0; rows * self.d_out];
        if let Some(b) = self.b {
            let b = ps.get(b).data();
            for r in 0..rows {
                y[r * self.d_out..(r + 1) * self.d_out].copy_from_slice(b);
            }
        }
        gemm_acc(rows, self.d_in, self.d_out, x.data(), ps.get(self.w).data(), &mut y);
        Tensor::new(vec![rows, self.d_out], y)
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&self, ps: &ParamStore, x: &Tensor, grad_out: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let rows = x.dims2()?.0;
        gemm_tn_acc(
            rows,
            self.d_in,
            self.d_out,
            x.data(),
            grad_out.data(),
            grads.get_mut(self.w).data_mut(),
        );
        if let Some(b) = self.b {
            let gb = grads.get_mut(b).data_mut();
            for r in 0..rows {
                for (g, v) in gb.iter_mut().zip(grad_out.row(r)) {
                    *g += v;
                }
            }
        }
        let mut gx = vec![0.0; rows * self.d_in];
        gemm_nt_acc(rows, self.d_out, self.d_in, grad_out.data(), ps.get(self.w).data(), &mut gx);
        Tensor::new(vec![rows, self.d_in], gx)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Self {
        pb.scoped(name, |pb| Self {
            gamma: pb.constant("gamma", vec![d], 1.0),
            beta: pb.constant("beta", vec![d], 0.0),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        ops::layer_norm(x, ps.get(self.gamma).data(), ps.get(self.beta).data())
    }

    pub fn backward(&self, ps: &ParamStore, cache: &LayerNormCache, grad_out: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let (gx, gg, gb) = ops::layer_norm_backward(cache, ps.get(self.gamma).data(), grad_out)?;
        grads.accumulate(self.gamma, &gg);
        grads.accumulate(self.beta, &gb);
        Ok(gx)
    }
}

/// Multi-head scaled dot-product attention with separate query, key and
/// value inputs. Positional terms are added by the caller.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    /// Per-head query, key and value matrices, each `[rows, d_head]`.
    qh: Vec<Vec<f64>>,
    kh: Vec<Vec<f64>>,
    vh: Vec<Vec<f64>>,
    /// Per-head attention weights `[tq, tk]`.
    pub probs: Vec<Tensor>,
    concat: Tensor,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_model: usize, heads: usize, out_gain: f64) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::param(format!("{heads} heads do not divide width {d_model}")));
        }
        Ok(pb.scoped(name, |pb| Self {
            q: Linear::new(pb, "q", d_model, d_model, true, 1.0),
            k: Linear::new(pb, "k", d_model, d_model, true, 1.0),
            v: Linear::new(pb, "v", d_model, d_model, true, 1.0),
            o: Linear::new(pb, "o", d_model, d_model, true, out_gain),
            heads,
            d_model,
        }))
    }

    fn split_heads(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let rows = x.shape()[0];
        let dh = self.d_model / self.heads;
        (0..self.heads)
            .map(|h| {
                let mut out = Vec::with_capacity(rows * dh);
                for r in 0..rows {
                    out.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
                }
                out
            })
            .collect()
    }

    fn merge_heads(&self, parts: &[Vec<f64>], rows: usize) -> Tensor {
        let dh = self.d_model / self.heads;
        let mut out = vec![0.0; rows * self.d_model];
        for (h, p) in parts.iter().enumerate() {
            for r in 0..rows {
                out[r * self.d_model + h * dh..r * self.d_model + (h + 1) * dh]
                    .copy_from_slice(&p[r * dh..(r + 1) * dh]);
            }
        }
        Tensor::new(vec![rows, self.d_model], out).expect("consistent layout")
    }

    pub fn forward(&self, ps: &ParamStore, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let tq = q_in.dims2()?.0;
        let tk = k_in.dims2()?.0;
        if v_in.dims2()?.0 != tk {
            return Err(Error::dim("attention keys and values differ in length"));
        }
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qh = self.split_heads(&self.q.forward(ps, q_in)?);
        let kh = self.split_heads(&self.k.forward(ps, k_in)?);
        let vh = self.split_heads(&self.v.forward(ps, v_in)?);
        let mut probs = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = vec![0.0; tq * tk];
            gemm_nt_acc(tq, dh, tk, &qh[h], &kh[h], &mut s);
            for r in 0..tq {
                let row = &mut s[r * tk..(r + 1) * tk];
                row.iter_mut().for_each(|v| *v *= scale);
                ops::softmax_slice(row);
            }
            let mut o = vec![0.0; tq * dh];
            gemm_acc(tq, tk, dh, &s, &vh[h], &mut o);
            probs.push(Tensor::new(vec![tq, tk], s)?);
            outs.push(o);
        }
        let concat = self.merge_heads(&outs, tq);
        let out = self.o.forward(ps, &concat)?;
        Ok((
            out,
            AttentionCache {
                q_in: q_in.clone(),
                k_in: k_in.clone(),
                v_in: v_in.clone(),
                qh,
                kh,
                vh,
                probs,
                concat,
            },
        ))
    }

    /// Returns gradients for the query, key and value inputs.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &AttentionCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let tq = cache.q_in.shape()[0];
        let tk = cache.k_in.shape()[0];
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let g_concat = self.o.backward(ps, &cache.concat, grad_out, grads)?;
        let g_heads = self.split_heads(&g_concat);
        let mut gq = Vec::with_capacity(self.heads);
        let mut gk = Vec::with_capacity(self.heads);
        let mut gv = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let p = cache.probs[h].data();
            let go = &g_heads[h];
            // dV = Pᵀ·dO, dP = dO·Vᵀ
            let mut dv = vec![0.0; tk * dh];
            gemm_tn_acc(tq, tk, dh, p, go, &mut dv);
            let mut dp = vec![0.0; tq * tk];
            gemm_nt_acc(tq, dh, tk, go, &cache.vh[h], &mut dp);
            for r in 0..tq {
                let pr = &p[r * tk..(r + 1) * tk];
                let dr = &mut dp[r * tk..(r + 1) * tk];
                let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - s) * scale;
                }
            }
            let mut dq = vec![0.0; tq * dh];
            gemm_acc(tq, tk, dh, &dp, &cache.kh[h], &mut dq);
            let mut dk = vec![0.0; tk * dh];
            gemm_tn_acc(tq, tk, dh, &dp, &cache.qh[h], &mut dk);
            gq.push(dq);
            gk.push(dk);
            gv.push(dv);
        }
        let gq = self.merge_heads(&gq, tq);
        let gk = self.merge_heads(&gk, tk);
        let gv = self.merge_heads(&gv, tk);
        let gq_in = self.q.backward(ps, &cache.q_in, &gq, grads)?;
        let gk_in = self.k.backward(ps, &cache.k_in, &gk, grads)?;
        let gv_in = self.v.backward(ps, &cache.v_in, &gv, grads)?;
        Ok((gq_in, gk_in, gv_in))
    }
}

/// Two-layer SiLU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, hidden: usize, out_gain: f64) -> Self {
        pb.scoped(name, |pb| Self {
            up: Linear::new(pb, "up", d, hidden, true, 1.0),
            down: Linear::new(pb, "down", hidden, d, true, out_gain),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let pre = self.up.forward(ps, x)?;
        let act = Activation::Silu.forward(&pre);
        let out = self.down.forward(ps, &act)?;
        Ok((out, FeedForwardCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &FeedForwardCache, grad_out: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let g_act = self.down.backward(ps, &cache.act, grad_out, grads)?;
        let g_pre = Activation::Silu.backward(&cache.pre, &g_act);
        self.up.backward(ps, &cache.x, &g_pre, grads)
    }
}

/// 2-D sinusoidal encoding of a normalized position `(x, y)` in `[0,1]²`.
///
/// Uses `d/4` frequencies spaced geometrically from 0.5 to 16 cycles per
/// unit; each contributes `sin, cos` of `x` and of `y`. Leftover
/// dimensions are zero.
pub fn sinusoid_2d(x: f64, y: f64, d: usize, out: &mut [f64]) {
    let n = d / 4;
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..n {
        let f = if n > 1 {
            0.5 * 32f64.powf(k as f64 / (n - 1) as f64)
        } else {
            1.0
        };
        let w = 2.0 * std::f64::consts::PI * f;
        out[4 * k] = (w * x).sin();
        out[4 * k + 1] = (w * x).cos();
        out[4 * k + 2] = (w * y).sin();
        out[4 * k + 3] = (w * y).cos();
    }
}

/// Encoding of every cell center of an `h×w` grid in raster order, `[h·w, d]`.
pub fn grid_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(vec![h * w, d]);
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let y = (r as f64 + 0.5) / h as f64;
            sinusoid_2d(x, y, d, out.row_mut(r * w + c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check::{grad_check, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Check gradients of `sum(w ⊙ f(params, x))` with respect to every
    /// parameter tensor in `ps`.
    fn check_all_params(
        ps: &ParamStore,
        f: impl Fn(&ParamStore) -> Tensor,
        b: impl Fn(&ParamStore, &Tensor, &mut Grads),
        w: &Tensor,
    ) {
        let mut grads = Grads::zeros_like(ps);
        b(ps, w, &mut grads);
        for (id, name, value) in ps.iter() {
            let mut local = ps.clone();
            let analytic = grads.get(id).clone();
            let r = grad_check(
                |p: &Tensor| {
                    *local.get_mut(id) = p.clone();
                    Ok((f(&local).mul(w)?.sum(), analytic.clone()))
                },
                value,
                GradCheck::default(),
            )
            .unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ParamBuilder::new(&mut ps, &mut rng), "l", 4, 3, true, 1.0);
        ps.get_mut(lin.b.unwrap()).data_mut()[1] = 0.3;
        let x = random(&[5, 4], &mut rng);
        let w = random(&[5, 3], &mut rng);
        check_all_params(
            &ps,
            |ps| lin.forward(ps, &x).unwrap(),
            |ps, w, g| {
                lin.backward(ps, &x, w, g).unwrap();
            },
            &w,
        );
        let mut g = Grads::zeros_like(&ps);
        let gx = lin.backward(&ps, &x, &w, &mut g).unwrap();
        let r = grad_check(
            |x: &Tensor| Ok((lin.forward(&ps, x)?.mul(&w)?.sum(), gx.clone())),
            &x,
            GradCheck::default(),
        )
        .unwrap();
        assert!(r.passed);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut ps, &mut rng), "a", 8, 2, 1.0).unwrap();
        let x = random(&[6, 8], &mut rng).scale(3.0);
        let (_, cache) = mha.forward(&ps, &x, &x, &x).unwrap();
        for p in &cache.probs {
            for r in 0..6 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut ps, &mut rng), "a", 8, 2, 1.0).unwrap();
        let q = random(&[3, 8], &mut rng);
        let kv = random(&[5, 8], &mut rng);
        let v = random(&[5, 8], &mut rng);
        let w = random(&[3, 8], &mut rng);
        check_all_params(
            &ps,
            |ps| mha.forward(ps, &q, &kv, &v).unwrap().0,
            |ps, w, g| {
                let (_, c) = mha.forward(ps, &q, &kv, &v).unwrap();
                mha.backward(ps, &c, w, g).unwrap();
            },
            &w,
        );
        let (_, c) = mha.forward(&ps, &q, &kv, &v).unwrap();
        let (gq, gk, gv) = mha.backward(&ps, &c, &w, &mut Grads::zeros_like(&ps)).unwrap();
        for (which, input, g) in [(0, &q, gq), (1, &kv, gk), (2, &v, gv)] {
            let r = grad_check(
                |x: &Tensor| {
                    let (a, b, cc) = match which {
                        0 => (x, &kv, &v),
                        1 => (&q, x, &v),
                        _ => (&q, &kv, x),
                    };
                    Ok((mha.forward(&ps, a, b, cc)?.0.mul(&w)?.sum(), g.clone()))
                },
                input,
                GradCheck::default(),
            )
            .unwrap();
            assert!(r.passed, "input {which}: {r:?}");
        }
    }

    #[test]
    fn feed_forward_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        let ffn = FeedForward::new(&mut ParamBuilder::new(&mut ps, &mut rng), "f", 4, 6, 1.0);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        check_all_params(
            &ps,
            |ps| ffn.forward(ps, &x).unwrap().0,
            |ps, w, g| {
                let (_, c) = ffn.forward(ps, &x).unwrap();
                ffn.backward(ps, &c, w, g).unwrap();
            },
            &w,
        );
    }

    #[test]
    fn layer_norm_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ParamBuilder::new(&mut ps, &mut rng), "n", 5);
        let x = random(&[4, 5], &mut rng);
        let w = random(&[4, 5], &mut rng);
        check_all_params(
            &ps,
            |ps| ln.forward(ps, &x).unwrap().0,
            |ps, w, g| {
                let (_, c) = ln.forward(ps, &x).unwrap();
                ln.backward(ps, &c, w, g).unwrap();
            },
            &w,
        );
    }

    #[test]
    fn grid_encoding_distinguishes_cells() {
        let pe = grid_encoding(4, 4, 16);
        for i in 0..16 {
            for j in 0..i {
                assert!(pe.row(i) != pe.row(j));
            }
        }
    }
}
