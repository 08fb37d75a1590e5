//! Central finite-difference checks of every differentiable operation, from
//! single kernels up to the full detector loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::pyramid::PatchMerge;
use crate::backbone::selective::{selective_scan, selective_scan_backward, ScanInputs};
use crate::backbone::{Backbone, BackboneConfig, FeatureMap, FeaturePyramid, ScanMode, SelectiveBlock};
use crate::encoder::{iou_with_grad, Box, HybridEncoder, QueryGrads, QuerySelector};
use crate::error::Result;
use crate::head::dsnt::{cell_centers, soft_argmax_backward, soft_argmax_flat};
use crate::head::{supervise, DecoderLayer, Keypoint, LossConfig, PredictionHead, QueryOutput, QueryOutputGrad};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::model::{Model, ModelConfig};
use crate::numerics::grad_check::{grad_check, GradCheck, GradCheckReport};
use crate::numerics::ops::{layer_norm, layer_norm_backward, matmul, matmul_backward, softmax, softmax_backward, Activation};
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamStore};

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

struct Suite {
    cfg: GradCheck,
    rng: ChaCha8Rng,
    results: Vec<CaseResult>,
}

impl Suite {
    fn random(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn store(&mut self, build: impl FnOnce(&mut ParamBuilder<'_>) -> Result<()>) -> Result<ParamStore> {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.random());
        build(&mut ParamBuilder::new(&mut ps, &mut rng))?;
        Ok(ps)
    }

    /// Check `analytic` against `objective` perturbed around `x`.
    fn input(&mut self, name: impl Into<String>, x: &Tensor, analytic: &Tensor, objective: impl Fn(&Tensor) -> Result<f64>) -> Result<()> {
        let report = grad_check(|p| Ok((objective(p)?, analytic.clone())), x, self.cfg)?;
        self.results.push(CaseResult { name: name.into(), report });
        Ok(())
    }

    /// Check every parameter tensor of `ps` against accumulated `grads`.
    fn params(&mut self, prefix: &str, ps: &ParamStore, grads: &Grads, objective: impl Fn(&ParamStore) -> Result<f64>) -> Result<()> {
        for (id, name, value) in ps.iter() {
            let mut local = ps.clone();
            let analytic = grads.get(id).clone();
            let report = grad_check(
                |p| {
                    *local.get_mut(id) = p.clone();
                    Ok((objective(&local)?, analytic.clone()))
                },
                value,
                self.cfg,
            )?;
            self.results.push(CaseResult {
                name: format!("{prefix}/{name}"),
                report,
            });
        }
        Ok(())
    }

    fn pyramid(&mut self, d: usize, base: usize) -> FeaturePyramid {
        let level = |s: usize, suite: &mut Self| {
            let n = base >> s;
            FeatureMap {
                h: n,
                w: n,
                stride: 8 << s,
                tokens: suite.random(&[n * n, d]),
            }
        };
        FeaturePyramid {
            levels: [level(0, self), level(1, self), level(2, self)],
        }
    }
}

fn weighted(levels: &[FeatureMap; 3], w: &[Tensor; 3]) -> Result<f64> {
    let mut s = 0.0;
    for (l, w) in levels.iter().zip(w) {
        s += l.tokens.mul(w)?.sum();
    }
    Ok(s)
}

fn kernels(s: &mut Suite) -> Result<()> {
    let a = s.random(&[3, 4]);
    let b = s.random(&[4, 2]);
    let w = s.random(&[3, 2]);
    let (ga, gb) = matmul_backward(&a, &b, &w)?;
    s.input("matmul/a", &a, &ga, |x| Ok(matmul(x, &b)?.mul(&w)?.sum()))?;
    s.input("matmul/b", &b, &gb, |x| Ok(matmul(&a, x)?.mul(&w)?.sum()))?;

    let x = s.random(&[2, 6]);
    let w = s.random(&[2, 6]);
    let g = softmax_backward(&softmax(&x, 1)?, &w, 1)?;
    s.input("softmax", &x, &g, |x| Ok(softmax(x, 1)?.mul(&w)?.sum()))?;

    let x = s.random(&[12]).scale(4.0);
    for act in [Activation::Silu, Activation::Softplus, Activation::Sigmoid] {
        let g = act.backward(&x, &Tensor::full(vec![12], 1.0));
        s.input(format!("activation/{act:?}"), &x, &g, |x| Ok(act.forward(x).sum()))?;
    }

    let x = s.random(&[3, 5]);
    let gamma: Vec<f64> = (0..5).map(|i| 0.6 + 0.2 * i as f64).collect();
    let beta: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
    let w = s.random(&[3, 5]);
    let (_, cache) = layer_norm(&x, &gamma, &beta)?;
    let (g, _, _) = layer_norm_backward(&cache, &gamma, &w)?;
    s.input("layer_norm", &x, &g, |x| Ok(layer_norm(x, &gamma, &beta)?.0.mul(&w)?.sum()))?;

    let mut r = s.random(&[3, 4]).scale(2.0);
    let centers = cell_centers(3, 4);
    let mut p = r.data().to_vec();
    let mean = soft_argmax_flat(&mut p, &centers);
    let g = Tensor::new(vec![3, 4], soft_argmax_backward(&p, &centers, mean, (0.3, -1.2)))?;
    s.input("soft_argmax", &r, &g, |t| {
        let (x, y) = soft_argmax_flat(&mut t.data().to_vec(), &centers);
        Ok(0.3 * x - 1.2 * y)
    })?;
    r = Tensor::vector(vec![0.42, 0.52, 0.25, 0.3]);
    let target = Box::new(0.5, 0.45, 0.3, 0.2);
    let as_box = |t: &Tensor| Box::new(t.data()[0], t.data()[1], t.data()[2], t.data()[3]);
    let g = Tensor::vector(iou_with_grad(&as_box(&r), &target).1.to_vec());
    s.input("iou", &r, &g, |t| Ok(iou_with_grad(&as_box(t), &target).0))
}

fn layers(s: &mut Suite) -> Result<()> {
    let mut lin = None;
    let ps = s.store(|pb| {
        lin = Some(Linear::new(pb, "linear", 4, 3, true, 1.0));
        Ok(())
    })?;
    let lin = lin.expect("built");
    let x = s.random(&[5, 4]);
    let w = s.random(&[5, 3]);
    let mut g = Grads::zeros_like(&ps);
    let gx = lin.backward(&ps, &x, &w, &mut g)?;
    s.params("linear", &ps, &g, |ps| Ok(lin.forward(ps, &x)?.mul(&w)?.sum()))?;
    s.input("linear/input", &x, &gx, |x| Ok(lin.forward(&ps, x)?.mul(&w)?.sum()))?;

    let mut ln = None;
    let ps = s.store(|pb| {
        ln = Some(LayerNorm::new(pb, "norm", 5));
        Ok(())
    })?;
    let ln = ln.expect("built");
    let x = s.random(&[4, 5]);
    let w = s.random(&[4, 5]);
    let mut g = Grads::zeros_like(&ps);
    ln.backward(&ps, &ln.forward(&ps, &x)?.1, &w, &mut g)?;
    s.params("layer_norm", &ps, &g, |ps| Ok(ln.forward(ps, &x)?.0.mul(&w)?.sum()))?;

    let mut ffn = None;
    let ps = s.store(|pb| {
        ffn = Some(FeedForward::new(pb, "ffn", 4, 6, 1.0));
        Ok(())
    })?;
    let ffn = ffn.expect("built");
    let x = s.random(&[3, 4]);
    let w = s.random(&[3, 4]);
    let mut g = Grads::zeros_like(&ps);
    let gx = ffn.backward(&ps, &ffn.forward(&ps, &x)?.1, &w, &mut g)?;
    s.params("ffn", &ps, &g, |ps| Ok(ffn.forward(ps, &x)?.0.mul(&w)?.sum()))?;
    s.input("ffn/input", &x, &gx, |x| Ok(ffn.forward(&ps, x)?.0.mul(&w)?.sum()))?;

    let mut mha = None;
    let ps = s.store(|pb| {
        mha = Some(MultiHeadAttention::new(pb, "attn", 8, 2, 1.0)?);
        Ok(())
    })?;
    let mha = mha.expect("built");
    let (q, k, v) = (s.random(&[3, 8]), s.random(&[5, 8]), s.random(&[5, 8]));
    let w = s.random(&[3, 8]);
    let mut g = Grads::zeros_like(&ps);
    let (gq, gk, gv) = mha.backward(&ps, &mha.forward(&ps, &q, &k, &v)?.1, &w, &mut g)?;
    let f = |ps: &ParamStore, q: &Tensor, k: &Tensor, v: &Tensor| Ok(mha.forward(ps, q, k, v)?.0.mul(&w)?.sum());
    s.params("attention", &ps, &g, |ps| f(ps, &q, &k, &v))?;
    s.input("attention/query", &q, &gq, |x| f(&ps, x, &k, &v))?;
    s.input("attention/key", &k, &gk, |x| f(&ps, &q, x, &v))?;
    s.input("attention/value", &v, &gv, |x| f(&ps, &q, &k, x))
}

fn backbone(s: &mut Suite) -> Result<()> {
    let (t, d, n) = (5, 2, 3);
    let x = ScanInputs {
        u: s.random(&[t, d]),
        delta: s.random(&[t, d]).map(|v| 0.3 + 0.25 * v),
        b: s.random(&[t, n]),
        c: s.random(&[t, n]),
        a: s.random(&[d, n]).map(|v| -0.6 - 0.5 * v),
        skip: vec![0.4, -0.7],
    };
    let w = s.random(&[t, d]);
    for mode in [ScanMode::Recurrent, ScanMode::Parallel] {
        let (_, cache) = selective_scan(&x, mode)?;
        let g = selective_scan_backward(&x, &cache, &w, mode)?;
        let obj = |y: &ScanInputs| Ok(selective_scan(y, mode)?.0.mul(&w)?.sum());
        s.input(format!("selective_scan/{mode:?}/u"), &x.u, &g.u, |p| obj(&ScanInputs { u: p.clone(), ..x.clone() }))?;
        s.input(format!("selective_scan/{mode:?}/delta"), &x.delta, &g.delta, |p| {
            obj(&ScanInputs { delta: p.clone(), ..x.clone() })
        })?;
        s.input(format!("selective_scan/{mode:?}/b"), &x.b, &g.b, |p| obj(&ScanInputs { b: p.clone(), ..x.clone() }))?;
        s.input(format!("selective_scan/{mode:?}/c"), &x.c, &g.c, |p| obj(&ScanInputs { c: p.clone(), ..x.clone() }))?;
        s.input(format!("selective_scan/{mode:?}/a"), &x.a, &g.a, |p| obj(&ScanInputs { a: p.clone(), ..x.clone() }))?;
        s.input(
            format!("selective_scan/{mode:?}/skip"),
            &Tensor::vector(x.skip.clone()),
            &Tensor::vector(g.skip.clone()),
            |p| obj(&ScanInputs { skip: p.data().to_vec(), ..x.clone() }),
        )?;
    }

    let mut blk = None;
    let ps = s.store(|pb| {
        blk = Some(SelectiveBlock::new(pb, "block", 6, 4, 1.0));
        Ok(())
    })?;
    let blk = blk.expect("built");
    let x = s.random(&[5, 6]);
    let w = s.random(&[5, 6]);
    for mode in [ScanMode::Recurrent, ScanMode::Parallel] {
        let mut g = Grads::zeros_like(&ps);
        let gx = blk.backward(&ps, &blk.forward(&ps, &x, mode)?.1, &w, &mut g, mode)?;
        s.params(&format!("selective_block/{mode:?}"), &ps, &g, |ps| Ok(blk.forward(ps, &x, mode)?.0.mul(&w)?.sum()))?;
        s.input(format!("selective_block/{mode:?}/input"), &x, &gx, |x| Ok(blk.forward(&ps, x, mode)?.0.mul(&w)?.sum()))?;
    }

    let mut pm = None;
    let ps = s.store(|pb| {
        pm = Some(PatchMerge::new(pb, "merge", 4));
        Ok(())
    })?;
    let pm = pm.expect("built");
    let x = s.random(&[16, 4]);
    let w = s.random(&[4, 4]);
    let mut g = Grads::zeros_like(&ps);
    let gx = pm.backward(&ps, &pm.forward(&ps, &x, 4, 4)?.1, &w, &mut g)?;
    s.params("patch_merge", &ps, &g, |ps| Ok(pm.forward(ps, &x, 4, 4)?.0.mul(&w)?.sum()))?;
    s.input("patch_merge/input", &x, &gx, |x| Ok(pm.forward(&ps, x, 4, 4)?.0.mul(&w)?.sum()))?;

    let cfg = BackboneConfig {
        in_channels: 1,
        d_model: 8,
        d_state: 2,
        blocks: [1, 1, 1],
        patch: 2,
    };
    let mut bb = None;
    let ps = s.store(|pb| {
        bb = Some(Backbone::new(pb, &cfg)?);
        Ok(())
    })?;
    let bb = bb.expect("built");
    let img = s.random(&[1, 8, 8]);
    for mode in [ScanMode::Recurrent, ScanMode::Parallel] {
        let (pyr, cache) = bb.forward(&ps, &img, mode)?;
        let w: [Tensor; 3] = pyr.levels.clone().map(|l| {
            let shape = l.tokens.shape().to_vec();
            s.random(&shape)
        });
        let mut g = Grads::zeros_like(&ps);
        bb.backward(&ps, &cache, &w, &mut g, mode)?;
        s.params(&format!("backbone/{mode:?}"), &ps, &g, |ps| weighted(&bb.forward(ps, &img, mode)?.0.levels, &w))?;
    }
    Ok(())
}

fn encoder(s: &mut Suite) -> Result<()> {
    let d = 8;
    let mut enc = None;
    let ps = s.store(|pb| {
        enc = Some(HybridEncoder::new(pb, d, 2, 2 * d)?);
        Ok(())
    })?;
    let enc = enc.expect("built");
    let p = s.pyramid(d, 4);
    let w: [Tensor; 3] = p.levels.clone().map(|l| {
        let shape = l.tokens.shape().to_vec();
        s.random(&shape)
    });
    let obj = |ps: &ParamStore, p: &FeaturePyramid| weighted(&enc.forward(ps, p)?.0.levels, &w);
    let mut g = Grads::zeros_like(&ps);
    let g_in = enc.backward(&ps, &enc.forward(&ps, &p)?.1, &w, &mut g)?;
    s.params("encoder", &ps, &g, |ps| obj(ps, &p))?;
    for lvl in 0..3 {
        s.input(format!("encoder/level{lvl}"), &p.levels[lvl].tokens, &g_in[lvl], |v| {
            let mut q = p.clone();
            q.levels[lvl].tokens = v.clone();
            obj(&ps, &q)
        })?;
    }

    let mut sel = None;
    let ps = s.store(|pb| {
        sel = Some(QuerySelector::new(pb, d));
        Ok(())
    })?;
    let sel = sel.expect("built");
    let k = 5;
    let (qs, cache) = sel.forward(&ps, &p, k)?;
    let gq = QueryGrads {
        features: s.random(&[k, d]),
        boxes: (0..k).map(|i| [0.3, -0.7, 1.1 - 0.1 * i as f64, 0.4]).collect(),
        score_logits: (0..k).map(|i| i as f64 * 0.2 - 0.3).collect(),
    };
    let obj = |ps: &ParamStore, p: &FeaturePyramid| -> Result<f64> {
        let (q, _) = sel.forward_with(ps, p, k, Some(&qs.indices))?;
        let mut total = q.features.mul(&gq.features)?.sum();
        for i in 0..k {
            let b = q.boxes[i].to_array();
            total += (0..4).map(|j| b[j] * gq.boxes[i][j]).sum::<f64>() + q.score_logits[i] * gq.score_logits[i];
        }
        Ok(total)
    };
    let mut g = Grads::zeros_like(&ps);
    let g_in = sel.backward(&ps, &cache, &qs, &gq, &mut g)?;
    s.params("selector", &ps, &g, |ps| obj(ps, &p))?;
    for lvl in 0..3 {
        s.input(format!("selector/level{lvl}"), &p.levels[lvl].tokens, &g_in[lvl], |v| {
            let mut q = p.clone();
            q.levels[lvl].tokens = v.clone();
            obj(&ps, &q)
        })?;
    }
    Ok(())
}

fn head(s: &mut Suite) -> Result<()> {
    let d = 8;
    let mut layer = None;
    let ps = s.store(|pb| {
        layer = Some(DecoderLayer::new(pb, "dec", d, 2, 12, 1.0)?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    let (x, pos, mem, key) = (s.random(&[3, d]), s.random(&[3, d]), s.random(&[6, d]), s.random(&[6, d]));
    let w = s.random(&[3, d]);
    let f = |ps: &ParamStore, x: &Tensor, mem: &Tensor, key: &Tensor| Ok(layer.forward(ps, x, &pos, mem, key)?.0.mul(&w)?.sum());
    let mut g = Grads::zeros_like(&ps);
    let (gx, gm, gk) = layer.backward(&ps, &layer.forward(&ps, &x, &pos, &mem, &key)?.1, &w, &mut g)?;
    s.params("decoder_layer", &ps, &g, |ps| f(ps, &x, &mem, &key))?;
    s.input("decoder_layer/input", &x, &gx, |v| f(&ps, v, &mem, &key))?;
    s.input("decoder_layer/memory", &mem, &gm, |v| f(&ps, &x, v, &key))?;
    s.input("decoder_layer/memory_key", &key, &gk, |v| f(&ps, &x, &mem, v))?;

    let classes = 3;
    let mut parts = None;
    let ps = s.store(|pb| {
        parts = Some((QuerySelector::new(pb, d), PredictionHead::new(pb, d, 2, 12, 2, classes, 1e-2)?));
        Ok(())
    })?;
    let (sel, head) = parts.expect("built");
    let p = s.pyramid(d, 4);
    let (qs, _) = sel.forward(&ps, &p, 4)?;
    let memory = p.levels[0].clone();
    let wq: Vec<QueryOutputGrad> = (0..qs.len())
        .map(|_| {
            let r = s.random(&[classes + 5]);
            QueryOutputGrad {
                class_logits: r.data()[..classes + 1].to_vec(),
                xy: [r.data()[classes + 1], r.data()[classes + 2]],
                sigma: [r.data()[classes + 3], r.data()[classes + 4]],
                bbox: [0.0; 4],
                quality_logit: 0.0,
            }
        })
        .collect();
    let obj = |ps: &ParamStore, mem: &FeatureMap| -> Result<f64> {
        let (outs, _) = head.forward(ps, &qs, mem)?;
        Ok(outs
            .iter()
            .zip(&wq)
            .map(|(o, w)| {
                o.class_logits.iter().zip(&w.class_logits).map(|(a, b)| a * b).sum::<f64>()
                    + o.x * w.xy[0]
                    + o.y * w.xy[1]
                    + o.sigma[0] * w.sigma[0]
                    + o.sigma[1] * w.sigma[1]
            })
            .sum())
    };
    let (outs, cache) = head.forward(&ps, &qs, &memory)?;
    let mut g = Grads::zeros_like(&ps);
    let (_, g_mem) = head.backward(&ps, &cache, &outs, &wq, &mut g)?;
    s.params("prediction_head", &ps, &g, |ps| obj(ps, &memory))?;
    s.input("prediction_head/memory", &memory.tokens, &g_mem, |v| {
        obj(&ps, &FeatureMap { tokens: v.clone(), ..memory.clone() })
    })?;
    Ok(())
}

const OUT_WIDTH: usize = 4 + 2 + 2 + 4 + 1;

fn pack(outs: &[QueryOutput]) -> Tensor {
    let data = outs
        .iter()
        .flat_map(|o| {
            let mut v = o.class_logits.clone();
            v.extend([o.x, o.y, o.sigma[0], o.sigma[1], o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h, o.quality_logit]);
            v
        })
        .collect();
    Tensor::new(vec![outs.len(), OUT_WIDTH], data).expect("packed size")
}

fn unpack(t: &Tensor) -> Vec<QueryOutput> {
    (0..t.shape()[0])
        .map(|q| {
            let r = t.row(q);
            QueryOutput {
                class_logits: r[..4].to_vec(),
                x: r[4],
                y: r[5],
                sigma: [r[6], r[7]],
                bbox: Box::new(r[8], r[9], r[10], r[11]),
                quality_logit: r[12],
            }
        })
        .collect()
}

fn loss(s: &mut Suite) -> Result<()> {
    let outs: Vec<QueryOutput> = (0..4)
        .map(|_| {
            let r = s.random(&[13]);
            let v = r.data();
            QueryOutput {
                class_logits: v[..4].to_vec(),
                x: 0.5 + 0.3 * v[4],
                y: 0.5 + 0.3 * v[5],
                sigma: [0.1 + 0.05 * v[6], 0.1 + 0.05 * v[7]],
                bbox: Box::new(0.5 + 0.2 * v[8], 0.5 + 0.2 * v[9], 0.2 + 0.1 * v[10], 0.2 + 0.1 * v[11]),
                quality_logit: v[12],
            }
        })
        .collect();
    let gts = vec![
        Keypoint { class_id: 0, x: 0.3, y: 0.4 },
        Keypoint { class_id: 2, x: 0.6, y: 0.7 },
    ];
    let cfg = LossConfig::default();
    let (_, grads, matching) = supervise(&outs, &gts, &cfg, None)?;
    let packed = pack(&outs);
    let g = Tensor::new(
        vec![outs.len(), OUT_WIDTH],
        grads
            .iter()
            .flat_map(|g| {
                let mut v = g.class_logits.clone();
                v.extend(g.xy);
                v.extend(g.sigma);
                v.extend(g.bbox);
                v.push(g.quality_logit);
                v
            })
            .collect(),
    )?;
    s.input("loss", &packed, &g, |t| Ok(supervise(&unpack(t), &gts, &cfg, Some(&matching))?.0.total))
}

fn model(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::tiny();
    let (model, ps) = Model::new(&cfg, s.rng.random())?;
    let img = s.random(&[1, 8, 8]).map(|v| 0.5 + 0.5 * v);
    let gts = vec![
        Keypoint { class_id: 0, x: 0.3, y: 0.2 },
        Keypoint { class_id: 2, x: 0.7, y: 0.6 },
    ];
    let lc = LossConfig::default();
    for mode in [ScanMode::Recurrent, ScanMode::Parallel] {
        let mut g = Grads::zeros_like(&ps);
        let (_, plan) = model.loss_and_grad(&ps, &img, &gts, &lc, mode, None, &mut g)?;
        s.params(&format!("model/{mode:?}"), &ps, &g, |ps| Ok(model.loss(ps, &img, &gts, &lc, mode, Some(&plan))?.total))?;
    }
    Ok(())
}

/// Run every check with `cfg` and return one result per checked tensor.
pub fn run(cfg: GradCheck, seed: u64) -> Result<Vec<CaseResult>> {
    let mut s = Suite {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };
    kernels(&mut s)?;
    layers(&mut s)?;
    backbone(&mut s)?;
    encoder(&mut s)?;
    head(&mut s)?;
    loss(&mut s)?;
    model(&mut s)?;
    Ok(s.results)
}
