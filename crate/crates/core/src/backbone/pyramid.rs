//! Patch serialization and the three-stage feature pyramid.

use serde::{Deserialize, Serialize};

use super::selective::{ScanMode, SelectiveBlock, SelectiveBlockCache};
use crate::error::{Error, Result};
use crate::layers::{grid_encoding, LayerNorm, Linear};
use crate::numerics::ops::LayerNormCache;
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub d_model: usize,
    pub d_state: usize,
    /// Selective blocks in each of the three stages.
    pub blocks: [usize; 3],
    pub patch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            d_model: 64,
            d_state: 16,
            blocks: [2, 2, 2],
            patch: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.d_model == 0 || self.d_state == 0 || self.patch == 0 {
            return Err(Error::param("backbone sizes must be positive"));
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn granularity(&self) -> usize {
        self.patch * 4
    }

    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let g = self.granularity();
        if c != self.in_channels {
            return Err(Error::dim(format!("expected {} channels, got {c}", self.in_channels)));
        }
        if h == 0 || w == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::dim(format!("image {h}x{w} is not a positive multiple of {g}")));
        }
        Ok(())
    }
}

/// Split `[c, h, w]` into non-overlapping `patch×patch` tiles in raster
/// order. Each row is one tile laid out channel, row, column.
pub fn serialize(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("image {h}x{w} is not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let d = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * d);
    for pr in 0..gh {
        for pc in 0..gw {
            for ch in 0..c {
                for r in 0..patch {
                    let start = ch * h * w + (pr * patch + r) * w + pc * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d], out)
}

/// Inverse of [`serialize`].
pub fn deserialize(tokens: &Tensor, c: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("image {h}x{w} is not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let (n, d) = tokens.dims2()?;
    if n != gh * gw || d != c * patch * patch {
        return Err(Error::dim("token table does not match the image geometry"));
    }
    let mut out = vec![0.0; c * h * w];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = tokens.row(pr * gw + pc);
            for ch in 0..c {
                for r in 0..patch {
                    let start = ch * h * w + (pr * patch + r) * w + pc * patch;
                    let off = (ch * patch + r) * patch;
                    out[start..start + patch].copy_from_slice(&row[off..off + patch]);
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// One pyramid level stored as raster-ordered tokens `[h·w, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    /// Pixels per cell along each axis.
    pub stride: usize,
    pub tokens: Tensor,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Channel-major view `[d, h, w]`.
    pub fn to_chw(&self) -> Tensor {
        let d = self.channels();
        let n = self.h * self.w;
        Tensor::from_fn(vec![d, self.h, self.w], |i| self.tokens.get2(i % n, i / n))
    }
}

/// Three levels from fine to coarse; each halves the previous extent.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 3],
}

impl FeaturePyramid {
    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }
}

/// Concatenate each 2×2 neighbourhood of cells, normalize, project back to
/// `d` channels.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct PatchMergeCache {
    h: usize,
    w: usize,
    norm: LayerNormCache,
    normed: Tensor,
}

fn merge_source(w: usize, r: usize, c: usize, q: usize) -> usize {
    (2 * r + q / 2) * w + 2 * c + q % 2
}

impl PatchMerge {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Self {
        pb.scoped(name, |pb| Self {
            norm: LayerNorm::new(pb, "norm", 4 * d),
            proj: Linear::new(pb, "proj", 4 * d, d, true, 1.0),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, PatchMergeCache)> {
        let (n, d) = x.dims2()?;
        if n != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("cannot merge a {h}x{w} grid")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut cat = Tensor::zeros(vec![oh * ow, 4 * d]);
        for r in 0..oh {
            for c in 0..ow {
                let row = cat.row_mut(r * ow + c);
                for q in 0..4 {
                    row[q * d..(q + 1) * d].copy_from_slice(x.row(merge_source(w, r, c, q)));
                }
            }
        }
        let (normed, norm) = self.norm.forward(ps, &cat)?;
        let out = self.proj.forward(ps, &normed)?;
        Ok((out, PatchMergeCache { h, w, norm, normed }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &PatchMergeCache, grad_out: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let g_normed = self.proj.backward(ps, &cache.normed, grad_out, grads)?;
        let g_cat = self.norm.backward(ps, &cache.norm, &g_normed, grads)?;
        let d = g_cat.shape()[1] / 4;
        let (h, w) = (cache.h, cache.w);
        let (oh, ow) = (h / 2, w / 2);
        let mut gx = Tensor::zeros(vec![h * w, d]);
        for r in 0..oh {
            for c in 0..ow {
                let row = g_cat.row(r * ow + c);
                for q in 0..4 {
                    gx.row_mut(merge_source(w, r, c, q))
                        .copy_from_slice(&row[q * d..(q + 1) * d]);
                }
            }
        }
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: Linear,
    pub stages: Vec<Vec<SelectiveBlock>>,
    pub merges: Vec<PatchMerge>,
    pub level_norms: Vec<LayerNorm>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    patches: Tensor,
    blocks: Vec<Vec<SelectiveBlockCache>>,
    merges: Vec<PatchMergeCache>,
    norms: Vec<LayerNormCache>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let d_patch = cfg.in_channels * cfg.patch * cfg.patch;
        Ok(pb.scoped("backbone", |pb| {
            let embed = Linear::new(pb, "embed", d_patch, d, true, 1.0);
            let total: usize = cfg.blocks.iter().sum();
            let out_gain = 1.0 / (total.max(1) as f64).sqrt();
            let stages = (0..3)
                .map(|s| {
                    (0..cfg.blocks[s])
                        .map(|b| SelectiveBlock::new(pb, &format!("stage{s}.block{b}"), d, cfg.d_state, out_gain))
                        .collect()
                })
                .collect();
            let merges = (0..2).map(|s| PatchMerge::new(pb, &format!("merge{s}"), d)).collect();
            let level_norms = (0..3).map(|s| LayerNorm::new(pb, &format!("level{s}.norm"), d)).collect();
            Self {
                cfg: cfg.clone(),
                embed,
                stages,
                merges,
                level_norms,
            }
        }))
    }

    pub fn forward(&self, ps: &ParamStore, image: &Tensor, mode: ScanMode) -> Result<(FeaturePyramid, BackboneCache)> {
        let (c, h, w) = image.dims3()?;
        self.cfg.check_input(c, h, w)?;
        image.ensure_finite("backbone input")?;
        let p = self.cfg.patch;
        let patches = serialize(image, p)?;
        let (mut gh, mut gw) = (h / p, w / p);
        let mut x = self.embed.forward(ps, &patches)?;
        x.add_assign(&grid_encoding(gh, gw, self.cfg.d_model))?;
        let mut block_caches = Vec::with_capacity(3);
        let mut merge_caches = Vec::with_capacity(2);
        let mut norm_caches = Vec::with_capacity(3);
        let mut levels = Vec::with_capacity(3);
        for s in 0..3 {
            if s > 0 {
                let (y, mc) = self.merges[s - 1].forward(ps, &x, gh, gw)?;
                merge_caches.push(mc);
                x = y;
                gh /= 2;
                gw /= 2;
            }
            let mut caches = Vec::with_capacity(self.stages[s].len());
            for blk in &self.stages[s] {
                let (y, bc) = blk.forward(ps, &x, mode)?;
                caches.push(bc);
                x = y;
            }
            block_caches.push(caches);
            let (level, nc) = self.level_norms[s].forward(ps, &x)?;
            norm_caches.push(nc);
            levels.push(FeatureMap {
                h: gh,
                w: gw,
                stride: p << s,
                tokens: level,
            });
        }
        let levels: [FeatureMap; 3] = levels.try_into().expect("three levels");
        Ok((
            FeaturePyramid { levels },
            BackboneCache {
                patches,
                blocks: block_caches,
                merges: merge_caches,
                norms: norm_caches,
            },
        ))
    }

    /// Backpropagate gradients of the three level token tables.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &BackboneCache,
        level_grads: &[Tensor; 3],
        grads: &mut Grads,
        mode: ScanMode,
    ) -> Result<()> {
        let mut carry: Option<Tensor> = None;
        for s in (0..3).rev() {
            let mut g = self.level_norms[s].backward(ps, &cache.norms[s], &level_grads[s], grads)?;
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            for (blk, bc) in self.stages[s].iter().zip(&cache.blocks[s]).rev() {
                g = blk.backward(ps, bc, &g, grads, mode)?;
            }
            if s > 0 {
                carry = Some(self.merges[s - 1].backward(ps, &cache.merges[s - 1], &g, grads)?);
            } else {
                self.embed.backward(ps, &cache.patches, &g, grads)?;
            }
        }
        Ok(())
    }
}
