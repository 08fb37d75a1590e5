//! Full detector: backbone, hybrid encoder, query selection and head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, FeaturePyramid, ScanMode};
use crate::encoder::select::{QuerySelector, SelectorCache};
use crate::encoder::{EncoderCache, HybridEncoder, QuerySet};
use crate::error::{Error, Result};
use crate::head::loss::supervise;
use crate::head::{detections, Detection, HeadCache, Keypoint, LossConfig, LossReport, Matching, PredictionHead, QueryOutput};
use crate::numerics::Tensor;
use crate::params::{load_checkpoint, save_checkpoint, Grads, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub num_classes: usize,
    pub sigma_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            heads: 4,
            ffn_hidden: 128,
            num_queries: 30,
            decoder_layers: 2,
            num_classes: 19,
            sigma_floor: 1e-3,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration, used by gradient tests.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                in_channels: 1,
                d_model: 8,
                d_state: 2,
                blocks: [1, 1, 1],
                patch: 2,
            },
            heads: 2,
            ffn_hidden: 16,
            num_queries: 4,
            decoder_layers: 1,
            num_classes: 3,
            sigma_floor: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = self.backbone.d_model;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::param(format!("{} heads do not divide width {d}", self.heads)));
        }
        if self.ffn_hidden == 0 || self.num_queries == 0 || self.num_classes == 0 {
            return Err(Error::param("model sizes must be positive"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::param("sigma_floor must be positive"));
        }
        Ok(())
    }
}

/// Query selection and matching to hold fixed across evaluations, so the
/// loss becomes a smooth function of the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub selected: Vec<usize>,
    pub matching: Matching,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub encoder: HybridEncoder,
    pub selector: QuerySelector,
    pub head: PredictionHead,
}

pub struct ForwardCache {
    backbone: BackboneCache,
    encoder: EncoderCache,
    selector: SelectorCache,
    pub queries: QuerySet,
    head: HeadCache,
    pub encoded: FeaturePyramid,
}

impl Model {
    /// Build the model and its freshly initialized weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.backbone.d_model;
        let model = {
            let mut pb = ParamBuilder::new(&mut ps, &mut rng);
            Self {
                cfg: cfg.clone(),
                backbone: Backbone::new(&mut pb, &cfg.backbone)?,
                encoder: HybridEncoder::new(&mut pb, d, cfg.heads, cfg.ffn_hidden)?,
                selector: QuerySelector::new(&mut pb, d),
                head: PredictionHead::new(
                    &mut pb,
                    d,
                    cfg.heads,
                    cfg.ffn_hidden,
                    cfg.decoder_layers,
                    cfg.num_classes,
                    cfg.sigma_floor,
                )?,
            }
        };
        Ok((model, ps))
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        image: &Tensor,
        mode: ScanMode,
        selected: Option<&[usize]>,
    ) -> Result<(Vec<QueryOutput>, ForwardCache)> {
        let (pyr, backbone) = self.backbone.forward(ps, image, mode)?;
        let (encoded, encoder) = self.encoder.forward(ps, &pyr)?;
        let (queries, selector) = self.selector.forward_with(ps, &encoded, self.cfg.num_queries, selected)?;
        let (outs, head) = self.head.forward(ps, &queries, &encoded.levels[0])?;
        Ok((
            outs,
            ForwardCache {
                backbone,
                encoder,
                selector,
                queries,
                head,
                encoded,
            },
        ))
    }

    /// Loss for one image; gradients are added into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        ps: &ParamStore,
        image: &Tensor,
        gts: &[Keypoint],
        loss: &LossConfig,
        mode: ScanMode,
        plan: Option<&Plan>,
        grads: &mut Grads,
    ) -> Result<(LossReport, Plan)> {
        let (outs, cache) = self.forward(ps, image, mode, plan.map(|p| p.selected.as_slice()))?;
        let (report, g_out, matching) = supervise(&outs, gts, loss, plan.map(|p| &p.matching))?;
        let (g_queries, g_mem) = self.head.backward(ps, &cache.head, &outs, &g_out, grads)?;
        let mut g_enc = self.selector.backward(ps, &cache.selector, &cache.queries, &g_queries, grads)?;
        g_enc[0].add_assign(&g_mem)?;
        let g_levels = self.encoder.backward(ps, &cache.encoder, &g_enc, grads)?;
        self.backbone.backward(ps, &cache.backbone, &g_levels, grads, mode)?;
        Ok((
            report,
            Plan {
                selected: cache.queries.indices,
                matching,
            },
        ))
    }

    /// Loss without gradients.
    pub fn loss(
        &self,
        ps: &ParamStore,
        image: &Tensor,
        gts: &[Keypoint],
        loss: &LossConfig,
        mode: ScanMode,
        plan: Option<&Plan>,
    ) -> Result<LossReport> {
        let (outs, _) = self.forward(ps, image, mode, plan.map(|p| p.selected.as_slice()))?;
        Ok(supervise(&outs, gts, loss, plan.map(|p| &p.matching))?.0)
    }

    pub fn predict(
        &self,
        ps: &ParamStore,
        image: &Tensor,
        threshold: f64,
        unique: bool,
        mode: ScanMode,
    ) -> Result<Vec<Detection>> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::param(format!("threshold {threshold} outside [0, 1]")));
        }
        let (outs, _) = self.forward(ps, image, mode, None)?;
        Ok(detections(&outs, threshold, unique))
    }
}

/// A model with its weights, ready for inference.
#[derive(Clone, Debug, Default)]
pub struct KeypointDetector {
    loaded: Option<(Model, ParamStore)>,
    pub mode: ScanMode,
    pub unique: bool,
    /// Confidence cut used when the detector serves as a
    /// [`Predictor`](crate::eval::Predictor).
    pub threshold: f64,
}

impl KeypointDetector {
    /// Detector without weights; `predict` fails until some are loaded.
    pub fn unloaded() -> Self {
        Self {
            loaded: None,
            mode: ScanMode::Recurrent,
            unique: true,
            threshold: 0.0,
        }
    }

    pub fn from_parts(model: Model, ps: ParamStore) -> Self {
        Self {
            loaded: Some((model, ps)),
            ..Self::unloaded()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut d = Self::unloaded();
        d.load_weights(path)?;
        Ok(d)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let (cfg, entries): (ModelConfig, _) = load_checkpoint(path)?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        cfg.validate().map_err(|e| corrupt(e.to_string()))?;
        let (model, mut ps) = Model::new(&cfg, 0)?;
        ps.load_entries(entries).map_err(corrupt)?;
        self.loaded = Some((model, ps));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (model, ps) = self.parts()?;
        save_checkpoint(path, ps, &model.cfg)
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded.is_some()
    }

    pub fn parts(&self) -> Result<(&Model, &ParamStore)> {
        self.loaded
            .as_ref()
            .map(|(m, p)| (m, p))
            .ok_or_else(|| Error::State("no weights loaded".into()))
    }

    pub fn predict(&self, image: &Tensor, threshold: f64) -> Result<Vec<Detection>> {
        let (model, ps) = self.parts()?;
        model.predict(ps, image, threshold, self.unique, self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check::{check_indices, GradCheck};
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![1, h, w], |_| rng.random_range(0.0..1.0))
    }

    fn gts() -> Vec<Keypoint> {
        vec![
            Keypoint { class_id: 0, x: 0.3, y: 0.2 },
            Keypoint { class_id: 2, x: 0.7, y: 0.6 },
        ]
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = ModelConfig::tiny();
        let (model, ps) = Model::new(&cfg, 3).unwrap();
        let img = image(8, 8, 4);
        let lc = LossConfig::default();
        let mut g0 = Grads::zeros_like(&ps);
        let (_, plan) = model
            .loss_and_grad(&ps, &img, &gts(), &lc, ScanMode::Parallel, None, &mut g0)
            .unwrap();
        for (id, name, value) in ps.iter() {
            let mut f = |t: &Tensor| {
                let mut probe = ps.clone();
                *probe.get_mut(id) = t.clone();
                let mut g = Grads::zeros_like(&probe);
                let (r, _) = model.loss_and_grad(&probe, &img, &gts(), &lc, ScanMode::Parallel, Some(&plan), &mut g)?;
                Ok((r.total, g.get(id).clone()))
            };
            let r = check_indices(&mut f, value, GradCheck::default(), 0..value.len()).unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn predict_modes_agree() {
        let (model, ps) = Model::new(&ModelConfig::tiny(), 5).unwrap();
        let img = image(8, 8, 6);
        let a = model.predict(&ps, &img, 0.0, true, ScanMode::Recurrent).unwrap();
        let b = model.predict(&ps, &img, 0.0, true, ScanMode::Parallel).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.class_id, q.class_id);
            assert!((p.x - q.x).abs() <= 1e-6 && (p.y - q.y).abs() <= 1e-6);
        }
    }

    #[test]
    fn filter_laws() {
        let cfg = ModelConfig::tiny();
        let (model, ps) = Model::new(&cfg, 7).unwrap();
        let img = image(8, 8, 8);
        assert!(model.predict(&ps, &img, 1.0, false, ScanMode::Recurrent).unwrap().is_empty());
        assert_eq!(model.predict(&ps, &img, 0.0, false, ScanMode::Recurrent).unwrap().len(), cfg.num_queries);
        assert_eq!(model.predict(&ps, &img, 0.0, true, ScanMode::Recurrent).unwrap().len(), cfg.num_classes);
        for d in model.predict(&ps, &img, 0.0, false, ScanMode::Recurrent).unwrap() {
            assert!(d.x > 0.0 && d.x < 1.0 && d.y > 0.0 && d.y < 1.0);
            assert!(d.sigma[0] > 0.0 && d.sigma[1] > 0.0);
        }
    }

    #[test]
    fn unloaded_detector_is_a_state_error() {
        let d = KeypointDetector::unloaded();
        assert!(matches!(d.predict(&image(8, 8, 1), 0.5), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (model, ps) = Model::new(&ModelConfig::tiny(), 9).unwrap();
        let det = KeypointDetector::from_parts(model, ps);
        det.save(&path).unwrap();
        let back = KeypointDetector::load(&path).unwrap();
        let img = image(8, 8, 2);
        assert_eq!(det.predict(&img, 0.0).unwrap(), back.predict(&img, 0.0).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(KeypointDetector::load(&path), Err(Error::Corrupt { .. })));
        assert!(matches!(
            KeypointDetector::load(&dir.path().join("absent")),
            Err(Error::Missing { .. })
        ));
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut cfg = ModelConfig::tiny();
        cfg.heads = 3;
        assert!(Model::new(&cfg, 0).is_err());
        let (model, ps) = Model::new(&ModelConfig::tiny(), 0).unwrap();
        assert!(model.predict(&ps, &image(6, 8, 0), 0.5, true, ScanMode::Recurrent).is_err());
    }
}
