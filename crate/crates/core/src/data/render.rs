//! Low-contrast grayscale rendering of a skeleton's back view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::skeleton::{unit, Skeleton};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Peak strength of the random linear lighting gradient.
    pub illumination: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            noise: 0.02,
            illumination: 0.05,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.illumination) {
            return Err(Error::Config("illumination must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Arc length along the spine (zero at C7, growing downward) and signed
/// lateral distance (positive toward image right) of a pixel.
struct BodyFrame {
    nodes: Vec<(f64, f64)>,
    arc: Vec<f64>,
}

impl BodyFrame {
    fn new(s: &Skeleton) -> Self {
        let n = s.spine.len();
        let reach = s.image_size as f64 * 2.0;
        let t0 = s.tangent(0);
        let t1 = s.tangent(n - 1);
        let mut nodes = vec![(s.spine[0].0 - t0.0 * reach, s.spine[0].1 - t0.1 * reach)];
        nodes.extend_from_slice(&s.spine);
        nodes.push((s.spine[n - 1].0 + t1.0 * reach, s.spine[n - 1].1 + t1.1 * reach));
        let mut arc = vec![-reach, 0.0];
        for w in nodes[1..].windows(2) {
            arc.push(arc.last().unwrap() + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
        }
        Self { nodes, arc }
    }

    fn locate(&self, p: (f64, f64)) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.nodes.len() - 1 {
            let (a, b) = (self.nodes[i], self.nodes[i + 1]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
            let q = (a.0 + t * dx, a.1 + t * dy);
            let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
            if d2 < best.0 {
                let (tx, ty) = unit(dx, dy);
                let u = (p.0 - q.0) * ty - (p.1 - q.1) * tx;
                let s = self.arc[i] + t * (self.arc[i + 1] - self.arc[i]);
                best = (d2, s, u);
            }
        }
        (best.1, best.2)
    }

    fn arc_of(&self, vertebra: usize) -> f64 {
        self.arc[vertebra + 1]
    }
}

/// Soft inside test: 1 well inside `limit`, 0 well outside, linear over a
/// one-pixel band.
fn inside(v: f64, limit: f64) -> f64 {
    (limit - v + 0.5).clamp(0.0, 1.0)
}

fn gauss(d2: f64, width: f64) -> f64 {
    (-d2 / (2.0 * width * width)).exp()
}

/// Noise-free render; lighting is drawn from `seed`.
fn clean(s: &Skeleton, cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = s.image_size;
    let size = n as f64;
    let frame = BodyFrame::new(s);
    let cun = s.cun();
    let half = s.body_width / 2.0;
    let light = (
        rng.random_range(-1.0..=1.0) * cfg.illumination,
        rng.random_range(-1.0..=1.0) * cfg.illumination,
    );
    let elbow = frame.arc_of(13);
    let arm_end = frame.arc_of(s.spine.len() - 1) + 1.2 * cun;
    let mut img = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let (arc, u) = frame.locate(p);
            let au = u.abs();
            let bg = 0.2 + light.0 * (p.0 / size - 0.5) + light.1 * (p.1 / size - 0.5);
            let neck = inside(au, 1.1 * cun) * inside(-arc, 3.0 * cun);
            let torso = inside(au, half) * inside(-0.8 * cun, arc);
            let shoulder = inside(au, 4.6 * cun) * inside(-0.6 * cun, arc) * inside(arc, 0.6 * cun);
            let arm = inside(au, 4.6 * cun) * inside(3.4 * cun, au) * inside(-0.6 * cun, arc) * inside(arc, arm_end);
            let mask = neck.max(torso).max(shoulder).max(arm);
            let mut body = 0.55 - 0.08 * (u / half).powi(2).min(1.0);
            body -= 0.1 * gauss(u * u, 0.3 * cun) * torso;
            body -= 0.08 * gauss((arc - elbow).powi(2), 0.25 * cun) * arm;
            for v in &s.spine {
                let d2 = (p.0 - v.0).powi(2) + (p.1 - v.1).powi(2);
                body += 0.12 * gauss(d2, 0.3 * cun);
            }
            img[r * n + c] = bg + mask * (body - bg);
        }
    }
    img
}

/// Render at `cfg.noise`. The lighting and the noise pattern depend only on
/// `seed`, so raising the noise level scales the same perturbation.
pub fn render(s: &Skeleton, cfg: &RenderConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    s.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = clean(s, cfg, &mut rng);
    for v in img.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + cfg.noise * z).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, s.image_size, s.image_size], img)
}
