//! Randomized spine and body proportions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C7, T1..T12, L1..L5.
pub const VERTEBRAE: usize = 18;

/// Conventional label of vertebra `i`.
pub fn vertebra_name(i: usize) -> String {
    match i {
        0 => "C7".into(),
        1..=12 => format!("T{i}"),
        _ => format!("L{}", i - 12),
    }
}

/// Sampling ranges, as fractions of the image side unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonConfig {
    pub image_size: usize,
    /// Vertical position of C7.
    pub top: [f64; 2],
    /// Vertical extent from C7 to L5 before tilt.
    pub length: [f64; 2],
    /// Horizontal offset of the spine from the image center.
    pub center_jitter: f64,
    /// Peak sideways bow of the spine.
    pub curvature: [f64; 2],
    /// Rotation about the spine midpoint, in degrees.
    pub tilt_deg: [f64; 2],
    pub body_width: [f64; 2],
    /// Relative jitter of each intervertebral gap.
    pub spacing_jitter: f64,
    /// One cun is the body width divided by this.
    pub cun_divisor: f64,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            top: [0.17, 0.23],
            length: [0.58, 0.66],
            center_jitter: 0.04,
            curvature: [-0.03, 0.03],
            tilt_deg: [-6.0, 6.0],
            body_width: [0.40, 0.48],
            spacing_jitter: 0.1,
            cun_divisor: 6.0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name}: invalid range {r:?}")));
    }
    Ok(())
}

impl SkeletonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        for (name, r) in [
            ("top", self.top),
            ("length", self.length),
            ("curvature", self.curvature),
            ("tilt_deg", self.tilt_deg),
            ("body_width", self.body_width),
        ] {
            check_range(name, r)?;
        }
        if self.body_width[0] <= 0.0 || self.length[0] <= 0.0 {
            return Err(Error::Config("body_width and length must be positive".into()));
        }
        if self.top[0] < 0.05 || self.top[1] + self.length[1] > 0.95 {
            return Err(Error::Config("spine must stay inside the image".into()));
        }
        if !(self.cun_divisor >= 2.0 && self.cun_divisor.is_finite()) {
            return Err(Error::Config("cun_divisor must be at least 2".into()));
        }
        if self.tilt_deg[0].abs().max(self.tilt_deg[1].abs()) >= 30.0 {
            return Err(Error::Config("tilt must stay below 30 degrees".into()));
        }
        if !(0.0..0.5).contains(&self.spacing_jitter) || !(0.0..0.2).contains(&self.center_jitter) {
            return Err(Error::Config("jitter out of range".into()));
        }
        Ok(())
    }

    /// Same ranges with curvature, tilt and jitter removed.
    pub fn upright(&self) -> Self {
        Self {
            center_jitter: 0.0,
            curvature: [0.0, 0.0],
            tilt_deg: [0.0, 0.0],
            spacing_jitter: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Vertebra landmarks in pixels, C7 first.
    pub spine: Vec<(f64, f64)>,
    /// Pixels.
    pub body_width: f64,
    pub curvature: f64,
    pub tilt_deg: f64,
    /// C7 to L5 extent in pixels before tilt.
    pub scale: f64,
    pub image_size: usize,
    pub cun_divisor: f64,
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

pub fn sample_skeleton(cfg: &SkeletonConfig, seed: u64) -> Result<Skeleton> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size as f64;
    let top = draw(&mut rng, cfg.top) * size;
    let length = draw(&mut rng, cfg.length) * size;
    let cx = size / 2.0 + draw(&mut rng, [-cfg.center_jitter, cfg.center_jitter]) * size;
    let curvature = draw(&mut rng, cfg.curvature);
    let tilt_deg = draw(&mut rng, cfg.tilt_deg);
    let body_width = draw(&mut rng, cfg.body_width) * size;

    // Lumbar vertebrae are taller than thoracic ones.
    let gaps: Vec<f64> = (0..VERTEBRAE - 1)
        .map(|i| {
            let base = if i >= 12 { 1.3 } else { 1.0 };
            base * (1.0 + draw(&mut rng, [-cfg.spacing_jitter, cfg.spacing_jitter]))
        })
        .collect();
    let total: f64 = gaps.iter().sum();
    let mut t = vec![0.0];
    for g in &gaps {
        t.push(t.last().unwrap() + g / total);
    }

    let (sin, cos) = tilt_deg.to_radians().sin_cos();
    let pivot = (cx, top + length / 2.0);
    let spine = t
        .iter()
        .map(|&t| {
            let x = cx + curvature * size * (std::f64::consts::PI * t).sin();
            let y = top + t * length;
            let (dx, dy) = (x - pivot.0, y - pivot.1);
            (pivot.0 + cos * dx - sin * dy, pivot.1 + sin * dx + cos * dy)
        })
        .collect();
    Ok(Skeleton {
        spine,
        body_width,
        curvature,
        tilt_deg,
        scale: length,
        image_size: cfg.image_size,
        cun_divisor: cfg.cun_divisor,
    })
}

impl Skeleton {
    pub fn cun(&self) -> f64 {
        self.body_width / self.cun_divisor
    }

    pub fn check(&self) -> Result<()> {
        if !(self.cun_divisor > 0.0) {
            return Err(Error::Rule("cun divisor must be positive".into()));
        }
        if !(self.body_width > 0.0) {
            return Err(Error::Rule("body width must be positive".into()));
        }
        if self.spine.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(Error::Rule("spine landmarks are not ordered top to bottom".into()));
        }
        Ok(())
    }

    /// Unit vector down the spine at vertebra `i`.
    pub fn tangent(&self, i: usize) -> (f64, f64) {
        let a = self.spine[i.saturating_sub(1)];
        let b = self.spine[(i + 1).min(self.spine.len() - 1)];
        unit(b.0 - a.0, b.1 - a.1)
    }
}

pub(crate) fn unit(x: f64, y: f64) -> (f64, f64) {
    let n = x.hypot(y);
    (x / n, y / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = SkeletonConfig::default();
        assert_eq!(sample_skeleton(&c, 42).unwrap(), sample_skeleton(&c, 42).unwrap());
        assert_ne!(sample_skeleton(&c, 42).unwrap(), sample_skeleton(&c, 43).unwrap());
    }

    #[test]
    fn upright_spine_is_vertical_and_even() {
        let c = SkeletonConfig::default().upright();
        let s = sample_skeleton(&c, 5).unwrap();
        let x0 = s.spine[0].0;
        assert!(s.spine.iter().all(|p| p.0 == x0));
        let gaps: Vec<f64> = s.spine.windows(2).map(|w| w[1].1 - w[0].1).collect();
        for g in &gaps[1..12] {
            assert!((g - gaps[0]).abs() < 1e-9);
        }
        for g in &gaps[12..] {
            assert!((g - 1.3 * gaps[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn seed_sweep_keeps_invariants() {
        let c = SkeletonConfig::default();
        for seed in 0..1000 {
            let s = sample_skeleton(&c, seed).unwrap();
            s.check().unwrap();
            assert_eq!(s.spine.len(), VERTEBRAE);
        }
    }

    #[test]
    fn names() {
        assert_eq!(vertebra_name(0), "C7");
        assert_eq!(vertebra_name(7), "T7");
        assert_eq!(vertebra_name(17), "L5");
    }

    #[test]
    fn rejects_bad_ranges() {
        let c = SkeletonConfig {
            body_width: [0.5, 0.4],
            ..Default::default()
        };
        assert!(matches!(sample_skeleton(&c, 0), Err(Error::Config(_))));
    }
}
