//! Proportional placement rules for back acupoints.

use serde::{Deserialize, Serialize};

use super::skeleton::{Skeleton, VERTEBRAE};
use crate::error::{Error, Result};

/// Reference location a rule starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Anchor {
    /// Spinous process of vertebra `index` (0 is C7).
    Vertebra { index: usize },
    /// Depression below vertebra `index`, midway to the next one.
    Depression { index: usize },
    /// A point placed by an earlier rule.
    Point { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcupointRule {
    pub name: String,
    pub anchor: Anchor,
    /// Signed offset perpendicular to the spine; positive is image right.
    pub lateral_offset_cun: f64,
    /// When set, the result is the midpoint between the offset point and
    /// this anchor.
    #[serde(default)]
    pub midpoint_with: Option<Anchor>,
}

impl AcupointRule {
    fn new(name: &str, anchor: Anchor, cun: f64) -> Self {
        Self {
            name: name.into(),
            anchor,
            lateral_offset_cun: cun,
            midpoint_with: None,
        }
    }

    fn is_lateral(&self) -> bool {
        self.lateral_offset_cun != 0.0 || matches!(self.anchor, Anchor::Point { .. })
    }
}

fn vertebra(index: usize) -> Anchor {
    Anchor::Vertebra { index }
}

fn depression(index: usize) -> Anchor {
    Anchor::Depression { index }
}

/// The default nineteen back, shoulder and arm points.
pub fn default_rules() -> Vec<AcupointRule> {
    let mut quyu = AcupointRule::new(
        "quyu",
        Anchor::Point {
            name: "ruyu".into(),
        },
        0.0,
    );
    quyu.midpoint_with = Some(vertebra(2));
    vec![
        AcupointRule::new("dazhui", depression(0), 0.0),
        AcupointRule::new("taodao", depression(1), 0.0),
        AcupointRule::new("shenzhu", depression(3), 0.0),
        AcupointRule::new("shendao", depression(5), 0.0),
        AcupointRule::new("lingtai", depression(6), 0.0),
        AcupointRule::new("zhiyang", depression(7), 0.0),
        AcupointRule::new("jinsuo", depression(9), 0.0),
        AcupointRule::new("zhongshu", depression(10), 0.0),
        AcupointRule::new("jizhong", depression(11), 0.0),
        AcupointRule::new("xuanshu", depression(13), 0.0),
        AcupointRule::new("mingmen", depression(14), 0.0),
        AcupointRule::new("yaoyangguan", depression(16), 0.0),
        AcupointRule::new("dashu", vertebra(1), -1.5),
        AcupointRule::new("fufen", vertebra(2), -3.0),
        AcupointRule::new("ruyu", vertebra(3), 4.0),
        quyu,
        AcupointRule::new("riyue", vertebra(7), -4.0),
        AcupointRule::new("chize", vertebra(13), 4.0),
        AcupointRule::new("taiyuan", vertebra(17), 4.0),
    ]
}

/// Split every lateral rule into a left and a right copy.
pub fn bilateral(rules: &[AcupointRule]) -> Vec<AcupointRule> {
    let mut out = Vec::new();
    for r in rules {
        if !r.is_lateral() {
            out.push(r.clone());
            continue;
        }
        for (suffix, sign) in [("l", -1.0), ("r", 1.0)] {
            let mut c = r.clone();
            c.name = format!("{}_{suffix}", r.name);
            c.lateral_offset_cun = sign * r.lateral_offset_cun.abs();
            if let Anchor::Point { name } = &r.anchor {
                c.anchor = Anchor::Point {
                    name: format!("{name}_{suffix}"),
                };
            }
            out.push(c);
        }
    }
    out
}

fn resolve(s: &Skeleton, a: &Anchor, placed: &[(String, (f64, f64))]) -> Result<((f64, f64), (f64, f64))> {
    match a {
        Anchor::Vertebra { index } if *index < VERTEBRAE.min(s.spine.len()) => {
            Ok((s.spine[*index], s.tangent(*index)))
        }
        Anchor::Depression { index } if index + 1 < VERTEBRAE.min(s.spine.len()) => {
            let (a, b) = (s.spine[*index], s.spine[index + 1]);
            let t = super::skeleton::unit(b.0 - a.0, b.1 - a.1);
            Ok((((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0), t))
        }
        Anchor::Point { name } => placed
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| (*p, (0.0, 0.0)))
            .ok_or_else(|| Error::Rule(format!("point {name} is not placed before use"))),
        other => Err(Error::Rule(format!("anchor {other:?} is not on the skeleton"))),
    }
}

/// Pixel position of every rule, in rule order.
pub fn place_acupoints(s: &Skeleton, rules: &[AcupointRule]) -> Result<Vec<(f64, f64)>> {
    s.check()?;
    let cun = s.cun();
    let mut placed: Vec<(String, (f64, f64))> = Vec::with_capacity(rules.len());
    for r in rules {
        let (base, t) = resolve(s, &r.anchor, &placed)?;
        let mut p = base;
        if r.lateral_offset_cun != 0.0 {
            if t == (0.0, 0.0) {
                return Err(Error::Rule(format!("{}: a placed point has no spine direction", r.name)));
            }
            // The tangent points down the spine, so this normal points image right.
            let normal = (t.1, -t.0);
            p = (
                base.0 + normal.0 * r.lateral_offset_cun * cun,
                base.1 + normal.1 * r.lateral_offset_cun * cun,
            );
        }
        if let Some(other) = &r.midpoint_with {
            let (q, _) = resolve(s, other, &placed)?;
            p = ((p.0 + q.0) / 2.0, (p.1 + q.1) / 2.0);
        }
        if placed.iter().any(|(n, _)| n == &r.name) {
            return Err(Error::Rule(format!("duplicate rule name {}", r.name)));
        }
        placed.push((r.name.clone(), p));
    }
    Ok(placed.into_iter().map(|(_, p)| p).collect())
}
