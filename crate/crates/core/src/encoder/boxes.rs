//! Axis-aligned boxes in center form and their overlap.

use serde::{Deserialize, Serialize};

/// Center-form box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.corners();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    /// Intersect with the unit square.
    pub fn clamped(&self) -> Self {
        let [x0, y0, x1, y1] = self.corners();
        let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        Self::from_corners(x0, y0, x1.max(x0), y1.max(y0))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &Box, b: &Box) -> f64 {
    iou_with_grad(a, b).0
}

/// IoU together with its gradient with respect to `a`'s `(cx, cy, w, h)`.
pub fn iou_with_grad(a: &Box, b: &Box) -> (f64, [f64; 4]) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    let (aw, ah) = ((ax1 - ax0).max(0.0), (ay1 - ay0).max(0.0));
    let area_a = aw * ah;
    let inter = if iw > 0.0 && ih > 0.0 { iw * ih } else { 0.0 };
    let union = area_a + b.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union;

    // Gradients of the intersection wrt a's corners.
    let (mut gi_x0, mut gi_x1, mut gi_y0, mut gi_y1) = (0.0, 0.0, 0.0, 0.0);
    if inter > 0.0 {
        if ax0 > bx0 {
            gi_x0 = -ih;
        }
        if ax1 < bx1 {
            gi_x1 = ih;
        }
        if ay0 > by0 {
            gi_y0 = -iw;
        }
        if ay1 < by1 {
            gi_y1 = iw;
        }
    }
    let g_inter = [gi_x0 + gi_x1, gi_y0 + gi_y1, 0.5 * (gi_x1 - gi_x0), 0.5 * (gi_y1 - gi_y0)];
    let g_area = [
        0.0,
        0.0,
        if a.w > 0.0 { ah } else { 0.0 },
        if a.h > 0.0 { aw } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let g_union = g_area[k] - g_inter[k];
        grad[k] = (g_inter[k] * union - inter * g_union) / (union * union);
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Overlap measured by counting cells of a fine grid.
    fn raster_iou(a: &Box, b: &Box, lo: f64, hi: f64, cells: usize) -> f64 {
        let step = (hi - lo) / cells as f64;
        let inside = |bx: &Box, x: f64, y: f64| {
            let [x0, y0, x1, y1] = bx.corners();
            x >= x0 && x < x1 && y >= y0 && y < y1
        };
        let (mut i, mut u) = (0usize, 0usize);
        for r in 0..cells {
            for c in 0..cells {
                let x = lo + (c as f64 + 0.5) * step;
                let y = lo + (r as f64 + 0.5) * step;
                let (p, q) = (inside(a, x, y), inside(b, x, y));
                i += (p && q) as usize;
                u += (p || q) as usize;
            }
        }
        i as f64 / u as f64
    }

    #[test]
    fn basic_cases() {
        let a = Box::new(0.5, 0.5, 0.2, 0.4);
        assert_eq!(iou(&a, &a), 1.0);
        let far = Box::new(0.1, 0.1, 0.05, 0.05);
        assert_eq!(iou(&a, &far), 0.0);
        let dot = Box::new(0.3, 0.3, 0.0, 0.0);
        assert_eq!(iou(&dot, &dot), 0.0);
    }

    #[test]
    fn one_third_overlap() {
        let a = Box::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = Box::from_corners(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!((raster_iou(&a, &b, 0.0, 3.0, 600) - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn clamping_stays_in_unit_square() {
        let b = Box::new(0.95, -0.02, 0.3, 0.1).clamped();
        let [x0, y0, x1, y1] = b.corners();
        for v in [x0, y0, x1, y1] {
            assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
        assert!(b.w >= 0.0 && b.h >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = Box::new(0.5, 0.45, 0.3, 0.2);
        for a in [Box::new(0.42, 0.52, 0.25, 0.3), Box::new(0.61, 0.4, 0.1, 0.35), Box::new(0.5, 0.47, 0.5, 0.1)] {
            let (_, g) = iou_with_grad(&a, &b);
            let eps = 1e-6;
            for k in 0..4 {
                let mut p = a.to_array();
                let mut m = a.to_array();
                p[k] += eps;
                m[k] -= eps;
                let f = |v: [f64; 4]| iou(&Box::new(v[0], v[1], v[2], v[3]), &b);
                let numeric = (f(p) - f(m)) / (2.0 * eps);
                assert!((numeric - g[k]).abs() < 1e-6, "{k}: {numeric} vs {}", g[k]);
            }
        }
    }

    fn arb_box() -> impl Strategy<Value = Box> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..0.6f64, 0.0..0.6f64).prop_map(|(cx, cy, w, h)| Box::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }
            let [ax0, ay0, ax1, ay1] = a.corners();
            let [bx0, by0, bx1, by1] = b.corners();
            let inter = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) * (ay1.min(by1) - ay0.max(by0)).max(0.0);
            prop_assert_eq!(v == 0.0, inter == 0.0);
        }
    }
}
