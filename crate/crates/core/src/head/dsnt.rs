//! Differentiable expected-coordinate extraction from a response map.

use crate::error::Result;
use crate::numerics::ops::softmax_slice;
use crate::numerics::Tensor;

/// Normalized center of every cell of an `h×w` grid in raster order.
pub fn cell_centers(h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64));
        }
    }
    out
}

/// Softmax over all cells, then the expected cell center.
pub fn soft_argmax(response: &Tensor) -> Result<(f64, f64)> {
    let (h, w) = response.dims2()?;
    let mut p = response.data().to_vec();
    Ok(soft_argmax_flat(&mut p, &cell_centers(h, w)))
}

/// In-place variant over a flat response; `p` holds the probabilities on
/// return.
pub fn soft_argmax_flat(p: &mut [f64], centers: &[(f64, f64)]) -> (f64, f64) {
    softmax_slice(p);
    let mut x = 0.0;
    let mut y = 0.0;
    for (pi, (cx, cy)) in p.iter().zip(centers) {
        x += pi * cx;
        y += pi * cy;
    }
    (x, y)
}

/// Gradient of the response given gradients of the expected coordinate.
pub fn soft_argmax_backward(p: &[f64], centers: &[(f64, f64)], mean: (f64, f64), g: (f64, f64)) -> Vec<f64> {
    p.iter()
        .zip(centers)
        .map(|(pi, (cx, cy))| pi * ((cx - mean.0) * g.0 + (cy - mean.1) * g.1))
        .collect()
}
