//! Differentiable dense operations. Every forward has a matching backward
//! that maps the output gradient to input gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// `c[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
///
/// The inner index runs in ascending order, so results are bitwise equal to
/// the textbook triple loop.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

/// Gradients of `a·b` with respect to `a` and `b` given the output gradient.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad_out.shape() != [m, n] {
        return Err(Error::dim("matmul_backward: output gradient shape"));
    }
    let mut ga = vec![0.0; m * k];
    gemm_nt_acc(m, n, k, grad_out.data(), b.data(), &mut ga);
    let mut gb = vec![0.0; k * n];
    gemm_tn_acc(m, k, n, a.data(), grad_out.data(), &mut gb);
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of [`softmax`] given its output `y` and the output gradient.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(y.shape(), axis)?;
    let (yv, gv) = (y.data(), grad_out.data());
    let mut gx = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let s: f64 = (0..len).map(|j| yv[at(j)] * gv[at(j)]).sum();
            for j in 0..len {
                gx[at(j)] = yv[at(j)] * (gv[at(j)] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// In-place softmax over one contiguous slice.
pub fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// d softplus / dx.
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Elementwise activation with its derivative, applied to a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Softplus => softplus_grad(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply(v))
    }

    /// Gradient with respect to the pre-activation input `x`.
    pub fn backward(self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| g * self.derivative(v))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved state of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization of `x[rows×d]` with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<(Tensor, LayerNormCache)> {
    let (rows, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm: affine parameter length"));
    }
    let mut y = vec![0.0; rows * d];
    let mut x_hat = vec![0.0; rows * d];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            x_hat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    Ok((
        Tensor::new(vec![rows, d], y)?,
        LayerNormCache {
            x_hat: Tensor::new(vec![rows, d], x_hat)?,
            inv_std,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (rows, d) = cache.x_hat.dims2()?;
    let mut gx = vec![0.0; rows * d];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut dxh = vec![0.0; d];
    for r in 0..rows {
        let xh = cache.x_hat.row(r);
        let go = grad_out.row(r);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            gg[j] += go[j] * xh[j];
            gb[j] += go[j];
            dxh[j] = go[j] * gamma[j];
            s1 += dxh[j];
            s2 += dxh[j] * xh[j];
        }
        let n = d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            gx[r * d + j] = is * (dxh[j] - s1 / n - xh[j] * s2 / n);
        }
    }
    Ok((Tensor::new(vec![rows, d], gx)?, gg, gb))
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

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut c = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                c.data_mut()[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let loss = |a: &Tensor, b: &Tensor| matmul(a, b).unwrap().mul(&w).unwrap().sum();
        let (ga, gb) = matmul_backward(&a, &b, &w).unwrap();
        let ra = grad_check(
            |x: &Tensor| Ok((loss(x, &b), ga.clone())),
            &a,
            GradCheck::default(),
        )
        .unwrap();
        assert!(ra.passed, "{ra:?}");
        let rb = grad_check(
            |x: &Tensor| Ok((loss(&a, x), gb.clone())),
            &b,
            GradCheck::default(),
        )
        .unwrap();
        assert!(rb.passed, "{rb:?}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_inner_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 5, 2], &mut rng).scale(20.0);
        let y = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..5).map(|j| y.data()[o * 10 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 6], &mut rng);
        let w = random(&[2, 6], &mut rng);
        let f = |x: &Tensor| {
            let y = softmax(x, 1)?;
            let g = softmax_backward(&y, &w, 1)?;
            Ok((y.mul(&w)?.sum(), g))
        };
        let r = grad_check(f, &x, GradCheck::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[12], &mut rng).scale(4.0);
        for act in [Activation::Silu, Activation::Softplus, Activation::Sigmoid] {
            let f = |x: &Tensor| {
                let y = act.forward(x);
                Ok((y.sum(), act.backward(x, &Tensor::full(vec![12], 1.0))))
            };
            let r = grad_check(f, &x, GradCheck::default()).unwrap();
            assert!(r.passed, "{act:?}: {r:?}");
        }
        assert!((softplus_inv(softplus(0.37)) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&[3, 5], &mut rng);
        let gamma: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = random(&[3, 5], &mut rng);
        let f = |x: &Tensor| {
            let (y, cache) = layer_norm(x, &gamma, &beta)?;
            let (gx, _, _) = layer_norm_backward(&cache, &gamma, &w)?;
            Ok((y.mul(&w)?.sum(), gx))
        };
        let r = grad_check(f, &x, GradCheck::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
