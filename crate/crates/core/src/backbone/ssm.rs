//! Linear time-invariant state-space systems: zero-order-hold
//! discretization and the two equivalent evaluation modes.
//!
//! Continuous system `x' = A x + B u`, observed as `y = C x + D u`. After
//! discretization with step `Δ` the recurrence is
//! `x_{t+1} = Ā x_t + B̄ u_t`, `y_t = C x_t + D u_t`.

use super::scan::{inclusive_scan, Associative};
use crate::error::{Error, Result};
use crate::numerics::ops::gemm_acc;
use crate::numerics::{matmul, Tensor};

/// Below this norm of `Δ·A` the input matrix uses the analytic limit `Δ·B`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// State transition matrix, either diagonal or dense `[n×n]`.
#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix {
    Diagonal(Vec<f64>),
    Dense(Tensor),
}

impl StateMatrix {
    pub fn dim(&self) -> usize {
        match self {
            StateMatrix::Diagonal(v) => v.len(),
            StateMatrix::Dense(t) => t.shape()[0],
        }
    }

    /// `M·x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            StateMatrix::Diagonal(a) => a.iter().zip(x).map(|(a, x)| a * x).collect(),
            StateMatrix::Dense(m) => {
                let n = x.len();
                let mut out = vec![0.0; n];
                gemm_acc(n, n, 1, m.data(), x, &mut out);
                out
            }
        }
    }

    /// `later · self` as a matrix product.
    fn then(&self, later: &StateMatrix) -> StateMatrix {
        match (self, later) {
            (StateMatrix::Diagonal(a), StateMatrix::Diagonal(b)) => {
                StateMatrix::Diagonal(a.iter().zip(b).map(|(a, b)| a * b).collect())
            }
            _ => {
                let (a, b) = (self.to_dense(), later.to_dense());
                StateMatrix::Dense(matmul(&b, &a).expect("square matrices of one size"))
            }
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match self {
            StateMatrix::Dense(t) => t.clone(),
            StateMatrix::Diagonal(v) => {
                let n = v.len();
                let mut t = Tensor::zeros(vec![n, n]);
                for (i, &x) in v.iter().enumerate() {
                    t.data_mut()[i * n + i] = x;
                }
                t
            }
        }
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        match self {
            StateMatrix::Diagonal(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            StateMatrix::Dense(t) => {
                let n = t.shape()[0];
                (0..n)
                    .map(|i| t.row(i).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Continuous-time state-space parameters.
///
/// The general model also carries process noise `w_t ~ N(0, Q)` and
/// observation noise `v_t`; both are fixed to zero here, so the system is
/// deterministic.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// State matrix `[n×n]` or its diagonal.
    pub a: StateMatrix,
    /// Input matrix `[n×d_in]`.
    pub b: Tensor,
    /// Output matrix `[d_out×n]`.
    pub c: Tensor,
    /// Feedthrough `[d_out×d_in]`.
    pub d: Tensor,
    /// Step size `Δ > 0`.
    pub delta: f64,
}

/// Discretized system ready for scanning.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: StateMatrix,
    pub b_bar: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b_bar.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.c.shape()[0]
    }
}

fn check_shapes(n: usize, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<()> {
    let (bn, d_in) = b.dims2()?;
    let (d_out, cn) = c.dims2()?;
    let (dd_out, dd_in) = d.dims2()?;
    if bn != n || cn != n || dd_out != d_out || dd_in != d_in {
        return Err(Error::dim(format!(
            "inconsistent SSM shapes: state {n}, B {:?}, C {:?}, D {:?}",
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(())
}

/// Matrix exponential by scaling and squaring around a Taylor series.
pub fn expm(m: &Tensor) -> Result<Tensor> {
    let (n, n2) = m.dims2()?;
    if n != n2 {
        return Err(Error::dim("expm needs a square matrix"));
    }
    let norm = (0..n)
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = m.scale(scale);
    let mut result = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    for k in 1..=30 {
        term = matmul(&term, &a)?.scale(1.0 / k as f64);
        result = result.add(&term)?;
        if term.data().iter().all(|v| v.abs() <= 1e-18) {
            break;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result)?;
    }
    Ok(result)
}

/// Zero-order-hold discretization:
/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`.
///
/// For diagonal `A` each mode is handled on its own and falls back to
/// `Δ·B` when `|Δ·a_i| < ZOH_LIMIT`. Dense `A` uses the block exponential
/// of `[[ΔA, ΔB], [0, 0]]`, which yields `B̄` without inverting `ΔA`.
pub fn discretize_zoh(p: &SsmParams) -> Result<DiscreteSsm> {
    if !(p.delta > 0.0 && p.delta.is_finite()) {
        return Err(Error::param(format!("step size must be positive, got {}", p.delta)));
    }
    let n = p.a.dim();
    check_shapes(n, &p.b, &p.c, &p.d)?;
    let d_in = p.b.shape()[1];
    let delta = p.delta;
    let (a_bar, b_bar) = match &p.a {
        StateMatrix::Diagonal(a) => {
            let mut b_bar = vec![0.0; n * d_in];
            let a_bar = a
                .iter()
                .enumerate()
                .map(|(i, &ai)| {
                    let z = delta * ai;
                    let coef = if z.abs() < ZOH_LIMIT { delta } else { z.exp_m1() / ai };
                    for j in 0..d_in {
                        b_bar[i * d_in + j] = coef * p.b.get2(i, j);
                    }
                    z.exp()
                })
                .collect();
            (StateMatrix::Diagonal(a_bar), Tensor::new(vec![n, d_in], b_bar)?)
        }
        StateMatrix::Dense(a) => {
            let da = a.scale(delta);
            if p.a.inf_norm() * delta < ZOH_LIMIT {
                (StateMatrix::Dense(expm(&da)?), p.b.scale(delta))
            } else {
                let size = n + d_in;
                let mut aug = Tensor::zeros(vec![size, size]);
                for i in 0..n {
                    for j in 0..n {
                        aug.data_mut()[i * size + j] = da.get2(i, j);
                    }
                    for j in 0..d_in {
                        aug.data_mut()[i * size + n + j] = delta * p.b.get2(i, j);
                    }
                }
                let e = expm(&aug)?;
                let a_bar = Tensor::from_fn(vec![n, n], |k| e.get2(k / n, k % n));
                let b_bar = Tensor::from_fn(vec![n, d_in], |k| e.get2(k / d_in, n + k % d_in));
                (StateMatrix::Dense(a_bar), b_bar)
            }
        }
    };
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
        d: p.d.clone(),
    })
}

fn check_input(s: &DiscreteSsm, u: &Tensor) -> Result<usize> {
    check_shapes(s.state_dim(), &s.b_bar, &s.c, &s.d)?;
    let (t, d_in) = u.dims2()?;
    if d_in != s.input_dim() {
        return Err(Error::dim(format!(
            "input width {d_in} differs from system input width {}",
            s.input_dim()
        )));
    }
    Ok(t)
}

fn observe(s: &DiscreteSsm, x: &[f64], u: &[f64], out: &mut [f64]) {
    let (n, d_in, d_out) = (s.state_dim(), s.input_dim(), s.output_dim());
    out.iter_mut().for_each(|v| *v = 0.0);
    gemm_acc(d_out, n, 1, s.c.data(), x, out);
    gemm_acc(d_out, d_in, 1, s.d.data(), u, out);
}

fn drive(s: &DiscreteSsm, u: &[f64]) -> Vec<f64> {
    let n = s.state_dim();
    let mut bu = vec![0.0; n];
    gemm_acc(n, s.input_dim(), 1, s.b_bar.data(), u, &mut bu);
    bu
}

/// Sequential evaluation: O(T) time and O(n) working state.
pub fn scan_recurrent(s: &DiscreteSsm, u: &Tensor, x0: Option<&[f64]>) -> Result<Tensor> {
    let t = check_input(s, u)?;
    let n = s.state_dim();
    let mut x = match x0 {
        Some(x0) if x0.len() != n => {
            return Err(Error::dim(format!("initial state has length {}, expected {n}", x0.len())))
        }
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let d_out = s.output_dim();
    let mut y = vec![0.0; t * d_out];
    for step in 0..t {
        let ut = u.row(step);
        observe(s, &x, ut, &mut y[step * d_out..(step + 1) * d_out]);
        let bu = drive(s, ut);
        x = s.a_bar.apply(&x).iter().zip(&bu).map(|(a, b)| a + b).collect();
    }
    Tensor::new(vec![t, d_out], y)
}

/// One affine state update `x ↦ M x + v`.
#[derive(Clone, Debug)]
struct AffineStep {
    mult: StateMatrix,
    add: Vec<f64>,
}

impl Associative for AffineStep {
    fn combine(&self, later: &Self) -> Self {
        let moved = later.mult.apply(&self.add);
        AffineStep {
            mult: self.mult.then(&later.mult),
            add: moved.iter().zip(&later.add).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Same map as [`scan_recurrent`] with a zero initial state, computed by an
/// associative prefix scan over `(Ā, B̄ u_t)` pairs.
pub fn scan_parallel(s: &DiscreteSsm, u: &Tensor) -> Result<Tensor> {
    let t = check_input(s, u)?;
    let n = s.state_dim();
    let d_out = s.output_dim();
    let steps: Vec<AffineStep> = (0..t)
        .map(|i| AffineStep {
            mult: s.a_bar.clone(),
            add: drive(s, u.row(i)),
        })
        .collect();
    let prefix = inclusive_scan(&steps);
    let zero = vec![0.0; n];
    let mut y = vec![0.0; t * d_out];
    for step in 0..t {
        let x = if step == 0 { &zero } else { &prefix[step - 1].add };
        observe(s, x, u.row(step), &mut y[step * d_out..(step + 1) * d_out]);
    }
    Tensor::new(vec![t, d_out], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_system(rng: &mut ChaCha8Rng, n: usize, d_in: usize, d_out: usize, dense: bool) -> SsmParams {
        let mut m = |r: usize, c: usize| Tensor::from_fn(vec![r, c], |_| rng.random_range(-1.0..1.0));
        let b = m(n, d_in);
        let c = m(d_out, n);
        let d = m(d_out, d_in);
        let a = if dense {
            // Shifted so every Gershgorin disc lies in the left half-plane.
            let shift = Tensor::identity(n).scale(0.5 * n as f64 + 0.1);
            StateMatrix::Dense(m(n, n).scale(0.5).sub(&shift).unwrap())
        } else {
            StateMatrix::Diagonal((0..n).map(|_| -rng.random_range(0.0..4.0)).collect())
        };
        SsmParams {
            a,
            b,
            c,
            d,
            delta: rng.random_range(0.01..1.0),
        }
    }

    /// exp(z) and (exp(z) - 1)/z by direct power series, 60 terms.
    fn series(z: f64) -> (f64, f64) {
        let (mut e, mut phi, mut term) = (1.0, 1.0, 1.0);
        for k in 1..60 {
            term *= z / k as f64;
            e += term;
            phi += term / (k + 1) as f64;
        }
        (e, phi)
    }

    #[test]
    fn zero_a_uses_limit() {
        let p = SsmParams {
            a: StateMatrix::Diagonal(vec![0.0]),
            b: t2(&[&[2.0]]),
            c: t2(&[&[1.0]]),
            d: t2(&[&[0.0]]),
            delta: 0.5,
        };
        let s = discretize_zoh(&p).unwrap();
        assert_eq!(s.a_bar, StateMatrix::Diagonal(vec![1.0]));
        assert_eq!(s.b_bar.data(), &[1.0]);
    }

    #[test]
    fn scalar_decay() {
        let p = SsmParams {
            a: StateMatrix::Diagonal(vec![-1.0]),
            b: t2(&[&[1.0]]),
            c: t2(&[&[1.0]]),
            d: t2(&[&[0.0]]),
            delta: 1.0,
        };
        let s = discretize_zoh(&p).unwrap();
        let StateMatrix::Diagonal(a) = s.a_bar else { panic!() };
        assert!((a[0] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = random_system(&mut rng, 2, 1, 1, false);
        for bad in [0.0, -1.0, f64::NAN] {
            p.delta = bad;
            assert!(matches!(discretize_zoh(&p), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn diagonal_matches_series_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_system(&mut rng, 6, 3, 2, false);
            let s = discretize_zoh(&p).unwrap();
            let StateMatrix::Diagonal(a_bar) = &s.a_bar else { panic!() };
            let StateMatrix::Diagonal(a) = &p.a else { panic!() };
            for i in 0..6 {
                let (e, phi) = series(p.delta * a[i]);
                assert!((a_bar[i] - e).abs() <= 1e-10);
                for j in 0..3 {
                    let expect = phi * p.delta * p.b.get2(i, j);
                    assert!((s.b_bar.get2(i, j) - expect).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn dense_path_agrees_with_diagonal_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_system(&mut rng, 5, 2, 3, false);
            let dense = SsmParams {
                a: StateMatrix::Dense(p.a.to_dense()),
                ..p.clone()
            };
            let s1 = discretize_zoh(&p).unwrap();
            let s2 = discretize_zoh(&dense).unwrap();
            assert!(s1.a_bar.to_dense().max_abs_diff(&s2.a_bar.to_dense()) < 1e-12);
            assert!(s1.b_bar.max_abs_diff(&s2.b_bar) < 1e-12);
        }
    }

    #[test]
    fn stability_and_small_step_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..16);
            let a: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..10.0)).collect();
            let mut p = SsmParams {
                a: StateMatrix::Diagonal(a),
                b: Tensor::zeros(vec![n, 1]),
                c: Tensor::zeros(vec![1, n]),
                d: Tensor::zeros(vec![1, 1]),
                delta: rng.random_range(1e-6..100.0),
            };
            let StateMatrix::Diagonal(ab) = discretize_zoh(&p).unwrap().a_bar else { panic!() };
            assert!(ab.iter().all(|v| v.abs() <= 1.0));
            p.delta = 1e-8;
            let StateMatrix::Diagonal(ab) = discretize_zoh(&p).unwrap().a_bar else { panic!() };
            assert!(ab.iter().all(|v| (v - 1.0).abs() <= 1e-6));
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = discretize_zoh(&random_system(&mut rng, 4, 2, 3, false)).unwrap();
        let u = Tensor::zeros(vec![9, 2]);
        assert!(scan_recurrent(&s, &u, None).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(scan_parallel(&s, &u).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_uses_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = discretize_zoh(&random_system(&mut rng, 3, 2, 2, true)).unwrap();
        let u = Tensor::from_fn(vec![1, 2], |i| i as f64 + 0.5);
        let x0 = [0.3, -0.2, 0.7];
        let y = scan_recurrent(&s, &u, Some(&x0)).unwrap();
        for o in 0..2 {
            let mut expect = 0.0;
            for i in 0..3 {
                expect += s.c.get2(o, i) * x0[i];
            }
            for j in 0..2 {
                expect += s.d.get2(o, j) * u.get2(0, j);
            }
            assert!((y.get2(0, o) - expect).abs() < 1e-15);
        }
        let yp = scan_parallel(&s, &u).unwrap();
        let yr = scan_recurrent(&s, &u, None).unwrap();
        assert_eq!(yp, yr);
    }

    #[test]
    fn zero_transition_unrolled_by_hand() {
        // Ā = 0: x_1 = B̄u_0, x_2 = B̄u_1, so y_0 = D u_0, y_t = C B̄ u_{t-1} + D u_t.
        let s = DiscreteSsm {
            a_bar: StateMatrix::Diagonal(vec![0.0, 0.0]),
            b_bar: t2(&[&[1.0], &[2.0]]),
            c: t2(&[&[3.0, -1.0]]),
            d: t2(&[&[0.5]]),
        };
        let u = t2(&[&[1.0], &[-2.0], &[4.0]]);
        let cb = 3.0 * 1.0 - 2.0;
        let expect = [0.5 * 1.0, cb * 1.0 + 0.5 * -2.0, cb * -2.0 + 0.5 * 4.0];
        for y in [scan_recurrent(&s, &u, None).unwrap(), scan_parallel(&s, &u).unwrap()] {
            assert_eq!(y.data(), &expect);
        }
    }

    #[test]
    fn modes_agree_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..40 {
            let n = rng.random_range(1..=16);
            let t = rng.random_range(1..=64);
            let p = random_system(&mut rng, n, 2, 2, i % 4 == 0);
            let s = discretize_zoh(&p).unwrap();
            let u = Tensor::from_fn(vec![t, 2], |_| rng.random_range(-1.0..1.0));
            let a = scan_recurrent(&s, &u, None).unwrap();
            let b = scan_parallel(&s, &u).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = discretize_zoh(&random_system(&mut rng, 3, 2, 2, false)).unwrap();
        let u = Tensor::zeros(vec![4, 3]);
        assert!(matches!(scan_recurrent(&s, &u, None), Err(Error::Dimension(_))));
        assert!(matches!(scan_parallel(&s, &u), Err(Error::Dimension(_))));
        let u = Tensor::zeros(vec![4, 2]);
        assert!(scan_recurrent(&s, &u, Some(&[0.0])).is_err());
    }
}
