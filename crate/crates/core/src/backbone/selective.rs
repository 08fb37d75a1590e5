//! Input-dependent (selective) diagonal state-space scan and the residual
//! block built around it.
//!
//! Per channel `d` and state `n`:
//! `h_t = exp(Δ_t·a) h_{t-1} + φ(Δ_t, a) B_t u_t`, `y_t = Σ_n C_t h_t + D u_t`
//! with `φ(Δ, a) = (exp(Δa) − 1)/a`, the zero-order-hold input coefficient.

use super::scan::linear_recurrence_scan;
use super::ssm::ZOH_LIMIT;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numerics::ops::{self, Activation, LayerNormCache};
use crate::numerics::Tensor;
use crate::params::{Grads, ParamBuilder, ParamId, ParamStore};

/// How the state recurrence is evaluated. Both give the same result up to
/// rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    /// Step through time one token at a time.
    #[default]
    Recurrent,
    /// Associative prefix scan over the whole sequence.
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(ScanMode::Recurrent),
            "parallel" => Ok(ScanMode::Parallel),
            _ => Err(Error::param(format!("unknown scan mode {s}"))),
        }
    }
}

/// ZOH input coefficient `φ(Δ, a)` with `∂φ/∂a`.
fn phi(delta: f64, a: f64) -> (f64, f64) {
    let z = delta * a;
    if z.abs() < ZOH_LIMIT {
        return (delta, delta * delta * 0.5);
    }
    let value = z.exp_m1() / a;
    let da = if z.abs() < 1e-3 {
        delta * delta * (0.5 + z / 3.0 + z * z / 8.0)
    } else {
        delta * delta * (z * z.exp() - z.exp_m1()) / (z * z)
    };
    (value, da)
}

/// Sequence inputs of one selective scan.
#[derive(Clone, Debug)]
pub struct ScanInputs {
    /// `[T, D]`
    pub u: Tensor,
    /// `[T, D]`, positive.
    pub delta: Tensor,
    /// `[T, N]`
    pub b: Tensor,
    /// `[T, N]`
    pub c: Tensor,
    /// `[D, N]`, non-positive.
    pub a: Tensor,
    /// `[D]`
    pub skip: Vec<f64>,
}

impl ScanInputs {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (t, d) = self.u.dims2()?;
        let (tb, n) = self.b.dims2()?;
        let ok = self.delta.shape() == [t, d]
            && tb == t
            && self.c.shape() == [t, n]
            && self.a.shape() == [d, n]
            && self.skip.len() == d;
        if !ok {
            return Err(Error::dim("selective scan inputs disagree in shape"));
        }
        Ok((t, d, n))
    }
}

/// Saved forward quantities, each `[T, D, N]`.
#[derive(Clone, Debug)]
pub struct ScanCache {
    h: Vec<f64>,
    a_bar: Vec<f64>,
    phi: Vec<f64>,
    phi_da: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub u: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a: Tensor,
    pub skip: Vec<f64>,
}

pub fn selective_scan(x: &ScanInputs, mode: ScanMode) -> Result<(Tensor, ScanCache)> {
    let (t, d, n) = x.dims()?;
    let size = t * d * n;
    let mut a_bar = vec![0.0; size];
    let mut phi_v = vec![0.0; size];
    let mut phi_da = vec![0.0; size];
    let mut drive = vec![0.0; size];
    let a = x.a.data();
    for s in 0..t {
        let bt = x.b.row(s);
        for ch in 0..d {
            let dt = x.delta.get2(s, ch);
            let uv = x.u.get2(s, ch);
            for k in 0..n {
                let i = (s * d + ch) * n + k;
                let av = a[ch * n + k];
                let (p, pa) = phi(dt, av);
                a_bar[i] = (dt * av).exp();
                phi_v[i] = p;
                phi_da[i] = pa;
                drive[i] = p * bt[k] * uv;
            }
        }
    }
    let h = match mode {
        ScanMode::Recurrent => {
            let w = d * n;
            let mut h = drive;
            for s in 1..t {
                let (prev, cur) = h.split_at_mut(s * w);
                let prev = &prev[(s - 1) * w..];
                for k in 0..w {
                    cur[k] += a_bar[s * w + k] * prev[k];
                }
            }
            h
        }
        ScanMode::Parallel => {
            let mut mult = a_bar.clone();
            linear_recurrence_scan(&mut mult, &mut drive, d * n);
            drive
        }
    };
    let mut y = vec![0.0; t * d];
    for s in 0..t {
        let ct = x.c.row(s);
        for ch in 0..d {
            let hs = &h[(s * d + ch) * n..(s * d + ch + 1) * n];
            y[s * d + ch] = ops::dot(hs, ct) + x.skip[ch] * x.u.get2(s, ch);
        }
    }
    Ok((
        Tensor::new(vec![t, d], y)?,
        ScanCache {
            h,
            a_bar,
            phi: phi_v,
            phi_da,
        },
    ))
}

pub fn selective_scan_backward(x: &ScanInputs, cache: &ScanCache, gy: &Tensor, mode: ScanMode) -> Result<ScanGrads> {
    let (t, d, n) = x.dims()?;
    if gy.shape() != [t, d] {
        return Err(Error::dim("selective scan output gradient has the wrong shape"));
    }
    let w = d * n;
    // Direct contribution of y_t to h_t, then the reverse recurrence
    // g_t = s_t + ā_{t+1} g_{t+1}.
    let mut gh = vec![0.0; t * w];
    for s in 0..t {
        let ct = x.c.row(s);
        for ch in 0..d {
            let g = gy.get2(s, ch);
            for k in 0..n {
                gh[(s * d + ch) * n + k] = g * ct[k];
            }
        }
    }
    match mode {
        ScanMode::Recurrent => {
            for s in (0..t.saturating_sub(1)).rev() {
                let (cur, next) = gh.split_at_mut((s + 1) * w);
                let cur = &mut cur[s * w..];
                for k in 0..w {
                    cur[k] += cache.a_bar[(s + 1) * w + k] * next[k];
                }
            }
        }
        ScanMode::Parallel => {
            let mut mult = vec![0.0; t * w];
            let mut rev = vec![0.0; t * w];
            for r in 0..t {
                let s = t - 1 - r;
                rev[r * w..(r + 1) * w].copy_from_slice(&gh[s * w..(s + 1) * w]);
                if s + 1 < t {
                    mult[r * w..(r + 1) * w].copy_from_slice(&cache.a_bar[(s + 1) * w..(s + 2) * w]);
                }
            }
            linear_recurrence_scan(&mut mult, &mut rev, w);
            for r in 0..t {
                let s = t - 1 - r;
                gh[s * w..(s + 1) * w].copy_from_slice(&rev[r * w..(r + 1) * w]);
            }
        }
    }

    let a = x.a.data();
    let mut gu = Tensor::zeros(vec![t, d]);
    let mut gdelta = Tensor::zeros(vec![t, d]);
    let mut gb = Tensor::zeros(vec![t, n]);
    let mut gc = Tensor::zeros(vec![t, n]);
    let mut ga = Tensor::zeros(vec![d, n]);
    let mut gskip = vec![0.0; d];
    for s in 0..t {
        let bt = x.b.row(s);
        for ch in 0..d {
            let g = gy.get2(s, ch);
            let uv = x.u.get2(s, ch);
            let dt = x.delta.get2(s, ch);
            gskip[ch] += g * uv;
            let mut gu_acc = g * x.skip[ch];
            let mut gd_acc = 0.0;
            for k in 0..n {
                let i = (s * d + ch) * n + k;
                let hk = cache.h[i];
                gc.data_mut()[s * n + k] += g * hk;
                let g_h = gh[i];
                let ab = cache.a_bar[i];
                let av = a[ch * n + k];
                let h_prev = if s == 0 { 0.0 } else { cache.h[i - w] };
                let g_abar = g_h * h_prev;
                let g_phi = g_h * bt[k] * uv;
                gu_acc += g_h * cache.phi[i] * bt[k];
                gb.data_mut()[s * n + k] += g_h * cache.phi[i] * uv;
                // ā = exp(Δa): ∂ā/∂Δ = aā, ∂ā/∂a = Δā; ∂φ/∂Δ = ā.
                gd_acc += g_abar * av * ab + g_phi * ab;
                ga.data_mut()[ch * n + k] += g_abar * dt * ab + g_phi * cache.phi_da[i];
            }
            gu.data_mut()[s * d + ch] = gu_acc;
            gdelta.data_mut()[s * d + ch] = gd_acc;
        }
    }
    Ok(ScanGrads {
        u: gu,
        delta: gdelta,
        b: gb,
        c: gc,
        a: ga,
        skip: gskip,
    })
}

/// Pre-norm residual block: `x + W_out((scan(silu(W_in n)) ⊙ silu(W_z n)))`
/// where `n = LN(x)` and `Δ, B, C` are per-token projections of `n`.
#[derive(Clone, Debug)]
pub struct SelectiveBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub gate: Linear,
    pub dt_proj: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub out_proj: Linear,
    /// `log(−A)`, `[D, N]`.
    pub a_log: ParamId,
    /// Skip gain `D`, `[D]`.
    pub skip: ParamId,
    pub d_model: usize,
    pub d_state: usize,
}

#[derive(Clone, Debug)]
pub struct SelectiveBlockCache {
    x: Tensor,
    norm: LayerNormCache,
    n: Tensor,
    u_pre: Tensor,
    z_pre: Tensor,
    dt_pre: Tensor,
    inputs: ScanInputs,
    scan: ScanCache,
    y: Tensor,
    gated: Tensor,
}

impl SelectiveBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_model: usize, d_state: usize, out_gain: f64) -> Self {
        pb.scoped(name, |pb| {
            let norm = LayerNorm::new(pb, "norm", d_model);
            let in_proj = Linear::new(pb, "in_proj", d_model, d_model, true, 1.0);
            let gate = Linear::new(pb, "gate", d_model, d_model, true, 1.0);
            let dt_proj = Linear::new(pb, "dt_proj", d_model, d_model, true, 0.1);
            let b_proj = Linear::new(pb, "b_proj", d_model, d_state, false, 1.0);
            let c_proj = Linear::new(pb, "c_proj", d_model, d_state, false, 1.0);
            let out_proj = Linear::new(pb, "out_proj", d_model, d_model, true, out_gain);
            // Step sizes start log-uniform in [1e-3, 1e-1].
            let bias = dt_proj.b.expect("dt projection has a bias");
            let lo = 1e-3f64.ln();
            let hi = 1e-1f64.ln();
            let init: Vec<f64> = (0..d_model)
                .map(|i| {
                    let f = if d_model > 1 { i as f64 / (d_model - 1) as f64 } else { 0.5 };
                    ops::softplus_inv((lo + f * (hi - lo)).exp())
                })
                .collect();
            pb.store.get_mut(bias).data_mut().copy_from_slice(&init);
            let a_log = pb.tensor(
                "a_log",
                Tensor::from_fn(vec![d_model, d_state], |i| ((i % d_state) as f64 + 1.0).ln()),
            );
            let skip = pb.constant("skip", vec![d_model], 1.0);
            Self {
                norm,
                in_proj,
                gate,
                dt_proj,
                b_proj,
                c_proj,
                out_proj,
                a_log,
                skip,
                d_model,
                d_state,
            }
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, mode: ScanMode) -> Result<(Tensor, SelectiveBlockCache)> {
        let (n, norm) = self.norm.forward(ps, x)?;
        let u_pre = self.in_proj.forward(ps, &n)?;
        let z_pre = self.gate.forward(ps, &n)?;
        let dt_pre = self.dt_proj.forward(ps, &n)?;
        let inputs = ScanInputs {
            u: Activation::Silu.forward(&u_pre),
            delta: Activation::Softplus.forward(&dt_pre),
            b: self.b_proj.forward(ps, &n)?,
            c: self.c_proj.forward(ps, &n)?,
            a: ps.get(self.a_log).map(|v| -v.exp()),
            skip: ps.get(self.skip).data().to_vec(),
        };
        let (y, scan) = selective_scan(&inputs, mode)?;
        let gated = y.mul(&Activation::Silu.forward(&z_pre))?;
        let out = x.add(&self.out_proj.forward(ps, &gated)?)?;
        Ok((
            out,
            SelectiveBlockCache {
                x: x.clone(),
                norm,
                n,
                u_pre,
                z_pre,
                dt_pre,
                inputs,
                scan,
                y,
                gated,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &SelectiveBlockCache,
        grad_out: &Tensor,
        grads: &mut Grads,
        mode: ScanMode,
    ) -> Result<Tensor> {
        let g_gated = self.out_proj.backward(ps, &cache.gated, grad_out, grads)?;
        let sz = Activation::Silu.forward(&cache.z_pre);
        let gy = g_gated.mul(&sz)?;
        let g_sz = g_gated.mul(&cache.y)?;
        let g_zpre = Activation::Silu.backward(&cache.z_pre, &g_sz);
        let sg = selective_scan_backward(&cache.inputs, &cache.scan, &gy, mode)?;
        grads.accumulate(self.skip, &sg.skip);
        let ga: Vec<f64> = sg
            .a
            .data()
            .iter()
            .zip(cache.inputs.a.data())
            .map(|(g, a)| g * a)
            .collect();
        grads.accumulate(self.a_log, &ga);
        let g_upre = Activation::Silu.backward(&cache.u_pre, &sg.u);
        let g_dtpre = Activation::Softplus.backward(&cache.dt_pre, &sg.delta);
        let mut gn = self.in_proj.backward(ps, &cache.n, &g_upre, grads)?;
        gn.add_assign(&self.gate.backward(ps, &cache.n, &g_zpre, grads)?)?;
        gn.add_assign(&self.dt_proj.backward(ps, &cache.n, &g_dtpre, grads)?)?;
        gn.add_assign(&self.b_proj.backward(ps, &cache.n, &sg.b, grads)?)?;
        gn.add_assign(&self.c_proj.backward(ps, &cache.n, &sg.c, grads)?)?;
        let mut gx = self.norm.backward(ps, &cache.norm, &gn, grads)?;
        gx.add_assign(grad_out)?;
        debug_assert_eq!(gx.shape(), cache.x.shape());
        Ok(gx)
    }
}
