//! Data-dependent linear recurrence operators applied per group.
//!
//! Selective scan (gated leaky integrator with output gate), per step t:
//!
//! ```text
//! g_t = sigmoid(Wg x_t + bg)
//! u_t = Wu x_t + bu
//! h_t = g_t * h_{t-1} + (1 - g_t) * u_t        (h_0 = 0)
//! y_t = h_t * silu(Wo x_t + bo)
//! ```
//!
//! The chunked variant computes the same recurrence through the associative
//! composition (a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2) of the per-step
//! affine maps h -> a h + b, folded per chunk.
//!
//! WKV scan (RWKV-style), per channel with decay w >= 0 and bonus u:
//!
//! ```text
//! r_t = Wr x_t;  k_t = Wk x_t;  v_t = Wv x_t
//! a_t = e^-w a_{t-1} + e^{k_t} v_t
//! b_t = e^-w b_{t-1} + e^{k_t}
//! y_t = sigmoid(r_t) * (a_{t-1} e^-w + e^{u+k_t} v_t)
//!                    / (b_{t-1} e^-w + e^{u+k_t} + eps)
//! ```
//!
//! computed in max-shifted log space so no intermediate exponential can
//! overflow. Masked (padded) slots are skipped: state passes through
//! unchanged and the output row is zero.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::{matvec, matvec_t, sigmoid, silu, silu_deriv, Mat};
use crate::partition::GroupLayout;
use crate::voxel::SparseFeatureSet;

/// Division guard in the WKV denominator.
pub const EPS_WKV: f64 = 1e-8;

const LN_EPS_WKV: f64 = -18.420680743952367; // ln(1e-8)

#[derive(Debug, Clone)]
pub struct SelectiveScanParams {
    pub wg: Mat,
    pub bg: Vec<f64>,
    pub wu: Mat,
    pub bu: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

impl SelectiveScanParams {
    /// Random parameters at a trainable scale.
    pub fn random(rng: &mut crate::rng::Rng, c: usize) -> Self {
        let m = |rng: &mut crate::rng::Rng| Mat::from_fn(c, c, |_, _| rng.normal() * 0.5);
        let v = |rng: &mut crate::rng::Rng| (0..c).map(|_| rng.normal() * 0.5).collect();
        SelectiveScanParams {
            wg: m(rng),
            bg: v(rng),
            wu: m(rng),
            bu: v(rng),
            wo: m(rng),
            bo: v(rng),
        }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        for (m, len, ctx) in [
            (&self.wg, self.bg.len(), "selective scan gate"),
            (&self.wu, self.bu.len(), "selective scan update"),
            (&self.wo, self.bo.len(), "selective scan output"),
        ] {
            if m.rows != c || m.cols != c {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: c,
                    actual: m.rows.max(m.cols),
                });
            }
            if len != c {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: c,
                    actual: len,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WkvScanParams {
    pub wr: Mat,
    pub wk: Mat,
    pub wv: Mat,
    /// Per-channel decay, >= 0 elementwise.
    pub w: Vec<f64>,
    /// Per-channel first-token bonus.
    pub u: Vec<f64>,
}

impl WkvScanParams {
    /// Random parameters with a strictly positive decay.
    pub fn random(rng: &mut crate::rng::Rng, c: usize) -> Self {
        let m = |rng: &mut crate::rng::Rng| Mat::from_fn(c, c, |_, _| rng.normal() * 0.5);
        WkvScanParams {
            wr: m(rng),
            wk: m(rng),
            wv: m(rng),
            w: (0..c).map(|_| rng.normal().abs() * 0.5 + 0.05).collect(),
            u: (0..c).map(|_| rng.normal() * 0.5).collect(),
        }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        for m in [&self.wr, &self.wk, &self.wv] {
            if m.rows != c || m.cols != c {
                return Err(Error::DimensionMismatch {
                    context: "wkv projection",
                    expected: c,
                    actual: m.rows.max(m.cols),
                });
            }
        }
        if self.w.len() != c || self.u.len() != c {
            return Err(Error::DimensionMismatch {
                context: "wkv decay/bonus",
                expected: c,
                actual: self.w.len().min(self.u.len()),
            });
        }
        if self.w.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("wkv decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// One recurrence operator: its parameters define the state update.
#[derive(Debug, Clone)]
pub enum ScanOperator {
    Selective(SelectiveScanParams),
    Wkv(WkvScanParams),
}

fn check_inputs(x: &Mat, mask: &[bool], c: usize) -> Result<()> {
    if x.cols != c {
        return Err(Error::DimensionMismatch {
            context: "scan input channels",
            expected: c,
            actual: x.cols,
        });
    }
    if mask.len() != x.rows {
        return Err(Error::DimensionMismatch {
            context: "scan mask length",
            expected: x.rows,
            actual: mask.len(),
        });
    }
    Ok(())
}

// --- selective scan ----------------------------------------------------------

/// Forward pass with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SelectiveSaved {
    pub y: Mat,
    g: Mat,
    u: Mat,
    h_prev: Mat,
    h: Mat,
    zo: Mat,
    mask: Vec<bool>,
    pub madds: u64,
}

pub fn selective_forward(x: &Mat, p: &SelectiveScanParams, mask: &[bool]) -> Result<SelectiveSaved> {
    let c = p.bg.len();
    p.validate(c)?;
    check_inputs(x, mask, c)?;
    let t_len = x.rows;
    let mut y = Mat::zeros(t_len, c);
    let mut g_m = Mat::zeros(t_len, c);
    let mut u_m = Mat::zeros(t_len, c);
    let mut hp_m = Mat::zeros(t_len, c);
    let mut h_m = Mat::zeros(t_len, c);
    let mut zo_m = Mat::zeros(t_len, c);
    let mut h = vec![0.0f64; c];
    let mut zg = vec![0.0f64; c];
    let mut zu = vec![0.0f64; c];
    let mut zo = vec![0.0f64; c];
    let mut madds: u64 = 0;
    let per_step = 3 * (c as u64) * (c as u64) + 3 * c as u64;
    for t in 0..t_len {
        if mask[t] {
            continue; // padded slot: state passes through, output stays zero
        }
        let xr = x.row(t);
        matvec(&p.wg, xr, &mut zg);
        matvec(&p.wu, xr, &mut zu);
        matvec(&p.wo, xr, &mut zo);
        hp_m.row_mut(t).copy_from_slice(&h);
        for i in 0..c {
            let g = sigmoid(zg[i] + p.bg[i]);
            let u = zu[i] + p.bu[i];
            let a = g;
            let b = (1.0 - g) * u;
            h[i] = a * h[i] + b;
            let z = zo[i] + p.bo[i];
            y.row_mut(t)[i] = h[i] * silu(z);
            g_m.row_mut(t)[i] = g;
            u_m.row_mut(t)[i] = u;
            zo_m.row_mut(t)[i] = z;
        }
        h_m.row_mut(t).copy_from_slice(&h);
        madds += per_step;
    }
    Ok(SelectiveSaved {
        y,
        g: g_m,
        u: u_m,
        h_prev: hp_m,
        h: h_m,
        zo: zo_m,
        mask: mask.to_vec(),
        madds,
    })
}

/// Sequential reference scan.
pub fn selective_scan_seq(x: &Mat, p: &SelectiveScanParams, mask: &[bool]) -> Result<Mat> {
    Ok(selective_forward(x, p, mask)?.y)
}

/// Output-only scan with a running state and no saved intermediates; the
/// per-step expressions match `selective_forward` exactly, so outputs are
/// bit-identical. Used where only y and the op count matter (benchmarks).
pub fn selective_scan_inference(
    x: &Mat,
    p: &SelectiveScanParams,
    mask: &[bool],
) -> Result<(Mat, u64)> {
    let c = p.bg.len();
    p.validate(c)?;
    check_inputs(x, mask, c)?;
    let t_len = x.rows;
    let mut y = Mat::zeros(t_len, c);
    let mut h = vec![0.0f64; c];
    let mut zg = vec![0.0f64; c];
    let mut zu = vec![0.0f64; c];
    let mut zo = vec![0.0f64; c];
    let mut madds = 0u64;
    let per_step = 3 * (c as u64) * (c as u64) + 3 * c as u64;
    for t in 0..t_len {
        if mask[t] {
            continue;
        }
        let xr = x.row(t);
        matvec(&p.wg, xr, &mut zg);
        matvec(&p.wu, xr, &mut zu);
        matvec(&p.wo, xr, &mut zo);
        let yr = y.row_mut(t);
        for i in 0..c {
            let g = sigmoid(zg[i] + p.bg[i]);
            let u = zu[i] + p.bu[i];
            let a = g;
            let b = (1.0 - g) * u;
            h[i] = a * h[i] + b;
            yr[i] = h[i] * silu(zo[i] + p.bo[i]);
        }
        madds += per_step;
    }
    Ok((y, madds))
}

/// Same semantics as the sequential scan, computed chunk by chunk via the
/// associative composition of per-step affine maps.
pub fn selective_scan_chunked(
    x: &Mat,
    p: &SelectiveScanParams,
    mask: &[bool],
    chunk: usize,
) -> Result<Mat> {
    if chunk < 1 {
        return Err(Error::InvalidConfig(format!("chunk must be >= 1, got {chunk}")));
    }
    let c = p.bg.len();
    p.validate(c)?;
    check_inputs(x, mask, c)?;
    let t_len = x.rows;
    let mut y = Mat::zeros(t_len, c);
    let mut h_entry = vec![0.0f64; c];
    let mut entry_is_zero = true;
    let mut zg = vec![0.0f64; c];
    let mut zu = vec![0.0f64; c];
    let mut zo = vec![0.0f64; c];
    let mut a_cum = vec![1.0f64; c];
    let mut b_cum = vec![0.0f64; c];
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        a_cum.fill(1.0);
        b_cum.fill(0.0);
        let mut any_valid = false;
        for t in start..end {
            if mask[t] {
                continue;
            }
            any_valid = true;
            let xr = x.row(t);
            matvec(&p.wg, xr, &mut zg);
            matvec(&p.wu, xr, &mut zu);
            matvec(&p.wo, xr, &mut zo);
            for i in 0..c {
                let g = sigmoid(zg[i] + p.bg[i]);
                let u = zu[i] + p.bu[i];
                let a = g;
                let b = (1.0 - g) * u;
                // compose the step onto the running chunk-relative map
                a_cum[i] *= a;
                b_cum[i] = a * b_cum[i] + b;
                // state at t relative to the chunk entry
                let h = if entry_is_zero {
                    b_cum[i]
                } else {
                    a_cum[i] * h_entry[i] + b_cum[i]
                };
                y.row_mut(t)[i] = h * silu(zo[i] + p.bo[i]);
            }
        }
        if any_valid {
            // carry the chunk-exit state forward
            for i in 0..c {
                h_entry[i] = if entry_is_zero {
                    b_cum[i]
                } else {
                    a_cum[i] * h_entry[i] + b_cum[i]
                };
            }
            entry_is_zero = false;
        }
        start = end;
    }
    Ok(y)
}

/// Backward through the sequential recurrence (BPTT).
#[derive(Debug, Clone)]
pub struct SelectiveGrads {
    pub dwg: Mat,
    pub dbg: Vec<f64>,
    pub dwu: Mat,
    pub dbu: Vec<f64>,
    pub dwo: Mat,
    pub dbo: Vec<f64>,
}

pub fn selective_backward(
    x: &Mat,
    p: &SelectiveScanParams,
    saved: &SelectiveSaved,
    dy: &Mat,
) -> (Mat, SelectiveGrads) {
    let c = p.bg.len();
    let t_len = x.rows;
    let mut dx = Mat::zeros(t_len, c);
    let mut grads = SelectiveGrads {
        dwg: Mat::zeros(c, c),
        dbg: vec![0.0; c],
        dwu: Mat::zeros(c, c),
        dbu: vec![0.0; c],
        dwo: Mat::zeros(c, c),
        dbo: vec![0.0; c],
    };
    let mut dh = vec![0.0f64; c];
    let mut dzg = vec![0.0f64; c];
    let mut du = vec![0.0f64; c];
    let mut dzo = vec![0.0f64; c];
    let mut tmp = vec![0.0f64; c];
    for t in (0..t_len).rev() {
        if saved.mask[t] {
            continue;
        }
        let xr = x.row(t);
        let dyr = dy.row(t);
        let g = saved.g.row(t);
        let u = saved.u.row(t);
        let hp = saved.h_prev.row(t);
        let h = saved.h.row(t);
        let zo = saved.zo.row(t);
        for i in 0..c {
            let s = silu(zo[i]);
            let total = dh[i] + dyr[i] * s; // dL/dh_t
            dzo[i] = dyr[i] * h[i] * silu_deriv(zo[i]);
            let dg = total * (hp[i] - u[i]);
            du[i] = total * (1.0 - g[i]);
            dzg[i] = dg * g[i] * (1.0 - g[i]);
            dh[i] = total * g[i]; // dL/dh_{t-1}
        }
        // parameter and input gradients for the three projections
        for (w, dz, db) in [
            (&p.wg, &dzg, &mut grads.dbg),
            (&p.wu, &du, &mut grads.dbu),
            (&p.wo, &dzo, &mut grads.dbo),
        ] {
            matvec_t(w, dz, &mut tmp);
            for i in 0..c {
                dx.row_mut(t)[i] += tmp[i];
                db[i] += dz[i];
            }
        }
        for o in 0..c {
            let wgr = grads.dwg.row_mut(o);
            for i in 0..c {
                wgr[i] += dzg[o] * xr[i];
            }
        }
        for o in 0..c {
            let wur = grads.dwu.row_mut(o);
            for i in 0..c {
                wur[i] += du[o] * xr[i];
            }
        }
        for o in 0..c {
            let wor = grads.dwo.row_mut(o);
            for i in 0..c {
                wor[i] += dzo[o] * xr[i];
            }
        }
    }
    (dx, grads)
}

// --- WKV scan ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct WkvSaved {
    pub y: Mat,
    k: Mat,
    v: Mat,
    sig: Mat,
    ratio: Mat,
    invq: Mat,
    a_prev: Mat,
    b_prev: Mat,
    mask: Vec<bool>,
    pub madds: u64,
}

pub fn wkv_forward(x: &Mat, p: &WkvScanParams, mask: &[bool]) -> Result<WkvSaved> {
    let c = p.w.len();
    p.validate(c)?;
    check_inputs(x, mask, c)?;
    let t_len = x.rows;
    let mut y = Mat::zeros(t_len, c);
    let mut k_m = Mat::zeros(t_len, c);
    let mut v_m = Mat::zeros(t_len, c);
    let mut sig_m = Mat::zeros(t_len, c);
    let mut ratio_m = Mat::zeros(t_len, c);
    let mut invq_m = Mat::zeros(t_len, c);
    let mut ap_m = Mat::zeros(t_len, c);
    let mut bp_m = Mat::zeros(t_len, c);
    // shifted state per channel: true numerator = a * e^p, denominator = b * e^p
    let mut a = vec![0.0f64; c];
    let mut b = vec![0.0f64; c];
    let mut pexp = vec![f64::NEG_INFINITY; c];
    let mut r_t = vec![0.0f64; c];
    let mut k_t = vec![0.0f64; c];
    let mut v_t = vec![0.0f64; c];
    let mut madds: u64 = 0;
    let per_step = 3 * (c as u64) * (c as u64) + 8 * c as u64;
    for t in 0..t_len {
        if mask[t] {
            continue;
        }
        let xr = x.row(t);
        matvec(&p.wr, xr, &mut r_t);
        matvec(&p.wk, xr, &mut k_t);
        matvec(&p.wv, xr, &mut v_t);
        for i in 0..c {
            let w = p.w[i];
            let u = p.u[i];
            let k = k_t[i];
            let v = v_t[i];
            // output: shift so every exponential stays representable
            let s = (pexp[i] - w).max(u + k).max(LN_EPS_WKV);
            let e1 = if pexp[i].is_finite() { (pexp[i] - w - s).exp() } else { 0.0 };
            let e2 = (u + k - s).exp();
            let num_s = a[i] * e1 + v * e2;
            let den_s = b[i] * e1 + e2 + EPS_WKV * (-s).exp();
            let sg = sigmoid(r_t[i]);
            let ratio = num_s / den_s;
            y.row_mut(t)[i] = sg * ratio;
            // saved in true scale for BPTT (desk-scale magnitudes)
            let scale = if pexp[i].is_finite() { pexp[i].exp() } else { 0.0 };
            ap_m.row_mut(t)[i] = a[i] * scale;
            bp_m.row_mut(t)[i] = b[i] * scale;
            sig_m.row_mut(t)[i] = sg;
            ratio_m.row_mut(t)[i] = ratio;
            invq_m.row_mut(t)[i] = (-s).exp() / den_s;
            // state update with its own shift
            let s2 = (pexp[i] - w).max(k);
            let f1 = if pexp[i].is_finite() { (pexp[i] - w - s2).exp() } else { 0.0 };
            let f2 = (k - s2).exp();
            a[i] = a[i] * f1 + v * f2;
            b[i] = b[i] * f1 + f2;
            pexp[i] = s2;
        }
        k_m.row_mut(t).copy_from_slice(&k_t);
        v_m.row_mut(t).copy_from_slice(&v_t);
        madds += per_step;
    }
    Ok(WkvSaved {
        y,
        k: k_m,
        v: v_m,
        sig: sig_m,
        ratio: ratio_m,
        invq: invq_m,
        a_prev: ap_m,
        b_prev: bp_m,
        mask: mask.to_vec(),
        madds,
    })
}

pub fn wkv_scan(x: &Mat, p: &WkvScanParams, mask: &[bool]) -> Result<Mat> {
    Ok(wkv_forward(x, p, mask)?.y)
}

/// Output-only WKV scan; same stable recurrences as `wkv_forward` without
/// the saved state, bit-identical outputs.
pub fn wkv_scan_inference(x: &Mat, p: &WkvScanParams, mask: &[bool]) -> Result<(Mat, u64)> {
    let c = p.w.len();
    p.validate(c)?;
    check_inputs(x, mask, c)?;
    let t_len = x.rows;
    let mut y = Mat::zeros(t_len, c);
    let mut a = vec![0.0f64; c];
    let mut b = vec![0.0f64; c];
    let mut pexp = vec![f64::NEG_INFINITY; c];
    let mut r_t = vec![0.0f64; c];
    let mut k_t = vec![0.0f64; c];
    let mut v_t = vec![0.0f64; c];
    let mut madds = 0u64;
    let per_step = 3 * (c as u64) * (c as u64) + 8 * c as u64;
    for t in 0..t_len {
        if mask[t] {
            continue;
        }
        let xr = x.row(t);
        matvec(&p.wr, xr, &mut r_t);
        matvec(&p.wk, xr, &mut k_t);
        matvec(&p.wv, xr, &mut v_t);
        let yr = y.row_mut(t);
        for i in 0..c {
            let w = p.w[i];
            let u = p.u[i];
            let k = k_t[i];
            let v = v_t[i];
            let s = (pexp[i] - w).max(u + k).max(LN_EPS_WKV);
            let e1 = if pexp[i].is_finite() { (pexp[i] - w - s).exp() } else { 0.0 };
            let e2 = (u + k - s).exp();
            let num_s = a[i] * e1 + v * e2;
            let den_s = b[i] * e1 + e2 + EPS_WKV * (-s).exp();
            yr[i] = sigmoid(r_t[i]) * (num_s / den_s);
            let s2 = (pexp[i] - w).max(k);
            let f1 = if pexp[i].is_finite() { (pexp[i] - w - s2).exp() } else { 0.0 };
            let f2 = (k - s2).exp();
            a[i] = a[i] * f1 + v * f2;
            b[i] = b[i] * f1 + f2;
            pexp[i] = s2;
        }
        madds += per_step;
    }
    Ok((y, madds))
}

#[derive(Debug, Clone)]
pub struct WkvGrads {
    pub dwr: Mat,
    pub dwk: Mat,
    pub dwv: Mat,
    pub dw: Vec<f64>,
    pub du: Vec<f64>,
}

pub fn wkv_backward(x: &Mat, p: &WkvScanParams, saved: &WkvSaved, dy: &Mat) -> (Mat, WkvGrads) {
    let c = p.w.len();
    let t_len = x.rows;
    let mut dr = Mat::zeros(t_len, c);
    let mut dk = Mat::zeros(t_len, c);
    let mut dv = Mat::zeros(t_len, c);
    let mut grads = WkvGrads {
        dwr: Mat::zeros(c, c),
        dwk: Mat::zeros(c, c),
        dwv: Mat::zeros(c, c),
        dw: vec![0.0; c],
        du: vec![0.0; c],
    };
    for i in 0..c {
        let lam = (-p.w[i]).exp();
        let mut g_a = 0.0f64; // dL/dA_t entering step t from the future
        let mut g_b = 0.0f64;
        for t in (0..t_len).rev() {
            if saved.mask[t] {
                continue;
            }
            let dyv = dy.at(t, i);
            let sg = saved.sig.at(t, i);
            let ratio = saved.ratio.at(t, i);
            let invq = saved.invq.at(t, i);
            let k = saved.k.at(t, i);
            let v = saved.v.at(t, i);
            let a_prev = saved.a_prev.at(t, i);
            let b_prev = saved.b_prev.at(t, i);
            // y = sigmoid(r) * P/Q
            let dsig = dyv * ratio;
            *dr.at_mut(t, i) += dsig * sg * (1.0 - sg);
            let dp = dyv * sg * invq; // dL/dP
            let dq = -dp * ratio; // dL/dQ
            let ek = (p.u[i] + k).exp();
            let mut dk_acc = dp * ek * v + dq * ek;
            let mut dv_acc = dp * ek;
            grads.du[i] += dp * ek * v + dq * ek;
            grads.dw[i] += -dp * lam * a_prev - dq * lam * b_prev;
            // recurrence A_t = lam A_{t-1} + e^k v, B_t = lam B_{t-1} + e^k
            let ekk = k.exp();
            dk_acc += g_a * ekk * v + g_b * ekk;
            dv_acc += g_a * ekk;
            grads.dw[i] += -g_a * lam * a_prev - g_b * lam * b_prev;
            *dk.at_mut(t, i) += dk_acc;
            *dv.at_mut(t, i) += dv_acc;
            // adjoint for A_{t-1}: through the recurrence and through P_t, Q_t
            g_a = lam * (g_a + dp);
            g_b = lam * (g_b + dq);
        }
    }
    // pull projection gradients back to x and the three weight matrices
    let mut dx = Mat::zeros(t_len, c);
    let mut tmp = vec![0.0f64; c];
    for t in 0..t_len {
        if saved.mask[t] {
            continue;
        }
        let xr = x.row(t);
        for (w, dz, dw_m) in [
            (&p.wr, dr.row(t), &mut grads.dwr),
            (&p.wk, dk.row(t), &mut grads.dwk),
            (&p.wv, dv.row(t), &mut grads.dwv),
        ] {
            matvec_t(w, dz, &mut tmp);
            for i in 0..c {
                dx.row_mut(t)[i] += tmp[i];
            }
            for o in 0..c {
                let row = dw_m.row_mut(o);
                for i in 0..c {
                    row[i] += dz[o] * xr[i];
                }
            }
        }
    }
    (dx, grads)
}

// --- group scan ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ScanSaved {
    Selective(SelectiveSaved),
    Wkv(WkvSaved),
}

impl ScanSaved {
    pub fn y(&self) -> &Mat {
        match self {
            ScanSaved::Selective(s) => &s.y,
            ScanSaved::Wkv(s) => &s.y,
        }
    }

    pub fn madds(&self) -> u64 {
        match self {
            ScanSaved::Selective(s) => s.madds,
            ScanSaved::Wkv(s) => s.madds,
        }
    }
}

/// Builds the padded per-group input and mask for group `rows`.
pub(crate) fn pack_group(features: &Mat, rows: &[usize], group_size: usize) -> (Mat, Vec<bool>) {
    let c = features.cols;
    let mut x = Mat::zeros(group_size, c);
    let mut mask = vec![true; group_size];
    for (t, &r) in rows.iter().enumerate() {
        x.row_mut(t).copy_from_slice(features.row(r));
        mask[t] = false;
    }
    (x, mask)
}

pub(crate) fn run_group(
    features: &Mat,
    rows: &[usize],
    group_size: usize,
    op: &ScanOperator,
) -> Result<ScanSaved> {
    let (x, mask) = pack_group(features, rows, group_size);
    match op {
        ScanOperator::Selective(p) => Ok(ScanSaved::Selective(selective_forward(&x, p, &mask)?)),
        ScanOperator::Wkv(p) => Ok(ScanSaved::Wkv(wkv_forward(&x, p, &mask)?)),
    }
}

/// Independent forward over every group, in parallel, results in group order.
pub(crate) fn run_groups(
    features: &Mat,
    groups: &[Vec<usize>],
    group_size: usize,
    op: &ScanOperator,
) -> Result<Vec<ScanSaved>> {
    groups
        .par_iter()
        .map(|rows| run_group(features, rows, group_size, op))
        .collect()
}

/// Runs the chosen scan forward over every group independently and scatters
/// the outputs back through the permutation. Also returns total multiply-adds.
pub fn group_scan_with_ops(
    set: &SparseFeatureSet,
    layout: &GroupLayout,
    op: &ScanOperator,
) -> Result<(SparseFeatureSet, u64)> {
    if layout.perm.len() != set.len() {
        return Err(Error::LayoutMismatch {
            layout: layout.perm.len(),
            set: set.len(),
        });
    }
    let groups: Vec<Vec<usize>> = layout.groups().map(|g| g.to_vec()).collect();
    let results = run_groups(&set.features, &groups, layout.group_size, op)?;
    let mut out = Mat::zeros(set.len(), set.channels());
    let mut madds = 0u64;
    for (rows, saved) in groups.iter().zip(&results) {
        let y = saved.y();
        for (t, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(y.row(t));
        }
        madds += saved.madds();
    }
    Ok((
        SparseFeatureSet {
            grid: set.grid.clone(),
            coords: set.coords.clone(),
            features: out,
        },
        madds,
    ))
}

pub fn group_scan(
    set: &SparseFeatureSet,
    layout: &GroupLayout,
    op: &ScanOperator,
) -> Result<SparseFeatureSet> {
    Ok(group_scan_with_ops(set, layout, op)?.0)
}
