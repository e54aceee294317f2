//! Raw numeric kernels behind the tape ops.
//!
//! Everything here works on flat `f64` slices and is deterministic under
//! any thread count: parallel tasks own disjoint output regions and every
//! floating-point reduction runs in a fixed index order.

use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 32_768;

/// C[n,m] = A[n,k] * B[k,m]
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let work = n * k * m;
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * m..(l + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(m).enumerate() {
            row(i, r);
        }
    }
    out
}

/// C[n,m] = A[k,n]^T * B[k,m]
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let work = n * k * m;
    let row = |i: usize, out_row: &mut [f64]| {
        for l in 0..k {
            let a_li = a[l * n + i];
            let b_row = &b[l * m..(l + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_li * bv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(m).enumerate() {
            row(i, r);
        }
    }
    out
}

/// C[n,k] = A[n,m] * B[k,m]^T
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    let work = n * k * m;
    let row = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * m..(i + 1) * m];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * m..(j + 1) * m];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(k).enumerate() {
            row(i, r);
        }
    }
    out
}

/// Spatial geometry of a stride-1 correlation.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    /// Top/left zero padding; (kh/2, kw/2) for "same", (0, 0) for "valid".
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.oh * self.ow
    }
}

/// out[b,co,oh,ow] = bias[co] + sum_{ci,kh,kw} x[b,ci,oh+kh-ph,ow+kw-pw] * w[co,ci,kh,kw]
pub fn conv2d_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let sample = |b: usize, out_b: &mut [f64]| {
        let x_b = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        for co in 0..g.c_out {
            let out_map = &mut out_b[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            if let Some(bias) = bias {
                out_map.fill(bias[co]);
            }
            for ci in 0..g.c_in {
                let x_map = &x_b[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + kh) * g.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(out_map, x_map, wv, g, kh, kw);
                    }
                }
            }
        }
    };
    let per_sample = g.c_out * g.oh * g.ow;
    if g.out_len() * g.c_in * g.kh * g.kw >= PAR_THRESHOLD {
        out.par_chunks_mut(per_sample).enumerate().for_each(|(b, r)| sample(b, r));
    } else {
        for (b, r) in out.chunks_mut(per_sample).enumerate() {
            sample(b, r);
        }
    }
    out
}

/// out_map[oh,·] += wv * x_map[oh+kh-ph, ·+kw-pw] over the valid window.
#[inline]
fn accumulate_shifted(out_map: &mut [f64], x_map: &[f64], wv: f64, g: &ConvGeom, kh: usize, kw: usize) {
    // ih = oh + kh - ph must land in [0, h); same for iw.
    let oh_lo = g.ph.saturating_sub(kh);
    let oh_hi = (g.h + g.ph - kh).min(g.oh);
    let ow_lo = g.pw.saturating_sub(kw);
    let ow_hi = (g.w + g.pw - kw).min(g.ow);
    for oh in oh_lo..oh_hi {
        let ih = oh + kh - g.ph;
        let out_row = &mut out_map[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
        let x_row = &x_map[ih * g.w + ow_lo + kw - g.pw..ih * g.w + ow_hi + kw - g.pw];
        for (o, &xv) in out_row.iter_mut().zip(x_row) {
            *o += wv * xv;
        }
    }
}

/// Gradient with respect to the convolution input.
pub fn conv2d_bwd_x(grad: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.c_in * g.h * g.w];
    let per_sample = g.c_in * g.h * g.w;
    let sample = |b: usize, dx_b: &mut [f64]| {
        let grad_b = &grad[b * g.c_out * g.oh * g.ow..(b + 1) * g.c_out * g.oh * g.ow];
        for ci in 0..g.c_in {
            let dx_map = &mut dx_b[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for co in 0..g.c_out {
                let g_map = &grad_b[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + kh) * g.kw + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        // dx[ih,iw] += wv * grad[oh,ow] with ih = oh+kh-ph.
                        let oh_lo = g.ph.saturating_sub(kh);
                        let oh_hi = (g.h + g.ph - kh).min(g.oh);
                        let ow_lo = g.pw.saturating_sub(kw);
                        let ow_hi = (g.w + g.pw - kw).min(g.ow);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - g.ph;
                            let dx_row = &mut dx_map[ih * g.w + ow_lo + kw - g.pw..ih * g.w + ow_hi + kw - g.pw];
                            let g_row = &g_map[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
                            for (d, &gv) in dx_row.iter_mut().zip(g_row) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    };
    if g.out_len() * g.c_in * g.kh * g.kw >= PAR_THRESHOLD {
        dx.par_chunks_mut(per_sample).enumerate().for_each(|(b, r)| sample(b, r));
    } else {
        for (b, r) in dx.chunks_mut(per_sample).enumerate() {
            sample(b, r);
        }
    }
    dx
}

/// Gradient with respect to the kernel. Parallel over output channels so
/// each task owns a disjoint kernel slice; the batch reduction inside runs
/// in index order.
pub fn conv2d_bwd_w(x: &[f64], grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dw = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    let per_co = g.c_in * g.kh * g.kw;
    let channel = |co: usize, dw_co: &mut [f64]| {
        for b in 0..g.batch {
            let x_b = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
            let g_map = &grad[(b * g.c_out + co) * g.oh * g.ow..(b * g.c_out + co + 1) * g.oh * g.ow];
            for ci in 0..g.c_in {
                let x_map = &x_b[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let oh_lo = g.ph.saturating_sub(kh);
                        let oh_hi = (g.h + g.ph - kh).min(g.oh);
                        let ow_lo = g.pw.saturating_sub(kw);
                        let ow_hi = (g.w + g.pw - kw).min(g.ow);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - g.ph;
                            let g_row = &g_map[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
                            let x_row = &x_map[ih * g.w + ow_lo + kw - g.pw..ih * g.w + ow_hi + kw - g.pw];
                            for (gv, xv) in g_row.iter().zip(x_row) {
                                acc += gv * xv;
                            }
                        }
                        dw_co[(ci * g.kh + kh) * g.kw + kw] += acc;
                    }
                }
            }
        }
    };
    if g.out_len() * g.c_in * g.kh * g.kw >= PAR_THRESHOLD {
        dw.par_chunks_mut(per_co).enumerate().for_each(|(co, r)| channel(co, r));
    } else {
        for (co, r) in dw.chunks_mut(per_co).enumerate() {
            channel(co, r);
        }
    }
    dw
}

/// Gradient with respect to the bias: sum of `grad` over batch and space.
pub fn conv2d_bwd_b(grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut db = vec![0.0; g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let g_map = &grad[(b * g.c_out + co) * g.oh * g.ow..(b * g.c_out + co + 1) * g.oh * g.ow];
            db[co] += g_map.iter().sum::<f64>();
        }
    }
    db
}

/// 2x2 max pooling with stride 2 over [batch*channels, h, w] maps.
/// Returns the pooled values and the flat input index of each maximum.
pub fn maxpool2x2_fwd(x: &[f64], maps: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; maps * oh * ow];
    let mut arg = vec![0usize; maps * oh * ow];
    for m in 0..maps {
        let base = m * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let i0 = base + (2 * i) * w + 2 * j;
                let i1 = i0 + 1;
                let i2 = i0 + w;
                let i3 = i2 + 1;
                // First strict maximum wins; scan order fixes tie-breaking.
                let mut best = i0;
                for cand in [i1, i2, i3] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out[m * oh * ow + i * ow + j] = x[best];
                arg[m * oh * ow + i * ow + j] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2_bwd(grad: &[f64], arg: &[usize], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (gv, &idx) in grad.iter().zip(arg) {
        dx[idx] += gv;
    }
    dx
}
