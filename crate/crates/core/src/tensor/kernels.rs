//! Numeric kernels behind the tape ops.
//!
//! Every reduction accumulates in f64 with a fixed element order, so outputs
//! are bit-identical whether a kernel runs serially or split across rayon
//! workers: each output element is always produced by exactly one closure
//! with the same inner loop order.

use rayon::prelude::*;

use super::Scalar;

/// Work size (inner multiply-adds) below which kernels stay serial.
const PAR_MIN_WORK: usize = 1 << 15;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Output extent of a dilated strided convolution along one axis, or None if
/// the dilated kernel does not fit the padded input.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let effective = dilation * (k - 1) + 1;
    let padded = n + 2 * pad;
    if padded < effective {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

/// Output extent of non-overlapping pooling along one axis.
pub fn pool_out_extent(n: usize, kernel: usize, ceil_mode: bool) -> usize {
    if ceil_mode {
        n.div_ceil(kernel)
    } else {
        n / kernel
    }
}

#[derive(Clone, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dhw: [usize; 3],
    pub out_dhw: [usize; 3],
    pub k: usize,
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    fn in_size(&self) -> usize {
        self.in_dhw.iter().product()
    }
    fn out_size(&self) -> usize {
        self.out_dhw.iter().product()
    }
    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }
    /// Valid output range [lo, hi) along `axis` for kernel offset `koff`,
    /// i.e. the outputs whose input index `o*stride + koff*dilation - pad`
    /// lands inside the input.
    fn out_range(&self, axis: usize, koff: usize) -> (usize, usize) {
        let off = (koff * self.dilation[axis]) as isize - self.pad[axis] as isize;
        let n = self.in_dhw[axis] as isize;
        let s = self.stride[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if off >= n { 0 } else { (n - off - 1) / s + 1 };
        let cap = self.out_dhw[axis] as isize;
        (lo.min(cap).max(0) as usize, hi.min(cap).max(0) as usize)
    }
}

#[inline]
fn axpy_mixed<E: Scalar>(acc: &mut [f64], a: f64, xs: &[E]) {
    for (o, x) in acc.iter_mut().zip(xs) {
        *o += a * x.to_f64();
    }
}

#[inline]
fn axpy_f64(acc: &mut [f64], a: f64, xs: &[f64]) {
    for (o, x) in acc.iter_mut().zip(xs) {
        *o += a * *x;
    }
}

/// acc[i] += sum_t ws[t] * x(t)[i] over up to 5 equally strided source rows,
/// one pass per row. The per-element addition chain is tap-ascending, the
/// same order as consecutive single-tap axpy passes.
#[inline]
fn axpy_mixed_taps<E: Scalar>(acc: &mut [f64], ws: &[f64], x: &[E], x0: usize, step: usize) {
    let len = acc.len();
    let row = |t: usize| &x[x0 + t * step..x0 + t * step + len];
    match ws.len() {
        1 => axpy_mixed(acc, ws[0], row(0)),
        2 => {
            let (r0, r1) = (row(0), row(1));
            for i in 0..len {
                acc[i] += ws[0] * r0[i].to_f64() + ws[1] * r1[i].to_f64();
            }
        }
        3 => {
            let (r0, r1, r2) = (row(0), row(1), row(2));
            for i in 0..len {
                acc[i] += ws[0] * r0[i].to_f64() + ws[1] * r1[i].to_f64() + ws[2] * r2[i].to_f64();
            }
        }
        4 => {
            let (r0, r1, r2, r3) = (row(0), row(1), row(2), row(3));
            for i in 0..len {
                acc[i] += ws[0] * r0[i].to_f64()
                    + ws[1] * r1[i].to_f64()
                    + ws[2] * r2[i].to_f64()
                    + ws[3] * r3[i].to_f64();
            }
        }
        5 => {
            let (r0, r1, r2, r3, r4) = (row(0), row(1), row(2), row(3), row(4));
            for i in 0..len {
                acc[i] += ws[0] * r0[i].to_f64()
                    + ws[1] * r1[i].to_f64()
                    + ws[2] * r2[i].to_f64()
                    + ws[3] * r3[i].to_f64()
                    + ws[4] * r4[i].to_f64();
            }
        }
        _ => {
            for (t, &w) in ws.iter().enumerate() {
                axpy_mixed(acc, w, row(t));
            }
        }
    }
}

/// f64 counterpart of [`axpy_mixed_taps`] reading rows at a signed stride.
#[inline]
fn axpy_f64_taps(acc: &mut [f64], ws: &[f64], src: &[f64], s0: usize, step: isize) {
    let len = acc.len();
    let row = |t: usize| {
        let start = (s0 as isize + t as isize * step) as usize;
        &src[start..start + len]
    };
    match ws.len() {
        1 => axpy_f64(acc, ws[0], row(0)),
        2 => {
            let (r0, r1) = (row(0), row(1));
            for i in 0..len {
                acc[i] += ws[0] * r0[i] + ws[1] * r1[i];
            }
        }
        3 => {
            let (r0, r1, r2) = (row(0), row(1), row(2));
            for i in 0..len {
                acc[i] += ws[0] * r0[i] + ws[1] * r1[i] + ws[2] * r2[i];
            }
        }
        4 => {
            let (r0, r1, r2, r3) = (row(0), row(1), row(2), row(3));
            for i in 0..len {
                acc[i] += ws[0] * r0[i] + ws[1] * r1[i] + ws[2] * r2[i] + ws[3] * r3[i];
            }
        }
        5 => {
            let (r0, r1, r2, r3, r4) = (row(0), row(1), row(2), row(3), row(4));
            for i in 0..len {
                acc[i] +=
                    ws[0] * r0[i] + ws[1] * r1[i] + ws[2] * r2[i] + ws[3] * r3[i] + ws[4] * r4[i];
            }
        }
        _ => {
            for (t, &w) in ws.iter().enumerate() {
                axpy_f64(acc, w, row(t));
            }
        }
    }
}

/// outs[t] += sum_i g[i] * x(t)[i] for up to 5 equally strided source rows,
/// sequential in i per tap.
#[inline]
fn dot_taps<E: Scalar>(outs: &mut [f64], g: &[f64], x: &[E], x0: usize, step: usize) {
    let len = g.len();
    let row = |t: usize| &x[x0 + t * step..x0 + t * step + len];
    match outs.len() {
        1 => {
            let r0 = row(0);
            let mut s0 = 0.0;
            for i in 0..len {
                s0 += g[i] * r0[i].to_f64();
            }
            outs[0] += s0;
        }
        2 => {
            let (r0, r1) = (row(0), row(1));
            let (mut s0, mut s1) = (0.0, 0.0);
            for i in 0..len {
                s0 += g[i] * r0[i].to_f64();
                s1 += g[i] * r1[i].to_f64();
            }
            outs[0] += s0;
            outs[1] += s1;
        }
        3 => {
            let (r0, r1, r2) = (row(0), row(1), row(2));
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for i in 0..len {
                s0 += g[i] * r0[i].to_f64();
                s1 += g[i] * r1[i].to_f64();
                s2 += g[i] * r2[i].to_f64();
            }
            outs[0] += s0;
            outs[1] += s1;
            outs[2] += s2;
        }
        4 => {
            let (r0, r1, r2, r3) = (row(0), row(1), row(2), row(3));
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..len {
                s0 += g[i] * r0[i].to_f64();
                s1 += g[i] * r1[i].to_f64();
                s2 += g[i] * r2[i].to_f64();
                s3 += g[i] * r3[i].to_f64();
            }
            outs[0] += s0;
            outs[1] += s1;
            outs[2] += s2;
            outs[3] += s3;
        }
        5 => {
            let (r0, r1, r2, r3, r4) = (row(0), row(1), row(2), row(3), row(4));
            let (mut s0, mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..len {
                s0 += g[i] * r0[i].to_f64();
                s1 += g[i] * r1[i].to_f64();
                s2 += g[i] * r2[i].to_f64();
                s3 += g[i] * r3[i].to_f64();
                s4 += g[i] * r4[i].to_f64();
            }
            outs[0] += s0;
            outs[1] += s1;
            outs[2] += s2;
            outs[3] += s3;
            outs[4] += s4;
        }
        _ => {
            for (t, o) in outs.iter_mut().enumerate() {
                let r = row(t);
                let mut s = 0.0;
                for i in 0..len {
                    s += g[i] * r[i].to_f64();
                }
                *o += s;
            }
        }
    }
}

/// Four-lane dot-product accumulation. The assignment of elements to lanes
/// depends only on slice lengths, so the reduction order is fixed.
#[inline]
fn dot_into_lanes<E: Scalar>(lanes: &mut [f64; 4], gs: &[f64], xs: &[E]) {
    let n = gs.len().min(xs.len());
    let mut i = 0;
    while i + 4 <= n {
        lanes[0] += gs[i] * xs[i].to_f64();
        lanes[1] += gs[i + 1] * xs[i + 1].to_f64();
        lanes[2] += gs[i + 2] * xs[i + 2].to_f64();
        lanes[3] += gs[i + 3] * xs[i + 3].to_f64();
        i += 4;
    }
    let mut j = 0;
    while i < n {
        lanes[j] += gs[i] * xs[i].to_f64();
        i += 1;
        j += 1;
    }
}

#[inline]
fn sum_into_lanes<E: Scalar>(lanes: &mut [f64; 4], xs: &[E]) {
    let mut i = 0;
    while i + 4 <= xs.len() {
        lanes[0] += xs[i].to_f64();
        lanes[1] += xs[i + 1].to_f64();
        lanes[2] += xs[i + 2].to_f64();
        lanes[3] += xs[i + 3].to_f64();
        i += 4;
    }
    let mut j = 0;
    while i < xs.len() {
        lanes[j] += xs[i].to_f64();
        i += 1;
        j += 1;
    }
}

#[inline]
fn fold_lanes(lanes: [f64; 4]) -> f64 {
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

pub(crate) fn lane_sum<E: Scalar>(xs: &[E]) -> f64 {
    let mut lanes = [0.0; 4];
    sum_into_lanes(&mut lanes, xs);
    fold_lanes(lanes)
}

pub(crate) fn lane_dot<E: Scalar>(gs: &[f64], xs: &[E]) -> f64 {
    let mut lanes = [0.0; 4];
    dot_into_lanes(&mut lanes, gs, xs);
    fold_lanes(lanes)
}

fn run_units<F: Fn(usize, &mut [f64]) + Sync>(buf: &mut [f64], unit_size: usize, work: usize, f: F) {
    if work >= PAR_MIN_WORK && buf.len() > unit_size {
        buf.par_chunks_mut(unit_size)
            .enumerate()
            .for_each(|(u, chunk)| f(u, chunk));
    } else {
        for (u, chunk) in buf.chunks_mut(unit_size).enumerate() {
            f(u, chunk);
        }
    }
}

/// Contiguous range of kernel offsets `kd` whose input index
/// `pos + kd*dilation - pad` lands inside `[0, extent)` (stride 1).
#[inline]
fn tap_range(pos: usize, extent: usize, k: usize, dilation: usize, pad: usize) -> (usize, usize) {
    let pos = pos as isize;
    let dd = dilation as isize;
    let pad = pad as isize;
    let lo = (pad - pos + dd - 1).div_euclid(dd).max(0);
    let hi = ((pad - pos + extent as isize - 1).div_euclid(dd) + 1).min(k as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv3d_forward<E: Scalar>(x: &[E], w: &[E], bias: Option<&[E]>, g: &ConvGeom) -> Vec<E> {
    let out_sz = g.out_size();
    let mut acc = vec![0.0f64; g.batch * g.c_out * out_sz];
    let work = acc.len() * g.c_in * g.taps();
    if g.stride == [1, 1, 1] {
        run_units(&mut acc, out_sz, work, |unit, acc| {
            conv3d_forward_unit_s1(x, w, bias, g, unit, acc)
        });
    } else {
        run_units(&mut acc, out_sz, work, |unit, acc| {
            conv3d_forward_unit_general(x, w, bias, g, unit, acc)
        });
    }
    acc.into_iter().map(E::from_f64).collect()
}

/// Stride-1 forward for one (batch, out-channel) unit. Each (od, oh) row
/// visit accumulates every in-channel and every valid spectral tap at once,
/// so the row bookkeeping amortizes over c_in * k * row_len multiply-adds
/// (the spectral axis is the long one for patch inputs). Per output element
/// the reduction order is (kh, kw, ci, kd), fixed.
fn conv3d_forward_unit_s1<E: Scalar>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    g: &ConvGeom,
    unit: usize,
    acc: &mut [f64],
) {
    let [d, h, wd] = g.in_dhw;
    let [od_n, oh_n, ow_n] = g.out_dhw;
    let hw = h * wd;
    let dhw = d * hw;
    let k = g.k;
    let n = unit / g.c_out;
    let co = unit % g.c_out;
    let x_base = n * g.c_in * dhw;
    if let Some(b) = bias {
        acc.fill(b[co].to_f64());
    }
    // Weights regrouped as wt[(kh*k + kw) * c_in * k + ci * k + kd].
    let mut wt = vec![0.0f64; g.c_in * k * k * k];
    for ci in 0..g.c_in {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    wt[(kh * k + kw) * g.c_in * k + ci * k + kd] =
                        w[(((co * g.c_in + ci) * k + kd) * k + kh) * k + kw].to_f64();
                }
            }
        }
    }
    for kh in 0..k {
        let (oh_lo, oh_hi) = g.out_range(1, kh);
        let off_h = (kh * g.dilation[1]) as isize - g.pad[1] as isize;
        for kw in 0..k {
            let (ow_lo, ow_hi) = g.out_range(2, kw);
            if oh_lo >= oh_hi || ow_lo >= ow_hi {
                continue;
            }
            let len = ow_hi - ow_lo;
            let off_w = (kw * g.dilation[2]) as isize - g.pad[2] as isize;
            let iw0 = (ow_lo as isize + off_w) as usize;
            let wt_base = (kh * k + kw) * g.c_in * k;
            for od in 0..od_n {
                let (kd_lo, kd_hi) = tap_range(od, d, k, g.dilation[0], g.pad[0]);
                if kd_lo >= kd_hi {
                    continue;
                }
                let id0 = od + kd_lo * g.dilation[0] - g.pad[0];
                for oh in oh_lo..oh_hi {
                    let ihx = (oh as isize + off_h) as usize;
                    let a0 = (od * oh_n + oh) * ow_n + ow_lo;
                    let acc_row = &mut acc[a0..a0 + len];
                    let col = ihx * wd + iw0;
                    for ci in 0..g.c_in {
                        let wrow = &wt[wt_base + ci * k + kd_lo..wt_base + ci * k + kd_hi];
                        let x0 = x_base + ci * dhw + id0 * hw + col;
                        axpy_mixed_taps(acc_row, wrow, x, x0, g.dilation[0] * hw);
                    }
                }
            }
        }
    }
}

/// General strided forward for one unit (the downsample convs take this).
fn conv3d_forward_unit_general<E: Scalar>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    g: &ConvGeom,
    unit: usize,
    acc: &mut [f64],
) {
    let in_sz = g.in_size();
    let [_, ih, iw] = [g.in_dhw[0], g.in_dhw[1], g.in_dhw[2]];
    let [_od_n, oh_n, ow_n] = g.out_dhw;
    let n = unit / g.c_out;
    let co = unit % g.c_out;
    if let Some(b) = bias {
        acc.fill(b[co].to_f64());
    }
    for ci in 0..g.c_in {
        let x_base = (n * g.c_in + ci) * in_sz;
        for kd in 0..g.k {
            let (od_lo, od_hi) = g.out_range(0, kd);
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.out_range(1, kh);
                for kw in 0..g.k {
                    let (ow_lo, ow_hi) = g.out_range(2, kw);
                    if od_lo >= od_hi || oh_lo >= oh_hi || ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = w[(((co * g.c_in + ci) * g.k + kd) * g.k + kh) * g.k + kw].to_f64();
                    let off_d = (kd * g.dilation[0]) as isize - g.pad[0] as isize;
                    let off_h = (kh * g.dilation[1]) as isize - g.pad[1] as isize;
                    let off_w = (kw * g.dilation[2]) as isize - g.pad[2] as isize;
                    for od in od_lo..od_hi {
                        let id = (od * g.stride[0]) as isize + off_d;
                        for oh in oh_lo..oh_hi {
                            let ihx = (oh * g.stride[1]) as isize + off_h;
                            let x_row = x_base + (id as usize * ih + ihx as usize) * iw;
                            let a_row = (od * oh_n + oh) * ow_n;
                            if g.stride[2] == 1 {
                                let iw0 = ow_lo as isize + off_w;
                                let len = ow_hi - ow_lo;
                                axpy_mixed(
                                    &mut acc[a_row + ow_lo..a_row + ow_lo + len],
                                    wv,
                                    &x[x_row + iw0 as usize..x_row + iw0 as usize + len],
                                );
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iwx = (ow * g.stride[2]) as isize + off_w;
                                    acc[a_row + ow] += wv * x[x_row + iwx as usize].to_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Contiguous range of kernel offsets `kd` whose mapped output index
/// `pos + pad - kd*dilation` lands inside `[0, out_extent)` (stride 1).
#[inline]
fn tap_range_t(pos: usize, out_extent: usize, k: usize, dilation: usize, pad: usize) -> (usize, usize) {
    let s = pos as isize + pad as isize;
    let dd = dilation as isize;
    let lo = (s - out_extent as isize + dd).div_euclid(dd).max(0);
    let hi = (s.div_euclid(dd) + 1).min(k as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Range of input positions along `axis` whose mapped output for kernel
/// offset `koff` is valid (stride 1).
fn in_range(g: &ConvGeom, axis: usize, koff: usize) -> (usize, usize) {
    let off = (koff * g.dilation[axis]) as isize - g.pad[axis] as isize;
    let lo = off.max(0);
    let hi = (g.out_dhw[axis] as isize + off).min(g.in_dhw[axis] as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Gradient w.r.t. the convolution input.
pub(crate) fn conv3d_backward_x<E: Scalar>(gout: &[f64], w: &[E], g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.in_size();
    let out_sz = g.out_size();
    let mut gin = vec![0.0f64; g.batch * g.c_in * in_sz];
    let work = g.batch * g.c_out * out_sz * g.c_in * g.taps();
    if g.stride == [1, 1, 1] {
        run_units(&mut gin, in_sz, work, |unit, gin| {
            conv3d_backward_x_unit_s1(gout, w, g, unit, gin)
        });
    } else {
        run_units(&mut gin, in_sz, work, |unit, gin| {
            conv3d_backward_x_unit_general(gout, w, g, unit, gin)
        });
    }
    gin
}

/// Stride-1 input gradient for one (batch, in-channel) unit: the transposed
/// convolution, with the same row-visit fusion as the forward. Per input
/// element the reduction order is (kh, kw, co, kd), fixed.
fn conv3d_backward_x_unit_s1<E: Scalar>(
    gout: &[f64],
    w: &[E],
    g: &ConvGeom,
    unit: usize,
    gin: &mut [f64],
) {
    let [d, h, wd] = g.in_dhw;
    let [od_n, oh_n, ow_n] = g.out_dhw;
    let out_sz = od_n * oh_n * ow_n;
    let k = g.k;
    let n = unit / g.c_in;
    let ci = unit % g.c_in;
    // Weights regrouped as wt[(kh*k + kw) * c_out * k + co * k + kd].
    let mut wt = vec![0.0f64; g.c_out * k * k * k];
    for co in 0..g.c_out {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    wt[(kh * k + kw) * g.c_out * k + co * k + kd] =
                        w[(((co * g.c_in + ci) * k + kd) * k + kh) * k + kw].to_f64();
                }
            }
        }
    }
    for kh in 0..k {
        let (ih_lo, ih_hi) = in_range(g, 1, kh);
        let off_h = (kh * g.dilation[1]) as isize - g.pad[1] as isize;
        for kw in 0..k {
            let (iw_lo, iw_hi) = in_range(g, 2, kw);
            if ih_lo >= ih_hi || iw_lo >= iw_hi {
                continue;
            }
            let len = iw_hi - iw_lo;
            let off_w = (kw * g.dilation[2]) as isize - g.pad[2] as isize;
            let ow0 = (iw_lo as isize - off_w) as usize;
            let wt_base = (kh * k + kw) * g.c_out * k;
            for id in 0..d {
                let (kd_lo, kd_hi) = tap_range_t(id, od_n, k, g.dilation[0], g.pad[0]);
                if kd_lo >= kd_hi {
                    continue;
                }
                let od_first = id + g.pad[0] - kd_lo * g.dilation[0];
                let row_step = -((g.dilation[0] * oh_n * ow_n) as isize);
                for ihx in ih_lo..ih_hi {
                    let oh = (ihx as isize - off_h) as usize;
                    let r0 = (id * h + ihx) * wd + iw_lo;
                    let gin_row = &mut gin[r0..r0 + len];
                    for co in 0..g.c_out {
                        let g_plane = (n * g.c_out + co) * out_sz;
                        let wrow = &wt[wt_base + co * k + kd_lo..wt_base + co * k + kd_hi];
                        let s0 = g_plane + (od_first * oh_n + oh) * ow_n + ow0;
                        axpy_f64_taps(gin_row, wrow, gout, s0, row_step);
                    }
                }
            }
        }
    }
}

/// General strided input gradient for one unit.
fn conv3d_backward_x_unit_general<E: Scalar>(
    gout: &[f64],
    w: &[E],
    g: &ConvGeom,
    unit: usize,
    gin: &mut [f64],
) {
    let out_sz = g.out_size();
    let [_, ih, iw] = [g.in_dhw[0], g.in_dhw[1], g.in_dhw[2]];
    let [_, oh_n, ow_n] = g.out_dhw;
    {
        let n = unit / g.c_in;
        let ci = unit % g.c_in;
        for co in 0..g.c_out {
            let g_base = (n * g.c_out + co) * out_sz;
            for kd in 0..g.k {
                let (od_lo, od_hi) = g.out_range(0, kd);
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = g.out_range(1, kh);
                    for kw in 0..g.k {
                        let (ow_lo, ow_hi) = g.out_range(2, kw);
                        if od_lo >= od_hi || oh_lo >= oh_hi || ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = w[(((co * g.c_in + ci) * g.k + kd) * g.k + kh) * g.k + kw].to_f64();
                        let off_d = (kd * g.dilation[0]) as isize - g.pad[0] as isize;
                        let off_h = (kh * g.dilation[1]) as isize - g.pad[1] as isize;
                        let off_w = (kw * g.dilation[2]) as isize - g.pad[2] as isize;
                        for od in od_lo..od_hi {
                            let id = (od * g.stride[0]) as isize + off_d;
                            for oh in oh_lo..oh_hi {
                                let ihx = (oh * g.stride[1]) as isize + off_h;
                                let in_row = (id as usize * ih + ihx as usize) * iw;
                                let g_row = g_base + (od * oh_n + oh) * ow_n;
                                if g.stride[2] == 1 {
                                    let iw0 = ow_lo as isize + off_w;
                                    let len = ow_hi - ow_lo;
                                    axpy_f64(
                                        &mut gin[in_row + iw0 as usize..in_row + iw0 as usize + len],
                                        wv,
                                        &gout[g_row + ow_lo..g_row + ow_lo + len],
                                    );
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iwx = (ow * g.stride[2]) as isize + off_w;
                                        gin[in_row + iwx as usize] += wv * gout[g_row + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution weights.
pub(crate) fn conv3d_backward_w<E: Scalar>(gout: &[f64], x: &[E], g: &ConvGeom) -> Vec<f64> {
    let out_sz = g.out_size();
    let per_co = g.c_in * g.taps();
    let mut gw = vec![0.0f64; g.c_out * per_co];
    let work = g.batch * g.c_out * out_sz * g.c_in * g.taps();
    if g.stride == [1, 1, 1] {
        run_units(&mut gw, per_co, work, |co, gw_co| {
            conv3d_backward_w_unit_s1(gout, x, g, co, gw_co)
        });
    } else {
        run_units(&mut gw, per_co, work, |co, gw_co| {
            conv3d_backward_w_unit_general(gout, x, g, co, gw_co)
        });
    }
    gw
}

/// Stride-1 weight gradient for one out-channel: every gout row is loaded
/// once and dotted against all (ci, kd) input rows, with four-lane
/// accumulators per kernel tap. Fixed (n, od, oh, lane) reduction order.
fn conv3d_backward_w_unit_s1<E: Scalar>(
    gout: &[f64],
    x: &[E],
    g: &ConvGeom,
    co: usize,
    gw_co: &mut [f64],
) {
    let [d, h, wd] = g.in_dhw;
    let [od_n, oh_n, ow_n] = g.out_dhw;
    let hw = h * wd;
    let dhw = d * hw;
    let out_sz = od_n * oh_n * ow_n;
    let k = g.k;
    for kh in 0..k {
        let (oh_lo, oh_hi) = g.out_range(1, kh);
        let off_h = (kh * g.dilation[1]) as isize - g.pad[1] as isize;
        for kw in 0..k {
            let (ow_lo, ow_hi) = g.out_range(2, kw);
            if oh_lo >= oh_hi || ow_lo >= ow_hi {
                for ci in 0..g.c_in {
                    for kd in 0..k {
                        gw_co[((ci * k + kd) * k + kh) * k + kw] = 0.0;
                    }
                }
                continue;
            }
            let len = ow_hi - ow_lo;
            let off_w = (kw * g.dilation[2]) as isize - g.pad[2] as isize;
            let iw0 = (ow_lo as isize + off_w) as usize;
            let mut sums = vec![0.0f64; g.c_in * k];
            for n in 0..g.batch {
                let g_base = (n * g.c_out + co) * out_sz;
                let x_base = n * g.c_in * dhw;
                for od in 0..od_n {
                    let (kd_lo, kd_hi) = tap_range(od, d, k, g.dilation[0], g.pad[0]);
                    if kd_lo >= kd_hi {
                        continue;
                    }
                    let id0 = od + kd_lo * g.dilation[0] - g.pad[0];
                    for oh in oh_lo..oh_hi {
                        let ihx = (oh as isize + off_h) as usize;
                        let g0 = g_base + (od * oh_n + oh) * ow_n + ow_lo;
                        let g_row = &gout[g0..g0 + len];
                        let col = ihx * wd + iw0;
                        for ci in 0..g.c_in {
                            let x0 = x_base + ci * dhw + id0 * hw + col;
                            dot_taps(
                                &mut sums[ci * k + kd_lo..ci * k + kd_hi],
                                g_row,
                                x,
                                x0,
                                g.dilation[0] * hw,
                            );
                        }
                    }
                }
            }
            for ci in 0..g.c_in {
                for kd in 0..k {
                    gw_co[((ci * k + kd) * k + kh) * k + kw] = sums[ci * k + kd];
                }
            }
        }
    }
}

/// General strided weight gradient for one out-channel.
fn conv3d_backward_w_unit_general<E: Scalar>(
    gout: &[f64],
    x: &[E],
    g: &ConvGeom,
    co: usize,
    gw_co: &mut [f64],
) {
    let in_sz = g.in_size();
    let out_sz = g.out_size();
    let [_, ih, iw] = [g.in_dhw[0], g.in_dhw[1], g.in_dhw[2]];
    let [_, oh_n, ow_n] = g.out_dhw;
    {
        for ci in 0..g.c_in {
            for kd in 0..g.k {
                let (od_lo, od_hi) = g.out_range(0, kd);
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = g.out_range(1, kh);
                    for kw in 0..g.k {
                        let (ow_lo, ow_hi) = g.out_range(2, kw);
                        let mut lanes = [0.0f64; 4];
                        if od_lo < od_hi && oh_lo < oh_hi && ow_lo < ow_hi {
                            let off_d = (kd * g.dilation[0]) as isize - g.pad[0] as isize;
                            let off_h = (kh * g.dilation[1]) as isize - g.pad[1] as isize;
                            let off_w = (kw * g.dilation[2]) as isize - g.pad[2] as isize;
                            for n in 0..g.batch {
                                let g_base = (n * g.c_out + co) * out_sz;
                                let x_base = (n * g.c_in + ci) * in_sz;
                                for od in od_lo..od_hi {
                                    let id = (od * g.stride[0]) as isize + off_d;
                                    for oh in oh_lo..oh_hi {
                                        let ihx = (oh * g.stride[1]) as isize + off_h;
                                        let x_row = x_base + (id as usize * ih + ihx as usize) * iw;
                                        let g_row = g_base + (od * oh_n + oh) * ow_n;
                                        if g.stride[2] == 1 {
                                            let iw0 = ow_lo as isize + off_w;
                                            let len = ow_hi - ow_lo;
                                            dot_into_lanes(
                                                &mut lanes,
                                                &gout[g_row + ow_lo..g_row + ow_lo + len],
                                                &x[x_row + iw0 as usize..x_row + iw0 as usize + len],
                                            );
                                        } else {
                                            for ow in ow_lo..ow_hi {
                                                let iwx = (ow * g.stride[2]) as isize + off_w;
                                                lanes[ow & 3] +=
                                                    gout[g_row + ow] * x[x_row + iwx as usize].to_f64();
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        gw_co[((ci * g.k + kd) * g.k + kh) * g.k + kw] = fold_lanes(lanes);
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution bias.
pub(crate) fn conv3d_backward_b(gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_sz = g.out_size();
    let mut gb = vec![0.0f64; g.c_out];
    for (co, out) in gb.iter_mut().enumerate() {
        let mut lanes = [0.0f64; 4];
        for n in 0..g.batch {
            let base = (n * g.c_out + co) * out_sz;
            let mut i = 0;
            let row = &gout[base..base + out_sz];
            while i + 4 <= out_sz {
                lanes[0] += row[i];
                lanes[1] += row[i + 1];
                lanes[2] += row[i + 2];
                lanes[3] += row[i + 3];
                i += 4;
            }
            let mut j = 0;
            while i < out_sz {
                lanes[j] += row[i];
                i += 1;
                j += 1;
            }
        }
        *out = fold_lanes(lanes);
    }
    gb
}

fn pool_windows(n: usize, kernel: usize, out_n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..out_n).map(move |o| {
        let lo = o * kernel;
        let hi = (lo + kernel).min(n);
        (lo, hi)
    })
}

/// Non-overlapping average pooling; boundary windows are truncated in ceil
/// mode and divide by their actual size.
pub(crate) fn avg_pool3d_forward<E: Scalar>(
    x: &[E],
    dims: [usize; 5],
    kernel: [usize; 3],
    out_dhw: [usize; 3],
) -> Vec<E> {
    let [n_b, c, d, h, w] = dims;
    let [od_n, oh_n, ow_n] = out_dhw;
    let in_sz = d * h * w;
    let out_sz = od_n * oh_n * ow_n;
    let mut out = vec![0.0f64; n_b * c * out_sz];
    let work = out.len() * kernel.iter().product::<usize>();

    run_units(&mut out, out_sz, work, |unit, out| {
        let x_base = unit * in_sz;
        for (od, (dlo, dhi)) in pool_windows(d, kernel[0], od_n).enumerate() {
            for (oh, (hlo, hhi)) in pool_windows(h, kernel[1], oh_n).enumerate() {
                for (ow, (wlo, whi)) in pool_windows(w, kernel[2], ow_n).enumerate() {
                    let mut acc = 0.0f64;
                    for id in dlo..dhi {
                        for ihx in hlo..hhi {
                            let row = x_base + (id * h + ihx) * w;
                            for iwx in wlo..whi {
                                acc += x[row + iwx].to_f64();
                            }
                        }
                    }
                    let count = ((dhi - dlo) * (hhi - hlo) * (whi - wlo)) as f64;
                    out[(od * oh_n + oh) * ow_n + ow] = acc / count;
                }
            }
        }
    });
    out.into_iter().map(E::from_f64).collect()
}

pub(crate) fn avg_pool3d_backward(
    gout: &[f64],
    dims: [usize; 5],
    kernel: [usize; 3],
    out_dhw: [usize; 3],
) -> Vec<f64> {
    let [n_b, c, d, h, w] = dims;
    let [od_n, oh_n, ow_n] = out_dhw;
    let in_sz = d * h * w;
    let out_sz = od_n * oh_n * ow_n;
    let mut gin = vec![0.0f64; n_b * c * in_sz];

    // Window sizes per output voxel, for the truncated-window divisor.
    let wind = |n: usize, k: usize, o: usize| (o * k + k).min(n) - o * k;
    let total = gin.len();
    run_units(&mut gin, in_sz, total, |unit, gin| {
        let g_base = unit * out_sz;
        for id in 0..d {
            let od = id / kernel[0];
            if od >= od_n {
                continue;
            }
            for ihx in 0..h {
                let oh = ihx / kernel[1];
                if oh >= oh_n {
                    continue;
                }
                for iwx in 0..w {
                    let ow = iwx / kernel[2];
                    if ow >= ow_n {
                        continue;
                    }
                    let count =
                        (wind(d, kernel[0], od) * wind(h, kernel[1], oh) * wind(w, kernel[2], ow)) as f64;
                    gin[(id * h + ihx) * w + iwx] = gout[g_base + (od * oh_n + oh) * ow_n + ow] / count;
                }
            }
        }
    });
    gin
}

/// Nearest-neighbor upsampling by integer factors with trailing crop.
pub(crate) fn upsample3d_forward<E: Scalar>(
    x: &[E],
    dims: [usize; 5],
    factors: [usize; 3],
    target: [usize; 3],
) -> Vec<E> {
    let [n_b, c, d, h, w] = dims;
    let [td, th, tw] = target;
    let in_sz = d * h * w;
    let out_sz = td * th * tw;
    let mut out = vec![E::ZERO; n_b * c * out_sz];
    for unit in 0..n_b * c {
        let x_base = unit * in_sz;
        let o_base = unit * out_sz;
        for od in 0..td {
            let id = od / factors[0];
            for oh in 0..th {
                let ihx = oh / factors[1];
                let x_row = x_base + (id * h + ihx) * w;
                let o_row = o_base + (od * th + oh) * tw;
                for ow in 0..tw {
                    out[o_row + ow] = x[x_row + ow / factors[2]];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample3d_backward(
    gout: &[f64],
    dims: [usize; 5],
    factors: [usize; 3],
    target: [usize; 3],
) -> Vec<f64> {
    let [n_b, c, d, h, w] = dims;
    let [td, th, tw] = target;
    let in_sz = d * h * w;
    let out_sz = td * th * tw;
    let mut gin = vec![0.0f64; n_b * c * in_sz];
    for unit in 0..n_b * c {
        let g_base = unit * out_sz;
        let i_base = unit * in_sz;
        for id in 0..d {
            let od_lo = id * factors[0];
            let od_hi = (od_lo + factors[0]).min(td);
            for ihx in 0..h {
                let oh_lo = ihx * factors[1];
                let oh_hi = (oh_lo + factors[1]).min(th);
                for iwx in 0..w {
                    let ow_lo = iwx * factors[2];
                    let ow_hi = (ow_lo + factors[2]).min(tw);
                    let mut acc = 0.0f64;
                    for od in od_lo..od_hi {
                        for oh in oh_lo..oh_hi {
                            let row = g_base + (od * th + oh) * tw;
                            for ow in ow_lo..ow_hi {
                                acc += gout[row + ow];
                            }
                        }
                    }
                    gin[i_base + (id * h + ihx) * w + iwx] = acc;
                }
            }
        }
    }
    gin
}

pub(crate) struct BnForward<E: Scalar> {
    pub y: Vec<E>,
    pub x_hat: Vec<E>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch-statistics normalization over (N, D, H, W) per channel.
pub(crate) fn bn_batch_forward<E: Scalar>(x: &[E], dims: [usize; 5], gamma: &[E], beta: &[E]) -> BnForward<E> {
    let [n_b, c, d, h, w] = dims;
    let spatial = d * h * w;
    let m = (n_b * spatial) as f64;
    let mut y = vec![E::ZERO; x.len()];
    let mut x_hat = vec![E::ZERO; x.len()];
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let mut inv_std = vec![0.0f64; c];

    for ch in 0..c {
        let mut lanes = [0.0f64; 4];
        for n in 0..n_b {
            let base = (n * c + ch) * spatial;
            sum_into_lanes(&mut lanes, &x[base..base + spatial]);
        }
        let mu = fold_lanes(lanes) / m;
        let mut vlanes = [0.0f64; 4];
        for n in 0..n_b {
            let base = (n * c + ch) * spatial;
            let xs = &x[base..base + spatial];
            let mut i = 0;
            while i + 4 <= spatial {
                for j in 0..4 {
                    let dv = xs[i + j].to_f64() - mu;
                    vlanes[j] += dv * dv;
                }
                i += 4;
            }
            let mut j = 0;
            while i < spatial {
                let dv = xs[i].to_f64() - mu;
                vlanes[j] += dv * dv;
                i += 1;
                j += 1;
            }
        }
        let v = fold_lanes(vlanes) / m;
        let istd = 1.0 / (v + BN_EPSILON).sqrt();
        mean[ch] = mu;
        var[ch] = v;
        inv_std[ch] = istd;
        let gv = gamma[ch].to_f64();
        let bv = beta[ch].to_f64();
        for n in 0..n_b {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                let xh = (x[i].to_f64() - mu) * istd;
                x_hat[i] = E::from_f64(xh);
                y[i] = E::from_f64(gv * xh + bv);
            }
        }
    }
    BnForward {
        y,
        x_hat,
        inv_std,
        mean,
        var,
    }
}

/// Stored-statistics normalization (evaluation mode).
pub(crate) fn bn_running_forward<E: Scalar>(
    x: &[E],
    dims: [usize; 5],
    gamma: &[E],
    beta: &[E],
    r_mean: &[E],
    r_var: &[E],
) -> BnForward<E> {
    let [n_b, c, _, _, _] = dims;
    let spatial = dims[2] * dims[3] * dims[4];
    let mut y = vec![E::ZERO; x.len()];
    let mut x_hat = vec![E::ZERO; x.len()];
    let mut inv_std = vec![0.0f64; c];
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mu = r_mean[ch].to_f64();
        let v = r_var[ch].to_f64();
        let istd = 1.0 / (v + BN_EPSILON).sqrt();
        mean[ch] = mu;
        var[ch] = v;
        inv_std[ch] = istd;
        let gv = gamma[ch].to_f64();
        let bv = beta[ch].to_f64();
        for n in 0..n_b {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                let xh = (x[i].to_f64() - mu) * istd;
                x_hat[i] = E::from_f64(xh);
                y[i] = E::from_f64(gv * xh + bv);
            }
        }
    }
    BnForward {
        y,
        x_hat,
        inv_std,
        mean,
        var,
    }
}

/// Backward through batch normalization. `coupled` selects batch-statistics
/// mode, where the moments depend on the input.
pub(crate) fn bn_backward<E: Scalar>(
    gout: &[f64],
    dims: [usize; 5],
    x_hat: &[E],
    inv_std: &[f64],
    gamma: &[E],
    coupled: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n_b, c, d, h, w] = dims;
    let spatial = d * h * w;
    let m = (n_b * spatial) as f64;
    let mut gx = vec![0.0f64; gout.len()];
    let mut ggamma = vec![0.0f64; c];
    let mut gbeta = vec![0.0f64; c];
    for ch in 0..c {
        let mut s1 = [0.0f64; 4];
        let mut s2 = [0.0f64; 4];
        for n in 0..n_b {
            let base = (n * c + ch) * spatial;
            let gs = &gout[base..base + spatial];
            let mut i = 0;
            while i < spatial {
                s1[i & 3] += gs[i];
                s2[i & 3] += gs[i] * x_hat[base + i].to_f64();
                i += 1;
            }
        }
        let sum_g = fold_lanes(s1);
        let sum_gx = fold_lanes(s2);
        gbeta[ch] = sum_g;
        ggamma[ch] = sum_gx;
        let gv = gamma[ch].to_f64();
        let istd = inv_std[ch];
        for n in 0..n_b {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                gx[i] = if coupled {
                    gv * istd * (gout[i] - sum_g / m - x_hat[i].to_f64() * sum_gx / m)
                } else {
                    gv * istd * gout[i]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Global average pool over (D, H, W) followed by an affine map.
pub(crate) fn head_forward<E: Scalar>(
    x: &[E],
    dims: [usize; 5],
    w: &[E],
    b: &[E],
    k_out: usize,
) -> (Vec<E>, Vec<E>) {
    let [n_b, c, d, h, wd] = dims;
    let spatial = d * h * wd;
    let mut pooled = vec![E::ZERO; n_b * c];
    for n in 0..n_b {
        for ch in 0..c {
            let base = (n * c + ch) * spatial;
            pooled[n * c + ch] = E::from_f64(lane_sum(&x[base..base + spatial]) / spatial as f64);
        }
    }
    let mut y = vec![E::ZERO; n_b * k_out];
    for n in 0..n_b {
        for k in 0..k_out {
            let mut acc = b[k].to_f64();
            for ch in 0..c {
                acc += w[k * c + ch].to_f64() * pooled[n * c + ch].to_f64();
            }
            y[n * k_out + k] = E::from_f64(acc);
        }
    }
    (y, pooled)
}

pub(crate) fn head_backward<E: Scalar>(
    gout: &[f64],
    dims: [usize; 5],
    w: &[E],
    pooled: &[E],
    k_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n_b, c, d, h, wd] = dims;
    let spatial = d * h * wd;
    let mut gx = vec![0.0f64; n_b * c * spatial];
    let mut gw = vec![0.0f64; k_out * c];
    let mut gb = vec![0.0f64; k_out];
    for n in 0..n_b {
        for k in 0..k_out {
            let gy = gout[n * k_out + k];
            gb[k] += gy;
            for ch in 0..c {
                gw[k * c + ch] += gy * pooled[n * c + ch].to_f64();
            }
        }
    }
    for n in 0..n_b {
        for ch in 0..c {
            let mut gpool = 0.0f64;
            for k in 0..k_out {
                gpool += gout[n * k_out + k] * w[k * c + ch].to_f64();
            }
            let gv = gpool / spatial as f64;
            let base = (n * c + ch) * spatial;
            gx[base..base + spatial].fill(gv);
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        // floor((19 + 2*1 - 1*(3-1) - 1)/2) + 1 = 10
        assert_eq!(conv_out_extent(19, 3, 2, 1, 1), Some(10));
        assert_eq!(conv_out_extent(19, 3, 1, 2, 2), Some(19));
        assert_eq!(conv_out_extent(1, 5, 1, 2, 4), Some(1));
        assert_eq!(conv_out_extent(1, 5, 1, 2, 3), None);
    }

    #[test]
    fn pool_extent_ceil_and_floor() {
        assert_eq!(pool_out_extent(19, 2, true), 10);
        assert_eq!(pool_out_extent(19, 2, false), 9);
        assert_eq!(pool_out_extent(4, 2, true), 2);
        assert_eq!(pool_out_extent(1, 2, true), 1);
    }

    #[test]
    fn lane_sum_matches_sequential() {
        let xs: Vec<f64> = (0..37).map(|i| (i as f64) * 0.25 - 3.0).collect();
        let seq: f64 = xs.iter().sum();
        assert!((lane_sum(&xs) - seq).abs() < 1e-12);
    }
}
