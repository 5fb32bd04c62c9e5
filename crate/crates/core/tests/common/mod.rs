//! Independent naive reference implementations used as oracles. These are
//! deliberately straight-line f64 loops with no shared code paths into the
//! library kernels.

#![allow(dead_code)]

use a2snas_core::rng::Rng;

/// Direct sliding-window 3D convolution, returning (values, out_dims).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_ref(
    x: &[f64],
    xd: [usize; 5],
    w: &[f64],
    wd: [usize; 5],
    b: Option<&[f64]>,
    stride: [usize; 3],
    dilation: [usize; 3],
    pad: [usize; 3],
) -> Option<(Vec<f64>, [usize; 5])> {
    let [n_b, ci, d, h, wd_in] = xd;
    let [co, wci, k, k1, k2] = wd;
    assert_eq!(ci, wci);
    assert_eq!(k, k1);
    assert_eq!(k, k2);
    let mut out_dhw = [0usize; 3];
    for (a, n) in [d, h, wd_in].into_iter().enumerate() {
        let eff = dilation[a] * (k - 1) + 1;
        if n + 2 * pad[a] < eff {
            return None;
        }
        out_dhw[a] = (n + 2 * pad[a] - eff) / stride[a] + 1;
    }
    let [od, oh, ow] = out_dhw;
    let mut out = vec![0.0f64; n_b * co * od * oh * ow];
    for n in 0..n_b {
        for c_out in 0..co {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.map_or(0.0, |bv| bv[c_out]);
                        for c_in in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (zo * stride[0] + kz * dilation[0]) as isize
                                            - pad[0] as isize;
                                        let iy = (yo * stride[1] + ky * dilation[1]) as isize
                                            - pad[1] as isize;
                                        let ix = (xo * stride[2] + kx * dilation[2]) as isize
                                            - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd_in as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((n * ci + c_in) * d + iz as usize) * h
                                            + iy as usize)
                                            * wd_in
                                            + ix as usize;
                                        let wi = (((c_out * ci + c_in) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((n * co + c_out) * od + zo) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    Some((out, [n_b, co, od, oh, ow]))
}

/// Non-overlapping ceil-mode average pooling.
pub fn avg_pool3d_ref(x: &[f64], xd: [usize; 5], kernel: [usize; 3]) -> (Vec<f64>, [usize; 5]) {
    let [n_b, c, d, h, w] = xd;
    let od = d.div_ceil(kernel[0]);
    let oh = h.div_ceil(kernel[1]);
    let ow = w.div_ceil(kernel[2]);
    let mut out = vec![0.0f64; n_b * c * od * oh * ow];
    for n in 0..n_b {
        for ch in 0..c {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        let mut count = 0usize;
                        for iz in zo * kernel[0]..((zo + 1) * kernel[0]).min(d) {
                            for iy in yo * kernel[1]..((yo + 1) * kernel[1]).min(h) {
                                for ix in xo * kernel[2]..((xo + 1) * kernel[2]).min(w) {
                                    acc += x[(((n * c + ch) * d + iz) * h + iy) * w + ix];
                                    count += 1;
                                }
                            }
                        }
                        out[(((n * c + ch) * od + zo) * oh + yo) * ow + xo] = acc / count as f64;
                    }
                }
            }
        }
    }
    (out, [n_b, c, od, oh, ow])
}

/// Nearest-neighbor upsample-then-crop.
pub fn upsample3d_ref(
    x: &[f64],
    xd: [usize; 5],
    factors: [usize; 3],
    target: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n_b, c, d, h, w] = xd;
    let [td, th, tw] = target;
    let mut out = vec![0.0f64; n_b * c * td * th * tw];
    for n in 0..n_b {
        for ch in 0..c {
            for zo in 0..td {
                for yo in 0..th {
                    for xo in 0..tw {
                        let src = (((n * c + ch) * d + zo / factors[0]) * h + yo / factors[1]) * w
                            + xo / factors[2];
                        out[(((n * c + ch) * td + zo) * th + yo) * tw + xo] = x[src];
                    }
                }
            }
        }
    }
    (out, [n_b, c, td, th, tw])
}

/// Batch-statistics normalization.
pub fn batch_norm_ref(x: &[f64], xd: [usize; 5], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let [n_b, c, d, h, w] = xd;
    let spatial = d * h * w;
    let m = (n_b * spatial) as f64;
    let mut out = vec![0.0f64; x.len()];
    for ch in 0..c {
        let mut sum = 0.0;
        for n in 0..n_b {
            for s in 0..spatial {
                sum += x[(n * c + ch) * spatial + s];
            }
        }
        let mean = sum / m;
        let mut var = 0.0;
        for n in 0..n_b {
            for s in 0..spatial {
                let dv = x[(n * c + ch) * spatial + s] - mean;
                var += dv * dv;
            }
        }
        var /= m;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for n in 0..n_b {
            for s in 0..spatial {
                let i = (n * c + ch) * spatial + s;
                out[i] = gamma[ch] * (x[i] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

/// Global average pool then affine.
pub fn head_ref(x: &[f64], xd: [usize; 5], w: &[f64], b: &[f64], k_out: usize) -> Vec<f64> {
    let [n_b, c, d, h, wd] = xd;
    let spatial = d * h * wd;
    let mut out = vec![0.0f64; n_b * k_out];
    for n in 0..n_b {
        let mut pooled = vec![0.0f64; c];
        for (ch, p) in pooled.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in 0..spatial {
                acc += x[(n * c + ch) * spatial + s];
            }
            *p = acc / spatial as f64;
        }
        for k in 0..k_out {
            let mut acc = b[k];
            for ch in 0..c {
                acc += w[k * c + ch] * pooled[ch];
            }
            out[n * k_out + k] = acc;
        }
    }
    out
}

/// Brute-force OA/AA/kappa from raw counts.
pub fn metrics_ref(rows: &[Vec<u64>]) -> (f64, f64, f64) {
    let k = rows.len();
    let total: u64 = rows.iter().flatten().sum();
    let n = total as f64;
    let mut trace = 0u64;
    for (i, row) in rows.iter().enumerate() {
        trace += row[i];
    }
    let oa = trace as f64 / n;
    let mut aa_sum = 0.0;
    let mut aa_n = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let rs: u64 = row.iter().sum();
        if rs > 0 {
            aa_sum += row[i] as f64 / rs as f64;
            aa_n += 1;
        }
    }
    let aa = aa_sum / aa_n as f64;
    let mut pe = 0.0;
    for i in 0..k {
        let rs: u64 = rows[i].iter().sum();
        let cs: u64 = rows.iter().map(|r| r[i]).sum();
        pe += rs as f64 * cs as f64;
    }
    pe /= n * n;
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        if (oa - 1.0).abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    (oa, aa, kappa)
}

pub fn draw_vec(rng: &mut Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| lo + (hi - lo) * rng.next_f64()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
