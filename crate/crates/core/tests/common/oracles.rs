//! Brute-force reference implementations used as test oracles. Each one is
//! written as direct loops over the defining formula and shares no code
//! with the library.
#![allow(dead_code)]

/// Six-nested-loop (per sample) cross-correlation. `x: [B, Cin, D, H, W]`,
/// `w: [Cout, Cin, k, k, k]`. Returns the output and its shape.
pub fn conv3d_loop(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [b, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let out_extent = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_extent(d), out_extent(h), out_extent(wd));
    let mut out = vec![0.0; b * cout * od * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((n * cin + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((n * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [b, cout, od, oh, ow])
}

/// Scatter-form transposed convolution. `w: [Cin, Cout, k, k, k]`.
pub fn conv3d_transposed_loop(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    bias: &[f64],
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [b, cin, d, h, wd] = xs;
    let [_, cout, k, _, _] = ws;
    let ext = |n: usize| (n - 1) * stride + k + out_pad - 2 * pad;
    let (od, oh, ow) = (ext(d), ext(h), ext(wd));
    let mut out = vec![0.0; b * cout * od * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for i in 0..od * oh * ow {
                out[(n * cout + co) * od * oh * ow + i] = bias[co];
            }
        }
        for ci in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let v = x[(((n * cin + ci) * d + z) * h + y) * wd + xx];
                        for co in 0..cout {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let tz = (z * stride + kz) as isize - pad as isize;
                                        let ty = (y * stride + ky) as isize - pad as isize;
                                        let tx = (xx * stride + kx) as isize - pad as isize;
                                        if tz < 0 || ty < 0 || tx < 0 || tz >= od as isize || ty >= oh as isize || tx >= ow as isize {
                                            continue;
                                        }
                                        let wi = (((ci * cout + co) * k + kz) * k + ky) * k + kx;
                                        let oi = (((n * cout + co) * od + tz as usize) * oh + ty as usize) * ow + tx as usize;
                                        out[oi] += v * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [b, cout, od, oh, ow])
}

/// Mean per (sample, channel) by a flat loop.
pub fn gap_loop(x: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c];
    for n in 0..b {
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..plane {
                s += x[(n * c + ch) * plane + i];
            }
            out[n * c + ch] = s / plane as f64;
        }
    }
    out
}

/// Triple-loop `x[b,f] @ w[f,g] + bias[g]`.
pub fn matmul_loop(x: &[f64], w: &[f64], bias: &[f64], b: usize, f: usize, g: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * g];
    for i in 0..b {
        for j in 0..g {
            let mut acc = bias[j];
            for l in 0..f {
                acc += x[i * f + l] * w[l * g + j];
            }
            out[i * g + j] = acc;
        }
    }
    out
}

/// Masked mean squared error; `mask` covers one spatial volume and is
/// repeated for every sample/channel.
pub fn mse_loop(y: &[f64], y_hat: &[f64], mask: &[bool]) -> f64 {
    let plane = mask.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..y.len() {
        if mask[i % plane] {
            sum += (y[i] - y_hat[i]).powi(2);
            count += 1;
        }
    }
    sum / count as f64
}

/// `(|a ∩ b|, |a ∪ b|)` by a voxel loop.
pub fn iou_counts_loop(a: &[bool], b: &[bool]) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for i in 0..a.len() {
        if a[i] && b[i] {
            inter += 1;
        }
        if a[i] || b[i] {
            union += 1;
        }
    }
    (inter, union)
}

/// erf by its Maclaurin series, summed until terms drop below 1e-17.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-17 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Explicitly tiles a per-(sample, channel) factor over space, then multiplies.
pub fn channel_scale_tiled(a: &[f64], b: usize, c: usize, plane: usize, factor: &[f64], per_sample: bool) -> Vec<f64> {
    let mut tiled = Vec::with_capacity(a.len());
    for n in 0..b {
        for ch in 0..c {
            let f = if per_sample { factor[n * c + ch] } else { factor[ch] };
            for _ in 0..plane {
                tiled.push(f);
            }
        }
    }
    a.iter().zip(&tiled).map(|(x, t)| x * t).collect()
}
