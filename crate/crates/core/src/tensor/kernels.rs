//! Raw kernel math: forward and backward bodies as pure functions on
//! slices. Shape validation happens in the tape layer; these assume valid
//! inputs. Every reduction accumulates in `f64` with a fixed left-to-right
//! element order, so forward passes are bit-deterministic and both element
//! types share one numeric path.

use super::Element;

pub(super) fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j].to_f64();
            }
        }
    }
    out.into_iter().map(E::from_f64).collect()
}

/// A · Bᵀ where A is [m,k] and B is [n,k].
pub(super) fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for t in 0..k {
                acc += arow[t].to_f64() * brow[t].to_f64();
            }
            out.push(E::from_f64(acc));
        }
    }
    out
}

/// Aᵀ · B where A is [k,m] and B is [k,n].
pub(super) fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![0.0f64; m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = arow[i].to_f64();
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j].to_f64();
            }
        }
    }
    out.into_iter().map(E::from_f64).collect()
}

pub(super) fn transpose2d<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(super) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Cross-correlation (no kernel flip), floor output extents, symmetric
/// zero padding — the convention shared by mainstream frameworks.
pub(super) fn conv2d<E: Element>(
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    geo: &ConvGeometry,
) -> Vec<E> {
    let cpg = geo.cin / geo.groups; // channels per group
    let opg = geo.cout / geo.groups;
    let mut out = Vec::with_capacity(geo.cout * geo.out_h * geo.out_w);
    for co in 0..geo.cout {
        let group = co / opg;
        let b = bias.map_or(0.0, |b| b[co].to_f64());
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let mut acc = b;
                for cl in 0..cpg {
                    let ci = group * cpg + cl;
                    for ky in 0..geo.k {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        for kx in 0..geo.k {
                            let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                            if ix < 0 || ix >= geo.w as isize {
                                continue;
                            }
                            let xv = x[(ci * geo.h + iy as usize) * geo.w + ix as usize];
                            let wv = w[((co * cpg + cl) * geo.k + ky) * geo.k + kx];
                            acc += xv.to_f64() * wv.to_f64();
                        }
                    }
                }
                out.push(E::from_f64(acc));
            }
        }
    }
    out
}

pub(super) fn conv2d_backward<E: Element>(
    g: &[E],
    x: &[E],
    w: &[E],
    has_bias: bool,
    geo: &ConvGeometry,
) -> (Vec<E>, Vec<E>, Option<Vec<E>>) {
    let cpg = geo.cin / geo.groups;
    let opg = geo.cout / geo.groups;
    let mut dx = vec![0.0f64; geo.cin * geo.h * geo.w];
    let mut dw = vec![0.0f64; w.len()];
    let mut db = vec![0.0f64; geo.cout];
    for co in 0..geo.cout {
        let group = co / opg;
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let gv = g[(co * geo.out_h + oy) * geo.out_w + ox].to_f64();
                db[co] += gv;
                for cl in 0..cpg {
                    let ci = group * cpg + cl;
                    for ky in 0..geo.k {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        for kx in 0..geo.k {
                            let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                            if ix < 0 || ix >= geo.w as isize {
                                continue;
                            }
                            let xi = (ci * geo.h + iy as usize) * geo.w + ix as usize;
                            let wi = ((co * cpg + cl) * geo.k + ky) * geo.k + kx;
                            dx[xi] += gv * w[wi].to_f64();
                            dw[wi] += gv * x[xi].to_f64();
                        }
                    }
                }
            }
        }
    }
    let dx = dx.into_iter().map(E::from_f64).collect();
    let dw = dw.into_iter().map(E::from_f64).collect();
    let db = has_bias.then(|| db.into_iter().map(E::from_f64).collect());
    (dx, dw, db)
}

/// Splits a shape at `axis` into (outer, len, inner) strides.
pub(super) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(super) fn softmax<E: Element>(x: &[E], outer: usize, len: usize, inner: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    let mut exps = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner].to_f64());
            }
            let mut sum = 0.0f64;
            for l in 0..len {
                let e = (x[base + l * inner].to_f64() - max).exp();
                exps[l] = e;
                sum += e;
            }
            for l in 0..len {
                out[base + l * inner] = E::from_f64(exps[l] / sum);
            }
        }
    }
    out
}

pub(super) fn softmax_backward<E: Element>(
    g: &[E],
    y: &[E],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0f64;
            for l in 0..len {
                let idx = base + l * inner;
                dot += g[idx].to_f64() * y[idx].to_f64();
            }
            for l in 0..len {
                let idx = base + l * inner;
                dx[idx] = E::from_f64(y[idx].to_f64() * (g[idx].to_f64() - dot));
            }
        }
    }
    dx
}

pub(super) fn layer_norm<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    c: usize,
    eps: f64,
) -> Vec<E> {
    let rows = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let (mean, inv_std) = row_stats(row, eps);
        for j in 0..c {
            let xh = (row[j].to_f64() - mean) * inv_std;
            out.push(E::from_f64(xh * gamma[j].to_f64() + beta[j].to_f64()));
        }
    }
    out
}

fn row_stats<E: Element>(row: &[E], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mut sum = 0.0f64;
    for v in row {
        sum += v.to_f64();
    }
    let mean = sum / c;
    let mut var = 0.0f64;
    for v in row {
        let d = v.to_f64() - mean;
        var += d * d;
    }
    var /= c;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(super) fn layer_norm_backward<E: Element>(
    g: &[E],
    x: &[E],
    gamma: &[E],
    c: usize,
    eps: f64,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let rows = x.len() / c;
    let mut dx = vec![E::ZERO; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut xh = vec![0.0f64; c];
    let mut dxh = vec![0.0f64; c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let grow = &g[r * c..(r + 1) * c];
        let (mean, inv_std) = row_stats(row, eps);
        let mut mean_dxh = 0.0f64;
        let mut mean_dxh_xh = 0.0f64;
        for j in 0..c {
            xh[j] = (row[j].to_f64() - mean) * inv_std;
            dxh[j] = grow[j].to_f64() * gamma[j].to_f64();
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xh[j];
            dgamma[j] += grow[j].to_f64() * xh[j];
            dbeta[j] += grow[j].to_f64();
        }
        mean_dxh /= c as f64;
        mean_dxh_xh /= c as f64;
        for j in 0..c {
            dx[r * c + j] = E::from_f64((dxh[j] - mean_dxh - xh[j] * mean_dxh_xh) * inv_std);
        }
    }
    (
        dx,
        dgamma.into_iter().map(E::from_f64).collect(),
        dbeta.into_iter().map(E::from_f64).collect(),
    )
}

pub(super) fn gelu_value(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Source sample position for corner-unaligned bilinear interpolation:
/// centers at `(i + 0.5) * scale - 0.5`, indices clamped at the edges.
fn bilinear_taps(i: usize, scale: f64, in_len: usize) -> (usize, usize, f64) {
    let src = (i as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let lo = (floor.max(0.0) as usize).min(in_len - 1);
    let hi = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
    (lo, hi, frac)
}

pub(super) fn bilinear_upsample<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, sx, w);
                let v00 = plane[y0 * w + x0].to_f64();
                let v01 = plane[y0 * w + x1].to_f64();
                let v10 = plane[y1 * w + x0].to_f64();
                let v11 = plane[y1 * w + x1].to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(E::from_f64(top + (bot - top) * fy));
            }
        }
    }
    out
}

pub(super) fn bilinear_upsample_backward<E: Element>(
    g: &[E],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut dx = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_taps(ox, sx, w);
                let gv = g[(ch * oh + oy) * ow + ox].to_f64();
                plane[y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                plane[y0 * w + x1] += gv * fx * (1.0 - fy);
                plane[y1 * w + x0] += gv * (1.0 - fx) * fy;
                plane[y1 * w + x1] += gv * fx * fy;
            }
        }
    }
    dx.into_iter().map(E::from_f64).collect()
}

pub(super) struct CrossEntropyOut<E: Element> {
    pub loss: f64,
    /// Per-pixel `softmax(logits) - onehot(label)`, zero at ignored pixels,
    /// already divided by the number of counted pixels.
    pub dlogits: Vec<E>,
}

pub(super) fn cross_entropy<E: Element>(
    logits: &[E],
    labels: &[u8],
    k: usize,
    ignore: u8,
) -> CrossEntropyOut<E> {
    let pixels = labels.len();
    let mut total = 0.0f64;
    let mut counted = 0usize;
    let mut dlogits = vec![0.0f64; logits.len()];
    for px in 0..pixels {
        let label = labels[px];
        if label == ignore {
            continue;
        }
        counted += 1;
        let mut max = f64::NEG_INFINITY;
        for cls in 0..k {
            max = max.max(logits[cls * pixels + px].to_f64());
        }
        let mut sum = 0.0f64;
        for cls in 0..k {
            sum += (logits[cls * pixels + px].to_f64() - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - logits[label as usize * pixels + px].to_f64();
        for cls in 0..k {
            let p = (logits[cls * pixels + px].to_f64() - lse).exp();
            let onehot = if cls == label as usize { 1.0 } else { 0.0 };
            dlogits[cls * pixels + px] = p - onehot;
        }
    }
    if counted > 0 {
        let inv = 1.0 / counted as f64;
        total *= inv;
        for d in dlogits.iter_mut() {
            *d *= inv;
        }
    } else {
        total = 0.0;
        dlogits.iter_mut().for_each(|d| *d = 0.0);
    }
    CrossEntropyOut {
        loss: total,
        dlogits: dlogits.into_iter().map(E::from_f64).collect(),
    }
}
