//! Shared fixtures and brute-force scalar oracles for the integration tests.
#![allow(dead_code)]

use lcau_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn rand_t(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::from_vec(rand_vec(dims.iter().product(), seed), dims.to_vec()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central pixel-difference convolution by direct summation. Taps falling
/// in the zero padding read 0.
pub fn pdc_direct(x: &[f64], xd: [usize; 4], w: &[f64], wd: [usize; 4], stride: usize, pad: usize, groups: usize) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wi] = xd;
    let [cout, cpg, kh, kw] = wd;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wi + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let at = |n: usize, c: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wi as isize {
            0.0
        } else {
            x[((n * cin + c) * h + y as usize) * wi + xx as usize]
        }
    };
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * stride) as isize - pad as isize;
                    let x0 = (ox * stride) as isize - pad as isize;
                    let (cy, cx) = (y0 + (kh / 2) as isize, x0 + (kw / 2) as isize);
                    let mut s = 0.0;
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        let center = at(n, c, cy, cx);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = w[((o * cpg + ci) * kh + ky) * kw + kx];
                                s += wv * (at(n, c, y0 + ky as isize, x0 + kx as isize) - center);
                            }
                        }
                    }
                    out[((n * cout + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

/// Row-major `(n, c_in) x (c_in, c_out) + bias`.
pub fn linear(x: &[f64], n: usize, w: &[f64], bias: Option<&[f64]>, c_in: usize, c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c_out];
    for i in 0..n {
        for o in 0..c_out {
            let mut s = bias.map_or(0.0, |b| b[o]);
            for k in 0..c_in {
                s += x[i * c_in + k] * w[k * c_out + o];
            }
            out[i * c_out + o] = s;
        }
    }
    out
}

pub fn layer_norm_rows(x: &[f64], c: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let m = row.iter().sum::<f64>() / c as f64;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
        out.extend(row.iter().enumerate().map(|(i, a)| (a - m) / (v + eps).sqrt() * g[i] + b[i]));
    }
    out
}

/// Dense multi-head attention over all `n` tokens; heads own contiguous
/// channel slices.
pub fn dense_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize, heads: usize) -> Vec<f64> {
    let dh = c / heads;
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|d| q[i * c + h * dh + d] * k[j * c + h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                out[i * c + h * dh + d] = (0..n).map(|j| e[j] / z * v[j * c + h * dh + d]).sum();
            }
        }
    }
    out
}

/// Mean binary cross-entropy with the same probability clamp as training.
pub fn bce_oracle(p: &[f64], g: &[f64]) -> f64 {
    let eps = 1e-7;
    let mut s = 0.0;
    for (&y, &t) in p.iter().zip(g) {
        let y = y.clamp(eps, 1.0 - eps);
        s -= t * y.ln() + (1.0 - t) * (1.0 - y).ln();
    }
    s / p.len() as f64
}

/// Soft Dice loss per image, averaged over `images`.
pub fn dice_oracle(p: &[f64], g: &[f64], images: usize, eps: f64) -> f64 {
    let per = p.len() / images;
    let mut s = 0.0;
    for i in 0..images {
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for j in i * per..(i + 1) * per {
            inter += p[j] * g[j];
            sp += p[j];
            sg += g[j];
        }
        s += 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
    }
    s / images as f64
}

/// Annotator-robust edge loss of one map, averaged over pixels; `beta` is
/// the fraction of exactly-zero labels.
pub fn edge_oracle(p: &[f64], g: &[f64], eta: f64, lambda: f64) -> f64 {
    let eps = 1e-7;
    let beta = g.iter().filter(|&&v| v == 0.0).count() as f64 / g.len() as f64;
    let alpha = lambda * (1.0 - beta);
    let mut s = 0.0;
    for (&y, &t) in p.iter().zip(g) {
        let y = y.clamp(eps, 1.0 - eps);
        if t == 0.0 {
            s += -alpha * (1.0 - y).ln();
        } else if t >= eta {
            s += -beta * y.ln();
        }
    }
    s / p.len() as f64
}

/// (acc, dice, iou, se, sp) from two 0/1 masks. An empty denominator gives
/// 1 when the quantity has no way to be wrong and 0 otherwise.
pub fn metrics_oracle(pred: &[f64], gt: &[f64]) -> [f64; 5] {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == 1.0, g == 1.0) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let safe = |num: f64, den: f64, wrong: f64| if den > 0.0 { num / den } else if wrong == 0.0 { 1.0 } else { 0.0 };
    [
        safe(tp + tn, tp + tn + fp + fn_, fp + fn_),
        safe(2.0 * tp, 2.0 * tp + fp + fn_, fp + fn_),
        safe(tp, tp + fp + fn_, fp + fn_),
        safe(tp, tp + fn_, fp),
        safe(tn, tn + fp, fn_),
    ]
}

pub mod checks;
