//! 2-D convolution (cross-correlation) with optional central pixel
//! differencing. Dense and grouped convolutions go through im2col + GEMM;
//! depthwise convolutions use direct loops.

use crate::error::{invalid, Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::shape::Shape;
use crate::tensor::{Conv2dCfg, ConvMode, Op, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub cfg: Conv2dCfg,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], cfg: Conv2dCfg) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() };
        if x.len() != 4 || w.len() != 4 {
            return Err(mismatch());
        }
        let (b, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        if cfg.groups == 0 || cfg.stride == 0 {
            return Err(invalid("conv2d", "groups and stride must be positive"));
        }
        if cin % cfg.groups != 0 || cout % cfg.groups != 0 || cin / cfg.groups != cin_g {
            return Err(mismatch());
        }
        if cfg.mode == ConvMode::CentralDifference && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(invalid("conv2d", "pixel-difference kernels must have odd size"));
        }
        if h + 2 * cfg.padding < kh || wd + 2 * cfg.padding < kw {
            return Err(invalid("conv2d", format!("input {h}x{wd} smaller than kernel {kh}x{kw}")));
        }
        let ho = (h + 2 * cfg.padding - kh) / cfg.stride + 1;
        let wo = (wd + 2 * cfg.padding - kw) / cfg.stride + 1;
        Ok(Self { b, cin, h, w: wd, cout, kh, kw, ho, wo, cin_g, cout_g: cout / cfg.groups, cfg })
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }

    fn krows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn out_dims(&self) -> Vec<usize> {
        vec![self.b, self.cout, self.ho, self.wo]
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.cfg.stride as isize, self.cfg.padding as isize);
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi_num = in_len as isize - 1 + p - k;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(out_len as isize) };
        (lo as usize, (hi.max(lo as isize)) as usize)
    }

    fn center_offset(&self) -> (isize, isize) {
        let p = self.cfg.padding as isize;
        ((self.kh / 2) as isize - p, (self.kw / 2) as isize - p)
    }
}

/// Values of the window centers for one channel plane, `ho * wo` long.
fn center_plane<F: Float>(g: &ConvGeom, plane: &[F], out: &mut [F]) {
    let (cy0, cx0) = g.center_offset();
    let s = g.cfg.stride as isize;
    for oy in 0..g.ho {
        let iy = oy as isize * s + cy0;
        for ox in 0..g.wo {
            let ix = ox as isize * s + cx0;
            out[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                plane[iy as usize * g.w + ix as usize]
            } else {
                F::zero()
            };
        }
    }
}

/// Fills `col` (krows x ho*wo) for image `bi`, group `gi`.
fn im2col<F: Float>(g: &ConvGeom, x: &[F], bi: usize, gi: usize, col: &mut [F], center: &mut [F]) {
    let hw_out = g.ho * g.wo;
    let s = g.cfg.stride;
    let p = g.cfg.padding;
    for c in 0..g.cin_g {
        let ch = gi * g.cin_g + c;
        let plane = &x[(bi * g.cin + ch) * g.h * g.w..(bi * g.cin + ch + 1) * g.h * g.w];
        let diff = g.cfg.mode == ConvMode::CentralDifference;
        if diff {
            center_plane(g, plane, center);
        }
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                dst.iter_mut().for_each(|v| *v = F::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if s == 1 {
                        let ix0 = ox_lo + kx - p;
                        d[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] = src_row[ox * s + kx - p];
                        }
                    }
                }
                if diff {
                    dst.iter_mut().zip(center.iter()).for_each(|(v, &c)| *v -= c);
                }
            }
        }
    }
}

/// Scatters `dcol` back into the gradient of image `bi`, group `gi`.
fn col2im<F: Float>(g: &ConvGeom, dcol: &[F], bi: usize, gi: usize, dx: &mut [F], dcenter: &mut [F]) {
    let hw_out = g.ho * g.wo;
    let s = g.cfg.stride;
    let p = g.cfg.padding;
    let diff = g.cfg.mode == ConvMode::CentralDifference;
    for c in 0..g.cin_g {
        let ch = gi * g.cin_g + c;
        let plane = &mut dx[(bi * g.cin + ch) * g.h * g.w..(bi * g.cin + ch + 1) * g.h * g.w];
        if diff {
            dcenter.iter_mut().for_each(|v| *v = F::zero());
        }
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &dcol[row * hw_out..(row + 1) * hw_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    for ox in ox_lo..ox_hi {
                        plane[iy * g.w + ox * s + kx - p] += src[oy * g.wo + ox];
                    }
                }
                if diff {
                    dcenter.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
        }
        if diff {
            let (cy0, cx0) = g.center_offset();
            let si = s as isize;
            for oy in 0..g.ho {
                let iy = oy as isize * si + cy0;
                for ox in 0..g.wo {
                    let ix = ox as isize * si + cx0;
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                        plane[iy as usize * g.w + ix as usize] -= dcenter[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<F: Float>(g: &ConvGeom, x: &[F], w: &[F], out: &mut [F]) {
    let hw_out = g.ho * g.wo;
    let mut center = vec![F::zero(); hw_out];
    let diff = g.cfg.mode == ConvMode::CentralDifference;
    let (s, p) = (g.cfg.stride, g.cfg.padding);
    for bi in 0..g.b {
        for c in 0..g.cin {
            let plane = &x[(bi * g.cin + c) * g.h * g.w..(bi * g.cin + c + 1) * g.h * g.w];
            let o = &mut out[(bi * g.cout + c) * hw_out..(bi * g.cout + c + 1) * hw_out];
            let wk = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            if diff {
                center_plane(g, plane, &mut center);
            }
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                    if diff {
                        // every tap sees -x_center; in-range taps add x_tap
                        o.iter_mut().zip(center.iter()).for_each(|(v, &c)| *v -= wv * c);
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut o[oy * g.wo..(oy + 1) * g.wo];
                        for ox in ox_lo..ox_hi {
                            dst[ox] += wv * src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<F: Float>(g: &ConvGeom, x: &[F], w: &[F], dout: &[F], dx: &mut [F], dw: &mut [F]) {
    let hw_out = g.ho * g.wo;
    let mut center = vec![F::zero(); hw_out];
    let mut dcenter = vec![F::zero(); hw_out];
    let diff = g.cfg.mode == ConvMode::CentralDifference;
    let (s, p) = (g.cfg.stride, g.cfg.padding);
    let (cy0, cx0) = g.center_offset();
    for bi in 0..g.b {
        for c in 0..g.cin {
            let poff = (bi * g.cin + c) * g.h * g.w;
            let plane = &x[poff..poff + g.h * g.w];
            let dplane = &mut dx[poff..poff + g.h * g.w];
            let go = &dout[(bi * g.cout + c) * hw_out..(bi * g.cout + c + 1) * hw_out];
            let wk = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dwk = &mut dw[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            if diff {
                center_plane(g, plane, &mut center);
                dcenter.iter_mut().for_each(|v| *v = F::zero());
            }
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let t = ky * g.kw + kx;
                    let wv = wk[t];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                    let mut acc = F::zero();
                    if diff {
                        for (o, (&gv, &cv)) in go.iter().zip(center.iter()).enumerate() {
                            acc -= gv * cv;
                            dcenter[o] += wv * gv;
                        }
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        for ox in ox_lo..ox_hi {
                            let ix = iy * g.w + ox * s + kx - p;
                            acc += grow[ox] * plane[ix];
                            dplane[ix] += wv * grow[ox];
                        }
                    }
                    dwk[t] += acc;
                }
            }
            if diff {
                let si = s as isize;
                for oy in 0..g.ho {
                    let iy = oy as isize * si + cy0;
                    for ox in 0..g.wo {
                        let ix = ox as isize * si + cx0;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            dplane[iy as usize * g.w + ix as usize] -= dcenter[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<F: Float>(g: &ConvGeom, x: &[F], w: &[F], bias: Option<&[F]>) -> Vec<F> {
    let hw_out = g.ho * g.wo;
    let mut out = vec![F::zero(); g.b * g.cout * hw_out];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let kr = g.krows();
        let pointwise = g.is_pointwise() && g.cfg.mode == ConvMode::Vanilla;
        let mut col = if pointwise { Vec::new() } else { vec![F::zero(); kr * hw_out] };
        let mut center = vec![F::zero(); hw_out];
        for bi in 0..g.b {
            for gi in 0..g.cfg.groups {
                let wg = MatRef::row_major(&w[gi * g.cout_g * kr..(gi + 1) * g.cout_g * kr], g.cout_g, kr);
                let o0 = (bi * g.cout + gi * g.cout_g) * hw_out;
                let dst = &mut out[o0..o0 + g.cout_g * hw_out];
                if pointwise {
                    let x0 = (bi * g.cin + gi * g.cin_g) * hw_out;
                    let xs = MatRef::row_major(&x[x0..x0 + g.cin_g * hw_out], g.cin_g, hw_out);
                    gemm(wg, xs, dst, false);
                } else {
                    im2col(g, x, bi, gi, &mut col, &mut center);
                    gemm(wg, MatRef::row_major(&col, kr, hw_out), dst, false);
                }
            }
        }
    }
    if let Some(bias) = bias {
        for bi in 0..g.b {
            for (o, &bv) in bias.iter().enumerate() {
                let s = (bi * g.cout + o) * hw_out;
                out[s..s + hw_out].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Option<Vec<F>>,
    pub db: Option<Vec<F>>,
}

pub(crate) fn conv_backward<F: Float>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dout: &[F],
    want: (bool, bool, bool),
) -> ConvGrads<F> {
    let hw_out = g.ho * g.wo;
    let db = want.2.then(|| {
        let mut db = vec![F::zero(); g.cout];
        for bi in 0..g.b {
            for (o, d) in db.iter_mut().enumerate() {
                let s = (bi * g.cout + o) * hw_out;
                *d += dout[s..s + hw_out].iter().copied().sum::<F>();
            }
        }
        db
    });
    if !want.0 && !want.1 {
        return ConvGrads { dx: None, dw: None, db };
    }
    let mut dx = vec![F::zero(); if want.0 { x.len() } else { 0 }];
    let mut dw = vec![F::zero(); w.len()];
    if g.is_depthwise() {
        if !want.0 {
            dx = vec![F::zero(); x.len()];
        }
        depthwise_backward(g, x, w, dout, &mut dx, &mut dw);
        return ConvGrads { dx: want.0.then_some(dx), dw: want.1.then_some(dw), db };
    }
    let kr = g.krows();
    let pointwise = g.is_pointwise() && g.cfg.mode == ConvMode::Vanilla;
    let mut col = vec![F::zero(); if pointwise { 0 } else { kr * hw_out }];
    let mut dcol = vec![F::zero(); kr * hw_out];
    let mut center = vec![F::zero(); hw_out];
    for bi in 0..g.b {
        for gi in 0..g.cfg.groups {
            let o0 = (bi * g.cout + gi * g.cout_g) * hw_out;
            let go = MatRef::row_major(&dout[o0..o0 + g.cout_g * hw_out], g.cout_g, hw_out);
            let wsl = &w[gi * g.cout_g * kr..(gi + 1) * g.cout_g * kr];
            if want.1 {
                let dwg = &mut dw[gi * g.cout_g * kr..(gi + 1) * g.cout_g * kr];
                if pointwise {
                    let x0 = (bi * g.cin + gi * g.cin_g) * hw_out;
                    let xs = MatRef::row_major(&x[x0..x0 + g.cin_g * hw_out], g.cin_g, hw_out);
                    gemm(go, xs.t(), dwg, true);
                } else {
                    im2col(g, x, bi, gi, &mut col, &mut center);
                    gemm(go, MatRef::row_major(&col, kr, hw_out).t(), dwg, true);
                }
            }
            if want.0 {
                let wg = MatRef::row_major(wsl, g.cout_g, kr);
                if pointwise {
                    let x0 = (bi * g.cin + gi * g.cin_g) * hw_out;
                    gemm(wg.t(), go, &mut dx[x0..x0 + g.cin_g * hw_out], true);
                } else {
                    gemm(wg.t(), go, &mut dcol, false);
                    col2im(g, &dcol, bi, gi, &mut dx, &mut center);
                }
            }
        }
    }
    ConvGrads { dx: want.0.then_some(dx), dw: want.1.then_some(dw), db }
}

impl<F: Float> Tensor<F> {
    /// `x: (B, Cin, H, W)`, `w: (Cout, Cin/groups, kh, kw)`, optional `bias: (Cout)`.
    pub fn conv2d(&self, w: &Tensor<F>, bias: Option<&Tensor<F>>, cfg: Conv2dCfg) -> Result<Tensor<F>> {
        let g = ConvGeom::new(self.dims(), w.dims(), cfg)?;
        if let Some(b) = bias {
            if b.dims() != [g.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![g.cout],
                    rhs: b.dims().to_vec(),
                });
            }
        }
        let out = conv_forward(&g, self.data(), w.data(), bias.map(|b| b.data()));
        Ok(Tensor::from_op(
            out,
            Shape::new(g.out_dims()),
            Op::Conv2d { x: self.clone(), w: w.clone(), bias: bias.cloned(), cfg },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(x: &[f64], dims: [usize; 4], w: &[f64], wd: [usize; 4], cfg: Conv2dCfg) -> Vec<f64> {
        let [b, cin, h, wi] = dims;
        let [cout, cin_g, kh, kw] = wd;
        let (s, p) = (cfg.stride as isize, cfg.padding as isize);
        let ho = (h as isize + 2 * p - kh as isize) / s + 1;
        let wo = (wi as isize + 2 * p - kw as isize) / s + 1;
        let cout_g = cout / cfg.groups;
        let at = |bi: usize, c: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= wi as isize {
                0.0
            } else {
                x[((bi * cin + c) * h + y as usize) * wi + xx as usize]
            }
        };
        let mut out = vec![];
        for bi in 0..b {
            for o in 0..cout {
                let gi = o / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cin_g {
                            let ch = gi * cin_g + c;
                            let cy = oy * s - p + (kh / 2) as isize;
                            let cx = ox * s - p + (kw / 2) as isize;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let v = at(bi, ch, oy * s - p + ky as isize, ox * s - p + kx as isize);
                                    let v = match cfg.mode {
                                        ConvMode::Vanilla => v,
                                        ConvMode::CentralDifference => v - at(bi, ch, cy, cx),
                                    };
                                    acc += w[((o * cin_g + c) * kh + ky) * kw + kx] * v;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_all_paths() {
        let cases = [
            ([2, 3, 5, 6], [4, 3, 3, 3], 1, 1, 1),
            ([1, 4, 7, 7], [4, 2, 3, 3], 2, 1, 2),
            ([2, 4, 6, 5], [4, 1, 3, 3], 1, 1, 4),
            ([1, 3, 8, 8], [5, 3, 1, 1], 1, 0, 1),
            ([1, 3, 9, 9], [2, 3, 3, 3], 2, 1, 1),
            ([1, 2, 9, 8], [2, 1, 3, 3], 2, 0, 2),
        ];
        for (i, (xd, wd, s, p, groups)) in cases.into_iter().enumerate() {
            for mode in [ConvMode::Vanilla, ConvMode::CentralDifference] {
                let cfg = Conv2dCfg { stride: s, padding: p, groups, mode };
                let x = pseudo(xd.iter().product(), i as u64);
                let w = pseudo(wd.iter().product(), 100 + i as u64);
                let tx = Tensor::<f64>::from_vec(x.clone(), xd).unwrap();
                let tw = Tensor::<f64>::from_vec(w.clone(), wd).unwrap();
                let got = tx.conv2d(&tw, None, cfg).unwrap();
                let want = brute(&x, xd, &w, wd, cfg);
                assert_eq!(got.elem_count(), want.len());
                for (a, b) in got.data().iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "case {i} {mode:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros((1, 3, 4, 4));
        let w = Tensor::<f32>::zeros((2, 2, 3, 3));
        assert!(x.conv2d(&w, None, Conv2dCfg::default()).is_err());
        let w = Tensor::<f32>::zeros((2, 3, 2, 2));
        let cfg = Conv2dCfg { mode: ConvMode::CentralDifference, ..Default::default() };
        assert!(x.conv2d(&w, None, cfg).is_err());
    }
}
