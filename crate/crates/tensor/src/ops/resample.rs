use crate::error::{invalid, Result};
use crate::float::Float;
use crate::shape::Shape;
use crate::tensor::{Op, Tensor};

/// Per-output-coordinate interpolation taps (half-pixel centers, edge clamped).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

impl<F: Float> Tensor<F> {
    /// 2x2 max pooling with stride 2 on `(B, C, H, W)`.
    pub fn max_pool2(&self) -> Result<Tensor<F>> {
        let d = self.dims();
        if d.len() != 4 || d[2] < 2 || d[3] < 2 {
            return Err(invalid("max_pool2", format!("expected (B,C,H,W) with H,W >= 2, got {d:?}")));
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best as u32);
                }
            }
        }
        Ok(Tensor::from_op(out, Shape::new(vec![d[0], d[1], ho, wo]), Op::MaxPool2(self.clone(), arg)))
    }

    /// Bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`
    /// (half-pixel centers, no corner alignment).
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
        let d = self.dims();
        if d.len() != 4 || d[2] == 0 || d[3] == 0 || out_h == 0 || out_w == 0 {
            return Err(invalid("upsample_bilinear", format!("bad geometry {d:?} -> {out_h}x{out_w}")));
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let tx: Vec<_> = tx.into_iter().map(|(a, b, wa, wb)| (a, b, F::lit(wa), F::lit(wb))).collect();
        let src = self.data();
        let mut out = vec![F::zero(); planes * out_h * out_w];
        let mut rowbuf = vec![F::zero(); w];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (F::lit(wy0), F::lit(wy1));
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                for ((dst, &a), &b) in rowbuf.iter_mut().zip(r0).zip(r1) {
                    *dst = a * wy0 + b * wy1;
                }
                let o = &mut out[(p * out_h + oy) * out_w..(p * out_h + oy + 1) * out_w];
                for (dst, &(x0, x1, wx0, wx1)) in o.iter_mut().zip(tx.iter()) {
                    *dst = rowbuf[x0] * wx0 + rowbuf[x1] * wx1;
                }
            }
        }
        Ok(Tensor::from_op(out, Shape::new(vec![d[0], d[1], out_h, out_w]), Op::UpsampleBilinear(self.clone())))
    }

    pub fn upsample2x(&self) -> Result<Tensor<F>> {
        let d = self.dims();
        if d.len() != 4 {
            return Err(invalid("upsample2x", format!("expected rank 4, got {d:?}")));
        }
        self.upsample_bilinear(d[2] * 2, d[3] * 2)
    }
}

pub(crate) fn upsample_backward<F: Float>(in_dims: &[usize], out_dims: &[usize], g: &[F]) -> Vec<F> {
    let (planes, h, w) = (in_dims[0] * in_dims[1], in_dims[2], in_dims[3]);
    let (oh, ow) = (out_dims[2], out_dims[3]);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![F::zero(); planes * h * w];
    let mut rowbuf = vec![F::zero(); w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            rowbuf.iter_mut().for_each(|v| *v = F::zero());
            let grow = &g[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (&gv, &(x0, x1, wx0, wx1)) in grow.iter().zip(tx.iter()) {
                rowbuf[x0] += gv * F::lit(wx0);
                rowbuf[x1] += gv * F::lit(wx1);
            }
            let (wy0, wy1) = (F::lit(wy0), F::lit(wy1));
            for (i, &r) in rowbuf.iter().enumerate() {
                plane[y0 * w + i] += r * wy0;
                plane[y1 * w + i] += r * wy1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::<f64>::from_f64_slice(&[1., 5., 2., 0., 3., 4., 7., 1., 0., 0., 0., 0., 9., 0., 0., 8.], (1, 1, 4, 4))
            .unwrap();
        assert_eq!(x.max_pool2().unwrap().to_f64_vec(), vec![5., 7., 9., 8.]);
    }

    #[test]
    fn upsample_constant_and_exact_average() {
        let x = Tensor::<f64>::full(3.0, (1, 2, 3, 5));
        let y = x.upsample_bilinear(12, 7).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        // 1x2 -> 1x4: half-pixel centers give [a, .75a+.25b, .25a+.75b, b]
        let x = Tensor::<f64>::from_f64_slice(&[0., 4.], (1, 1, 1, 2)).unwrap();
        assert_eq!(x.upsample_bilinear(1, 4).unwrap().to_f64_vec(), vec![0., 1., 3., 4.]);
    }
}
