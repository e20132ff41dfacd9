use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::tensor::{Op, Tensor};

fn normalize_rows<F: Float>(src: &[F], row: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let rows = if row == 0 { 0 } else { src.len() / row };
    let mut xhat = vec![F::zero(); src.len()];
    let mut rstd = Vec::with_capacity(rows);
    let n = F::usize(row);
    for r in 0..rows {
        let x = &src[r * row..(r + 1) * row];
        let mean = x.iter().copied().sum::<F>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        for (o, &v) in xhat[r * row..(r + 1) * row].iter_mut().zip(x) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (xhat, rstd)
}

/// Gradient of `xhat` normalization for one row given `dxhat`.
pub(crate) fn norm_row_backward<F: Float>(xhat: &[F], dxhat: &[F], rstd: F, dx: &mut [F]) {
    let n = F::usize(xhat.len());
    let mean_d = dxhat.iter().copied().sum::<F>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&d, &x)| d * x).sum::<F>() / n;
    for ((o, &d), &x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += rstd * (d - mean_d - x * mean_dx);
    }
}

impl<F: Float> Tensor<F> {
    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<F>> {
        let row = *self.dims().last().ok_or_else(|| invalid("softmax", "rank 0 tensor"))?;
        let mut out = self.to_vec();
        if row > 0 {
            for r in out.chunks_mut(row) {
                let m = r.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for v in r.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                r.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(Tensor::from_op(out, self.shape().clone(), Op::Softmax(self.clone())))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let row = *self.dims().last().ok_or_else(|| invalid("layer_norm", "rank 0 tensor"))?;
        if gamma.dims() != [row] || beta.dims() != [row] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: self.dims().to_vec(), rhs: gamma.dims().to_vec() });
        }
        let (xhat, rstd) = normalize_rows(self.data(), row, F::lit(eps));
        let (g, b) = (gamma.data(), beta.data());
        let mut out = xhat.clone();
        if row > 0 {
            for r in out.chunks_mut(row) {
                for ((v, &gv), &bv) in r.iter_mut().zip(g).zip(b) {
                    *v = *v * gv + bv;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().clone(),
            Op::LayerNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), xhat, rstd },
        ))
    }

    /// Instance normalization of `(B, C, H, W)` over `H, W`, then per-channel
    /// affine `gamma`, `beta` of shape `(C)`.
    pub fn instance_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let d = self.dims();
        if d.len() != 4 || gamma.dims() != [d[1]] || beta.dims() != [d[1]] {
            return Err(TensorError::ShapeMismatch { op: "instance_norm", lhs: d.to_vec(), rhs: gamma.dims().to_vec() });
        }
        let (c, hw) = (d[1], d[2] * d[3]);
        let (xhat, rstd) = normalize_rows(self.data(), hw, F::lit(eps));
        let mut out = xhat.clone();
        if hw > 0 {
            for (i, plane) in out.chunks_mut(hw).enumerate() {
                let (gv, bv) = (gamma.data()[i % c], beta.data()[i % c]);
                plane.iter_mut().for_each(|v| *v = *v * gv + bv);
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().clone(),
            Op::InstanceNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), xhat, rstd },
        ))
    }
}
