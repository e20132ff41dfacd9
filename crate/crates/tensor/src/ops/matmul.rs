use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::shape::Shape;
use crate::tensor::{Op, Tensor};

pub(crate) struct MatmulGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_b: bool,
    /// stored (rows, cols) of a single A / B matrix
    pub a_rc: (usize, usize),
    pub b_rc: (usize, usize),
}

pub(crate) fn geometry(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<(MatmulGeom, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let a_rc = (a[a.len() - 2], a[a.len() - 1]);
    let b_rc = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (a_rc.1, a_rc.0) } else { a_rc };
    let (k2, n) = if tb { (b_rc.1, b_rc.0) } else { b_rc };
    if k != k2 {
        return None;
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_b = b_batch.is_empty();
    if !shared_b && a_batch != b_batch {
        return None;
    }
    let batch = a_batch.iter().product();
    let mut out = a_batch.to_vec();
    out.extend([m, n]);
    Some((MatmulGeom { batch, m, k, n, shared_b, a_rc, b_rc }, out))
}

impl MatmulGeom {
    pub(crate) fn a_ref<'a, F: Float>(&self, data: &'a [F], i: usize, ta: bool) -> MatRef<'a, F> {
        let sz = self.a_rc.0 * self.a_rc.1;
        let r = MatRef::row_major(&data[i * sz..(i + 1) * sz], self.a_rc.0, self.a_rc.1);
        if ta {
            r.t()
        } else {
            r
        }
    }

    pub(crate) fn b_ref<'a, F: Float>(&self, data: &'a [F], i: usize, tb: bool) -> MatRef<'a, F> {
        let sz = self.b_rc.0 * self.b_rc.1;
        let i = if self.shared_b { 0 } else { i };
        let r = MatRef::row_major(&data[i * sz..(i + 1) * sz], self.b_rc.0, self.b_rc.1);
        if tb {
            r.t()
        } else {
            r
        }
    }
}

impl<F: Float> Tensor<F> {
    /// Matrix product over the last two axes. `rhs` is either rank 2 (shared
    /// across the batch) or has the same leading axes as `self`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_t(rhs, false, false)
    }

    /// Like [`Tensor::matmul`] with optional transposition of either operand's
    /// last two axes.
    pub fn matmul_t(&self, rhs: &Tensor<F>, ta: bool, tb: bool) -> Result<Tensor<F>> {
        let (g, out_dims) = geometry(self.dims(), rhs.dims(), ta, tb).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.dims().to_vec(),
            rhs: rhs.dims().to_vec(),
        })?;
        let mut out = vec![F::zero(); g.batch * g.m * g.n];
        if g.shared_b && !ta && g.batch > 0 {
            let a = MatRef::row_major(self.data(), g.batch * g.m, g.k);
            gemm(a, g.b_ref(rhs.data(), 0, tb), &mut out, false);
        } else {
            for i in 0..g.batch {
                let c = &mut out[i * g.m * g.n..(i + 1) * g.m * g.n];
                gemm(g.a_ref(self.data(), i, ta), g.b_ref(rhs.data(), i, tb), c, false);
            }
        }
        Ok(Tensor::from_op(out, Shape::new(out_dims), Op::Matmul { a: self.clone(), b: rhs.clone(), ta, tb }))
    }
}
