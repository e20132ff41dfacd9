use std::sync::Arc;

use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::shape::{contiguous_strides, Shape};
use crate::tensor::{Op, Tensor};

/// Copies `src` (with `dims`) into permuted order.
pub(crate) fn permute_data<F: Float>(src: &[F], dims: &[usize], perm: &[usize]) -> Vec<F> {
    let r = dims.len();
    let in_strides = contiguous_strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let inner = out_dims[r - 1];
    let inner_stride = src_strides[r - 1];
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    loop {
        let mut s = base;
        for _ in 0..inner {
            out.push(src[s]);
            s += inner_stride;
        }
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            base -= src_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<F: Float> Tensor<F> {
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor<F>> {
        let shape = shape.into();
        if shape.elem_count() != self.elem_count() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.dims().to_vec(),
                rhs: shape.dims().to_vec(),
            });
        }
        Ok(Tensor::from_shared(self.0.data.clone(), shape, Op::Reshape(self.clone())))
    }

    pub fn flatten_all(&self) -> Result<Tensor<F>> {
        self.reshape(self.elem_count())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<F>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {r}")));
        }
        let data = permute_data(self.data(), self.dims(), perm);
        let dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        Ok(Tensor::from_op(data, Shape::new(dims), Op::Permute { x: self.clone(), perm: perm.to_vec() }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<F>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(invalid("transpose", "axis out of range"));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let dims = self.dims();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(invalid("narrow", format!("range {start}..{} on axis {axis} of {dims:?}", start + len)));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_dims = dims.to_vec();
        new_dims[axis] = len;
        Ok(Tensor::from_op(out, Shape::new(new_dims), Op::Narrow { x: self.clone(), axis, start }))
    }

    /// Splits along `axis` into `n` equal chunks.
    pub fn chunk(&self, n: usize, axis: usize) -> Result<Vec<Tensor<F>>> {
        let d = *self.dims().get(axis).ok_or_else(|| invalid("chunk", "axis out of range"))?;
        if n == 0 || d % n != 0 {
            return Err(invalid("chunk", format!("cannot split {d} into {n} chunks")));
        }
        let len = d / n;
        (0..n).map(|i| self.narrow(axis, i * len, len)).collect()
    }

    pub fn cat(xs: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = xs.first().ok_or_else(|| invalid("cat", "empty input"))?;
        let r = first.rank();
        if axis >= r {
            return Err(invalid("cat", "axis out of range"));
        }
        let mut total = 0;
        for x in xs {
            let ok = x.rank() == r
                && x.dims().iter().zip(first.dims()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: first.dims().to_vec(),
                    rhs: x.dims().to_vec(),
                });
            }
            total += x.dims()[axis];
        }
        let outer: usize = first.dims()[..axis].iter().product();
        let inner: usize = first.dims()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = x.dims()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = total;
        Ok(Tensor::from_op(out, Shape::new(dims), Op::Cat { xs: xs.to_vec(), axis }))
    }

    /// Treats the tensor as rows of its last dimension and returns
    /// `out[r] = self[index[r]]`, shaped `(index.len(), row_len)`.
    pub fn gather_rows(&self, index: Arc<Vec<usize>>) -> Result<Tensor<F>> {
        let row = *self.dims().last().ok_or_else(|| invalid("gather_rows", "rank 0 tensor"))?;
        let rows = if row == 0 { 0 } else { self.elem_count() / row };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(invalid("gather_rows", format!("row {bad} out of range ({rows} rows)")));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let shape = Shape::new(vec![index.len(), row]);
        Ok(Tensor::from_op(out, shape, Op::GatherRows { x: self.clone(), index }))
    }
}
