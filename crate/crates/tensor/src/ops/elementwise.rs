use crate::error::{invalid, Result, TensorError};
use crate::float::Float;
use crate::shape::{broadcast_strides, for_each_broadcast2, Shape};
use crate::tensor::{BinaryOp, Op, Tensor, UnaryOp};

#[inline]
pub(crate) fn gelu<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let cdf = F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::lit(0.5)).exp() * F::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> Tensor<F> {
    fn binary(&self, rhs: &Tensor<F>, kind: BinaryOp, name: &'static str) -> Result<Tensor<F>> {
        let f: fn(F, F) -> F = match kind {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
            BinaryOp::Div => |a, b| a / b,
        };
        let (a, b) = (self.data(), rhs.data());
        let (shape, data) = if self.shape() == rhs.shape() {
            (self.shape().clone(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let out = self.shape().broadcast(rhs.shape(), name)?;
            let sa = broadcast_strides(self.dims(), out.dims());
            let sb = broadcast_strides(rhs.dims(), out.dims());
            let mut data = vec![F::zero(); out.elem_count()];
            for_each_broadcast2(out.dims(), &sa, &sb, |o, ia, ib| data[o] = f(a[ia], b[ib]));
            (out, data)
        };
        Ok(Tensor::from_op(data, shape, Op::Binary(kind, self.clone(), rhs.clone())))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryOp::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryOp::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryOp::Mul, "mul")
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryOp::Div, "div")
    }

    fn unary(&self, kind: UnaryOp) -> Tensor<F> {
        let f: fn(F) -> F = match kind {
            UnaryOp::Neg => |x| -x,
            UnaryOp::Exp => |x| x.exp(),
            UnaryOp::Ln => |x| x.ln(),
            UnaryOp::Relu => |x| if x > F::zero() { x } else { F::zero() },
            UnaryOp::Gelu => gelu,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => |x| x.tanh(),
            UnaryOp::Sqr => |x| x * x,
            UnaryOp::Sqrt => |x| x.sqrt(),
        };
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().clone(), Op::Unary(kind, self.clone()))
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary(UnaryOp::Neg)
    }
    pub fn exp(&self) -> Tensor<F> {
        self.unary(UnaryOp::Exp)
    }
    pub fn ln(&self) -> Tensor<F> {
        self.unary(UnaryOp::Ln)
    }
    pub fn relu(&self) -> Tensor<F> {
        self.unary(UnaryOp::Relu)
    }
    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<F> {
        self.unary(UnaryOp::Gelu)
    }
    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary(UnaryOp::Sigmoid)
    }
    pub fn tanh(&self) -> Tensor<F> {
        self.unary(UnaryOp::Tanh)
    }
    pub fn sqr(&self) -> Tensor<F> {
        self.unary(UnaryOp::Sqr)
    }
    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(UnaryOp::Sqrt)
    }

    /// `x * mul + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor<F> {
        let (m, a) = (F::lit(mul), F::lit(add));
        let data = self.data().iter().map(|&x| x * m + a).collect();
        Tensor::from_op(data, self.shape().clone(), Op::Affine { x: self.clone(), mul: m })
    }

    pub fn scale(&self, s: f64) -> Tensor<F> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, v: f64) -> Tensor<F> {
        self.affine(1.0, v)
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<F> {
        let (l, h) = (F::lit(lo), F::lit(hi));
        let data = self.data().iter().map(|&x| x.max(l).min(h)).collect();
        Tensor::from_op(data, self.shape().clone(), Op::Clamp { x: self.clone(), lo: l, hi: h })
    }

    /// Sum-reduce into `target` (which must broadcast to this shape).
    pub fn sum_to(&self, target: impl Into<Shape>) -> Result<Tensor<F>> {
        let target = target.into();
        if target.rank() > self.rank() || target.broadcast(self.shape(), "sum_to")? != *self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: self.dims().to_vec(),
                rhs: target.dims().to_vec(),
            });
        }
        let ident = crate::shape::contiguous_strides(self.dims());
        let st = broadcast_strides(target.dims(), self.dims());
        let mut out = vec![F::zero(); target.elem_count()];
        let src = self.data();
        for_each_broadcast2(self.dims(), &ident, &st, |_, i, t| out[t] += src[i]);
        Ok(Tensor::from_op(out, target, Op::SumTo(self.clone())))
    }

    /// Sum over `axes`; reduced axes are kept with size 1.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let mut dims = self.dims().to_vec();
        for &a in axes {
            if a >= dims.len() {
                return Err(invalid("sum_keepdim", format!("axis {a} out of range for rank {}", dims.len())));
            }
            dims[a] = 1;
        }
        self.sum_to(dims)
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s: F = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Shape::new(vec![]), Op::SumTo(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.elem_count().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Result<Tensor<F>> {
        let n: usize = axes.iter().map(|&a| self.dims().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_keepdim(axes)?.scale(1.0 / n.max(1) as f64))
    }
}
