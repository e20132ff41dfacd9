use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::shape::Shape;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

pub(crate) fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any operation on the tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Sqr,
    Sqrt,
}

/// Convolution flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvMode {
    /// Plain cross-correlation.
    #[default]
    Vanilla,
    /// Central pixel-difference convolution: every tap sees
    /// `x_tap - x_center` instead of `x_tap`.
    CentralDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub mode: ConvMode,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1, mode: ConvMode::Vanilla }
    }
}

pub(crate) enum Op<F: Float> {
    Binary(BinaryOp, Tensor<F>, Tensor<F>),
    Unary(UnaryOp, Tensor<F>),
    Affine { x: Tensor<F>, mul: F },
    Clamp { x: Tensor<F>, lo: F, hi: F },
    SumTo(Tensor<F>),
    Reshape(Tensor<F>),
    Permute { x: Tensor<F>, perm: Vec<usize> },
    Narrow { x: Tensor<F>, axis: usize, start: usize },
    Cat { xs: Vec<Tensor<F>>, axis: usize },
    GatherRows { x: Tensor<F>, index: Arc<Vec<usize>> },
    Matmul { a: Tensor<F>, b: Tensor<F>, ta: bool, tb: bool },
    Conv2d { x: Tensor<F>, w: Tensor<F>, bias: Option<Tensor<F>>, cfg: Conv2dCfg },
    MaxPool2(Tensor<F>, Vec<u32>),
    UpsampleBilinear(Tensor<F>),
    Softmax(Tensor<F>),
    LayerNorm { x: Tensor<F>, gamma: Tensor<F>, beta: Tensor<F>, xhat: Vec<F>, rstd: Vec<F> },
    InstanceNorm { x: Tensor<F>, gamma: Tensor<F>, beta: Tensor<F>, xhat: Vec<F>, rstd: Vec<F> },
}

impl<F: Float> Op<F> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<F>> {
        match self {
            Op::Binary(_, a, b) => vec![a, b],
            Op::Unary(_, x)
            | Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::SumTo(x)
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::GatherRows { x, .. }
            | Op::MaxPool2(x, _)
            | Op::UpsampleBilinear(x)
            | Op::Softmax(x) => vec![x],
            Op::Cat { xs, .. } => xs.iter().collect(),
            Op::Matmul { a, b, .. } => vec![a, b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::InstanceNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
        }
    }
}

pub(crate) struct Inner<F: Float> {
    pub(crate) id: usize,
    pub(crate) shape: Shape,
    pub(crate) data: Arc<Vec<F>>,
    pub(crate) op: Option<Op<F>>,
    pub(crate) is_var: bool,
}

/// Immutable, reference-counted dense tensor (row-major, contiguous).
pub struct Tensor<F: Float>(pub(crate) Arc<Inner<F>>);

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(self.0.clone())
    }
}

impl<F: Float> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", F::NAME, self.shape())
    }
}

impl<F: Float> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.elem_count() != data.len() {
            return Err(TensorError::DataLength { shape: shape.dims().to_vec(), got: data.len() });
        }
        Ok(Self::constant(data, shape))
    }

    pub fn from_f64_slice(data: &[f64], shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| F::lit(v)).collect(), shape)
    }

    pub(crate) fn constant(data: Vec<F>, shape: Shape) -> Self {
        debug_assert_eq!(shape.elem_count(), data.len());
        Tensor(Arc::new(Inner { id: fresh_id(), shape, data: Arc::new(data), op: None, is_var: false }))
    }

    /// A leaf that accumulates gradients.
    pub fn var(data: Vec<F>, shape: impl Into<Shape>) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_var())
    }

    pub(crate) fn var_with_id(id: usize, data: Vec<F>, shape: Shape) -> Self {
        Tensor(Arc::new(Inner { id, shape, data: Arc::new(data), op: None, is_var: true }))
    }

    pub fn into_var(self) -> Self {
        Tensor(Arc::new(Inner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            op: None,
            is_var: true,
        }))
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self::constant(vec![F::zero(); shape.elem_count()], shape)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(F::one(), shape)
    }

    pub fn full(v: F, shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self::constant(vec![v; shape.elem_count()], shape)
    }

    pub fn scalar(v: F) -> Self {
        Self::constant(vec![v], Shape::new(vec![]))
    }

    /// Records `op` only when gradients are enabled and some input needs one.
    pub(crate) fn from_op(data: Vec<F>, shape: Shape, op: Op<F>) -> Self {
        debug_assert_eq!(shape.elem_count(), data.len(), "op produced wrong length");
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            op: if track { Some(op) } else { None },
            is_var: false,
        }))
    }

    pub(crate) fn from_shared(data: Arc<Vec<F>>, shape: Shape, op: Op<F>) -> Self {
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            op: if track { Some(op) } else { None },
            is_var: false,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.0.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.rank()
    }

    pub fn elem_count(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_var(&self) -> bool {
        self.0.is_var
    }

    pub fn requires_grad(&self) -> bool {
        self.0.is_var || self.0.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&Op<F>> {
        self.0.op.as_ref()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            op: None,
            is_var: false,
        }))
    }

    pub fn to_scalar(&self) -> Result<F> {
        if self.elem_count() != 1 {
            return Err(crate::error::invalid("to_scalar", format!("tensor has shape {:?}", self.dims())));
        }
        Ok(self.0.data[0])
    }

    /// Elementwise conversion into another float type (graph is not kept).
    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor::constant(
            self.data().iter().map(|v| G::lit(v.as_f64())).collect(),
            self.shape().clone(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}
