use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::ops::conv::{conv_backward, ConvGeom};
use crate::ops::elementwise::gelu_grad;
use crate::ops::layout::{inverse_perm, permute_data};
use crate::ops::matmul::geometry;
use crate::ops::norm::norm_row_backward;
use crate::ops::resample::upsample_backward;
use crate::shape::{broadcast_strides, contiguous_strides, for_each_broadcast2};
use crate::tensor::{BinaryOp, Op, Tensor, UnaryOp};

/// Gradients of a scalar with respect to every variable it depends on,
/// keyed by tensor id.
pub struct GradStore<F: Float> {
    map: HashMap<usize, Vec<F>>,
}

impl<F: Float> GradStore<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_id(&self, id: usize) -> Option<&[F]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn get_tensor(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        self.get(t).map(|g| Tensor::constant(g.to_vec(), t.shape().clone()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn accumulate<F: Float>(map: &mut HashMap<usize, Vec<F>>, t: &Tensor<F>, g: Vec<F>) {
    if !t.requires_grad() {
        return;
    }
    debug_assert_eq!(g.len(), t.elem_count());
    match map.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            map.insert(t.id(), g);
        }
    }
}

fn topo_order<F: Float>(root: &Tensor<F>) -> Vec<Tensor<F>> {
    let mut visited = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.op() {
            for inp in op.inputs() {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

impl<F: Float> Tensor<F> {
    /// Reverse-mode differentiation of a single-element tensor.
    pub fn backward(&self) -> Result<GradStore<F>> {
        if self.elem_count() != 1 {
            return Err(TensorError::NonScalarBackward(self.dims().to_vec()));
        }
        self.backward_with(vec![F::one()])
    }

    /// Reverse-mode differentiation seeded with `seed` (same length as self).
    pub fn backward_with(&self, seed: Vec<F>) -> Result<GradStore<F>> {
        if seed.len() != self.elem_count() {
            return Err(TensorError::DataLength { shape: self.dims().to_vec(), got: seed.len() });
        }
        let mut map = HashMap::new();
        if !self.requires_grad() {
            return Ok(GradStore { map });
        }
        let order = topo_order(self);
        map.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(op) = node.op() else { continue };
            let Some(g) = map.remove(&node.id()) else { continue };
            backward_op(node, op, &g, &mut map);
        }
        // only variables keep their gradients
        let vars: HashSet<usize> = order.iter().filter(|t| t.is_var()).map(|t| t.id()).collect();
        map.retain(|id, _| vars.contains(id));
        Ok(GradStore { map })
    }
}

fn backward_op<F: Float>(node: &Tensor<F>, op: &Op<F>, g: &[F], map: &mut HashMap<usize, Vec<F>>) {
    match op {
        Op::Binary(kind, a, b) => binary_backward(*kind, node, a, b, g, map),
        Op::Unary(kind, x) => {
            let xs = x.data();
            let ys = node.data();
            let d: Vec<F> = match kind {
                UnaryOp::Neg => g.iter().map(|&v| -v).collect(),
                UnaryOp::Exp => g.iter().zip(ys).map(|(&gv, &y)| gv * y).collect(),
                UnaryOp::Ln => g.iter().zip(xs).map(|(&gv, &x)| gv / x).collect(),
                UnaryOp::Relu => {
                    g.iter().zip(xs).map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() }).collect()
                }
                UnaryOp::Gelu => g.iter().zip(xs).map(|(&gv, &x)| gv * gelu_grad(x)).collect(),
                UnaryOp::Sigmoid => g.iter().zip(ys).map(|(&gv, &y)| gv * y * (F::one() - y)).collect(),
                UnaryOp::Tanh => g.iter().zip(ys).map(|(&gv, &y)| gv * (F::one() - y * y)).collect(),
                UnaryOp::Sqr => g.iter().zip(xs).map(|(&gv, &x)| gv * (x + x)).collect(),
                UnaryOp::Sqrt => g.iter().zip(ys).map(|(&gv, &y)| gv / (y + y)).collect(),
            };
            accumulate(map, x, d);
        }
        Op::Affine { x, mul } => accumulate(map, x, g.iter().map(|&v| v * *mul).collect()),
        Op::Clamp { x, lo, hi } => {
            let d = g
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { F::zero() })
                .collect();
            accumulate(map, x, d);
        }
        Op::SumTo(x) => {
            let ident = contiguous_strides(x.dims());
            let st = broadcast_strides(node.dims(), x.dims());
            let mut d = vec![F::zero(); x.elem_count()];
            for_each_broadcast2(x.dims(), &ident, &st, |_, i, t| d[i] = g[t]);
            accumulate(map, x, d);
        }
        Op::Reshape(x) => accumulate(map, x, g.to_vec()),
        Op::Permute { x, perm } => {
            accumulate(map, x, permute_data(g, node.dims(), &inverse_perm(perm)));
        }
        Op::Narrow { x, axis, start } => {
            let xd = x.dims();
            let len = node.dims()[*axis];
            let outer: usize = xd[..*axis].iter().product();
            let inner: usize = xd[axis + 1..].iter().product();
            let mut d = vec![F::zero(); x.elem_count()];
            for o in 0..outer {
                let dst = (o * xd[*axis] + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(map, x, d);
        }
        Op::Cat { xs, axis } => {
            let nd = node.dims();
            let outer: usize = nd[..*axis].iter().product();
            let inner: usize = nd[axis + 1..].iter().product();
            let total = nd[*axis] * inner;
            let mut off = 0;
            for x in xs {
                let chunk = x.dims()[*axis] * inner;
                if x.requires_grad() {
                    let mut d = Vec::with_capacity(x.elem_count());
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + off..o * total + off + chunk]);
                    }
                    accumulate(map, x, d);
                }
                off += chunk;
            }
        }
        Op::GatherRows { x, index } => {
            let row = *x.dims().last().unwrap_or(&1);
            let mut d = vec![F::zero(); x.elem_count()];
            for (r, &src) in index.iter().enumerate() {
                let dst = &mut d[src * row..(src + 1) * row];
                dst.iter_mut().zip(&g[r * row..(r + 1) * row]).for_each(|(a, &b)| *a += b);
            }
            accumulate(map, x, d);
        }
        Op::Matmul { a, b, ta, tb } => matmul_backward(a, b, *ta, *tb, g, map),
        Op::Conv2d { x, w, bias, cfg } => {
            let geom = ConvGeom::new(x.dims(), w.dims(), *cfg).expect("validated in forward");
            let want = (x.requires_grad(), w.requires_grad(), bias.as_ref().is_some_and(|b| b.requires_grad()));
            let grads = conv_backward(&geom, x.data(), w.data(), g, want);
            if let Some(dx) = grads.dx {
                accumulate(map, x, dx);
            }
            if let Some(dw) = grads.dw {
                accumulate(map, w, dw);
            }
            if let (Some(b), Some(db)) = (bias, grads.db) {
                accumulate(map, b, db);
            }
        }
        Op::MaxPool2(x, arg) => {
            let mut d = vec![F::zero(); x.elem_count()];
            for (&i, &gv) in arg.iter().zip(g) {
                d[i as usize] += gv;
            }
            accumulate(map, x, d);
        }
        Op::UpsampleBilinear(x) => accumulate(map, x, upsample_backward(x.dims(), node.dims(), g)),
        Op::Softmax(x) => {
            let row = *node.dims().last().unwrap_or(&1);
            let y = node.data();
            let mut d = vec![F::zero(); y.len()];
            if row > 0 {
                for ((dr, yr), gr) in d.chunks_mut(row).zip(y.chunks(row)).zip(g.chunks(row)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
            }
            accumulate(map, x, d);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let row = gamma.elem_count();
            let gm = gamma.data();
            let mut dgamma = vec![F::zero(); row];
            let mut dbeta = vec![F::zero(); row];
            let mut dx = vec![F::zero(); xhat.len()];
            let mut dxhat = vec![F::zero(); row];
            if row > 0 {
                for (r, (gr, xr)) in g.chunks(row).zip(xhat.chunks(row)).enumerate() {
                    for j in 0..row {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                    }
                    norm_row_backward(xr, &dxhat, rstd[r], &mut dx[r * row..(r + 1) * row]);
                }
            }
            accumulate(map, x, dx);
            accumulate(map, gamma, dgamma);
            accumulate(map, beta, dbeta);
        }
        Op::InstanceNorm { x, gamma, beta, xhat, rstd } => {
            let d = x.dims();
            let (c, hw) = (d[1], d[2] * d[3]);
            let gm = gamma.data();
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            let mut dx = vec![F::zero(); xhat.len()];
            let mut dxhat = vec![F::zero(); hw];
            if hw > 0 {
                for (p, (gr, xr)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for j in 0..hw {
                        dgamma[ch] += gr[j] * xr[j];
                        dbeta[ch] += gr[j];
                        dxhat[j] = gr[j] * gm[ch];
                    }
                    norm_row_backward(xr, &dxhat, rstd[p], &mut dx[p * hw..(p + 1) * hw]);
                }
            }
            accumulate(map, x, dx);
            accumulate(map, gamma, dgamma);
            accumulate(map, beta, dbeta);
        }
    }
}

fn binary_backward<F: Float>(
    kind: BinaryOp,
    node: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &[F],
    map: &mut HashMap<usize, Vec<F>>,
) {
    let (wa, wb) = (a.requires_grad(), b.requires_grad());
    let (av, bv) = (a.data(), b.data());
    let mut da = vec![F::zero(); if wa { av.len() } else { 0 }];
    let mut db = vec![F::zero(); if wb { bv.len() } else { 0 }];
    let mut step = |o: usize, ia: usize, ib: usize| {
        let gv = g[o];
        match kind {
            BinaryOp::Add => {
                if wa {
                    da[ia] += gv;
                }
                if wb {
                    db[ib] += gv;
                }
            }
            BinaryOp::Sub => {
                if wa {
                    da[ia] += gv;
                }
                if wb {
                    db[ib] -= gv;
                }
            }
            BinaryOp::Mul => {
                if wa {
                    da[ia] += gv * bv[ib];
                }
                if wb {
                    db[ib] += gv * av[ia];
                }
            }
            BinaryOp::Div => {
                if wa {
                    da[ia] += gv / bv[ib];
                }
                if wb {
                    db[ib] -= gv * av[ia] / (bv[ib] * bv[ib]);
                }
            }
        }
    };
    if a.shape() == b.shape() {
        for o in 0..g.len() {
            step(o, o, o);
        }
    } else {
        let sa = broadcast_strides(a.dims(), node.dims());
        let sb = broadcast_strides(b.dims(), node.dims());
        for_each_broadcast2(node.dims(), &sa, &sb, step);
    }
    if wa {
        accumulate(map, a, da);
    }
    if wb {
        accumulate(map, b, db);
    }
}

fn matmul_backward<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    ta: bool,
    tb: bool,
    g: &[F],
    map: &mut HashMap<usize, Vec<F>>,
) {
    let (geo, _) = geometry(a.dims(), b.dims(), ta, tb).expect("validated in forward");
    let mn = geo.m * geo.n;
    if a.requires_grad() {
        let asz = geo.a_rc.0 * geo.a_rc.1;
        let mut da = vec![F::zero(); a.elem_count()];
        if geo.shared_b && !ta && geo.batch > 0 {
            // dA (batch*m x k) = dC (batch*m x n) * op(B)^T
            let dc = MatRef::row_major(g, geo.batch * geo.m, geo.n);
            gemm(dc, geo.b_ref(b.data(), 0, tb).t(), &mut da, false);
        } else {
            for i in 0..geo.batch {
                let dc = MatRef::row_major(&g[i * mn..(i + 1) * mn], geo.m, geo.n);
                let opb = geo.b_ref(b.data(), i, tb);
                let dst = &mut da[i * asz..(i + 1) * asz];
                if ta {
                    gemm(opb, dc.t(), dst, false);
                } else {
                    gemm(dc, opb.t(), dst, false);
                }
            }
        }
        accumulate(map, a, da);
    }
    if b.requires_grad() {
        let bsz = geo.b_rc.0 * geo.b_rc.1;
        let mut dbv = vec![F::zero(); b.elem_count()];
        if geo.shared_b && !ta && geo.batch > 0 {
            let opa = MatRef::row_major(a.data(), geo.batch * geo.m, geo.k);
            let dc = MatRef::row_major(g, geo.batch * geo.m, geo.n);
            if tb {
                gemm(dc.t(), opa, &mut dbv, false);
            } else {
                gemm(opa.t(), dc, &mut dbv, false);
            }
        } else {
            for i in 0..geo.batch {
                let dc = MatRef::row_major(&g[i * mn..(i + 1) * mn], geo.m, geo.n);
                let opa = geo.a_ref(a.data(), i, ta);
                let j = if geo.shared_b { 0 } else { i };
                let dst = &mut dbv[j * bsz..(j + 1) * bsz];
                if tb {
                    gemm(dc.t(), opa, dst, geo.shared_b);
                } else {
                    gemm(opa.t(), dc, dst, geo.shared_b);
                }
            }
        }
        accumulate(map, b, dbv);
    }
}
