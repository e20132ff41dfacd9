use crate::error::{Result, TensorError};

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Self {
        Self(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn elem_count(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        contiguous_strides(&self.0)
    }

    /// Numpy-style broadcast of two shapes.
    pub fn broadcast(&self, other: &Shape, op: &'static str) -> Result<Shape> {
        let r = self.rank().max(other.rank());
        let mut out = vec![0; r];
        for (i, slot) in out.iter_mut().enumerate() {
            let a = dim_from_right(&self.0, r - 1 - i);
            let b = dim_from_right(&other.0, r - 1 - i);
            *slot = match (a, b) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: self.0.clone(),
                        rhs: other.0.clone(),
                    })
                }
            };
        }
        Ok(Shape(out))
    }
}

fn dim_from_right(dims: &[usize], k: usize) -> usize {
    if k < dims.len() {
        dims[dims.len() - 1 - k]
    } else {
        1
    }
}

pub(crate) fn contiguous_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Strides of `src` when viewed inside the broadcast shape `out` (0 on
/// broadcast axes).
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset {
                0
            } else {
                let d = src[i - offset];
                if d == 1 && out[i] != 1 {
                    0
                } else {
                    own[i - offset]
                }
            }
        })
        .collect()
}

/// Visit every position of `out_dims` in row-major order, yielding the flat
/// output index and the flat offsets into two operands with the given
/// (possibly zero) strides.
pub(crate) fn for_each_broadcast2(
    out_dims: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_dims.iter().product();
    if total == 0 {
        return;
    }
    let r = out_dims.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_dims[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let mut o = 0;
    let (mut base_a, mut base_b) = (0usize, 0usize);
    loop {
        let (mut a, mut b) = (base_a, base_b);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ia_step;
            b += ib_step;
        }
        // advance outer index
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            base_a -= sa[ax] * out_dims[ax];
            base_b -= sb[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(v: [usize; N]) -> Self {
        Shape(v.to_vec())
    }
}

impl From<()> for Shape {
    fn from(_: ()) -> Self {
        Shape(vec![])
    }
}

impl From<usize> for Shape {
    fn from(v: usize) -> Self {
        Shape(vec![v])
    }
}

impl From<(usize, usize)> for Shape {
    fn from(v: (usize, usize)) -> Self {
        Shape(vec![v.0, v.1])
    }
}

impl From<(usize, usize, usize)> for Shape {
    fn from(v: (usize, usize, usize)) -> Self {
        Shape(vec![v.0, v.1, v.2])
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from(v: (usize, usize, usize, usize)) -> Self {
        Shape(vec![v.0, v.1, v.2, v.3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        let a = Shape::from((2, 1, 4));
        let b = Shape::from((3, 1));
        assert_eq!(a.broadcast(&b, "t").unwrap().dims(), &[2, 3, 4]);
        assert!(Shape::from((2, 3)).broadcast(&Shape::from(4), "t").is_err());
    }

    #[test]
    fn broadcast_iteration_matches_naive() {
        let out = [2, 3, 4];
        let sa = broadcast_strides(&[2, 1, 4], &out);
        let sb = broadcast_strides(&[3, 1], &out);
        let mut seen = vec![];
        for_each_broadcast2(&out, &sa, &sb, |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen.len(), 24);
        for (o, a, b) in seen {
            let (i, j, k) = (o / 12, (o / 4) % 3, o % 4);
            assert_eq!(a, i * 4 + k);
            assert_eq!(b, j);
        }
    }
}
