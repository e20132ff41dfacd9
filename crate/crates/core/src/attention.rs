//! Window partitioning and the scaled dot-product attention core shared by
//! the self-attention blocks of the body branch and the cross-attention
//! fusion.

use std::sync::Arc;

use lcau_tensor::{Float, Tensor};

use crate::error::{config_err, Result};
use crate::nn::{to_feature_map, to_tokens};

/// Additive mask value that zeroes a softmax entry.
const MASKED: f64 = -1e9;

/// Row permutation between a (B, H*W) token grid and window-major order,
/// optionally after a cyclic shift of the grid by `shift` in both axes.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub shift: usize,
    /// `gather[r]` is the grid row feeding window-order row `r`.
    pub gather: Arc<Vec<usize>>,
    pub scatter: Arc<Vec<usize>>,
}

impl WindowLayout {
    pub fn new(batch: usize, grid_h: usize, grid_w: usize, win_h: usize, win_w: usize, shift: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 || grid_h % win_h != 0 || grid_w % win_w != 0 {
            return Err(config_err(format!("grid {grid_h}x{grid_w} is not divisible into {win_h}x{win_w} windows")));
        }
        if shift >= win_h.min(win_w) && shift != 0 {
            return Err(config_err(format!("shift {shift} must be smaller than the window")));
        }
        let n = batch * grid_h * grid_w;
        let mut gather = Vec::with_capacity(n);
        for b in 0..batch {
            for wy in 0..grid_h / win_h {
                for wx in 0..grid_w / win_w {
                    for iy in 0..win_h {
                        for ix in 0..win_w {
                            let y = (wy * win_h + iy + shift) % grid_h;
                            let x = (wx * win_w + ix + shift) % grid_w;
                            gather.push((b * grid_h + y) * grid_w + x);
                        }
                    }
                }
            }
        }
        let mut scatter = vec![0; n];
        for (r, &g) in gather.iter().enumerate() {
            scatter[g] = r;
        }
        Ok(Self { batch, grid_h, grid_w, win_h, win_w, shift, gather: Arc::new(gather), scatter: Arc::new(scatter) })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.grid_h / self.win_h) * (self.grid_w / self.win_w)
    }

    pub fn window_len(&self) -> usize {
        self.win_h * self.win_w
    }

    /// (B, N, C) tokens -> (B * nW, wh * ww, C) windows.
    pub fn partition<F: Float>(&self, tokens: &Tensor<F>) -> Result<Tensor<F>> {
        let c = *tokens.dims().last().unwrap_or(&0);
        let rows = tokens.reshape((self.batch * self.grid_h * self.grid_w, c))?;
        Ok(rows.gather_rows(self.gather.clone())?.reshape((self.batch * self.windows_per_image(), self.window_len(), c))?)
    }

    /// Inverse of [`partition`](Self::partition), back to (B, N, C).
    pub fn reverse<F: Float>(&self, windows: &Tensor<F>) -> Result<Tensor<F>> {
        let c = *windows.dims().last().unwrap_or(&0);
        let rows = windows.reshape((self.batch * self.grid_h * self.grid_w, c))?;
        Ok(rows.gather_rows(self.scatter.clone())?.reshape((self.batch, self.grid_h * self.grid_w, c))?)
    }

    /// Additive mask (nW, n, n) that blocks attention between tokens that
    /// were not neighbours before the cyclic shift. `None` without shift.
    pub fn shift_mask<F: Float>(&self) -> Option<Tensor<F>> {
        if self.shift == 0 {
            return None;
        }
        let region = |v: usize, size: usize, win: usize| {
            if v < size - win {
                0
            } else if v < size - self.shift {
                1
            } else {
                2
            }
        };
        let (nwx, n) = (self.grid_w / self.win_w, self.window_len());
        let mut data = Vec::with_capacity(self.windows_per_image() * n * n);
        for w in 0..self.windows_per_image() {
            let labels: Vec<usize> = (0..n)
                .map(|i| {
                    let y = (w / nwx) * self.win_h + i / self.win_w;
                    let x = (w % nwx) * self.win_w + i % self.win_w;
                    region(y, self.grid_h, self.win_h) * 3 + region(x, self.grid_w, self.win_w)
                })
                .collect();
            for a in &labels {
                for b in &labels {
                    data.push(if a == b { F::zero() } else { F::lit(MASKED) });
                }
            }
        }
        Some(Tensor::from_vec(data, (self.windows_per_image(), 1, n, n)).expect("mask size"))
    }
}

/// (B, C, H, W) -> (B * nW, wh * ww, C).
pub fn window_partition<F: Float>(x: &Tensor<F>, win_h: usize, win_w: usize) -> Result<Tensor<F>> {
    let d = x.dims();
    let layout = WindowLayout::new(d[0], d[2], d[3], win_h, win_w, 0)?;
    layout.partition(&to_tokens(x)?)
}

/// Inverse of [`window_partition`] for a (B, C, H, W) target.
pub fn window_reverse<F: Float>(windows: &Tensor<F>, batch: usize, h: usize, w: usize, win_h: usize, win_w: usize) -> Result<Tensor<F>> {
    let layout = WindowLayout::new(batch, h, w, win_h, win_w, 0)?;
    Ok(to_feature_map(&layout.reverse(windows)?, h, w)?)
}

/// Attention probabilities (Bw, heads, n, n) for per-window queries and keys
/// of shape (Bw, n, C).
pub fn attention_weights<F: Float>(q: &Tensor<F>, k: &Tensor<F>, heads: usize, mask: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let d = q.dims().to_vec();
    if d.len() != 3 || k.dims() != d.as_slice() {
        return Err(lcau_tensor::TensorError::ShapeMismatch { op: "attention", lhs: d, rhs: k.dims().to_vec() }.into());
    }
    let (bw, n, c) = (d[0], d[1], d[2]);
    if heads == 0 || c % heads != 0 {
        return Err(config_err(format!("dim {c} is not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let split = |t: &Tensor<F>| -> Result<Tensor<F>> { Ok(t.reshape((bw, n, heads, dh))?.permute(&[0, 2, 1, 3])?) };
    let scores = split(q)?.matmul_t(&split(k)?, false, true)?.scale(1.0 / (dh as f64).sqrt());
    let scores = match mask {
        Some(m) => {
            let nw = m.dims()[0];
            scores.reshape(vec![bw / nw, nw, heads, n, n])?.add(m)?.reshape((bw, heads, n, n))?
        }
        None => scores,
    };
    Ok(scores.softmax_last()?)
}

/// Multi-head scaled dot-product attention inside each window; inputs and
/// output are (Bw, n, C) with heads taking contiguous channel slices.
pub fn attend<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize, mask: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let p = attention_weights(q, k, heads, mask)?;
    let d = v.dims();
    let (bw, n, c) = (d[0], d[1], d[2]);
    let vh = v.reshape((bw, n, heads, c / heads))?.permute(&[0, 2, 1, 3])?;
    Ok(p.matmul(&vh)?.permute(&[0, 2, 1, 3])?.reshape((bw, n, c))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScope {
    Global,
    Local,
}

/// Operation count of multi-head cross-attention over an `h x w` grid of
/// width `c`: four projections plus the two token-token products.
pub fn attention_cost(h: u64, w: u64, c: u64, win_h: u64, win_w: u64, scope: AttentionScope) -> u64 {
    let hw = h * w;
    let proj = 4 * hw * c * c;
    match scope {
        AttentionScope::Global => proj + 2 * hw * hw * c,
        AttentionScope::Local => proj + 2 * win_h * win_w * hw * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec((0..n).map(|i| (i as f64 * 0.37).sin()).collect(), dims.to_vec()).unwrap()
    }

    #[test]
    fn partition_counts_and_round_trip() {
        let x = ramp(&[2, 3, 4, 4]);
        let w = window_partition(&x, 2, 2).unwrap();
        assert_eq!(w.dims(), &[8, 4, 3]);
        assert_eq!(window_reverse(&w, 2, 4, 4, 2, 2).unwrap().to_vec(), x.to_vec());
        let big = Tensor::<f32>::zeros((1, 1, 56, 56));
        assert_eq!(window_partition(&big, 7, 7).unwrap().dims()[0], 64);
        assert!(window_partition(&x, 3, 3).is_err());
    }

    #[test]
    fn shifted_layout_round_trips_and_masks_wrapped_regions() {
        let l = WindowLayout::new(1, 4, 4, 2, 2, 1).unwrap();
        let t = ramp(&[1, 16, 2]);
        assert_eq!(l.reverse(&l.partition(&t).unwrap()).unwrap().to_vec(), t.to_vec());
        let m = l.shift_mask::<f64>().unwrap();
        assert_eq!(m.dims(), &[4, 1, 4, 4]);
        // the top-left window is entirely interior, the bottom-right one
        // holds four tokens from four wrapped regions
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        let last = &m.data()[48..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 4);
    }

    #[test]
    fn cost_model_values() {
        assert_eq!(attention_cost(14, 14, 32, 7, 7, AttentionScope::Global), 3_261_440);
        assert_eq!(attention_cost(14, 14, 32, 7, 7, AttentionScope::Local), 1_417_472);
        assert_eq!(
            attention_cost(7, 7, 32, 7, 7, AttentionScope::Global),
            attention_cost(7, 7, 32, 7, 7, AttentionScope::Local)
        );
    }
}
