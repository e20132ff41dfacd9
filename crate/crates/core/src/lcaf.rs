//! Local cross-attention fusion of same-stage edge and body features.
//!
//! Queries come from the edge features, keys and values from the body
//! features, and attention is restricted to non-overlapping windows. The
//! attended result is projected, added to the edge features, and refined by
//! a residual feed-forward layer.

use lcau_tensor::{Float, ParamBuilder, Tensor};

use crate::attention::{attend, WindowLayout};
use crate::error::{config_err, Result};
use crate::nn::{check_divisible, to_feature_map, to_tokens, Conv2d, ConvSpec, LayerNorm, Linear, Mlp};

pub use crate::attention::{attention_cost, window_partition, window_reverse, AttentionScope};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LcafConfig {
    pub window_h: usize,
    pub window_w: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_ratio: f64,
}

impl LcafConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self { window_h: 7, window_w: 7, heads, dim, ffn_ratio: 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible("fusion width", self.dim, self.heads)?;
        if self.window_h == 0 || self.window_w == 0 || self.ffn_ratio <= 0.0 {
            return Err(config_err("fusion window and ffn ratio must be positive"));
        }
        Ok(())
    }
}

fn check_pair<F: Float>(edge: &Tensor<F>, body: &Tensor<F>) -> Result<()> {
    if edge.dims() != body.dims() || edge.rank() != 4 {
        return Err(lcau_tensor::TensorError::ShapeMismatch { op: "fusion", lhs: edge.dims().to_vec(), rhs: body.dims().to_vec() }.into());
    }
    Ok(())
}

/// Single window cross-attention: queries from `edge_win`, keys/values from
/// `body_win`, both (Bw, n, C) and already projected.
pub fn local_cross_attention<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    if q.dims() != k.dims() || k.dims() != v.dims() {
        return Err(lcau_tensor::TensorError::ShapeMismatch { op: "cross attention", lhs: q.dims().to_vec(), rhs: k.dims().to_vec() }.into());
    }
    attend(q, k, v, heads, None)
}

#[derive(Clone, Debug)]
pub struct Lcaf<F: Float> {
    pub cfg: LcafConfig,
    pub norm_q: LayerNorm<F>,
    pub norm_kv: LayerNorm<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub norm_ffn: LayerNorm<F>,
    pub ffn: Mlp<F>,
}

impl<F: Float> Lcaf<F> {
    pub fn new(pb: &ParamBuilder<F>, cfg: LcafConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let hidden = ((c as f64) * cfg.ffn_ratio).round() as usize;
        Ok(Self {
            norm_q: LayerNorm::new(&pb.pp("norm_q"), c)?,
            norm_kv: LayerNorm::new(&pb.pp("norm_kv"), c)?,
            wq: Linear::new(&pb.pp("wq"), c, c, true)?,
            wk: Linear::new(&pb.pp("wk"), c, c, true)?,
            wv: Linear::new(&pb.pp("wv"), c, c, true)?,
            wo: Linear::new(&pb.pp("wo"), c, c, true)?,
            norm_ffn: LayerNorm::new(&pb.pp("norm_ffn"), c)?,
            ffn: Mlp::new(&pb.pp("ffn"), c, hidden)?,
            cfg,
        })
    }

    fn layout(&self, x: &Tensor<F>) -> Result<WindowLayout> {
        let d = x.dims();
        WindowLayout::new(d[0], d[2], d[3], self.cfg.window_h, self.cfg.window_w, 0)
    }

    /// Multi-head attention of edge queries over body keys/values, before
    /// the output projection, as (B, N, C) tokens.
    pub fn attend_tokens(&self, edge: &Tensor<F>, body: &Tensor<F>) -> Result<Tensor<F>> {
        check_pair(edge, body)?;
        if edge.dims()[1] != self.cfg.dim {
            return Err(config_err(format!("fusion built for width {} got {}", self.cfg.dim, edge.dims()[1])));
        }
        let layout = self.layout(edge)?;
        let e = self.norm_q.forward(&to_tokens(edge)?)?;
        let b = self.norm_kv.forward(&to_tokens(body)?)?;
        let q = layout.partition(&self.wq.forward(&e)?)?;
        let k = layout.partition(&self.wk.forward(&b)?)?;
        let v = layout.partition(&self.wv.forward(&b)?)?;
        layout.reverse(&local_cross_attention(&q, &k, &v, self.cfg.heads)?)
    }

    /// `edge + W_o * concat(heads)` as (B, N, C) tokens.
    fn multi_head_tokens(&self, edge: &Tensor<F>, body: &Tensor<F>) -> Result<Tensor<F>> {
        let attn = self.attend_tokens(edge, body)?;
        Ok(to_tokens(edge)?.add(&self.wo.forward(&attn)?)?)
    }

    pub fn multi_head_lca(&self, edge: &Tensor<F>, body: &Tensor<F>) -> Result<Tensor<F>> {
        let d = edge.dims();
        Ok(to_feature_map(&self.multi_head_tokens(edge, body)?, d[2], d[3])?)
    }

    pub fn forward(&self, edge: &Tensor<F>, body: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.multi_head_tokens(edge, body)?;
        let x = x.add(&self.ffn.forward(&self.norm_ffn.forward(&x)?)?)?;
        let d = edge.dims();
        Ok(to_feature_map(&x, d[2], d[3])?)
    }
}

/// Fusion used when cross-attention is ablated: channel concatenation and a
/// 1x1 convolution back to the stage width.
#[derive(Clone, Debug)]
pub struct ConcatFusion<F: Float> {
    pub proj: Conv2d<F>,
}

impl<F: Float> ConcatFusion<F> {
    pub fn new(pb: &ParamBuilder<F>, dim: usize) -> Result<Self> {
        Ok(Self { proj: Conv2d::new(&pb.pp("proj"), ConvSpec::new(2 * dim, dim, 1))? })
    }

    pub fn forward(&self, edge: &Tensor<F>, body: &Tensor<F>) -> Result<Tensor<F>> {
        check_pair(edge, body)?;
        Ok(self.proj.forward(&Tensor::cat(&[edge.clone(), body.clone()], 1)?)?)
    }
}

#[derive(Clone, Debug)]
pub enum StageFusion<F: Float> {
    CrossAttention(Lcaf<F>),
    Concat(ConcatFusion<F>),
}

impl<F: Float> StageFusion<F> {
    pub fn forward(&self, edge: &Tensor<F>, body: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            StageFusion::CrossAttention(l) => l.forward(edge, body),
            StageFusion::Concat(c) => c.forward(edge, body),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcau_tensor::ParamStore;

    fn noise(dims: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        Tensor::from_vec((0..n).map(|i| ((i as f64 + 0.5) * (seed as f64 + 1.7)).sin()).collect(), dims.to_vec()).unwrap()
    }

    #[test]
    fn shared_value_passes_through() {
        let q = noise(&[3, 4, 6], 1);
        let k = noise(&[3, 4, 6], 2);
        let row: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let v = Tensor::from_vec(row.repeat(12), (3, 4, 6)).unwrap();
        let out = local_cross_attention(&q, &k, &v, 2).unwrap();
        for (o, e) in out.data().iter().zip(row.iter().cycle()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_and_mismatch() {
        let store = ParamStore::<f64>::new(5);
        let cfg = LcafConfig { window_h: 2, window_w: 2, ..LcafConfig::new(8, 2) };
        let f = Lcaf::new(&store.builder(), cfg).unwrap();
        let e = noise(&[2, 8, 4, 4], 3);
        let b = noise(&[2, 8, 4, 4], 4);
        let y = f.forward(&e, &b).unwrap();
        assert_eq!(y.dims(), e.dims());
        assert!(y.to_vec() != e.to_vec() && y.to_vec() != b.to_vec());
        assert!(f.forward(&e, &noise(&[2, 8, 2, 2], 4)).is_err());
        assert!(Lcaf::new(&store.builder().pp("bad"), LcafConfig::new(8, 3)).is_err());
    }
}
