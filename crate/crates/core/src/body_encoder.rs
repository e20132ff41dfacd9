//! Hierarchical windowed self-attention branch.
//!
//! Patches of `P x P` pixels are linearly embedded with a learned absolute
//! position table, then pass through four stages of alternating regular and
//! cyclically shifted window attention blocks. Stages 1..3 start with a 2x2
//! patch merge that halves the grid and doubles the width.

use lcau_tensor::{Float, Init, Param, ParamBuilder, Tensor};

use crate::attention::{attend, WindowLayout};
use crate::error::{config_err, Result};
use crate::nn::{check_divisible, to_feature_map, to_tokens, Conv2d, ConvSpec, LayerNorm, Linear, Mlp};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyEncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: f64,
}

impl Default for BodyEncoderConfig {
    fn default() -> Self {
        Self::new(24)
    }
}

impl BodyEncoderConfig {
    /// Heads chosen so every stage keeps 8 channels per head.
    pub fn new(embed_dim: usize) -> Self {
        let h = (embed_dim / 8).max(1);
        Self { patch_size: 4, embed_dim, depths: [2; 4], heads: [h, 2 * h, 4 * h, 8 * h], window_size: 7, mlp_ratio: 4.0 }
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio <= 0.0 {
            return Err(config_err("body encoder sizes must be positive"));
        }
        for s in 0..4 {
            if self.depths[s] == 0 || self.depths[s] % 2 != 0 {
                return Err(config_err(format!("depth of body stage {s} = {} must be even and positive", self.depths[s])));
            }
            check_divisible(&format!("body stage {s} width"), self.stage_dim(s), self.heads[s])?;
        }
        Ok(())
    }

    /// Checks that an `h x w` image tiles into patches and windows at every stage.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        check_divisible("image height", h, 32)?;
        check_divisible("image width", w, 32)?;
        check_divisible("image height", h, self.patch_size)?;
        check_divisible("image width", w, self.patch_size)?;
        let (mut gh, mut gw) = (h / self.patch_size, w / self.patch_size);
        for s in 0..4 {
            if s > 0 {
                check_divisible(&format!("stage {} grid height", s - 1), gh, 2)?;
                check_divisible(&format!("stage {} grid width", s - 1), gw, 2)?;
                gh /= 2;
                gw /= 2;
            }
            check_divisible(&format!("stage {s} grid height"), gh, self.window_size)?;
            check_divisible(&format!("stage {s} grid width"), gw, self.window_size)?;
        }
        Ok(())
    }
}

/// Tokens (B, N, C) with their 2-D layout.
#[derive(Clone, Debug)]
pub struct TokenGrid<F: Float> {
    pub tokens: Tensor<F>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<F: Float> TokenGrid<F> {
    pub fn from_feature_map(x: &Tensor<F>) -> Result<Self> {
        let d = x.dims();
        Ok(Self { tokens: to_tokens(x)?, grid_h: d[2], grid_w: d[3] })
    }

    pub fn to_feature_map(&self) -> Result<Tensor<F>> {
        Ok(to_feature_map(&self.tokens, self.grid_h, self.grid_w)?)
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed<F: Float> {
    pub proj: Conv2d<F>,
    pub pos: Param<F>,
    pub patch: usize,
}

impl<F: Float> PatchEmbed<F> {
    pub fn new(pb: &ParamBuilder<F>, patch: usize, dim: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        let spec = ConvSpec::new(3, dim, patch).stride(patch).padding(0);
        let proj = Conv2d::with_init(&pb.pp("proj"), spec, Init::TruncNormal { std: 0.02 }, Init::Zeros)?;
        let pos = pb.get("pos", (grid_h * grid_w, dim), Init::TruncNormal { std: 0.02 })?;
        Ok(Self { proj, pos, patch })
    }

    pub fn forward(&self, image: &Tensor<F>) -> Result<TokenGrid<F>> {
        let d = image.dims();
        check_divisible("image height", d[2], self.patch)?;
        check_divisible("image width", d[3], self.patch)?;
        let (gh, gw) = (d[2] / self.patch, d[3] / self.patch);
        if self.pos.dims()[0] != gh * gw {
            return Err(config_err(format!(
                "position table holds {} tokens but the image gives a {gh}x{gw} grid",
                self.pos.dims()[0]
            )));
        }
        let tokens = to_tokens(&self.proj.forward(image)?)?.add(&self.pos.tensor())?;
        Ok(TokenGrid { tokens, grid_h: gh, grid_w: gw })
    }
}

/// Multi-head self-attention restricted to (optionally shifted) windows.
#[derive(Clone, Debug)]
pub struct WindowAttention<F: Float> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub heads: usize,
    pub window: usize,
}

impl<F: Float> WindowAttention<F> {
    pub fn new(pb: &ParamBuilder<F>, dim: usize, heads: usize, window: usize) -> Result<Self> {
        check_divisible("attention width", dim, heads)?;
        Ok(Self { qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim, true)?, proj: Linear::new(&pb.pp("proj"), dim, dim, true)?, heads, window })
    }

    pub fn layout(&self, z: &TokenGrid<F>, shifted: bool) -> Result<WindowLayout> {
        // a window spanning the whole grid has nothing to exchange with
        let shift = if shifted && self.window < z.grid_h.max(z.grid_w) { self.window / 2 } else { 0 };
        WindowLayout::new(z.batch(), z.grid_h, z.grid_w, self.window, self.window, shift)
    }

    /// Attention output before the output projection.
    pub fn attend_windows(&self, z: &TokenGrid<F>, shifted: bool) -> Result<Tensor<F>> {
        let layout = self.layout(z, shifted)?;
        let c = z.dim();
        let qkv = layout.partition(&self.qkv.forward(&z.tokens)?)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let mask = layout.shift_mask();
        let out = attend(&q, &k, &v, self.heads, mask.as_ref())?;
        layout.reverse(&out)
    }

    pub fn forward(&self, z: &TokenGrid<F>, shifted: bool) -> Result<Tensor<F>> {
        Ok(self.proj.forward(&self.attend_windows(z, shifted)?)?)
    }
}

/// `z + attn(LN(z))` followed by `z + MLP(LN(z))`.
#[derive(Clone, Debug)]
pub struct SwinBlock<F: Float> {
    pub norm1: LayerNorm<F>,
    pub attn: WindowAttention<F>,
    pub norm2: LayerNorm<F>,
    pub mlp: Mlp<F>,
    pub shifted: bool,
}

impl<F: Float> SwinBlock<F> {
    pub fn new(pb: &ParamBuilder<F>, dim: usize, heads: usize, window: usize, mlp_ratio: f64, shifted: bool) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), dim)?,
            attn: WindowAttention::new(&pb.pp("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(&pb.pp("norm2"), dim)?,
            mlp: Mlp::new(&pb.pp("mlp"), dim, hidden)?,
            shifted,
        })
    }

    pub fn forward(&self, z: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let normed = TokenGrid { tokens: self.norm1.forward(&z.tokens)?, ..z.clone() };
        let x = z.tokens.add(&self.attn.forward(&normed, self.shifted)?)?;
        let x = x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok(TokenGrid { tokens: x, ..z.clone() })
    }
}

/// A regular-window block followed by a shifted-window block.
pub fn swin_block_pair<F: Float>(z: &TokenGrid<F>, regular: &SwinBlock<F>, shifted: &SwinBlock<F>) -> Result<TokenGrid<F>> {
    shifted.forward(&regular.forward(z)?)
}

/// Concatenates each 2x2 token neighbourhood and projects 4C -> 2C.
#[derive(Clone, Debug)]
pub struct PatchMerge<F: Float> {
    pub norm: LayerNorm<F>,
    pub reduce: Linear<F>,
}

impl<F: Float> PatchMerge<F> {
    pub fn new(pb: &ParamBuilder<F>, dim: usize) -> Result<Self> {
        Ok(Self { norm: LayerNorm::new(&pb.pp("norm"), 4 * dim)?, reduce: Linear::new(&pb.pp("reduce"), 4 * dim, 2 * dim, false)? })
    }

    /// Neighbour concatenation in (top-left, bottom-left, top-right,
    /// bottom-right) order, (B, N, C) -> (B, N/4, 4C).
    pub fn gather_neighbours(z: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let (h, w) = (z.grid_h, z.grid_w);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(config_err(format!("cannot merge an odd {h}x{w} token grid")));
        }
        let (b, c) = (z.batch(), z.dim());
        let t = z.tokens.reshape(vec![b, h / 2, 2, w / 2, 2, c])?.permute(&[0, 1, 3, 4, 2, 5])?.reshape((b, h * w / 4, 4 * c))?;
        Ok(TokenGrid { tokens: t, grid_h: h / 2, grid_w: w / 2 })
    }

    pub fn forward(&self, z: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let g = Self::gather_neighbours(z)?;
        Ok(TokenGrid { tokens: self.reduce.forward(&self.norm.forward(&g.tokens)?)?, ..g })
    }
}

#[derive(Clone, Debug)]
pub struct BodyStage<F: Float> {
    pub merge: Option<PatchMerge<F>>,
    pub blocks: Vec<SwinBlock<F>>,
    pub out_norm: LayerNorm<F>,
}

#[derive(Clone, Debug)]
pub struct BodyEncoder<F: Float> {
    pub cfg: BodyEncoderConfig,
    pub embed: PatchEmbed<F>,
    pub stages: Vec<BodyStage<F>>,
}

impl<F: Float> BodyEncoder<F> {
    /// `image_hw` fixes the size of the position table.
    pub fn new(pb: &ParamBuilder<F>, cfg: BodyEncoderConfig, image_hw: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_input(image_hw.0, image_hw.1)?;
        let p = cfg.patch_size;
        let embed = PatchEmbed::new(&pb.pp("embed"), p, cfg.embed_dim, image_hw.0 / p, image_hw.1 / p)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let sp = pb.pp(format!("stage{s}"));
            let dim = cfg.stage_dim(s);
            let merge = if s > 0 { Some(PatchMerge::new(&sp.pp("merge"), dim / 2)?) } else { None };
            let blocks = (0..cfg.depths[s])
                .map(|i| SwinBlock::new(&sp.pp(format!("block{i}")), dim, cfg.heads[s], cfg.window_size, cfg.mlp_ratio, i % 2 == 1))
                .collect::<Result<_>>()?;
            stages.push(BodyStage { merge, blocks, out_norm: LayerNorm::new(&sp.pp("out_norm"), dim)? });
        }
        Ok(Self { cfg, embed, stages })
    }

    pub fn patch_embed(&self, image: &Tensor<F>) -> Result<TokenGrid<F>> {
        let d = image.dims();
        if d.len() != 4 || d[1] != 3 {
            return Err(config_err(format!("body encoder expects (B, 3, H, W), got {:?}", d)));
        }
        self.cfg.validate_input(d[2], d[3])?;
        self.embed.forward(image)
    }

    /// Runs stage `s` (merge, then blocks) on the previous stage's tokens.
    pub fn stage(&self, s: usize, z: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let st = &self.stages[s];
        let mut z = match &st.merge {
            Some(m) => m.forward(z)?,
            None => z.clone(),
        };
        for b in &st.blocks {
            z = b.forward(&z)?;
        }
        Ok(z)
    }

    /// Normalized stage output as a (B, C, h, w) feature map.
    pub fn stage_output(&self, s: usize, z: &TokenGrid<F>) -> Result<Tensor<F>> {
        let t = self.stages[s].out_norm.forward(&z.tokens)?;
        Ok(to_feature_map(&t, z.grid_h, z.grid_w)?)
    }

    pub fn forward(&self, image: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut z = self.patch_embed(image)?;
        let mut out = Vec::with_capacity(4);
        for s in 0..4 {
            z = self.stage(s, &z)?;
            out.push(self.stage_output(s, &z)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcau_tensor::ParamStore;

    #[test]
    fn merge_concatenates_neighbours() {
        // 2x2 grid of 1-d tokens valued by position
        let t = Tensor::<f64>::from_vec(vec![0.0, 1.0, 2.0, 3.0], (1, 4, 1)).unwrap();
        let g = PatchMerge::gather_neighbours(&TokenGrid { tokens: t, grid_h: 2, grid_w: 2 }).unwrap();
        assert_eq!(g.tokens.to_vec(), vec![0.0, 2.0, 1.0, 3.0]);
        assert_eq!((g.grid_h, g.grid_w), (1, 1));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = BodyEncoderConfig::new(16);
        c.depths[1] = 3;
        assert!(c.validate().is_err());
        let c = BodyEncoderConfig { heads: [3, 2, 4, 8], ..BodyEncoderConfig::new(16) };
        assert!(c.validate().is_err());
        assert!(BodyEncoderConfig::new(16).validate_input(96, 96).is_err());
        assert!(BodyEncoderConfig::new(16).validate_input(224, 224).is_ok());
    }

    #[test]
    fn micro_stage_shapes() {
        let store = ParamStore::<f32>::new(3);
        let cfg = BodyEncoderConfig { window_size: 2, ..BodyEncoderConfig::new(8) };
        let enc = BodyEncoder::new(&store.builder(), cfg, (64, 64)).unwrap();
        let out = enc.forward(&Tensor::zeros((2, 3, 64, 64))).unwrap();
        let dims: Vec<_> = out.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2]]);
    }
}
