//! Decoder and end-to-end model.
//!
//! Each fused stage is first integrated by a residual block. Three
//! prior-guided fusions then walk from the deepest stage to the shallowest:
//! the upsampled deeper feature predicts a per-pixel scale and shift that
//! modulate the shallower one, and the modulated map is concatenated with
//! the original and projected back to the stage width. Two further 2x
//! upsamplings inject shallow image features before a 1x1 logit head.

use lcau_tensor::{Float, Init, ParamBuilder, ParamStore, Tensor};

use crate::body_encoder::{BodyEncoder, BodyEncoderConfig};
use crate::edge_encoder::{EdgeEncoder, EdgeEncoderConfig};
use crate::error::{config_err, Result};
use crate::lcaf::{ConcatFusion, Lcaf, LcafConfig, StageFusion};
use crate::nn::{to_tokens, Conv2d, ConvSpec, InstanceNorm};

/// `x + IN(conv(relu(IN(conv(x)))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<F: Float> {
    pub conv1: Conv2d<F>,
    pub norm1: InstanceNorm<F>,
    pub conv2: Conv2d<F>,
    pub norm2: InstanceNorm<F>,
}

impl<F: Float> ResidualBlock<F> {
    pub fn new(pb: &ParamBuilder<F>, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&pb.pp("conv1"), ConvSpec::new(c, c, 3))?,
            norm1: InstanceNorm::new(&pb.pp("norm1"), c)?,
            conv2: Conv2d::new(&pb.pp("conv2"), ConvSpec::new(c, c, 3))?,
            norm2: InstanceNorm::new(&pb.pp("norm2"), c)?,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu();
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        Ok(x.add(&y)?)
    }
}

/// conv3x3 -> ReLU -> conv3x3, the last layer initialized to a constant map.
#[derive(Clone, Debug)]
pub struct ModulationHead<F: Float> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
}

impl<F: Float> ModulationHead<F> {
    fn new(pb: &ParamBuilder<F>, c_in: usize, c_out: usize, bias: f64) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&pb.pp("conv1"), ConvSpec::new(c_in, c_out, 3))?,
            conv2: Conv2d::with_init(&pb.pp("conv2"), ConvSpec::new(c_out, c_out, 3), Init::Zeros, Init::Const(bias))?,
        })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.conv2.forward(&self.conv1.forward(x)?.relu())?)
    }
}

#[derive(Clone, Debug)]
pub struct PgmfFuse<F: Float> {
    pub gamma: ModulationHead<F>,
    pub beta: ModulationHead<F>,
    pub proj: Conv2d<F>,
}

impl<F: Float> PgmfFuse<F> {
    pub fn new(pb: &ParamBuilder<F>, c_low: usize, c_high: usize) -> Result<Self> {
        Ok(Self {
            gamma: ModulationHead::new(&pb.pp("gamma"), c_high, c_low, 1.0)?,
            beta: ModulationHead::new(&pb.pp("beta"), c_high, c_low, 0.0)?,
            proj: Conv2d::new(&pb.pp("proj"), ConvSpec::new(2 * c_low, c_low, 1))?,
        })
    }

    fn upsampled_prior(low: &Tensor<F>, high: &Tensor<F>) -> Result<Tensor<F>> {
        let (l, h) = (low.dims(), high.dims());
        if l.len() != 4 || h.len() != 4 || l[0] != h[0] || l[2] != 2 * h[2] || l[3] != 2 * h[3] {
            return Err(lcau_tensor::TensorError::ShapeMismatch { op: "prior-guided fusion", lhs: l.to_vec(), rhs: h.to_vec() }.into());
        }
        Ok(high.upsample2x()?)
    }

    /// Scale and shift maps predicted from the upsampled deeper feature.
    pub fn scale_shift(&self, low: &Tensor<F>, high: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let prior = Self::upsampled_prior(low, high)?;
        Ok((self.gamma.forward(&prior)?, self.beta.forward(&prior)?))
    }

    pub fn modulate(low: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(gamma.mul(low)?.add(beta)?)
    }

    pub fn forward(&self, low: &Tensor<F>, high: &Tensor<F>) -> Result<Tensor<F>> {
        let (g, b) = self.scale_shift(low, high)?;
        let m = Self::modulate(low, &g, &b)?;
        Ok(self.proj.forward(&Tensor::cat(&[m, low.clone()], 1)?)?)
    }
}

/// Two conv blocks giving image features at full and half resolution.
#[derive(Clone, Debug)]
pub struct ShallowExtractor<F: Float> {
    pub full: Conv2d<F>,
    pub half: Conv2d<F>,
}

impl<F: Float> ShallowExtractor<F> {
    pub fn new(pb: &ParamBuilder<F>, c_full: usize, c_half: usize) -> Result<Self> {
        Ok(Self {
            full: Conv2d::new(&pb.pp("full"), ConvSpec::new(3, c_full, 3))?,
            half: Conv2d::new(&pb.pp("half"), ConvSpec::new(c_full, c_half, 3).stride(2))?,
        })
    }

    pub fn forward(&self, image: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let full = self.full.forward(image)?.relu();
        let half = self.half.forward(&full)?.relu();
        Ok((full, half))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    CrossAttention,
    Concat,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub edge: EdgeEncoderConfig,
    pub body: BodyEncoderConfig,
    pub fusion: FusionKind,
    pub fusion_window: usize,
    pub fusion_heads: [usize; 4],
    pub fusion_ffn_ratio: f64,
    /// Adds each fused map into the body stream before its next stage.
    pub fuse_into_body: bool,
    /// Shallow feature widths at full and half resolution.
    pub shallow_channels: [usize; 2],
    /// Decoder widths after the half- and full-resolution concatenations.
    pub head_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(24)
    }
}

impl ModelConfig {
    pub fn new(width: usize) -> Self {
        let body = BodyEncoderConfig::new(width);
        Self {
            image_size: 224,
            edge: EdgeEncoderConfig::new(width),
            fusion_heads: body.heads,
            body,
            fusion: FusionKind::CrossAttention,
            fusion_window: 7,
            fusion_ffn_ratio: 4.0,
            fuse_into_body: false,
            shallow_channels: [8, 16],
            head_channels: [16, 8],
        }
    }

    /// 64x64 model with 2x2 windows, small enough for 64-bit gradient checks.
    pub fn micro() -> Self {
        let mut c = Self::new(8);
        c.image_size = 64;
        c.body.window_size = 2;
        c.body.mlp_ratio = 2.0;
        c.fusion_window = 2;
        c.fusion_ffn_ratio = 2.0;
        c.shallow_channels = [4, 4];
        c.head_channels = [4, 4];
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.edge.validate()?;
        self.body.validate()?;
        if self.edge.base_channels != self.body.embed_dim {
            return Err(config_err(format!(
                "edge width {} must equal body width {} so stages can be fused",
                self.edge.base_channels, self.body.embed_dim
            )));
        }
        self.body.validate_input(self.image_size, self.image_size)?;
        let mut grid = self.image_size / self.body.patch_size;
        for s in 0..4 {
            if grid % self.fusion_window != 0 {
                return Err(config_err(format!("stage {s} grid {grid} is not divisible by fusion window {}", self.fusion_window)));
            }
            LcafConfig::new(self.body.stage_dim(s), self.fusion_heads[s]).validate()?;
            grid /= 2;
        }
        if self.shallow_channels.contains(&0) || self.head_channels.contains(&0) {
            return Err(config_err("decoder widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SegOutput<F: Float> {
    pub logits: Tensor<F>,
    pub edge_maps: Vec<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct LcauNet<F: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub edge: EdgeEncoder<F>,
    pub body: BodyEncoder<F>,
    pub fusion: Vec<StageFusion<F>>,
    pub integrate: Vec<ResidualBlock<F>>,
    pub pgmf: Vec<PgmfFuse<F>>,
    pub shallow: ShallowExtractor<F>,
    pub up_half: Conv2d<F>,
    pub up_full: Conv2d<F>,
    pub head: Conv2d<F>,
}

impl<F: Float> LcauNet<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed);
        let pb = store.builder();
        let edge = EdgeEncoder::new(&pb.pp("edge"), cfg.edge.clone())?;
        let body = BodyEncoder::new(&pb.pp("body"), cfg.body.clone(), (cfg.image_size, cfg.image_size))?;
        let dims: Vec<usize> = (0..4).map(|s| cfg.body.stage_dim(s)).collect();
        let mut fusion = Vec::new();
        for s in 0..4 {
            let fp = pb.pp(format!("fusion{s}"));
            fusion.push(match cfg.fusion {
                FusionKind::CrossAttention => {
                    let lc = LcafConfig {
                        window_h: cfg.fusion_window,
                        window_w: cfg.fusion_window,
                        heads: cfg.fusion_heads[s],
                        dim: dims[s],
                        ffn_ratio: cfg.fusion_ffn_ratio,
                    };
                    StageFusion::CrossAttention(Lcaf::new(&fp, lc)?)
                }
                FusionKind::Concat => StageFusion::Concat(ConcatFusion::new(&fp, dims[s])?),
            });
        }
        let dp = pb.pp("decoder");
        let integrate = (0..4).map(|s| ResidualBlock::new(&dp.pp(format!("res{s}")), dims[s])).collect::<Result<_>>()?;
        let pgmf = (0..3).map(|s| PgmfFuse::new(&dp.pp(format!("pgmf{s}")), dims[s], dims[s + 1])).collect::<Result<_>>()?;
        let [sc_full, sc_half] = cfg.shallow_channels;
        let [hc_half, hc_full] = cfg.head_channels;
        let shallow = ShallowExtractor::new(&dp.pp("shallow"), sc_full, sc_half)?;
        let up_half = Conv2d::new(&dp.pp("up_half"), ConvSpec::new(dims[0] + sc_half, hc_half, 3))?;
        let up_full = Conv2d::new(&dp.pp("up_full"), ConvSpec::new(hc_half + sc_full, hc_full, 3))?;
        let head = Conv2d::with_init(&dp.pp("head"), ConvSpec::new(hc_full, 1, 1), Init::Zeros, Init::Zeros)?;
        Ok(Self { cfg, store, edge, body, fusion, integrate, pgmf, shallow, up_half, up_full, head })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Fused feature maps of all four stages plus the edge side maps.
    pub fn encode(&self, image: &Tensor<F>) -> Result<(Vec<Tensor<F>>, Vec<Tensor<F>>)> {
        let d = image.dims();
        if d.len() != 4 || d[2] != self.cfg.image_size || d[3] != self.cfg.image_size {
            return Err(config_err(format!("model expects (B, 3, {0}, {0}) images, got {d:?}", self.cfg.image_size)));
        }
        let edge = self.edge.forward(image)?;
        let mut z = self.body.patch_embed(image)?;
        let mut fused = Vec::with_capacity(4);
        for s in 0..4 {
            z = self.body.stage(s, &z)?;
            let body = self.body.stage_output(s, &z)?;
            let f = self.fusion[s].forward(&edge[s].features, &body)?;
            if self.cfg.fuse_into_body && s < 3 {
                z.tokens = z.tokens.add(&to_tokens(&f)?)?;
            }
            fused.push(f);
        }
        Ok((fused, edge.into_iter().map(|e| e.side_edge_map).collect()))
    }

    pub fn decode(&self, image: &Tensor<F>, fused: &[Tensor<F>]) -> Result<Tensor<F>> {
        let r: Vec<Tensor<F>> = fused.iter().zip(&self.integrate).map(|(f, rb)| rb.forward(f)).collect::<Result<_>>()?;
        let mut x = r[3].clone();
        for s in (0..3).rev() {
            x = self.pgmf[s].forward(&r[s], &x)?;
        }
        let (full, half) = self.shallow.forward(image)?;
        let x = Tensor::cat(&[x.upsample2x()?, half], 1)?;
        let x = self.up_half.forward(&x)?.relu();
        let x = Tensor::cat(&[x.upsample2x()?, full], 1)?;
        let x = self.up_full.forward(&x)?.relu();
        Ok(self.head.forward(&x)?)
    }

    pub fn forward(&self, image: &Tensor<F>) -> Result<SegOutput<F>> {
        let (fused, edge_maps) = self.encode(image)?;
        Ok(SegOutput { logits: self.decode(image, &fused)?, edge_maps })
    }
}
