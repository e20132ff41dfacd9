//! Convolutional edge branch built from central pixel-difference blocks.
//!
//! A stride-4 stem is followed by four stages of residual PDC blocks. Stages
//! are separated by 2x2 max-pooling and a 1x1 convolution that doubles the
//! width, so stage `s` has `C * 2^s` channels at `H / 2^(s+2)` resolution,
//! matching the body branch. Every stage also emits a full-resolution edge
//! probability map for deep supervision.

use lcau_tensor::{ConvMode, Float, Init, ParamBuilder, Tensor};

use crate::error::{config_err, Result};
use crate::nn::{check_divisible, Conv2d, ConvSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdcVariant {
    Central,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeEncoderConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub init_downsample: usize,
}

impl Default for EdgeEncoderConfig {
    fn default() -> Self {
        Self::new(24)
    }
}

impl EdgeEncoderConfig {
    pub fn new(base_channels: usize) -> Self {
        Self { base_channels, stages: 4, blocks_per_stage: 4, init_downsample: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(config_err(format!("edge base_channels = {} must be even and positive", self.base_channels)));
        }
        if self.stages != 4 || self.blocks_per_stage != 4 || self.init_downsample != 4 {
            return Err(config_err("edge encoder is fixed at 4 stages of 4 blocks after a stride-4 stem"));
        }
        Ok(())
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// Central pixel-difference convolution: every tap weighs `x_tap - x_center`.
pub fn pdc_conv2d<F: Float>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, padding: usize, groups: usize) -> Result<Tensor<F>> {
    let cfg = lcau_tensor::Conv2dCfg { stride, padding, groups, mode: ConvMode::CentralDifference };
    Ok(x.conv2d(w, None, cfg)?)
}

/// Plain cross-correlation.
pub fn vanilla_conv2d<F: Float>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, padding: usize, groups: usize) -> Result<Tensor<F>> {
    let cfg = lcau_tensor::Conv2dCfg { stride, padding, groups, mode: ConvMode::Vanilla };
    Ok(x.conv2d(w, None, cfg)?)
}

/// Vanilla kernel computing the same map as the central-difference kernel `w`:
/// the center tap absorbs minus the sum of all taps.
pub fn pdc_to_vanilla_kernel(w: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [_, _, kh, kw] = dims;
    let center = (kh / 2) * kw + kw / 2;
    let mut out = w.to_vec();
    for k in out.chunks_mut(kh * kw) {
        let total: f64 = k.iter().sum();
        k[center] -= total;
    }
    out
}

/// Uniform(+-1/sqrt(fan_in)). Keeps the residual stack of the edge branch
/// from growing with depth; ReLU-gain scaling compounds over 16 blocks.
fn fan_in_uniform(fan_in: usize) -> Init {
    let b = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform { lo: -b, hi: b }
}

/// `x + conv1x1(relu(depthwise_pdc(x)))`.
#[derive(Clone, Debug)]
pub struct PdcBlock<F: Float> {
    pub dw: Conv2d<F>,
    pub pw: Conv2d<F>,
}

impl<F: Float> PdcBlock<F> {
    pub fn new(pb: &ParamBuilder<F>, c: usize) -> Result<Self> {
        let dw = Conv2d::new(&pb.pp("dw"), ConvSpec::new(c, c, 3).depthwise().mode(ConvMode::CentralDifference).no_bias())?;
        let pw = Conv2d::with_init(&pb.pp("pw"), ConvSpec::new(c, c, 1), fan_in_uniform(c), Init::Zeros)?;
        Ok(Self { dw, pw })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.pw.forward(&self.dw.forward(x)?.relu())?;
        Ok(x.add(&y)?)
    }
}

/// 1x1 projection to one channel, upsampled to the image size, then sigmoid.
#[derive(Clone, Debug)]
pub struct SideHead<F: Float> {
    pub proj: Conv2d<F>,
}

impl<F: Float> SideHead<F> {
    pub fn new(pb: &ParamBuilder<F>, c: usize) -> Result<Self> {
        let proj = Conv2d::with_init(pb, ConvSpec::new(c, 1, 1), Init::KaimingUniform { fan_in: c }, Init::Zeros)?;
        Ok(Self { proj })
    }

    pub fn forward(&self, features: &Tensor<F>, target_hw: (usize, usize)) -> Result<Tensor<F>> {
        let logit = self.proj.forward(features)?.upsample_bilinear(target_hw.0, target_hw.1)?;
        Ok(logit.sigmoid())
    }
}

#[derive(Clone, Debug)]
pub struct EdgeStageOutput<F: Float> {
    pub features: Tensor<F>,
    pub side_edge_map: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct EdgeEncoder<F: Float> {
    pub cfg: EdgeEncoderConfig,
    stem1: Conv2d<F>,
    stem2: Conv2d<F>,
    widen: Vec<Conv2d<F>>,
    blocks: Vec<Vec<PdcBlock<F>>>,
    heads: Vec<SideHead<F>>,
}

impl<F: Float> EdgeEncoder<F> {
    pub fn new(pb: &ParamBuilder<F>, cfg: EdgeEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let stem1 = Conv2d::new(&pb.pp("stem1"), ConvSpec::new(3, c / 2, 3).stride(2))?;
        let stem2 = Conv2d::new(&pb.pp("stem2"), ConvSpec::new(c / 2, c, 3).stride(2))?;
        let mut widen = Vec::new();
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for s in 0..cfg.stages {
            let ch = cfg.stage_channels(s);
            let sp = pb.pp(format!("stage{s}"));
            if s > 0 {
                widen.push(Conv2d::with_init(&sp.pp("widen"), ConvSpec::new(ch / 2, ch, 1), fan_in_uniform(ch / 2), Init::Zeros)?);
            }
            blocks.push((0..cfg.blocks_per_stage).map(|i| PdcBlock::new(&sp.pp(format!("block{i}")), ch)).collect::<Result<_>>()?);
            heads.push(SideHead::new(&sp.pp("side"), ch)?);
        }
        Ok(Self { cfg, stem1, stem2, widen, blocks, heads })
    }

    pub fn stem(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let d = image.dims();
        if d.len() != 4 || d[1] != 3 {
            return Err(config_err(format!("edge encoder expects (B, 3, H, W), got {:?}", d)));
        }
        check_divisible("image height", d[2], 32)?;
        check_divisible("image width", d[3], 32)?;
        Ok(self.stem2.forward(&self.stem1.forward(image)?.relu())?.relu())
    }

    /// Runs stage `s` on the previous stage's features (or the stem output).
    pub fn stage(&self, s: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut x = if s == 0 { x.clone() } else { self.widen[s - 1].forward(&x.max_pool2()?)? };
        for b in &self.blocks[s] {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    pub fn side_edge_map(&self, s: usize, features: &Tensor<F>, target_hw: (usize, usize)) -> Result<Tensor<F>> {
        self.heads[s].forward(features, target_hw)
    }

    pub fn forward(&self, image: &Tensor<F>) -> Result<Vec<EdgeStageOutput<F>>> {
        let hw = (image.dims()[2], image.dims()[3]);
        let mut x = self.stem(image)?;
        let mut out = Vec::with_capacity(self.cfg.stages);
        for s in 0..self.cfg.stages {
            x = self.stage(s, &x)?;
            out.push(EdgeStageOutput { side_edge_map: self.side_edge_map(s, &x, hw)?, features: x.clone() });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcau_tensor::ParamStore;

    #[test]
    fn hand_worked_difference() {
        let x = Tensor::<f64>::from_vec((1..=9).map(f64::from).collect(), (1, 1, 3, 3)).unwrap();
        let w = Tensor::ones((1, 1, 3, 3));
        let y = pdc_conv2d(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.to_vec(), vec![0.0]);
        let y = vanilla_conv2d(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.to_vec(), vec![45.0]);
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)).unwrap();
        let w = Tensor::from_vec(vec![2.0], (1, 1, 1, 1)).unwrap();
        assert_eq!(vanilla_conv2d(&x, &w, 1, 0, 1).unwrap().to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn rejects_indivisible_images_and_bad_config() {
        let store = ParamStore::<f32>::new(1);
        let enc = EdgeEncoder::new(&store.builder(), EdgeEncoderConfig::new(8)).unwrap();
        let err = enc.forward(&Tensor::zeros((1, 3, 48, 64))).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
        assert!(EdgeEncoder::new(&store.builder().pp("x"), EdgeEncoderConfig { stages: 3, ..EdgeEncoderConfig::new(8) }).is_err());
    }

    #[test]
    fn stage_shapes_and_side_maps() {
        let store = ParamStore::<f32>::new(1);
        let enc = EdgeEncoder::new(&store.builder(), EdgeEncoderConfig::new(8)).unwrap();
        let img = Tensor::from_vec((0..2 * 3 * 64 * 64).map(|i| ((i % 97) as f32) / 97.0).collect(), (2, 3, 64, 64)).unwrap();
        let out = enc.forward(&img).unwrap();
        let expect = [[2, 8, 16, 16], [2, 16, 8, 8], [2, 32, 4, 4], [2, 64, 2, 2]];
        for (o, e) in out.iter().zip(expect) {
            assert_eq!(o.features.dims(), &e);
            assert_eq!(o.side_edge_map.dims(), &[2, 1, 64, 64]);
            assert!(o.side_edge_map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let again = enc.forward(&img).unwrap();
        assert_eq!(again[3].features.to_vec(), out[3].features.to_vec());
    }
}
