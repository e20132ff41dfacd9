//! Small parameterized layers shared by every branch of the network.

use lcau_tensor::{Conv2dCfg, ConvMode, Float, Init, Param, ParamBuilder, Result, Tensor};

use crate::error::{config_err, ModelError};

/// Fully connected layer acting on the last axis.
#[derive(Clone, Debug)]
pub struct Linear<F: Float> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
}

impl<F: Float> Linear<F> {
    pub fn new(pb: &ParamBuilder<F>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.get("weight", (d_in, d_out), Init::TruncNormal { std: 0.02 })?;
        let bias = if bias { Some(pb.get("bias", d_out, Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = x.matmul(&self.weight.tensor())?;
        match &self.bias {
            Some(b) => y.add(&b.tensor()),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<F: Float> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub cfg: Conv2dCfg,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub mode: ConvMode,
    pub bias: bool,
}

impl ConvSpec {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self { c_in, c_out, k, stride: 1, padding: k / 2, groups: 1, mode: ConvMode::Vanilla, bias: true }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.c_in;
        self
    }

    pub fn mode(mut self, m: ConvMode) -> Self {
        self.mode = m;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl<F: Float> Conv2d<F> {
    pub fn new(pb: &ParamBuilder<F>, s: ConvSpec) -> Result<Self> {
        let fan_in = s.c_in / s.groups * s.k * s.k;
        Self::with_init(pb, s, Init::KaimingUniform { fan_in }, Init::Zeros)
    }

    pub fn with_init(pb: &ParamBuilder<F>, s: ConvSpec, w_init: Init, b_init: Init) -> Result<Self> {
        let weight = pb.get("weight", (s.c_out, s.c_in / s.groups, s.k, s.k), w_init)?;
        let bias = if s.bias { Some(pb.get("bias", s.c_out, b_init)?) } else { None };
        let cfg = Conv2dCfg { stride: s.stride, padding: s.padding, groups: s.groups, mode: s.mode };
        Ok(Self { weight, bias, cfg })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.cfg)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<F: Float> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

impl<F: Float> LayerNorm<F> {
    pub fn new(pb: &ParamBuilder<F>, dim: usize) -> Result<Self> {
        Ok(Self { gamma: pb.get("gamma", dim, Init::Const(1.0))?, beta: pb.get("beta", dim, Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm<F: Float> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
}

impl<F: Float> InstanceNorm<F> {
    pub fn new(pb: &ParamBuilder<F>, channels: usize) -> Result<Self> {
        Ok(Self { gamma: pb.get("gamma", channels, Init::Const(1.0))?, beta: pb.get("beta", channels, Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.instance_norm(&self.gamma.tensor(), &self.beta.tensor(), 1e-5)
    }
}

/// Two-layer perceptron with GELU, used by transformer blocks and fusion.
#[derive(Clone, Debug)]
pub struct Mlp<F: Float> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Float> Mlp<F> {
    pub fn new(pb: &ParamBuilder<F>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&pb.pp("fc1"), dim, hidden, true)?, fc2: Linear::new(&pb.pp("fc2"), hidden, dim, true)? })
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// (B, C, H, W) -> (B, H*W, C).
pub fn to_tokens<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let d = x.dims();
    let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
    x.reshape((b, c, h * w))?.permute(&[0, 2, 1])
}

/// (B, H*W, C) -> (B, C, H, W).
pub fn to_feature_map<F: Float>(t: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let d = t.dims();
    if d.len() != 3 || d[1] != h * w {
        return Err(lcau_tensor::TensorError::InvalidArgument {
            op: "to_feature_map",
            msg: format!("tokens {:?} do not form a {h}x{w} grid", d),
        });
    }
    t.permute(&[0, 2, 1])?.reshape((d[0], d[2], h, w))
}

pub(crate) fn check_divisible(what: &str, value: usize, by: usize) -> std::result::Result<(), ModelError> {
    if by == 0 || value % by != 0 {
        return Err(config_err(format!("{what} = {value} must be divisible by {by}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcau_tensor::ParamStore;

    #[test]
    fn token_layout_round_trips() {
        let x = Tensor::<f64>::from_vec((0..2 * 3 * 4 * 5).map(|v| v as f64).collect(), (2, 3, 4, 5)).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[2, 20, 3]);
        // token (b=1, y=2, x=3), channel 2
        assert_eq!(t.data()[(20 + 2 * 5 + 3) * 3 + 2], x.data()[((3 + 2) * 4 + 2) * 5 + 3]);
        assert_eq!(to_feature_map(&t, 4, 5).unwrap().to_vec(), x.to_vec());
        assert!(to_feature_map(&t, 5, 5).is_err());
    }

    #[test]
    fn conv_same_padding_keeps_size() {
        let store = ParamStore::<f32>::new(0);
        let c = Conv2d::new(&store.builder().pp("c"), ConvSpec::new(3, 5, 3)).unwrap();
        let y = c.forward(&Tensor::zeros((1, 3, 8, 6))).unwrap();
        assert_eq!(y.dims(), &[1, 5, 8, 6]);
        let s = Conv2d::new(&store.builder().pp("s"), ConvSpec::new(3, 5, 3).stride(2)).unwrap();
        assert_eq!(s.forward(&Tensor::zeros((1, 3, 8, 6))).unwrap().dims(), &[1, 5, 4, 3]);
    }
}
