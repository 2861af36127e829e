//! Classifier architectures, all trained from random initialisation.

use std::str::FromStr;

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{
    batch_norm, linear, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, Init, Linear, ModuleT,
    VarBuilder,
};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::task::ImageSize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Two conv layers; for fast checks, not for results.
    TinyCnn,
    Resnet50,
    Resnet101,
    VitB,
    MobilenetV3Small,
    ConvnextSmall,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::TinyCnn,
        Architecture::Resnet50,
        Architecture::Resnet101,
        Architecture::VitB,
        Architecture::MobilenetV3Small,
        Architecture::ConvnextSmall,
    ];
    pub const NAMES: [&'static str; 6] = [
        "tiny_cnn",
        "resnet50",
        "resnet101",
        "vit_b",
        "mobilenet_v3_small",
        "convnext_small",
    ];

    pub fn as_str(&self) -> &'static str {
        Self::NAMES[Self::ALL.iter().position(|a| a == self).expect("listed")]
    }

    /// Build a fresh network whose parameters come from `vb`.
    pub fn build(
        &self,
        num_classes: usize,
        input: ImageSize,
        vb: VarBuilder,
    ) -> Result<Box<dyn Network>> {
        Ok(match self {
            Architecture::TinyCnn => Box::new(TinyCnn::new(num_classes, vb)?),
            Architecture::Resnet50 => Box::new(ResNet::new(&[3, 4, 6, 3], num_classes, vb)?),
            Architecture::Resnet101 => Box::new(ResNet::new(&[3, 4, 23, 3], num_classes, vb)?),
            Architecture::VitB => Box::new(Vit::base(num_classes, input, vb)?),
            Architecture::MobilenetV3Small => Box::new(MobileNetV3::small(num_classes, vb)?),
            Architecture::ConvnextSmall => Box::new(ConvNext::small(num_classes, vb)?),
        })
    }
}

impl FromStr for Architecture {
    type Err = HarnessError;
    fn from_str(s: &str) -> std::result::Result<Self, HarnessError> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::NAMES
            .iter()
            .position(|n| *n == norm)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| HarnessError::UnknownArchitecture(s.to_string()))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A classifier split at its penultimate layer.
pub trait Network: Send + Sync {
    /// `(N, 3, H, W)` images to `(N, D)` features.
    fn features(&self, xs: &Tensor, train: bool) -> Result<Tensor>;
    /// `(N, D)` features to `(N, classes)` logits.
    fn head(&self, features: &Tensor) -> Result<Tensor>;

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.head(&self.features(xs, train)?)
    }
}

fn conv(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    bias: bool,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        groups,
        ..Default::default()
    };
    if bias {
        candle_nn::conv2d(cin, cout, k, cfg, vb)
    } else {
        candle_nn::conv2d_no_bias(cin, cout, k, cfg, vb)
    }
}

fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

fn hardswish(x: &Tensor) -> Result<Tensor> {
    x * ((x + 3.0)?.clamp(0f32, 6f32)? / 6.0)?
}

/// Layer norm over the last dimension from primitive ops, so it has a
/// backward pass.
struct Ln {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Ln {
    fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        centred
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }

    /// Normalise the channel axis of an NCHW tensor.
    fn forward_nchw(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(&x.permute((0, 2, 3, 1))?.contiguous()?)?;
        y.permute((0, 3, 1, 2))?.contiguous()
    }
}

struct TinyCnn {
    c1: Conv2d,
    c2: Conv2d,
    fc: Linear,
}

impl TinyCnn {
    fn new(classes: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            c1: conv(3, 16, 3, 1, 1, 1, true, vb.pp("conv1"))?,
            c2: conv(16, 32, 3, 1, 1, 1, true, vb.pp("conv2"))?,
            fc: linear(32, classes, vb.pp("fc"))?,
        })
    }
}

impl Network for TinyCnn {
    fn features(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        let x = self.c1.forward(xs)?.relu()?.max_pool2d(2)?;
        spatial_mean(&self.c2.forward(&x)?.relu()?)
    }

    fn head(&self, f: &Tensor) -> Result<Tensor> {
        self.fc.forward(f)
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bn: BatchNormConfig,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv(cin, cout, k, stride, (k - 1) / 2, groups, false, vb.pp("conv"))?,
            bn: batch_norm(cout, bn, vb.pp("bn"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

fn bn_default() -> BatchNormConfig {
    BatchNormConfig::default()
}

struct Bottleneck {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    down: Option<ConvBn>,
}

impl Bottleneck {
    fn new(cin: usize, width: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let cout = width * 4;
        let down = if stride != 1 || cin != cout {
            Some(ConvBn::new(cin, cout, 1, stride, 1, bn_default(), vb.pp("downsample"))?)
        } else {
            None
        };
        Ok(Self {
            a: ConvBn::new(cin, width, 1, 1, 1, bn_default(), vb.pp("a"))?,
            b: ConvBn::new(width, width, 3, stride, 1, bn_default(), vb.pp("b"))?,
            c: ConvBn::new(width, cout, 1, 1, 1, bn_default(), vb.pp("c"))?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.a.forward(x, train)?.relu()?;
        let y = self.b.forward(&y, train)?.relu()?;
        let y = self.c.forward(&y, train)?;
        let shortcut = match &self.down {
            Some(d) => d.forward(x, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

struct ResNet {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    fc: Linear,
}

impl ResNet {
    fn new(depths: &[usize; 4], classes: usize, vb: VarBuilder) -> Result<Self> {
        let stem = ConvBn::new(3, 64, 7, 2, 1, bn_default(), vb.pp("stem"))?;
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (stage, (&depth, width)) in depths.iter().zip([64, 128, 256, 512]).enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(cin, width, stride, vb.pp(format!("layer{}.{i}", stage + 1)))?);
                cin = width * 4;
            }
        }
        Ok(Self {
            stem,
            blocks,
            fc: linear(2048, classes, vb.pp("fc"))?,
        })
    }
}

impl Network for ResNet {
    fn features(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.stem.forward(xs, train)?.relu()?;
        // Zero padding is exact for max pooling after a ReLU.
        let mut x = x
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for b in &self.blocks {
            x = b.forward(&x, train)?;
        }
        spatial_mean(&x)
    }

    fn head(&self, f: &Tensor) -> Result<Tensor> {
        self.fc.forward(f)
    }
}

#[derive(Clone, Copy)]
enum Act {
    Relu,
    HardSwish,
}

fn activate(x: &Tensor, act: Act) -> Result<Tensor> {
    match act {
        Act::Relu => x.relu(),
        Act::HardSwish => hardswish(x),
    }
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor() as usize * divisor;
    out = out.max(divisor);
    if (out as f64) < 0.9 * v {
        out += divisor;
    }
    out
}

struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let s = self.fc2.forward(&self.fc1.forward(&s)?.relu()?)?;
        x.broadcast_mul(&candle_nn::ops::hard_sigmoid(&s)?)
    }
}

struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: Option<SqueezeExcite>,
    project: ConvBn,
    act: Act,
    residual: bool,
}

impl Network for MobileNetV3 {
    fn features(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = hardswish(&self.stem.forward(xs, train)?)?;
        for b in &self.blocks {
            let mut y = x.clone();
            if let Some(e) = &b.expand {
                y = activate(&e.forward(&y, train)?, b.act)?;
            }
            y = activate(&b.depthwise.forward(&y, train)?, b.act)?;
            if let Some(se) = &b.se {
                y = se.forward(&y)?;
            }
            y = b.project.forward(&y, train)?;
            x = if b.residual { (y + &x)? } else { y };
        }
        let x = spatial_mean(&hardswish(&self.last.forward(&x, train)?)?)?;
        hardswish(&self.fc1.forward(&x)?)
    }

    fn head(&self, f: &Tensor) -> Result<Tensor> {
        self.fc2.forward(f)
    }
}

struct MobileNetV3 {
    stem: ConvBn,
    blocks: Vec<InvertedResidual>,
    last: ConvBn,
    fc1: Linear,
    fc2: Linear,
}

impl MobileNetV3 {
    fn small(classes: usize, vb: VarBuilder) -> Result<Self> {
        let bn = BatchNormConfig {
            eps: 1e-3,
            momentum: 0.01,
            ..Default::default()
        };
        use Act::{HardSwish as HS, Relu as RE};
        // (in, kernel, expanded, out, squeeze-excite, activation, stride)
        let table = [
            (16, 3, 16, 16, true, RE, 2),
            (16, 3, 72, 24, false, RE, 2),
            (24, 3, 88, 24, false, RE, 1),
            (24, 5, 96, 40, true, HS, 2),
            (40, 5, 240, 40, true, HS, 1),
            (40, 5, 240, 40, true, HS, 1),
            (40, 5, 120, 48, true, HS, 1),
            (48, 5, 144, 48, true, HS, 1),
            (48, 5, 288, 96, true, HS, 2),
            (96, 5, 576, 96, true, HS, 1),
            (96, 5, 576, 96, true, HS, 1),
        ];
        let mut blocks = Vec::new();
        for (i, &(cin, k, exp, cout, se, act, stride)) in table.iter().enumerate() {
            let vb = vb.pp(format!("blocks.{i}"));
            let expand = (exp != cin)
                .then(|| ConvBn::new(cin, exp, 1, 1, 1, bn, vb.pp("expand")))
                .transpose()?;
            let se = if se {
                let squeeze = make_divisible(exp as f64 / 4.0, 8);
                Some(SqueezeExcite {
                    fc1: conv(exp, squeeze, 1, 1, 0, 1, true, vb.pp("se.fc1"))?,
                    fc2: conv(squeeze, exp, 1, 1, 0, 1, true, vb.pp("se.fc2"))?,
                })
            } else {
                None
            };
            blocks.push(InvertedResidual {
                expand,
                depthwise: ConvBn::new(exp, exp, k, stride, exp, bn, vb.pp("depthwise"))?,
                se,
                project: ConvBn::new(exp, cout, 1, 1, 1, bn, vb.pp("project"))?,
                act,
                residual: stride == 1 && cin == cout,
            });
        }
        Ok(Self {
            stem: ConvBn::new(3, 16, 3, 2, 1, bn, vb.pp("stem"))?,
            blocks,
            last: ConvBn::new(96, 576, 1, 1, 1, bn, vb.pp("last"))?,
            fc1: linear(576, 1024, vb.pp("classifier.0"))?,
            fc2: linear(1024, classes, vb.pp("classifier.3"))?,
        })
    }
}

struct ConvNextBlock {
    dw: Conv2d,
    ln: Ln,
    pw1: Linear,
    pw2: Linear,
    gamma: Tensor,
}

impl ConvNextBlock {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            dw: conv(dim, dim, 7, 1, 3, dim, true, vb.pp("dwconv"))?,
            ln: Ln::new(dim, 1e-6, vb.pp("norm"))?,
            pw1: linear(dim, 4 * dim, vb.pp("pwconv1"))?,
            pw2: linear(4 * dim, dim, vb.pp("pwconv2"))?,
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(1e-6))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(x)?.permute((0, 2, 3, 1))?.contiguous()?;
        let y = self.ln.forward(&y)?;
        let y = self.pw2.forward(&self.pw1.forward(&y)?.gelu_erf()?)?;
        let y = y.broadcast_mul(&self.gamma)?.permute((0, 3, 1, 2))?;
        x + y
    }
}

struct ConvNextStage {
    down: Option<(Ln, Conv2d)>,
    blocks: Vec<ConvNextBlock>,
}

struct ConvNext {
    stem: Conv2d,
    stem_ln: Ln,
    stages: Vec<ConvNextStage>,
    norm: Ln,
    head: Linear,
}

impl ConvNext {
    fn small(classes: usize, vb: VarBuilder) -> Result<Self> {
        let dims = [96, 192, 384, 768];
        let depths = [3, 3, 27, 3];
        let mut stages = Vec::new();
        for s in 0..4 {
            let vb = vb.pp(format!("stages.{s}"));
            let down = if s == 0 {
                None
            } else {
                Some((
                    Ln::new(dims[s - 1], 1e-6, vb.pp("down_norm"))?,
                    conv(dims[s - 1], dims[s], 2, 2, 0, 1, true, vb.pp("down_conv"))?,
                ))
            };
            let blocks = (0..depths[s])
                .map(|i| ConvNextBlock::new(dims[s], vb.pp(format!("blocks.{i}"))))
                .collect::<Result<_>>()?;
            stages.push(ConvNextStage { down, blocks });
        }
        Ok(Self {
            stem: conv(3, 96, 4, 4, 0, 1, true, vb.pp("stem"))?,
            stem_ln: Ln::new(96, 1e-6, vb.pp("stem_norm"))?,
            stages,
            norm: Ln::new(768, 1e-6, vb.pp("norm"))?,
            head: linear(768, classes, vb.pp("head"))?,
        })
    }
}

impl Network for ConvNext {
    fn features(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        let mut x = self.stem_ln.forward_nchw(&self.stem.forward(xs)?)?;
        for stage in &self.stages {
            if let Some((ln, c)) = &stage.down {
                x = c.forward(&ln.forward_nchw(&x)?)?;
            }
            for b in &stage.blocks {
                x = b.forward(&x)?;
            }
        }
        self.norm.forward(&spatial_mean(&x)?)
    }

    fn head(&self, f: &Tensor) -> Result<Tensor> {
        self.head.forward(f)
    }
}

struct EncoderBlock {
    ln1: Ln,
    qkv: Linear,
    proj: Linear,
    ln2: Ln,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl EncoderBlock {
    fn new(dim: usize, heads: usize, mlp: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln1: Ln::new(dim, 1e-6, vb.pp("ln_1"))?,
            qkv: linear(dim, 3 * dim, vb.pp("attn.qkv"))?,
            proj: linear(dim, dim, vb.pp("attn.proj"))?,
            ln2: Ln::new(dim, 1e-6, vb.pp("ln_2"))?,
            fc1: linear(dim, mlp, vb.pp("mlp.0"))?,
            fc2: linear(mlp, dim, vb.pp("mlp.3"))?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, dim))?;
        self.proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?)?;
        x + y
    }
}

struct Vit {
    patch: Conv2d,
    class_token: Tensor,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    ln: Ln,
    head: Linear,
}

impl Vit {
    /// Patch size 16 at ImageNet scale; small native images use 4 so the
    /// token grid is not degenerate.
    pub fn patch_size(input: ImageSize) -> usize {
        if input.width.min(input.height) >= 224 {
            16
        } else {
            4
        }
    }

    fn base(classes: usize, input: ImageSize, vb: VarBuilder) -> Result<Self> {
        let (dim, depth, heads, mlp) = (768, 12, 12, 3072);
        let p = Self::patch_size(input);
        let tokens = (input.width as usize / p) * (input.height as usize / p);
        Ok(Self {
            patch: conv(3, dim, p, p, 0, 1, true, vb.pp("conv_proj"))?,
            class_token: vb.get_with_hints((1, 1, dim), "class_token", Init::Const(0.0))?,
            pos: vb.get_with_hints(
                (1, tokens + 1, dim),
                "pos_embedding",
                Init::Randn { mean: 0.0, stdev: 0.02 },
            )?,
            blocks: (0..depth)
                .map(|i| EncoderBlock::new(dim, heads, mlp, vb.pp(format!("layers.{i}"))))
                .collect::<Result<_>>()?,
            ln: Ln::new(dim, 1e-6, vb.pp("ln"))?,
            head: linear(dim, classes, vb.pp("head"))?,
        })
    }
}

impl Network for Vit {
    fn features(&self, xs: &Tensor, _train: bool) -> Result<Tensor> {
        let x = self.patch.forward(xs)?.flatten_from(2)?.transpose(1, 2)?;
        let (b, _, dim) = x.dims3()?;
        let cls = self.class_token.broadcast_as((b, 1, dim))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        self.ln.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)
    }

    fn head(&self, f: &Tensor) -> Result<Tensor> {
        self.head.forward(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::params::ParamStore;
    use candle_core::{DType, Device};

    fn forward_shape(arch: Architecture, side: u32) -> (Vec<usize>, Vec<usize>) {
        let store = ParamStore::seeded(1);
        let dev = Device::Cpu;
        let net = arch.build(5, ImageSize::square(side), store.var_builder(&dev)).unwrap();
        let x = Tensor::zeros((2, 3, side as usize, side as usize), DType::F32, &dev).unwrap();
        let f = net.features(&x, false).unwrap();
        let y = net.head(&f).unwrap();
        (f.dims().to_vec(), y.dims().to_vec())
    }

    #[test]
    fn registry_names_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.as_str().parse::<Architecture>().unwrap(), a);
        }
        assert!(matches!("resnet18".parse::<Architecture>(), Err(HarnessError::UnknownArchitecture(_))));
        assert_eq!("MobileNet-V3-Small".parse::<Architecture>().unwrap(), Architecture::MobilenetV3Small);
    }

    #[test]
    fn small_architectures_produce_logits() {
        assert_eq!(forward_shape(Architecture::TinyCnn, 32), (vec![2, 32], vec![2, 5]));
        assert_eq!(forward_shape(Architecture::MobilenetV3Small, 32), (vec![2, 1024], vec![2, 5]));
        assert_eq!(forward_shape(Architecture::Resnet50, 32), (vec![2, 2048], vec![2, 5]));
    }

    #[test]
    fn large_architectures_produce_logits() {
        assert_eq!(forward_shape(Architecture::Resnet101, 32), (vec![2, 2048], vec![2, 5]));
        assert_eq!(forward_shape(Architecture::ConvnextSmall, 32), (vec![2, 768], vec![2, 5]));
        assert_eq!(forward_shape(Architecture::VitB, 32), (vec![2, 768], vec![2, 5]));
    }

    #[test]
    fn make_divisible_matches_reference_values() {
        assert_eq!(make_divisible(16.0 / 4.0, 8), 8);
        assert_eq!(make_divisible(96.0 / 4.0, 8), 24);
        assert_eq!(make_divisible(240.0 / 4.0, 8), 64);
        assert_eq!(make_divisible(120.0 / 4.0, 8), 32);
        assert_eq!(make_divisible(144.0 / 4.0, 8), 40);
        assert_eq!(make_divisible(288.0 / 4.0, 8), 72);
        assert_eq!(make_divisible(576.0 / 4.0, 8), 144);
    }

    #[test]
    fn vit_patch_size_depends_on_input() {
        assert_eq!(Vit::patch_size(ImageSize::square(32)), 4);
        assert_eq!(Vit::patch_size(ImageSize::square(224)), 16);
    }
}
