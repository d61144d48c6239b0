//! Dual feature encoders and the shared prediction decoder.
//!
//! Both encoders use the same architecture with independent parameter sets
//! (`alpha_s`, `alpha_c`). The decoder (`beta`) is shared: per-group
//! multi-scale dilated heads to 32 channels, top-down residual-attention
//! fusion, a three-conv classifier, and a holistic-attention refinement pass
//! whose output is the canonical prediction.

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::adversarial::Discriminator;
use crate::contrast::ContrastModule;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamSet, Pass, ResBlock};
use crate::tensor::{Conv2dSpec, MaxPool2dSpec, Scalar, Tensor};
use crate::types::{ImageTensor, MaskTensor};

/// Backbone selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneVariant {
    /// Four-stage bottleneck backbone with channels `[256, 512, 1024, 2048]`.
    Paper,
    /// Small four-stage backbone for desk-scale runs.
    Toy,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub variant: BackboneVariant,
    pub channels: [usize; 4],
    pub pretrained_weights_path: Option<std::path::PathBuf>,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            variant: BackboneVariant::Paper,
            channels: [256, 512, 1024, 2048],
            pretrained_weights_path: None,
        }
    }

    pub fn toy() -> Self {
        EncoderConfig {
            variant: BackboneVariant::Toy,
            channels: [16, 32, 64, 128],
            pretrained_weights_path: None,
        }
    }
}

/// Four feature groups; group k has spatial size `(H/2^(k+1), W/2^(k+1))`.
pub struct FeaturePyramid<F: Scalar> {
    groups: Vec<Tensor<F>>,
}

impl<F: Scalar> FeaturePyramid<F> {
    pub fn new(groups: Vec<Tensor<F>>) -> Self {
        assert_eq!(groups.len(), 4, "pyramid must have exactly 4 groups");
        for k in 0..3 {
            let (a, b) = (groups[k].shape().to_vec(), groups[k + 1].shape().to_vec());
            assert_eq!(a[2], b[2] * 2, "group {k} height must be 2x group {}", k + 1);
            assert_eq!(a[3], b[3] * 2, "group {k} width must be 2x group {}", k + 1);
        }
        FeaturePyramid { groups }
    }

    pub fn group(&self, k: usize) -> &Tensor<F> {
        &self.groups[k]
    }

    pub fn groups(&self) -> &[Tensor<F>] {
        &self.groups
    }
}

enum EncoderBody<F: Scalar> {
    Toy {
        stem: Conv2d<F>,
        stages: Vec<(Conv2d<F>, ResBlock<F>)>,
    },
    Paper {
        stem: Conv2d<F>,
        stem_bn: BatchNorm2d<F>,
        layers: Vec<Vec<Bottleneck<F>>>,
    },
}

/// One task-specific feature extractor.
pub struct Encoder<F: Scalar> {
    body: EncoderBody<F>,
    pub config: EncoderConfig,
    pub prefix: String,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(ps: &mut ParamSet<F>, seed: u64, prefix: &str, config: &EncoderConfig) -> Self {
        let body = match config.variant {
            BackboneVariant::Toy => {
                let stem_ch = (config.channels[0] / 2).max(4);
                let stem = Conv2d::new(
                    ps,
                    seed,
                    &format!("{prefix}.stem"),
                    3,
                    stem_ch,
                    3,
                    Conv2dSpec::strided(2, 1),
                    true,
                );
                let mut stages = Vec::new();
                let mut cin = stem_ch;
                for (k, &ck) in config.channels.iter().enumerate() {
                    let conv = Conv2d::new(
                        ps,
                        seed,
                        &format!("{prefix}.stage{k}.down"),
                        cin,
                        ck,
                        3,
                        Conv2dSpec::strided(2, 1),
                        true,
                    );
                    let res = ResBlock::new(ps, seed, &format!("{prefix}.stage{k}.res"), ck);
                    stages.push((conv, res));
                    cin = ck;
                }
                EncoderBody::Toy { stem, stages }
            }
            BackboneVariant::Paper => {
                let stem = Conv2d::new(
                    ps,
                    seed,
                    &format!("{prefix}.stem"),
                    3,
                    64,
                    7,
                    Conv2dSpec { stride: 2, pad: (3, 3), dilation: 1 },
                    false,
                );
                let stem_bn = BatchNorm2d::new(ps, &format!("{prefix}.stem_bn"), 64);
                let blocks_per_layer = [3usize, 4, 6, 3];
                let mut layers = Vec::new();
                let mut cin = 64;
                for (li, (&n_blocks, &cout)) in
                    blocks_per_layer.iter().zip(&config.channels).enumerate()
                {
                    let mid = cout / 4;
                    let mut blocks = Vec::new();
                    for bi in 0..n_blocks {
                        let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                        blocks.push(Bottleneck::new(
                            ps,
                            seed,
                            &format!("{prefix}.layer{li}.block{bi}"),
                            cin,
                            mid,
                            cout,
                            stride,
                        ));
                        cin = cout;
                    }
                    layers.push(blocks);
                }
                EncoderBody::Paper { stem, stem_bn, layers }
            }
        };
        Encoder { body, config: config.clone(), prefix: prefix.to_string() }
    }

    /// Extract the four feature groups from an `[N, 3, H, W]` batch.
    /// The spatial size must be divisible by 32.
    pub fn encode(&self, pass: &Pass<F>, images: &Tensor<F>) -> Result<FeaturePyramid<F>> {
        let s = images.shape().to_vec();
        assert_eq!(s.len(), 4);
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder input size {}x{} not divisible by 32",
                s[2], s[3]
            )));
        }
        let groups = match &self.body {
            EncoderBody::Toy { stem, stages } => {
                let mut h = stem.forward(pass, images).leaky_relu(F::cast(0.1));
                let mut groups = Vec::new();
                for (down, res) in stages {
                    h = down.forward(pass, &h).leaky_relu(F::cast(0.1));
                    h = res.forward(pass, &h);
                    groups.push(h.clone());
                }
                groups
            }
            EncoderBody::Paper { stem, stem_bn, layers } => {
                let mut h = stem.forward(pass, images);
                h = stem_bn.forward(pass, &h).relu();
                h = h.max_pool2d(MaxPool2dSpec { kernel: 3, stride: 2, pad: 1 });
                let mut groups = Vec::new();
                for layer in layers {
                    for block in layer {
                        h = block.forward(pass, &h);
                    }
                    groups.push(h.clone());
                }
                groups
            }
        };
        Ok(FeaturePyramid::new(groups))
    }
}

/// Bottleneck residual block (1x1 reduce, 3x3, 1x1 expand, BN throughout).
struct Bottleneck<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    conv3: Conv2d<F>,
    bn3: BatchNorm2d<F>,
    down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

impl<F: Scalar> Bottleneck<F> {
    fn new(
        ps: &mut ParamSet<F>,
        seed: u64,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(ps, seed, &format!("{name}.conv1"), cin, mid, 1, Conv2dSpec::unit(), false);
        let bn1 = BatchNorm2d::new(ps, &format!("{name}.bn1"), mid);
        let conv2 = Conv2d::new(
            ps,
            seed,
            &format!("{name}.conv2"),
            mid,
            mid,
            3,
            Conv2dSpec { stride, pad: (1, 1), dilation: 1 },
            false,
        );
        let bn2 = BatchNorm2d::new(ps, &format!("{name}.bn2"), mid);
        let conv3 = Conv2d::new(ps, seed, &format!("{name}.conv3"), mid, cout, 1, Conv2dSpec::unit(), false);
        let bn3 = BatchNorm2d::new(ps, &format!("{name}.bn3"), cout);
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(
                    ps,
                    seed,
                    &format!("{name}.down"),
                    cin,
                    cout,
                    1,
                    Conv2dSpec { stride, pad: (0, 0), dilation: 1 },
                    false,
                ),
                BatchNorm2d::new(ps, &format!("{name}.down_bn"), cout),
            )
        });
        Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, down }
    }

    fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let h = self.bn1.forward(pass, &self.conv1.forward(pass, x)).relu();
        let h = self.bn2.forward(pass, &self.conv2.forward(pass, &h)).relu();
        let h = self.bn3.forward(pass, &self.conv3.forward(pass, &h));
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(pass, &conv.forward(pass, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

pub const HEAD_CHANNELS: usize = 32;
const BRANCH_CHANNELS: usize = 8;
const DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Multi-scale dilated head: four parallel 3x3 branches (dilations 1/2/4/8,
/// 8 channels each) concatenated to 32 and fused by a 1x1 conv.
pub struct DilatedHead<F: Scalar> {
    branches: Vec<Conv2d<F>>,
    fuse: Conv2d<F>,
}

impl<F: Scalar> DilatedHead<F> {
    pub fn new(ps: &mut ParamSet<F>, seed: u64, name: &str, cin: usize) -> Self {
        let branches = DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2d::new(
                    ps,
                    seed,
                    &format!("{name}.branch{i}"),
                    cin,
                    BRANCH_CHANNELS,
                    3,
                    Conv2dSpec::same(3, d),
                    true,
                )
            })
            .collect();
        let fuse = Conv2d::new(
            ps,
            seed,
            &format!("{name}.fuse"),
            HEAD_CHANNELS,
            HEAD_CHANNELS,
            1,
            Conv2dSpec::unit(),
            true,
        );
        DilatedHead { branches, fuse }
    }

    pub fn forward(&self, pass: &Pass<F>, x: &Tensor<F>) -> Tensor<F> {
        let outs: Vec<Tensor<F>> = self
            .branches
            .iter()
            .map(|b| b.forward(pass, x).relu())
            .collect();
        self.fuse.forward(pass, &Tensor::concat(&outs, 1))
    }
}

/// Fixed 31-tap separable Gaussian (sigma 4) used by holistic attention.
pub struct GaussianBlur<F: Scalar> {
    kernel_v: ArrayD<F>,
    kernel_h: ArrayD<F>,
    radius: usize,
}

impl<F: Scalar> GaussianBlur<F> {
    pub fn new(kernel: usize, sigma: f64) -> Self {
        assert_eq!(kernel % 2, 1);
        let radius = kernel / 2;
        let mut taps: Vec<f64> = (0..kernel)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        let cast: Vec<F> = taps.iter().map(|&t| F::cast(t)).collect();
        GaussianBlur {
            kernel_v: ArrayD::from_shape_vec(IxDyn(&[1, 1, kernel, 1]), cast.clone()).unwrap(),
            kernel_h: ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, kernel]), cast).unwrap(),
            radius,
        }
    }

    /// Blur a one-channel map `[N, 1, H, W]` (zero padding).
    pub fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        let kv = Tensor::constant(self.kernel_v.clone());
        let kh = Tensor::constant(self.kernel_h.clone());
        x.conv2d(&kv, None, Conv2dSpec { stride: 1, pad: (self.radius, 0), dilation: 1 })
            .conv2d(&kh, None, Conv2dSpec { stride: 1, pad: (0, self.radius), dilation: 1 })
    }

    /// Dense (non-separable) evaluation used by tests as an oracle.
    pub fn dense_kernel(&self) -> ndarray::Array2<f64> {
        let k = 2 * self.radius + 1;
        let v: Vec<f64> = self.kernel_v.iter().map(|x| x.to64()).collect();
        ndarray::Array2::from_shape_fn((k, k), |(i, j)| v[i] * v[j])
    }
}

/// `A = max(blur(sigmoid(logits)), sigmoid(logits))`, then re-weight the
/// feature with A broadcast over channels.
pub fn holistic_attention<F: Scalar>(
    pred_logits: &Tensor<F>,
    feature: &Tensor<F>,
    blur: &GaussianBlur<F>,
) -> Tensor<F> {
    let p = pred_logits.sigmoid();
    let a = blur.apply(&p).max_with(&p);
    feature.mul_bcast_c(&a)
}

/// Decoder output; `refined` is the canonical prediction.
pub struct DecoderOutput<F: Scalar> {
    pub initial_logits: Tensor<F>,
    pub refined_logits: Tensor<F>,
}

impl<F: Scalar> DecoderOutput<F> {
    pub fn refined_probabilities(&self) -> Tensor<F> {
        self.refined_logits.sigmoid()
    }
}

/// Shared prediction decoder (`beta`).
pub struct Decoder<F: Scalar> {
    heads: Vec<DilatedHead<F>>,
    pre: Vec<ResBlock<F>>,
    post: Vec<ResBlock<F>>,
    cls1: Conv2d<F>,
    cls2: Conv2d<F>,
    cls3: Conv2d<F>,
    blur: GaussianBlur<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new(ps: &mut ParamSet<F>, seed: u64, prefix: &str, encoder_channels: &[usize; 4]) -> Self {
        let heads = encoder_channels
            .iter()
            .enumerate()
            .map(|(k, &c)| DilatedHead::new(ps, seed, &format!("{prefix}.head{k}"), c))
            .collect();
        // Fusion blocks for levels 3, 2, 1 (index k fuses group k+1 upward).
        let pre = (0..3)
            .map(|k| ResBlock::new(ps, seed, &format!("{prefix}.fuse{k}.pre"), HEAD_CHANNELS))
            .collect();
        let post = (0..3)
            .map(|k| ResBlock::new(ps, seed, &format!("{prefix}.fuse{k}.post"), HEAD_CHANNELS))
            .collect();
        let cls1 = Conv2d::new(ps, seed, &format!("{prefix}.cls1"), HEAD_CHANNELS, HEAD_CHANNELS, 3, Conv2dSpec::same(3, 1), true);
        let cls2 = Conv2d::new(ps, seed, &format!("{prefix}.cls2"), HEAD_CHANNELS, HEAD_CHANNELS, 3, Conv2dSpec::same(3, 1), true);
        let cls3 = Conv2d::new(ps, seed, &format!("{prefix}.cls3"), HEAD_CHANNELS, 1, 1, Conv2dSpec::unit(), true);
        Decoder {
            heads,
            pre,
            post,
            cls1,
            cls2,
            cls3,
            blur: GaussianBlur::new(31, 4.0),
        }
    }

    fn classify(&self, pass: &Pass<F>, feature: &Tensor<F>) -> Tensor<F> {
        let h = self.cls1.forward(pass, feature).relu();
        let h = self.cls2.forward(pass, &h).relu();
        self.cls3.forward(pass, &h)
    }

    /// Map the heads of a pyramid to 32 channels each.
    pub fn dilated_heads(&self, pass: &Pass<F>, pyramid: &FeaturePyramid<F>) -> Vec<Tensor<F>> {
        self.heads
            .iter()
            .zip(pyramid.groups())
            .map(|(head, g)| head.forward(pass, g))
            .collect()
    }

    /// Full decode to logits at the network input size `(out_h, out_w)`.
    pub fn decode(
        &self,
        pass: &Pass<F>,
        pyramid: &FeaturePyramid<F>,
        out_h: usize,
        out_w: usize,
    ) -> DecoderOutput<F> {
        let heads = self.dilated_heads(pass, pyramid);
        self.decode_heads(pass, &heads, out_h, out_w)
    }

    /// Decode pre-computed 32-channel heads (exposed for tests).
    pub fn decode_heads(
        &self,
        pass: &Pass<F>,
        heads: &[Tensor<F>],
        out_h: usize,
        out_w: usize,
    ) -> DecoderOutput<F> {
        assert_eq!(heads.len(), 4);
        for h in heads {
            assert_eq!(h.shape()[1], HEAD_CHANNELS, "decoder heads must be 32-channel");
        }
        // top-down: group 4 -> group 1
        let mut fused = heads[3].clone();
        for k in (0..3).rev() {
            let a = self.pre[k].forward(pass, &heads[k]);
            let target = heads[k].shape().to_vec();
            let up = fused.resize_bilinear(target[2], target[3]);
            let b = a.add(&up);
            fused = self.post[k].forward(pass, &b);
        }
        let initial = self.classify(pass, &fused);
        let refined_feat = holistic_attention(&initial, &fused, &self.blur);
        let refined = self.classify(pass, &refined_feat);
        DecoderOutput {
            initial_logits: initial.resize_bilinear(out_h, out_w),
            refined_logits: refined.resize_bilinear(out_h, out_w),
        }
    }
}

/// Which task's encoder/discriminator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskBranch {
    Sod,
    Cod,
}

/// Full model: two encoders, shared decoder, contrastive projection, two
/// discriminators; all parameters in one registry with group prefixes
/// `alpha_s`, `alpha_c`, `beta`, `theta`, `gamma_s`, `gamma_c`.
pub struct JointModel<F: Scalar> {
    pub params: ParamSet<F>,
    pub encoder_sod: Encoder<F>,
    pub encoder_cod: Encoder<F>,
    pub decoder: Decoder<F>,
    pub contrast: ContrastModule<F>,
    pub disc_sod: Discriminator<F>,
    pub disc_cod: Discriminator<F>,
    pub config: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(seed: u64) -> Self {
        ModelConfig { encoder: EncoderConfig::toy(), embed_dim: crate::contrast::EMBED_DIM, seed }
    }

    pub fn paper(seed: u64) -> Self {
        ModelConfig { encoder: EncoderConfig::paper(), embed_dim: crate::contrast::EMBED_DIM, seed }
    }

    /// Architecture digest stored in checkpoints; seeds and paths excluded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "variant={:?};channels={:?};embed={};disc={:?};head={}",
            self.encoder.variant,
            self.encoder.channels,
            self.embed_dim,
            crate::adversarial::DISC_WIDTHS,
            HEAD_CHANNELS,
        ));
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<F: Scalar> JointModel<F> {
    pub fn new(config: ModelConfig) -> Self {
        let mut ps = ParamSet::new();
        let encoder_sod = Encoder::new(&mut ps, config.seed, "alpha_s", &config.encoder);
        let encoder_cod = Encoder::new(&mut ps, config.seed, "alpha_c", &config.encoder);
        let decoder = Decoder::new(&mut ps, config.seed, "beta", &config.encoder.channels);
        let contrast = ContrastModule::new(
            &mut ps,
            config.seed,
            "theta",
            config.encoder.channels[3],
            config.embed_dim,
        );
        let disc_sod = Discriminator::new(&mut ps, config.seed, "gamma_s");
        let disc_cod = Discriminator::new(&mut ps, config.seed, "gamma_c");
        JointModel {
            params: ps,
            encoder_sod,
            encoder_cod,
            decoder,
            contrast,
            disc_sod,
            disc_cod,
            config,
        }
    }

    pub fn encoder(&self, branch: TaskBranch) -> &Encoder<F> {
        match branch {
            TaskBranch::Sod => &self.encoder_sod,
            TaskBranch::Cod => &self.encoder_cod,
        }
    }

    pub fn discriminator(&self, branch: TaskBranch) -> &Discriminator<F> {
        match branch {
            TaskBranch::Sod => &self.disc_sod,
            TaskBranch::Cod => &self.disc_cod,
        }
    }

    /// Encoder + shared decoder for one branch.
    pub fn predict(&self, pass: &Pass<F>, branch: TaskBranch, images: &Tensor<F>) -> Result<DecoderOutput<F>> {
        let s = images.shape().to_vec();
        let pyramid = self.encoder(branch).encode(pass, images)?;
        Ok(self.decoder.decode(pass, &pyramid, s[2], s[3]))
    }
}

/// Pack images into an `[N, 3, H, W]` batch tensor.
pub fn image_batch<F: Scalar>(images: &[&ImageTensor]) -> ArrayD<F> {
    assert!(!images.is_empty());
    let (h, w, _) = images[0].data.dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), 3, h, w]));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.data.dim(), (h, w, 3), "batch images must share one size");
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[n, c, y, x]] = F::cast(img.data[[y, x, c]] as f64);
                }
            }
        }
    }
    out
}

/// Pack masks into an `[N, 1, H, W]` batch tensor.
pub fn mask_batch<F: Scalar>(masks: &[&MaskTensor]) -> ArrayD<F> {
    assert!(!masks.is_empty());
    let (h, w) = masks[0].data.dim();
    let mut out = ArrayD::zeros(IxDyn(&[masks.len(), 1, h, w]));
    for (n, m) in masks.iter().enumerate() {
        assert_eq!(m.data.dim(), (h, w), "batch masks must share one size");
        for y in 0..h {
            for x in 0..w {
                out[[n, 0, y, x]] = F::cast(m.data[[y, x]] as f64);
            }
        }
    }
    out
}

/// Unpack a `[N, 1, H, W]` probability tensor into per-image masks.
pub fn batch_to_masks<F: Scalar>(batch: &ArrayD<F>, kind: crate::types::MaskKind) -> Vec<MaskTensor> {
    let s = batch.shape();
    assert_eq!(s.len(), 4);
    assert_eq!(s[1], 1);
    (0..s[0])
        .map(|n| {
            let plane = ndarray::Array2::from_shape_fn((s[2], s[3]), |(y, x)| {
                (batch[[n, 0, y, x]].to64() as f32).clamp(0.0, 1.0)
            });
            MaskTensor::new(plane, kind).expect("probabilities are in range")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_images<F: Scalar>(n: usize, hw: usize, seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(ArrayD::from_shape_simple_fn(
            IxDyn(&[n, 3, hw, hw]),
            || F::cast(rng.gen_range(0.0..1.0)),
        ))
    }

    #[test]
    fn toy_encoder_shape_trace() {
        let mut ps = ParamSet::<f32>::new();
        let enc = Encoder::new(&mut ps, 1, "alpha_s", &EncoderConfig::toy());
        let pass = Pass::eval();
        let pyr = enc.encode(&pass, &rand_images(1, 64, 2)).unwrap();
        let expect = [(16, 16), (8, 32), (4, 64), (2, 128)];
        for (k, &(hw, c)) in expect.iter().enumerate() {
            assert_eq!(pyr.group(k).shape(), &[1, c, hw, hw], "group {k}");
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut ps = ParamSet::<f32>::new();
        let enc = Encoder::new(&mut ps, 1, "alpha_s", &EncoderConfig::toy());
        let pass = Pass::eval();
        assert!(enc.encode(&pass, &rand_images(1, 48, 3)).is_err());
    }

    #[test]
    fn paper_encoder_channels_and_sizes() {
        let mut ps = ParamSet::<f32>::new();
        let enc = Encoder::new(&mut ps, 1, "alpha_s", &EncoderConfig::paper());
        let pass = Pass::eval();
        let pyr = enc.encode(&pass, &rand_images(1, 352, 4)).unwrap();
        let expect = [(88, 256), (44, 512), (22, 1024), (11, 2048)];
        for (k, &(hw, c)) in expect.iter().enumerate() {
            assert_eq!(pyr.group(k).shape(), &[1, c, hw, hw], "group {k}");
        }
    }

    #[test]
    fn encoders_have_equal_parameter_counts() {
        let model = JointModel::<f32>::new(ModelConfig::toy(9));
        assert_eq!(
            model.params.count_params("alpha_s."),
            model.params.count_params("alpha_c.")
        );
        assert!(model.params.count_params("alpha_s.") > 0);
    }

    #[test]
    fn dilated_head_maps_any_group_to_32_channels() {
        let mut ps = ParamSet::<f32>::new();
        let head = DilatedHead::new(&mut ps, 1, "beta.head0", 16);
        let pass = Pass::eval();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 16, 9, 7]), || {
            rng.gen_range(-1.0f32..1.0)
        }));
        let out = head.forward(&pass, &x);
        assert_eq!(out.shape(), &[2, HEAD_CHANNELS, 9, 7]);
    }

    #[test]
    fn zeroed_fuse_layer_yields_zero_head_output() {
        let mut ps = ParamSet::<f32>::new();
        let head = DilatedHead::new(&mut ps, 1, "beta.head0", 8);
        ps.get("beta.head0.fuse.weight").unwrap().update(|w| w.fill(0.0));
        ps.get("beta.head0.fuse.bias").unwrap().update(|b| b.fill(0.0));
        let pass = Pass::eval();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[1, 8, 6, 6]), || {
            rng.gen_range(-1.0f32..1.0)
        }));
        let out = head.forward(&pass, &x);
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_produces_input_size_predictions_in_unit_interval() {
        let model = JointModel::<f32>::new(ModelConfig::toy(11));
        let pass = Pass::eval();
        let out = model
            .predict(&pass, TaskBranch::Sod, &rand_images(2, 64, 7))
            .unwrap();
        assert_eq!(out.refined_logits.shape(), &[2, 1, 64, 64]);
        assert_eq!(out.initial_logits.shape(), &[2, 1, 64, 64]);
        let probs = out.refined_probabilities();
        assert!(probs.value().iter().all(|&v| v > 0.0 && v < 1.0));
        // determinism
        let again = model
            .predict(&pass, TaskBranch::Sod, &rand_images(2, 64, 7))
            .unwrap();
        assert_eq!(out.refined_logits.value(), again.refined_logits.value());
    }

    #[test]
    fn decode_is_sensitive_to_every_group() {
        let model = JointModel::<f32>::new(ModelConfig::toy(13));
        let pass = Pass::eval();
        let images = rand_images(1, 64, 8);
        let pyramid = model.encoder_sod.encode(&pass, &images).unwrap();
        let heads = model.decoder.dilated_heads(&pass, &pyramid);
        let base = model.decoder.decode_heads(&pass, &heads, 64, 64);
        for k in 0..4 {
            let mut variant = heads.clone();
            variant[k] = Tensor::constant(ArrayD::zeros(IxDyn(variant[k].shape())));
            let out = model.decoder.decode_heads(&pass, &variant, 64, 64);
            assert_ne!(
                out.refined_logits.value(),
                base.refined_logits.value(),
                "zeroing group {k} does not change the output"
            );
        }
        // content swap across groups (resized to fit) must also change output
        let mut swapped = heads.clone();
        let g2_as_g1 = heads[1].resize_bilinear(heads[0].shape()[2], heads[0].shape()[3]);
        let g1_as_g2 = heads[0].resize_bilinear(heads[1].shape()[2], heads[1].shape()[3]);
        swapped[0] = g2_as_g1;
        swapped[1] = g1_as_g2;
        let out = model.decoder.decode_heads(&pass, &swapped, 64, 64);
        assert_ne!(out.refined_logits.value(), base.refined_logits.value());
    }

    #[test]
    fn holistic_attention_constant_high_confidence_is_identity() {
        let blur = GaussianBlur::<f64>::new(31, 4.0);
        let logits = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 33, 33]), 30.0));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feat = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[1, 4, 33, 33]), || {
            rng.gen_range(-1.0..1.0)
        }));
        let out = holistic_attention(&logits, &feat, &blur);
        for (a, b) in out.value().iter().zip(feat.value().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn holistic_attention_dominates_sigmoid_and_spreads_mass() {
        let blur = GaussianBlur::<f64>::new(31, 4.0);
        // one-hot logit bump on a 33x33 field of strongly negative logits
        let mut logits = ArrayD::from_elem(IxDyn(&[1, 1, 33, 33]), 0.0);
        logits[[0, 0, 16, 16]] = 4.0;
        let logits_t = Tensor::constant(logits.clone());
        let p = logits_t.sigmoid();
        let a = blur.apply(&p).max_with(&p);
        // A >= sigmoid everywhere
        for (av, pv) in a.value().iter().zip(p.value().iter()) {
            assert!(av >= pv);
        }
        // strictly greater somewhere off-peak within the kernel radius
        let mut strictly = 0;
        for dy in 1..5 {
            let av = a.value()[[0, 0, 16 + dy, 16]];
            let pv = p.value()[[0, 0, 16 + dy, 16]];
            if av > pv {
                strictly += 1;
            }
        }
        assert!(strictly > 0, "blur did not spread mass off-peak");
        // separable blur matches the dense 31x31 kernel oracle at the peak
        let dense = blur.dense_kernel();
        let pv = p.value();
        let mut oracle = 0.0;
        for i in 0..31 {
            for j in 0..31 {
                let (y, x) = (16 + i as isize - 15, 16 + j as isize - 15);
                oracle += dense[[i, j]] * pv[[0, 0, y as usize, x as usize]];
            }
        }
        let got = blur.apply(&p).value()[[0, 0, 16, 16]];
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn full_forward_gradient_check_on_sampled_parameters() {
        // double precision, toy backbone, 64x64; 10 sampled parameters
        let model = JointModel::<f64>::new(ModelConfig::toy(21));
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 64, 64]), || {
            rng.gen_range(0.0..1.0)
        });
        let loss_of = |model: &JointModel<f64>| {
            let pass = Pass::train(&["alpha_s.", "beta."], &[]);
            let out = model
                .predict(&pass, TaskBranch::Sod, &Tensor::constant(images.clone()))
                .unwrap();
            (out.refined_logits.sigmoid().mean_all(), pass)
        };
        let (loss, pass) = loss_of(&model);
        let grads = loss.backward();

        // sample 10 parameters across groups
        let names: Vec<String> = model
            .params
            .iter()
            .filter(|v| v.is_trainable() && (v.name().starts_with("alpha_s.") || v.name().starts_with("beta.")))
            .map(|v| v.name().to_string())
            .collect();
        let mut checked = 0;
        let mut i = 0;
        while checked < 10 {
            let name = &names[(i * 7919) % names.len()];
            i += 1;
            let var = model.params.get(name).unwrap().clone();
            let n = var.len();
            let idx = (i * 104729) % n;
            let auto = pass
                .grad(&grads, &var)
                .map(|g| g.as_slice().unwrap()[idx])
                .unwrap_or(0.0);
            let orig = var.value();
            // small step: relu kink crossings inside the FD window otherwise
            // dominate the comparison on a 64x64 batch
            let eps = 1e-5;
            let mut plus = orig.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            var.set(plus);
            let (lp, _) = loss_of(&model);
            let mut minus = orig.clone();
            minus.as_slice_mut().unwrap()[idx] -= eps;
            var.set(minus);
            let (lm, _) = loss_of(&model);
            var.set(orig);
            let fd = (lp.item() - lm.item()) / (2.0 * eps);
            let scale = auto.abs().max(fd.abs()).max(1e-8);
            let rel = (auto - fd).abs() / scale;
            assert!(
                rel < 1e-3,
                "param {name}[{idx}]: autodiff {auto:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
}
