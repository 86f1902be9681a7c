//! Design-space baselines: frozen features plus a plain heatmap decoder, with
//! the head position entering before or after feature extraction and an
//! optional head-crop branch.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, Backbone, BackboneKind, BackboneSpec, RawFeatureMap};
use crate::data::{Dataset, RgbFrame, SampleGeometry, SampleRecord};
use crate::decoder::heads::ConvHeadCache;
use crate::decoder::{ConvHead, GazeHeatmap};
use crate::error::{GazeError, Result};
use crate::nn::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::nn::norm::NormCache;
use crate::nn::transformer::LayerCache;
use crate::nn::{depth_to_space, join, space_to_depth, BatchNorm, BilinearResize, ConvTranspose2x2, HasParams, Linear, TransformerLayer};
use crate::pipeline::{GazeModel, Prediction};
use crate::prompting::{build_head_mask, HeadBBox};
use crate::targets::heatmap_bce;
use crate::trainer::{cosine_lr, Adam, TrainConfig};

/// Channel widths of the six-layer convolutional decoder.
pub const CONV6_WIDTHS: [usize; 4] = [768, 384, 192, 96];
/// `(d_model, heads, mlp_dim)` of the one-layer transformer decoder.
pub const TRANSFORMER1_DIMS: (usize, usize, usize) = (256, 8, 1024);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadIntegration {
    /// Binary head map as a fourth input channel of a retrained patch projection.
    Early,
    /// Binary head map downsampled to the feature grid and appended as a channel.
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineDecoderKind {
    Conv6,
    Transformer1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    HeadPlusScene,
    SceneOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub head_integration: HeadIntegration,
    pub decoder: BaselineDecoderKind,
    pub branches: Branches,
}

impl BaselineConfig {
    /// The six rows `a`–`f` of the design-space grid.
    pub fn table_rows() -> Vec<(char, BaselineConfig)> {
        use BaselineDecoderKind::*;
        use Branches::*;
        use HeadIntegration::*;
        let row = |head_integration, decoder, branches| BaselineConfig {
            head_integration,
            decoder,
            branches,
        };
        vec![
            ('a', row(Early, Conv6, HeadPlusScene)),
            ('b', row(Early, Transformer1, HeadPlusScene)),
            ('c', row(Late, Conv6, HeadPlusScene)),
            ('d', row(Late, Transformer1, HeadPlusScene)),
            ('e', row(Late, Conv6, SceneOnly)),
            ('f', row(Late, Transformer1, SceneOnly)),
        ]
    }

    pub fn label(&self) -> String {
        let h = match self.head_integration {
            HeadIntegration::Early => "early",
            HeadIntegration::Late => "late",
        };
        let d = match self.decoder {
            BaselineDecoderKind::Conv6 => "conv",
            BaselineDecoderKind::Transformer1 => "tran",
        };
        let b = match self.branches {
            Branches::HeadPlusScene => "H+S",
            Branches::SceneOnly => "S",
        };
        format!("{h}/{d}/{b}")
    }

    /// Channels entering the decoder.
    pub fn decoder_input_dim(&self, d_f: usize) -> usize {
        let branches = match self.branches {
            Branches::HeadPlusScene => 2,
            Branches::SceneOnly => 1,
        };
        branches * d_f + usize::from(self.head_integration == HeadIntegration::Late)
    }

    pub fn validate(&self, backbone: &BackboneSpec) -> Result<()> {
        backbone.validate()?;
        if self.head_integration == HeadIntegration::Early && backbone.kind != BackboneKind::Toy {
            return Err(GazeError::InvalidConfig(
                "early head integration retrains the patch projection and is only available for the toy backbone".into(),
            ));
        }
        let g = backbone.grid_size();
        if self.decoder == BaselineDecoderKind::Conv6 && !g.is_multiple_of(2) {
            return Err(GazeError::InvalidConfig(format!("conv decoder needs an even feature grid, got {g}")));
        }
        Ok(())
    }
}

struct BnStage<T> {
    pre: Array2<T>,
    norm: Option<NormCache<T>>,
}

fn bn_relu(bn: &mut BatchNorm<f32>, z: ArrayView2<'_, f32>, train: bool) -> (Array2<f32>, BnStage<f32>) {
    let (pre, norm) = if train {
        let (y, c) = bn.forward_train(z);
        (y, Some(c))
    } else {
        (bn.forward_eval(z), None)
    };
    (relu(pre.view()), BnStage { pre, norm })
}

fn bn_relu_backward(bn: &mut BatchNorm<f32>, st: &BnStage<f32>, dy: ArrayView2<'_, f32>) -> Array2<f32> {
    let dpre = relu_backward(st.pre.view(), dy);
    bn.backward(st.norm.as_ref().expect("training-mode cache"), dpre.view())
}

/// Six convolutions, each but the last followed by batch norm and ReLU:
/// two 1×1 reductions, a stride-2 2×2 convolution, two stride-2 transposed
/// convolutions and a final 1×1 on the single channel.
#[derive(Debug, Clone)]
pub struct Conv6Decoder {
    pub conv1: Linear<f32>,
    pub bn1: BatchNorm<f32>,
    pub conv2: Linear<f32>,
    pub bn2: BatchNorm<f32>,
    pub conv3: Linear<f32>,
    pub bn3: BatchNorm<f32>,
    pub convt4: ConvTranspose2x2<f32>,
    pub bn4: BatchNorm<f32>,
    pub convt5: ConvTranspose2x2<f32>,
    pub bn5: BatchNorm<f32>,
    pub conv6: Linear<f32>,
}

struct Conv6Cache {
    grid: (usize, usize),
    x: Array2<f32>,
    h1: Array2<f32>,
    s1: BnStage<f32>,
    s2: BnStage<f32>,
    h2_packed: Array2<f32>,
    s3: BnStage<f32>,
    h3: Array2<f32>,
    s4: BnStage<f32>,
    h4: Array2<f32>,
    s5: BnStage<f32>,
    h5: Array2<f32>,
    resize: Option<BilinearResize>,
    probs: Array2<f32>,
}

impl Conv6Decoder {
    pub fn new<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Self {
        let [c1, c2, c3, c4] = CONV6_WIDTHS;
        Self {
            conv1: Linear::new(d_in, c1, rng),
            bn1: BatchNorm::new(c1),
            conv2: Linear::new(c1, c2, rng),
            bn2: BatchNorm::new(c2),
            conv3: Linear::new(4 * c2, c3, rng),
            bn3: BatchNorm::new(c3),
            convt4: ConvTranspose2x2::new(c3, c4, rng),
            bn4: BatchNorm::new(c4),
            convt5: ConvTranspose2x2::new(c4, 1, rng),
            bn5: BatchNorm::new(1),
            conv6: Linear::new(1, 1, rng),
        }
    }

    fn forward(&mut self, x: ArrayView2<'_, f32>, grid: (usize, usize), out_hw: (usize, usize), train: bool) -> (Array2<f32>, Conv6Cache) {
        let (g0, g1) = grid;
        let (h1, s1) = bn_relu(&mut self.bn1, self.conv1.forward(x).view(), train);
        let (h2, s2) = bn_relu(&mut self.bn2, self.conv2.forward(h1.view()).view(), train);
        let h2_packed = space_to_depth(h2.view(), g0, g1);
        let (h3, s3) = bn_relu(&mut self.bn3, self.conv3.forward(h2_packed.view()).view(), train);
        let (h4, s4) = bn_relu(&mut self.bn4, self.convt4.forward(h3.view(), g0 / 2, g1 / 2).view(), train);
        let (h5, s5) = bn_relu(&mut self.bn5, self.convt5.forward(h4.view(), g0, g1).view(), train);
        let mut logits = self.conv6.forward(h5.view());
        let up = (2 * g0, 2 * g1);
        let resize = (up != out_hw).then(|| BilinearResize::new(up, out_hw));
        if let Some(r) = &resize {
            logits = r.forward(logits.view());
        }
        let probs = sigmoid(logits.view()).into_shape_with_order(out_hw).expect("output grid");
        let cache = Conv6Cache {
            grid,
            x: x.to_owned(),
            h1,
            s1,
            s2,
            h2_packed,
            s3,
            h3,
            s4,
            h4,
            s5,
            h5,
            resize,
            probs: probs.clone(),
        };
        (probs, cache)
    }

    fn backward(&mut self, c: &Conv6Cache, dprobs: ArrayView2<'_, f32>) -> Array2<f32> {
        let (g0, g1) = c.grid;
        let n = c.probs.len();
        let mut d = sigmoid_backward(c.probs.view(), dprobs).into_shape_with_order((n, 1)).expect("flat");
        if let Some(r) = &c.resize {
            d = r.backward(d.view());
        }
        let d = self.conv6.backward(c.h5.view(), d.view());
        let d = bn_relu_backward(&mut self.bn5, &c.s5, d.view());
        let d = self.convt5.backward(c.h4.view(), d.view(), g0, g1);
        let d = bn_relu_backward(&mut self.bn4, &c.s4, d.view());
        let d = self.convt4.backward(c.h3.view(), d.view(), g0 / 2, g1 / 2);
        let d = bn_relu_backward(&mut self.bn3, &c.s3, d.view());
        let d = self.conv3.backward(c.h2_packed.view(), d.view());
        let d = depth_to_space(d.view(), g0, g1);
        let d = bn_relu_backward(&mut self.bn2, &c.s2, d.view());
        let d = self.conv2.backward(c.h1.view(), d.view());
        let d = bn_relu_backward(&mut self.bn1, &c.s1, d.view());
        self.conv1.backward(c.x.view(), d.view())
    }
}

impl HasParams<f32> for Conv6Decoder {
    fn for_each_param(&self, p: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>, ArrayViewD<'_, f32>)) {
        self.conv1.for_each_param(&join(p, "conv1"), f);
        self.bn1.for_each_param(&join(p, "bn1"), f);
        self.conv2.for_each_param(&join(p, "conv2"), f);
        self.bn2.for_each_param(&join(p, "bn2"), f);
        self.conv3.for_each_param(&join(p, "conv3"), f);
        self.bn3.for_each_param(&join(p, "bn3"), f);
        self.convt4.for_each_param(&join(p, "convt4"), f);
        self.bn4.for_each_param(&join(p, "bn4"), f);
        self.convt5.for_each_param(&join(p, "convt5"), f);
        self.bn5.for_each_param(&join(p, "bn5"), f);
        self.conv6.for_each_param(&join(p, "conv6"), f);
    }

    fn for_each_param_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>, ArrayViewMutD<'_, f32>)) {
        self.conv1.for_each_param_mut(&join(p, "conv1"), f);
        self.bn1.for_each_param_mut(&join(p, "bn1"), f);
        self.conv2.for_each_param_mut(&join(p, "conv2"), f);
        self.bn2.for_each_param_mut(&join(p, "bn2"), f);
        self.conv3.for_each_param_mut(&join(p, "conv3"), f);
        self.bn3.for_each_param_mut(&join(p, "bn3"), f);
        self.convt4.for_each_param_mut(&join(p, "convt4"), f);
        self.bn4.for_each_param_mut(&join(p, "bn4"), f);
        self.convt5.for_each_param_mut(&join(p, "convt5"), f);
        self.bn5.for_each_param_mut(&join(p, "bn5"), f);
        self.conv6.for_each_param_mut(&join(p, "conv6"), f);
    }
}

/// Linear projection, one transformer layer, then a transposed conv and a
/// 1×1 conv to the heatmap.
#[derive(Debug, Clone)]
pub struct Transformer1Decoder {
    pub proj: Linear<f32>,
    pub layer: TransformerLayer<f32>,
    pub head: ConvHead<f32>,
}

struct Transformer1Cache {
    x: Array2<f32>,
    layer: LayerCache<f32>,
    head: ConvHeadCache<f32>,
}

impl Transformer1Decoder {
    pub fn new<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Self {
        let (d, heads, mlp) = TRANSFORMER1_DIMS;
        Self {
            proj: Linear::new(d_in, d, rng),
            layer: TransformerLayer::new(d, heads, mlp, 0.0, rng),
            head: ConvHead::new(d, rng),
        }
    }

    fn forward(&self, x: ArrayView2<'_, f32>, grid: (usize, usize), out_hw: (usize, usize)) -> (Array2<f32>, Transformer1Cache) {
        let t = self.proj.forward(x);
        let (y, layer) = self.layer.forward::<rand_chacha::ChaCha8Rng>(t.view(), None, None);
        let (probs, head) = self.head.forward(y.view(), grid, out_hw);
        (probs, Transformer1Cache { x: x.to_owned(), layer, head })
    }

    fn backward(&mut self, c: &Transformer1Cache, dprobs: ArrayView2<'_, f32>) -> Array2<f32> {
        let d = self.head.backward(&c.head, dprobs);
        let d = self.layer.backward(&c.layer, d.view());
        self.proj.backward(c.x.view(), d.view())
    }
}

impl HasParams<f32> for Transformer1Decoder {
    fn for_each_param(&self, p: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>, ArrayViewD<'_, f32>)) {
        self.proj.for_each_param(&join(p, "proj"), f);
        self.layer.for_each_param(&join(p, "layer"), f);
        self.head.for_each_param(&join(p, "head"), f);
    }

    fn for_each_param_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>, ArrayViewMutD<'_, f32>)) {
        self.proj.for_each_param_mut(&join(p, "proj"), f);
        self.layer.for_each_param_mut(&join(p, "layer"), f);
        self.head.for_each_param_mut(&join(p, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub enum BaselineDecoder {
    Conv6(Box<Conv6Decoder>),
    Transformer1(Box<Transformer1Decoder>),
}

impl HasParams<f32> for BaselineDecoder {
    fn for_each_param(&self, p: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>, ArrayViewD<'_, f32>)) {
        match self {
            Self::Conv6(d) => d.for_each_param(p, f),
            Self::Transformer1(d) => d.for_each_param(p, f),
        }
    }

    fn for_each_param_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>, ArrayViewMutD<'_, f32>)) {
        match self {
            Self::Conv6(d) => d.for_each_param_mut(p, f),
            Self::Transformer1(d) => d.for_each_param_mut(p, f),
        }
    }
}

enum DecoderCache {
    Conv6(Box<Conv6Cache>),
    Transformer1(Box<Transformer1Cache>),
}

/// Learnable parts of a baseline: the decoder, plus the four-channel patch
/// projection under early integration.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub d_f: usize,
    pub out_hw: (usize, usize),
    pub early_projection: Option<Linear<f32>>,
    pub decoder: BaselineDecoder,
}

impl HasParams<f32> for BaselineModel {
    fn for_each_param(&self, p: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>, ArrayViewD<'_, f32>)) {
        if let Some(e) = &self.early_projection {
            e.for_each_param(&join(p, "early_projection"), f);
        }
        self.decoder.for_each_param(&join(p, "decoder"), f);
    }

    fn for_each_param_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>, ArrayViewMutD<'_, f32>)) {
        if let Some(e) = &mut self.early_projection {
            e.for_each_param_mut(&join(p, "early_projection"), f);
        }
        self.decoder.for_each_param_mut(&join(p, "decoder"), f);
    }
}

impl BaselineModel {
    pub fn decoder_params(&self) -> usize {
        self.decoder.num_params()
    }

    /// Backbone parameter groups that receive updates.
    pub fn unfrozen_backbone_groups(&self) -> Vec<&'static str> {
        if self.early_projection.is_some() {
            vec!["early_projection"]
        } else {
            Vec::new()
        }
    }
}

/// Frozen backbone plus a baseline model.
#[derive(Debug)]
pub struct BaselinePipeline {
    pub backbone: Backbone,
    pub model: BaselineModel,
}

/// Assembles a baseline for `backbone`. Under early integration the
/// projection starts from the frozen patch projection, with zero weights on
/// the head-map channel.
pub fn build_baseline<R: Rng + ?Sized>(
    config: BaselineConfig,
    backbone: Backbone,
    out_hw: (usize, usize),
    rng: &mut R,
) -> Result<BaselinePipeline> {
    let spec = backbone.spec().clone();
    config.validate(&spec)?;
    let d_in = config.decoder_input_dim(spec.d_f);
    let decoder = match config.decoder {
        BaselineDecoderKind::Conv6 => BaselineDecoder::Conv6(Box::new(Conv6Decoder::new(d_in, rng))),
        BaselineDecoderKind::Transformer1 => BaselineDecoder::Transformer1(Box::new(Transformer1Decoder::new(d_in, rng))),
    };
    let early_projection = match config.head_integration {
        HeadIntegration::Early => {
            let toy = backbone.toy().expect("validated toy backbone");
            let pp = spec.patch_size * spec.patch_size;
            let mut lin = Linear::zeros(4 * pp, spec.d_f);
            lin.weight.value.slice_mut(s![.., ..3 * pp]).assign(toy.weight());
            Some(lin)
        }
        HeadIntegration::Late => None,
    };
    Ok(BaselinePipeline {
        backbone,
        model: BaselineModel {
            config,
            d_f: spec.d_f,
            out_hw,
            early_projection,
            decoder,
        },
    })
}

struct Features {
    x: Array2<f32>,
    early_patches: Option<Array2<f32>>,
}

/// Pixel rectangle `(top, left, height, width)` covering the box, at least 1×1.
fn pixel_window(b: &HeadBBox, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let lo = |v: f64, n: usize| ((v * n as f64).floor() as usize).min(n - 1);
    let hi = |v: f64, n: usize, l: usize| ((v * n as f64).ceil() as usize).clamp(l + 1, n);
    let (top, left) = (lo(b.ymin, h), lo(b.xmin, w));
    let (bottom, right) = (hi(b.ymax, h, top), hi(b.xmax, w, left));
    (top, left, bottom - top, right - left)
}

impl BaselinePipeline {
    fn grid(&self) -> (usize, usize) {
        let g = self.backbone.spec().grid_size();
        (g, g)
    }

    fn head_features(&self, image: &RgbFrame, bbox: &HeadBBox) -> Result<Array2<f32>> {
        let spec = self.backbone.spec();
        let p = spec.patch_size;
        let half = ((spec.input_size / 2) / p).max(1) * p;
        let head_spec = spec.clone().with_input_size(half);
        let (t, l, h, w) = pixel_window(bbox, image.height(), image.width());
        let crop = image.crop(t, l, h, w);
        let f = self.backbone.extract(&crop.to_tensor(&head_spec))?;
        let up = BilinearResize::new((f.height(), f.width()), self.grid());
        Ok(up.forward(f.tokens()))
    }

    fn early_input(&self, image: &RgbFrame, bbox: &HeadBBox) -> Array2<f32> {
        let spec = self.backbone.spec();
        let n = spec.input_size;
        let rgb = image.to_tensor(spec).data;
        let mask = Array3::from_shape_fn((1, n, n), |(_, r, c)| {
            let (y, x) = ((r as f64 + 0.5) / n as f64, (c as f64 + 0.5) / n as f64);
            f32::from(u8::from(x >= bbox.xmin && x <= bbox.xmax && y >= bbox.ymin && y <= bbox.ymax))
        });
        let four = concatenate(Axis(0), &[rgb.view(), mask.view()]).expect("same spatial size");
        patchify(&four, spec.patch_size)
    }

    fn features(&self, image: &RgbFrame, bbox: &HeadBBox, scene: Option<&RawFeatureMap>) -> Result<Features> {
        bbox.validate()?;
        let (g0, g1) = self.grid();
        let mut parts: Vec<Array2<f32>> = Vec::new();
        let mut early_patches = None;
        match (&self.model.early_projection, scene) {
            (Some(proj), _) => {
                let patches = self.early_input(image, bbox);
                parts.push(proj.forward(patches.view()));
                early_patches = Some(patches);
            }
            (None, Some(f)) => parts.push(f.tokens().to_owned()),
            (None, None) => {
                let f = self.backbone.extract(&image.to_tensor(self.backbone.spec()))?;
                parts.push(f.into_tokens());
            }
        }
        if self.model.config.branches == Branches::HeadPlusScene {
            parts.push(self.head_features(image, bbox)?);
        }
        if self.model.config.head_integration == HeadIntegration::Late {
            let m = build_head_mask(bbox, g0, g1)?;
            parts.push(m.data.mapv(f32::from).into_shape_with_order((g0 * g1, 1)).expect("flat mask"));
        }
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        let x = concatenate(Axis(1), &views).expect("equal token counts");
        Ok(Features { x, early_patches })
    }

    fn decode(&mut self, x: ArrayView2<'_, f32>, train: bool) -> (Array2<f32>, DecoderCache) {
        let grid = self.grid();
        let out = self.model.out_hw;
        match &mut self.model.decoder {
            BaselineDecoder::Conv6(d) => {
                let (p, c) = d.forward(x, grid, out, train);
                (p, DecoderCache::Conv6(Box::new(c)))
            }
            BaselineDecoder::Transformer1(d) => {
                let (p, c) = d.forward(x, grid, out);
                (p, DecoderCache::Transformer1(Box::new(c)))
            }
        }
    }

    /// One Adam step on the mean heatmap loss over `samples`. Batch norm
    /// statistics are taken per sample.
    pub fn train_step(&mut self, samples: &[SampleRecord], adam: &mut Adam, lr: f64) -> Result<f64> {
        if samples.is_empty() {
            return Err(GazeError::EmptyAnnotations);
        }
        self.model.zero_grad();
        let scale = 1.0 / samples.len() as f32;
        let mut total = 0.0;
        for s in samples {
            let feats = self.features(&s.image, &s.annotation.bbox, None)?;
            let (probs, cache) = self.decode(feats.x.view(), true);
            let (loss, grad) = heatmap_bce(probs.view(), s.target.data.view())?;
            if !loss.is_finite() {
                return Err(GazeError::NonFiniteLoss {
                    step: adam.step as usize,
                    detail: s.annotation.image_id.clone(),
                });
            }
            total += loss;
            let grad = grad * scale;
            let dx = match (&mut self.model.decoder, &cache) {
                (BaselineDecoder::Conv6(d), DecoderCache::Conv6(c)) => d.backward(c, grad.view()),
                (BaselineDecoder::Transformer1(d), DecoderCache::Transformer1(c)) => d.backward(c, grad.view()),
                _ => unreachable!("cache built by the same decoder"),
            };
            if let (Some(proj), Some(patches)) = (&mut self.model.early_projection, &feats.early_patches) {
                proj.accumulate(patches.view(), dx.slice(s![.., ..self.model.d_f]));
            }
        }
        let n = self.model.param_names().len();
        adam.step(&mut self.model, &vec![lr; n])?;
        Ok(total / samples.len() as f64)
    }
}

/// Trains a baseline with the cosine schedule and per-epoch shuffling of the
/// main trainer. Augmentation is not applied. Returns the per-step losses.
pub fn train_baseline(pipeline: &mut BaselinePipeline, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GazeError::EmptyAnnotations);
    }
    let geometry = SampleGeometry::new(pipeline.grid(), pipeline.model.out_hw, cfg.sigma);
    let samples = dataset.samples(&geometry)?;
    let total = cfg.total_steps(samples.len());
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(total);
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if losses.len() == total {
                break 'epochs;
            }
            let batch: Vec<SampleRecord> = chunk.iter().map(|&k| samples[k].clone()).collect();
            let lr = cosine_lr(losses.len(), total, cfg.lr_init)?;
            losses.push(pipeline.train_step(&batch, &mut adam, lr)?);
        }
    }
    Ok(losses)
}

impl GazeModel for BaselinePipeline {
    fn predict(&mut self, image: &RgbFrame, bboxes: &[HeadBBox]) -> Result<Vec<Prediction>> {
        if bboxes.is_empty() {
            return Err(GazeError::InvalidBBox("at least one head box is required".into()));
        }
        let scene = match self.model.early_projection {
            Some(_) => None,
            None => Some(self.backbone.extract(&image.to_tensor(self.backbone.spec()))?),
        };
        bboxes
            .iter()
            .map(|b| {
                let feats = self.features(image, b, scene.as_ref())?;
                let (probs, _) = self.decode(feats.x.view(), false);
                Ok(Prediction {
                    heatmap: GazeHeatmap::new(probs.mapv(f64::from))?,
                    inout: None,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticConfig};

    #[test]
    fn decoders_have_matched_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d_in in [768, 769] {
            let a = Conv6Decoder::new(d_in, &mut rng).num_params() as f64;
            let b = Transformer1Decoder::new(d_in, &mut rng).num_params() as f64;
            assert!((a - b).abs() / b < 0.1, "{d_in}: conv {a} vs transformer {b}");
        }
    }

    #[test]
    fn input_dims() {
        let rows = BaselineConfig::table_rows();
        let dims: Vec<usize> = rows.iter().map(|(_, c)| c.decoder_input_dim(768)).collect();
        assert_eq!(dims, vec![1536, 1536, 1537, 1537, 769, 769]);
    }

    #[test]
    fn every_row_trains_one_step_and_predicts() {
        let spec = BackboneSpec::toy().with_input_size(112).with_d_f(16);
        let ds = make_synthetic_dataset(&SyntheticConfig {
            n: 2,
            image_size: 112,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let samples = ds.samples(&SampleGeometry::with_default_sigma((8, 8), (64, 64))).unwrap();
        for (row, cfg) in BaselineConfig::table_rows() {
            let bb = Backbone::load(&spec).unwrap();
            let fp = bb.fingerprint();
            let mut p = build_baseline(cfg, bb, (64, 64), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let before = p.model.early_projection.clone();
            let mut adam = Adam::new();
            let loss = p.train_step(&samples, &mut adam, 1e-3).unwrap();
            assert!(loss.is_finite() && loss > 0.0, "row {row}");
            assert_eq!(p.backbone.fingerprint(), fp);
            match (&before, &p.model.early_projection) {
                (Some(a), Some(b)) => assert_ne!(a.weight.value, b.weight.value, "row {row}"),
                (None, None) => {}
                _ => unreachable!(),
            }
            let expect_groups = usize::from(cfg.head_integration == HeadIntegration::Early);
            assert_eq!(p.model.unfrozen_backbone_groups().len(), expect_groups);
            let preds = p.predict(&samples[0].image, &[samples[0].annotation.bbox]).unwrap();
            assert_eq!(preds[0].heatmap.shape(), (64, 64));
        }
    }

    #[test]
    fn baseline_training_reduces_loss() {
        let spec = BackboneSpec::toy().with_input_size(56).with_d_f(16);
        let ds = make_synthetic_dataset(&SyntheticConfig {
            n: 4,
            image_size: 56,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = BaselineConfig::table_rows()[5].1;
        let mut p = build_baseline(cfg, Backbone::load(&spec).unwrap(), (16, 16), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let train = TrainConfig {
            epochs: 40,
            batch_size: 4,
            augmentation: crate::data::AugmentationConfig::none(),
            ..TrainConfig::default()
        };
        let losses = train_baseline(&mut p, &ds, &train).unwrap();
        assert_eq!(losses.len(), 40);
        assert!(losses[39] < 0.75 * losses[0], "{} -> {}", losses[0], losses[39]);
    }

    #[test]
    fn early_integration_needs_toy_backbone() {
        let spec = BackboneSpec::vit(BackboneKind::RandomVit, crate::backbone::VitArch::Small);
        let cfg = BaselineConfig::table_rows()[0].1;
        assert!(matches!(cfg.validate(&spec), Err(GazeError::InvalidConfig(_))));
    }

    fn fd_check(cfg: BaselineConfig) {
        let spec = BackboneSpec::toy().with_input_size(56).with_d_f(8);
        let ds = make_synthetic_dataset(&SyntheticConfig {
            n: 1,
            image_size: 56,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let sample = ds.samples(&SampleGeometry::with_default_sigma((4, 4), (8, 8))).unwrap().remove(0);
        let mut p = build_baseline(cfg, Backbone::load(&spec).unwrap(), (8, 8), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let feats = p.features(&sample.image, &sample.annotation.bbox, None).unwrap();
        let loss_of = |p: &mut BaselinePipeline| {
            let (probs, _) = p.decode(feats.x.view(), true);
            heatmap_bce(probs.view(), sample.target.data.view()).unwrap().0
        };
        p.model.zero_grad();
        let (probs, cache) = p.decode(feats.x.view(), true);
        let (_, grad) = heatmap_bce(probs.view(), sample.target.data.view()).unwrap();
        match (&mut p.model.decoder, &cache) {
            (BaselineDecoder::Conv6(d), DecoderCache::Conv6(c)) => {
                d.backward(c, grad.view());
            }
            (BaselineDecoder::Transformer1(d), DecoderCache::Transformer1(c)) => {
                d.backward(c, grad.view());
            }
            _ => unreachable!(),
        }
        let mut grads = Vec::new();
        p.model.for_each_param("", &mut |_, _, g| grads.push(g.to_owned()));
        let norm2: f64 = grads.iter().map(|g| g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>()).sum();
        let h = 1e-3 / norm2.sqrt();
        let bump = |p: &mut BaselinePipeline, sign: f64| {
            let mut i = 0;
            p.model.for_each_param_mut("", &mut |_, mut v, _| {
                v.zip_mut_with(&grads[i], |x, &g| *x += (sign * h * f64::from(g)) as f32);
                i += 1;
            })
        };
        bump(&mut p, 1.0);
        let up = loss_of(&mut p);
        bump(&mut p, -2.0);
        let down = loss_of(&mut p);
        let num = (up - down) / (2.0 * h);
        assert!((num - norm2).abs() <= 5e-2 * norm2, "directional derivative: fd {num} vs {norm2}");
    }

    #[test]
    fn transformer_decoder_gradients_match_finite_differences() {
        fd_check(BaselineConfig::table_rows()[5].1);
    }

    #[test]
    fn conv_decoder_gradients_match_finite_differences() {
        fd_check(BaselineConfig::table_rows()[4].1);
    }
}
