//! Frozen scene encoders and the learned projection to the decoder width.
//!
//! A backbone maps a normalized `3 × H_in × W_in` image to a grid of
//! `H_in / patch × W_in / patch` tokens with `d_F` channels. Encoders are never
//! trained; the handle only exposes `&self` inference and a weight fingerprint
//! so callers can assert that nothing moved.

mod safetensors;
mod toy;
mod vit;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::nn::{HasParams, Linear};
use crate::real::Real;

pub use self::safetensors::SafeTensors;
pub use self::toy::ToyBackbone;
pub use self::vit::{VitArch, VitBackbone};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A normalized RGB image, channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(GazeError::shape("image channels", 3, data.shape()[0]));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// A grid of feature tokens stored channel-last: row `i·W + j` is cell `(i, j)`.
///
/// Logically this is a `C × H × W` map; the token-major layout is what every
/// decoder layer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    tokens: Array2<T>,
    height: usize,
    width: usize,
}

/// Backbone output (`d_F` channels).
pub type RawFeatureMap = FeatureMap<f32>;
/// Projected features (`d_model` channels).
pub type SceneFeatureMap<T> = FeatureMap<T>;

impl<T: Real> FeatureMap<T> {
    pub fn new(tokens: Array2<T>, height: usize, width: usize) -> Result<Self> {
        if tokens.nrows() != height * width {
            return Err(GazeError::shape(
                "feature map",
                format!("{} tokens ({height}x{width})", height * width),
                tokens.nrows(),
            ));
        }
        Ok(Self { tokens, height, width })
    }

    /// Builds a map from a channel-first `C × H × W` array.
    pub fn from_chw(data: &Array3<T>) -> Self {
        let (c, h, w) = data.dim();
        let tokens = Array2::from_shape_fn((h * w, c), |(k, ch)| data[[ch, k / w, k % w]]);
        Self {
            tokens,
            height: h,
            width: w,
        }
    }

    pub fn to_chw(&self) -> Array3<T> {
        Array3::from_shape_fn((self.channels(), self.height, self.width), |(c, i, j)| {
            self.tokens[[i * self.width + j, c]]
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> ArrayView2<'_, T> {
        self.tokens.view()
    }

    pub fn into_tokens(self) -> Array2<T> {
        self.tokens
    }

    pub fn at(&self, i: usize, j: usize) -> ArrayView1<'_, T> {
        self.tokens.row(i * self.width + j)
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            tokens: self.tokens.mapv(|v| U::of(v.to_f64())),
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Seeded per-patch random linear map; needs no weights.
    Toy,
    /// DINOv2 ViT loaded from a safetensors file of final-layer weights.
    Dinov2,
    /// DINOv2-shaped ViT with frozen seeded random weights (cost model only).
    RandomVit,
}

/// Declarative description of a frozen scene encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub d_f: usize,
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub num_heads: usize,
    #[serde(default)]
    pub num_registers: usize,
    pub frozen: bool,
    #[serde(default)]
    pub seed: u64,
    pub input_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneSpec {
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            kind: BackboneKind::Toy,
            patch_size: 14,
            d_f: 768,
            depth: 0,
            num_heads: 0,
            num_registers: 0,
            frozen: true,
            seed: 0,
            input_size: 448,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            weights: None,
        }
    }

    pub fn vit(kind: BackboneKind, arch: VitArch) -> Self {
        let (d_f, depth, num_heads) = arch.dims();
        Self {
            name: format!("{}_{}", if kind == BackboneKind::Dinov2 { "dinov2" } else { "random" }, arch.name()),
            kind,
            patch_size: 14,
            d_f,
            depth,
            num_heads,
            num_registers: 0,
            frozen: true,
            seed: 0,
            input_size: 448,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            weights: None,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_d_f(mut self, d_f: usize) -> Self {
        self.d_f = d_f;
        self
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.frozen {
            problems.push("backbone.frozen must be true".to_string());
        }
        if self.patch_size == 0 {
            problems.push("backbone.patch_size must be positive".to_string());
        }
        if self.d_f == 0 {
            problems.push("backbone.d_f must be positive".to_string());
        }
        if self.patch_size > 0 && (self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size)) {
            problems.push(format!(
                "backbone.input_size {} is not a positive multiple of patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.kind != BackboneKind::Toy
            && (self.depth == 0 || self.num_heads == 0 || !self.d_f.is_multiple_of(self.num_heads.max(1))) {
                problems.push("ViT backbones need depth > 0 and d_f divisible by num_heads".to_string());
            }
        if self.std.iter().any(|&s| s <= 0.0) {
            problems.push("backbone.std entries must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GazeError::InvalidConfig(problems.join("; ")))
        }
    }
}

enum Encoder {
    Toy(ToyBackbone),
    Vit(Box<VitBackbone>),
}

/// A loaded, frozen scene encoder.
///
/// Inference is `&self` and may run from several threads at once; the call
/// counter is the only mutable state.
pub struct Backbone {
    spec: BackboneSpec,
    encoder: Encoder,
    calls: AtomicUsize,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("spec", &self.spec)
            .field("calls", &self.calls())
            .finish()
    }
}

impl Backbone {
    pub fn load(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = match spec.kind {
            BackboneKind::Toy => Encoder::Toy(ToyBackbone::new(spec)),
            BackboneKind::RandomVit => Encoder::Vit(Box::new(VitBackbone::random(spec))),
            BackboneKind::Dinov2 => {
                let path = spec.weights.clone().unwrap_or_else(|| PathBuf::from(format!("{}.safetensors", spec.name)));
                if !path.exists() {
                    return Err(GazeError::MissingWeights {
                        name: spec.name.clone(),
                        path,
                    });
                }
                Encoder::Vit(Box::new(VitBackbone::from_safetensors(spec, &path)?))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            encoder,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Number of feature extractions performed so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn extract(&self, image: &ImageTensor) -> Result<RawFeatureMap> {
        let p = self.spec.patch_size;
        if !image.height().is_multiple_of(p) || !image.width().is_multiple_of(p) {
            return Err(GazeError::NotPatchDivisible {
                height: image.height(),
                width: image.width(),
                patch: p,
            });
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.encoder {
            Encoder::Toy(toy) => Ok(toy.forward(image)),
            Encoder::Vit(vit) => vit.forward(image),
        }
    }

    pub fn toy(&self) -> Option<&ToyBackbone> {
        match &self.encoder {
            Encoder::Toy(t) => Some(t),
            Encoder::Vit(_) => None,
        }
    }

    /// Hash over every weight bit; equal before and after training iff frozen.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        match &self.encoder {
            Encoder::Toy(t) => t.hash_weights(&mut h),
            Encoder::Vit(v) => v.hash_weights(&mut h),
        }
        h.finish()
    }
}

/// Runs the frozen encoder on one image.
pub fn extract_features(image: &ImageTensor, backbone: &Backbone) -> Result<RawFeatureMap> {
    backbone.extract(image)
}

/// Flattens non-overlapping `p × p` patches; column order is `(channel, dy, dx)`.
pub fn patchify(data: &Array3<f32>, patch: usize) -> Array2<f32> {
    let (c, h, w) = data.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut row = out.row_mut(gi * gw + gj);
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = data[[ch, gi * patch + dy, gj * patch + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Learned linear map from backbone channels to the decoder width.
#[derive(Debug, Clone)]
pub struct FeatureProjection<T> {
    pub linear: Linear<T>,
}

impl<T: Real> FeatureProjection<T> {
    pub fn new<R: Rng + ?Sized>(d_f: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(d_f, d_model, rng),
        }
    }

    pub fn from_parts(weight: Array2<T>, bias: Array1<T>) -> Self {
        let mut linear = Linear::zeros(weight.ncols(), weight.nrows());
        linear.weight.value = weight;
        linear.bias.value = bias;
        Self { linear }
    }

    pub fn d_model(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn forward(&self, raw: &FeatureMap<T>) -> Result<SceneFeatureMap<T>> {
        if raw.channels() != self.linear.input_dim() {
            return Err(GazeError::shape("projection input", self.linear.input_dim(), raw.channels()));
        }
        FeatureMap::new(self.linear.forward(raw.tokens()), raw.height(), raw.width())
    }

    /// Accumulates weight gradients; backbone features receive none.
    pub fn backward(&mut self, raw: &FeatureMap<T>, d_scene: ArrayView2<'_, T>) {
        self.linear.accumulate(raw.tokens(), d_scene);
    }
}

/// Projects backbone features to `d_model` channels.
pub fn project_features<T: Real>(raw: &FeatureMap<T>, projection: &FeatureProjection<T>) -> Result<SceneFeatureMap<T>> {
    projection.forward(raw)
}

impl<T: Real> HasParams<T> for FeatureProjection<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.linear.for_each_param(prefix, f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.linear.for_each_param_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_toy() -> BackboneSpec {
        BackboneSpec::toy().with_d_f(32)
    }

    #[test]
    fn token_grid_follows_patch_size() {
        let bb = Backbone::load(&small_toy()).unwrap();
        let f = bb.extract(&ImageTensor::zeros(448, 448)).unwrap();
        assert_eq!((f.height(), f.width(), f.channels()), (32, 32, 32));
        let f = bb.extract(&ImageTensor::zeros(224, 224)).unwrap();
        assert_eq!((f.height(), f.width()), (16, 16));
    }

    #[test]
    fn rejects_non_divisible_image() {
        let bb = Backbone::load(&small_toy()).unwrap();
        let err = bb.extract(&ImageTensor::zeros(450, 448)).unwrap_err();
        assert!(matches!(err, GazeError::NotPatchDivisible { .. }));
    }

    #[test]
    fn named_pretrained_without_weights_is_an_error() {
        let mut spec = BackboneSpec::vit(BackboneKind::Dinov2, VitArch::Base);
        spec.weights = Some("/nonexistent/dinov2_vitb14.safetensors".into());
        assert!(matches!(Backbone::load(&spec), Err(GazeError::MissingWeights { .. })));
    }

    #[test]
    fn unfrozen_spec_is_rejected() {
        let mut spec = small_toy();
        spec.frozen = false;
        assert!(Backbone::load(&spec).is_err());
    }

    #[test]
    fn zero_image_is_deterministic() {
        let bb = Backbone::load(&small_toy()).unwrap();
        let img = ImageTensor::zeros(224, 224);
        let a = bb.extract(&img).unwrap();
        let b = bb.extract(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(bb.calls(), 2);
    }

    #[test]
    fn projection_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = FeatureProjection::<f32>::new(768, 256, &mut rng);
        let raw = FeatureMap::new(Array2::zeros((4, 768)), 2, 2).unwrap();
        assert_eq!(proj.forward(&raw).unwrap().channels(), 256);
        let bad = FeatureMap::new(Array2::zeros((4, 10)), 2, 2).unwrap();
        assert!(proj.forward(&bad).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = FeatureProjection::<f64>::new(12, 8, &mut rng);
        let raw = FeatureMap::new(Array2::zeros((9, 12)), 3, 3).unwrap();
        assert!(proj.forward(&raw).unwrap().tokens().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_per_token_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_f = 20;
        let proj = FeatureProjection::<f64>::new(d_f, 6, &mut rng);
        let raw: FeatureMap<f64> = FeatureMap::new(crate::nn::trunc_normal((16, d_f), 1.0, &mut rng), 4, 4).unwrap();
        let out = proj.forward(&raw).unwrap();
        let w = &proj.linear.weight.value;
        let b = &proj.linear.bias.value;
        for i in 0..4 {
            for j in 0..4 {
                for o in 0..6 {
                    let mut acc = b[o];
                    for c in 0..d_f {
                        acc += w[[o, c]] * raw.at(i, j)[c];
                    }
                    assert!((out.at(i, j)[o] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chw_round_trip() {
        let data = Array3::from_shape_fn((5, 3, 4), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let fm = FeatureMap::from_chw(&data);
        assert_eq!(fm.at(2, 3)[4], 423.0);
        assert_eq!(fm.to_chw(), data);
    }
}
