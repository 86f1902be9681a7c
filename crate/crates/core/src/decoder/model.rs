use ndarray::{concatenate, s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Ix1};
use rand::{Rng, RngCore};

use super::config::{DecoderConfig, DecoderHead, TokenAttention};
use super::embedding::PositionalEmbedding;
use super::heads::{
    dot_head_backward, dot_head_forward, ConvHead, ConvHeadCache, DotHeadCache, InOutCache, InOutHead, MlpHead,
    MlpHeadCache,
};
use super::tokens::{assemble_tokens, TokenLayout};
use super::{GazeHeatmap, InOutScore};
use crate::backbone::{FeatureMap, FeatureProjection, SceneFeatureMap};
use crate::error::{GazeError, Result};
use crate::nn::transformer::LayerCache;
use crate::nn::{join, trunc_normal, HasParams, Param, TransformerLayer};
use crate::prompting::{build_head_mask, HeadBBox, HeadMask, PromptVariant};
use crate::real::Real;

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub enum HeatmapHead<T> {
    Conv2(ConvHead<T>),
    DotProduct,
    Mlp(MlpHead<T>),
}

/// The gaze decoder: projection, head prompt, optional task token, transformer
/// stack and prediction heads.
///
/// Decoding is split in two stages. [`GazeLle::encode_scene`] runs everything
/// that does not depend on the person (projection and the layers before
/// `prompt_layer`); [`GazeLle::decode_person`] injects a head prompt and runs
/// the rest. One scene context serves any number of people.
#[derive(Debug, Clone)]
pub struct GazeLle<T> {
    config: DecoderConfig,
    d_f: usize,
    pub projection: FeatureProjection<T>,
    /// `p_head` for the added-embedding prompt, `e_head` for the position token.
    pub head_prompt: Option<Param<T, Ix1>>,
    pub task_token: Option<Param<T, Ix1>>,
    pub layers: Vec<TransformerLayer<T>>,
    pub heatmap_head: HeatmapHead<T>,
    pub inout_head: Option<InOutHead<T>>,
}

/// Person-independent state shared by every person in one image.
#[derive(Debug, Clone)]
pub struct SceneContext<T> {
    raw: Option<FeatureMap<T>>,
    pos: PositionalEmbedding<T>,
    layout: TokenLayout,
    caches: Vec<LayerCache<T>>,
    outputs: Vec<Array2<T>>,
    tokens: Array2<T>,
}

impl<T: Real> SceneContext<T> {
    pub fn grid(&self) -> (usize, usize) {
        (self.layout.height, self.layout.width)
    }

    /// Scene-token activations after each shared layer.
    pub fn layer_outputs(&self) -> impl Iterator<Item = ArrayView2<'_, T>> {
        let range = self.layout.scene_range();
        self.outputs.iter().map(move |o| o.slice(s![range.clone(), ..]))
    }
}

#[derive(Debug, Clone)]
enum HeadCache<T> {
    Conv(ConvHeadCache<T>),
    Dot(DotHeadCache<T>),
    Mlp(MlpHeadCache<T>),
}

/// Everything needed to backpropagate one person's prediction.
#[derive(Debug, Clone)]
pub struct PersonCache<T> {
    mask: Option<HeadMask>,
    layout: TokenLayout,
    caches: Vec<LayerCache<T>>,
    outputs: Vec<Array2<T>>,
    head: HeadCache<T>,
    inout: Option<InOutCache<T>>,
}

impl<T: Real> PersonCache<T> {
    /// Scene-token activations after each person-specific layer.
    pub fn layer_outputs(&self) -> impl Iterator<Item = ArrayView2<'_, T>> {
        let range = self.layout.scene_range();
        self.outputs.iter().map(move |o| o.slice(s![range.clone(), ..]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonOutput<T> {
    /// Heatmap probabilities, `out_height × out_width`.
    pub heatmap: Array2<T>,
    pub inout: Option<T>,
}

impl<T: Real> PersonOutput<T> {
    pub fn to_heatmap(&self) -> Result<GazeHeatmap> {
        GazeHeatmap::new(self.heatmap.mapv(|v| v.to_f64()))
    }

    pub fn to_inout(&self) -> Result<Option<InOutScore>> {
        self.inout.map(|v| InOutScore::new(v.to_f64())).transpose()
    }
}

impl<T: Real> GazeLle<T> {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, d_f: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if d_f == 0 {
            return Err(GazeError::InvalidConfig("d_f must be positive".into()));
        }
        let d = config.d_model;
        let projection = FeatureProjection::new(d_f, d, rng);
        let head_prompt = (config.prompt_variant != PromptVariant::None)
            .then(|| Param::new(trunc_normal(d, EMBED_STD, rng)));
        let task_token = config
            .use_task_token
            .then(|| Param::new(trunc_normal(d, EMBED_STD, rng)));
        let layers = (0..config.num_layers)
            .map(|_| TransformerLayer::new(d, config.num_heads, config.mlp_dim, config.drop_path_p, rng))
            .collect();
        let heatmap_head = match config.decoder_head {
            DecoderHead::Conv2 => HeatmapHead::Conv2(ConvHead::new(d, rng)),
            DecoderHead::DotProduct => HeatmapHead::DotProduct,
            DecoderHead::Mlp => HeatmapHead::Mlp(MlpHead::new(d, (config.out_height, config.out_width), rng)),
        };
        let inout_head = config.use_task_token.then(|| InOutHead::new(d, rng));
        Ok(Self {
            config,
            d_f,
            projection,
            head_prompt,
            task_token,
            layers,
            heatmap_head,
            inout_head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.config.out_height, self.config.out_width)
    }

    fn shared_layers(&self) -> usize {
        self.config.prompt_layer - 1
    }

    /// Projects raw backbone features and runs the person-independent layers.
    /// `rng = None` disables drop-path.
    pub fn encode_scene(&self, raw: &FeatureMap<T>, rng: Option<&mut dyn RngCore>) -> Result<SceneContext<T>> {
        if raw.channels() != self.d_f {
            return Err(GazeError::shape("backbone features", self.d_f, raw.channels()));
        }
        let x_f = self.projection.forward(raw)?;
        let mut ctx = self.encode_projected(&x_f, rng)?;
        ctx.raw = Some(raw.clone());
        Ok(ctx)
    }

    /// Same as [`encode_scene`](Self::encode_scene) for already projected
    /// features `x_F`. The projection receives no gradient from such a context.
    pub fn encode_projected(&self, x_f: &SceneFeatureMap<T>, mut rng: Option<&mut dyn RngCore>) -> Result<SceneContext<T>> {
        let d = self.config.d_model;
        if x_f.channels() != d {
            return Err(GazeError::shape("scene features", d, x_f.channels()));
        }
        let pos = PositionalEmbedding::sinusoidal(d, x_f.height(), x_f.width())?;
        let task = self.task_token.as_ref().map(|t| t.value.view());
        let list = assemble_tokens(x_f, &pos, task, None)?;
        let mut tokens = list.tokens;
        let mut caches = Vec::with_capacity(self.shared_layers());
        let mut outputs = Vec::with_capacity(self.shared_layers());
        for layer in &self.layers[..self.shared_layers()] {
            let (out, cache) = layer.forward(tokens.view(), None, rng.as_deref_mut());
            caches.push(cache);
            outputs.push(out.clone());
            tokens = out;
        }
        Ok(SceneContext {
            raw: None,
            pos,
            layout: list.layout,
            caches,
            outputs,
            tokens,
        })
    }

    /// Injects the head prompt for one person and runs the remaining layers
    /// and the prediction heads.
    pub fn decode_person(
        &self,
        ctx: &SceneContext<T>,
        bbox: Option<&HeadBBox>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(PersonOutput<T>, PersonCache<T>)> {
        let (h, w) = ctx.grid();
        let variant = self.config.prompt_variant;
        let bbox = match (variant, bbox) {
            (PromptVariant::None, _) => None,
            (_, Some(b)) => {
                b.validate()?;
                Some(b)
            }
            (_, None) => {
                return Err(GazeError::VariantMismatch(format!(
                    "{variant:?} prompt needs a head bounding box"
                )))
            }
        };
        let mut layout = ctx.layout;
        let mut mask = None;
        let mut tokens = match (variant, bbox) {
            (PromptVariant::AddedEmbedding, Some(b)) => {
                let m = build_head_mask(b, h, w)?;
                let p_head = &self.head_prompt.as_ref().expect("prompt parameter").value;
                let mut t = ctx.tokens.clone();
                let offset = layout.scene_range().start;
                for k in m.set_indices() {
                    let mut row = t.row_mut(offset + k);
                    row += p_head;
                }
                mask = Some(m);
                t
            }
            (PromptVariant::PositionToken, Some(b)) => {
                let (ci, cj) = b.center_cell(h, w);
                let e_head = &self.head_prompt.as_ref().expect("prompt parameter").value;
                let t_pos = &ctx.pos.at(ci, cj) + e_head;
                layout.position_token = true;
                concatenate(Axis(0), &[ctx.tokens.view(), t_pos.view().insert_axis(Axis(0))]).expect("equal widths")
            }
            _ => ctx.tokens.clone(),
        };
        let allowed = (layout.position_token && self.config.token_attention == TokenAttention::Cross)
            .then(|| cross_attention_mask(layout));

        let mut caches = Vec::new();
        let mut outputs = Vec::new();
        for layer in &self.layers[self.shared_layers()..] {
            let (out, cache) = layer.forward(tokens.view(), allowed.as_ref(), rng.as_deref_mut());
            caches.push(cache);
            outputs.push(out.clone());
            tokens = out;
        }

        let scene = tokens.slice(s![layout.scene_range(), ..]);
        let out_hw = self.out_hw();
        let (heatmap, head) = match &self.heatmap_head {
            HeatmapHead::Conv2(head) => {
                let (p, c) = head.forward(scene, (h, w), out_hw);
                (p, HeadCache::Conv(c))
            }
            HeatmapHead::DotProduct => {
                let t_pos = tokens.row(layout.position_index().expect("position token"));
                let (p, c) = dot_head_forward(scene, t_pos, (h, w), out_hw);
                (p, HeadCache::Dot(c))
            }
            HeatmapHead::Mlp(head) => {
                let t_pos = tokens.row(layout.position_index().expect("position token"));
                let (p, c) = head.forward(scene, t_pos, out_hw);
                (p, HeadCache::Mlp(c))
            }
        };
        let (inout, inout_cache) = match (&self.inout_head, layout.task_index()) {
            (Some(head), Some(i)) => {
                let (p, c) = head.forward(tokens.row(i));
                (Some(p), Some(c))
            }
            _ => (None, None),
        };
        Ok((
            PersonOutput { heatmap, inout },
            PersonCache {
                mask,
                layout,
                caches,
                outputs,
                head,
                inout: inout_cache,
            },
        ))
    }

    /// Inference for one person: drop-path off.
    pub fn forward(&self, raw: &FeatureMap<T>, bbox: Option<&HeadBBox>) -> Result<PersonOutput<T>> {
        let ctx = self.encode_scene(raw, None)?;
        Ok(self.decode_person(&ctx, bbox, None)?.0)
    }

    /// Inference for several people in one image; the shared layers run once.
    pub fn forward_many(&self, raw: &FeatureMap<T>, bboxes: &[Option<HeadBBox>]) -> Result<Vec<PersonOutput<T>>> {
        let ctx = self.encode_scene(raw, None)?;
        bboxes
            .iter()
            .map(|b| Ok(self.decode_person(&ctx, b.as_ref(), None)?.0))
            .collect()
    }

    /// Backpropagates one person's output gradients into the parameters.
    /// Returns the gradient with respect to the shared scene tokens; sum these
    /// over people and pass the total to [`backward_scene`](Self::backward_scene).
    pub fn backward_person(
        &mut self,
        cache: &PersonCache<T>,
        d_heatmap: ArrayView2<'_, T>,
        d_inout: Option<T>,
    ) -> Result<Array2<T>> {
        let out_hw = self.out_hw();
        if d_heatmap.dim() != out_hw {
            return Err(GazeError::shape(
                "heatmap gradient",
                format!("{}x{}", out_hw.0, out_hw.1),
                format!("{}x{}", d_heatmap.nrows(), d_heatmap.ncols()),
            ));
        }
        let layout = cache.layout;
        let d = self.config.d_model;
        let mut dtokens = Array2::<T>::zeros((layout.len(), d));
        let scene = layout.scene_range();
        match (&mut self.heatmap_head, &cache.head) {
            (HeatmapHead::Conv2(head), HeadCache::Conv(c)) => {
                let ds = head.backward(c, d_heatmap);
                dtokens.slice_mut(s![scene.clone(), ..]).assign(&ds);
            }
            (HeatmapHead::DotProduct, HeadCache::Dot(c)) => {
                let (ds, dt) = dot_head_backward(c, d_heatmap);
                dtokens.slice_mut(s![scene.clone(), ..]).assign(&ds);
                dtokens.row_mut(layout.position_index().expect("position token")).assign(&dt);
            }
            (HeatmapHead::Mlp(head), HeadCache::Mlp(c)) => {
                let (ds, dt) = head.backward(c, d_heatmap);
                dtokens.slice_mut(s![scene.clone(), ..]).assign(&ds);
                dtokens.row_mut(layout.position_index().expect("position token")).assign(&dt);
            }
            _ => return Err(GazeError::VariantMismatch("cache does not match the heatmap head".into())),
        }
        match (d_inout, &mut self.inout_head, &cache.inout, layout.task_index()) {
            (Some(g), Some(head), Some(c), Some(i)) => {
                let dt = head.backward(c, g);
                dtokens.row_mut(i).assign(&dt);
            }
            (None, _, _, _) => {}
            _ => {
                return Err(GazeError::VariantMismatch(
                    "in/out gradient given but the decoder has no task token".into(),
                ))
            }
        }

        let first = self.shared_layers();
        for (layer, c) in self.layers[first..].iter_mut().zip(&cache.caches).rev() {
            dtokens = layer.backward(c, dtokens.view());
        }

        if let Some(m) = &cache.mask {
            let offset = scene.start;
            let prompt = self.head_prompt.as_mut().expect("prompt parameter");
            for k in m.set_indices() {
                prompt.grad += &dtokens.row(offset + k);
            }
        }
        if let Some(i) = layout.position_index() {
            let prompt = self.head_prompt.as_mut().expect("prompt parameter");
            prompt.grad += &dtokens.row(i);
            dtokens = dtokens.slice(s![..i, ..]).to_owned();
        }
        Ok(dtokens)
    }

    /// Backpropagates the summed shared-token gradient through the shared
    /// layers, the task token and the projection.
    pub fn backward_scene(&mut self, ctx: &SceneContext<T>, d_tokens: Array2<T>) -> Result<()> {
        if d_tokens.dim() != ctx.tokens.dim() {
            return Err(GazeError::shape(
                "scene token gradient",
                format!("{:?}", ctx.tokens.dim()),
                format!("{:?}", d_tokens.dim()),
            ));
        }
        let mut d = d_tokens;
        let shared = self.shared_layers();
        for (layer, c) in self.layers[..shared].iter_mut().zip(&ctx.caches).rev() {
            d = layer.backward(c, d.view());
        }
        if let (Some(i), Some(t)) = (ctx.layout.task_index(), self.task_token.as_mut()) {
            t.grad += &d.row(i);
        }
        if let Some(raw) = &ctx.raw {
            self.projection
                .backward(raw, d.slice(s![ctx.layout.scene_range(), ..]));
        }
        Ok(())
    }

    /// Single-person backward: `backward_person` followed by `backward_scene`.
    pub fn backward(
        &mut self,
        ctx: &SceneContext<T>,
        cache: &PersonCache<T>,
        d_heatmap: ArrayView2<'_, T>,
        d_inout: Option<T>,
    ) -> Result<()> {
        let d = self.backward_person(cache, d_heatmap, d_inout)?;
        self.backward_scene(ctx, d)
    }

    /// Scene-token activations after every transformer layer for one person,
    /// computed from scratch.
    pub fn trace(&self, raw: &FeatureMap<T>, bbox: Option<&HeadBBox>) -> Result<Vec<Array2<T>>> {
        let ctx = self.encode_scene(raw, None)?;
        let (_, cache) = self.decode_person(&ctx, bbox, None)?;
        Ok(ctx
            .layer_outputs()
            .chain(cache.layer_outputs())
            .map(|v| v.to_owned())
            .collect())
    }
}

/// Scene tokens see only scene tokens; the position token reads the scene
/// tokens and nothing attends to it.
fn cross_attention_mask(layout: TokenLayout) -> Array2<bool> {
    let n = layout.len();
    let p = layout.position_index().expect("position token");
    let mut allowed = Array2::from_elem((n, n), true);
    allowed.column_mut(p).fill(false);
    allowed
}

impl<T: Real> HasParams<T> for GazeLle<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.projection.for_each_param(&join(prefix, "projection"), f);
        if let Some(p) = &self.head_prompt {
            p.visit(&join(prefix, "head_prompt"), f);
        }
        if let Some(t) = &self.task_token {
            t.visit(&join(prefix, "task_token"), f);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each_param(&join(prefix, &format!("layers.{i}")), f);
        }
        match &self.heatmap_head {
            HeatmapHead::Conv2(h) => h.for_each_param(&join(prefix, "heatmap_head"), f),
            HeatmapHead::Mlp(h) => h.for_each_param(&join(prefix, "heatmap_head"), f),
            HeatmapHead::DotProduct => {}
        }
        if let Some(h) = &self.inout_head {
            h.for_each_param(&join(prefix, "inout_head"), f);
        }
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.projection.for_each_param_mut(&join(prefix, "projection"), f);
        if let Some(p) = &mut self.head_prompt {
            p.visit_mut(&join(prefix, "head_prompt"), f);
        }
        if let Some(t) = &mut self.task_token {
            t.visit_mut(&join(prefix, "task_token"), f);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_param_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        match &mut self.heatmap_head {
            HeatmapHead::Conv2(h) => h.for_each_param_mut(&join(prefix, "heatmap_head"), f),
            HeatmapHead::Mlp(h) => h.for_each_param_mut(&join(prefix, "heatmap_head"), f),
            HeatmapHead::DotProduct => {}
        }
        if let Some(h) = &mut self.inout_head {
            h.for_each_param_mut(&join(prefix, "inout_head"), f);
        }
    }
}

/// Runs the decoder on projected scene features `x_F` for one person.
pub fn decoder_forward<T: Real>(
    model: &GazeLle<T>,
    x_f: &SceneFeatureMap<T>,
    bbox: Option<&HeadBBox>,
) -> Result<(GazeHeatmap, Option<InOutScore>)> {
    let ctx = model.encode_projected(x_f, None)?;
    let (out, _) = model.decode_person(&ctx, bbox, None)?;
    Ok((out.to_heatmap()?, out.to_inout()?))
}

/// Copies parameter values from `src` into `dst` by name. Both models must
/// share an architecture.
pub fn copy_params<T: Real, U: Real>(src: &impl HasParams<T>, dst: &mut impl HasParams<U>) -> Result<()> {
    let mut values = std::collections::HashMap::new();
    src.for_each_param("", &mut |name, v, _| {
        values.insert(name.to_string(), v.to_owned());
    });
    let mut missing = Vec::new();
    dst.for_each_param_mut("", &mut |name, mut v, _| match values.remove(name) {
        Some(s) if s.shape() == v.shape() => v.zip_mut_with(&s, |d, &x| *d = U::of(x.to_f64())),
        _ => missing.push(name.to_string()),
    });
    missing.extend(values.into_keys());
    if missing.is_empty() {
        Ok(())
    } else {
        missing.sort();
        Err(GazeError::UnmatchedParameter(missing.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::count_parameters;
    use crate::targets::{build_target_heatmap, loss_grad, GazePoint, LossWeights, TargetHeatmap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw<T: Real>(h: usize, w: usize, d_f: usize, seed: u64) -> FeatureMap<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(trunc_normal((h * w, d_f), 1.0, &mut rng), h, w).unwrap()
    }

    fn tiny(config: DecoderConfig) -> DecoderConfig {
        DecoderConfig {
            d_model: 8,
            num_heads: 2,
            mlp_dim: 16,
            drop_path_p: 0.0,
            out_height: 8,
            out_width: 8,
            ..config
        }
    }

    fn boxes() -> [HeadBBox; 2] {
        [
            HeadBBox::new(0.05, 0.1, 0.3, 0.35).unwrap(),
            HeadBBox::new(0.6, 0.55, 0.9, 0.8).unwrap(),
        ]
    }

    #[test]
    fn default_decoder_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = GazeLle::<f32>::new(DecoderConfig::with_inout(), 32, &mut rng).unwrap();
        let out = model.forward(&raw(32, 32, 32, 1), Some(&boxes()[0])).unwrap();
        let hm = out.to_heatmap().unwrap();
        assert_eq!(hm.shape(), (64, 64));
        let y = out.to_inout().unwrap().unwrap().value();
        assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut configs = vec![
            DecoderConfig::default(),
            DecoderConfig::with_inout(),
            DecoderConfig {
                prompt_variant: PromptVariant::None,
                ..Default::default()
            },
        ];
        for attn in [TokenAttention::SelfAttention, TokenAttention::Cross] {
            for head in [DecoderHead::DotProduct, DecoderHead::Mlp] {
                configs.push(DecoderConfig::position_token(attn, head));
            }
        }
        configs.push(DecoderConfig::position_token(TokenAttention::SelfAttention, DecoderHead::Conv2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in configs {
            let c = DecoderConfig {
                d_model: 16,
                num_heads: 2,
                mlp_dim: 24,
                out_height: 16,
                out_width: 16,
                ..c
            };
            let model = GazeLle::<f32>::new(c.clone(), 12, &mut rng).unwrap();
            assert_eq!(model.num_params(), count_parameters(&c, 12), "{c:?}");
        }
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = GazeLle::<f32>::new(tiny(DecoderConfig::with_inout()), 4, &mut rng).unwrap();
        let names = model.param_names();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        for expected in [
            "projection.weight",
            "head_prompt",
            "task_token",
            "layers.0.attn.qkv.weight",
            "heatmap_head.upsample.weight",
            "inout_head.fc2.bias",
        ] {
            assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
        }
    }

    #[test]
    fn no_prompt_ignores_bbox() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = tiny(DecoderConfig {
            prompt_variant: PromptVariant::None,
            ..Default::default()
        });
        let model = GazeLle::<f64>::new(c, 6, &mut rng).unwrap();
        let x = raw(4, 4, 6, 4);
        let [a, b] = boxes();
        assert_eq!(model.forward(&x, Some(&a)).unwrap(), model.forward(&x, Some(&b)).unwrap());
        assert_eq!(model.forward(&x, None).unwrap(), model.forward(&x, Some(&b)).unwrap());
    }

    #[test]
    fn prompt_needs_bbox() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = GazeLle::<f64>::new(tiny(DecoderConfig::default()), 6, &mut rng).unwrap();
        assert!(matches!(
            model.forward(&raw(4, 4, 6, 4), None),
            Err(GazeError::VariantMismatch(_))
        ));
    }

    #[test]
    fn layers_before_prompt_are_person_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = DecoderConfig {
            d_model: 16,
            num_heads: 2,
            mlp_dim: 32,
            prompt_layer: 3,
            ..DecoderConfig::default()
        };
        let model = GazeLle::<f32>::new(c, 8, &mut rng).unwrap();
        let x = raw(8, 8, 8, 6);
        let [a, b] = boxes();
        let ta = model.trace(&x, Some(&a)).unwrap();
        let tb = model.trace(&x, Some(&b)).unwrap();
        assert_eq!(ta.len(), 3);
        assert_eq!(ta[0], tb[0]);
        assert_eq!(ta[1], tb[1]);
        assert_ne!(ta[2], tb[2]);
    }

    #[test]
    fn cross_attention_keeps_scene_tokens_prompt_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = tiny(DecoderConfig {
            num_layers: 2,
            ..DecoderConfig::position_token(TokenAttention::Cross, DecoderHead::DotProduct)
        });
        let model = GazeLle::<f64>::new(c.clone(), 6, &mut rng).unwrap();
        let x = raw(4, 4, 6, 8);
        let [a, b] = boxes();
        assert_eq!(model.trace(&x, Some(&a)).unwrap(), model.trace(&x, Some(&b)).unwrap());
        assert_ne!(model.forward(&x, Some(&a)).unwrap(), model.forward(&x, Some(&b)).unwrap());

        let selfattn = GazeLle::<f64>::new(
            DecoderConfig {
                token_attention: TokenAttention::SelfAttention,
                ..c
            },
            6,
            &mut rng,
        )
        .unwrap();
        assert_ne!(selfattn.trace(&x, Some(&a)).unwrap(), selfattn.trace(&x, Some(&b)).unwrap());
    }

    #[test]
    fn batched_people_match_single_runs_in_any_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = tiny(DecoderConfig {
            num_layers: 3,
            prompt_layer: 2,
            use_task_token: true,
            ..Default::default()
        });
        let model = GazeLle::<f64>::new(c, 6, &mut rng).unwrap();
        let x = raw(4, 4, 6, 10);
        let [a, b] = boxes();
        let many = model.forward_many(&x, &[Some(a), Some(b)]).unwrap();
        let rev = model.forward_many(&x, &[Some(b), Some(a)]).unwrap();
        assert_eq!(many[0], model.forward(&x, Some(&a)).unwrap());
        assert_eq!(many[1], model.forward(&x, Some(&b)).unwrap());
        assert_eq!((&many[0], &many[1]), (&rev[1], &rev[0]));
    }

    #[test]
    fn zero_drop_path_matches_deterministic_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = tiny(DecoderConfig {
            num_layers: 2,
            ..Default::default()
        });
        let model = GazeLle::<f64>::new(c, 6, &mut rng).unwrap();
        let x = raw(4, 4, 6, 12);
        let a = boxes()[0];
        let mut dp_rng = ChaCha8Rng::seed_from_u64(99);
        let ctx = model.encode_scene(&x, Some(&mut dp_rng)).unwrap();
        let (stochastic, _) = model.decode_person(&ctx, Some(&a), Some(&mut dp_rng)).unwrap();
        assert_eq!(stochastic, model.forward(&x, Some(&a)).unwrap());
    }

    #[test]
    fn decoder_forward_on_projected_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = GazeLle::<f64>::new(tiny(DecoderConfig::with_inout()), 6, &mut rng).unwrap();
        let x = raw(4, 4, 6, 14);
        let x_f = model.projection.forward(&x).unwrap();
        let a = boxes()[0];
        let (hm, inout) = decoder_forward(&model, &x_f, Some(&a)).unwrap();
        let direct = model.forward(&x, Some(&a)).unwrap();
        assert_eq!(hm, direct.to_heatmap().unwrap());
        assert_eq!(inout, direct.to_inout().unwrap());
    }

    struct Person {
        bbox: HeadBBox,
        target: TargetHeatmap,
        label: bool,
    }

    fn people(out_hw: (usize, usize)) -> Vec<Person> {
        let [a, b] = boxes();
        vec![
            Person {
                bbox: a,
                target: build_target_heatmap(Some(&GazePoint::new(0.7, 0.2).unwrap()), out_hw.0, out_hw.1, 1.5)
                    .unwrap(),
                label: true,
            },
            Person {
                bbox: b,
                target: build_target_heatmap(None, out_hw.0, out_hw.1, 1.5).unwrap(),
                label: false,
            },
        ]
    }

    fn total_loss(model: &GazeLle<f64>, x: &FeatureMap<f64>, ps: &[Person]) -> f64 {
        let w = LossWeights::default();
        let ctx = model.encode_scene(x, None).unwrap();
        ps.iter()
            .map(|p| {
                let (out, _) = model.decode_person(&ctx, Some(&p.bbox), None).unwrap();
                loss_grad(&out, &p.target, Some(p.label), w).unwrap().total
            })
            .sum()
    }

    fn analytic(model: &mut GazeLle<f64>, x: &FeatureMap<f64>, ps: &[Person]) {
        model.zero_grad();
        let w = LossWeights::default();
        let ctx = model.encode_scene(x, None).unwrap();
        let mut d_shared: Option<Array2<f64>> = None;
        for p in ps {
            let (out, cache) = model.decode_person(&ctx, Some(&p.bbox), None).unwrap();
            let g = loss_grad(&out, &p.target, Some(p.label), w).unwrap();
            let d = model.backward_person(&cache, g.d_heatmap.view(), g.d_inout).unwrap();
            d_shared = Some(match d_shared {
                Some(acc) => acc + d,
                None => d,
            });
        }
        model.backward_scene(&ctx, d_shared.unwrap()).unwrap();
    }

    const GC_FLOOR: f64 = 1e-6;

    /// Largest elementwise `|a − n| / max(|a|, |n|, GC_FLOOR)` over all parameters.
    fn max_rel_error(config: DecoderConfig, n_people: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = GazeLle::<f64>::new(config, 6, &mut rng).unwrap();
        // O(1) weights keep activations away from ReLU kinks and gradients
        // well above finite-difference noise.
        model.for_each_param_mut("", &mut |_, mut v, _| {
            v.mapv_inplace(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * 0.25)
        });
        let x = raw(4, 4, 6, 22);
        let ps: Vec<Person> = people(model.out_hw()).into_iter().take(n_people).collect();
        analytic(&mut model, &x, &ps);
        let mut grads = Vec::new();
        model.for_each_param("", &mut |name, _, g| grads.push((name.to_string(), g.to_owned())));
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, g) in grads {
            for k in 0..g.len() {
                let nudge = |delta: f64| {
                    let mut m = model.clone();
                    m.for_each_param_mut("", &mut |n, mut v, _| {
                        if n == name {
                            let flat = v.as_slice_mut().unwrap();
                            flat[k] += delta;
                        }
                    });
                    total_loss(&m, &x, &ps)
                };
                let numeric = (nudge(h) - nudge(-h)) / (2.0 * h);
                let a = g.as_slice().unwrap()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GC_FLOOR);
                assert!(rel < 1e-4, "{name}[{k}]: analytic {a} numeric {numeric}");
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_default_head() {
        max_rel_error(tiny(DecoderConfig { num_layers: 1, ..DecoderConfig::with_inout() }), 2);
    }

    #[test]
    fn gradients_match_finite_differences_shared_layers() {
        max_rel_error(
            tiny(DecoderConfig {
                num_layers: 2,
                prompt_layer: 2,
                use_task_token: true,
                ..Default::default()
            }),
            2,
        );
    }

    #[test]
    fn gradients_match_finite_differences_token_heads() {
        for attn in [TokenAttention::SelfAttention, TokenAttention::Cross] {
            for head in [DecoderHead::DotProduct, DecoderHead::Mlp] {
                max_rel_error(tiny(DecoderConfig { num_layers: 1, ..DecoderConfig::position_token(attn, head) }), 1);
            }
        }
        max_rel_error(
            tiny(DecoderConfig::position_token(TokenAttention::SelfAttention, DecoderHead::Conv2)),
            1,
        );
    }
}
