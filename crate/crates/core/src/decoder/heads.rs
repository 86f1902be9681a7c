//! Heatmap and in/out prediction heads.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::config::INOUT_HIDDEN;
use super::{GazeHeatmap, InOutScore};
use crate::backbone::SceneFeatureMap;
use crate::error::{GazeError, Result};
use crate::nn::activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
use crate::nn::{join, BilinearResize, ConvTranspose2x2, HasParams, Linear};
use crate::real::Real;

fn resize_for(in_hw: (usize, usize), out_hw: (usize, usize)) -> Option<BilinearResize> {
    (in_hw != out_hw).then(|| BilinearResize::new(in_hw, out_hw))
}

/// `ConvT(d→d, k=2, s=2)` → `Conv(d→1, k=1)` → sigmoid.
///
/// When the upsampled grid differs from the requested output size the logits
/// are resampled bilinearly before the sigmoid.
#[derive(Debug, Clone)]
pub struct ConvHead<T> {
    pub upsample: ConvTranspose2x2<T>,
    pub conv: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ConvHeadCache<T> {
    input: Array2<T>,
    up: Array2<T>,
    grid: (usize, usize),
    probs: Array2<T>,
    resize: Option<BilinearResize>,
}

impl<T: Real> ConvHead<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            upsample: ConvTranspose2x2::new(d, d, rng),
            conv: Linear::new(d, 1, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            upsample: ConvTranspose2x2::zeros(d, d),
            conv: Linear::zeros(d, 1),
        }
    }

    pub fn forward(
        &self,
        scene: ArrayView2<'_, T>,
        grid: (usize, usize),
        out_hw: (usize, usize),
    ) -> (Array2<T>, ConvHeadCache<T>) {
        let up = self.upsample.forward(scene, grid.0, grid.1);
        let mut logits = self.conv.forward(up.view());
        let resize = resize_for((2 * grid.0, 2 * grid.1), out_hw);
        if let Some(r) = &resize {
            logits = r.forward(logits.view());
        }
        let probs = sigmoid(logits.view()).into_shape_with_order(out_hw).expect("output grid");
        (
            probs.clone(),
            ConvHeadCache {
                input: scene.to_owned(),
                up,
                grid,
                probs,
                resize,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvHeadCache<T>, dprobs: ArrayView2<'_, T>) -> Array2<T> {
        let n = cache.probs.len();
        let dlogits = sigmoid_backward(cache.probs.view(), dprobs)
            .into_shape_with_order((n, 1))
            .expect("flat logits");
        let dlogits = match &cache.resize {
            Some(r) => r.backward(dlogits.view()),
            None => dlogits,
        };
        let dup = self.conv.backward(cache.up.view(), dlogits.view());
        self.upsample
            .backward(cache.input.view(), dup.view(), cache.grid.0, cache.grid.1)
    }
}

impl<T: Real> HasParams<T> for ConvHead<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.upsample.for_each_param(&join(prefix, "upsample"), f);
        self.conv.for_each_param(&join(prefix, "conv"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.upsample.for_each_param_mut(&join(prefix, "upsample"), f);
        self.conv.for_each_param_mut(&join(prefix, "conv"), f);
    }
}

/// Per-cell `sigmoid(⟨s_ij, t_pos⟩)`, then bilinear upsampling to the output size.
#[derive(Debug, Clone)]
pub struct DotHeadCache<T> {
    scene: Array2<T>,
    t_pos: Array1<T>,
    sig: Array2<T>,
    resize: Option<BilinearResize>,
}

pub fn dot_head_forward<T: Real>(
    scene: ArrayView2<'_, T>,
    t_pos: ArrayView1<'_, T>,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> (Array2<T>, DotHeadCache<T>) {
    let scores = scene.dot(&t_pos).insert_axis(Axis(1));
    let sig = sigmoid(scores.view());
    let resize = resize_for(grid, out_hw);
    let up = match &resize {
        Some(r) => r.forward(sig.view()),
        None => sig.clone(),
    };
    let probs = up.into_shape_with_order(out_hw).expect("output grid");
    (
        probs,
        DotHeadCache {
            scene: scene.to_owned(),
            t_pos: t_pos.to_owned(),
            sig,
            resize,
        },
    )
}

/// Returns gradients for the scene tokens and the position token.
pub fn dot_head_backward<T: Real>(cache: &DotHeadCache<T>, dprobs: ArrayView2<'_, T>) -> (Array2<T>, Array1<T>) {
    let flat = dprobs.to_shape((dprobs.len(), 1)).expect("flat").to_owned();
    let dsig = match &cache.resize {
        Some(r) => r.backward(flat.view()),
        None => flat,
    };
    let dscores = sigmoid_backward(cache.sig.view(), dsig.view()).remove_axis(Axis(1));
    let dscene = dscores
        .view()
        .insert_axis(Axis(1))
        .dot(&cache.t_pos.view().insert_axis(Axis(0)));
    let dt = cache.scene.t().dot(&dscores);
    (dscene, dt)
}

/// Two-layer MLP regressing the full heatmap from `[t_pos, mean(scene)]`.
#[derive(Debug, Clone)]
pub struct MlpHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpHeadCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    probs: Array2<T>,
    n_scene: usize,
}

impl<T: Real> MlpHead<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, out_hw: (usize, usize), rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(2 * d, d, rng),
            fc2: Linear::new(d, out_hw.0 * out_hw.1, rng),
        }
    }

    pub fn forward(
        &self,
        scene: ArrayView2<'_, T>,
        t_pos: ArrayView1<'_, T>,
        out_hw: (usize, usize),
    ) -> (Array2<T>, MlpHeadCache<T>) {
        let pooled = scene.mean_axis(Axis(0)).expect("non-empty scene");
        let input = concatenate(Axis(0), &[t_pos, pooled.view()])
            .expect("1-d concat")
            .insert_axis(Axis(0));
        let pre = self.fc1.forward(input.view());
        let act = relu(pre.view());
        let logits = self.fc2.forward(act.view());
        let probs = sigmoid(logits.view());
        (
            probs.clone().into_shape_with_order(out_hw).expect("output grid"),
            MlpHeadCache {
                input,
                pre,
                act,
                probs,
                n_scene: scene.nrows(),
            },
        )
    }

    /// Returns gradients for the scene tokens (mean-pool spread) and `t_pos`.
    pub fn backward(&mut self, cache: &MlpHeadCache<T>, dprobs: ArrayView2<'_, T>) -> (Array2<T>, Array1<T>) {
        let dp = dprobs.to_shape((1, dprobs.len())).expect("flat").to_owned();
        let dlogits = sigmoid_backward(cache.probs.view(), dp.view());
        let dact = self.fc2.backward(cache.act.view(), dlogits.view());
        let dpre = relu_backward(cache.pre.view(), dact.view());
        let din = self.fc1.backward(cache.input.view(), dpre.view());
        let d = din.ncols() / 2;
        let dt = din.slice(ndarray::s![0, ..d]).to_owned();
        let dpool = din.slice(ndarray::s![0, d..]).to_owned() / T::of(cache.n_scene as f64);
        let dscene = Array2::from_shape_fn((cache.n_scene, d), |(_, c)| dpool[c]);
        (dscene, dt)
    }
}

impl<T: Real> HasParams<T> for MlpHead<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.fc1.for_each_param(&join(prefix, "fc1"), f);
        self.fc2.for_each_param(&join(prefix, "fc2"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.fc1.for_each_param_mut(&join(prefix, "fc1"), f);
        self.fc2.for_each_param_mut(&join(prefix, "fc2"), f);
    }
}

/// `Linear(d→128)` → ReLU → `Linear(128→1)` → sigmoid on the task token.
#[derive(Debug, Clone)]
pub struct InOutHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct InOutCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    prob: T,
}

impl<T: Real> InOutHead<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(d, INOUT_HIDDEN, rng),
            fc2: Linear::new(INOUT_HIDDEN, 1, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            fc1: Linear::zeros(d, INOUT_HIDDEN),
            fc2: Linear::zeros(INOUT_HIDDEN, 1),
        }
    }

    pub fn forward(&self, token: ArrayView1<'_, T>) -> (T, InOutCache<T>) {
        let input = token.to_owned().insert_axis(Axis(0));
        let pre = self.fc1.forward(input.view());
        let act = relu(pre.view());
        let logit = self.fc2.forward(act.view())[[0, 0]];
        let prob = sigmoid_scalar(logit);
        (prob, InOutCache { input, pre, act, prob })
    }

    pub fn backward(&mut self, cache: &InOutCache<T>, dprob: T) -> Array1<T> {
        let dlogit = Array2::from_elem((1, 1), dprob * cache.prob * (T::one() - cache.prob));
        let dact = self.fc2.backward(cache.act.view(), dlogit.view());
        let dpre = relu_backward(cache.pre.view(), dact.view());
        self.fc1.backward(cache.input.view(), dpre.view()).row(0).to_owned()
    }
}

impl<T: Real> HasParams<T> for InOutHead<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>, ArrayViewD<'_, T>)) {
        self.fc1.for_each_param(&join(prefix, "fc1"), f);
        self.fc2.for_each_param(&join(prefix, "fc2"), f);
    }

    fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>),
    ) {
        self.fc1.for_each_param_mut(&join(prefix, "fc1"), f);
        self.fc2.for_each_param_mut(&join(prefix, "fc2"), f);
    }
}

fn to_heatmap<T: Real>(probs: Array2<T>) -> Result<GazeHeatmap> {
    GazeHeatmap::new(probs.mapv(|v| v.to_f64()))
}

/// Conv2 head applied to a reconstructed post-transformer feature map.
pub fn heatmap_head_conv2<T: Real>(
    scene: &SceneFeatureMap<T>,
    head: &ConvHead<T>,
    out_hw: (usize, usize),
) -> Result<GazeHeatmap> {
    if scene.channels() != head.conv.input_dim() {
        return Err(GazeError::shape("conv head input", head.conv.input_dim(), scene.channels()));
    }
    let (p, _) = head.forward(scene.tokens(), (scene.height(), scene.width()), out_hw);
    to_heatmap(p)
}

pub fn heatmap_head_dot<T: Real>(
    scene: &SceneFeatureMap<T>,
    t_pos: ArrayView1<'_, T>,
    out_hw: (usize, usize),
) -> Result<GazeHeatmap> {
    if t_pos.len() != scene.channels() {
        return Err(GazeError::shape("position token", scene.channels(), t_pos.len()));
    }
    let (p, _) = dot_head_forward(scene.tokens(), t_pos, (scene.height(), scene.width()), out_hw);
    to_heatmap(p)
}

pub fn heatmap_head_mlp<T: Real>(
    scene: &SceneFeatureMap<T>,
    t_pos: ArrayView1<'_, T>,
    head: &MlpHead<T>,
    out_hw: (usize, usize),
) -> Result<GazeHeatmap> {
    if 2 * scene.channels() != head.fc1.input_dim() || t_pos.len() != scene.channels() {
        return Err(GazeError::shape("mlp head input", head.fc1.input_dim(), scene.channels() + t_pos.len()));
    }
    if head.fc2.output_dim() != out_hw.0 * out_hw.1 {
        return Err(GazeError::shape("mlp head output", head.fc2.output_dim(), out_hw.0 * out_hw.1));
    }
    let (p, _) = head.forward(scene.tokens(), t_pos, out_hw);
    to_heatmap(p)
}

pub fn inout_head<T: Real>(task_token: ArrayView1<'_, T>, head: &InOutHead<T>) -> Result<InOutScore> {
    if task_token.len() != head.fc1.input_dim() {
        return Err(GazeError::shape("task token", head.fc1.input_dim(), task_token.len()));
    }
    InOutScore::new(head.forward(task_token).0.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(h: usize, w: usize, d: usize, seed: u64) -> SceneFeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SceneFeatureMap::new(trunc_normal((h * w, d), 1.0, &mut rng), h, w).unwrap()
    }

    #[test]
    fn conv_head_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ConvHead::<f64>::new(16, &mut rng);
        let hm = heatmap_head_conv2(&scene(32, 32, 16, 1), &head, (64, 64)).unwrap();
        assert_eq!(hm.shape(), (64, 64));
        assert!(hm.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv_head_zero_weights_gives_half() {
        let head = ConvHead::<f64>::zeros(8);
        let hm = heatmap_head_conv2(&scene(4, 4, 8, 2), &head, (8, 8)).unwrap();
        assert!(hm.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_head_resamples_to_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ConvHead::<f64>::new(8, &mut rng);
        let hm = heatmap_head_conv2(&scene(16, 16, 8, 1), &head, (64, 64)).unwrap();
        assert_eq!(hm.shape(), (64, 64));
    }

    #[test]
    fn dot_head_zero_token_is_uniform() {
        let s = scene(6, 6, 8, 3);
        let hm = heatmap_head_dot(&s, Array1::zeros(8).view(), (6, 6)).unwrap();
        assert!(hm.data().iter().all(|&v| v == 0.5));
        let hm = heatmap_head_dot(&s, Array1::zeros(8).view(), (12, 12)).unwrap();
        assert!(hm.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn dot_head_matches_double_loop_and_keeps_argmax_under_scaling() {
        let s = scene(5, 4, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Array1<f64> = trunc_normal(6, 1.0, &mut rng);
        let hm = heatmap_head_dot(&s, t.view(), (5, 4)).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in 0..6 {
                    acc += s.at(i, j)[c] * t[c];
                }
                let expect = 1.0 / (1.0 + (-acc).exp());
                assert!((hm.data()[[i, j]] - expect).abs() < 1e-12);
            }
        }
        let scaled = heatmap_head_dot(&s, (&t * 3.5).view(), (5, 4)).unwrap();
        assert_eq!(hm.argmax(), scaled.argmax());
    }

    #[test]
    fn mlp_head_shape_zero_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut head = MlpHead::<f64>::new(8, (64, 64), &mut rng);
        let s = scene(4, 4, 8, 7);
        let t = Array1::from_elem(8, 0.3);
        let a = heatmap_head_mlp(&s, t.view(), &head, (64, 64)).unwrap();
        assert_eq!(a.shape(), (64, 64));
        assert_eq!(a, heatmap_head_mlp(&s, t.view(), &head, (64, 64)).unwrap());
        head.fc2 = Linear::zeros(8, 64 * 64);
        let z = heatmap_head_mlp(&s, t.view(), &head, (64, 64)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inout_head_range_and_zero() {
        let head = InOutHead::<f64>::zeros(16);
        assert_eq!(inout_head(Array1::from_elem(16, 2.0).view(), &head).unwrap().value(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = InOutHead::<f64>::new(16, &mut rng);
        for k in 0..20 {
            let t: Array1<f64> = trunc_normal(16, 1.0 + k as f64, &mut rng);
            let a = inout_head(t.view(), &head).unwrap().value();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a, inout_head(t.view(), &head).unwrap().value());
        }
        assert!(inout_head(Array1::zeros(3).view(), &head).is_err());
    }
}
