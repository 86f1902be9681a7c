//! Fixtures shared by the benchmarks.

use gazelle_core::backbone::{Backbone, BackboneSpec};
use gazelle_core::data::RgbFrame;
use gazelle_core::decoder::{DecoderConfig, GazeHeatmap, GazeLle};
use gazelle_core::pipeline::GazePipeline;
use gazelle_core::prompting::HeadBBox;
use gazelle_core::targets::GazePoint;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy encoder at `input_size` with the default decoder.
pub fn toy_pipeline(input_size: usize) -> GazePipeline {
    let spec = BackboneSpec::toy().with_input_size(input_size);
    let decoder = GazeLle::new(DecoderConfig::default(), spec.d_f, &mut ChaCha8Rng::seed_from_u64(0)).expect("default decoder");
    GazePipeline::new(Backbone::load(&spec).expect("toy backbone"), decoder).expect("matching widths")
}

pub fn noise_frame(size: usize, seed: u64) -> RgbFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = RgbFrame::filled(size, size, [0.0; 3]);
    for r in 0..size {
        for c in 0..size {
            f.set_pixel(r, c, [rng.random(), rng.random(), rng.random()]);
        }
    }
    f
}

/// `n` head boxes along the diagonal.
pub fn boxes(n: usize) -> Vec<HeadBBox> {
    (0..n)
        .map(|k| {
            let t = k as f64 / n.max(1) as f64;
            HeadBBox::new(0.8 * t, 0.8 * t, 0.8 * t + 0.1, 0.8 * t + 0.1).expect("inside the unit square")
        })
        .collect()
}

pub fn random_heatmap(side: usize, seed: u64) -> (GazeHeatmap, Vec<GazePoint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((side, side), |_| rng.random::<f64>());
    let points = (0..10).map(|_| GazePoint::new(rng.random(), rng.random()).expect("unit point")).collect();
    (GazeHeatmap::new(data).expect("probabilities"), points)
}
