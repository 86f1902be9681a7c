use std::hash::Hasher;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{patchify, BackboneSpec, FeatureMap, ImageTensor, RawFeatureMap};

/// Stand-in encoder: each token is a fixed random linear function of its own
/// patch pixels.
///
/// The map is overcomplete for the default sizes (`3·14·14 = 588 → 768`), so no
/// patch information is lost, and a change to one patch changes one token only.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    patch: usize,
    /// `(d_F, 3·p·p)`
    weight: Array2<f32>,
}

impl ToyBackbone {
    pub fn new(spec: &BackboneSpec) -> Self {
        let fan_in = 3 * spec.patch_size * spec.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = (1.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((spec.d_f, fan_in), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        });
        Self {
            patch: spec.patch_size,
            weight,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    /// The patch projection, `(d_F, 3·p·p)`.
    pub fn weight(&self) -> &Array2<f32> {
        &self.weight
    }

    pub fn forward(&self, image: &ImageTensor) -> RawFeatureMap {
        let patches = patchify(&image.data, self.patch);
        let tokens = patches.dot(&self.weight.t());
        FeatureMap::new(tokens, image.height() / self.patch, image.width() / self.patch)
            .expect("patch grid matches token count")
    }

    pub(super) fn hash_weights(&self, h: &mut impl Hasher) {
        for v in self.weight.iter() {
            h.write_u32(v.to_bits());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;

    #[test]
    fn single_patch_change_is_local() {
        let spec = BackboneSpec::toy().with_d_f(48).with_input_size(112);
        let bb = Backbone::load(&spec).unwrap();
        let mut img = ImageTensor::zeros(112, 112);
        img.data.iter_mut().enumerate().for_each(|(k, v)| *v = ((k % 17) as f32) * 0.1);
        let a = bb.extract(&img).unwrap();
        // patch (2, 5) covers rows 28..42, cols 70..84
        img.data[[1, 30, 71]] += 1.0;
        let b = bb.extract(&img).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let same = a.at(i, j) == b.at(i, j);
                assert_eq!(same, (i, j) != (2, 5), "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn seed_changes_weights() {
        let a = ToyBackbone::new(&BackboneSpec::toy().with_d_f(8));
        let mut spec = BackboneSpec::toy().with_d_f(8);
        spec.seed = 1;
        let b = ToyBackbone::new(&spec);
        assert_ne!(a.weight, b.weight);
        assert_eq!(a.weight, ToyBackbone::new(&BackboneSpec::toy().with_d_f(8)).weight);
    }
}
