//! End-to-end inference: frozen encoder once per image, decoder once per person.

use crate::backbone::{Backbone, RawFeatureMap};
use crate::data::RgbFrame;
use crate::decoder::{GazeHeatmap, GazeLle, InOutScore};
use crate::error::{GazeError, Result};
use crate::prompting::{HeadBBox, PromptVariant};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub heatmap: GazeHeatmap,
    pub inout: Option<InOutScore>,
}

/// Anything that maps an image and a list of head boxes to one prediction per box.
pub trait GazeModel {
    fn predict(&mut self, image: &RgbFrame, bboxes: &[HeadBBox]) -> Result<Vec<Prediction>>;
}

/// Frozen backbone plus gaze decoder.
#[derive(Debug)]
pub struct GazePipeline {
    pub backbone: Backbone,
    pub decoder: GazeLle<f32>,
}

impl GazePipeline {
    pub fn new(backbone: Backbone, decoder: GazeLle<f32>) -> Result<Self> {
        if backbone.spec().d_f != decoder.d_f() {
            return Err(GazeError::shape("pipeline feature width", decoder.d_f(), backbone.spec().d_f));
        }
        Ok(Self { backbone, decoder })
    }

    pub fn features(&self, image: &RgbFrame) -> Result<RawFeatureMap> {
        self.backbone.extract(&image.to_tensor(self.backbone.spec()))
    }

    /// Decodes every box against features already extracted for the image.
    pub fn predict_features(&self, raw: &RawFeatureMap, bboxes: &[HeadBBox]) -> Result<Vec<Prediction>> {
        let wants_box = self.decoder.config().prompt_variant != PromptVariant::None;
        if wants_box && bboxes.is_empty() {
            return Err(GazeError::InvalidBBox("at least one head box is required".into()));
        }
        let boxes: Vec<Option<HeadBBox>> = if bboxes.is_empty() {
            vec![None]
        } else {
            bboxes.iter().copied().map(Some).collect()
        };
        self.decoder
            .forward_many(raw, &boxes)?
            .into_iter()
            .map(|out| {
                Ok(Prediction {
                    heatmap: out.to_heatmap()?,
                    inout: out.to_inout()?,
                })
            })
            .collect()
    }
}

impl GazeModel for GazePipeline {
    fn predict(&mut self, image: &RgbFrame, bboxes: &[HeadBBox]) -> Result<Vec<Prediction>> {
        for b in bboxes {
            b.validate()?;
        }
        if bboxes.is_empty() && self.decoder.config().prompt_variant != PromptVariant::None {
            return Err(GazeError::InvalidBBox("at least one head box is required".into()));
        }
        let raw = self.features(image)?;
        self.predict_features(&raw, bboxes)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::decoder::DecoderConfig;

    fn small() -> GazePipeline {
        let spec = BackboneSpec::toy().with_input_size(112).with_d_f(32);
        let cfg = DecoderConfig {
            d_model: 16,
            num_heads: 2,
            mlp_dim: 32,
            num_layers: 2,
            ..DecoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        GazePipeline::new(Backbone::load(&spec).unwrap(), GazeLle::new(cfg, 32, &mut rng).unwrap()).unwrap()
    }

    #[test]
    fn one_backbone_call_for_many_people() {
        let mut p = small();
        let img = RgbFrame::filled(60, 80, [0.3, 0.5, 0.7]);
        let boxes: Vec<HeadBBox> = (0..10)
            .map(|k| HeadBBox::new(0.05 * k as f64, 0.1, 0.05 * k as f64 + 0.1, 0.3).unwrap())
            .collect();
        let out = p.predict(&img, &boxes).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(p.backbone.calls(), 1);
        assert_eq!(out[0].heatmap.shape(), (64, 64));
        let again = p.predict(&img, &boxes).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn prompting_needs_a_box() {
        let mut p = small();
        let img = RgbFrame::filled(28, 28, [0.0; 3]);
        assert!(matches!(p.predict(&img, &[]), Err(GazeError::InvalidBBox(_))));
        assert_eq!(p.backbone.calls(), 0);
    }
}
