use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::prompting::PromptVariant;

/// Hidden width of the in/out classification MLP.
pub const INOUT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderHead {
    /// Transposed conv (×2) then 1×1 conv, on the scene tokens.
    #[default]
    Conv2,
    /// Scene tokens dotted with the updated position token.
    DotProduct,
    /// MLP regression from the position token and pooled scene tokens.
    Mlp,
}

/// How a position token takes part in attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenAttention {
    /// Full self-attention over scene tokens and the position token.
    #[default]
    #[serde(rename = "self")]
    SelfAttention,
    /// Scene tokens attend among themselves; the position token reads from the
    /// scene tokens and is the only token it updates.
    Cross,
}

/// Every architectural choice of the gaze decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub prompt_variant: PromptVariant,
    pub token_attention: TokenAttention,
    /// 1-based index of the transformer layer the prompt is injected before.
    pub prompt_layer: usize,
    pub use_task_token: bool,
    pub decoder_head: DecoderHead,
    pub drop_path_p: f64,
    pub out_height: usize,
    pub out_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            num_layers: 3,
            num_heads: 8,
            mlp_dim: 1024,
            prompt_variant: PromptVariant::AddedEmbedding,
            token_attention: TokenAttention::SelfAttention,
            prompt_layer: 1,
            use_task_token: false,
            decoder_head: DecoderHead::Conv2,
            drop_path_p: 0.1,
            out_height: 64,
            out_width: 64,
        }
    }
}

impl DecoderConfig {
    /// Default architecture with the in/out task token enabled.
    pub fn with_inout() -> Self {
        Self {
            use_task_token: true,
            ..Self::default()
        }
    }

    /// One of the head-position-token configurations (task token off).
    pub fn position_token(attention: TokenAttention, head: DecoderHead) -> Self {
        Self {
            prompt_variant: PromptVariant::PositionToken,
            token_attention: attention,
            decoder_head: head,
            ..Self::default()
        }
    }

    /// Every position-token configuration: cross/self attention combined with
    /// the heads each supports.
    pub fn position_token_rows() -> Vec<(String, DecoderConfig)> {
        use DecoderHead::*;
        use TokenAttention::*;
        [(Cross, Mlp), (Cross, DotProduct), (SelfAttention, Mlp), (SelfAttention, DotProduct), (SelfAttention, Conv2)]
            .into_iter()
            .map(|(a, h)| {
                let attn = if a == Cross { "cross" } else { "self" };
                let head = match h {
                    Conv2 => "conv",
                    DotProduct => "dot",
                    Mlp => "mlp",
                };
                (format!("token/{attn}/{head}"), Self::position_token(a, h))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            problems.push(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            problems.push(format!("d_model {} not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".into());
        }
        if self.mlp_dim == 0 {
            problems.push("mlp_dim must be positive".into());
        }
        if self.prompt_layer == 0 || self.prompt_layer > self.num_layers {
            problems.push(format!(
                "prompt_layer {} outside 1..={}",
                self.prompt_layer, self.num_layers
            ));
        }
        if matches!(self.decoder_head, DecoderHead::DotProduct | DecoderHead::Mlp)
            && self.prompt_variant != PromptVariant::PositionToken
        {
            problems.push(format!("{:?} head requires the position_token prompt", self.decoder_head));
        }
        if self.prompt_variant == PromptVariant::PositionToken && self.use_task_token {
            problems.push("the task token is not supported with the position_token prompt".into());
        }
        if self.token_attention == TokenAttention::Cross {
            if self.prompt_variant != PromptVariant::PositionToken {
                problems.push("cross attention requires the position_token prompt".into());
            } else if self.decoder_head == DecoderHead::Conv2 {
                problems.push("cross attention leaves scene tokens prompt-free; use a dot_product or mlp head".into());
            }
        }
        if !(0.0..1.0).contains(&self.drop_path_p) {
            problems.push(format!("drop_path_p {} outside [0, 1)", self.drop_path_p));
        }
        if self.out_height == 0 || self.out_width == 0 {
            problems.push("output heatmap size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GazeError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Learnable scalars in projection, prompt, transformer, and heads for a decoder
/// fed `d_f`-channel backbone features. The backbone itself is excluded.
pub fn count_parameters(config: &DecoderConfig, d_f: usize) -> usize {
    let d = config.d_model;
    let m = config.mlp_dim;
    let projection = d_f * d + d;
    let prompt = match config.prompt_variant {
        PromptVariant::AddedEmbedding | PromptVariant::PositionToken => d,
        PromptVariant::None => 0,
    };
    let task = if config.use_task_token { d } else { 0 };
    let per_layer = 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
    let heatmap = match config.decoder_head {
        DecoderHead::Conv2 => (4 * d * d + d) + (d + 1),
        DecoderHead::DotProduct => 0,
        DecoderHead::Mlp => {
            let out = config.out_height * config.out_width;
            (2 * d * d + d) + (d * out + out)
        }
    };
    let inout = if config.use_task_token {
        d * INOUT_HIDDEN + INOUT_HIDDEN + INOUT_HIDDEN + 1
    } else {
        0
    };
    projection + prompt + task + config.num_layers * per_layer + heatmap + inout
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_matches_reported_sizes() {
        let c = DecoderConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d_model, c.num_layers, c.num_heads, c.mlp_dim), (256, 3, 8, 1024));
        assert_eq!((c.out_height, c.out_width), (64, 64));
        assert_eq!(c.prompt_layer, 1);
        assert_eq!(c.drop_path_p, 0.1);
    }

    #[test]
    fn position_token_rows_are_valid_and_distinct() {
        let rows = DecoderConfig::position_token_rows();
        assert_eq!(rows.len(), 5);
        for (_, c) in &rows {
            c.validate().unwrap();
        }
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i].1, rows[j].1);
            }
        }
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let bad = [
            DecoderConfig {
                num_heads: 7,
                ..Default::default()
            },
            DecoderConfig {
                prompt_layer: 4,
                ..Default::default()
            },
            DecoderConfig {
                prompt_layer: 0,
                ..Default::default()
            },
            DecoderConfig {
                decoder_head: DecoderHead::DotProduct,
                ..Default::default()
            },
            DecoderConfig::position_token(TokenAttention::Cross, DecoderHead::Conv2),
            DecoderConfig {
                use_task_token: true,
                ..DecoderConfig::position_token(TokenAttention::SelfAttention, DecoderHead::Mlp)
            },
            DecoderConfig {
                drop_path_p: 1.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn position_token_variants_validate() {
        for (a, h) in [
            (TokenAttention::Cross, DecoderHead::Mlp),
            (TokenAttention::Cross, DecoderHead::DotProduct),
            (TokenAttention::SelfAttention, DecoderHead::Mlp),
            (TokenAttention::SelfAttention, DecoderHead::DotProduct),
            (TokenAttention::SelfAttention, DecoderHead::Conv2),
        ] {
            DecoderConfig::position_token(a, h).validate().unwrap();
        }
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let c = DecoderConfig::position_token(TokenAttention::Cross, DecoderHead::DotProduct);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"token_attention\":\"cross\""));
        assert_eq!(serde_json::from_str::<DecoderConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<DecoderConfig>(r#"{"d_modle": 3}"#).is_err());
        let partial: DecoderConfig = serde_json::from_str(r#"{"num_layers": 1}"#).unwrap();
        assert_eq!(partial.num_layers, 1);
        assert_eq!(partial.d_model, 256);
    }
}
