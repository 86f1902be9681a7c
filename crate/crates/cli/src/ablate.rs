//! Ablation suites: each trains and evaluates a list of model variants on the
//! configured data and reports one row per variant.

use clap::ValueEnum;
use gazelle_core::backbone::Backbone;
use gazelle_core::baselines::{build_baseline, train_baseline, BaselineConfig};
use gazelle_core::data::{Dataset, Split};
use gazelle_core::decoder::{count_parameters, DecoderConfig, GazeLle};
use gazelle_core::metrics::{evaluate, EvalResult};
use gazelle_core::nn::HasParams;
use gazelle_core::pipeline::GazePipeline;
use gazelle_core::prompting::PromptVariant;
use gazelle_core::trainer::{train, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;

pub const DIMS: [usize; 5] = [128, 256, 384, 512, 768];
pub const LAYERS: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    /// Head prompt on vs. off.
    PromptOnoff,
    /// Layer the head prompt is added before.
    PromptLayer,
    /// Decoder width, then decoder depth.
    DimsLayers,
    /// Head integration × decoder type × branches, plus the default model.
    BaselineGrid,
    /// Position-token prompts against the added embedding.
    PromptVariants,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::PromptOnoff => "prompt_onoff",
            Suite::PromptLayer => "prompt_layer",
            Suite::DimsLayers => "dims_layers",
            Suite::BaselineGrid => "baseline_grid",
            Suite::PromptVariants => "prompt_variants",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Decoder(DecoderConfig),
    Baseline(BaselineConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub variant: Variant,
}

fn row(name: impl Into<String>, decoder: DecoderConfig) -> SuiteRow {
    SuiteRow {
        name: name.into(),
        variant: Variant::Decoder(decoder),
    }
}

/// Variants of `suite`, derived from `base` wherever a field is not under study.
pub fn suite_rows(suite: Suite, base: &DecoderConfig) -> Vec<SuiteRow> {
    match suite {
        Suite::PromptOnoff => vec![
            row(
                "prompt off",
                DecoderConfig {
                    prompt_variant: PromptVariant::None,
                    ..base.clone()
                },
            ),
            row(
                "prompt on",
                DecoderConfig {
                    prompt_variant: PromptVariant::AddedEmbedding,
                    ..base.clone()
                },
            ),
        ],
        Suite::PromptLayer => (1..=base.num_layers)
            .map(|l| {
                row(
                    format!("prompt before layer {l}"),
                    DecoderConfig {
                        prompt_layer: l,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Suite::DimsLayers => {
            let dims = DIMS.iter().map(|&d| {
                row(
                    format!("d_model={d}"),
                    DecoderConfig {
                        d_model: d,
                        ..base.clone()
                    },
                )
            });
            let layers = LAYERS.iter().map(|&l| {
                row(
                    format!("layers={l}"),
                    DecoderConfig {
                        num_layers: l,
                        prompt_layer: base.prompt_layer.min(l),
                        ..base.clone()
                    },
                )
            });
            dims.chain(layers).collect()
        }
        Suite::BaselineGrid => BaselineConfig::table_rows()
            .into_iter()
            .map(|(id, c)| SuiteRow {
                name: format!("({id}) {}", c.label()),
                variant: Variant::Baseline(c),
            })
            .chain(std::iter::once(row("default", base.clone())))
            .collect(),
        Suite::PromptVariants => DecoderConfig::position_token_rows()
            .into_iter()
            .map(|(name, c)| {
                row(
                    name,
                    DecoderConfig {
                        out_height: base.out_height,
                        out_width: base.out_width,
                        ..c
                    },
                )
            })
            .chain(std::iter::once(row(
                "embedding/self/conv",
                DecoderConfig {
                    prompt_variant: PromptVariant::AddedEmbedding,
                    use_task_token: false,
                    ..base.clone()
                },
            )))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    pub final_loss: f64,
    pub auc: f64,
    pub avg_l2: f64,
    pub min_l2: f64,
}

impl AblationRow {
    fn new(name: &str, params: usize, final_loss: f64, r: &EvalResult) -> Self {
        Self {
            name: name.to_string(),
            params,
            final_loss,
            auc: r.auc,
            avg_l2: r.avg_l2,
            min_l2: r.min_l2,
        }
    }
}

/// Trains every variant with `cfg.train` on the train split and scores it on
/// the test split, or on the train split when no test file is configured.
pub fn run_suite(cfg: &RunConfig, suite: Suite) -> CliResult<Vec<AblationRow>> {
    let train_set = cfg.dataset(Split::Train)?;
    let test_set = match cfg.data.test {
        Some(_) => cfg.dataset(Split::Test)?,
        None => train_set.clone(),
    };
    let rows = suite_rows(suite, &cfg.decoder);
    for r in &rows {
        match &r.variant {
            Variant::Decoder(d) => d.validate()?,
            Variant::Baseline(b) => b.validate(&cfg.backbone)?,
        }
    }
    rows.iter()
        .map(|r| {
            log::info!("ablation {}: training `{}`", suite.name(), r.name);
            run_row(cfg, r, &train_set, &test_set)
        })
        .collect()
}

fn run_row(cfg: &RunConfig, r: &SuiteRow, train_set: &Dataset, test_set: &Dataset) -> CliResult<AblationRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let backbone = Backbone::load(&cfg.backbone)?;
    match &r.variant {
        Variant::Decoder(d) => {
            let mut model = GazeLle::new(d.clone(), cfg.backbone.d_f, &mut rng)?;
            let history = train(&mut model, &backbone, train_set, &cfg.train, TrainOptions::default())?;
            let params = count_parameters(d, cfg.backbone.d_f);
            let mut pipeline = GazePipeline::new(backbone, model)?;
            let result = evaluate(&mut pipeline, test_set, cfg.eval)?;
            Ok(AblationRow::new(&r.name, params, history.losses().last().copied().unwrap_or(f64::NAN), &result))
        }
        Variant::Baseline(b) => {
            let out_hw = (cfg.decoder.out_height, cfg.decoder.out_width);
            let mut pipeline = build_baseline(*b, backbone, out_hw, &mut rng)?;
            let losses = train_baseline(&mut pipeline, train_set, &cfg.train)?;
            let params = pipeline.model.num_params();
            let result = evaluate(&mut pipeline, test_set, cfg.eval)?;
            Ok(AblationRow::new(&r.name, params, losses.last().copied().unwrap_or(f64::NAN), &result))
        }
    }
}

pub fn to_markdown(suite: Suite, rows: &[AblationRow]) -> String {
    let mut s = format!("### {}\n\n| variant | params | final loss | AUC | Avg L2 | Min L2 |\n|---|---:|---:|---:|---:|---:|\n", suite.name());
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.2}M | {:.4} | {:.3} | {:.3} | {:.3} |\n",
            r.name,
            r.params as f64 / 1e6,
            r.final_loss,
            r.auc,
            r.avg_l2,
            r.min_l2
        ));
    }
    s
}
