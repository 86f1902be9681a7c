//! The run document: one JSON file describing backbone, decoder, training,
//! data and evaluation settings.

use std::path::{Path, PathBuf};

use gazelle_core::backbone::{BackboneKind, BackboneSpec, VitArch};
use gazelle_core::data::{AnnotationFormat, Dataset, Split};
use gazelle_core::decoder::DecoderConfig;
use gazelle_core::metrics::EvalProtocol;
use gazelle_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: AnnotationFormat,
    /// Annotation file for `train`, `finetune` and `ablate`.
    pub train: Option<PathBuf>,
    /// Annotation file for `evaluate` and `ablate`.
    pub test: Option<PathBuf>,
    /// Directory image ids are resolved against; defaults to the annotation
    /// file's directory.
    pub image_root: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: AnnotationFormat::GazefollowJson,
            train: None,
            test: None,
            image_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSpec,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalProtocol,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::vit(BackboneKind::Dinov2, VitArch::Base),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalProtocol::Gazefollow,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses and validates a config file. Data, weight and output paths are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.is_file() {
            return Err(CliError::missing_file("config file", path));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage("unreadable_config", e.to_string()).with_path(path))?;
        let mut cfg = Self::from_json(&text).map_err(|e| {
            CliError::usage("invalid_config", format!("{}:{}: {e}", path.display(), e.line())).with_path(path)
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.data.train);
        rebase(&mut cfg.data.test);
        rebase(&mut cfg.data.image_root);
        rebase(&mut cfg.backbone.weights);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        if let EvalProtocol::Tolerance { pixels } = self.eval {
            if !(pixels >= 0.0 && pixels.is_finite()) {
                return Err(CliError::usage("invalid_config", format!("eval tolerance {pixels} must be non-negative")));
            }
        }
        if let Some(w) = &self.backbone.weights {
            if !w.is_file() {
                return Err(CliError::missing_file("backbone weights", w));
            }
        }
        Ok(())
    }

    fn data_path(&self, split: Split) -> CliResult<&Path> {
        let (key, path) = match split {
            Split::Train => ("data.train", &self.data.train),
            Split::Test => ("data.test", &self.data.test),
        };
        let path = path
            .as_deref()
            .ok_or_else(|| CliError::usage("missing_data", format!("config has no `{key}` annotation file")))?;
        if !path.is_file() {
            return Err(CliError::missing_file("annotation file", path));
        }
        Ok(path)
    }

    /// Checks that the annotation file for `split` exists.
    pub fn require_data(&self, split: Split) -> CliResult<()> {
        self.data_path(split).map(|_| ())
    }

    /// Loads the records of `split` from its annotation file.
    pub fn dataset(&self, split: Split) -> CliResult<Dataset> {
        let path = self.data_path(split)?;
        let ds = Dataset::load(path, self.data.format, self.data.image_root.as_deref())
            .map_err(|e| CliError::from(e).with_path(path))?
            .filter_split(split);
        if ds.is_empty() {
            return Err(CliError::usage("empty_split", format!("{} holds no {split:?} records", path.display())).with_path(path));
        }
        Ok(ds)
    }
}
