//! Optimization loop for the gaze decoder with the scene encoder frozen.

mod optim;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::optim::{cosine_lr, glob_match, inout_split_groups, resolve_groups, Adam, ParamGroup};
use crate::backbone::{Backbone, RawFeatureMap};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentationConfig, Dataset, SampleGeometry, SampleRecord};
use crate::decoder::GazeLle;
use crate::error::{GazeError, Result};
use crate::nn::HasParams;
use crate::targets::{build_target_heatmap, LossWeights, DEFAULT_SIGMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub schedule: Schedule,
    /// Empty means a single group holding every parameter at `lr_init`.
    pub param_groups: Vec<ParamGroup>,
    pub seed: u64,
    pub loss: LossWeights,
    pub augmentation: AugmentationConfig,
    pub sigma: f64,
    /// Stops early after this many optimizer steps; the schedule spans the
    /// shorter of the two horizons.
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
    /// Budget for keeping backbone features in memory when augmentation is off.
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 60,
            lr_init: 1e-3,
            schedule: Schedule::Cosine,
            param_groups: Vec::new(),
            seed: 0,
            loss: LossWeights::default(),
            augmentation: AugmentationConfig::default(),
            sigma: DEFAULT_SIGMA,
            max_steps: None,
            checkpoint_every: None,
            feature_cache_mb: 1024,
        }
    }
}

impl TrainConfig {
    /// In/out parameters at 1e-2, the rest at 1e-5, λ = 1, 8 epochs.
    pub fn video_attention_target() -> Self {
        Self {
            epochs: 8,
            param_groups: inout_split_groups(1e-2, 1e-5),
            loss: LossWeights::video_attention_target(),
            ..Self::default()
        }
    }

    /// In/out parameters at 2e-4, the rest at 1e-4, λ = 0.1, 3 epochs.
    pub fn childplay() -> Self {
        Self {
            epochs: 3,
            param_groups: inout_split_groups(2e-4, 1e-4),
            loss: LossWeights::childplay(),
            ..Self::default()
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        if self.param_groups.is_empty() {
            vec![ParamGroup::all(self.lr_init)]
        } else {
            self.param_groups.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            problems.push(format!("lr_init {} must be positive", self.lr_init));
        }
        if let Some(g) = self.param_groups.iter().find(|g| !(g.lr > 0.0 && g.lr.is_finite())) {
            problems.push(format!("group `{}` lr {} must be positive", g.name, g.lr));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            problems.push(format!("sigma {} must be positive", self.sigma));
        }
        if self.checkpoint_every == Some(0) {
            problems.push("checkpoint_every must be positive".to_string());
        }
        if let Err(e) = self.augmentation.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = LossWeights::new(self.loss.lambda) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GazeError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let per_epoch = n_samples.div_ceil(self.batch_size);
        let full = self.epochs * per_epoch;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_heatmap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_inout: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepLog>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `train_log.jsonl`, periodic and final checkpoints and any
    /// non-finite-loss dump.
    pub out_dir: Option<PathBuf>,
    /// Continues from a saved step; parameters, moments and random state are restored.
    pub resume: Option<Checkpoint>,
    pub on_step: Option<Box<dyn FnMut(&StepLog) + 'a>>,
}

struct FeatureCache {
    budget: usize,
    used: usize,
    map: HashMap<String, RawFeatureMap>,
}

impl FeatureCache {
    fn get_or_extract(&mut self, backbone: &Backbone, dataset: &Dataset, image_id: &str) -> Result<RawFeatureMap> {
        if let Some(f) = self.map.get(image_id) {
            return Ok(f.clone());
        }
        let img = dataset.image(image_id)?;
        let f = backbone.extract(&img.to_tensor(backbone.spec()))?;
        let size = f.tokens().len() * 4;
        if self.used + size <= self.budget {
            self.used += size;
            self.map.insert(image_id.to_string(), f.clone());
        }
        Ok(f)
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x0e90c4 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn append_jsonl(path: &Path, entry: &StepLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

/// Trains the decoder; the backbone is only ever read.
///
/// Each step draws a batch from a per-epoch permutation fixed by the seed,
/// averages the multitask loss over its samples and applies one Adam update
/// with per-group cosine-decayed learning rates.
pub fn train(
    model: &mut GazeLle<f32>,
    backbone: &Backbone,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GazeError::EmptyAnnotations);
    }
    if backbone.spec().d_f != model.d_f() {
        return Err(GazeError::shape("backbone feature width", model.d_f(), backbone.spec().d_f));
    }
    let grid = backbone.spec().grid_size();
    let geometry = SampleGeometry::new((grid, grid), model.out_hw(), cfg.sigma);
    let names = model.param_names();
    let groups = cfg.groups();
    let assignment = resolve_groups(&names, &groups)?;

    let (mut adam, mut rng, start) = match opts.resume.take() {
        Some(ck) => {
            let missing = ck.load_params_into(model)?;
            if !missing.is_empty() {
                return Err(GazeError::Checkpoint(format!("resume lacks {}", missing.join(", "))));
            }
            let rng = ck.rng.ok_or_else(|| GazeError::Checkpoint("resume needs random state".into()))?;
            (ck.optimizer.unwrap_or_default(), rng, ck.step)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            (Adam::new(), rng, 0)
        }
    };

    let n = dataset.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.total_steps(n);
    if start > total {
        return Err(GazeError::Checkpoint(format!("resume step {start} beyond schedule end {total}")));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let log_path = opts.out_dir.as_ref().map(|d| d.join("train_log.jsonl"));
    if let (Some(p), 0) = (&log_path, start) {
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let fingerprint = backbone.fingerprint();
    let mut cache = cfg.augmentation.is_identity().then(|| FeatureCache {
        budget: cfg.feature_cache_mb << 20,
        used: 0,
        map: HashMap::new(),
    });
    let snapshot = serde_json::to_value(cfg)?;
    let mut history = TrainHistory::default();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;

    for step in start..total {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        let k = step % per_epoch;
        let batch = &order[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(n)];
        let scale = 1.0 / batch.len() as f32;
        model.zero_grad();
        let (mut loss, mut loss_hm, mut loss_io, mut any_io) = (0.0, 0.0, 0.0, false);
        for &i in batch {
            let ann = &dataset.annotations[i];
            let (raw, target, bbox, in_frame) = match cache.as_mut() {
                Some(c) => {
                    let raw = c.get_or_extract(backbone, dataset, &ann.image_id)?;
                    let target = build_target_heatmap(ann.target_point().as_ref(), geometry.out.0, geometry.out.1, cfg.sigma)?;
                    (raw, target, ann.bbox, ann.in_frame)
                }
                None => {
                    let sample = SampleRecord::new(dataset.image(&ann.image_id)?, ann.clone(), &geometry)?;
                    let s = augment(&sample, &cfg.augmentation, &mut rng, &geometry)?;
                    let raw = backbone.extract(&s.image.to_tensor(backbone.spec()))?;
                    (raw, s.target, s.annotation.bbox, s.annotation.in_frame)
                }
            };
            let ctx = model.encode_scene(&raw, Some(&mut rng))?;
            let (out, pcache) = model.decode_person(&ctx, Some(&bbox), Some(&mut rng))?;
            let lg = crate::targets::loss_grad(&out, &target, Some(in_frame), cfg.loss)?;
            loss += lg.total;
            loss_hm += lg.heatmap;
            if let Some(v) = lg.inout {
                loss_io += v;
                any_io = true;
            }
            let d_hm = lg.d_heatmap * scale;
            model.backward(&ctx, &pcache, d_hm.view(), lg.d_inout.map(|g| g * scale))?;
        }
        let b = batch.len() as f64;
        let lrs_by_group = groups
            .iter()
            .map(|g| cosine_lr(step, total, g.lr))
            .collect::<Result<Vec<f64>>>()?;
        let entry = StepLog {
            step,
            epoch,
            lr: lrs_by_group[0],
            loss: loss / b,
            loss_heatmap: loss_hm / b,
            loss_inout: any_io.then_some(loss_io / b),
        };
        if !entry.loss.is_finite() {
            let detail = format!(
                "batch {:?}",
                batch.iter().map(|&i| &dataset.annotations[i].image_id).collect::<Vec<_>>()
            );
            if let Some(dir) = &opts.out_dir {
                let dump = serde_json::json!({ "step": step, "epoch": epoch, "loss": entry.loss.to_string(),
                    "loss_heatmap": entry.loss_heatmap.to_string(), "samples": batch });
                std::fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(GazeError::NonFiniteLoss { step, detail });
        }
        let lrs: Vec<f64> = assignment.iter().map(|&g| lrs_by_group[g]).collect();
        adam.step(model, &lrs)?;
        if let Some(p) = &log_path {
            append_jsonl(p, &entry)?;
        }
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&entry);
        }
        history.steps.push(entry);

        let done = step + 1;
        if (done % per_epoch == 0 || done == total)
            && backbone.fingerprint() != fingerprint {
                return Err(GazeError::InvalidConfig(format!("backbone weights changed during epoch {epoch}")));
            }
        let periodic = cfg.checkpoint_every.is_some_and(|e| done % e == 0);
        if let (Some(dir), true) = (&opts.out_dir, periodic || done == total) {
            let mut ck = Checkpoint::from_model(model, Some(backbone.spec()));
            ck.step = done;
            ck.train = Some(snapshot.clone());
            ck.optimizer = Some(adam.clone());
            ck.rng = Some(rng.clone());
            let name = if done == total { "final.ckpt".to_string() } else { format!("step_{done:06}.ckpt") };
            ck.save(&dir.join(name))?;
        }
    }
    Ok(history)
}

/// Continues training a pretrained decoder with the multitask loss and
/// per-group learning rates. Every parameter must fall in exactly one group.
pub fn finetune(
    model: &mut GazeLle<f32>,
    backbone: &Backbone,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainHistory> {
    if cfg.param_groups.is_empty() {
        return Err(GazeError::InvalidConfig("finetuning needs explicit parameter groups".into()));
    }
    train(model, backbone, dataset, cfg, opts)
}
