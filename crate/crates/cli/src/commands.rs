//! Command implementations. Each validates its inputs before touching the
//! output directory and returns a JSON summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gazelle_core::backbone::{Backbone, BackboneSpec};
use gazelle_core::checkpoint::Checkpoint;
use gazelle_core::data::{import_gazefollow, import_video_attention_target, save_annotations, RgbFrame, Split};
use gazelle_core::decoder::{DecoderConfig, GazeLle};
use gazelle_core::metrics::{evaluate_detailed, EvalProtocol};
use gazelle_core::pipeline::{GazeModel, GazePipeline};
use gazelle_core::prompting::PromptVariant;
use gazelle_core::trainer::{finetune, train, StepLog, TrainConfig, TrainHistory, TrainOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::ablate;
use crate::bboxes::BoxRequest;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::overlay::render_overlay;
use crate::scaling;
use crate::{
    AblateArgs, BenchArgs, Command, EvaluateArgs, FinetuneArgs, FinetuneProfile, ImportArgs, ImportFormat, PredictArgs,
    ProtocolArg, SplitArg, TrainArgs,
};

pub fn execute(command: Command) -> CliResult<Value> {
    match command {
        Command::Import(a) => import(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::missing_file("checkpoint", path));
    }
    Checkpoint::load(path).map_err(|e| CliError::from(e).with_path(path))
}

fn check_width(ck: &Checkpoint, spec: &BackboneSpec) -> CliResult<()> {
    if ck.d_f != spec.d_f {
        return Err(CliError::usage(
            "checkpoint_mismatch",
            format!("checkpoint expects {}-channel features, backbone `{}` gives {}", ck.d_f, spec.name, spec.d_f),
        ));
    }
    Ok(())
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime("io", format!("cannot create {}: {e}", dir.display())).with_path(dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn import(a: ImportArgs) -> CliResult<Value> {
    let split = split_of(a.split);
    let (annotations, image_root) = match a.format {
        ImportFormat::Gazefollow => {
            if !a.input.is_file() {
                return Err(CliError::missing_file("annotation CSV", &a.input));
            }
            let root = a
                .image_root
                .clone()
                .unwrap_or_else(|| a.input.parent().map(Path::to_path_buf).unwrap_or_default());
            (import_gazefollow(&a.input, &root, split)?, root)
        }
        ImportFormat::VideoAttentionTarget => {
            if !a.input.is_dir() {
                return Err(CliError::missing_file("dataset root", &a.input));
            }
            (import_video_attention_target(&a.input, split)?, a.input.clone())
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out_dir(parent)?;
    }
    save_annotations(&a.out, &annotations)?;
    Ok(json!({
        "command": "import",
        "records": annotations.len(),
        "in_frame": annotations.iter().filter(|r| r.in_frame).count(),
        "image_root": path_str(&image_root),
        "out": path_str(&a.out),
    }))
}

fn progress(total_hint: usize) -> Box<dyn FnMut(&StepLog)> {
    let every = (total_hint / 20).max(1);
    Box::new(move |s: &StepLog| {
        if s.step.is_multiple_of(every) {
            log::info!("step {} epoch {} lr {:.3e} loss {:.5}", s.step, s.epoch, s.lr, s.loss);
        }
    })
}

fn train_summary(command: &str, cfg: &RunConfig, history: &TrainHistory) -> Value {
    let losses = history.losses();
    json!({
        "command": command,
        "steps": losses.len(),
        "first_loss": losses.first(),
        "final_loss": losses.last(),
        "checkpoint": path_str(&cfg.out_dir.join("final.ckpt")),
        "log": path_str(&cfg.out_dir.join("train_log.jsonl")),
    })
}

fn cmd_train(a: TrainArgs) -> CliResult<Value> {
    let cfg = load_config(&a.config, a.out, a.seed)?;
    let dataset = cfg.dataset(Split::Train)?;
    let resume = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        check_width(ck, &cfg.backbone)?;
        if ck.decoder != cfg.decoder {
            return Err(CliError::usage("checkpoint_mismatch", "resume checkpoint was trained with a different decoder config"));
        }
    }
    let backbone = Backbone::load(&cfg.backbone)?;
    let mut model = GazeLle::new(cfg.decoder.clone(), cfg.backbone.d_f, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    create_out_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), &cfg)?;
    let opts = TrainOptions {
        out_dir: Some(cfg.out_dir.clone()),
        resume,
        on_step: Some(progress(cfg.train.total_steps(dataset.len()))),
    };
    let history = train(&mut model, &backbone, &dataset, &cfg.train, opts)?;
    Ok(train_summary("train", &cfg, &history))
}

fn cmd_finetune(a: FinetuneArgs) -> CliResult<Value> {
    let mut cfg = load_config(&a.config, a.out, a.seed)?;
    if let Some(p) = a.profile {
        let preset = match p {
            FinetuneProfile::VideoAttentionTarget => TrainConfig::video_attention_target(),
            FinetuneProfile::Childplay => TrainConfig::childplay(),
        };
        cfg.train.epochs = preset.epochs;
        cfg.train.param_groups = preset.param_groups;
        cfg.train.loss = preset.loss;
        cfg.train.validate()?;
    }
    if cfg.train.param_groups.is_empty() {
        return Err(CliError::usage(
            "invalid_config",
            "finetuning needs `train.param_groups` or --profile",
        ));
    }
    let dataset = cfg.dataset(Split::Train)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    check_width(&ck, &cfg.backbone)?;
    let backbone = Backbone::load(&cfg.backbone)?;
    let mut model = GazeLle::new(cfg.decoder.clone(), cfg.backbone.d_f, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let fresh = ck.load_params_into(&mut model).map_err(|e| CliError::from(e).with_path(&a.checkpoint))?;
    if !fresh.is_empty() {
        log::info!("newly initialized: {}", fresh.join(", "));
    }
    create_out_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), &cfg)?;
    let opts = TrainOptions {
        out_dir: Some(cfg.out_dir.clone()),
        resume: None,
        on_step: Some(progress(cfg.train.total_steps(dataset.len()))),
    };
    let history = finetune(&mut model, &backbone, &dataset, &cfg.train, opts)?;
    let mut summary = train_summary("finetune", &cfg, &history);
    summary["initialized"] = json!(fresh);
    Ok(summary)
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<Value> {
    let mut cfg = load_config(&a.config, a.out, None)?;
    if let Some(p) = a.protocol {
        cfg.eval = match p {
            ProtocolArg::Gazefollow => EvalProtocol::Gazefollow,
            ProtocolArg::Tolerance => EvalProtocol::Tolerance { pixels: a.tolerance },
        };
        cfg.validate()?;
    }
    let dataset = cfg.dataset(Split::Test)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    check_width(&ck, &cfg.backbone)?;
    if ck.backbone.as_ref().is_some_and(|s| s != &cfg.backbone) {
        log::warn!("checkpoint was trained with a different backbone spec than the config names");
    }
    let mut pipeline = GazePipeline::new(Backbone::load(&cfg.backbone)?, ck.build_model()?)?;
    let report = evaluate_detailed(&mut pipeline, &dataset, cfg.eval)?;
    create_out_dir(&cfg.out_dir)?;
    let (json_path, csv_path) = (cfg.out_dir.join("eval.json"), cfg.out_dir.join("samples.csv"));
    report.write_json(&json_path)?;
    report.write_csv(&csv_path)?;
    Ok(json!({
        "command": "evaluate",
        "protocol": cfg.eval,
        "result": report.result,
        "report": path_str(&json_path),
        "samples": path_str(&csv_path),
    }))
}

fn cmd_predict(a: PredictArgs) -> CliResult<Value> {
    let request = a.bboxes.as_deref().map(BoxRequest::parse_arg).transpose()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let spec = match (&a.config, &ck.backbone) {
        (Some(c), _) => RunConfig::load(c)?.backbone,
        (None, Some(s)) => s.clone(),
        (None, None) => {
            return Err(CliError::usage(
                "missing_backbone",
                "checkpoint does not record its backbone; pass --config",
            ))
        }
    };
    check_width(&ck, &spec)?;
    let n_boxes = request.as_ref().map_or(0, BoxRequest::len);
    if n_boxes == 0 && ck.decoder.prompt_variant != PromptVariant::None {
        return Err(CliError::usage("invalid_bbox", "the model is head-prompted; pass at least one box with --bboxes"));
    }
    if !a.image.is_file() {
        return Err(CliError::missing_file("image", &a.image));
    }
    let image = RgbFrame::load(&a.image).map_err(|e| CliError::from(e).with_path(&a.image))?;
    let bboxes = match &request {
        Some(r) => r.resolve(image.width(), image.height())?,
        None => Vec::new(),
    };
    let mut pipeline = GazePipeline::new(Backbone::load(&spec)?, ck.build_model()?)?;

    let before = pipeline.backbone.calls();
    let t = Instant::now();
    let predictions = pipeline.predict(&image, &bboxes)?;
    let compute_ms = t.elapsed().as_secs_f64() * 1e3;
    let backbone_calls = pipeline.backbone.calls() - before;

    create_out_dir(&a.out)?;
    let mut entries = Vec::with_capacity(predictions.len());
    for (k, p) in predictions.iter().enumerate() {
        let heat_path = a.out.join(format!("heatmap_{k:02}.json"));
        let overlay_path = a.out.join(format!("overlay_{k:02}.png"));
        let rows: Vec<Vec<f64>> = p.heatmap.data().rows().into_iter().map(|r| r.to_vec()).collect();
        write_json(&heat_path, &rows)?;
        render_overlay(&image, &p.heatmap, bboxes.get(k)).save(&overlay_path)?;
        let (gx, gy) = p.heatmap.argmax_point();
        entries.push(json!({
            "index": k,
            "bbox": bboxes.get(k),
            "gaze_point": [gx, gy],
            "inout": p.inout.map(|s| s.value()),
            "heatmap": path_str(&heat_path),
            "overlay": path_str(&overlay_path),
        }));
    }
    write_json(&a.out.join("predictions.json"), &entries)?;
    Ok(json!({
        "command": "predict",
        "image": path_str(&a.image),
        "persons": predictions.len(),
        "backbone_calls": backbone_calls,
        "compute_ms": compute_ms,
        "predictions": entries,
    }))
}

fn cmd_ablate(a: AblateArgs) -> CliResult<Value> {
    let cfg = load_config(&a.config, a.out, a.seed)?;
    cfg.require_data(Split::Train)?;
    if cfg.data.test.is_some() {
        cfg.require_data(Split::Test)?;
    }
    let rows = ablate::run_suite(&cfg, a.suite)?;
    create_out_dir(&cfg.out_dir)?;
    let name = a.suite.name();
    let (md_path, json_path) = (cfg.out_dir.join(format!("ablation_{name}.md")), cfg.out_dir.join(format!("ablation_{name}.json")));
    std::fs::write(&md_path, ablate::to_markdown(a.suite, &rows))?;
    write_json(&json_path, &rows)?;
    Ok(json!({
        "command": "ablate",
        "suite": name,
        "rows": rows,
        "markdown": path_str(&md_path),
        "json": path_str(&json_path),
    }))
}

fn cmd_bench(a: BenchArgs) -> CliResult<Value> {
    if a.max_persons == 0 {
        return Err(CliError::usage("usage", "--max-persons must be at least 1"));
    }
    let from_config = a.config.as_deref().map(RunConfig::load).transpose()?;
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let spec = match (&from_config, ck.as_ref().and_then(|c| c.backbone.as_ref())) {
        (Some(c), _) => c.backbone.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => BackboneSpec::toy(),
    };
    let model = match &ck {
        Some(c) => {
            check_width(c, &spec)?;
            c.build_model()?
        }
        None => {
            let decoder = from_config.as_ref().map_or_else(DecoderConfig::default, |c| c.decoder.clone());
            GazeLle::new(decoder, spec.d_f, &mut ChaCha8Rng::seed_from_u64(a.seed))?
        }
    };
    let image = match &a.image {
        Some(p) if !p.is_file() => return Err(CliError::missing_file("image", p)),
        Some(p) => RgbFrame::load(p).map_err(|e| CliError::from(e).with_path(p))?,
        None => RgbFrame::filled(spec.input_size, spec.input_size, [0.5, 0.5, 0.5]),
    };
    let mut pipeline = GazePipeline::new(Backbone::load(&spec)?, model)?;
    let counts: Vec<usize> = (1..=a.max_persons).collect();
    let points = scaling::measure(&mut pipeline, &image, &counts, a.repeats)?;
    let ratio = points.last().expect("at least one count").best_ms / points[0].best_ms;
    let summary = json!({
        "command": "bench",
        "backbone": spec.name,
        "points": points,
        "ratio_last_to_first": ratio,
    });
    if let Some(out) = &a.out {
        create_out_dir(out)?;
        write_json(&out.join("bench.json"), &summary)?;
    }
    Ok(summary)
}
