//! Subcommand implementations.

use std::fs;
use std::path::Path;

use serde::Serialize;

use dmads_core::checkpoint::{load_checkpoint, save_checkpoint};
use dmads_core::metrics::{aggregate_report, compute_metrics, SampleReport};
use dmads_core::nn::Binder;
use dmads_core::overlay::render_overlay;
use dmads_core::train::{train as train_loop, TrainOptions};
use dmads_core::{DmadsNet, Graph, Mask, ModelConfig, ParameterStore};

use crate::config::RunConfig;
use crate::dataset;
use crate::CliError;

/// Report schema written by `eval`. Desk-scale numbers: the note marks them
/// as non-comparable to published benchmark tables.
#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    note: &'static str,
    mean: dmads_core::SampleMetrics,
    per_sample: Vec<SampleReport>,
}

const EVAL_NOTE: &str = "desk-scale evaluation on a local split; \
not comparable to published benchmark tables";

pub fn train(config_path: &Path) -> Result<(), CliError> {
    let text = dataset::read_to_string(config_path)?;
    let cfg = RunConfig::parse(&text).map_err(CliError::Usage)?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let samples = dataset::load_dataset(&cfg.data_dir, cfg.model.image_size)?;
    let (train_set, val_set) = dataset::split_train_val(samples, cfg.model.seed);

    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let ckpt_path = cfg.out_dir.join("best.ckpt");
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Data(e.to_string()))?;

    let (net, mut store) = DmadsNet::init::<f32>(&cfg.model)?;
    let opts = TrainOptions {
        adam: dmads_core::optim::AdamParams::with_lr(cfg.lr),
        batch_size: cfg.batch_size,
        schedule: cfg.schedule,
        checkpoint_path: Some(ckpt_path.clone()),
    };
    let report = train_loop(&net, &mut store, &train_set, &val_set, &opts, &mut log)?;

    // A run whose cap is below the eval cadence never checkpoints; persist
    // the final parameters so `infer` always has something to load.
    if !ckpt_path.exists() {
        save_checkpoint(&store, &cfg.model, &ckpt_path)?;
    }

    println!(
        "trained {} epochs ({} steps), best dice {:.4} at epoch {}; checkpoint: {}",
        report.outcome.stopped_at,
        report.optimizer_steps,
        report.outcome.best_metric.max(0.0),
        report.outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(DmadsNet, ParameterStore<f32>, ModelConfig), CliError> {
    dataset::require_file(ckpt)?;
    let (store, cfg) = load_checkpoint::<f32>(ckpt)?;
    let (net, _) = DmadsNet::init::<f32>(&cfg)?;
    Ok((net, store, cfg))
}

pub fn infer(ckpt: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let (net, store, cfg) = load_model(ckpt)?;
    dataset::require_file(input)?;
    let image = dataset::load_image_tensor(input, cfg.image_size)?;

    let g = Graph::new();
    let binder = Binder::new(&g, &store);
    let out = net.forward(&binder, g.input(image))?;
    let mask = Mask::from_logits(&g.value(out.final_map))?;
    dataset::save_mask_png(output, &mask)?;
    println!(
        "wrote {} ({} positive of {} pixels)",
        output.display(),
        mask.positives(),
        cfg.image_size * cfg.image_size
    );
    Ok(())
}

pub fn eval(pred_dir: &Path, gt_dir: &Path, report_path: &Path) -> Result<(), CliError> {
    let stems = dataset::png_stems(pred_dir)?;
    if stems.is_empty() {
        return Err(CliError::Data(format!(
            "no PNG predictions under '{}'",
            pred_dir.display()
        )));
    }
    let mut per_sample = Vec::with_capacity(stems.len());
    for stem in &stems {
        let gt_path = gt_dir.join(format!("{stem}.png"));
        if !gt_path.is_file() {
            return Err(CliError::Data(format!("missing ground truth for '{stem}'")));
        }
        let pred = dataset::load_mask(&pred_dir.join(format!("{stem}.png")), None)?;
        let gt = dataset::load_mask(&gt_path, None)?;
        let (counts, metrics) =
            compute_metrics(&pred, &gt).map_err(|e| CliError::Data(format!("{stem}: {e}")))?;
        per_sample.push(SampleReport {
            id: stem.clone(),
            counts,
            metrics,
        });
    }
    let aggregated = aggregate_report(per_sample);
    let report = EvalReport {
        schema_version: 1,
        note: EVAL_NOTE,
        mean: aggregated.mean,
        per_sample: aggregated.per_sample,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    dataset::write_atomic(report_path, json.as_bytes())?;
    println!(
        "evaluated {} samples: mean dice {:.4}, iou {:.4}",
        report.per_sample.len(),
        report.mean.dice,
        report.mean.iou
    );
    Ok(())
}

pub fn overlay(
    pred_path: &Path,
    gt_path: &Path,
    image_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let pred = dataset::load_mask(pred_path, None)?;
    let gt = dataset::load_mask(gt_path, None)?;
    let base = match image_path {
        Some(p) => Some(dataset::load_rgb_buffer(p, pred.dims())?),
        None => None,
    };
    let rendered = render_overlay(&pred, &gt, base.as_ref())?;
    dataset::save_rgb_png(out, &rendered)?;
    Ok(())
}

pub fn synth(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<(), CliError> {
    dataset::generate_synthetic(out_dir, count, size, seed)?;
    println!("wrote {count} pairs of {size}x{size} under {}", out_dir.display());
    Ok(())
}

pub fn inspect(ckpt: &Path) -> Result<(), CliError> {
    let (net, store, cfg) = load_model(ckpt)?;
    let params = store.total_elements();
    println!("parameters: {params} ({:.2}M)", params as f64 / 1e6);
    let macs = net.estimate_macs();
    println!(
        "macs at {0}x{0} (one image): {macs} ({1:.2} GMac)",
        cfg.image_size,
        macs as f64 / 1e9
    );
    if cfg.image_size != 256 {
        let at256 = ModelConfig {
            image_size: 256,
            ..cfg.clone()
        };
        let (net256, _) = DmadsNet::init::<f32>(&at256)?;
        println!(
            "macs at 256x256 (one image): {} ({:.2} GMac)",
            net256.estimate_macs(),
            net256.estimate_macs() as f64 / 1e9
        );
    }
    Ok(())
}
