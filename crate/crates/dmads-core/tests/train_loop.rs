//! Training-loop mechanics: structured log, bitwise determinism, abort on
//! non-finite loss, and best-checkpoint persistence.

mod common;

use common::rng;
use dmads_core::checkpoint::load_checkpoint;
use dmads_core::data::SegmentationSample;
use dmads_core::metrics::Mask;
use dmads_core::optim::AdamParams;
use dmads_core::train::{train, TrainOptions, TrainSchedule};
use dmads_core::{DmadsNet, Error, ModelConfig, Shape, Tensor};
use rand::Rng;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        stage_channels: [4, 8, 16],
        seed: 11,
        ..ModelConfig::default()
    }
}

/// Bright quarter-square on a dim noisy background.
fn square_samples(n: usize, seed: u64) -> Vec<SegmentationSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let side = 16;
            let (y0, x0) = (r.gen_range(0..side / 2), r.gen_range(0..side / 2));
            let mask = Mask::new(
                side,
                side,
                (0..side * side)
                    .map(|at| {
                        let (y, x) = (at / side, at % side);
                        (y0..y0 + side / 2).contains(&y) && (x0..x0 + side / 2).contains(&x)
                    })
                    .collect(),
            )
            .unwrap();
            let image = Tensor::from_fn(Shape::new(1, 3, side, side), |at| {
                let plane = at % (side * side);
                let bright = mask.data()[plane];
                let noise: f32 = r.gen_range(0.0..0.15);
                if bright {
                    0.8 + noise
                } else {
                    0.1 + noise
                }
            });
            SegmentationSample::new(image, mask, format!("sq{i}")).unwrap()
        })
        .collect()
}

fn run_once(epochs: u32, ckpt: Option<std::path::PathBuf>) -> (Vec<u8>, u64) {
    let cfg = tiny_cfg();
    let (net, mut store) = DmadsNet::init::<f32>(&cfg).unwrap();
    let samples = square_samples(4, 99);
    let opts = TrainOptions {
        adam: AdamParams::with_lr(1e-3),
        batch_size: 2,
        schedule: TrainSchedule {
            max_epochs: epochs,
            eval_every: 2,
            patience: 50,
        },
        checkpoint_path: ckpt,
    };
    let mut log = Vec::new();
    let report = train(&net, &mut store, &samples, &samples, &opts, &mut log).unwrap();
    (log, report.optimizer_steps)
}

#[test]
fn log_is_line_delimited_json_and_bitwise_deterministic() {
    let (log_a, steps_a) = run_once(4, None);
    let (log_b, steps_b) = run_once(4, None);
    assert_eq!(log_a, log_b, "same seed must reproduce the log bytes");
    assert_eq!(steps_a, steps_b);
    assert_eq!(steps_a, 4 * 2, "4 epochs x 2 batches");

    let text = String::from_utf8(log_a).unwrap();
    let mut kinds = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("each line parses");
        kinds.push(v["type"].as_str().unwrap().to_string());
    }
    // 4 epoch records, validations at 2 and 4, at least one best, one done.
    assert_eq!(kinds.iter().filter(|k| *k == "epoch").count(), 4);
    assert_eq!(kinds.iter().filter(|k| *k == "validation").count(), 2);
    assert!(kinds.iter().any(|k| k == "best"));
    assert_eq!(kinds.last().unwrap(), "done");
}

#[test]
fn best_checkpoint_is_written_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let (_, _) = run_once(2, Some(path.clone()));
    let (store, cfg) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(cfg, tiny_cfg());
    assert!(store.len() > 0);
}

#[test]
fn exploding_learning_rate_aborts_with_a_named_step() {
    let cfg = tiny_cfg();
    let (net, mut store) = DmadsNet::init::<f32>(&cfg).unwrap();
    let samples = square_samples(2, 7);
    let opts = TrainOptions {
        adam: AdamParams::with_lr(1e30),
        batch_size: 1,
        schedule: TrainSchedule {
            max_epochs: 10,
            eval_every: 10,
            patience: 50,
        },
        checkpoint_path: None,
    };
    let mut log = Vec::new();
    match train(&net, &mut store, &samples, &samples, &opts, &mut log) {
        Err(Error::NonFiniteLoss { epoch, step }) => {
            assert!(epoch >= 1 && step >= 1, "diagnostic names epoch {epoch} step {step}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = tiny_cfg();
    let (net, mut store) = DmadsNet::init::<f32>(&cfg).unwrap();
    let samples = square_samples(2, 7);
    let mut log = Vec::new();
    assert!(train(&net, &mut store, &[], &samples, &TrainOptions::default(), &mut log).is_err());
    assert!(train(&net, &mut store, &samples, &[], &TrainOptions::default(), &mut log).is_err());
}
