//! Training schedule (fixed-cap epochs, periodic validation, patience-based
//! early stop) and the concrete trainer that drives it.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::data::{batch_samples, SegmentationSample};
use crate::error::{Error, Result};
use crate::loss::deep_supervised_loss;
use crate::metrics::{compute_metrics, Mask, SampleMetrics};
use crate::net::DmadsNet;
use crate::nn::{Binder, ParameterStore};
use crate::optim::{Adam, AdamParams};
use crate::tensor::Graph;

/// Epoch cap, validation cadence and patience, all counted in epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub max_epochs: u32,
    pub eval_every: u32,
    pub patience: u32,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_epochs: 400,
            eval_every: 10,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// No improvement for at least `patience` epochs at a validation check.
    Patience,
    /// Ran through the full epoch cap.
    MaxEpochs,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleOutcome {
    pub stopped_at: u32,
    pub best_epoch: u32,
    pub best_metric: f64,
    pub reason: StopReason,
}

/// The pieces of work the schedule sequences. Implemented by the real
/// trainer below and by simulated drivers in tests.
pub trait ScheduleDriver {
    type Error;

    fn train_epoch(&mut self, epoch: u32) -> std::result::Result<(), Self::Error>;
    /// Called at epochs divisible by `eval_every`; returns the selection
    /// metric (higher is better).
    fn validate(&mut self, epoch: u32) -> std::result::Result<f64, Self::Error>;
    /// Called when `validate` strictly improved on the best so far.
    fn improved(&mut self, _epoch: u32, _metric: f64) -> std::result::Result<(), Self::Error> {
        Ok(())
    }
}

/// Run epochs up to the cap, validating every `eval_every` epochs and
/// stopping at the first check at least `patience` epochs past the last
/// improvement.
pub fn run_schedule<D: ScheduleDriver>(
    schedule: &TrainSchedule,
    driver: &mut D,
) -> std::result::Result<ScheduleOutcome, D::Error> {
    assert!(schedule.max_epochs >= 1 && schedule.eval_every >= 1);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0u32;
    for epoch in 1..=schedule.max_epochs {
        driver.train_epoch(epoch)?;
        if epoch % schedule.eval_every != 0 {
            continue;
        }
        let metric = driver.validate(epoch)?;
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            driver.improved(epoch, metric)?;
        } else if epoch - best_epoch >= schedule.patience {
            return Ok(ScheduleOutcome {
                stopped_at: epoch,
                best_epoch,
                best_metric,
                reason: StopReason::Patience,
            });
        }
    }
    Ok(ScheduleOutcome {
        stopped_at: schedule.max_epochs,
        best_epoch,
        best_metric,
        reason: StopReason::MaxEpochs,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub adam: AdamParams,
    pub batch_size: usize,
    pub schedule: TrainSchedule,
    /// Where the best checkpoint goes on each improvement, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            adam: AdamParams::default(),
            batch_size: 4,
            schedule: TrainSchedule::default(),
            checkpoint_path: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub outcome: ScheduleOutcome,
    pub optimizer_steps: u64,
}

/// Line-delimited structured log records.
#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord<'a> {
    Epoch {
        epoch: u32,
        steps: u64,
        mean_loss: f64,
    },
    Validation {
        epoch: u32,
        dice: f64,
        iou: f64,
        precision: f64,
        recall: f64,
    },
    Best {
        epoch: u32,
        dice: f64,
    },
    Done {
        stopped_at: u32,
        best_epoch: u32,
        /// Absent when no validation ever ran (cap below the eval cadence).
        best_dice: Option<f64>,
        reason: &'a str,
    },
}

struct Trainer<'a> {
    net: &'a DmadsNet,
    store: &'a mut ParameterStore<f32>,
    train_set: &'a [SegmentationSample],
    val_set: &'a [SegmentationSample],
    opts: &'a TrainOptions,
    adam: Adam<f32>,
    steps: u64,
    log: &'a mut dyn Write,
}

impl Trainer<'_> {
    fn write_record(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("log record serializes");
        writeln!(self.log, "{line}")?;
        Ok(())
    }
}

impl ScheduleDriver for Trainer<'_> {
    type Error = Error;

    fn train_epoch(&mut self, epoch: u32) -> Result<()> {
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.net.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0u64;
        for chunk in order.chunks(self.opts.batch_size.max(1)) {
            let samples: Vec<&SegmentationSample> =
                chunk.iter().map(|&i| &self.train_set[i]).collect();
            let (images, masks) = batch_samples(&samples)?;

            let named_grads;
            let loss_value;
            {
                let g = Graph::new();
                let binder = Binder::new(&g, self.store);
                let out = self.net.forward(&binder, g.input(images))?;
                let lb =
                    deep_supervised_loss(&g, &out, &masks, self.net.cfg.theta, self.net.cfg.loss_kind)?;
                loss_value = g.value(lb.total).item() as f64;
                if !loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: self.steps + 1,
                    });
                }
                let grads = g.backward(lb.total)?;
                named_grads = binder.gradients(&grads);
            }
            self.adam.step(self.store, &named_grads)?;
            self.steps += 1;
            batches += 1;
            loss_sum += loss_value;
        }
        if batches == 0 {
            return Err(Error::Train {
                reason: "empty training set".to_string(),
            });
        }
        self.write_record(&LogRecord::Epoch {
            epoch,
            steps: self.steps,
            mean_loss: loss_sum / batches as f64,
        })
    }

    fn validate(&mut self, epoch: u32) -> Result<f64> {
        let metrics = evaluate_samples(self.net, self.store, self.val_set)?;
        self.write_record(&LogRecord::Validation {
            epoch,
            dice: metrics.dice,
            iou: metrics.iou,
            precision: metrics.precision,
            recall: metrics.recall,
        })?;
        Ok(metrics.dice)
    }

    fn improved(&mut self, epoch: u32, metric: f64) -> Result<()> {
        if let Some(path) = &self.opts.checkpoint_path {
            save_checkpoint(self.store, &self.net.cfg, path)?;
        }
        self.write_record(&LogRecord::Best {
            epoch,
            dice: metric,
        })
    }
}

/// Mean metrics of the network over a sample set (prediction binarized at
/// probability 0.5).
pub fn evaluate_samples(
    net: &DmadsNet,
    store: &ParameterStore<f32>,
    samples: &[SegmentationSample],
) -> Result<SampleMetrics> {
    if samples.is_empty() {
        return Err(Error::Train {
            reason: "empty evaluation set".to_string(),
        });
    }
    let mut acc = SampleMetrics {
        dice: 0.0,
        iou: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    for sample in samples {
        let g = Graph::new();
        let binder = Binder::new(&g, store);
        let out = net.forward(&binder, g.input(sample.image.clone()))?;
        let pred = Mask::from_logits(&g.value(out.final_map))?;
        let (_, m) = compute_metrics(&pred, &sample.mask)?;
        acc.dice += m.dice;
        acc.iou += m.iou;
        acc.precision += m.precision;
        acc.recall += m.recall;
    }
    let n = samples.len() as f64;
    acc.dice /= n;
    acc.iou /= n;
    acc.precision /= n;
    acc.recall /= n;
    Ok(acc)
}

/// Train on `train_set`, validating on `val_set` per the schedule; returns
/// the outcome and leaves the *final* parameters in `store` (the best ones
/// are in the checkpoint, when a path was given).
pub fn train(
    net: &DmadsNet,
    store: &mut ParameterStore<f32>,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Train {
            reason: "training and validation sets must be non-empty".to_string(),
        });
    }
    let mut trainer = Trainer {
        net,
        store,
        train_set,
        val_set,
        opts,
        adam: Adam::new(opts.adam),
        steps: 0,
        log,
    };
    let outcome = run_schedule(&opts.schedule, &mut trainer)?;
    let steps = trainer.steps;
    trainer.write_record(&LogRecord::Done {
        stopped_at: outcome.stopped_at,
        best_epoch: outcome.best_epoch,
        best_dice: (outcome.best_epoch > 0).then_some(outcome.best_metric),
        reason: outcome.reason.as_str(),
    })?;
    Ok(TrainReport {
        outcome,
        optimizer_steps: steps,
    })
}
