//! Schedule semantics driven by simulated validation-metric sequences.

use dmads_core::train::{run_schedule, ScheduleDriver, StopReason, TrainSchedule};

/// Driver that replays a metric function and records what the schedule asked
/// for.
struct Sim<F: Fn(u32) -> f64> {
    metric: F,
    trained: Vec<u32>,
    validated: Vec<u32>,
    improvements: Vec<u32>,
}

impl<F: Fn(u32) -> f64> Sim<F> {
    fn new(metric: F) -> Self {
        Sim {
            metric,
            trained: Vec::new(),
            validated: Vec::new(),
            improvements: Vec::new(),
        }
    }
}

impl<F: Fn(u32) -> f64> ScheduleDriver for Sim<F> {
    type Error = std::convert::Infallible;

    fn train_epoch(&mut self, epoch: u32) -> Result<(), Self::Error> {
        self.trained.push(epoch);
        Ok(())
    }

    fn validate(&mut self, epoch: u32) -> Result<f64, Self::Error> {
        self.validated.push(epoch);
        Ok((self.metric)(epoch))
    }

    fn improved(&mut self, epoch: u32, _metric: f64) -> Result<(), Self::Error> {
        self.improvements.push(epoch);
        Ok(())
    }
}

fn default_schedule() -> TrainSchedule {
    TrainSchedule::default() // 400 epochs, eval every 10, patience 50
}

#[test]
fn improvements_then_stall_stop_at_first_check_past_patience() {
    // Better at epochs 10 and 20, flat afterwards: last improvement at 20,
    // checks at 30..60 are within patience, the check at 70 hits 50 epochs
    // without improvement and stops.
    let mut sim = Sim::new(|epoch| match epoch {
        10 => 0.5,
        20 => 0.6,
        _ => 0.1,
    });
    let outcome = run_schedule(&default_schedule(), &mut sim).unwrap();
    assert_eq!(outcome.stopped_at, 70);
    assert_eq!(outcome.best_epoch, 20);
    assert_eq!(outcome.reason, StopReason::Patience);
    assert_eq!(sim.improvements, vec![10, 20]);
    assert_eq!(sim.trained.len(), 70);
    assert_eq!(sim.validated, vec![10, 20, 30, 40, 50, 60, 70]);
}

#[test]
fn continual_improvement_runs_to_the_epoch_cap() {
    let mut sim = Sim::new(|epoch| epoch as f64);
    let outcome = run_schedule(&default_schedule(), &mut sim).unwrap();
    assert_eq!(outcome.stopped_at, 400);
    assert_eq!(outcome.best_epoch, 400);
    assert_eq!(outcome.reason, StopReason::MaxEpochs);
    assert_eq!(sim.validated.len(), 40);
    assert_eq!(sim.trained.len(), 400);
}

#[test]
fn validation_only_happens_on_the_cadence() {
    let mut sim = Sim::new(|_| 0.0);
    let schedule = TrainSchedule {
        max_epochs: 25,
        eval_every: 10,
        patience: 50,
    };
    let outcome = run_schedule(&schedule, &mut sim).unwrap();
    assert_eq!(sim.validated, vec![10, 20]);
    assert_eq!(outcome.stopped_at, 25);
    assert_eq!(outcome.reason, StopReason::MaxEpochs);
    // A flat metric still counts its first observation as the best.
    assert_eq!(outcome.best_epoch, 10);
}

#[test]
fn single_early_peak_stops_fifty_epochs_later() {
    let mut sim = Sim::new(|epoch| if epoch == 10 { 1.0 } else { 0.0 });
    let outcome = run_schedule(&default_schedule(), &mut sim).unwrap();
    assert_eq!(outcome.stopped_at, 60);
    assert_eq!(outcome.best_epoch, 10);
    assert_eq!(outcome.best_metric, 1.0);
}

#[test]
fn late_improvement_resets_the_patience_window() {
    // Improvements at 10 and 260: the stall from 10 would stop at 60, but an
    // improving run of checks 20..260 keeps it alive; after 260 the stall
    // stops at 310.
    let mut sim = Sim::new(|epoch| {
        if epoch <= 260 {
            epoch as f64
        } else {
            0.0
        }
    });
    let outcome = run_schedule(&default_schedule(), &mut sim).unwrap();
    assert_eq!(outcome.stopped_at, 310);
    assert_eq!(outcome.best_epoch, 260);
    assert_eq!(outcome.reason, StopReason::Patience);
}
