use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use swarmnet_nn::{Adam, AdamConfig, Tape};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ModelInput, StgnnModel};
use crate::swarm::{derive_seed, seeded_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub initial_lr: f64,
    /// Learning-rate factor applied after every epoch.
    pub decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Time steps per batch; every robot of a step is a sample.
    pub batch_steps: usize,
    pub seed: u64,
    /// Epoch `e` trains on the steps `t` with `t % stride == e % stride`.
    pub sample_stride: usize,
    /// Validation uses the steps `t` with `t % val_stride == 0`.
    pub val_stride: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 200,
            initial_lr: 1e-3,
            decay: 0.98,
            patience: 10,
            batch_steps: 32,
            seed: 0,
            sample_stride: 1,
            val_stride: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must lie in (0, 1]".into()));
        }
        if self.patience < 1
            || self.batch_steps < 1
            || self.sample_stride < 1
            || self.val_stride < 1
        {
            return Err(Error::Config(
                "patience, batch_steps and strides must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay.powi(epoch as i32)
    }
}

/// `(episode, step)` pairs of a split whose step index is `offset` modulo
/// `stride`.
pub fn split_samples(
    ds: &Dataset,
    split: Split,
    stride: usize,
    offset: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for e in ds.split_indices(split) {
        let steps = ds.episodes[e].steps();
        out.extend((offset % stride..steps).step_by(stride).map(|t| (e, t)));
    }
    out
}

/// Stacks the history windows and labels of the given steps.
pub fn make_batch(
    ds: &Dataset,
    samples: &[(usize, usize)],
    horizon: usize,
) -> Result<(ModelInput<f32>, Array2<f32>)> {
    let windows: Vec<_> = samples
        .iter()
        .map(|&(e, t)| ds.episodes[e].window(t, horizon))
        .collect();
    let input = ModelInput::from_windows(&windows)?;
    let labels: Vec<_> = samples
        .iter()
        .map(|&(e, t)| ds.episodes[e].labels[t].view())
        .collect();
    let labels = concatenate(Axis(0), &labels).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((input, labels))
}

/// Forward and backward pass on one batch; gradients accumulate into the
/// model's parameters. Returns the mean squared error.
pub fn accumulate_batch(
    model: &mut StgnnModel<f32>,
    input: &ModelInput<f32>,
    labels: Array2<f32>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pred = model.record(&mut tape, input)?;
    let loss = tape.mse(pred, labels)?;
    let value = tape.value(loss)[[0, 0]] as f64;
    tape.backward(loss, model.params_mut())?;
    Ok(value)
}

/// One pass over the training split in a seeded random order with one Adam
/// step per batch. Returns the sample-weighted mean squared error.
pub fn train_epoch(
    model: &mut StgnnModel<f32>,
    adam: &mut Adam<f32>,
    ds: &Dataset,
    schedule: &TrainSchedule,
    epoch: usize,
) -> Result<f64> {
    let mut samples = split_samples(ds, Split::Train, schedule.sample_stride, epoch);
    if samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    samples.shuffle(&mut seeded_rng(derive_seed(schedule.seed, epoch as u64)));
    let horizon = model.spec().horizon;
    let (mut total, mut rows) = (0.0, 0usize);
    for chunk in samples.chunks(schedule.batch_steps) {
        let (input, labels) = make_batch(ds, chunk, horizon)?;
        let n = labels.len();
        model.params_mut().zero_grad();
        total += accumulate_batch(model, &input, labels)? * n as f64;
        rows += n;
        adam.step(model.params_mut());
    }
    Ok(total / rows as f64)
}

/// Mean absolute error over samples, robots and axes.
pub fn mean_absolute_error(
    model: &StgnnModel<f32>,
    ds: &Dataset,
    samples: &[(usize, usize)],
) -> Result<f64> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in samples.chunks(64) {
        let (input, labels) = make_batch(ds, chunk, model.spec().horizon)?;
        let pred = model.predict(&input)?;
        total += pred
            .iter()
            .zip(&labels)
            .map(|(p, l)| (p - l).abs() as f64)
            .sum::<f64>();
        count += labels.len();
    }
    if count == 0 {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    Ok(total / count as f64)
}

pub fn validate(model: &StgnnModel<f32>, ds: &Dataset, val_stride: usize) -> Result<f64> {
    mean_absolute_error(model, ds, &split_samples(ds, Split::Val, val_stride, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub best_val_mae: f64,
}

/// Tracks the best validation error and the epochs since it improved.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch; returns whether it set a new best.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: StgnnModel<f32>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Trains with exponential learning-rate decay and early stopping, keeping
/// the parameters with the lowest validation error.
pub fn fit(
    mut model: StgnnModel<f32>,
    ds: &Dataset,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    schedule.validate()?;
    if ds.split_indices(Split::Val).is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            lr: schedule.initial_lr,
            ..AdamConfig::default()
        },
    );
    let mut best = model.clone();
    let mut stop = EarlyStopping::new(schedule.patience);
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        adam.set_lr(lr);
        let train_loss = train_epoch(&mut model, &mut adam, ds, schedule, epoch)?;
        let val_mae = validate(&model, ds, schedule.val_stride)?;
        if stop.observe(epoch, val_mae) {
            best = model.clone();
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_mae,
            best_val_mae: stop.best,
        };
        on_epoch(&entry);
        log.push(entry);
        if stop.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch: stop.best_epoch,
        best_val_mae: stop.best,
        log,
        stopped_early,
    })
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(format!("writing {}", path.display()), e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for entry in log {
        w.serialize(entry).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SwarmConfig;
    use crate::dataset::generate_dataset;
    use crate::model::{ModelSpec, Variant};

    fn tiny_spec(v: Variant, horizon: usize) -> ModelSpec {
        let mut s = ModelSpec::new(v, horizon, 2);
        s.embed_width = 16;
        s.heads = 2;
        s.ff_width = 8;
        s.head_hidden = 16;
        s
    }

    fn tiny_data() -> Dataset {
        let c = SwarmConfig {
            n_robots: 4,
            episode_steps: 40,
            ..SwarmConfig::desk()
        };
        generate_dataset(&c, 2, 1, 3).unwrap()
    }

    #[test]
    fn lr_schedule_closed_form() {
        let s = TrainSchedule::default();
        assert!((s.lr_at(10) - 1e-3 * 0.98f64.powi(10)).abs() < 1e-18);
        assert!((s.lr_at(10) - 8.17e-4).abs() < 1e-6);
    }

    #[test]
    fn stride_partitions_steps() {
        let ds = tiny_data();
        let all = split_samples(&ds, Split::Train, 1, 0).len();
        let parts: usize = (0..3)
            .map(|o| split_samples(&ds, Split::Train, 3, o).len())
            .sum();
        assert_eq!(all, 80);
        assert_eq!(parts, all);
    }

    #[test]
    fn perfect_labels_give_zero_loss_and_grads() {
        let mut ds = tiny_data();
        let mut m = StgnnModel::<f32>::new(tiny_spec(Variant::Stgnn, 1), 0).unwrap();
        let samples = split_samples(&ds, Split::Train, 1, 0);
        for &(e, t) in &samples {
            let (input, _) = make_batch(&ds, &[(e, t)], 1).unwrap();
            ds.episodes[e].labels[t] = m.predict(&input).unwrap();
        }
        let (input, labels) = make_batch(&ds, &samples[..8], 1).unwrap();
        m.params_mut().zero_grad();
        let loss = accumulate_batch(&mut m, &input, labels).unwrap();
        assert_eq!(loss, 0.0);
        assert!(m.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn mae_examples() {
        let mut ds = tiny_data();
        let m = StgnnModel::<f32>::new(tiny_spec(Variant::Tgnn, 0), 1).unwrap();
        let samples = split_samples(&ds, Split::Val, 1, 0);
        for &(e, t) in &samples {
            let (input, _) = make_batch(&ds, &[(e, t)], 0).unwrap();
            ds.episodes[e].labels[t] = m.predict(&input).unwrap() + 1.0;
        }
        let mae = validate(&m, &ds, 1).unwrap();
        assert!((mae - 1.0).abs() < 1e-5);
        let mut rev = samples.clone();
        rev.reverse();
        let a = mean_absolute_error(&m, &ds, &samples).unwrap();
        let b = mean_absolute_error(&m, &ds, &rev).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let ds = tiny_data();
        let mut m = StgnnModel::<f32>::new(tiny_spec(Variant::Stgnn, 1), 4).unwrap();
        let samples = split_samples(&ds, Split::Train, 1, 0);
        let (input, labels) = make_batch(&ds, &samples, 1).unwrap();
        let before = accumulate_batch(&mut m, &input, labels.clone()).unwrap();
        let schedule = TrainSchedule {
            batch_steps: 4,
            ..TrainSchedule::default()
        };
        let mut adam = Adam::new(m.params(), AdamConfig::default());
        train_epoch(&mut m, &mut adam, &ds, &schedule, 0).unwrap();
        let after = accumulate_batch(&mut m, &input, labels).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let mut stop = EarlyStopping::new(1);
        let vals = [1.0, 1.5, 2.0, 3.0];
        let ran = vals
            .iter()
            .enumerate()
            .take_while(|&(e, &v)| {
                stop.observe(e, v);
                !stop.should_stop()
            })
            .count()
            + 1;
        assert_eq!(ran, 2);
        assert_eq!((stop.best, stop.best_epoch), (1.0, 0));
    }

    #[test]
    fn fit_keeps_best_epoch() {
        let ds = tiny_data();
        let m = StgnnModel::<f32>::new(tiny_spec(Variant::Dgnn, 1), 2).unwrap();
        let schedule = TrainSchedule {
            epochs: 4,
            batch_steps: 4,
            ..TrainSchedule::default()
        };
        let out = fit(m, &ds, &schedule, |_| {}).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!(out.best_val_mae <= out.log.last().unwrap().val_mae);
        assert_eq!(out.best_val_mae, out.log[out.best_epoch].val_mae);
        assert_eq!(validate(&out.best, &ds, 1).unwrap(), out.best_val_mae);
    }
}
