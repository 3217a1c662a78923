//! Mean-squared-error training of the regressor with Adam and
//! best-on-validation checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::Tensor;
use super::model::{Architecture, RegressorModel, DEFAULT_CHANNELS, DEFAULT_INPUT_SIZE};
use super::TrainingSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 250,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            validation_fraction: 0.2,
            input_size: DEFAULT_INPUT_SIZE,
            channels: DEFAULT_CHANNELS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam requires beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("at least one convolution block is required".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::conv_regressor(self.input_size, &self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHistory {
    /// Validation MSE of the initialized model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) of the returned checkpoint; 0 if no epoch improved
    /// on the initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct Prepared {
    input: Tensor,
    label: f64,
}

/// Splits off a seeded random validation subset and trains on the rest.
pub fn train(samples: &[TrainingSample], config: &TrainConfig) -> Result<(RegressorModel, TrainingHistory)> {
    config.validate()?;
    if samples.len() < 2 * config.batch_size {
        return Err(Error::Config(format!(
            "{} samples is fewer than two batches of {}",
            samples.len(),
            config.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5A17));
    let n_val = ((samples.len() as f64 * config.validation_fraction).round() as usize).clamp(1, samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| idx.iter().map(|&k| samples[k].clone()).collect::<Vec<_>>();
    train_split(&pick(train_idx), &pick(val_idx), config)
}

/// Trains on `train_set` and selects the checkpoint with the lowest MSE on
/// `val_set`.
pub fn train_split(
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    config: &TrainConfig,
) -> Result<(RegressorModel, TrainingHistory)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if let Some(bad) = train_set.iter().chain(val_set).find(|s| !(s.rpe_label >= 0.0 && s.rpe_label.is_finite())) {
        return Err(Error::Contract(format!("invalid rpe label {}", bad.rpe_label)));
    }
    let mut model = RegressorModel::initialize(config.architecture(), config.seed)?;
    let prepare = |set: &[TrainingSample]| -> Result<Vec<Prepared>> {
        set.par_iter()
            .map(|s| {
                Ok(Prepared {
                    input: model.prepare_input(&s.image)?,
                    label: s.rpe_label,
                })
            })
            .collect()
    };
    let train_data = prepare(train_set)?;
    let val_data = prepare(val_set)?;

    let n_params = model.params().len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    let initial_val_loss = mse(&model, &val_data);
    let mut best = (0, initial_val_loss, model.params().to_vec());
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = batch_gradient(&model, &train_data, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            step += 1;
            adam_step(&mut model, &grad, &mut m, &mut v, step, config);
        }
        let train_loss = loss_sum / train_data.len() as f64;
        let val_loss = mse(&model, &val_data);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params().to_vec());
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }
    let (best_epoch, best_val_loss, params) = best;
    let model = RegressorModel::from_parts(model.architecture().clone(), params)?;
    Ok((
        model,
        TrainingHistory {
            initial_val_loss,
            epochs,
            best_epoch,
            best_val_loss,
        },
    ))
}

/// Mean loss and gradient over a batch. Per-sample work runs in parallel;
/// the reduction is sequential in batch order so results do not depend on
/// scheduling.
fn batch_gradient(model: &RegressorModel, data: &[Prepared], batch: &[usize]) -> (f64, Vec<f64>) {
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|&k| {
            let pass = model.forward_pass(&data[k].input);
            let residual = pass.output() - data[k].label;
            let mut grad = vec![0.0; model.params().len()];
            model.backward(&pass, 2.0 * residual, &mut grad, false);
            (residual * residual, grad)
        })
        .collect();
    let n = batch.len() as f64;
    let mut total = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l;
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    total.iter_mut().for_each(|t| *t /= n);
    (loss / n, total)
}

/// One Adam update; parameters are rounded to single precision afterwards
/// so the in-memory model matches its saved form exactly.
fn adam_step(model: &mut RegressorModel, grad: &[f64], m: &mut [f64], v: &mut [f64], step: i32, c: &TrainConfig) {
    let bc1 = 1.0 - c.beta1.powi(step);
    let bc2 = 1.0 - c.beta2.powi(step);
    for (k, p) in model.params_mut().iter_mut().enumerate() {
        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad[k];
        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
        let update = c.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.epsilon);
        *p = (*p - update) as f32 as f64;
    }
}

fn mse(model: &RegressorModel, data: &[Prepared]) -> f64 {
    let errs: Vec<f64> = data
        .par_iter()
        .map(|d| {
            let r = model.forward_tensor(&d.input) - d.label;
            r * r
        })
        .collect();
    errs.iter().sum::<f64>() / data.len() as f64
}
