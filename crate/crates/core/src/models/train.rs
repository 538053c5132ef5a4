//! Mini-batch MSE training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError};
use crate::autodiff::{Adam, Tape, Tensor};
use crate::parallel;
use crate::series::{SupervisedDataset, WindowedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 10,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::Config("learning rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean squared error over the training samples seen this epoch, each
    /// measured before the update of its batch.
    pub train_mse: f64,
    /// Mean squared error on the held-out partition after the epoch.
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
}

impl TrainReport {
    pub fn final_train_mse(&self) -> Option<f64> {
        self.history.last().map(|e| e.train_mse)
    }

    pub fn final_test_mse(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.test_mse)
    }
}

/// Squared error of one sample and its gradient, one buffer per parameter tensor.
pub fn per_sample_gradient(model: &Model, sample: &WindowedSample) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let mut tape = Tape::new();
    let p = model.params().register(&mut tape, true);
    let x = tape.constant(sample.input.clone());
    let y = model.forward(&mut tape, &p, x)?;
    let target = tape.constant(Tensor::scalar(sample.target));
    let err = tape.sub(y, target)?;
    let sq = tape.mul(err, err)?;
    let loss = tape.value(sq).item();
    let grads = tape.backward(sq)?;
    let g = p.vars().iter().map(|&v| grads.wrt(v).into_values()).collect();
    Ok((loss, g))
}

/// Mean squared prediction error over a dataset.
pub fn evaluate(model: &Model, data: &SupervisedDataset) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let sum = parallel::fold_chunks(
        data.len(),
        || Ok(0.0),
        |acc: &mut Result<f64, ModelError>, i| {
            if let Ok(total) = acc {
                let s = &data.samples[i];
                match model.predict(&s.input) {
                    Ok(y) => *total += (y - s.target).powi(2),
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |acc, part| match (acc.as_mut(), part) {
            (Ok(a), Ok(b)) => *a += b,
            (Ok(_), Err(e)) => *acc = Err(e),
            _ => {}
        },
    )?;
    Ok(sum / data.len() as f64)
}

/// Predictions for every sample, in order.
pub fn predict_all(model: &Model, data: &SupervisedDataset) -> Result<Vec<f64>, ModelError> {
    parallel::map(&data.samples, |s| model.predict(&s.input)).into_iter().collect()
}

struct BatchAcc {
    loss: f64,
    grads: Vec<Vec<f64>>,
    error: Option<ModelError>,
}

fn check_shapes(model: &Model, data: &SupervisedDataset) -> Result<(), ModelError> {
    let cfg = model.config();
    if data.window != cfg.window || data.n_vars != cfg.n_vars {
        return Err(ModelError::WindowShape {
            found: vec![data.window, data.n_vars],
            window: cfg.window,
            n_vars: cfg.n_vars,
        });
    }
    Ok(())
}

/// Trains `model` in place; deterministic for a fixed `(seed, config)`.
pub fn train(
    model: &mut Model,
    train: &SupervisedDataset,
    test: Option<&SupervisedDataset>,
    config: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    config.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    check_shapes(model, train)?;
    if let Some(t) = test {
        check_shapes(model, t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let lens: Vec<usize> = model.params().tensors().iter().map(Tensor::len).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let frozen = &*model;
            let acc = parallel::fold_chunks(
                batch.len(),
                || BatchAcc {
                    loss: 0.0,
                    grads: lens.iter().map(|&n| vec![0.0; n]).collect(),
                    error: None,
                },
                |acc, i| {
                    if acc.error.is_some() {
                        return;
                    }
                    match per_sample_gradient(frozen, &train.samples[batch[i]]) {
                        Ok((loss, g)) => {
                            acc.loss += loss;
                            for (a, b) in acc.grads.iter_mut().zip(&g) {
                                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                            }
                        }
                        Err(e) => acc.error = Some(e),
                    }
                },
                |acc, part| {
                    if acc.error.is_none() {
                        acc.error = part.error;
                    }
                    acc.loss += part.loss;
                    for (a, b) in acc.grads.iter_mut().zip(&part.grads) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                },
            );
            if let Some(e) = acc.error {
                return Err(e);
            }
            let non_finite = !acc.loss.is_finite() || acc.grads.iter().flatten().any(|g| !g.is_finite());
            if non_finite {
                return Err(ModelError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            epoch_loss += acc.loss;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = acc.grads;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(model.params_mut().tensors_mut(), &grads);
        }
        let test_mse = test.map(|t| evaluate(model, t)).transpose()?;
        report.history.push(EpochLoss {
            epoch,
            train_mse: epoch_loss / train.len() as f64,
            test_mse,
        });
    }
    Ok(report)
}
