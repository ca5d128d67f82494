//! Mini-batch training loop.

use rand::seq::SliceRandom;

use super::{Adam, Mode, Model};
use crate::dataset::{augment_minibatch, AugmentationGrid, Dataset, SampleMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Per-sample random modifications applied to each mini-batch.
    pub augmentation: Option<AugmentationGrid>,
    /// Share of the training set held out for best-epoch selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 32,
            seed: 0,
            learning_rate: Adam::DEFAULT_LR,
            augmentation: None,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} not in [0, 0.5]",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(g) = &self.augmentation {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters at the epoch with the highest validation accuracy (earliest
    /// on ties); the final model when there is no validation split.
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub optimizer: Adam,
}

pub fn accuracy(model: &Model, samples: &[SampleMatrix]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(samples)?;
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Seeded split of sample indices into (train, validation).
pub fn split_indices(len: usize, fraction: f64, seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let n_val = (len as f64 * fraction).round() as usize;
    if n_val == 0 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut seed::stream(seed_, "split", &[]));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

/// Trains `model` on `dataset`, resuming from `optimizer` when given.
pub fn train_with(
    mut model: Model,
    dataset: &Dataset,
    config: &TrainConfig,
    optimizer: Option<Adam>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = optimizer.unwrap_or_else(|| Adam::new(config.learning_rate, &shapes));
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            best: model.clone(),
            model,
            best_epoch: None,
            history: Vec::new(),
            optimizer: adam,
        });
    }
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if dataset.classes != model.classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model {}",
            dataset.classes,
            model.classes()
        )));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), config.validation_fraction, config.seed);
    let val: Vec<SampleMatrix> = val_idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..config.epochs {
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut seed::stream(config.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let tag = [epoch as u64, bi as u64];
            let x = match &config.augmentation {
                Some(grid) => {
                    let mut batch: Vec<SampleMatrix> = chunk.iter().map(|&i| dataset.samples[i].clone()).collect();
                    augment_minibatch(&mut batch, grid, &mut seed::stream(config.seed, "augment", &tag))?;
                    model.batch_input(&batch)?.0
                }
                None => model.batch_input(chunk.iter().map(|&i| &dataset.samples[i]))?.0,
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.samples[i].label).collect();
            let mut rng = seed::stream(config.seed, "dropout", &tag);
            let cache = model.forward(x.view(), Mode::Train, Some(&mut rng))?;
            let (loss, grads) = model.loss_and_backward(&cache, &labels)?;
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let validation_accuracy = if val.is_empty() {
            None
        } else {
            let acc = accuracy(&model, &val)?;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
            Some(acc)
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            validation_accuracy,
        });
    }
    let (best, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model.clone(), None),
    };
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
        optimizer: adam,
    })
}

pub fn train(model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{MeasurementMask, CHANNELS};
    use crate::nn::build_fcnn;
    use ndarray::Array2;
    use rand::Rng;
    use std::sync::Arc;

    /// Two classes split by the sign of a fixed direction.
    fn separable(n_samples: usize) -> Dataset {
        let n = 2;
        let mask = Arc::new(MeasurementMask::from_entries(n, vec![true; n * CHANNELS]).unwrap());
        let mut rng = seed::rng(8);
        let mut ds = Dataset::new(vec!["a".into(), "b".into()], 2);
        while ds.len() < n_samples {
            let x = Array2::from_shape_fn((n, CHANNELS), |_| rng.random_range(-1.0..1.0));
            let score: f64 = x.iter().enumerate().map(|(k, v)| if k % 3 == 0 { *v } else { -0.5 * v }).sum();
            if score.abs() < 0.2 {
                continue;
            }
            let label = usize::from(score > 0.0);
            ds.samples.push(SampleMatrix::new(x, label, mask.clone()).unwrap());
        }
        ds
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = separable(20);
        let model = build_fcnn(2, 2, 1).unwrap();
        let out = train(model.clone(), &ds, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model, model);
        assert!(out.history.is_empty());
    }

    #[test]
    fn separable_data_is_learned() {
        let ds = separable(200);
        let model = build_fcnn(2, 2, 3).unwrap();
        let config = TrainConfig {
            epochs: 50,
            seed: 4,
            learning_rate: 1e-3,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let out = train(model, &ds, &config).unwrap();
        assert!(accuracy(&out.model, &ds.samples).unwrap() >= 0.99);
        assert_eq!(out.history.len(), 50);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(64);
        let config = TrainConfig {
            epochs: 3,
            seed: 9,
            augmentation: Some(AugmentationGrid::default()),
            ..Default::default()
        };
        let a = train(build_fcnn(2, 2, 1).unwrap(), &ds, &config).unwrap();
        let b = train(build_fcnn(2, 2, 1).unwrap(), &ds, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.best, b.best);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 0.6, ..Default::default() }.validate().is_err());
    }
}
