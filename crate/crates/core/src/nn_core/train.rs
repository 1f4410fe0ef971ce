//! Speaker-independent training of the frame classifier (minibatch Adam,
//! validation-based checkpoint selection).

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{FrameBatch, ModelSpec, ParameterVector};
use super::net::{argmax_rows, backward, cross_entropy_loss, forward};
use crate::error::{Error, Result};
use crate::meta_training::adam::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.002,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmEpochLog {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_fer: f64,
}

#[derive(Clone, Debug)]
pub struct AmTrainOutcome {
    pub theta: ParameterVector,
    pub best_epoch: usize,
    pub log: Vec<AmEpochLog>,
}

/// Mean cross-entropy per frame and frame error rate on all frames.
pub fn evaluate(
    spec: &ModelSpec,
    theta: &ParameterVector,
    data: &FrameBatch,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let p = forward(spec, theta, &data.features)?;
    let ce = cross_entropy_loss(&p, &data.labels)?;
    let errors = argmax_rows(&p)
        .iter()
        .zip(&data.labels)
        .filter(|(a, b)| a != b)
        .count();
    Ok((ce / data.len() as f64, errors as f64 / data.len() as f64))
}

/// Trains from `spec.init_params(seed)` and returns the checkpoint (epoch 0
/// being the initialization) with the lowest validation cross-entropy.
pub fn train_si_model(
    spec: &ModelSpec,
    train: &FrameBatch,
    val: &FrameBatch,
    cfg: &AmTrainConfig,
    seed: u64,
) -> Result<AmTrainOutcome> {
    if train.is_empty() {
        return Err(Error::Precondition("no training frames".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    train.check_labels(spec.num_classes)?;
    val.check_labels(spec.num_classes)?;
    let select_on = if val.is_empty() { train } else { val };

    let mut theta = spec.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut adam = AdamState::new(theta.len());

    let (val_ce, val_fer) = evaluate(spec, &theta, select_on)?;
    let mut log = vec![AmEpochLog {
        epoch: 0,
        train_ce: evaluate(spec, &theta, train)?.0,
        val_ce,
        val_fer,
    }];
    let mut best = (val_ce, 0, theta.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mb = train.select(idx);
            let (loss, grad) = backward(spec, &theta, &mb)?;
            if !loss.is_finite() || grad.values().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, minibatch {b}"
                )));
            }
            train_loss += loss;
            adam_step(&mut adam, theta.values_mut(), grad.values(), &adam_cfg)?;
        }
        let (val_ce, val_fer) = evaluate(spec, &theta, select_on)?;
        log.push(AmEpochLog {
            epoch,
            train_ce: train_loss / train.len() as f64,
            val_ce,
            val_fer,
        });
        if val_ce < best.0 {
            best = (val_ce, epoch, theta.clone());
        }
    }
    Ok(AmTrainOutcome {
        theta: best.2,
        best_epoch: best.1,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::matrix::Matrix;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> FrameBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.random_range(-2.0..2.0);
            let y: f64 = rng.random_range(-2.0..2.0);
            // margin of 0.2 around the line x + y = 0
            if (x + y).abs() < 0.2 {
                continue;
            }
            labels.push(usize::from(x + y > 0.0));
            rows.push(vec![x, y]);
        }
        let len = labels.len();
        FrameBatch::new(Matrix::from_rows(&rows).unwrap(), labels, vec![false; len]).unwrap()
    }

    #[test]
    fn learns_a_separable_toy() {
        let spec = ModelSpec::new(2, vec![4], 2).unwrap();
        let train = separable(300, 1);
        let val = separable(100, 2);
        let cfg = AmTrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 32,
        };
        let out = train_si_model(&spec, &train, &val, &cfg, 9).unwrap();
        let (_, fer) = evaluate(&spec, &out.theta, &train).unwrap();
        assert!(fer <= 0.05, "training FER {fer}");
    }

    #[test]
    fn zero_epochs_returns_init() {
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let data = separable(40, 3);
        let cfg = AmTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_si_model(&spec, &data, &data, &cfg, 4).unwrap();
        assert_eq!(out.theta, spec.init_params(4));
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let data = separable(80, 5);
        let cfg = AmTrainConfig {
            epochs: 3,
            learning_rate: 0.01,
            batch_size: 16,
        };
        let a = train_si_model(&spec, &data, &data, &cfg, 1).unwrap();
        let b = train_si_model(&spec, &data, &data, &cfg, 1).unwrap();
        assert_eq!(a.theta.values(), b.theta.values());
    }

    #[test]
    fn empty_training_set_fails() {
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let empty = FrameBatch::empty(2);
        assert!(train_si_model(&spec, &empty, &empty, &AmTrainConfig::default(), 0).is_err());
    }
}
