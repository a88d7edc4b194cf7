//! Minibatch training loop shared by the density estimators and the dynamics
//! ensemble: Adam(W), optional plateau learning-rate decay, early stopping on
//! a validation objective, and best-checkpoint restore.

use gormpo_nn::{Adam, AdamConfig, ParamStore};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Multiply the learning rate by this factor after `plateau_patience`
    /// epochs without improvement.
    pub plateau_factor: Option<f64>,
    pub plateau_patience: usize,
    pub max_grad_norm: Option<f64>,
    /// Caps minibatches per epoch; `None` makes one pass over the data.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.0,
            patience: Some(15),
            plateau_factor: None,
            plateau_patience: 7,
            max_grad_norm: None,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// A minibatch step: returns the loss and one gradient per parameter in store order.
pub(crate) type StepResult = (f64, Vec<Array2<f64>>);

/// Runs the loop. On a non-finite loss the best parameters seen so far are
/// restored and an error is returned.
pub(crate) fn fit_params<L, V>(
    store: &mut ParamStore,
    n_train: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut step: L,
    mut validate: V,
) -> Result<FitReport>
where
    L: FnMut(&ParamStore, &[usize], &mut ChaCha8Rng) -> StepResult,
    V: FnMut(&ParamStore) -> f64,
{
    if n_train == 0 || cfg.batch_size == 0 {
        return Err(Error::Param("empty training set or zero batch size".into()));
    }
    let mut opt = Adam::new(store, cfg.adam());
    let mut best = store.clone();
    let mut best_val = validate(store);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut since_plateau = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_batches_per_epoch.is_some_and(|m| batches >= m) {
                break;
            }
            let (loss, grads) = step(store, chunk, rng);
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                store.copy_from(&best);
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite loss {loss}; restored parameters from epoch {best_epoch}"),
                });
            }
            opt.step(store, &grads);
            total += loss;
            batches += 1;
        }
        let val = validate(store);
        if !val.is_finite() {
            store.copy_from(&best);
            return Err(Error::Training {
                epoch,
                detail: format!("non-finite validation loss; restored parameters from epoch {best_epoch}"),
            });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss: val,
            lr: opt.config.lr,
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best.copy_from(store);
            since_best = 0;
            since_plateau = 0;
        } else {
            since_best += 1;
            since_plateau += 1;
            if let Some(f) = cfg.plateau_factor {
                if since_plateau >= cfg.plateau_patience {
                    opt.set_lr(opt.config.lr * f);
                    since_plateau = 0;
                }
            }
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    store.copy_from(&best);
    Ok(FitReport {
        curve,
        best_epoch,
        best_val,
    })
}
