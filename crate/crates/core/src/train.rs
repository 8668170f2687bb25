//! Minibatch SGD for classifiers, shared by evaluation and pool building.

use condensegan_tensor::{grad, nn, OptimizerState};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::models::{logits_with, Classifier};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Learning rate for the first half of the epochs.
    pub lr: f64,
    /// Learning rate for the second half.
    pub lr_late: f64,
    pub momentum: f64,
    /// Per-batch augmentation, off when `None`.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 64,
            lr: 0.01,
            lr_late: 0.001,
            momentum: 0.9,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr < 0.0 || self.lr_late < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config("training batch, learning rates or momentum out of range".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.epochs / 2 {
            self.lr
        } else {
            self.lr_late
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Fraction of `set` classified correctly.
pub fn accuracy(net: &Classifier, set: &ImageSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let pred = net.predict(&set.images, 256)?;
    let hits = pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Trains `net` in place. The returned curve has one record per epoch; entry
/// 0 holds the accuracies before training, later entries the running
/// accuracy over the epoch's (augmented) batches and the end-of-epoch test
/// accuracy. `on_epoch` is called after every epoch with the epoch number
/// (1-based) and the current network.
pub fn train_classifier(
    net: &mut Classifier,
    train: &ImageSet,
    test: Option<&ImageSet>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &Classifier) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Config("cannot train on an empty set".into()));
    }
    let mut order_rng = rng::stream(seed, 31);
    let mut aug_rng = rng::stream(seed, 32);
    let test_acc = |net: &Classifier| -> Result<f64> {
        match test {
            Some(t) => accuracy(net, t),
            None => Ok(f64::NAN),
        }
    };
    let mut curve = vec![EpochRecord {
        epoch: 0,
        train_acc: accuracy(net, train)?,
        test_acc: test_acc(net)?,
    }];
    let mut opt = OptimizerState::sgd(cfg.lr, cfg.momentum);
    let mut params = net.weights.trainable();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut hits = 0;
        for chunk in order.chunks(cfg.batch) {
            let mut x = train.batch(chunk)?;
            if let Some(a) = &cfg.augment {
                let omega = augment::sample_omega(a, train.spec.width, &mut aug_rng);
                x = augment::apply(&x, &omega)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let logits = logits_with(net.arch, &params, net.spec, &x)?;
            hits += nn::argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
            let loss = nn::cross_entropy(&logits, &labels)?;
            let leaves = params.tensors();
            let refs: Vec<_> = leaves.iter().collect();
            let grads = grad(&loss, &refs, false)?;
            let mut updated = leaves.clone();
            opt.step(&mut updated, &grads).map_err(|e| CoreError::Numeric(format!("classifier update: {e}")))?;
            params.set_tensors(updated)?;
        }
        net.weights = params.detached();
        curve.push(EpochRecord {
            epoch: epoch + 1,
            train_acc: hits as f64 / train.len() as f64,
            test_acc: test_acc(net)?,
        });
        on_epoch(epoch + 1, net)?;
    }
    net.weights = params.detached();
    Ok(curve)
}
