//! Training configuration, per-dataset profiles and the epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::Conversation;
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix, Metric};
use crate::model::{loss_and_gradients, predict, ModelConfig, ModelParams, Mode};
use crate::numerics::Matrix;
use crate::optim::{optimizer_step, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_ext: f64,
    pub lr_cls: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_ext > 0.0 && self.lr_cls > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout rate must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_ext: self.lr_ext,
            lr_cls: self.lr_cls,
            weight_decay: self.weight_decay,
        }
    }
}

/// Named hyperparameter presets. `Custom` starts from the IEMOCAP row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Iemocap,
    Dailydialog,
    Meld,
    Emorynlp,
    Custom,
}

pub const MAX_EPOCHS: usize = 100;

/// Learning rates, decay, batch size, dropout and encoder depths of a profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub lr_ext: f64,
    pub lr_cls: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub immha_depth: usize,
    pub diagru_depth: usize,
}

impl Profile {
    pub fn row(self) -> ProfileRow {
        let (lr_ext, lr_cls, weight_decay, batch_size, dropout_rate, immha_depth, diagru_depth) = match self {
            Profile::Iemocap | Profile::Custom => (2e-5, 7e-3, 1e-4, 32, 0.3, 5, 3),
            Profile::Dailydialog => (2e-5, 1e-3, 1e-4, 128, 0.3, 6, 3),
            Profile::Meld => (5e-5, 9e-3, 1e-4, 128, 0.3, 3, 3),
            Profile::Emorynlp => (3e-5, 1e-4, 1e-4, 128, 0.4, 4, 2),
        };
        ProfileRow {
            lr_ext,
            lr_cls,
            weight_decay,
            batch_size,
            dropout_rate,
            immha_depth,
            diagru_depth,
        }
    }

    pub fn train_config(self, seed: u64) -> TrainConfig {
        let r = self.row();
        TrainConfig {
            lr_ext: r.lr_ext,
            lr_cls: r.lr_cls,
            weight_decay: r.weight_decay,
            batch_size: r.batch_size,
            dropout_rate: r.dropout_rate,
            max_epochs: MAX_EPOCHS,
            seed,
            precision: Precision::F64,
        }
    }

    pub fn model_config(self) -> ModelConfig {
        let r = self.row();
        ModelConfig {
            immha_depth: r.immha_depth,
            diagru_depth: r.diagru_depth,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_metric: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<Matrix>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Pooled confusion matrix of the model's decoded predictions.
pub fn evaluate(data: &[Conversation], params: &ModelParams<Matrix>, cfg: &ModelConfig) -> Result<ConfusionMatrix> {
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for conv in data {
        golds.extend(conv.gold_labels()?);
        preds.extend(predict(conv, params, cfg)?);
    }
    confusion(&golds, &preds, params.num_labels())
}

/// Mean per-conversation loss in eval mode.
pub fn mean_loss(data: &[Conversation], params: &ModelParams<Matrix>, cfg: &ModelConfig) -> Result<f64> {
    let refs: Vec<&Conversation> = data.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(256) {
        total += loss_and_gradients(chunk, params, cfg, Mode::Eval)?.0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Minibatch training with best-validation selection.
///
/// Initialization, shuffling and dropout all derive from `train_cfg.seed`,
/// so equal seeds give bitwise-equal trajectories.
pub fn train_loop(
    train: &[Conversation],
    val: &[Conversation],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    metric: Metric,
) -> Result<TrainOutcome> {
    let first = train.first().ok_or(Error::EmptyDataset)?;
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = ModelParams::init(model_cfg, first.feature_dim(), first.num_labels, &mut rng)?;
    let mut state = AdamState::new(&params);
    let adam = train_cfg.adam();
    let mut best: Option<(f64, usize, ModelParams<Matrix>)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&Conversation> = idx.iter().map(|&i| &train[i]).collect();
            let mode = Mode::Train {
                dropout_rate: train_cfg.dropout_rate,
                seed: rng.random(),
            };
            let (loss, grads) = loss_and_gradients(&batch, &params, model_cfg, mode)?;
            total += loss * batch.len() as f64;
            optimizer_step(&mut params, &grads, &adam, &mut state);
        }
        let cm = evaluate(val, &params, model_cfg)?;
        let score = metric.score(&cm)?;
        let improved = best.as_ref().is_none_or(|(b, ..)| score > *b);
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: mean_loss(val, &params, model_cfg)?,
            val_accuracy: crate::metrics::accuracy(&cm),
            val_metric: score,
            best: improved,
        });
    }
    Ok(match best {
        Some((_, epoch, p)) => TrainOutcome {
            params: p,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            params,
            history,
            best_epoch: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_rows() {
        let r = Profile::Meld.row();
        assert_eq!((r.lr_ext, r.lr_cls, r.batch_size, r.immha_depth), (5e-5, 9e-3, 128, 3));
        assert_eq!(Profile::Custom.row(), Profile::Iemocap.row());
        assert_eq!(Profile::Emorynlp.train_config(1).dropout_rate, 0.4);
    }

    #[test]
    fn config_validation() {
        let mut c = Profile::Iemocap.train_config(0);
        assert!(c.validate().is_ok());
        c.dropout_rate = 1.0;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn empty_training_set() {
        let cfg = Profile::Iemocap.train_config(0);
        let r = train_loop(&[], &[], &ModelConfig::default(), &cfg, Metric::Accuracy);
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
