use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, Model, ModelParams, ModelSpec};
use crate::attacks::{AttackConfig, Attacker};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Attack applied to every minibatch before the update.
    pub adversarial: Option<AttackConfig>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            adversarial: None,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be finite and >= 0, got {}",
            self.learning_rate
        );
        Ok(())
    }
}

/// Mean minibatch loss and accuracy seen during one epoch (measured on the
/// inputs actually trained on, before each update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochStats>,
}

/// Minibatch SGD on the mean cross-entropy.
pub fn train_sgd(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let plain = TrainConfig {
        adversarial: None,
        ..cfg.clone()
    };
    train_loop(spec, dataset, &plain)
}

/// SGD where each minibatch is replaced by its adversarial version under the
/// current parameters. The attack is recomputed for every batch of every epoch.
pub fn adversarial_train(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    ensure!(
        cfg.adversarial.is_some(),
        "adversarial_train needs an attack configuration"
    );
    train_loop(spec, dataset, cfg)
}

fn train_loop(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), "training set is empty");
    if let Some(attack) = &cfg.adversarial {
        attack.validate()?;
    }
    let [_, c, n, m] = dataset.images.dims();
    ensure!(
        [c, n, m] == spec.input_dims,
        "dataset images are {:?}, model expects {:?}",
        [c, n, m],
        spec.input_dims
    );

    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_5a6d);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let clean = dataset.images.select(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let x: Tensor4 = match &cfg.adversarial {
                Some(attack) => {
                    let mut per_batch = attack.clone();
                    per_batch.seed = attack.seed.wrapping_add(batch_counter);
                    Attacker::new(&model).run(&clean, &labels, &per_batch)?.adversarial
                }
                None => clean,
            };
            batch_counter += 1;
            let (loss, grads, logits) = model.grad_params_with_logits(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            correct += (0..logits.rows())
                .filter(|&b| argmax(logits.row(b)) == labels[b])
                .count();
            model.apply_gradients(&grads, cfg.learning_rate);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        };
        if model
            .params()
            .layers
            .iter()
            .any(|l| l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                epoch,
                loss: stats.loss,
            });
        }
        log.push(stats);
    }
    Ok(TrainOutcome {
        params: model.into_params(),
        log,
    })
}
