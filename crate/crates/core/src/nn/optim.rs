use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{check_compatible, loss_and_grads, LossKind};
use super::model::ModelParams;
use crate::data::Dataset;
use crate::error::{config, Error, Result};
use crate::rng;

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` at each milestone epoch.
    StepDecay { factor: f64, milestones: Vec<usize> },
    /// Half-cosine from the initial rate towards zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config(format!("learning rate {} must be a non-negative number", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return config("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return config("batch size and epochs must be positive");
        }
        if let Schedule::StepDecay { factor, milestones } = &self.schedule {
            if !(*factor > 0.0) {
                return config("decay factor must be positive");
            }
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return config("milestones must be strictly increasing");
            }
            if milestones.last().is_some_and(|&m| m >= self.epochs) {
                return config("milestones must come before the last epoch");
            }
        }
        Ok(())
    }

    pub fn hyper(&self, lr: f64) -> SgdHyper {
        SgdHyper { lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// Learning rate used throughout `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return config(format!("epoch {epoch} outside a {}-epoch run", cfg.epochs));
    }
    Ok(match &cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::StepDecay { factor, milestones } => {
            let passed = milestones.iter().filter(|&&m| m <= epoch).count();
            cfg.lr * factor.powi(passed as i32)
        }
        Schedule::Cosine => cfg.lr * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos()) / 2.0,
    })
}

/// Hyperparameters of a single SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ModelParams,
}

impl SgdState {
    pub fn new(model: &ModelParams) -> Self {
        Self { velocity: model.zeros_like() }
    }
}

/// `v = mu v + (g + lambda theta)`, then `theta -= lr v`.
pub fn sgd_step(
    model: &mut ModelParams,
    grads: &ModelParams,
    state: &mut SgdState,
    h: SgdHyper,
) -> Result<()> {
    model.require_same_architecture(grads)?;
    model.require_same_architecture(&state.velocity)?;
    let g = grads.tensors();
    let v = state.velocity.tensors_mut();
    for ((theta, v), g) in model.tensors_mut().into_iter().zip(v).zip(g) {
        for ((p, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = h.momentum * *vi + (gi + h.weight_decay * *p);
            *p -= h.lr * *vi;
        }
    }
    Ok(())
}

/// Sample order for one epoch: Fisher-Yates driven by `(seed, epoch)`.
pub fn batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, epoch as u64]));
    order
}

/// What happened during [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over `data`.
pub fn train(
    model: ModelParams,
    data: &Dataset,
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(model, data, loss, cfg, |_, _| {})
}

/// [`train`] calling `observe(step, model)` after every update.
pub fn train_observed(
    mut model: ModelParams,
    data: &Dataset,
    loss: LossKind,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, loss)?;
    data.check_finite()?;
    if data.is_empty() {
        return config("cannot train on an empty dataset");
    }
    let mut state = SgdState::new(&model);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let h = cfg.hyper(lr_at(cfg, epoch)?);
        let order = batch_order(cfg.seed, epoch, data.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.select(idx);
            let (value, grads) = loss_and_grads(&model, batch.inputs(), batch.labels(), loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, reason: format!("loss became {value}") });
            }
            sgd_step(&mut model, &grads, &mut state, h)?;
            observe(step, &model);
            sum += value;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    if !model.is_finite() {
        return Err(Error::Diverged { step, reason: "parameters became non-finite".into() });
    }
    Ok(TrainOutcome { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Architecture, Dense, ModelKind};
    use ndarray::array;

    fn scalar(v: f64) -> ModelParams {
        ModelParams::new(ModelKind::FixedHead, vec![Dense { weights: array![[v]], bias: None }])
            .unwrap()
    }

    fn cfg(schedule: Schedule, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            epochs,
            schedule,
            seed: 0,
        }
    }

    #[test]
    fn plain_step() {
        let mut m = scalar(1.0);
        let mut s = SgdState::new(&m);
        let h = SgdHyper { lr: 1.0, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut m, &scalar(0.5), &mut s, h).unwrap();
        assert_eq!(m.to_flat(), vec![0.5]);
        let mut fresh = SgdState::new(&m);
        sgd_step(&mut m, &scalar(0.0), &mut fresh, h).unwrap();
        assert_eq!(m.to_flat(), vec![0.5]);
    }

    #[test]
    fn momentum_accumulates() {
        let g = 0.25;
        let mut m = scalar(1.0);
        let mut s = SgdState::new(&m);
        let h = SgdHyper { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut m, &scalar(g), &mut s, h).unwrap();
        sgd_step(&mut m, &scalar(g), &mut s, h).unwrap();
        assert!((s.velocity.to_flat()[0] - 1.9 * g).abs() < 1e-15);
        assert!((m.to_flat()[0] - (1.0 - 0.1 * g - 0.1 * 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_joins_the_gradient() {
        let mut m = scalar(2.0);
        let h = SgdHyper { lr: 0.5, momentum: 0.0, weight_decay: 0.1 };
        let mut fresh = SgdState::new(&m);
        sgd_step(&mut m, &scalar(0.0), &mut fresh, h).unwrap();
        assert!((m.to_flat()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let c = cfg(Schedule::StepDecay { factor: 0.1, milestones: vec![40, 80] }, 120);
        assert_eq!(lr_at(&c, 39).unwrap(), 0.1);
        assert!((lr_at(&c, 40).unwrap() - 0.01).abs() < 1e-17);
        assert!((lr_at(&c, 80).unwrap() - 0.001).abs() < 1e-18);
        assert!(lr_at(&c, 120).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = cfg(Schedule::Cosine, 50);
        assert_eq!(lr_at(&c, 0).unwrap(), 0.1);
        let last = 0.1 * (1.0 + (PI * 49.0 / 50.0).cos()) / 2.0;
        assert_eq!(lr_at(&c, 49).unwrap(), last);
        assert!(last < 0.001);
    }

    #[test]
    fn invalid_milestones_are_rejected() {
        assert!(cfg(Schedule::StepDecay { factor: 0.1, milestones: vec![5, 5] }, 10).validate().is_err());
        assert!(cfg(Schedule::StepDecay { factor: 0.1, milestones: vec![10] }, 10).validate().is_err());
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let a = batch_order(3, 1, 100);
        assert_eq!(a, batch_order(3, 1, 100));
        assert_ne!(a, batch_order(3, 2, 100));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_bit_reproducible_and_reduces_loss() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.5, 0.2], [0.2, 0.9]];
        let d = Dataset::new(x, vec![1, 0, 1, 0, 0, 1]).unwrap();
        let m = init_model(&Architecture::mlp(&[2, 8, 2]), 4).unwrap();
        let c = cfg(Schedule::Constant, 30);
        let a = train(m.clone(), &d, LossKind::CrossEntropy, &c).unwrap();
        let b = train(m, &d, LossKind::CrossEntropy, &c).unwrap();
        assert_eq!(a.model.to_flat(), b.model.to_flat());
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
    }
}
