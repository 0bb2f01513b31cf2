use log::debug;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, GatModel, Matrix};
use crate::error::{Error, Result};

const MIN_IMPROVEMENT: f64 = 1e-5;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without a `1e-5` improvement before stopping.
    pub patience: usize,
    /// Multiplier on the uniform initialization bound.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            epochs: 300,
            weight_decay: 5e-4,
            seed: 0,
            patience: 50,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.init_scale > 0.0) {
            return Err(Error::InvalidParameter(
                "weight decay must be >= 0 and init scale > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest observed loss.
    pub model: GatModel,
    /// Loss at every epoch, evaluated before that epoch's update.
    pub trace: Vec<f64>,
    pub best_loss: f64,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// Running minimum of the loss trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.trace
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

/// Full-batch Adam with L2 weight decay on the seeded-node loss.
pub fn train(
    mut model: GatModel,
    features: &Matrix,
    adjacency: &[Vec<usize>],
    seeds: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sizes: Vec<usize> = model.params().iter().map(|m| m.data().len()).collect();
    let mut first: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut second: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let (value, grads) = loss_and_gradients(&model, features, adjacency, seeds)?;
        // max-based ReLU and softmax shifts swallow NaN, so the loss alone
        // can stay finite while the gradients do not
        if !value.is_finite() || !grads.params().iter().all(|g| g.is_finite()) {
            return Err(Error::DivergedLoss { epoch, trace });
        }
        trace.push(value);
        let improved = value < best.0 - MIN_IMPROVEMENT;
        if value < best.0 {
            best = (value, model.clone(), epoch);
        }
        stale = if improved { 0 } else { stale + 1 };
        if stale >= cfg.patience {
            debug!("early stop at epoch {epoch}, best loss {:.6}", best.0);
            break;
        }
        let step = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - BETA1.powi(step), 1.0 - BETA2.powi(step));
        for (((param, grad), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(&mut first)
            .zip(&mut second)
        {
            for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g + cfg.weight_decay * *w;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
    let (best_loss, model, best_epoch) = best;
    Ok(TrainOutcome {
        model,
        trace,
        best_loss,
        best_epoch,
    })
}
