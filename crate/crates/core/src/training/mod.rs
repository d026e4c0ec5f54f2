//! Staged training: the combined loss, the optimizer, per-stage drivers, and
//! synthetic data generation.
//!
//! Stages train in dependency order (flow, gate, residual, fusion); each stage
//! freezes everything before it and writes its own checkpoint, so re-running a
//! later stage can never disturb an earlier one. All randomness is derived
//! from the configured seed.

pub mod dataset;
mod stages;

pub use dataset::{make_synthetic_dataset, make_synthetic_dataset_cfg, Sample, SynthConfig};
pub use stages::{staged_train, StageOutcome};

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamSet;

/// Training stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Flow,
    Gate,
    Residual,
    Fusion,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Flow, Stage::Gate, Stage::Residual, Stage::Fusion];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Gate => "gate",
            Stage::Residual => "residual",
            Stage::Fusion => "fusion",
        }
    }

    /// Stages whose checkpoints must exist before this one trains.
    pub fn prerequisites(&self) -> &'static [Stage] {
        match self {
            Stage::Flow => &[],
            Stage::Gate => &[Stage::Flow],
            Stage::Residual => &[Stage::Flow, Stage::Gate],
            Stage::Fusion => &[Stage::Flow, Stage::Gate, Stage::Residual],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "flow" => Ok(Stage::Flow),
            "gate" => Ok(Stage::Gate),
            "residual" => Ok(Stage::Residual),
            "fusion" => Ok(Stage::Fusion),
            other => Err(Error::invalid(format!("unknown stage {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the expected-compute term in the gate loss.
    pub lambda: f64,
    pub lr_initial: f64,
    pub lr_after_epoch10: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 2e-4,
            lr_initial: 1e-4,
            lr_after_epoch10: 1e-5,
            epochs_per_stage: 15,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.lr_initial <= 0.0 || self.lr_after_epoch10 <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.epochs_per_stage == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        Ok(())
    }

    /// Step-size schedule: `lr_initial` through epoch 10, then the decayed rate.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= 10 {
            self.lr_initial
        } else {
            self.lr_after_epoch10
        }
    }
}

/// The training loss: mean absolute error plus `lambda` times the expected
/// compute `g`.
pub fn loss(pred: &Image, gt: &Image, g: f64, lambda: f64) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(
            format!("{:?}", gt.data.dim()),
            format!("{:?}", pred.data.dim()),
        ));
    }
    let l1 = (&pred.data - &gt.data).mapv(f64::abs).mean().unwrap_or(0.0);
    Ok(l1 + lambda * g)
}

/// Adam with bias correction; first/second moment state per parameter.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(value) = params.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            ndarray::Zip::from(value)
                .and(&mut *m)
                .and(&mut *v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn loss_trivial_cases() {
        let a = Image::zeros(4, 4);
        assert_eq!(loss(&a, &a, 0.0, 2e-4).unwrap(), 0.0);
        let mut b = Image::zeros(4, 4);
        b.data.fill(0.5);
        assert!((loss(&b, &a, 0.0, 2e-4).unwrap() - 0.5).abs() < 1e-12);
        // lambda * G arithmetic at the published weight
        assert!((loss(&a, &a, 1000.0, 2e-4).unwrap() - 0.2).abs() < 1e-12);
        let c = Image::zeros(3, 4);
        assert!(loss(&c, &a, 0.0, 2e-4).is_err());
    }

    #[test]
    fn loss_is_pure_l1_when_lambda_zero() {
        let mut a = Image::zeros(2, 2);
        a.data[[0, 0, 0]] = 1.0;
        let b = Image::zeros(2, 2);
        assert!((loss(&a, &b, 123.0, 0.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_decays_after_epoch_ten() {
        let cfg = TrainConfig::default();
        for e in 1..=10 {
            assert_eq!(cfg.lr_for_epoch(e), 1e-4);
        }
        for e in 11..=15 {
            assert_eq!(cfg.lr_for_epoch(e), 1e-5);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // p -> (p - 3)^2, gradient 2(p - 3)
        let mut ps = ParamSet::new();
        ps.insert("p", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let p = ps.get("p").unwrap()[[0]];
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0 * (p - 3.0)));
            opt.step(&mut ps, &grads, 0.01);
        }
        let p = ps.get("p").unwrap()[[0]];
        assert!((p - 3.0).abs() < 1e-3, "converged to {p}");
    }
}
