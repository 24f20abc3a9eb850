use super::model::{ModelGraph, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SGD hyperparameters with a multi-step learning-rate decay.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![60, 120, 160],
            gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("optimizer learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "optimizer momentum must lie in [0, 1)".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("optimizer weight decay must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("optimizer gamma must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero-based): the base rate times
    /// `gamma` for every milestone at or below `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// Momentum buffers for one model (or model portion).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    epoch: usize,
    velocity: Vec<Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            epoch: 0,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    pub fn velocity(&self) -> &[Vec<Tensor>] {
        &self.velocity
    }

    /// One SGD step at the current learning rate:
    /// `v = momentum * v + grad + decay * param; param -= lr * v`.
    /// Weight decay skips batch norm scale/shift; running statistics are never touched.
    pub fn step(&mut self, model: &mut ModelGraph, grads: &ParamGrads) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = ParamGrads::zeros_like(model).layers;
        }
        if grads.layers.len() != model.layers().len() || self.velocity.len() != grads.layers.len() {
            return Err(Error::Shape(
                "gradients do not match the model's layers".into(),
            ));
        }
        let lr = self.lr() as Scalar;
        let momentum = self.config.momentum as Scalar;
        let decay = self.config.weight_decay as Scalar;
        for ((layer, lg), lv) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
        {
            let kinds = layer.param_kinds();
            let trainable = kinds
                .iter()
                .zip(layer.params_mut().iter_mut())
                .filter(|(k, _)| k.is_trainable());
            let mut count = 0;
            for (((kind, p), g), v) in trainable.zip(lg).zip(lv.iter_mut()) {
                count += 1;
                if p.shape() != g.shape() || p.shape() != v.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                let wd = if kind.is_batch_norm() { 0.0 } else { decay };
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = momentum * *vv + gv + wd * *pv;
                    *pv -= lr * *vv;
                }
            }
            if count != lg.len() {
                return Err(Error::Shape(
                    "gradient count does not match trainable parameters".into(),
                ));
            }
        }
        for (_, _, t) in model.named_params() {
            t.ensure_finite("sgd step")?;
        }
        Ok(())
    }
}
