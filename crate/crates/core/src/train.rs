//! Shared pieces of the training loops: configuration, minibatching, EMA and loss curves.

use std::collections::HashMap;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleKind;
use crate::ops;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub ema_decay: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            steps: 1000,
            ema_decay: 0.999,
            schedule: ScheduleKind::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Per-step training losses, exported next to checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub stage: String,
    pub first_step: usize,
    pub losses: Vec<f64>,
    /// Held-out metric evaluated after training, when the stage defines one.
    pub validation: Option<f64>,
    /// Reference value for `validation` (e.g. the untrained or unconditioned score).
    pub baseline: Option<f64>,
}

/// Adam (no weight decay) over a fixed set of variables.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, learning_rate: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr: learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
        })
    }

    /// One optimizer step; returns the scalar loss. A non-finite loss leaves the weights untouched.
    pub fn step(&mut self, loss: &Tensor, step: usize) -> Result<f64> {
        let value = ops::scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("loss is {value}"),
            });
        }
        self.opt.backward_step(loss)?;
        Ok(value)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Exponential moving average of a named parameter set.
pub struct Ema {
    decay: f64,
    shadow: HashMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f64, init: &HashMap<String, Tensor>) -> Self {
        Self {
            decay,
            shadow: init.clone(),
        }
    }

    pub fn update(&mut self, current: &HashMap<String, Tensor>) -> Result<()> {
        for (name, avg) in self.shadow.iter_mut() {
            if let Some(cur) = current.get(name) {
                *avg = ((&*avg * self.decay)? + (cur.detach() * (1.0 - self.decay))?)?;
            }
        }
        Ok(())
    }

    pub fn into_inner(self) -> HashMap<String, Tensor> {
        self.shadow
    }
}

/// Endless seeded stream of shuffled minibatch indices.
pub struct Batches {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut s = Self {
            n,
            batch: batch.min(n),
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Stacks `(1, ...)` tensors selected by `idx` along the batch axis.
pub fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<&Tensor> = idx.iter().map(|&i| &items[i]).collect();
    Ok(Tensor::cat(&picked, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_each_epoch() {
        let mut b = Batches::new(10, 5, 3).unwrap();
        let mut seen: Vec<usize> = b.next_batch().into_iter().chain(b.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            ema_decay: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
