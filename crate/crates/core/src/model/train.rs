use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::network::loss_and_grad;
use super::params::{ModelConfig, ModelParameters};
use crate::episode::{generate_batch, PriorConfig};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, streams};

/// Learning rate for fine-tuning an already pretrained model.
pub const FINE_TUNE_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Number of recent step losses averaged before comparison.
    pub window: usize,
    /// Relative improvement the smoothed loss must make over its best value.
    pub min_delta: f64,
    pub min_learning_rate: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 50,
            window: 50,
            min_delta: 1e-4,
            min_learning_rate: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled: parameters shrink by `lr * weight_decay` each step.
    pub weight_decay: f64,
    pub plateau: PlateauConfig,
    pub batch_episodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            plateau: PlateauConfig::default(),
            batch_episodes: 8,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !positive(self.epsilon) {
            return Err(Error::config("learning rate and epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.patience == 0 || p.window == 0 || !(p.min_delta >= 0.0) {
            return Err(Error::config("plateau needs factor in (0,1), patience >= 1, window >= 1"));
        }
        if self.batch_episodes == 0 {
            return Err(Error::config("batch_episodes must be positive"));
        }
        Ok(())
    }

    /// Seed of the episode batch used at `step`.
    pub fn batch_seed(&self, step: usize) -> u64 {
        derive_seed(self.seed, streams::TRAIN_STEP, step as u64)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, streams::INIT, 0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParameters<f32>, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
        }
    }

    pub fn update(&mut self, params: &mut ModelParameters<f32>, grad: &ModelParameters<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.epsilon as f32;
        let shrink = (1.0 - lr * self.weight_decay) as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] = p[i] * shrink - step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Halves the learning rate when the windowed mean loss stops improving.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    recent: VecDeque<f64>,
    best: f64,
    stale_steps: usize,
    learning_rate: f64,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, learning_rate: f64) -> Self {
        PlateauScheduler {
            recent: VecDeque::with_capacity(config.window),
            config,
            best: f64::INFINITY,
            stale_steps: 0,
            learning_rate,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Records a step loss and returns the learning rate for the next step.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.recent.len() == self.config.window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        if self.recent.len() < self.config.window {
            return self.learning_rate;
        }
        let smoothed = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        if smoothed < self.best * (1.0 - self.config.min_delta) {
            self.best = smoothed;
            self.stale_steps = 0;
        } else {
            self.stale_steps += 1;
            if self.stale_steps > self.config.patience {
                self.learning_rate = (self.learning_rate * self.config.factor).max(self.config.min_learning_rate);
                self.stale_steps = 0;
            }
        }
        self.learning_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl TrainOutcome {
    /// Mean of `window` consecutive losses starting at `start`.
    pub fn window_mean(&self, start: usize, window: usize) -> Option<f64> {
        let slice = self.losses.get(start..start + window)?;
        Some(slice.iter().sum::<f64>() / window as f64)
    }
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("checkpoint-{step:06}.ckpt")
}

pub const LAST_GOOD_CHECKPOINT: &str = "last-good.ckpt";

pub fn train(prior: &PriorConfig, model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(prior, model, config, None, |_| {})
}

/// Trains from a fresh initialization. Checkpoints go to `checkpoint_dir`
/// when given; `on_step` sees every completed step.
pub fn train_with(
    prior: &PriorConfig,
    model: &ModelConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    prior.validate()?;
    model.validate()?;
    config.validate()?;
    if prior.d_max != model.d_max {
        return Err(Error::config(format!(
            "prior d_max {} differs from model d_max {}",
            prior.d_max, model.d_max
        )));
    }
    let mut params = ModelParameters::<f32>::init(model, config.init_seed())?;
    let mut optimizer = AdamW::new(&params, config);
    let mut scheduler = PlateauScheduler::new(config.plateau.clone(), config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let mut learning_rates = Vec::with_capacity(config.steps);
    let save = |params: &ModelParameters<f32>, step: usize, name: String| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            Checkpoint::new(params.clone(), step, config.seed).save(&dir.join(name))?;
        }
        Ok(())
    };

    for step in 0..config.steps {
        let batch = generate_batch(prior, config.batch_episodes, config.batch_seed(step))?;
        let lr = scheduler.learning_rate();
        let diverged = || Error::Divergence {
            step,
            last_good_step: step,
        };
        let (loss, grad) = match loss_and_grad(&params, &batch) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss) => {
                save(&params, step, LAST_GOOD_CHECKPOINT.into())?;
                return Err(diverged());
            }
            Err(e) => return Err(e),
        };
        let previous = params.clone();
        optimizer.update(&mut params, &grad, lr);
        if !params.is_finite() {
            save(&previous, step, LAST_GOOD_CHECKPOINT.into())?;
            return Err(diverged());
        }
        losses.push(loss);
        learning_rates.push(lr);
        scheduler.observe(loss);
        on_step(&StepRecord {
            step,
            loss,
            learning_rate: lr,
        });
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            save(&params, step + 1, checkpoint_file_name(step + 1))?;
        }
    }
    Ok(TrainOutcome {
        params,
        losses,
        learning_rates,
    })
}
