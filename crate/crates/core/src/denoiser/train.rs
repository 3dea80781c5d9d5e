//! Optimisation loop: Adam with global-norm clipping, warmup learning rate
//! and an exponential moving average of the parameters.

use super::{draw_noise, loss_and_grads, DenoiserConfig, LossBatch, Mlp};
use crate::bridge::{corrupt_rows, BridgeSchedule};
use crate::error::{param, Error, Result};
use crate::samplers::RngState;
use crate::scoring::ScoreConfig;
use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub m_samples: usize,
    pub beta: f64,
    pub seed: u64,
    /// Decay the learning rate to 0 along a half cosine after warmup.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 100,
            batch_size: 256,
            epochs: 500,
            grad_clip_norm: 1.0,
            ema_decay: 0.999,
            m_samples: 2,
            beta: 1.0,
            seed: 0,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(param(format!("ema_decay must lie in (0,1), got {}", self.ema_decay)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(param(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(param("batch_size and epochs must be positive"));
        }
        self.score().validate()
    }

    pub fn score(&self) -> ScoreConfig {
        ScoreConfig { beta: self.beta, m: self.m_samples }
    }
}

/// Linear warmup from 0 to `lr`, then constant (or cosine decay to 0 at
/// `total_steps` when enabled).
pub fn lr_at_step(config: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    if step < config.warmup_steps {
        return config.lr * step as f64 / config.warmup_steps as f64;
    }
    if !config.cosine_decay || total_steps <= config.warmup_steps {
        return config.lr;
    }
    let progress = ((step - config.warmup_steps) as f64 / (total_steps - config.warmup_steps) as f64).min(1.0);
    0.5 * config.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= c);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self { shadow: params.to_vec(), decay }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`, written as an
    /// increment so that a shadow equal to `params` stays bit-identical.
    pub fn update(&mut self, params: &[f64]) {
        let w = 1.0 - self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s += w * (p - *s);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub raw: Mlp,
    pub ema: Mlp,
    pub steps: u64,
    pub log: Vec<LogRow>,
}

/// Shared optimiser state for unit-level and aggregate training.
pub(crate) struct Optimizer {
    pub model: Mlp,
    adam: Adam,
    pub ema: EmaState,
    pub step: u64,
    pub total_steps: u64,
    pub log: Vec<LogRow>,
    config: TrainConfig,
}

impl Optimizer {
    pub fn new(model: Mlp, config: &TrainConfig, total_steps: u64) -> Self {
        let n = model.params().len();
        let ema = EmaState::new(model.params(), config.ema_decay);
        Self { model, adam: Adam::new(n), ema, step: 0, total_steps, log: vec![], config: config.clone() }
    }

    pub fn apply(&mut self, loss: f64, mut grads: Vec<f64>) -> Result<()> {
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("step {}: loss {loss}", self.step)));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        // the first update uses the lr after one step of warmup
        let lr = lr_at_step(&self.config, self.step + 1, self.total_steps);
        self.adam.step(self.model.params_mut(), &grads, lr);
        self.ema.update(self.model.params());
        self.step += 1;
        self.log.push(LogRow { step: self.step, loss, lr, grad_norm });
        Ok(())
    }

    pub fn finish(self) -> Result<TrainedModel> {
        let ema = Mlp::from_params(self.model.config().clone(), self.ema.shadow)?;
        Ok(TrainedModel { raw: self.model, ema, steps: self.step, log: self.log })
    }
}

/// Train a denoiser on paired endpoints `(x0, x1)` with the bridge
/// `schedule`. Every step draws `t ~ U[0,1]` per pair, corrupts the pair and
/// descends the negated energy score.
pub fn train(
    rng: &mut RngState,
    x0: ArrayView2<'_, i64>,
    x1: ArrayView2<'_, i64>,
    side: Option<ArrayView2<'_, f64>>,
    schedule: &BridgeSchedule,
    model_config: &DenoiserConfig,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let n = x0.nrows();
    if n == 0 {
        return Err(param("training needs a nonempty dataset"));
    }
    if x1.dim() != x0.dim() || x0.ncols() != model_config.input_dim {
        return Err(Error::Dimension(format!(
            "x0 {:?}, x1 {:?}, model input_dim {}",
            x0.dim(),
            x1.dim(),
            model_config.input_dim
        )));
    }
    let model = Mlp::new(model_config.clone(), rng)?;
    let per_epoch = n.div_ceil(config.batch_size) as u64;
    let mut opt = Optimizer::new(model, config, per_epoch * config.epochs as u64);
    let score = config.score();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let b0 = x0.select(Axis(0), chunk);
            let b1 = x1.select(Axis(0), chunk);
            let bz = side.map(|z| z.select(Axis(0), chunk));
            let times = Array1::from_shape_fn(chunk.len(), |_| rng.random::<f64>());
            let x_t = corrupt_rows(rng, schedule, b0.view(), b1.view(), times.view())?;
            let targets = b0.mapv(|v| v as f64);
            let batch = LossBatch {
                x_t: x_t.view(),
                t: times.view(),
                side: bz.as_ref().map(|z| z.view()),
                targets: targets.view(),
                group_size: 1,
            };
            let noise = draw_noise(rng, chunk.len(), score.m, model_config.noise_dim);
            let (loss, grads) = loss_and_grads(&opt.model, &batch, noise.view(), &score)
                .map_err(|e| Error::Divergence(format!("step {}: {e}", opt.step)))?;
            opt.apply(loss, grads)?;
        }
    }
    opt.finish()
}
