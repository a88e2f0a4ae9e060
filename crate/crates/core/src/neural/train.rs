use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, TrainBatch};
use crate::conditioning::{compose_single, BlockAssignment, ConditionEmbedding};
use crate::diffusion::{standard_normal_vec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::suite::{generate_category, Category, PromptRecord, SuiteGenConfig};
use crate::world::{condition_of, gaussian_of, sample_trajectory, EventChoice, EventParams, View, WorldConfig};

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Exponential moving average of the weights; `None` disables it.
    pub ema_decay: Option<f64>,
    /// Loss trace interval in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            ema_decay: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be >= 1".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay {d} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Source of `(clean latent, condition)` training pairs.
pub trait TrainingData {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionEmbedding)>;
}

/// One fixed event: the data is exactly `N(mean_trajectory(e, e), sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct FixedEventData {
    pub event: EventParams,
    pub world: WorldConfig,
    pub view: View,
}

impl TrainingData for FixedEventData {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionEmbedding)> {
        let e = &self.event;
        let traj = sample_trajectory(e, e, self.world.frames, self.world.sigma, rng.random(), self.view)?;
        Ok((traj.into_flat(), compose_single(&e.embed(), self.world.event_dim())?))
    }
}

/// A fresh random single event per example.
#[derive(Debug, Clone)]
pub struct RandomEventData {
    pub world: WorldConfig,
    pub gen: SuiteGenConfig,
    pub view: View,
}

impl TrainingData for RandomEventData {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionEmbedding)> {
        let rec = generate_category(Category::HumanIdentity, 1, rng.random(), &self.gen)?;
        let e = &rec[0].events[0];
        let traj = sample_trajectory(e, e, self.world.frames, self.world.sigma, rng.random(), self.view)?;
        Ok((traj.into_flat(), compose_single(&e.embed(), self.world.event_dim())?))
    }
}

/// Uniformly chosen suite records, each conditioned on event 1, event 2 or
/// the concatenation, with data drawn from the matching toy distribution.
#[derive(Debug, Clone)]
pub struct SuiteData {
    pub records: Vec<PromptRecord>,
    pub world: WorldConfig,
}

impl TrainingData for SuiteData {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionEmbedding)> {
        if self.records.is_empty() {
            return Err(Error::Config("training suite is empty".into()));
        }
        let rec = &self.records[rng.random_range(0..self.records.len())];
        let which = [EventChoice::Event1, EventChoice::Event2, EventChoice::Concat][rng.random_range(0..3)];
        let mixture = gaussian_of(rec, which, &self.world)?;
        Ok((mixture.sample(rng), condition_of(rec, which)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean training loss over the preceding `log_every` steps.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub trace: Vec<LossPoint>,
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
    }
}

/// Trains on the denoising objective with uniform per-block conditioning and
/// `t` drawn uniformly per example. Deterministic given `cfg.seed`.
pub fn train(
    mut model: DenoiserModel,
    data: &dyn TrainingData,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.param_count(), cfg.learning_rate, cfg.adam);
    let mut ema = cfg.ema_decay.map(|_| model.params().to_vec());
    let mut trace = Vec::new();
    let mut window = 0.0;
    let n_blocks = model.n_blocks();
    let dim = model.config().dim;

    for step in 1..=cfg.steps {
        let mut rows = Vec::with_capacity(cfg.batch_size);
        let mut assigns = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (z0, cond) = data.draw(&mut rng)?;
            let t = rng.random_range(0..sched.n_steps());
            let eps = standard_normal_vec(&mut rng, dim);
            rows.push((z0, t, eps));
            assigns.push(BlockAssignment::uniform(n_blocks, cond)?);
        }
        let refs: Vec<_> = rows
            .into_iter()
            .zip(&assigns)
            .map(|((z, t, e), a)| (z, t, e, a))
            .collect();
        let batch = TrainBatch::from_examples(&refs)?;
        let (loss, grads) = model.loss_and_grads(&batch, sched).map_err(|e| match e {
            Error::Training(msg) => Error::Training(format!("step {step}: {msg}")),
            other => other,
        })?;
        if loss > DIVERGENCE_LOSS {
            return Err(Error::Training(format!(
                "diverged at step {step}: loss {loss:.3e} exceeds {DIVERGENCE_LOSS:.0e}"
            )));
        }
        adam.update(model.params_mut(), &grads);
        if !model.is_finite() {
            return Err(Error::Training(format!(
                "non-finite parameters after step {step} (loss {loss})"
            )));
        }
        if let (Some(avg), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
            for (a, p) in avg.iter_mut().zip(model.params()) {
                *a = decay * *a + (1.0 - decay) * p;
            }
        }
        window += loss;
        if step % cfg.log_every == 0 {
            trace.push(LossPoint {
                step,
                loss: window / cfg.log_every as f64,
            });
            log::debug!("step {step}: loss {:.6}", window / cfg.log_every as f64);
            window = 0.0;
        }
    }

    if let Some(avg) = ema {
        model.params_mut().copy_from_slice(&avg);
    }
    Ok(TrainOutcome { model, trace })
}
