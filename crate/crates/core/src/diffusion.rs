//! Forward noising, the linear beta schedule, and the reverse sampler.
//!
//! Denoising iteration `i` runs diffusion step `t = N - 1 - i`, so the
//! iteration index used by [`StepSchedule`] counts from the noisiest step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{BlockAssignment, ConditionEmbedding, StepSchedule};
use crate::error::{check_len, Error, Result};
use crate::world::Trajectory;

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta from `beta_min` to `beta_max` over `n_steps` steps.
    pub fn linear(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("noise schedule needs n_steps >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta = (0..n_steps)
            .map(|t| {
                if n_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * t as f64 / (n_steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    pub fn with_default_betas(n_steps: usize) -> Result<Self> {
        Self::linear(n_steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < self.n_steps() {
            Ok(())
        } else {
            Err(Error::Range(format!(
                "diffusion step {t} is outside [0, {})",
                self.n_steps()
            )))
        }
    }
}

/// `sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps`.
pub fn forward_noise(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len("forward_noise eps", z0.len(), eps.len())?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// One DDPM ancestral update with `sigma_t^2 = beta[t]` (and `sigma_0 = 0`).
pub fn ancestral_step(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_len("ancestral_step eps_hat", z_t.len(), eps_hat.len())?;
    check_len("ancestral_step noise", z_t.len(), noise.len())?;
    sched.check_step(t)?;
    let beta = sched.beta[t];
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let one_minus_ab = 1.0 - sched.alpha_bar[t];
    let eps_coef = if beta == 0.0 {
        0.0
    } else {
        beta / one_minus_ab.sqrt()
    };
    let sigma = if t == 0 { 0.0 } else { beta.sqrt() };
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((z, e), n)| {
            let mean = inv_sqrt_alpha * (z - eps_coef * e);
            if sigma == 0.0 {
                mean
            } else {
                mean + sigma * n
            }
        })
        .collect())
}

/// Deterministic (eta = 0) update from step `t` to `t - 1`.
pub fn deterministic_step(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len("deterministic_step eps_hat", z_t.len(), eps_hat.len())?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar[t];
    let ab_prev = if t == 0 { 1.0 } else { sched.alpha_bar[t - 1] };
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| {
            let x0 = (z - sb * e) / sa;
            pa * x0 + pb * e
        })
        .collect())
}

/// How a single denoiser call is conditioned.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Every block (or the whole model) sees the same condition.
    Uniform(&'a ConditionEmbedding),
    /// Block `j` sees `assignment.block(j)`.
    PerBlock(&'a BlockAssignment),
}

/// A noise predictor queried by the sampler.
pub trait DenoiserBackend: Sync {
    /// Latent dimension `D`.
    fn dim(&self) -> usize;

    /// Channels per frame; the latent reshapes to `D / F` frames.
    fn frame_width(&self) -> usize;

    /// Whether [`Conditioning::PerBlock`] is meaningful for this backend.
    fn supports_block_conditioning(&self) -> bool;

    /// Number of conditioned blocks, for backends that have them.
    fn n_blocks(&self) -> Option<usize> {
        None
    }

    fn predict_eps(
        &self,
        z: &[f64],
        t: usize,
        sched: &NoiseSchedule,
        cond: Conditioning<'_>,
    ) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ancestral,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub kind: SamplerKind,
    /// Classifier-free guidance weight; `1.0` disables guidance.
    pub guidance_scale: f64,
    pub seed: u64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            kind: SamplerKind::Ancestral,
            guidance_scale: 1.0,
            seed: 0,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler n_steps must be >= 1".into()));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.n_steps, self.beta_min, self.beta_max)
    }
}

/// Sampler state between iterations.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub step_index: usize,
    rng: ChaCha8Rng,
}

impl LatentState {
    /// Draws `z ~ N(0, I)` from a fresh RNG seeded with `seed`.
    pub fn initial(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = standard_normal_vec(&mut rng, dim);
        Self {
            z,
            step_index: 0,
            rng,
        }
    }
}

pub(crate) fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn guided_eps(
    denoiser: &dyn DenoiserBackend,
    z: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    cond: Conditioning<'_>,
    w: f64,
) -> Result<Vec<f64>> {
    let eps_c = denoiser.predict_eps(z, t, sched, cond)?;
    if w == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = match cond {
        Conditioning::Uniform(c) => {
            let null = ConditionEmbedding::unconditional(c.event_dim());
            denoiser.predict_eps(z, t, sched, Conditioning::Uniform(&null))?
        }
        Conditioning::PerBlock(a) => {
            let null = ConditionEmbedding::unconditional(a.event_dim());
            let uniform = BlockAssignment::uniform(a.n_blocks(), null)?;
            denoiser.predict_eps(z, t, sched, Conditioning::PerBlock(&uniform))?
        }
    };
    Ok(eps_u
        .iter()
        .zip(&eps_c)
        .map(|(u, c)| u + w * (c - u))
        .collect())
}

/// Runs the full reverse process.
///
/// At iteration `i` the denoiser sees `schedule.condition_at(i)`, unless a
/// block assignment is given, in which case that assignment is used at every
/// iteration and the schedule only fixes `N`.
pub fn sample(
    denoiser: &dyn DenoiserBackend,
    schedule: &StepSchedule,
    block_assign: Option<&BlockAssignment>,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if schedule.n_steps() != cfg.n_steps {
        return Err(Error::Schedule(format!(
            "schedule covers {} steps but the sampler runs {}",
            schedule.n_steps(),
            cfg.n_steps
        )));
    }
    if block_assign.is_some() && !denoiser.supports_block_conditioning() {
        return Err(Error::Unsupported(
            "block assignments need a block-structured backend".into(),
        ));
    }
    let sched = cfg.noise_schedule()?;
    let n = cfg.n_steps;
    let dim = denoiser.dim();
    let mut state = LatentState::initial(dim, cfg.seed);

    for i in 0..n {
        let t = n - 1 - i;
        let cond = match block_assign {
            Some(a) => Conditioning::PerBlock(a),
            None => Conditioning::Uniform(schedule.condition_at(i)?),
        };
        let eps = guided_eps(denoiser, &state.z, t, &sched, cond, cfg.guidance_scale)?;
        state.z = match cfg.kind {
            SamplerKind::Ancestral => {
                let noise = standard_normal_vec(&mut state.rng, dim);
                ancestral_step(&state.z, t, &eps, &sched, &noise)?
            }
            SamplerKind::Deterministic => deterministic_step(&state.z, t, &eps, &sched)?,
        };
        state.step_index = i + 1;
    }

    let width = denoiser.frame_width();
    if width == 0 || !dim.is_multiple_of(width) {
        return Err(Error::Internal(format!(
            "latent dimension {dim} is not a whole number of {width}-wide frames"
        )));
    }
    Trajectory::from_flat(dim / width, width, state.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        assert_eq!(s.beta(), &[0.02]);
        assert_eq!(s.alpha_bar(), &[0.98]);
    }

    #[test]
    fn fifty_steps_strictly_decreasing() {
        let s = NoiseSchedule::with_default_betas(50).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0 - 1e-4);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(s.beta().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!((s.beta()[49] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_is_the_running_product() {
        for &(n, lo, hi) in &[(1, 0.5, 0.5), (7, 0.01, 0.3), (500, 1e-4, 0.02)] {
            let s = NoiseSchedule::linear(n, lo, hi).unwrap();
            for t in 0..n {
                let direct: f64 = (0..=t).map(|u| 1.0 - s.beta()[u]).product();
                assert!((s.alpha_bar()[t] - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invalid_bounds() {
        assert!(matches!(NoiseSchedule::linear(0, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    fn injected(beta: Vec<f64>, alpha_bar: Vec<f64>) -> NoiseSchedule {
        NoiseSchedule {
            alpha: beta.iter().map(|b| 1.0 - b).collect(),
            beta,
            alpha_bar,
        }
    }

    #[test]
    fn forward_noise_limits() {
        let z0 = [1.0, -2.0, 3.5];
        let eps = [0.3, 0.1, -0.7];
        let clean = injected(vec![0.0], vec![1.0]);
        assert_eq!(forward_noise(&z0, 0, &eps, &clean).unwrap(), z0.to_vec());
        let noisy = injected(vec![0.5], vec![0.0]);
        assert_eq!(forward_noise(&z0, 0, &eps, &noisy).unwrap(), eps.to_vec());
        let s = NoiseSchedule::with_default_betas(10).unwrap();
        assert_eq!(
            forward_noise(&[0.0; 3], 5, &[0.0; 3], &s).unwrap(),
            vec![0.0; 3]
        );
        assert!(matches!(
            forward_noise(&z0, 0, &[0.0; 2], &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn final_step_ignores_noise() {
        let s = NoiseSchedule::with_default_betas(10).unwrap();
        let z = [0.5, -0.25];
        let e = [0.1, 0.2];
        let a = ancestral_step(&z, 0, &e, &s, &[0.0, 0.0]).unwrap();
        let b = ancestral_step(&z, 0, &e, &s, &[5.0, -3.0]).unwrap();
        assert_eq!(a, b);
        let c = ancestral_step(&z, 3, &e, &s, &[5.0, -3.0]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_limit() {
        let s = injected(vec![0.0], vec![1.0]);
        let z = [0.7, -1.3];
        assert_eq!(
            ancestral_step(&z, 0, &[0.0, 0.0], &s, &[0.0, 0.0]).unwrap(),
            z.to_vec()
        );
    }

    #[test]
    fn one_step_inversion_recovers_z0() {
        // With N = 1: z1 = sqrt(1-b) z0 + sqrt(b) eps, and the final update
        // (z1 - sqrt(b) eps) / sqrt(1-b) is the exact inverse.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let b: f64 = rng.random_range(1e-4..0.5);
            let s = NoiseSchedule::linear(1, b, b).unwrap();
            let z0 = standard_normal_vec(&mut rng, 8);
            let eps = standard_normal_vec(&mut rng, 8);
            let z1 = forward_noise(&z0, 0, &eps, &s).unwrap();
            let back = ancestral_step(&z1, 0, &eps, &s, &[0.0; 8]).unwrap();
            for (a, b) in back.iter().zip(&z0) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn deterministic_step_inverts_at_t0() {
        let s = NoiseSchedule::with_default_betas(20).unwrap();
        let z0 = [0.4, -1.1, 2.0];
        let eps = [0.9, 0.2, -0.3];
        let z = forward_noise(&z0, 0, &eps, &s).unwrap();
        let back = deterministic_step(&z, 0, &eps, &s).unwrap();
        for (a, b) in back.iter().zip(&z0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.guidance_scale = f64::INFINITY;
        assert!(c.validate().is_err());
        c.guidance_scale = 1.0;
        c.n_steps = 0;
        assert!(c.validate().is_err());
    }
}
