//! Closed-form noise prediction for diagonal Gaussian mixtures.
//!
//! If the clean data is distributed as `sum_k w_k N(mu_k, diag(v_k))`, the
//! noisy marginal at step `t` is the mixture with means `sqrt(ab) mu_k` and
//! variances `ab v_k + 1 - ab`, and the optimal noise predictor is
//! `-sqrt(1 - ab) * grad log p_t(z)`.

use crate::diffusion::{standard_normal_vec, Conditioning, DenoiserBackend, NoiseSchedule};
use crate::error::{check_len, Error, Result};
use crate::world::{gaussian_for_condition, View, WorldConfig};

/// Variances are floored here before any division.
pub const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Components as `(weight, mean, diagonal variance)`.
    pub fn new(components: Vec<(f64, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let dim = components[0].1.len();
        let mut total = 0.0;
        let mut out = Vec::with_capacity(components.len());
        for (weight, mean, var) in components {
            check_len("mixture mean", dim, mean.len())?;
            check_len("mixture variance", dim, var.len())?;
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(Error::Config(format!("mixture weight {weight} must be > 0")));
            }
            if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("mixture variances must be > 0".into()));
            }
            if mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config("mixture means must be finite".into()));
            }
            total += weight;
            out.push(Component {
                weight,
                mean,
                var: var.into_iter().map(|v| v.max(VAR_FLOOR)).collect(),
            });
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components: out })
    }

    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![(1.0, mean, var)])
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Marginal of the forward process at step `t`.
    pub fn diffused(&self, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        let ab = *sched
            .alpha_bar()
            .get(t)
            .ok_or_else(|| Error::Range(format!("diffusion step {t} out of range")))?;
        Ok(self.diffused_with(ab))
    }

    fn diffused_with(&self, alpha_bar: f64) -> Self {
        let s = alpha_bar.sqrt();
        Self {
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| s * m).collect(),
                    var: c
                        .var
                        .iter()
                        .map(|v| (alpha_bar * v + (1.0 - alpha_bar)).max(VAR_FLOOR))
                        .collect(),
                })
                .collect(),
        }
    }

    fn log_weighted_densities(&self, z: &[f64]) -> Vec<f64> {
        const LN_2PI: f64 = 1.837_877_066_409_345_5;
        self.components
            .iter()
            .map(|c| {
                let quad: f64 = z
                    .iter()
                    .zip(&c.mean)
                    .zip(&c.var)
                    .map(|((x, m), v)| (x - m) * (x - m) / v + v.ln() + LN_2PI)
                    .sum();
                c.weight.ln() - 0.5 * quad
            })
            .collect()
    }

    /// Posterior component weights at `z`, via log-sum-exp.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("responsibilities z", self.dim(), z.len())?;
        Ok(softmax(&self.log_weighted_densities(z)))
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_len("log_density z", self.dim(), z.len())?;
        let l = self.log_weighted_densities(z);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
    }

    /// Draws one sample: a component by weight, then independent normals.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        standard_normal_vec(rng, c.mean.len())
            .into_iter()
            .zip(c.mean.iter().zip(&c.var))
            .map(|(n, (m, v))| m + v.sqrt() * n)
            .collect()
    }

    /// `grad_z log p(z)`.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(z)?;
        let mut out = vec![0.0; z.len()];
        for (c, rk) in self.components.iter().zip(&r) {
            if *rk == 0.0 {
                continue;
            }
            for ((o, x), (m, v)) in out.iter_mut().zip(z).zip(c.mean.iter().zip(&c.var)) {
                *o -= rk * (x - m) / v;
            }
        }
        Ok(out)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Optimal noise prediction for data drawn from `mixture`.
pub fn predict_eps(
    z: &[f64],
    t: usize,
    mixture: &GaussianMixture,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let m_t = mixture.diffused(t, sched)?;
    let scale = (1.0 - sched.alpha_bar()[t]).sqrt();
    let eps: Vec<f64> = m_t.score(z)?.into_iter().map(|s| -scale * s).collect();
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal(format!(
            "non-finite analytic noise prediction at step {t}"
        )));
    }
    Ok(eps)
}

/// Training-free backend: maps each condition to its toy data distribution
/// and returns the exact noise prediction.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    world: WorldConfig,
    view: View,
    unconditional: GaussianMixture,
}

impl AnalyticDenoiser {
    /// The unconditional distribution defaults to a standard normal.
    pub fn new(world: WorldConfig, view: View) -> Result<Self> {
        world.validate()?;
        let d = world.latent_dim();
        let unconditional = GaussianMixture::single(vec![0.0; d], vec![1.0; d])?;
        Ok(Self {
            world,
            view,
            unconditional,
        })
    }

    pub fn with_unconditional(mut self, mixture: GaussianMixture) -> Result<Self> {
        check_len("unconditional mixture", self.world.latent_dim(), mixture.dim())?;
        self.unconditional = mixture;
        Ok(self)
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn view(&self) -> View {
        self.view
    }
}

impl DenoiserBackend for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.world.latent_dim()
    }

    fn frame_width(&self) -> usize {
        self.world.frame_width()
    }

    fn supports_block_conditioning(&self) -> bool {
        false
    }

    fn predict_eps(
        &self,
        z: &[f64],
        t: usize,
        sched: &NoiseSchedule,
        cond: Conditioning<'_>,
    ) -> Result<Vec<f64>> {
        let cond = match cond {
            Conditioning::Uniform(c) => c,
            Conditioning::PerBlock(_) => {
                return Err(Error::Unsupported(
                    "the analytic backend has no blocks to condition separately".into(),
                ))
            }
        };
        check_len("analytic condition", self.world.event_dim(), cond.event_dim())?;
        match gaussian_for_condition(cond, &self.world, self.view)? {
            Some(m) => predict_eps(z, t, &m, sched),
            None => predict_eps(z, t, &self.unconditional, sched),
        }
    }
}
