//! The toy trajectory-video domain.
//!
//! A trajectory is a `T x F` matrix. Each frame holds
//! `[pos_x, pos_y, a_0..a_{d-1}, g_0..g_{d-1}]`: a position, an identity
//! vector and a background vector. A dual-event trajectory follows event 1
//! for frames `f < T/2` and event 2 afterwards; the displacement *into*
//! frame `f` is the drift of the event active at frame `f`.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::GaussianMixture;
use crate::conditioning::{compose_concat, compose_single, ConditionEmbedding};
use crate::diffusion::standard_normal_vec;
use crate::error::{check_len, Error, Result};
use crate::suite::PromptRecord;

/// One toy event: a constant drift plus identity and background features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventParams {
    /// Heading in radians, `[0, 2pi)`.
    pub theta: f64,
    /// Units per frame.
    pub speed: f64,
    pub identity: Vec<f64>,
    pub background: Vec<f64>,
}

impl EventParams {
    pub fn new(theta: f64, speed: f64, identity: Vec<f64>, background: Vec<f64>) -> Self {
        Self {
            theta: wrap_angle(theta),
            speed,
            identity,
            background,
        }
    }

    pub fn drift(&self) -> [f64; 2] {
        [self.speed * self.theta.cos(), self.speed * self.theta.sin()]
    }

    pub fn feature_dim(&self) -> usize {
        self.identity.len()
    }

    /// `[cos theta, sin theta, s, a.., g..]`, length `3 + 2d`.
    pub fn embed(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + 2 * self.identity.len());
        v.push(self.theta.cos());
        v.push(self.theta.sin());
        v.push(self.speed);
        v.extend_from_slice(&self.identity);
        v.extend_from_slice(&self.background);
        v
    }

    /// Inverse of [`Self::embed`] up to rounding of the heading.
    pub fn from_embedding(slot: &[f64]) -> Result<Self> {
        if slot.len() < 3 || !(slot.len() - 3).is_multiple_of(2) {
            return Err(Error::Shape {
                what: "event embedding (3 + 2d)",
                expected: 3 + 2 * (slot.len().saturating_sub(3) / 2),
                got: slot.len(),
            });
        }
        let d = (slot.len() - 3) / 2;
        Ok(Self::new(
            slot[1].atan2(slot[0]),
            slot[2],
            slot[3..3 + d].to_vec(),
            slot[3 + d..].to_vec(),
        ))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.theta.is_finite() && (0.0..TAU).contains(&self.theta)) {
            return Err(format!("theta {} must lie in [0, 2pi)", self.theta));
        }
        if !self.speed.is_finite() || self.speed < 0.0 {
            return Err(format!("speed {} must be finite and >= 0", self.speed));
        }
        if self.identity.iter().chain(&self.background).any(|v| !v.is_finite()) {
            return Err("identity and background must be finite".into());
        }
        if self.identity.len() != self.background.len() {
            return Err(format!(
                "identity has {} features but background has {}",
                self.identity.len(),
                self.background.len()
            ));
        }
        Ok(())
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Egocentric: heading-relative displacements instead of positions.
    First,
    /// Exocentric: absolute positions.
    Third,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::First => "first",
            View::Third => "third",
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major `frames x width` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: usize,
    width: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn from_flat(frames: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len("trajectory data", frames * width, data.len())?;
        Ok(Self {
            frames,
            width,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Feature dimension `d`, from `F = 2 + 2d`.
    pub fn feature_dim(&self) -> usize {
        (self.width - 2) / 2
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.width..(f + 1) * self.width]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.data[f * self.width..(f + 1) * self.width]
    }

    pub fn position(&self, f: usize) -> [f64; 2] {
        let row = self.frame(f);
        [row[0], row[1]]
    }

    pub fn identity(&self, f: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.frame(f)[2..2 + d]
    }

    pub fn background(&self, f: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.frame(f)[2 + d..2 + 2 * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Inverse of the first-person transform: re-integrates heading-relative
    /// displacements into absolute positions, rotating each displacement by
    /// the heading of the event active at its destination frame. The last
    /// frame's (repeated) displacement is discarded.
    pub fn to_third_person(&self, e1: &EventParams, e2: &EventParams) -> Trajectory {
        let split = self.frames / 2;
        let mut out = self.clone();
        let mut p = [0.0, 0.0];
        out.frame_mut(0)[..2].copy_from_slice(&p);
        for f in 1..self.frames {
            let e = if f < split { e1 } else { e2 };
            let [ux, uy] = self.position(f - 1);
            let (s, c) = e.theta.sin_cos();
            p = [p[0] + c * ux - s * uy, p[1] + s * ux + c * uy];
            out.frame_mut(f)[..2].copy_from_slice(&p);
        }
        out
    }
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Per-frame drift (into that frame), heading, identity and background.
struct FramePlan<'a> {
    drift: Vec<[f64; 2]>,
    heading: Vec<f64>,
    identity: Vec<&'a [f64]>,
    background: Vec<&'a [f64]>,
}

fn render(plan: &FramePlan<'_>, view: View) -> Result<Trajectory> {
    let frames = plan.drift.len();
    let d = plan.identity[0].len();
    let width = 2 + 2 * d;
    let mut traj = Trajectory::from_flat(frames, width, vec![0.0; frames * width])?;
    let mut p = [0.0, 0.0];
    let mut positions = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            p = [p[0] + plan.drift[f][0], p[1] + plan.drift[f][1]];
        }
        positions.push(p);
    }
    for f in 0..frames {
        let pos = match view {
            View::Third => positions[f],
            View::First => {
                // Displacement out of frame f, expressed in the heading frame
                // of the event that produced it; the last frame repeats.
                let g = if f + 1 < frames { f + 1 } else { f };
                let delta = [
                    positions[g][0] - positions[g - 1][0],
                    positions[g][1] - positions[g - 1][1],
                ];
                rotate(delta, -plan.heading[g])
            }
        };
        let row = traj.frame_mut(f);
        row[0] = pos[0];
        row[1] = pos[1];
        row[2..2 + d].copy_from_slice(plan.identity[f]);
        row[2 + d..].copy_from_slice(plan.background[f]);
    }
    Ok(traj)
}

fn check_events(e1: &EventParams, e2: &EventParams) -> Result<()> {
    check_len("identity features", e1.identity.len(), e2.identity.len())?;
    check_len("background features", e1.identity.len(), e1.background.len())?;
    check_len("background features", e1.identity.len(), e2.background.len())?;
    Ok(())
}

/// Noise-free dual-event trajectory: event 1 up to frame `T/2`, then event 2.
pub fn mean_trajectory(
    e1: &EventParams,
    e2: &EventParams,
    frames: usize,
    view: View,
) -> Result<Trajectory> {
    if frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames, got {frames}")));
    }
    check_events(e1, e2)?;
    let split = frames / 2;
    let active = |f: usize| if f < split { e1 } else { e2 };
    let plan = FramePlan {
        drift: (0..frames).map(|f| active(f).drift()).collect(),
        heading: (0..frames).map(|f| active(f).theta).collect(),
        identity: (0..frames).map(|f| active(f).identity.as_slice()).collect(),
        background: (0..frames).map(|f| active(f).background.as_slice()).collect(),
    };
    render(&plan, view)
}

/// The "blended" reading of a concatenated prompt: both events' average drift
/// throughout, with identity and background switching at the midpoint as in
/// [`mean_trajectory`].
pub fn blended_trajectory(
    e1: &EventParams,
    e2: &EventParams,
    frames: usize,
    view: View,
) -> Result<Trajectory> {
    if frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames, got {frames}")));
    }
    check_events(e1, e2)?;
    let split = frames / 2;
    let (d1, d2) = (e1.drift(), e2.drift());
    let avg = [(d1[0] + d2[0]) / 2.0, (d1[1] + d2[1]) / 2.0];
    let heading = if avg[0] == 0.0 && avg[1] == 0.0 {
        e1.theta
    } else {
        avg[1].atan2(avg[0])
    };
    let active = |f: usize| if f < split { e1 } else { e2 };
    let plan = FramePlan {
        drift: vec![avg; frames],
        heading: vec![heading; frames],
        identity: (0..frames).map(|f| active(f).identity.as_slice()).collect(),
        background: (0..frames).map(|f| active(f).background.as_slice()).collect(),
    };
    render(&plan, view)
}

/// [`mean_trajectory`] plus i.i.d. `N(0, sigma^2)` noise on every entry.
pub fn sample_trajectory(
    e1: &EventParams,
    e2: &EventParams,
    frames: usize,
    sigma: f64,
    seed: u64,
    view: View,
) -> Result<Trajectory> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Range(format!("noise std {sigma} must be >= 0")));
    }
    let mut traj = mean_trajectory(e1, e2, frames, view)?;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = standard_normal_vec(&mut rng, traj.data.len());
        for (v, n) in traj.data.iter_mut().zip(noise) {
            *v += sigma * n;
        }
    }
    Ok(traj)
}

/// Shared parameters of the toy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Frames per trajectory, `T`.
    pub frames: usize,
    /// Identity/background feature dimension, `d`.
    pub feature_dim: usize,
    /// Per-entry std of the conditional data distribution.
    pub sigma: f64,
    /// Weight of the sequential component for concatenated prompts.
    pub w_mix: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            feature_dim: 2,
            sigma: 0.5,
            w_mix: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn frame_width(&self) -> usize {
        2 + 2 * self.feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.frames * self.frame_width()
    }

    /// Slot dimension `E = 3 + 2d`.
    pub fn event_dim(&self) -> usize {
        3 + 2 * self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!(
                "world needs at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be > 0", self.sigma)));
        }
        if !self.w_mix.is_finite() {
            return Err(Error::Config("w_mix must be finite".into()));
        }
        Ok(())
    }
}

/// Which prompt of a record to condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventChoice {
    Event1,
    Event2,
    Concat,
}

pub fn condition_of(rec: &PromptRecord, which: EventChoice) -> Result<ConditionEmbedding> {
    let [e1, e2] = rec.event_pair()?;
    let dim = 3 + 2 * e1.feature_dim();
    match which {
        EventChoice::Event1 => compose_single(&e1.embed(), dim),
        EventChoice::Event2 => compose_single(&e2.embed(), dim),
        EventChoice::Concat => compose_concat(&e1.embed(), &e2.embed(), dim),
    }
}

/// `N(flatten(mean_trajectory(e, e)), sigma^2 I)`.
pub fn single_event_gaussian(
    e: &EventParams,
    world: &WorldConfig,
    view: View,
) -> Result<GaussianMixture> {
    let mean = mean_trajectory(e, e, world.frames, view)?.into_flat();
    let var = vec![world.sigma * world.sigma; mean.len()];
    GaussianMixture::single(mean, var)
}

/// Two-component mixture for a concatenated prompt: weight `w_mix` on the
/// sequential "e1 then e2" trajectory and `1 - w_mix` on the blended one.
/// `w_mix` is clamped to `[0.01, 0.99]`.
pub fn concat_gaussian(
    e1: &EventParams,
    e2: &EventParams,
    world: &WorldConfig,
    view: View,
) -> Result<GaussianMixture> {
    let w = world.w_mix.clamp(0.01, 0.99);
    let var2 = world.sigma * world.sigma;
    let seq = mean_trajectory(e1, e2, world.frames, view)?.into_flat();
    let blend = blended_trajectory(e1, e2, world.frames, view)?.into_flat();
    let d = seq.len();
    GaussianMixture::new(vec![
        (w, seq, vec![var2; d]),
        (1.0 - w, blend, vec![var2; d]),
    ])
}

pub fn gaussian_of(
    rec: &PromptRecord,
    which: EventChoice,
    world: &WorldConfig,
) -> Result<GaussianMixture> {
    let [e1, e2] = rec.event_pair()?;
    match which {
        EventChoice::Event1 => single_event_gaussian(e1, world, rec.view),
        EventChoice::Event2 => single_event_gaussian(e2, world, rec.view),
        EventChoice::Concat => concat_gaussian(e1, e2, world, rec.view),
    }
}

/// Data distribution implied by a condition embedding, or `None` for the
/// unconditional embedding. A lone second slot is treated as a single event.
pub fn gaussian_for_condition(
    cond: &ConditionEmbedding,
    world: &WorldConfig,
    view: View,
) -> Result<Option<GaussianMixture>> {
    let m = match cond.flags() {
        (false, false) => return Ok(None),
        (true, false) => {
            single_event_gaussian(&EventParams::from_embedding(cond.slot1())?, world, view)?
        }
        (false, true) => {
            single_event_gaussian(&EventParams::from_embedding(cond.slot2())?, world, view)?
        }
        (true, true) => concat_gaussian(
            &EventParams::from_embedding(cond.slot1())?,
            &EventParams::from_embedding(cond.slot2())?,
            world,
            view,
        )?,
    };
    Ok(Some(m))
}
