//! A small residual block-stacked denoiser with per-block conditioning.
//!
//! ```text
//! h_0     = W_in z + b_in
//! u_j     = W1_j [h_j; temb(t); c_j] + b1_j
//! h_{j+1} = h_j + W2_j tanh(u_j) + b2_j          j = 0..B-1
//! eps_hat = W_out h_B + b_out
//! ```
//!
//! Every block receives its own condition `c_j`, so a [`BlockAssignment`] can
//! hand different prompts to shallow and deep blocks. Parameters live in one
//! flat buffer described by [`DenoiserModel::layout`]; gradients, the
//! optimizer and checkpoints all use the same order.

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    train, AdamConfig, FixedEventData, LossPoint, RandomEventData, SuiteData, TrainConfig,
    TrainOutcome, TrainingData,
};

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{BlockAssignment, ConditionEmbedding};
use crate::diffusion::{standard_normal_vec, Conditioning, DenoiserBackend, NoiseSchedule};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dimension `D`.
    pub dim: usize,
    /// Residual width `H`.
    pub hidden: usize,
    /// Block count `B`.
    pub blocks: usize,
    /// Sinusoidal timestep embedding width (even).
    pub time_dim: usize,
    /// Condition slot dimension `E`; each block sees `2E + 2` condition inputs.
    pub event_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            hidden: 128,
            blocks: 8,
            time_dim: 16,
            event_dim: 7,
        }
    }
}

impl ModelConfig {
    pub fn cond_dim(&self) -> usize {
        2 * self.event_dim + 2
    }

    fn block_in(&self) -> usize {
        self.hidden + self.time_dim + self.cond_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let ModelConfig {
            dim,
            hidden,
            blocks,
            time_dim,
            event_dim,
        } = *self;
        if dim == 0 || hidden == 0 || blocks == 0 || event_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if time_dim == 0 || time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_dim must be a positive even number, got {time_dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    /// 1 for bias vectors.
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn build_layout(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        specs.push(TensorSpec {
            name,
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
    };
    push("w_in".into(), cfg.hidden, cfg.dim);
    push("b_in".into(), cfg.hidden, 1);
    for j in 0..cfg.blocks {
        push(format!("block{j}.w1"), cfg.hidden, cfg.block_in());
        push(format!("block{j}.b1"), cfg.hidden, 1);
        push(format!("block{j}.w2"), cfg.hidden, cfg.hidden);
        push(format!("block{j}.b2"), cfg.hidden, 1);
    }
    push("w_out".into(), cfg.dim, cfg.hidden);
    push("b_out".into(), cfg.dim, 1);
    specs
}

// Indices into the layout.
const W_IN: usize = 0;
const B_IN: usize = 1;
fn w1(j: usize) -> usize {
    2 + 4 * j
}
fn b1(j: usize) -> usize {
    3 + 4 * j
}
fn w2(j: usize) -> usize {
    4 + 4 * j
}
fn b2(j: usize) -> usize {
    5 + 4 * j
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
struct ForwardCache {
    /// `h_j` entering each block, plus the final `h_B`.
    hidden: Vec<Array2<f64>>,
    /// `tanh(u_j)` per block.
    act: Vec<Array2<f64>>,
    temb: Array2<f64>,
}

impl DenoiserModel {
    /// Scaled-normal weights, zero biases and a zero output projection, so a
    /// fresh model predicts `eps_hat = 0` everywhere.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_blocks = config.blocks;
        let mut fill = |m: &mut Self, idx: usize, scale: f64| {
            let r = m.layout[idx].range();
            let draws = standard_normal_vec(&mut rng, r.len());
            for (p, d) in m.params[r].iter_mut().zip(draws) {
                *p = scale * d;
            }
        };
        fill(&mut m, W_IN, 1.0 / (config.dim as f64).sqrt());
        for j in 0..n_blocks {
            fill(&mut m, w1(j), 1.0 / (config.block_in() as f64).sqrt());
            fill(&mut m, w2(j), 0.5 / (config.hidden as f64).sqrt());
        }
        Ok(m)
    }

    /// Every parameter, including biases and the output projection, drawn
    /// from `N(0, scale^2 / fan_in)`-ish; for tests and gradient checks.
    pub fn randomized(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in m.layout.clone() {
            let scale = if spec.cols == 1 {
                0.1
            } else {
                1.0 / (spec.cols as f64).sqrt()
            };
            let draws = standard_normal_vec(&mut rng, spec.len());
            for (p, d) in m.params[spec.range()].iter_mut().zip(draws) {
                *p = scale * d;
            }
        }
        Ok(m)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let n = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        Ok(Self {
            config,
            layout,
            params: vec![0.0; n],
        })
    }

    pub(crate) fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        check_len("model parameters", m.params.len(), params.len())?;
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.config.blocks
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let s = &self.layout[idx];
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()]).expect("layout shape")
    }

    fn vec(&self, idx: usize) -> ndarray::ArrayView1<'_, f64> {
        let s = &self.layout[idx];
        ndarray::ArrayView1::from(&self.params[s.range()])
    }

    fn time_embedding(&self, t: &[usize]) -> Array2<f64> {
        time_embedding(t, self.config.time_dim)
    }

    fn forward_cached(
        &self,
        z: ArrayView2<'_, f64>,
        t: &[usize],
        conds: &[Array2<f64>],
    ) -> (Array2<f64>, ForwardCache) {
        let cfg = &self.config;
        let (h_dim, t_dim) = (cfg.hidden, cfg.time_dim);
        let temb = self.time_embedding(t);
        let mut h = z.dot(&self.mat(W_IN).t()) + self.vec(B_IN);
        let mut hidden = Vec::with_capacity(cfg.blocks + 1);
        let mut act = Vec::with_capacity(cfg.blocks);
        for (j, c) in conds.iter().enumerate().take(cfg.blocks) {
            let w = self.mat(w1(j));
            let u = h.dot(&w.slice(s![.., ..h_dim]).t())
                + temb.dot(&w.slice(s![.., h_dim..h_dim + t_dim]).t())
                + c.dot(&w.slice(s![.., h_dim + t_dim..]).t())
                + self.vec(b1(j));
            let a = u.mapv(f64::tanh);
            let next = &h + &a.dot(&self.mat(w2(j)).t()) + self.vec(b2(j));
            hidden.push(h);
            act.push(a);
            h = next;
        }
        let out = h.dot(&self.mat(w_out_idx(cfg)).t()) + self.vec(b_out_idx(cfg));
        hidden.push(h);
        (out, ForwardCache { hidden, act, temb })
    }

    /// Batched forward: `z` is `n x D`, `conds[j]` is the `n x (2E+2)`
    /// condition matrix for block `j`.
    pub fn forward_batch(
        &self,
        z: ArrayView2<'_, f64>,
        t: &[usize],
        conds: &[Array2<f64>],
    ) -> Result<Array2<f64>> {
        self.check_batch(z, t, conds)?;
        Ok(self.forward_cached(z, t, conds).0)
    }

    fn check_batch(&self, z: ArrayView2<'_, f64>, t: &[usize], conds: &[Array2<f64>]) -> Result<()> {
        let n = z.nrows();
        check_len("batch latent width", self.config.dim, z.ncols())?;
        check_len("batch timesteps", n, t.len())?;
        if conds.len() != self.config.blocks {
            return Err(Error::Config(format!(
                "model has {} blocks but {} block conditions were given",
                self.config.blocks,
                conds.len()
            )));
        }
        for c in conds {
            check_len("batch condition rows", n, c.nrows())?;
            check_len("batch condition width", self.config.cond_dim(), c.ncols())?;
        }
        Ok(())
    }

    /// Noise prediction for one latent under a per-block assignment.
    pub fn forward(&self, z_t: &[f64], t: usize, assign: &BlockAssignment) -> Result<Vec<f64>> {
        if assign.n_blocks() != self.config.blocks {
            return Err(Error::Config(format!(
                "assignment has {} blocks, model has {}",
                assign.n_blocks(),
                self.config.blocks
            )));
        }
        check_len("latent", self.config.dim, z_t.len())?;
        for c in assign.per_block() {
            check_len("condition slot", self.config.event_dim, c.event_dim())?;
        }
        Ok(self.forward_single(z_t, t, assign.per_block()))
    }

    /// `W x + b` for a row-major `W`, one contiguous dot product per row.
    fn affine(&self, w: usize, b: usize, x: &[f64], out: &mut [f64]) {
        let cols = self.layout[w].cols;
        let rows = self.params[self.layout[w].range()].chunks_exact(cols);
        for ((o, row), bias) in out.iter_mut().zip(rows).zip(&self.params[self.layout[b].range()]) {
            *o = dot(row, x) + bias;
        }
    }

    /// Same network as [`Self::forward_batch`] for a single row, without the
    /// per-call matrix packing a general GEMM does. Results agree with the
    /// batched path up to floating-point summation order.
    fn forward_single(&self, z: &[f64], t: usize, conds: &[ConditionEmbedding]) -> Vec<f64> {
        let cfg = &self.config;
        let (h_dim, t_dim) = (cfg.hidden, cfg.time_dim);
        let mut h = vec![0.0; h_dim];
        self.affine(W_IN, B_IN, z, &mut h);
        // Block input [h; temb; c], with temb fixed across blocks.
        let mut input = vec![0.0; cfg.block_in()];
        input[h_dim..h_dim + t_dim].copy_from_slice(time_embedding(&[t], t_dim).row(0).as_slice().expect("row"));
        let mut act = vec![0.0; h_dim];
        let mut delta = vec![0.0; h_dim];
        for (j, c) in conds.iter().enumerate() {
            input[..h_dim].copy_from_slice(&h);
            input.truncate(h_dim + t_dim);
            c.write_vector(&mut input);
            self.affine(w1(j), b1(j), &input, &mut act);
            act.iter_mut().for_each(|a| *a = a.tanh());
            self.affine(w2(j), b2(j), &act, &mut delta);
            h.iter_mut().zip(&delta).for_each(|(h, d)| *h += d);
        }
        let mut out = vec![0.0; cfg.dim];
        self.affine(w_out_idx(cfg), b_out_idx(cfg), &h, &mut out);
        out
    }

    /// Mean squared error `mean((eps_hat - eps)^2)` over all `n * D` entries,
    /// with its exact gradient in [`Self::layout`] order.
    pub fn loss_and_grads(&self, batch: &TrainBatch, sched: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
        let z_t = batch.noised(sched)?;
        self.check_batch(z_t.view(), &batch.t, &batch.conds)?;
        let n = z_t.nrows();
        if n == 0 {
            return Err(Error::Training("empty batch".into()));
        }
        let cfg = &self.config;
        let (h_dim, t_dim) = (cfg.hidden, cfg.time_dim);
        let (out, cache) = self.forward_cached(z_t.view(), &batch.t, &batch.conds);
        let diff = &out - &batch.eps;
        let scale = 1.0 / (n * cfg.dim) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss}")));
        }

        let mut grads = vec![0.0; self.params.len()];
        let d_out = diff * (2.0 * scale);

        let h_final = &cache.hidden[cfg.blocks];
        self.grad_mat(&mut grads, w_out_idx(cfg)).assign(&d_out.t().dot(h_final));
        self.grad_vec_assign(&mut grads, b_out_idx(cfg), &d_out.sum_axis(Axis(0)));
        let mut d_h = d_out.dot(&self.mat(w_out_idx(cfg)));

        for j in (0..cfg.blocks).rev() {
            let a = &cache.act[j];
            let h_in = &cache.hidden[j];
            // h_{j+1} = h_j + a W2^T + b2
            self.grad_mat(&mut grads, w2(j)).assign(&d_h.t().dot(a));
            self.grad_vec_assign(&mut grads, b2(j), &d_h.sum_axis(Axis(0)));
            let d_a = d_h.dot(&self.mat(w2(j)));
            let d_u = d_a * &a.mapv(|v| 1.0 - v * v);
            {
                let mut gw1 = self.grad_mat(&mut grads, w1(j));
                gw1.slice_mut(s![.., ..h_dim]).assign(&d_u.t().dot(h_in));
                gw1.slice_mut(s![.., h_dim..h_dim + t_dim])
                    .assign(&d_u.t().dot(&cache.temb));
                gw1.slice_mut(s![.., h_dim + t_dim..])
                    .assign(&d_u.t().dot(&batch.conds[j]));
            }
            self.grad_vec_assign(&mut grads, b1(j), &d_u.sum_axis(Axis(0)));
            let w = self.mat(w1(j));
            d_h = d_h + d_u.dot(&w.slice(s![.., ..h_dim]));
        }

        self.grad_mat(&mut grads, W_IN).assign(&d_h.t().dot(&z_t));
        self.grad_vec_assign(&mut grads, B_IN, &d_h.sum_axis(Axis(0)));
        Ok((loss, grads))
    }

    fn grad_mat<'g>(&self, grads: &'g mut [f64], idx: usize) -> ArrayViewMut2<'g, f64> {
        let s = &self.layout[idx];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut grads[s.range()]).expect("layout shape")
    }

    fn grad_vec_assign(&self, grads: &mut [f64], idx: usize, v: &Array1<f64>) {
        let s = &self.layout[idx];
        grads[s.range()].copy_from_slice(v.as_slice().expect("contiguous"));
    }
}

fn w_out_idx(cfg: &ModelConfig) -> usize {
    2 + 4 * cfg.blocks
}

fn b_out_idx(cfg: &ModelConfig) -> usize {
    3 + 4 * cfg.blocks
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the loop pipeline.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[sin(t f_k)..., cos(t f_k)...]` with `f_k = 10000^(-k / (dim/2))`.
pub fn time_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let mut out = Array2::zeros((t.len(), dim));
    for (r, &step) in t.iter().enumerate() {
        for (k, f) in freqs.iter().enumerate() {
            let (s, c) = (step as f64 * f).sin_cos();
            out[[r, k]] = s;
            out[[r, half + k]] = c;
        }
    }
    out
}

/// A training minibatch: clean latents, steps, noise and per-block conditions.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub z0: Array2<f64>,
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
    pub conds: Vec<Array2<f64>>,
}

impl TrainBatch {
    pub fn from_examples(examples: &[(Vec<f64>, usize, Vec<f64>, &BlockAssignment)]) -> Result<Self> {
        let n = examples.len();
        if n == 0 {
            return Err(Error::Training("empty batch".into()));
        }
        let dim = examples[0].0.len();
        let n_blocks = examples[0].3.n_blocks();
        let cond_dim = examples[0].3.block(0).vector_dim();
        let mut z0 = Array2::zeros((n, dim));
        let mut eps = Array2::zeros((n, dim));
        let mut conds = vec![Array2::zeros((n, cond_dim)); n_blocks];
        let mut t = Vec::with_capacity(n);
        for (r, (z, step, e, assign)) in examples.iter().enumerate() {
            check_len("example latent", dim, z.len())?;
            check_len("example noise", dim, e.len())?;
            if assign.n_blocks() != n_blocks {
                return Err(Error::Config("examples disagree on block count".into()));
            }
            z0.row_mut(r).assign(&ndarray::ArrayView1::from(z.as_slice()));
            eps.row_mut(r).assign(&ndarray::ArrayView1::from(e.as_slice()));
            for (j, c) in conds.iter_mut().enumerate() {
                let v = assign.block(j).to_vector();
                check_len("example condition", cond_dim, v.len())?;
                c.row_mut(r).assign(&ndarray::ArrayView1::from(v.as_slice()));
            }
            t.push(*step);
        }
        Ok(Self { z0, t, eps, conds })
    }

    /// `z_t` for every row via the closed-form forward process.
    pub fn noised(&self, sched: &NoiseSchedule) -> Result<Array2<f64>> {
        let mut z = self.z0.clone();
        for (r, &t) in self.t.iter().enumerate() {
            let ab = *sched
                .alpha_bar()
                .get(t)
                .ok_or_else(|| Error::Range(format!("diffusion step {t} out of range")))?;
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mut row = z.row_mut(r);
            row.zip_mut_with(&self.eps.row(r), |zv, e| *zv = a * *zv + b * e);
        }
        Ok(z)
    }
}

/// [`DenoiserModel`] as a sampler backend. The latent reshapes into frames of
/// width `E - 1` (`F = 2 + 2d` when `E = 3 + 2d`).
impl DenoiserBackend for DenoiserModel {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn frame_width(&self) -> usize {
        self.config.event_dim - 1
    }

    fn supports_block_conditioning(&self) -> bool {
        true
    }

    fn n_blocks(&self) -> Option<usize> {
        Some(self.config.blocks)
    }

    fn predict_eps(
        &self,
        z: &[f64],
        t: usize,
        _sched: &NoiseSchedule,
        cond: Conditioning<'_>,
    ) -> Result<Vec<f64>> {
        match cond {
            Conditioning::PerBlock(a) => self.forward(z, t, a),
            Conditioning::Uniform(c) => {
                let a = BlockAssignment::uniform(self.config.blocks, c.clone())?;
                self.forward(z, t, &a)
            }
        }
    }
}
