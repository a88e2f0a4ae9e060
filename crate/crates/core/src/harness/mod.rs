//! Sweep orchestration: build a schedule or block assignment per
//! `(prompt, x, repeat[, setting])`, sample, score, and persist.
//!
//! Every run's seed is a keyed hash of its coordinates (see [`run_seed`]), so
//! adding prompts or grid points never changes the seeds of existing runs.

mod aggregate;
mod io;
mod report;

pub use aggregate::{aggregate, AggregateRow, METRIC_NAMES};
pub use io::{read_runs_csv, write_frames_csv, write_runs_csv, RUNS_HEADER};
pub use report::{emit_report, render_svg, turning_points, TurningPoint};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticDenoiser;
use crate::conditioning::{block_split, qualitative_settings, step_switch, StepSchedule};
use crate::diffusion::{sample, DenoiserBackend, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::neural::{load_checkpoint, DenoiserModel};
use crate::suite::{generate_suite, read_suite, Category, PromptRecord};
use crate::world::{condition_of, EventChoice, Trajectory, View, WorldConfig};

/// Worker-count override read by [`resolve_workers`].
pub const WORKERS_ENV: &str = "TURNPOINT_WORKERS";

/// Runs per incremental CSV flush.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    StepSwitch,
    BlockSplit,
    Qualitative,
}

impl SweepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::StepSwitch => "step_switch",
            SweepMode::BlockSplit => "block_split",
            SweepMode::Qualitative => "qualitative",
        }
    }
}

impl std::fmt::Display for SweepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step_switch" | "step" => Ok(SweepMode::StepSwitch),
            "block_split" | "block" => Ok(SweepMode::BlockSplit),
            "qualitative" => Ok(SweepMode::Qualitative),
            _ => Err(Error::Config(format!("unknown sweep mode {s:?}"))),
        }
    }
}

/// `{0.0, 0.1, ..., 1.0}`, computed as `i / 10` to avoid accumulated error.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub grid: Vec<f64>,
    /// `"analytic"` or a path to a neural checkpoint.
    pub backend: String,
    /// Prompt suite file; when absent a suite is generated from `suite_seed`.
    pub suite: Option<PathBuf>,
    pub suite_seed: u64,
    /// Restrict to these categories (all when empty).
    pub categories: Vec<Category>,
    /// Keep at most this many prompts per category, in suite order.
    pub prompts_per_category: Option<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    pub sampler: SamplerConfig,
    pub world: WorldConfig,
    pub out_dir: PathBuf,
    /// Fraction of the maximum mean ta2 used by the turning-point rule.
    pub turning_threshold: f64,
    /// Worker threads; `TURNPOINT_WORKERS` wins when set.
    pub workers: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mode: SweepMode::StepSwitch,
            grid: default_grid(),
            backend: "analytic".into(),
            suite: None,
            suite_seed: 0,
            categories: Vec::new(),
            prompts_per_category: None,
            repeats: 3,
            base_seed: 0,
            sampler: SamplerConfig::default(),
            world: WorldConfig::default(),
            out_dir: PathBuf::from("sweep-out"),
            turning_threshold: 0.9,
            workers: None,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Input {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn is_analytic(&self) -> bool {
        self.backend == "analytic"
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("grid must not be empty".into()));
        }
        if let Some(x) = self.grid.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Config(format!("grid value {x} outside [0, 1]")));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid must be strictly increasing".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.mode == SweepMode::BlockSplit && self.is_analytic() {
            return Err(Error::Config(
                "block_split mode requires a neural checkpoint backend".into(),
            ));
        }
        if !(self.turning_threshold > 0.0 && self.turning_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "turning_threshold {} must lie in (0, 1]",
                self.turning_threshold
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.sampler.validate()?;
        self.world.validate()
    }

    /// The suite named by the config, filtered by category and truncated.
    pub fn load_prompts(&self) -> Result<Vec<PromptRecord>> {
        let all = match &self.suite {
            Some(path) => read_suite(path)?,
            None => generate_suite(self.suite_seed),
        };
        let mut taken = std::collections::BTreeMap::<Category, usize>::new();
        Ok(all
            .into_iter()
            .filter(|r| self.categories.is_empty() || self.categories.contains(&r.category))
            .filter(|r| {
                let n = taken.entry(r.category).or_default();
                *n += 1;
                self.prompts_per_category.is_none_or(|cap| *n <= cap)
            })
            .collect())
    }
}

/// The backend named by `spec`: `"analytic"` or a checkpoint path.
pub fn load_backend(spec: &str, world: &WorldConfig, view: View) -> Result<Box<dyn DenoiserBackend>> {
    if spec == "analytic" {
        return Ok(Box::new(AnalyticDenoiser::new(world.clone(), view)?));
    }
    let model: DenoiserModel = load_checkpoint(Path::new(spec))?;
    if model.config().dim != world.latent_dim() {
        return Err(Error::Config(format!(
            "checkpoint latent dim {} does not match the world's {}",
            model.config().dim,
            world.latent_dim()
        )));
    }
    Ok(Box::new(model))
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// FNV-1a over `"{base_seed}:{prompt_id}:{x_index}:{repeat}:{setting}"`.
pub fn run_seed(base_seed: u64, prompt_id: &str, x_index: usize, repeat: usize, setting: u8) -> u64 {
    fnv1a64(format!("{base_seed}:{prompt_id}:{x_index}:{repeat}:{setting}").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub mode: SweepMode,
    pub category: Category,
    pub prompt_id: String,
    pub view: View,
    pub x: f64,
    /// 1..=4 in qualitative mode, 0 otherwise.
    pub setting: u8,
    pub seed: u64,
    /// `None` for failed runs.
    pub metrics: Option<MetricsRecord>,
    pub error: Option<String>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
struct Job<'a> {
    prompt: &'a PromptRecord,
    x_index: usize,
    x: f64,
    repeat: usize,
    setting: u8,
}

fn jobs<'a>(cfg: &SweepConfig, prompts: &'a [PromptRecord]) -> Vec<Job<'a>> {
    let settings: &[u8] = if cfg.mode == SweepMode::Qualitative {
        &[1, 2, 3, 4]
    } else {
        &[0]
    };
    let mut out = Vec::new();
    for prompt in prompts {
        for (x_index, &x) in cfg.grid.iter().enumerate() {
            for repeat in 0..cfg.repeats {
                for &setting in settings {
                    out.push(Job {
                        prompt,
                        x_index,
                        x,
                        repeat,
                        setting,
                    });
                }
            }
        }
    }
    out
}

/// Samples one trajectory for `rec` under the given probe and returns it in
/// third-person coordinates together with its metrics.
pub fn run_probe(
    backend: &dyn DenoiserBackend,
    rec: &PromptRecord,
    mode: SweepMode,
    x: f64,
    setting: u8,
    sampler: &SamplerConfig,
) -> Result<(Trajectory, MetricsRecord)> {
    let [e1, e2] = rec.event_pair()?;
    let c1 = condition_of(rec, EventChoice::Event1)?;
    let c2 = condition_of(rec, EventChoice::Event2)?;
    let n = sampler.n_steps;
    let (schedule, assign) = match mode {
        SweepMode::StepSwitch => (step_switch(x, n, c1, c2)?, None),
        SweepMode::BlockSplit => {
            let blocks = backend_blocks(backend)?;
            let assign = block_split(x, blocks, c1.clone(), c2)?;
            (StepSchedule::constant(n, c1)?, Some(assign))
        }
        SweepMode::Qualitative => {
            if !(1..=4).contains(&setting) {
                return Err(Error::Range(format!("qualitative setting {setting} not in 1..=4")));
            }
            let settings = qualitative_settings(x, &e1.embed(), &e2.embed(), c1.event_dim(), n)?;
            let s = settings.into_iter().nth(usize::from(setting) - 1).expect("4 settings");
            (s, None)
        }
    };
    let traj = sample(backend, &schedule, assign.as_ref(), sampler)?;
    if !traj.is_finite() {
        return Err(Error::Internal("sampled trajectory is not finite".into()));
    }
    let traj = match rec.view {
        View::First => traj.to_third_person(e1, e2),
        View::Third => traj,
    };
    let metrics = compute_metrics(&traj, e1, e2)?;
    Ok((traj, metrics))
}

fn backend_blocks(backend: &dyn DenoiserBackend) -> Result<usize> {
    backend.n_blocks().ok_or_else(|| {
        Error::Unsupported("block_split needs a block-structured backend".into())
    })
}

fn execute(job: &Job<'_>, cfg: &SweepConfig, backends: &Backends) -> RunRecord {
    let seed = run_seed(cfg.base_seed, &job.prompt.id, job.x_index, job.repeat, job.setting);
    let sampler = SamplerConfig {
        seed,
        ..cfg.sampler.clone()
    };
    let start = Instant::now();
    let result = backends
        .for_view(job.prompt.view)
        .and_then(|b| run_probe(b, job.prompt, cfg.mode, job.x, job.setting, &sampler));
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let (metrics, error) = match result {
        Ok((_, m)) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunRecord {
        run_id: format!(
            "{}/{}/x{:02}/r{}/s{}",
            cfg.mode, job.prompt.id, job.x_index, job.repeat, job.setting
        ),
        mode: cfg.mode,
        category: job.prompt.category,
        prompt_id: job.prompt.id.clone(),
        view: job.prompt.view,
        x: job.x,
        setting: job.setting,
        seed,
        metrics,
        error,
        wall_time_ms,
    }
}

/// The analytic backend depends on the view (its targets are view-specific
/// Gaussians); a neural checkpoint serves both.
struct Backends {
    first: Option<Box<dyn DenoiserBackend>>,
    third: Option<Box<dyn DenoiserBackend>>,
    shared: Option<Box<dyn DenoiserBackend>>,
}

impl Backends {
    fn load(cfg: &SweepConfig) -> Result<Self> {
        if cfg.is_analytic() {
            Ok(Self {
                first: Some(load_backend("analytic", &cfg.world, View::First)?),
                third: Some(load_backend("analytic", &cfg.world, View::Third)?),
                shared: None,
            })
        } else {
            Ok(Self {
                first: None,
                third: None,
                shared: Some(load_backend(&cfg.backend, &cfg.world, View::Third)?),
            })
        }
    }

    fn for_view(&self, view: View) -> Result<&dyn DenoiserBackend> {
        let b = match (&self.shared, view) {
            (Some(b), _) => b,
            (None, View::First) => self.first.as_ref().expect("analytic first view"),
            (None, View::Third) => self.third.as_ref().expect("analytic third view"),
        };
        Ok(b.as_ref())
    }
}

/// Worker count: `TURNPOINT_WORKERS` if set, else `requested`, else the
/// number of available cores.
pub fn resolve_workers(requested: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config(format!("{WORKERS_ENV} must be >= 1")));
        }
        return Ok(n);
    }
    Ok(requested.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }))
}

/// Runs the configured sweep over `prompts` and returns the records in job
/// order. When `out_dir` is given, `runs.csv` is written chunk by chunk and
/// failed runs are also listed in `failures.txt`.
pub fn run_sweep_on(
    cfg: &SweepConfig,
    prompts: &[PromptRecord],
    out_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let backends = Backends::load(cfg)?;
    if cfg.mode == SweepMode::BlockSplit {
        backend_blocks(backends.for_view(View::Third)?)?;
    }
    let workers = resolve_workers(cfg.workers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(io::RunsWriter::create(&dir.join("runs.csv"))?)
        }
        None => None,
    };

    let jobs = jobs(cfg, prompts);
    log::info!(
        "sweep {}: {} prompts x {} grid points x {} repeats = {} runs on {workers} workers",
        cfg.mode,
        prompts.len(),
        cfg.grid.len(),
        cfg.repeats,
        jobs.len()
    );
    let mut records = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(CHUNK) {
        let done: Vec<RunRecord> =
            pool.install(|| chunk.par_iter().map(|j| execute(j, cfg, &backends)).collect());
        if let Some(w) = writer.as_mut() {
            w.write_all(&done)?;
        }
        records.extend(done);
    }

    if let Some(dir) = out_dir {
        let failed: Vec<&RunRecord> = records.iter().filter(|r| r.error.is_some()).collect();
        if !failed.is_empty() {
            log::warn!("{} of {} runs failed", failed.len(), records.len());
            let mut f = fs::File::create(dir.join("failures.txt"))?;
            for r in failed {
                writeln!(f, "{}\t{}", r.run_id, r.error.as_deref().unwrap_or(""))?;
            }
        }
    }
    Ok(records)
}

/// [`run_sweep_on`] over the config's own suite, writing into `cfg.out_dir`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let prompts = cfg.load_prompts()?;
    run_sweep_on(cfg, &prompts, Some(&cfg.out_dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let base = run_seed(1, "p", 2, 0, 0);
        assert_ne!(base, run_seed(2, "p", 2, 0, 0));
        assert_ne!(base, run_seed(1, "q", 2, 0, 0));
        assert_ne!(base, run_seed(1, "p", 3, 0, 0));
        assert_ne!(base, run_seed(1, "p", 2, 1, 0));
        assert_ne!(base, run_seed(1, "p", 2, 0, 1));
        assert_eq!(base, fnv1a64(b"1:p:2:0:0"));
    }

    #[test]
    fn default_grid_is_tenths() {
        let g = default_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
    }

    #[test]
    fn config_validation() {
        let ok = SweepConfig::default();
        assert!(ok.validate().is_ok());
        let bad = |f: fn(&mut SweepConfig)| {
            let mut c = SweepConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        };
        bad(|c| c.grid = vec![0.2, 0.1]);
        bad(|c| c.grid = vec![0.0, 1.5]);
        bad(|c| c.grid.clear());
        bad(|c| c.repeats = 0);
        bad(|c| c.mode = SweepMode::BlockSplit);
        bad(|c| c.turning_threshold = 0.0);
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let c = SweepConfig::from_toml(
            "mode = \"qualitative\"\nrepeats = 2\ncategories = [\"General\"]\n[sampler]\nn_steps = 20\n",
        )
        .unwrap();
        assert_eq!(c.mode, SweepMode::Qualitative);
        assert_eq!(c.repeats, 2);
        assert_eq!(c.sampler.n_steps, 20);
        assert_eq!(c.grid, default_grid());
        assert!(SweepConfig::from_toml("nonsense = 1").is_err());
    }

    #[test]
    fn record_count_is_the_product() {
        let cfg = SweepConfig {
            mode: SweepMode::Qualitative,
            grid: vec![0.0, 0.5, 1.0],
            repeats: 2,
            categories: vec![Category::General],
            prompts_per_category: Some(2),
            sampler: SamplerConfig {
                n_steps: 5,
                ..SamplerConfig::default()
            },
            workers: Some(2),
            ..SweepConfig::default()
        };
        let prompts = cfg.load_prompts().unwrap();
        assert_eq!(prompts.len(), 2);
        let recs = run_sweep_on(&cfg, &prompts, None).unwrap();
        assert_eq!(recs.len(), 2 * 3 * 2 * 4);
        let ids: std::collections::BTreeSet<_> = recs.iter().map(|r| &r.run_id).collect();
        assert_eq!(ids.len(), recs.len());
        assert!(recs.iter().all(|r| r.metrics.is_some()));
    }

    #[test]
    fn failed_runs_are_recorded() {
        let cfg = SweepConfig {
            grid: vec![0.5],
            repeats: 1,
            sampler: SamplerConfig {
                n_steps: 4,
                ..SamplerConfig::default()
            },
            workers: Some(1),
            ..SweepConfig::default()
        };
        let mut prompts = generate_suite(0);
        prompts.truncate(2);
        prompts[1].events.pop();
        let recs = run_sweep_on(&cfg, &prompts, None).unwrap();
        assert!(recs[0].metrics.is_some());
        assert!(recs[1].metrics.is_none());
        assert!(recs[1].error.as_deref().unwrap().contains("expected 2"));
    }
}
