//! `turnpoint`: suite tooling, training, sampling, sweeps and reports.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or invalid-input
//! errors, 2 for failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use turnpoint::harness::{
    self, emit_report, load_backend, read_runs_csv, run_probe, write_frames_csv, SweepConfig,
    SweepMode,
};
use turnpoint::neural::{
    save_checkpoint, train, DenoiserModel, ModelConfig, RandomEventData, SuiteData, TrainConfig,
};
use turnpoint::suite::{generate_suite, read_suite, validate_suite, write_suite, SuiteGenConfig};
use turnpoint::{aggregate, Error, Result, SamplerConfig, View, WorldConfig};

#[derive(Parser)]
#[command(name = "turnpoint", version, about = "Dual-event conditioning probes on a toy diffusion model")]
struct Cli {
    /// Log level filter (overridden by RUST_LOG).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate a prompt suite.
    #[command(subcommand)]
    Suite(SuiteCmd),
    /// Train a neural denoiser and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one prompt under a single probe and dump frames and metrics.
    Sample(SampleArgs),
    /// Run a sweep and write its report.
    Sweep(SweepArgs),
    /// Rebuild aggregates, charts and summary from a runs.csv.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Turning-point threshold as a fraction of the maximum mean ta2.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
}

#[derive(Subcommand)]
enum SuiteCmd {
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fail unless category counts match the reference table.
        #[arg(long)]
        strict_table1: bool,
    },
    Validate {
        file: PathBuf,
        #[arg(long)]
        strict_table1: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeMode {
    Step,
    Block,
    Qualitative,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    prompt_id: String,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum, default_value = "step")]
    mode: ProbeMode,
    #[arg(long)]
    x: f64,
    /// Qualitative setting 1..=4 (qualitative mode only).
    #[arg(long, default_value_t = 1)]
    setting: u8,
    /// `analytic` or a checkpoint path.
    #[arg(long, default_value = "analytic")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum DataSource {
    /// Event 1, event 2 and concatenated conditions drawn from a prompt suite.
    #[default]
    Suite,
    /// A fresh random single event per example.
    Random,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    hidden: usize,
    blocks: usize,
    time_dim: usize,
    init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            hidden: d.hidden,
            blocks: d.blocks,
            time_dim: d.time_dim,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    source: DataSource,
    suite: Option<PathBuf>,
    suite_seed: u64,
    view: Option<View>,
}

/// Training config file: `[train]`, `[world]`, `[model]`, `[diffusion]`, `[data]`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    world: WorldConfig,
    model: ModelSection,
    diffusion: SamplerConfig,
    data: DataSection,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_suite(cmd: SuiteCmd) -> Result<()> {
    match cmd {
        SuiteCmd::Gen {
            seed,
            out,
            strict_table1,
        } => {
            let records = generate_suite(seed);
            let report = validate_suite(&records, strict_table1);
            if !report.is_valid() {
                return Err(Error::Internal(format!(
                    "generated suite failed validation: {}",
                    report.violations[0]
                )));
            }
            write_suite(&out, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
        SuiteCmd::Validate {
            file,
            strict_table1,
        } => {
            let report = turnpoint::suite::validate_file(&file, strict_table1)?;
            for v in &report.violations {
                println!("{v}");
            }
            if report.is_valid() {
                println!("ok");
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{} violation(s) in {}",
                    report.violations.len(),
                    file.display()
                )))
            }
        }
    }
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let spec: TrainFile = read_toml(config)?;
    spec.world.validate()?;
    spec.diffusion.validate()?;
    let model_cfg = ModelConfig {
        dim: spec.world.latent_dim(),
        hidden: spec.model.hidden,
        blocks: spec.model.blocks,
        time_dim: spec.model.time_dim,
        event_dim: spec.world.event_dim(),
    };
    let model = DenoiserModel::new(model_cfg, spec.model.init_seed)?;
    let sched = spec.diffusion.noise_schedule()?;
    let gen = SuiteGenConfig {
        feature_dim: spec.world.feature_dim,
        ..SuiteGenConfig::default()
    };
    let outcome = match spec.data.source {
        DataSource::Suite => {
            let mut records = match &spec.data.suite {
                Some(p) => read_suite(p)?,
                None => generate_suite(spec.data.suite_seed),
            };
            if let Some(v) = spec.data.view {
                records.retain(|r| r.view == v);
            }
            let data = SuiteData {
                records,
                world: spec.world.clone(),
            };
            train(model, &data, &sched, &spec.train)?
        }
        DataSource::Random => {
            let data = RandomEventData {
                world: spec.world.clone(),
                gen,
                view: spec.data.view.unwrap_or(View::Third),
            };
            train(model, &data, &sched, &spec.train)?
        }
    };
    for p in &outcome.trace {
        log::info!("step {:>6}  loss {:.6}", p.step, p.loss);
    }
    save_checkpoint(&outcome.model, out)?;
    println!(
        "trained {} steps; final loss {}; wrote {}",
        spec.train.steps,
        outcome.trace.last().map(|p| format!("{:.6}", p.loss)).unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let records = read_suite(&a.suite)?;
    let rec = records
        .iter()
        .find(|r| r.id == a.prompt_id)
        .ok_or_else(|| Error::Config(format!("prompt {:?} not in {}", a.prompt_id, a.suite.display())))?;
    let world = WorldConfig::default();
    let backend = load_backend(&a.backend, &world, rec.view)?;
    let mode = match a.mode {
        ProbeMode::Step => SweepMode::StepSwitch,
        ProbeMode::Block => SweepMode::BlockSplit,
        ProbeMode::Qualitative => SweepMode::Qualitative,
    };
    let setting = if mode == SweepMode::Qualitative { a.setting } else { 0 };
    let sampler = SamplerConfig {
        n_steps: a.n_steps,
        seed: a.seed,
        ..SamplerConfig::default()
    };
    let (traj, metrics) = run_probe(backend.as_ref(), rec, mode, a.x, setting, &sampler)?;
    fs::create_dir_all(&a.out)?;
    write_frames_csv(&a.out.join("frames.csv"), &traj)?;
    let json = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(a.out.join("metrics.json"), format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = SweepConfig::load(&a.config)?;
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    if let Some(s) = a.base_seed {
        cfg.base_seed = s;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    cfg.validate()?;
    let runs = harness::run_sweep(&cfg)?;
    let aggs = aggregate(&runs);
    emit_report(&aggs, &runs, &cfg.out_dir, cfg.turning_threshold)?;
    let failed = runs.iter().filter(|r| r.metrics.is_none()).count();
    println!(
        "{} runs ({failed} failed); report in {}",
        runs.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_report(runs: &Path, out: &Path, threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 1]")));
    }
    let records = read_runs_csv(runs)?;
    let aggs = aggregate(&records);
    let files = emit_report(&aggs, &records, out, threshold)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input { .. } | Error::Range(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .init();
    let result = match cli.cmd {
        Command::Suite(c) => cmd_suite(c),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Sample(a) => cmd_sample(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report {
            runs,
            out,
            threshold,
        } => cmd_report(&runs, &out, threshold),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
