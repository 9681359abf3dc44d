//! Argument parsing and command dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::config::{parse_config, read_table, set_key, sweep_seeds, Experiment, RunConfig};
use crate::experiments::{self, Artifact};
use crate::manifest::{write_outputs, Manifest};
use crate::sweep::{run_sweep, sweep_artifacts};
use crate::CliError;

pub const OUT_DIR_ENV: &str = "VWM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "vwm", version, about = "Volatile-synapse working-memory simulations")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: $VWM_OUT_DIR, then ./vwm-out].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulated switching and retention characterisation, refitted.
    DeviceChar(DeviceCharArgs),
    /// Fit switching curves and retention distributions to measured CSVs.
    Fit(FitArgs),
    /// Single-synapse colour store and recall.
    StoreRecall(StoreRecallArgs),
    /// Spiking working-memory network.
    Wm(WmArgs),
    /// Associative object memory.
    Assoc(AssocArgs),
    /// Runs the configured experiment over its `[sweep]` grid.
    Sweep(SweepArgs),
    /// Reruns a manifest and checks the artifact hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct DeviceCharArgs {
    #[arg(long = "pulse-width", value_delimiter = ',')]
    pub pulse_widths_ms: Vec<f64>,
    #[arg(long)]
    pub voltages: Option<usize>,
    #[arg(long)]
    pub trials: Option<u32>,
    #[arg(long)]
    pub retention_samples: Option<usize>,
    #[arg(long = "compliance")]
    pub compliance_ua: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV `pulse_width_ms,v,n_trials,n_switched`.
    #[arg(long)]
    pub switching: Option<PathBuf>,
    /// CSV `compliance_ua,t_ret_ms`.
    #[arg(long)]
    pub retention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StoreRecallArgs {
    #[arg(long)]
    pub p_on: Option<f64>,
    #[arg(long = "f-stim")]
    pub f_stim_hz: Option<f64>,
    #[arg(long = "i-cc")]
    pub i_cc_ua: Option<f64>,
    #[arg(long = "threshold")]
    pub threshold_ua: Option<f64>,
    #[arg(long)]
    pub stored: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub presentations: Option<usize>,
    #[arg(long)]
    pub mu_ret: Option<f64>,
    #[arg(long)]
    pub sigma_ret: Option<f64>,
    #[arg(long)]
    pub compliance_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WmArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub mu_ret: Option<f64>,
    #[arg(long)]
    pub sigma_ret: Option<f64>,
    #[arg(long = "compliance")]
    pub compliance_ua: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub item: Option<usize>,
    #[arg(long = "delay")]
    pub delay_ms: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AssocArgs {
    /// Comma-separated delays in ms.
    #[arg(long = "delays", value_delimiter = ',')]
    pub delays_ms: Vec<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long = "compliance")]
    pub compliance_ua: Option<f64>,
    #[arg(long)]
    pub mu_ret: Option<f64>,
    #[arg(long)]
    pub sigma_ret: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment to sweep when the config does not name one.
    #[arg(long)]
    pub experiment: Option<String>,
    /// Seeds per grid point.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// `key=v1,v2,...` for a key of the experiment's block; repeatable.
    #[arg(long = "grid")]
    pub grid: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn float(x: f64) -> Value {
    Value::Float(x)
}

fn int(x: u64) -> Value {
    Value::Integer(x as i64)
}

fn path(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

/// Grid values: integer, float, bool, otherwise string.
fn scalar(s: &str) -> Value {
    if let Ok(i) = s.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(f) = s.parse::<f64>() {
        Value::Float(f)
    } else if let Ok(b) = s.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(s.into())
    }
}

macro_rules! push {
    ($v:ident, $key:expr, $opt:expr, $conv:expr) => {
        if let Some(x) = $opt {
            $v.push(($key.to_string(), $conv(x)));
        }
    };
}

impl Command {
    fn experiment(&self) -> Option<Experiment> {
        Some(match self {
            Command::DeviceChar(_) => Experiment::DeviceChar,
            Command::Fit(_) => Experiment::Fit,
            Command::StoreRecall(_) => Experiment::StoreRecall,
            Command::Wm(_) => Experiment::Wm,
            Command::Assoc(_) => Experiment::Assoc,
            Command::Sweep(_) | Command::Replay(_) => return None,
        })
    }

    fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut v = Vec::new();
        match self {
            Command::DeviceChar(a) => {
                if !a.pulse_widths_ms.is_empty() {
                    v.push((
                        "device_char.pulse_widths_ms".into(),
                        Value::Array(a.pulse_widths_ms.iter().map(|&w| float(w)).collect()),
                    ));
                }
                push!(v, "device_char.voltages", a.voltages, |x: usize| int(x as u64));
                push!(v, "device_char.trials", a.trials, |x: u32| int(x as u64));
                push!(v, "device_char.retention_samples", a.retention_samples, |x: usize| int(x as u64));
                push!(v, "device_char.compliance_ua", a.compliance_ua, float);
            }
            Command::Fit(a) => {
                push!(v, "fit.switching", a.switching.as_deref(), path);
                push!(v, "fit.retention", a.retention.as_deref(), path);
            }
            Command::StoreRecall(a) => {
                push!(v, "store_recall.p_on", a.p_on, float);
                push!(v, "store_recall.f_stim_hz", a.f_stim_hz, float);
                push!(v, "store_recall.i_cc_ua", a.i_cc_ua, float);
                push!(v, "store_recall.threshold_ua", a.threshold_ua, float);
                push!(v, "store_recall.stored", a.stored.clone(), Value::String);
                push!(v, "store_recall.runs", a.runs, |x: usize| int(x as u64));
                push!(v, "store_recall.presentations", a.presentations, |x: usize| int(x as u64));
                push!(v, "store_recall.mu_ret", a.mu_ret, float);
                push!(v, "store_recall.sigma_ret", a.sigma_ret, float);
                push!(v, "store_recall.compliance_table", a.compliance_table.as_deref(), path);
            }
            Command::Wm(a) => {
                push!(v, "wm.preset", a.preset.clone(), Value::String);
                push!(v, "wm.mu_ret", a.mu_ret, float);
                push!(v, "wm.sigma_ret", a.sigma_ret, float);
                push!(v, "wm.compliance_ua", a.compliance_ua, float);
                push!(v, "wm.rho", a.rho, float);
                push!(v, "wm.item", a.item, |x: usize| int(x as u64));
                push!(v, "wm.delay_ms", a.delay_ms, int);
                push!(v, "wm.runs", a.runs, |x: usize| int(x as u64));
            }
            Command::Assoc(a) => {
                if !a.delays_ms.is_empty() {
                    v.push(("assoc.delays_ms".into(), Value::Array(a.delays_ms.iter().map(|&d| int(d)).collect())));
                }
                push!(v, "assoc.trials", a.trials, |x: usize| int(x as u64));
                push!(v, "assoc.compliance_ua", a.compliance_ua, float);
                push!(v, "assoc.mu_ret", a.mu_ret, float);
                push!(v, "assoc.sigma_ret", a.sigma_ret, float);
                push!(v, "assoc.rho", a.rho, float);
            }
            Command::Sweep(a) => {
                push!(v, "experiment", a.experiment.clone(), Value::String);
                push!(v, "seeds", a.seeds, |x: usize| int(x as u64));
                for g in &a.grid {
                    let (k, vals) = g
                        .split_once('=')
                        .ok_or_else(|| CliError::Validation(format!("--grid `{g}`: expected key=v1,v2")))?;
                    let vals: Vec<Value> = vals.split(',').filter(|s| !s.is_empty()).map(scalar).collect();
                    v.push((format!("sweep.{k}"), Value::Array(vals)));
                }
            }
            Command::Replay(_) => {}
        }
        Ok(v)
    }
}

/// Config table with the global flags and the command's flags applied.
fn effective_table(cli: &Cli) -> Result<toml::Table, CliError> {
    let mut t = match &cli.config {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    if let Some(e) = cli.command.experiment() {
        set_key(&mut t, "experiment", Value::String(e.name().into()))?;
    }
    if let Some(s) = cli.seed {
        set_key(&mut t, "seed", int(s))?;
    }
    if let Some(w) = cli.workers {
        set_key(&mut t, "workers", int(w as u64))?;
    }
    for (k, v) in cli.command.overrides()? {
        set_key(&mut t, &k, v)?;
    }
    if !t.contains_key("experiment") {
        return Err(CliError::Validation("experiment: not set (use a config file or --experiment)".into()));
    }
    Ok(t)
}

/// The canonical form kept in the manifest: every default spelled out,
/// output location and thread count left out.
fn canonical(cfg: &RunConfig) -> Result<String, CliError> {
    let mut c = cfg.clone();
    c.out_dir = None;
    c.workers = 0;
    toml::to_string(&c).map_err(|e| CliError::Runtime(e.to_string()))
}

fn out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("vwm-out"))
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs a canonical config; `sweep` selects the grid runner.
fn execute(cfg: &RunConfig, table: &toml::Table, sweep: bool) -> Result<(Vec<u64>, Vec<Artifact>), CliError> {
    if sweep {
        let rows = with_workers(cfg.workers, || run_sweep(table, cfg))??;
        let failed = rows.iter().filter(|r| r.status != "ok").count();
        if failed > 0 {
            log::warn!("{failed} of {} sweep runs failed", rows.len());
        }
        Ok((sweep_seeds(cfg), sweep_artifacts(cfg, &rows)?))
    } else {
        experiments::check(cfg)?;
        let out = with_workers(cfg.workers, || experiments::run(cfg, cfg.seed))??;
        for (k, v) in &out.metrics {
            log::info!("{k} = {v}");
        }
        Ok((vec![cfg.seed], out.artifacts))
    }
}

/// Runs the command and returns the manifest path.
pub fn run_cli(cli: &Cli) -> Result<PathBuf, CliError> {
    if let Command::Replay(a) = &cli.command {
        return replay(&a.manifest, cli.out_dir.as_deref(), cli.workers);
    }
    let sweep = matches!(cli.command, Command::Sweep(_));
    let table = effective_table(cli)?;
    let cfg = parse_config(&table)?;
    if sweep && cfg.sweep.is_empty() {
        return Err(CliError::Validation("sweep: no grid given ([sweep] table or --grid)".into()));
    }
    let text = canonical(&cfg)?;
    let canon: toml::Table = text.parse().map_err(|e| CliError::Runtime(format!("{e}")))?;
    let (seeds, artifacts) = execute(&cfg, &canon, sweep)?;
    let command = if sweep { "sweep".to_string() } else { cfg.experiment.name().to_string() };
    let manifest = Manifest::new(&command, text, seeds, &artifacts);
    write_outputs(&out_dir(cli.out_dir.as_deref(), &cfg), &manifest, &artifacts)
}

/// Reruns into `out` (default `<manifest dir>/replay`) and fails when any
/// artifact hash differs.
fn replay(path: &Path, out: Option<&Path>, workers: Option<usize>) -> Result<PathBuf, CliError> {
    let m = Manifest::read(path)?;
    let table: toml::Table = m.config.parse().map_err(|e| CliError::Validation(format!("manifest config: {e}")))?;
    let mut cfg = parse_config(&table)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let sweep = m.command == "sweep";
    if !sweep && m.command != cfg.experiment.name() {
        return Err(CliError::Validation(format!("manifest command `{}` does not match its config", m.command)));
    }
    let (seeds, artifacts) = execute(&cfg, &table, sweep)?;
    let fresh = Manifest::new(&m.command, m.config.clone(), seeds, &artifacts);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("replay"));
    let written = write_outputs(&dir, &fresh, &artifacts)?;
    if fresh.artifacts != m.artifacts {
        let differing: Vec<&str> =
            m.artifacts.iter().filter(|a| !fresh.artifacts.contains(a)).map(|a| a.path.as_str()).collect();
        return Err(CliError::Runtime(format!("replay differs from manifest: {}", differing.join(", "))));
    }
    Ok(written)
}
