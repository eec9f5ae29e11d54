//! `noisetrack` command-line interface.
//!
//! Every subcommand runs one or more pipeline stages. Settings come from the
//! built-in defaults, then an optional TOML config, then flags; later
//! sources win. `--set key.path=value` reaches any config key.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisetrack::pipeline::{run_pipeline, PipelineConfig, RunManifest, Stage, StageStatus};
use noisetrack::Error;

#[derive(Parser, Debug)]
#[command(name = "noisetrack", version, about = "Time-resolved qubit noise tracking")]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw synthetic outcome records from the configured noise schedules.
    Emulate(Overrides),
    /// Validate a record file and reconstruct timestamps.
    Ingest(Overrides),
    /// Moving-window probability estimates per qubit.
    Average(Overrides),
    /// Fit detuning and decay rates to every time slice.
    Fit(Overrides),
    /// Hierarchical two-state segmentation of the detuning trace.
    Segment(Overrides),
    /// Switching rates per hierarchy level.
    Rates(Overrides),
    /// Power spectra of the fitted parameters.
    Psd(Overrides),
    /// Charge dispersion and defect-model tables.
    Physics(Overrides),
    /// Consolidated report and plot data.
    Report(Overrides),
    /// Run several stages in order (all of them by default).
    Pipeline {
        /// Comma-separated stage list.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Config file helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print the full default config (or the merged one with --config).
    Init {
        /// Write to this file instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Directory for all stage outputs.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Record file to ingest.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Gaussian window width in repetitions.
    #[arg(long)]
    w_g: Option<f64>,
    /// Use the fixed moving window instead of the Gaussian one.
    #[arg(long)]
    fixed_window: bool,
    /// Any config key, e.g. `--set hdfa.max_levels=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Config(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            Error::Data(_) | Error::Io { .. } => Failure::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("noisetrack: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        rayon_pool(n)?;
    }
    let base = match &cli.config {
        // An unreadable config file is a config problem, not a data one.
        Some(path) => PipelineConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let (stages, overrides) = match cli.command {
        Command::Config {
            action: ConfigAction::Init { output },
        } => {
            let text = base.to_toml()?;
            return match output {
                Some(path) => std::fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display()))),
                None => {
                    print!("{text}");
                    Ok(())
                }
            };
        }
        Command::Pipeline { stages, overrides } => {
            let stages = match stages {
                Some(names) => Some(parse_stages(&names)?),
                None => None,
            };
            (stages, overrides)
        }
        Command::Emulate(o) => (Some(vec![Stage::Emulate]), o),
        Command::Ingest(o) => (Some(vec![Stage::Ingest]), o),
        Command::Average(o) => (Some(vec![Stage::Average]), o),
        Command::Fit(o) => (Some(vec![Stage::Fit]), o),
        Command::Segment(o) => (Some(vec![Stage::Segment]), o),
        Command::Rates(o) => (Some(vec![Stage::Rates]), o),
        Command::Psd(o) => (Some(vec![Stage::Psd]), o),
        Command::Physics(o) => (Some(vec![Stage::Physics]), o),
        Command::Report(o) => (Some(vec![Stage::Report]), o),
    };
    let mut config = apply_overrides(base, &overrides)?;
    if let Some(stages) = stages {
        config.stages = stages;
    }
    let result = run_pipeline(&config);
    let manifest_path = config.output_dir.join("manifest.json");
    match result {
        Ok(manifest) => {
            print_summary(&manifest);
            if !manifest.stages.is_empty() {
                println!("manifest: {}", manifest_path.display());
            }
            Ok(())
        }
        Err(e) => {
            if manifest_path.exists() {
                eprintln!("partial outputs kept; see {}", manifest_path.display());
            }
            Err(e.into())
        }
    }
}

fn rayon_pool(n: usize) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::Config("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn parse_stages(names: &[String]) -> Result<Vec<Stage>, Failure> {
    names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| {
            Stage::parse(n.trim()).ok_or_else(|| {
                let known: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
                Failure::Config(format!("unknown stage '{n}'; expected one of {}", known.join(", ")))
            })
        })
        .collect()
}

fn apply_overrides(config: PipelineConfig, o: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut sets: Vec<(String, toml::Value)> = Vec::new();
    if let Some(d) = &o.output_dir {
        sets.push(("output_dir".into(), toml::Value::String(d.display().to_string())));
    }
    if let Some(s) = o.seed {
        let seed = i64::try_from(s).map_err(|_| Failure::Config("--seed must fit in 63 bits".into()))?;
        sets.push(("seed".into(), toml::Value::Integer(seed)));
    }
    if let Some(r) = &o.records {
        sets.push(("records".into(), toml::Value::String(r.display().to_string())));
    }
    if let Some(w) = o.w_g {
        sets.push(("average.w_g".into(), toml::Value::Float(w)));
    }
    if o.fixed_window {
        sets.push(("average.fixed".into(), toml::Value::Boolean(true)));
    }
    for item in &o.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
        sets.push((key.trim().to_string(), parse_value(raw.trim())));
    }
    if sets.is_empty() {
        return Ok(config);
    }
    let mut doc = toml::Value::try_from(&config).map_err(|e| Failure::Config(e.to_string()))?;
    for (key, value) in sets {
        set_path(&mut doc, &key, value)?;
    }
    doc.try_into().map_err(|e: toml::de::Error| Failure::Config(e.to_string()))
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let unknown = || Failure::Config(format!("unknown config key '{key}'"));
        if let Ok(idx) = part.parse::<usize>() {
            let arr = node.as_array_mut().ok_or_else(unknown)?;
            let len = arr.len();
            let slot = arr
                .get_mut(idx)
                .ok_or_else(|| Failure::Config(format!("index {idx} out of range in '{key}' (length {len})")))?;
            if i + 1 == parts.len() {
                *slot = value;
                return Ok(());
            }
            node = slot;
            continue;
        }
        let table = node.as_table_mut().ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*part).ok_or_else(unknown)?;
    }
    Ok(())
}

fn print_summary(manifest: &RunManifest) {
    for s in &manifest.stages {
        let status = match s.status {
            StageStatus::Ok => "ok",
            StageStatus::Failed => "failed",
            StageStatus::Skipped => "skipped",
        };
        println!(
            "{:<8} {:<7} {:>3} outputs {:>8.2}s",
            s.stage.name(),
            status,
            s.outputs.len(),
            s.wall_seconds
        );
        for w in &s.warnings {
            println!("  warning: {w}");
        }
    }
}
