use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use relaycache::engine::Strategy;
use relaycache::harness::{
    bench_lengths, observe, profile_from_calibration, run_workflow, write_bench_csv, BenchConfig, CalibrationSpec,
    RunOptions, WorkflowSpec,
};
use relaycache::profiler::{LayerProfile, ProfilerParams};
use relaycache::selector::SelectionThresholds;
use relaycache::{Model, ModelSpec, RelayError};

const OUT_DIR_ENV: &str = "RELAYCACHE_OUT_DIR";

#[derive(Parser)]
#[command(name = "relaycache", version, about = "Decode-to-prefill KV relay on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a seeded toy checkpoint.
    GenModel {
        /// Model spec JSON; the built-in toy spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive a layer profile from a calibration spec.
    Profile {
        #[arg(long)]
        model: PathBuf,
        /// Calibration JSON; the built-in calibration set when omitted.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Profiler parameter JSON; missing fields take defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a multi-agent workflow and score it against full prefill.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        workflow: PathBuf,
        /// Required for relay; other strategies fall back to the whole stack.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Overrides every agent's own strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 1.5)]
        tau_dev: f64,
        #[arg(long, default_value_t = 1.45)]
        tau_inf: f64,
        #[arg(long, default_value_t = 10)]
        suffix_k: usize,
        /// Overrides the workflow seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Keep recomputing selected rows above the profile's end layer.
        #[arg(long)]
        continue_to_top: bool,
        /// Record wall-clock timings (makes reports non-reproducible).
        #[arg(long)]
        timings: bool,
        /// Skip the full-prefill oracle.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Write similarity, curve and recovery CSVs for a calibration set.
    Observe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Prefill cost of the downstream agents as upstream output grows.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        agents: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "full,zero,relay,blend")]
        strategies: Vec<StrategyArg>,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Calibrated from the built-in set when omitted.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Relay,
    Full,
    Zero,
    Blend,
}

impl StrategyArg {
    fn with_alpha(self, alpha: f64) -> Strategy {
        match self {
            StrategyArg::Relay => Strategy::Relay,
            StrategyArg::Full => Strategy::Full,
            StrategyArg::Zero => Strategy::Zero,
            StrategyArg::Blend => Strategy::Blend { alpha },
        }
    }
}

#[derive(Debug)]
enum CliError {
    Unreadable { path: PathBuf, source: std::io::Error },
    Schema { path: PathBuf, source: RelayError },
    Run(RelayError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Unreadable { .. } => 3,
            CliError::Schema { .. } => 4,
            CliError::Run(_) => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Unreadable { path, source } => json!({
                "error": "unreadable_file",
                "path": path,
                "message": source.to_string(),
            }),
            CliError::Schema { path, source } => json!({
                "error": "schema_violation",
                "path": path,
                "message": source.to_string(),
            }),
            CliError::Run(e) => json!({"error": "runtime", "message": e.to_string()}),
        }
    }
}

impl From<RelayError> for CliError {
    fn from(e: RelayError) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Unreadable {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    let bytes = read(path)?;
    String::from_utf8(bytes).map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        source: RelayError::Format(e.to_string()),
    })
}

/// Reads a file and parses it; parse failures count as schema violations.
fn load<T>(path: &Path, parse: impl FnOnce(&str) -> relaycache::Result<T>) -> CliResult<T> {
    parse(&read_text(path)?).map_err(|source| CliError::Schema {
        path: path.to_path_buf(),
        source,
    })
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::from_bytes(&read(path)?).map_err(|source| CliError::Schema {
        path: path.to_path_buf(),
        source,
    })
}

fn load_calib(path: Option<&Path>) -> CliResult<CalibrationSpec> {
    path.map_or_else(|| Ok(CalibrationSpec::default()), |p| load(p, CalibrationSpec::from_json))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> relaycache::Result<T> {
    Ok(serde_json::from_str(text)?)
}

/// Explicit paths are used as given; defaults land in `$RELAYCACHE_OUT_DIR`
/// or the working directory.
fn out_path(explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(default_name)
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(RelayError::from)?;
    }
    fs::write(path, contents).map_err(RelayError::from)?;
    Ok(())
}

fn execute(command: Command) -> CliResult<serde_json::Value> {
    match command {
        Command::GenModel { spec, seed, out } => {
            let spec = match spec {
                Some(p) => load(&p, |t| {
                    let s: ModelSpec = parse_json(t)?;
                    s.validate()?;
                    Ok(s)
                })?,
                None => ModelSpec::toy(),
            };
            let model = Model::random(spec, seed)?;
            let out = out_path(out, "model.bin");
            write(&out, model.to_bytes()?)?;
            Ok(json!({"model": out, "model_id": model.model_id()}))
        }
        Command::Profile {
            model,
            calib,
            params,
            out,
        } => {
            let model = load_model(&model)?;
            let calib = load_calib(calib.as_deref())?;
            let params = match params {
                Some(p) => load(&p, |t| {
                    let params: ProfilerParams = parse_json(t)?;
                    params.validate()?;
                    Ok(params)
                })?,
                None => ProfilerParams::default(),
            };
            let profile = profile_from_calibration(&model, &calib, &params)?;
            let out = out_path(out, "profile.json");
            write(&out, profile.to_json()?)?;
            let (l_start, l_det, l_end) = profile.triple();
            Ok(json!({
                "profile": out,
                "l_start": l_start,
                "l_det": l_det,
                "l_end": l_end,
                "warnings": profile.warnings,
            }))
        }
        Command::Run {
            model,
            workflow,
            profile,
            strategy,
            alpha,
            tau_dev,
            tau_inf,
            suffix_k,
            seed,
            out,
            csv,
            continue_to_top,
            timings,
            no_oracle,
        } => {
            let model = load_model(&model)?;
            let mut workflow = load(&workflow, WorkflowSpec::from_json)?;
            if let Some(seed) = seed {
                workflow.seed = seed;
            }
            let strategy = strategy.map(|s| s.with_alpha(alpha));
            let needs_profile = match strategy {
                Some(s) => s == Strategy::Relay,
                None => workflow.agents.iter().any(|a| a.strategy == Strategy::Relay),
            };
            let profile = match profile {
                Some(p) => load(&p, LayerProfile::from_json)?,
                None if needs_profile => {
                    return Err(RelayError::InvalidParams("the relay strategy needs --profile".into()).into())
                }
                None => {
                    let l = model.spec().num_layers;
                    LayerProfile::fixed(&model.model_id(), l, 0, 0, l - 1)?
                }
            };
            let options = RunOptions {
                strategy,
                thresholds: SelectionThresholds {
                    tau_dev,
                    tau_inf,
                    suffix_k,
                },
                continue_selected_to_top: continue_to_top,
                record_timings: timings,
                oracle: !no_oracle,
            };
            let report = run_workflow(&model, &workflow, &profile, &options)?;
            let out = out_path(out, "report.json");
            write(&out, report.to_json()?)?;
            if let Some(csv) = &csv {
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                write(csv, buf)?;
            }
            Ok(json!({
                "report": out,
                "csv": csv,
                "reuse_rate": report.totals.reuse_rate,
                "flops_relay": report.totals.flops_relay,
                "flops_full_equiv": report.totals.flops_full_equiv,
            }))
        }
        Command::Observe { model, calib, out_dir } => {
            let model = load_model(&model)?;
            let calib = load_calib(calib.as_deref())?;
            let instances = calib.instances(model.spec().vocab_size)?;
            let observation = observe(&model, &instances)?;
            let dir = out_path(out_dir, "observe");
            let files = observation.write_dir(&dir)?;
            Ok(json!({"out_dir": dir, "files": files}))
        }
        Command::Bench {
            model,
            lengths,
            agents,
            strategies,
            alpha,
            profile,
            seed,
            out,
        } => {
            let model = load_model(&model)?;
            let profile = match profile {
                Some(p) => load(&p, LayerProfile::from_json)?,
                None => profile_from_calibration(&model, &CalibrationSpec::default(), &ProfilerParams::default())?,
            };
            let strategies: Vec<Strategy> = strategies.iter().map(|s| s.with_alpha(alpha)).collect();
            let config = BenchConfig {
                agents,
                seed,
                ..Default::default()
            };
            let rows = bench_lengths(&model, &profile, &lengths, &strategies, &config)?;
            let out = out_path(out, "bench.csv");
            let mut buf = Vec::new();
            write_bench_csv(&rows, &mut buf)?;
            write(&out, buf)?;
            Ok(json!({"bench": out, "rows": rows.len(), "profile": profile.triple()}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({"error": "usage", "message": e.render().to_string()});
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code())
        }
    }
}
