//! `c2pc`: synthesize datasets, train, infer, evaluate and benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c2pc::csidata::{load_csi_container, load_dataset, preprocess, split_train_val, write_ply};
use c2pc::eval::{bench_latency, evaluate, GroundTruthOracle, IcpConfig, Predictor};
use c2pc::loss::LossConfig;
use c2pc::model::{load_checkpoint, save_checkpoint, Model, Model32, ModelConfig, Precision};
use c2pc::synth::{make_dataset, SynthConfig};
use c2pc::train::{train_loop, TrainConfig};
use c2pc::Error;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Exit codes.
const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

/// File written next to training outputs with the full effective config.
const RUN_CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "c2pc", version, about = "WiFi CSI to 3D point cloud pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr0=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the effective configuration (every key) and exit.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, the metrics log and the config.
    Train {
        /// Dataset directory or manifest; defaults to `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a randomly initialized checkpoint for `model` and `train.seed`.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one CSI container and write the cloud as PLY.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// f64 runs the training graph; f32 is the faster inference path.
        #[arg(long, default_value = "f64")]
        precision: Precision,
    },
    /// Register predictions onto ground truth and report fitness/RMSE.
    Eval {
        #[arg(long, required_unless_present = "predict_ground_truth")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Inlier distance in meters. Fitness depends on it, so it is
        /// always given explicitly.
        #[arg(long)]
        threshold: f64,
        /// Use the ground truth as the prediction (checks the metric path).
        #[arg(long)]
        predict_ground_truth: bool,
        /// Write the JSON report here and the per-sample CSV beside it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "f64")]
        precision: Precision,
    },
    /// Time single-sample inference.
    Bench {
        #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Benchmark a fresh model built from the `model` section.
        #[arg(long)]
        random_init: bool,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    eval: EvalSection,
    synth: SynthConfig,
    paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    max_iter: usize,
    tolerance: f64,
    centroid_prealign: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let icp = IcpConfig::new(0.05);
        Self {
            max_iter: icp.max_iter,
            tolerance: icp.tolerance,
            centroid_prealign: icp.centroid_prealign,
        }
    }
}

/// Empty strings mean "not set".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsSection {
    data: String,
    out: String,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(args: &GlobalArgs) -> CliResult<RunConfig> {
    let mut value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for item in &args.overrides {
        apply_override(&mut value, item)?;
    }
    let config: RunConfig = toml::Value::Table(value)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::config(format!("invalid configuration: {e}")))?;
    config.model.validate()?;
    config.train.validate()?;
    config.loss.validate()?;
    config.synth.validate()?;
    Ok(config)
}

/// `section.key=value`; the value is read as a TOML literal, falling back
/// to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got {item:?}")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("--set {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn config_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

fn pick_path(flag: Option<PathBuf>, fallback: &str, name: &str) -> CliResult<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None if !fallback.is_empty() => Ok(PathBuf::from(fallback)),
        None => Err(Failure::config(format!("--{name} is required (or set paths.{name})"))),
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(load_checkpoint(path, None)?.model)
}

fn cmd_synth(config: &RunConfig, n: usize, seed: u64, out: &Path) -> CliResult<()> {
    let manifest = make_dataset(n, seed, out, &config.synth)?;
    log::info!("wrote {} samples to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_train(config: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let samples = load_dataset(data)?;
    let (train, val) = split_train_val(samples, config.train.val_fraction, config.train.seed)?;
    let (mut model, state) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, Some(&config.model))?;
            let state = ckpt
                .optimizer
                .ok_or_else(|| Failure::config(format!("{} has no optimizer state", path.display())))?;
            (ckpt.model, Some(state))
        }
        None => (Model::new(config.model.clone(), config.train.seed)?, None),
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(RUN_CONFIG_FILE), config_toml(config))?;
    log::info!("training on {} samples, validating on {}", train.len(), val.len());
    let summary = train_loop(&mut model, &train, &val, &config.train, &config.loss, out, state)?;
    print_json(&serde_json::json!({
        "epochs": summary.records.len(),
        "best_val_chamfer": summary.best_val_chamfer,
        "final_val_chamfer": summary.records.last().map(|r| r.val_chamfer),
        "skipped_steps": summary.skipped_steps,
        "metrics": summary.metrics_path,
        "best_checkpoint": summary.best_checkpoint,
        "last_checkpoint": summary.last_checkpoint,
        "seed": config.train.seed,
    }));
    Ok(())
}

fn cmd_init(config: &RunConfig, out: &Path) -> CliResult<()> {
    let model = Model::new(config.model.clone(), config.train.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, None, out)?;
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path, precision: Precision) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let sample = load_csi_container(input)?;
    let cloud = model.predict_with(&preprocess(&sample)?, precision)?;
    write_ply(&cloud, out)?;
    log::info!("wrote {} points to {}", cloud.len(), out.display());
    Ok(())
}

fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    threshold: f64,
    oracle: bool,
    out: Option<&Path>,
    precision: Precision,
) -> CliResult<()> {
    let icp = IcpConfig {
        threshold,
        max_iter: config.eval.max_iter,
        tolerance: config.eval.tolerance,
        centroid_prealign: config.eval.centroid_prealign,
    };
    icp.validate()?;
    let dataset = load_dataset(data)?;
    let report = if oracle {
        evaluate(&GroundTruthOracle, &dataset, &icp)?
    } else {
        let path = checkpoint.ok_or_else(|| Failure::config("--checkpoint is required"))?;
        let model = load_model(path)?;
        let predictor: &dyn Predictor = match precision {
            Precision::F64 => &model,
            Precision::F32 => &Model32::new(&model),
        };
        evaluate(predictor, &dataset, &icp)?
    };
    print_json(&report);
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
        fs::write(path.with_extension("csv"), report.to_csv())?;
    }
    Ok(())
}

fn cmd_bench(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    warmup: usize,
    runs: usize,
    precision: Precision,
) -> CliResult<()> {
    let model = match checkpoint {
        Some(path) => load_model(path)?,
        None => Model::new(config.model.clone(), config.train.seed)?,
    };
    let stats = bench_latency(&model, warmup, runs, precision)?;
    print_json(&serde_json::json!({
        "input_shape": [model.config().antennas, model.config().subcarriers, 2, model.config().time_slices],
        "output_points": model.config().n_points,
        "threads": rayon::current_num_threads(),
        "latency": stats,
    }));
    Ok(())
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("C2PC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("C2PC_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let config = load_config(&cli.global)?;
    if cli.global.show_config {
        print!("{}", config_toml(&config));
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::config("no command given (see --help)"));
    };
    match command {
        Command::Synth { n, seed, out } => cmd_synth(&config, n, seed, &out),
        Command::Train { data, out, resume } => {
            let data = pick_path(data, &config.paths.data, "data")?;
            let out = pick_path(out, &config.paths.out, "out")?;
            cmd_train(&config, &data, &out, resume.as_deref())
        }
        Command::Init { out } => cmd_init(&config, &out),
        Command::Infer {
            checkpoint,
            input,
            out,
            precision,
        } => cmd_infer(&checkpoint, &input, &out, precision),
        Command::Eval {
            checkpoint,
            data,
            threshold,
            predict_ground_truth,
            out,
            precision,
        } => {
            let data = pick_path(data, &config.paths.data, "data")?;
            cmd_eval(
                &config,
                checkpoint.as_deref(),
                &data,
                threshold,
                predict_ground_truth,
                out.as_deref(),
                precision,
            )
        }
        Command::Bench {
            checkpoint,
            random_init: _,
            warmup,
            runs,
            precision,
        } => cmd_bench(&config, checkpoint.as_deref(), warmup, runs, precision),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors count as configuration errors; help and version exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_strings() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.lr0=0.01").unwrap();
        apply_override(&mut t, "paths.data=some/dir").unwrap();
        apply_override(&mut t, "model.n_points=16").unwrap();
        let c: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.lr0, 0.01);
        assert_eq!(c.paths.data, "some/dir");
        assert_eq!(c.model.n_points, 16);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&config_toml(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nlr = 1.0", "[synth.rf]\ncolor = 1", "[train]\nbeta3 = 0.1"] {
            assert!(toml::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::Config("x".into())).code, EXIT_CONFIG);
        assert_eq!(Failure::from(Error::Parse("x".into())).code, EXIT_DATA);
        assert_eq!(
            Failure::from(Error::Divergence { epoch: 0, msg: "nan".into() }).code,
            EXIT_DIVERGENCE
        );
    }
}
