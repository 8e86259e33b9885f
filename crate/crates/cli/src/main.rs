//! `dpr`: train, evaluate and inspect recalibrated patch forecasters.
//!
//! Exit codes are stable:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | I/O or other unexpected failure           |
//! | 2    | usage (bad flags or arguments)            |
//! | 3    | config (bad keys, values or dimensions)   |
//! | 4    | data (missing file, unparsable cells)     |
//! | 5    | numeric (non-finite loss or gradient)     |
//! | 6    | checkpoint (corrupt or incompatible file) |
//! | 7    | an invariant check failed                 |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use dpr::backbone::DprNetModel;
use dpr::checkpoint::Checkpoint;
use dpr::config::RunConfig;
use dpr::data::{load_csv, make_regime_synthetic, RegimeSpec, SeriesFrame, Split};
use dpr::diagnostics::{composite_score, diagnose, DiagnosticsReport};
use dpr::invariants::run_battery;
use dpr::par::Execution;
use dpr::train::{evaluate, train, Ablation, EpochRecord, PreparedData};
use dpr::{Error, Tensor};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_CHECKPOINT: u8 = 6;
const EXIT_INVARIANT: u8 = 7;

#[derive(Parser, Debug)]
#[command(name = "dpr", version, about = "Patch forecaster with token-level recalibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, epoch log and metrics.
    Train(TrainArgs),
    /// Report MSE/MAE of a checkpoint on one split.
    Eval(EvalArgs),
    /// Forecast the horizon after the last lookback rows of a CSV.
    Forecast(ForecastArgs),
    /// Non-stationarity profile of one or more datasets.
    Diagnose(DiagnoseArgs),
    /// Run the invariant battery.
    Gradcheck(GradcheckArgs),
    /// Write a seeded regime-switch series as CSV.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data CSV; overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Remove a component: mscale, ortho, init or route. Repeatable.
    #[arg(long, value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Supplies the split ratios; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write the metrics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV whose last lookback rows are the input window.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Dataset CSVs. Repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Per-dataset CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: start adapter gains at 0.5 instead of 0.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Short blocks: about a dozen switches per 2048 rows.
    #[arg(long)]
    rapid: bool,
    /// Also write the block schedule (start,end,regime) here.
    #[arg(long)]
    schedule: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invariant>().is_some() {
        return EXIT_INVARIANT;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape { .. } | Error::Contract(_)) => EXIT_CONFIG,
        Some(Error::Data(_)) => EXIT_DATA,
        Some(Error::Numeric(_) | Error::UndefinedDiagnostic(_)) => EXIT_NUMERIC,
        Some(Error::Checkpoint(_)) => EXIT_CHECKPOINT,
        Some(Error::Io(_)) | None => EXIT_IO,
    }
}

#[derive(Debug)]
struct Invariant(Vec<&'static str>);

impl std::fmt::Display for Invariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant failure: {}", self.0.join(", "))
    }
}

impl std::error::Error for Invariant {}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("DPR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DPR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(path: &Path) -> anyhow::Result<SeriesFrame> {
    if !path.exists() {
        return Err(Error::Data(format!("{}: no such file", path.display())).into());
    }
    Ok(load_csv(path)?)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut run = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    let path = args
        .data
        .clone()
        .or_else(|| run.data.path.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no data: pass --data or set data.path".into()))?;
    let frame = load_data(&path)?;
    let mut cfg = run.model_config(frame.n_channels())?;
    for a in &args.ablate {
        a.apply(&mut cfg);
    }
    let tc = run.train_config();
    let data = PreparedData::new(&frame, run.data.split, cfg.lookback, cfg.horizon)?;
    let model = DprNetModel::new(cfg, tc.seed)?;
    log::info!("training {} parameters on {}", model.param_count(), path.display());
    let out = train(model, &data, &tc, Execution::Parallel)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt = Checkpoint {
        model: out.model,
        scaler: Some(data.scaler.clone()),
        precision: tc.precision,
    };
    ckpt.save(&args.out.join("model.dprc"))?;

    let mut log = String::from(EpochRecord::CSV_HEADER);
    log.push('\n');
    for r in &out.history {
        log.push_str(&r.csv_line());
        log.push('\n');
    }
    fs::write(args.out.join("epochs.csv"), log)?;
    fs::write(args.out.join("config.toml"), run.to_toml())?;

    let test = evaluate(&ckpt.model, &data, Split::Test, Execution::Parallel)?;
    let mut metrics = String::new();
    writeln!(metrics, "params = {}", ckpt.model.param_count())?;
    writeln!(metrics, "epochs = {}", out.history.len())?;
    writeln!(metrics, "best_epoch = {}", out.best_epoch)?;
    writeln!(metrics, "best_val_mse = {}", out.best_val_mse)?;
    writeln!(metrics, "test_mse = {}", test.mse)?;
    writeln!(metrics, "test_mae = {}", test.mae)?;
    fs::write(args.out.join("metrics.txt"), &metrics)?;
    print!("{metrics}");
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let loaded = Checkpoint::load(path)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.checkpoint)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let run = load_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let path = args
        .data
        .clone()
        .or_else(|| run.data.path.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no data: pass --data or set data.path".into()))?;
    let frame = load_data(&path)?;
    let cfg = &ckpt.model.config;
    if frame.n_channels() != cfg.channels {
        bail!(Error::Config(format!(
            "checkpoint expects {} channels, data has {}",
            cfg.channels,
            frame.n_channels()
        )));
    }
    let data = match ckpt.scaler.clone() {
        Some(s) => PreparedData::with_scaler(&frame, run.data.split, cfg.lookback, cfg.horizon, s)?,
        None => PreparedData::new(&frame, run.data.split, cfg.lookback, cfg.horizon)?,
    };
    let m = evaluate(&ckpt.model, &data, args.split, Execution::Parallel)?;
    let text = format!("split = {}\nmse = {}\nmae = {}\n", args.split, m.mse, m.mae);
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, text)?;
    }
    Ok(())
}

fn cmd_forecast(args: ForecastArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let frame = load_data(&args.data)?;
    let cfg = &ckpt.model.config;
    if frame.n_channels() != cfg.channels {
        bail!(Error::Config(format!(
            "checkpoint expects {} channels, data has {}",
            cfg.channels,
            frame.n_channels()
        )));
    }
    if frame.len() < cfg.lookback {
        bail!(Error::Data(format!(
            "forecast needs at least {} rows (the lookback), got {}",
            cfg.lookback,
            frame.len()
        )));
    }
    let window = frame.slice(frame.len() - cfg.lookback, frame.len())?;
    let c = cfg.channels;
    let mut x = window.values().to_vec();
    if let Some(s) = &ckpt.scaler {
        x = s.transform(&x);
    }
    let pred = ckpt.model.predict(&Tensor::new(&[1, cfg.lookback, c], x)?)?;
    let mut y = pred.into_data();
    if let Some(s) = &ckpt.scaler {
        y = s.inverse(&y);
    }
    let out = SeriesFrame::new(y, frame.channel_names().to_vec())?;
    match &args.out {
        Some(p) => out.write_csv(p)?,
        None => {
            let mut text = frame.channel_names().join(",");
            text.push('\n');
            for t in 0..out.len() {
                let row: Vec<String> = out.row(t).iter().map(f64::to_string).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.4}"))
}

fn cmd_diagnose(args: DiagnoseArgs) -> anyhow::Result<()> {
    let mut reports: Vec<DiagnosticsReport> = Vec::new();
    for path in &args.data {
        let frame = load_data(path)?;
        reports.push(diagnose(&dataset_name(path), &frame, Execution::Parallel));
    }
    let complete: Vec<(String, f64, f64)> = reports
        .iter()
        .filter_map(|r| Some((r.dataset.clone(), r.spectral_entropy?, r.vov?)))
        .collect();
    let scores = if complete.len() >= 2 { Some(composite_score(&complete)?) } else { None };
    let score_of = |name: &str| scores.as_ref().and_then(|s| s.iter().find(|r| r.dataset == name));

    let mut csv = String::from("dataset,channels,vov_window,adf_p,spectral_entropy,vov,undefined");
    if scores.is_some() {
        csv.push_str(",entropy_rank,vov_rank,score");
    }
    csv.push('\n');
    println!(
        "{:<20} {:>8} {:>8} {:>8} {:>8}{}",
        "dataset",
        "ADF p",
        "H_s",
        "VoV",
        "window",
        if scores.is_some() { "   rank(H_s) rank(VoV) score" } else { "" }
    );
    for r in &reports {
        write!(
            csv,
            "{},{},{},{},{},{},{}",
            r.dataset,
            r.channels.len(),
            r.window,
            r.adf_p.map_or("".into(), |v| v.to_string()),
            r.spectral_entropy.map_or("".into(), |v| v.to_string()),
            r.vov.map_or("".into(), |v| v.to_string()),
            r.undefined
        )?;
        let mut line = format!(
            "{:<20} {:>8} {:>8} {:>8} {:>8}",
            r.dataset,
            fmt_opt(r.adf_p),
            fmt_opt(r.spectral_entropy),
            fmt_opt(r.vov),
            r.window
        );
        if scores.is_some() {
            match score_of(&r.dataset) {
                Some(s) => {
                    write!(csv, ",{},{},{}", s.entropy_rank, s.vov_rank, s.score)?;
                    write!(line, "   {:>9} {:>9} {:>5}", s.entropy_rank, s.vov_rank, s.score)?;
                }
                None => csv.push_str(",,,"),
            }
        }
        if r.undefined > 0 {
            line.push_str(" *");
        }
        csv.push('\n');
        println!("{line}");
    }
    let undefined: usize = reports.iter().map(|r| r.undefined).sum();
    if undefined > 0 {
        println!("* {undefined} undefined channel metric(s) excluded from the averages");
        for r in &reports {
            for ch in &r.channels {
                for (metric, v) in [("adf_p", &ch.adf_p), ("spectral_entropy", &ch.spectral_entropy), ("vov", &ch.vov)] {
                    if let Err(e) = v {
                        println!("  {} / {} / {metric}: {e}", r.dataset, ch.name);
                    }
                }
            }
        }
    }
    if let Some(out) = &args.out {
        fs::write(out, csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let gamma = if args.inject_fault { 0.5 } else { 0.0 };
    let results = run_battery(args.seed, gamma)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Invariant(failed).into())
    }
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut spec = if args.rapid { RegimeSpec::rapid() } else { RegimeSpec::default() };
    spec.channels = args.channels;
    let (frame, blocks) = make_regime_synthetic(args.seed, args.len, &spec)?;
    frame.write_csv(&args.out)?;
    if let Some(p) = &args.schedule {
        let mut text = String::from("start,end,regime\n");
        for b in &blocks {
            writeln!(text, "{},{},{:?}", b.start, b.end, b.regime)?;
        }
        fs::write(p, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
