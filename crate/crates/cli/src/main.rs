//! `ccnet`: train, calibrate, evaluate, and tabulate chained-cascade
//! detectors driven by TOML run configs.
//!
//! Every command refuses to overwrite existing outputs unless
//! `--overwrite` is passed. Log verbosity comes from the `CC_NET_LOG`
//! environment variable (e.g. `CC_NET_LOG=info`).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ccnet_core::config::RunConfig;
use ccnet_core::eval::{evaluate, EvalReport};
use ccnet_core::model::{Mode, Model};
use ccnet_core::train::{
    calibrate_run, ensure_fresh, eval_config, test_scenes, train_to_dir,
};

#[derive(Parser)]
#[command(name = "ccnet", version, about = "Chained-cascade detector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector; writes a config echo, a loss log, and checkpoints.
    Train(TrainArgs),
    /// Calibrate rejection thresholds from a trained checkpoint.
    Calibrate(CalibrateArgs),
    /// Evaluate a checkpoint on the held-out test set.
    Eval(EvalArgs),
    /// Collect per-mode eval reports from a directory into a CSV table.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's ablation mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to calibrate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target per-stage negative rejection rate. Repeat the flag for
    /// per-stage values; a single value applies to every stage.
    #[arg(long = "target-rate", default_value = "0.3")]
    target_rates: Vec<f64>,
    /// Output thresholds file (default: <out>/thresholds.json).
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Thresholds file from `calibrate`; omitted means no rejection.
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding eval_<mode>.json reports.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing ablation.csv instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

/// Subset of the thresholds file eval actually needs; extra metadata keys
/// (targets, realized rates) are ignored.
#[derive(serde::Deserialize)]
struct ThresholdsFile {
    thresholds: Vec<f64>,
}

const CSV_HEADER: &str = "mode,present,map,mean_stages_evaluated,mean_stages_negative,\
                          mean_stages_positive,positives_rejected_before_final";

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CC_NET_LOG")).init();
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out(common: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .context("no output directory: pass --out or set out_dir in the config")
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let model = Model::new(&cfg.model_config(), cfg.seed);
    model
        .params
        .load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Print to stdout, treating a closed pipe (e.g. `ccnet eval | head`) as a
/// clean exit rather than a panic.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    if out.write_all(text.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = resolve_out(&args.common, &cfg)?;
    let (_, logs, ckpt) = train_to_dir(&cfg, &out, args.common.overwrite)?;
    let last = logs.last().context("no training steps ran")?;
    emit(&format!(
        "trained {} for {} steps: final loss {:.4}; checkpoint {}\n",
        cfg.mode,
        logs.len(),
        last.total,
        ckpt.display()
    ));
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let rates = if args.target_rates.len() == 1 {
        vec![args.target_rates[0]; model.n_stages()]
    } else {
        args.target_rates.clone()
    };
    let report = calibrate_run(&model, &cfg, &rates)?;
    let path = match args.thresholds {
        Some(p) => p,
        None => resolve_out(&args.common, &cfg)?.join("thresholds.json"),
    };
    ensure_fresh(&[&path], args.common.overwrite)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_text(&path, &format!("{json}\n"))?;
    emit(&format!("{json}\n"));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let out = resolve_out(&args.common, &cfg)?;
    let mut model = load_model(&cfg, &args.checkpoint)?;
    if let Some(path) = &args.thresholds {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading thresholds {}", path.display()))?;
        let tf: ThresholdsFile = serde_json::from_str(&text)
            .with_context(|| format!("parsing thresholds {}", path.display()))?;
        if tf.thresholds.len() != model.n_stages() {
            bail!(
                "thresholds file has {} entries but the {} model has {} stages",
                tf.thresholds.len(),
                cfg.mode,
                model.n_stages()
            );
        }
        model.chain.thresholds = tf.thresholds;
    }

    let report_path = out.join(format!("eval_{}.json", cfg.mode));
    let traces_path = out.join(format!("traces_{}.jsonl", cfg.mode));
    ensure_fresh(&[&report_path, &traces_path], args.common.overwrite)?;

    log::info!("evaluating {} on {} test images", cfg.mode, cfg.data.n_test_images);
    let scenes = test_scenes(&cfg);
    let (mut report, records) = evaluate(&model, &scenes, &eval_config(&cfg));
    report.mode = cfg.mode.to_string();
    report.seed = cfg.seed;

    let json = serde_json::to_string_pretty(&report)?;
    write_text(&report_path, &format!("{json}\n"))?;
    let mut lines = String::with_capacity(records.len() * 64);
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_text(&traces_path, &lines)?;
    emit(&format!("{json}\n"));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let csv_path = args.out.join("ablation.csv");
    ensure_fresh(&[&csv_path], args.overwrite)?;
    let mut rows = vec![CSV_HEADER.to_string()];
    let mut found = 0;
    for mode in Mode::ALL {
        let path = args.out.join(format!("eval_{mode}.json"));
        if !path.exists() {
            rows.push(format!("{mode},absent,,,,,"));
            continue;
        }
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        found += 1;
        rows.push(format!(
            "{mode},yes,{},{},{},{},{}",
            report.map,
            report.mean_stages_evaluated,
            report.mean_stages_negative,
            report.mean_stages_positive,
            report.positives_rejected_before_final
        ));
    }
    if found == 0 {
        bail!("no eval_<mode>.json reports found in {}", args.out.display());
    }
    let csv = rows.join("\n") + "\n";
    write_text(&csv_path, &csv)?;
    emit(&csv);
    Ok(())
}
