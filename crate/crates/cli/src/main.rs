//! `mmr`: train, evaluate, predict, generate toy data, sweep and benchmark.

mod bench;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mmr_core::config::{parse_override, RunConfig};
use mmr_core::data::{generate_toy_dataset, MANIFEST_FILE};
use mmr_core::evaluate::infer_file;
use mmr_core::heatmap::{write_heatmap, HeatmapScale};
use mmr_core::pipeline::{self, CONFIG_FILE};
use mmr_core::MmrError;
use serde::Serialize;

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Reference setup: ViT-B encoder, WideResNet50 teacher, 224 crops.
    Paper,
    /// Desk-scale setup on the synthetic corpus.
    Toy,
}

impl Preset {
    fn config(self) -> RunConfig {
        match self {
            Preset::Paper => RunConfig::default(),
            Preset::Toy => RunConfig::toy(),
        }
    }
}

/// Masked multi-scale reconstruction for industrial anomaly detection.
///
/// Any `--section.key=value` or bare `section.key=value` argument overrides
/// the matching configuration field. Precedence: overrides, then the
/// `--config` file, then the preset.
#[derive(Debug, Parser)]
#[command(name = "mmr", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Defaults the configuration file is layered over.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,
    /// Training seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device (`run.device`).
    #[arg(long, global = true)]
    device: Option<String>,
    /// Dataset layout: aebad, mvtec or manifest_file (`data.layout`).
    #[arg(long, global = true)]
    layout: Option<String>,
    /// Dataset root (`data.root`); without it the toy corpus is used.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// PRO integration limit (`eval.fpr_limit`).
    #[arg(long, global = true)]
    fpr_limit: Option<f64>,
    /// Run directory (`run.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable the data-parallel helpers (`run.parallel = false`).
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a student and write checkpoint, loss CSV and config to the run directory.
    Train {
        /// Evaluate the final checkpoint on the test split afterwards.
        #[arg(long)]
        evaluate: bool,
    },
    /// Score the test split with a checkpoint and write report.json / report.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a heatmap PNG, its JSON sidecar and a scores.json for each input image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files or directories of images.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Colour each map over its own range instead of the fixed scale.
        #[arg(long)]
        relative_scale: bool,
    },
    /// Render the synthetic corpus described by the `toy` section.
    Toygen,
    /// Train and evaluate one run per grid point and merge the results.
    Sweep {
        /// `name=v1,v2,...`; repeat for a grid. Names: eta, q, stages (`1+2`), or any dotted key.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Measure heatmap throughput (images/s) at a fixed input size.
    Bench {
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
    },
}

#[derive(Debug, Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    field: Option<&'a str>,
    message: String,
}

fn report_error(kind: &str, field: Option<&str>, message: String) {
    let report = ErrorReport {
        error: kind,
        field,
        message,
    };
    eprintln!("{}", serde_json::to_string(&report).expect("plain strings serialize"));
}

/// Separate `--a.b=v` and `a.b=v` overrides from the arguments clap parses.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let body = arg.strip_prefix("--").unwrap_or(&arg);
        match body.split_once('=') {
            Some((key, _)) if key.contains('.') && !key.contains(['/', '\\']) && !key.starts_with('.') => {
                overrides.push(body.to_string())
            }
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

impl Cli {
    fn flag_overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let quote = |p: &Path| format!("{:?}", p.display().to_string());
        if let Some(seed) = self.seed {
            out.push(("train.seed".into(), seed.to_string()));
        }
        if let Some(device) = &self.device {
            out.push(("run.device".into(), format!("{device:?}")));
        }
        if let Some(layout) = &self.layout {
            out.push(("data.layout".into(), format!("{layout:?}")));
        }
        if let Some(root) = &self.data {
            out.push(("data.root".into(), quote(root)));
        }
        if let Some(limit) = self.fpr_limit {
            out.push(("eval.fpr_limit".into(), format!("{limit:?}")));
        }
        if let Some(dir) = &self.out {
            out.push(("run.out_dir".into(), quote(dir)));
        }
        if self.sequential {
            out.push(("run.parallel".into(), "false".into()));
        }
        out
    }
}

struct App {
    cli: Cli,
    overrides: Vec<(String, String)>,
}

impl App {
    fn resolve_with(&self, file: Option<&Path>, extra: &[(String, String)]) -> mmr_core::Result<RunConfig> {
        let mut all = self.cli.flag_overrides();
        all.extend(self.overrides.iter().cloned());
        all.extend(extra.iter().cloned());
        RunConfig::resolve(self.cli.preset.config(), file.or(self.cli.config.as_deref()), &all)
    }

    fn resolve(&self) -> mmr_core::Result<RunConfig> {
        self.resolve_with(None, &[])
    }

    /// Configuration for commands that consume a checkpoint: without
    /// `--config`, the config echoed into the checkpoint's run directory.
    fn resolve_for_checkpoint(&self, checkpoint: &Path) -> mmr_core::Result<RunConfig> {
        let echoed = checkpoint.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists());
        match (&self.cli.config, echoed) {
            (None, Some(file)) => self.resolve_with(Some(&file), &[]),
            _ => self.resolve(),
        }
    }
}

fn run(ctx: &App) -> Result<()> {
    match &ctx.cli.command {
        Command::Train { evaluate } => {
            let cfg = ctx.resolve()?;
            let dir = cfg.run.out_dir.clone();
            let outcome = pipeline::train_run(&cfg, &dir)?;
            let last = outcome.losses.last().map(|r| r.loss).unwrap_or(f32::NAN);
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("final loss: {last:.6}");
            if *evaluate {
                let (report, _) = pipeline::evaluate_run(&cfg, &outcome.checkpoint, &dir)?;
                print_report(&report);
            }
        }
        Command::Evaluate { checkpoint } => {
            let cfg = ctx.resolve_for_checkpoint(checkpoint)?;
            let dir = ctx
                .cli
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
            pipeline::write_run_header(&dir, &cfg, "evaluate")?;
            let (report, _) = pipeline::evaluate_run(&cfg, checkpoint, &dir)?;
            print_report(&report);
            println!("report: {}", dir.join(pipeline::REPORT_JSON).display());
        }
        Command::Predict {
            checkpoint,
            input,
            relative_scale,
        } => {
            let cfg = ctx.resolve_for_checkpoint(checkpoint)?;
            let dir = ctx
                .cli
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("predict"));
            pipeline::write_run_header(&dir, &cfg, "predict")?;
            let scale = if *relative_scale {
                HeatmapScale::Relative
            } else {
                cfg.eval.heatmap_scale
            };
            predict(&cfg, checkpoint, input, scale, &dir)?;
        }
        Command::Toygen => {
            let cfg = ctx.resolve()?;
            let dir = cfg.run.out_dir.clone();
            let records = generate_toy_dataset(&cfg.toy, &dir, cfg.execution())?;
            pipeline::write_run_header(&dir, &cfg, "toygen")?;
            println!("{} samples written to {}", records.len(), dir.display());
            println!("manifest: {}", dir.join(MANIFEST_FILE).display());
        }
        Command::Sweep { axes, jobs } => {
            let axes = axes.iter().map(|a| sweep::Axis::parse(a)).collect::<mmr_core::Result<Vec<_>>>()?;
            sweep::run(ctx, &axes, *jobs)?;
        }
        Command::Bench {
            size,
            batch,
            warmup,
            iters,
        } => {
            let cfg = ctx.resolve_with(None, &bench::size_overrides(*size))?;
            bench::run(&cfg, *batch, *warmup, *iters)?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PredictRow {
    input: PathBuf,
    heatmap: PathBuf,
    score: f32,
}

fn predict(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf], scale: HeatmapScale, dir: &Path) -> Result<()> {
    let (model, teacher, meta) = pipeline::open_checkpoint(cfg, checkpoint)?;
    let files = expand_inputs(inputs)?;
    let heatmaps = dir.join("heatmaps");
    std::fs::create_dir_all(&heatmaps).with_context(|| heatmaps.display().to_string())?;
    let mut rows = Vec::with_capacity(files.len());
    for (i, file) in files.iter().enumerate() {
        let map = infer_file(&model, &teacher, file, &meta.preprocess)?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let png = heatmaps.join(format!("{i:04}_{stem}.png"));
        let sidecar = write_heatmap(&map, teacher.stages().len(), scale, &png)?;
        println!("{:.6}\t{}", sidecar.score, file.display());
        rows.push(PredictRow {
            input: file.clone(),
            heatmap: png,
            score: sidecar.score,
        });
    }
    let path = dir.join("scores.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows)?).with_context(|| path.display().to_string())?;
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| input.display().to_string())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            return Err(MmrError::NotFound(input.clone()).into());
        }
    }
    Ok(files)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_report(report: &mmr_core::metrics::EvalReport) {
    println!("{:<16} {:>8} {:>8} {:>8}", "domain", "auroc", "p-auroc", "pro");
    for (domain, m) in &report.per_domain {
        println!(
            "{:<16} {:>8} {:>8} {:>8}",
            domain,
            fmt_opt(m.sample_auroc),
            fmt_opt(m.pixel_auroc),
            fmt_opt(m.pro)
        );
    }
    println!(
        "{:<16} {:>8} {:>8} {:>8}",
        "all",
        fmt_opt(Some(report.sample_auroc)),
        fmt_opt(report.pixel_auroc),
        fmt_opt(report.pro)
    );
}

fn exit_for(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<MmrError>() {
        Some(MmrError::Config { field, message }) => {
            report_error("config", Some(field), message.clone());
            ExitCode::from(EXIT_CONFIG)
        }
        Some(e) => {
            report_error(e.kind(), None, format!("{err:#}"));
            ExitCode::FAILURE
        }
        None => {
            report_error("other", None, format!("{err:#}"));
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, raw_overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", None, e.to_string().trim().to_string());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let overrides = match raw_overrides.iter().map(|o| parse_override(o)).collect() {
        Ok(o) => o,
        Err(e) => return exit_for(&anyhow::Error::from(e)),
    };
    let ctx = App { cli, overrides };
    match run(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
