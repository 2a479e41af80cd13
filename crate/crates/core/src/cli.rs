//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::datagen::{generate_dataset, read_dataset, write_dataset, Dataset, ReadMode, Split, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::operator::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind, OperatorContext, OperatorMode, Spiking,
    VsGnoModel,
};
use crate::report::{format_percent, metrics_table, write_report_csv, ReportRow};
use crate::training::{evaluate, evaluate_with, prepare_split, train, Metrics, Prepared};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

/// Stable process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::EmptyDataset | Error::InvalidK { .. } => EXIT_CONFIG,
        Error::Io(_) | Error::Format { .. } | Error::ChecksumMismatch { .. } => EXIT_IO,
        Error::Incompatible(_)
        | Error::ShapeMismatch(_)
        | Error::GateMisaligned { .. }
        | Error::WrongMode(_)
        | Error::MissingComponent(_) => EXIT_INCOMPATIBLE,
        _ => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "spikegno", version, about = "Variable spiking graph neural operator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark dataset.
    Generate(Overrides),
    /// Train one model and write checkpoints plus history.
    Train(Overrides),
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Where to write the metrics JSON (default: next to the checkpoint).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train one model per gamma and write a CSV report.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<OperatorMode>,
    #[arg(long, value_parser = parse_spiking)]
    pub spiking: Option<Spiking>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub spike_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overwrite an existing dataset directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (the dataset directory for `generate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<OperatorMode, String> {
    match s {
        "full" => Ok(OperatorMode::Full),
        "spectral_only" => Ok(OperatorMode::SpectralOnly),
        _ => Err(format!("expected full or spectral_only, got {s:?}")),
    }
}

fn parse_spiking(s: &str) -> std::result::Result<Spiking, String> {
    match s {
        "on" => Ok(Spiking::On),
        "bypass" => Ok(Spiking::Bypass),
        _ => Err(format!("expected on or bypass, got {s:?}")),
    }
}

impl Overrides {
    /// Config file (or defaults) with flags applied on top, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$( if let Some(v) = self.$field.clone() { c.$field = v; } )*};
        }
        apply!(seed, mode, spiking, gamma, alpha, spike_steps, epochs, batch_size, threads, dataset);
        if let Some(o) = &self.out {
            c.output = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("SPIKEGNO_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(o) => {
            let mut cfg = o.resolve()?;
            if let Some(out) = &o.out {
                cfg.dataset = out.clone();
            }
            cmd_generate(&cfg, o.force).map(|_| ())
        }
        Command::Train(o) => {
            let cfg = o.resolve()?;
            let m = cmd_train(&cfg)?;
            print!("{}", metrics_table(cfg.gamma, &m));
            Ok(())
        }
        Command::Eval {
            overrides,
            checkpoint,
            split,
            json,
        } => {
            let cfg = overrides.resolve()?;
            let json = json.clone().unwrap_or_else(|| {
                let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
                let split = serde_json::to_value(split).expect("split serialises");
                checkpoint.with_file_name(format!("{stem}.{}.json", split.as_str().unwrap_or("split")))
            });
            cmd_eval(&cfg, checkpoint, *split, &json).map(|_| ())
        }
        Command::Sweep { overrides, gammas } => {
            let mut cfg = overrides.resolve()?;
            if let Some(g) = gammas {
                cfg.gammas = g.clone();
                cfg.validate()?;
            }
            cmd_sweep(&cfg).map(|_| ())
        }
    }
}

fn dir_has_entries(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<Dataset> {
    let dir = &cfg.dataset;
    if dir_has_entries(dir) && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    let ds = generate_dataset(&cfg.generate_config())?;
    write_dataset(dir, &ds)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let written = read_dataset(dir, ReadMode::Raw)?;
    let m = &written.meta;
    println!("dataset {}", dir.display());
    println!("  nodes n = {}, channels k = {} ({}), inputs q = {}", m.n, m.k, CHANNEL_NAMES.join(", "), m.q);
    println!(
        "  samples {} (train {}, val {}, test {})",
        m.count, m.splits.train, m.splits.val, m.splits.test
    );
    println!("  reconstruction ratio {:.1}:1", m.reconstruction_ratio);
    for (file, sum) in &m.checksums {
        println!("  {file} fnv1a64 {sum}");
    }
    Ok(ds)
}

fn load_dataset_and_context(cfg: &RunConfig) -> Result<(Dataset, OperatorContext)> {
    let ds = read_dataset(&cfg.dataset, ReadMode::Normalized)?;
    let graph = ds.mesh.graph()?;
    let ctx = OperatorContext::new(graph, cfg.modes)?;
    Ok((ds, ctx))
}

/// Trains into `cfg.output`; returns validation metrics of the best model.
pub fn cmd_train(cfg: &RunConfig) -> Result<Metrics> {
    let (ds, ctx) = load_dataset_and_context(cfg)?;
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let model_cfg = cfg.model_config(ds.meta.q, ds.meta.k, ds.meta.knn_k);
    let model = VsGnoModel::new(model_cfg, ctx.edge_count(), cfg.seed)?;
    let mut history = fs::File::create(out.join("history.jsonl"))?;
    let mut write_err = None;
    let outcome = train(model, &ctx, &ds, &cfg.train_config(), |rec| {
        let line = serde_json::to_string(rec).expect("record serialises");
        if let Err(e) = writeln!(history, "{line}").and_then(|_| history.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let meta = |epoch: usize| {
        json!({
            "epoch": epoch,
            "alpha": cfg.alpha,
            "gamma": cfg.gamma,
            "dataset": {"n": ds.meta.n, "k": ds.meta.k, "q": ds.meta.q},
        })
    };
    write_checkpoint(&out.join("best.ckpt"), &Checkpoint::from_model(&outcome.best, meta(outcome.best_epoch)))?;
    write_checkpoint(&out.join("last.ckpt"), &Checkpoint::from_model(&outcome.last, meta(cfg.epochs)))?;
    let metrics = evaluate(&outcome.best, &ctx, &ds, Split::Val, cfg.threads)?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&json!({"split": "val", "best_epoch": outcome.best_epoch, "metrics": metrics}))
            .expect("metrics serialise"),
    )?;
    Ok(metrics)
}

fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    let c = &ck.config;
    if c.input_dim != ds.meta.q || c.output_channels != ds.meta.k || c.coord_dim != 2 {
        return Err(Error::Incompatible(format!(
            "checkpoint expects q = {}, k = {}, {}-D points; dataset has q = {}, k = {}, 2-D points",
            c.input_dim, c.output_channels, c.coord_dim, ds.meta.q, ds.meta.k
        )));
    }
    Ok(())
}

/// Evaluates a checkpoint and writes the metrics JSON to `json_path`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, json_path: &Path) -> Result<Metrics> {
    let ck = read_checkpoint(checkpoint)?;
    let ds = read_dataset(&cfg.dataset, ReadMode::Normalized)?;
    check_compatible(&ck, &ds)?;
    let gamma = ck.metadata.get("gamma").and_then(|g| g.as_f64()).unwrap_or(0.0);
    let metrics = match ck.kind {
        CheckpointKind::EchoTruth => {
            let samples = prepare_split(&ds, split)?;
            let echo = |_: usize, s: &Prepared| Ok((s.truth.clone(), Vec::new()));
            evaluate_with(&samples, &echo, cfg.threads)?
        }
        CheckpointKind::Model => {
            let graph = ds.mesh.graph()?;
            if ck.config.modes > graph.n() {
                return Err(Error::Incompatible(format!(
                    "checkpoint uses {} modes on a {}-node graph",
                    ck.config.modes,
                    graph.n()
                )));
            }
            let ctx = OperatorContext::new(graph, ck.config.modes)?;
            let model = ck.into_model()?;
            model.check_context(&ctx)?;
            evaluate(&model, &ctx, &ds, split, cfg.threads)?
        }
    };
    for (name, v) in ds.meta.channel_names.iter().zip(&metrics.l2_per_channel) {
        println!("{name:<12} L2 {}", format_percent(Some(*v), 2));
    }
    print!("{}", metrics_table(gamma, &metrics));
    fs::write(
        json_path,
        serde_json::to_string_pretty(&json!({"split": split, "gamma": gamma, "metrics": metrics}))
            .expect("metrics serialise"),
    )?;
    Ok(metrics)
}

/// One training run per gamma, evaluated on the test split.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let mut gammas = cfg.gammas.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    if gammas.is_empty() {
        return Err(Error::Config("no gamma values to sweep".into()));
    }
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("config.json"), cfg.to_json())?;
    let mut rows = Vec::new();
    let mut last_err = None;
    for &g in &gammas {
        let run = RunConfig {
            gamma: g,
            output: cfg.output.join(format!("gamma_{g}")),
            ..cfg.clone()
        };
        let result = run
            .validate()
            .and_then(|_| cmd_train(&run))
            .and_then(|_| {
                let ck = read_checkpoint(&run.output.join("best.ckpt"))?;
                let (ds, ctx) = load_dataset_and_context(&run)?;
                evaluate(&ck.into_model()?, &ctx, &ds, Split::Test, run.threads)
            });
        match result {
            Ok(m) => rows.push(ReportRow::from_metrics(g, &m)),
            Err(e) => {
                log::error!("gamma {g}: {e}");
                rows.push(ReportRow::failed(g, e.to_string()));
                last_err = Some(e);
            }
        }
    }
    let csv = write_report_csv(&rows)?;
    fs::write(cfg.output.join("report.csv"), &csv)?;
    print!("{csv}");
    if rows.iter().all(|r| r.l2_percent.is_none()) {
        return Err(last_err.expect("a failed run recorded its error"));
    }
    Ok(rows)
}
