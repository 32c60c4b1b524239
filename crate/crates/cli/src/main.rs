use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use layerinfo::baselines::Method;
use layerinfo::datasets::{DatasetFormat, LoadOptions};
use layerinfo::desk::oracle_check;
use layerinfo::experiment::{
    calibrate_rows, emit_figures, emit_figures_from_dump, read_report, read_scores, run_experiment, DatasetConfig,
    Dump, EvalReport, FigureKind, RunConfig, REPORT_JSON, SCORES_CSV, SINGLE_PASS,
};
use layerinfo::model::LayerSelection;

#[derive(Parser)]
#[command(name = "layerinfo", version, about = "Layer-wise usable information experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a dataset and write report.json plus per-example dumps.
    Run(RunArgs),
    /// Draw figures (SVG + CSV) from a finished run directory.
    Report {
        run_dir: PathBuf,
        /// Comma-separated subset of distribution,per_layer,cumulative,bar_auroc.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<FigureKind>,
        /// Defaults to RUN_DIR/figures.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a logistic calibrator on one score dump and report ECE on another.
    Calibrate {
        /// scores.csv or a run directory containing it.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value = "li")]
        method: Method,
        /// Needed when the dump holds more than one template.
        #[arg(long)]
        template: Option<String>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Compare the scoring path against brute-force recomputation on random toy models.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run config; flags below override its fields.
    config: Option<PathBuf>,
    /// `tiny-lm`, `toy:<layers>:<vocab>:<width>:<seed>` or a checkpoint directory.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// coqa_like, quac_like, condaqa_like or generic_jsonl.
    #[arg(long)]
    format: Option<DatasetFormat>,
    #[arg(long)]
    limit: Option<usize>,
    /// Repeatable; `none`, `open_ended`, `binary`, `certainty` or `custom:<text>`.
    #[arg(long = "template")]
    templates: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// Rejection fractions, e.g. 0.1,0.2,0.3.
    #[arg(long, value_delimiter = ',')]
    reject: Vec<f64>,
    /// `all` or a comma-separated list of 1-based layers.
    #[arg(long)]
    layers: Option<LayerSelection>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every figure into OUT/figures.
    #[arg(long)]
    figures: bool,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => {
                let (Some(model), Some(dataset)) = (self.model.clone(), self.dataset.clone()) else {
                    bail!("without a config file, --model and --dataset are required");
                };
                let format = self.format.unwrap_or(DatasetFormat::GenericJsonl);
                let history_turns = LoadOptions::default().history_turns;
                let dataset = DatasetConfig { path: dataset, format, limit: None, history_turns };
                RunConfig::new(model, dataset, vec!["none".into()], vec![Method::Li])
            }
        };
        if let Some(model) = self.model {
            config.model = model;
        }
        if let Some(path) = self.dataset {
            config.dataset.path = path;
        }
        if let Some(format) = self.format {
            config.dataset.format = format;
        }
        if self.limit.is_some() {
            config.dataset.limit = self.limit;
        }
        if !self.templates.is_empty() {
            config.templates = self.templates;
        }
        if !self.methods.is_empty() {
            config.methods = self.methods;
        }
        if !self.reject.is_empty() {
            config.reject_fractions = self.reject;
        }
        if let Some(layers) = self.layers {
            config.layers = layers;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = self.out {
            config.out = out;
        }
        Ok(config)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn print_summary(report: &EvalReport) {
    println!(
        "model {}  dataset {}  examples {} ({} answerable)  layers {}",
        report.model_id,
        report.dataset,
        report.num_examples,
        report.num_answerable,
        report.layer_ids.len()
    );
    println!("{:<14} {:<16} {:>5} {:>8} {:>9}  rejection", "template", "method", "n", "auroc", "delta");
    for r in &report.results {
        let rejection: Vec<String> =
            r.rejection.iter().map(|x| format!("{:.0}%={}", x.fraction * 100.0, fmt_opt(x.auroc))).collect();
        println!(
            "{:<14} {:<16} {:>5} {:>8} {:>9}  {}",
            r.template_id,
            r.method.as_str(),
            r.n,
            fmt_opt(r.auroc),
            fmt_opt(r.delta.as_ref().map(|d| d.delta)),
            rejection.join(" ")
        );
        if let Some(note) = &r.note {
            println!("    note: {note}");
        }
    }
    for o in report.overhead.iter().filter(|o| o.counter.method != SINGLE_PASS) {
        println!(
            "overhead {:<14} {:<16} passes {:>6} tokens {:>9} ratio {}",
            o.template_id,
            o.counter.method,
            o.counter.forward_passes,
            o.counter.tokens_processed,
            fmt_opt(o.ratio)
        );
    }
    if !report.skipped.is_empty() {
        println!("skipped {} example/method pairs", report.skipped.len());
    }
}

fn scores_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SCORES_CSV)
    } else {
        p.to_path_buf()
    }
}

fn run(args: RunArgs) -> Result<()> {
    let figures = args.figures;
    let config = args.into_config()?;
    let started = Instant::now();
    let report = run_experiment(&config)?;
    info!("run finished in {:.1}s", started.elapsed().as_secs_f64());
    print_summary(&report);
    if figures {
        let files = emit_figures(&report, &FigureKind::ALL, &config.out.join("figures"))?;
        println!("wrote {} figure files", files.len());
    }
    println!("report: {}", config.out.join(REPORT_JSON).display());
    Ok(())
}

fn report(run_dir: &Path, kinds: Vec<FigureKind>, out: Option<PathBuf>) -> Result<()> {
    let kinds = if kinds.is_empty() { FigureKind::ALL.to_vec() } else { kinds };
    let out = out.unwrap_or_else(|| run_dir.join("figures"));
    let files = if run_dir.join(REPORT_JSON).is_file() {
        let report = read_report(run_dir)?;
        print_summary(&report);
        emit_figures(&report, &kinds, &out)?
    } else {
        let dump = Dump::read(run_dir).with_context(|| format!("no report or dump in {}", run_dir.display()))?;
        emit_figures_from_dump(&dump, &kinds, &out)?
    };
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn calibrate(train: &Path, eval: &Path, method: Method, template: Option<String>, bins: usize) -> Result<()> {
    let train = read_scores(&scores_path(train))?;
    let eval = read_scores(&scores_path(eval))?;
    let template = match template {
        Some(t) => t,
        None => {
            let mut ids: Vec<&str> = train.iter().map(|r| r.template_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            match ids.as_slice() {
                [one] => one.to_string(),
                [] => bail!("training dump is empty"),
                _ => bail!("training dump holds templates {ids:?}; pick one with --template"),
            }
        }
    };
    let (calibrator, ece) = calibrate_rows(&train, &eval, &template, method, bins)?;
    println!("template {template}  method {method}");
    println!(
        "calibrator weight {:.6} bias {:.6} trained on {}",
        calibrator.weight, calibrator.bias, calibrator.trained_on
    );
    println!("ece {ece:.6} ({bins} bins)");
    Ok(())
}

fn oracle(pairs: usize, seed: u64, tolerance: f64) -> Result<bool> {
    let started = Instant::now();
    let check = oracle_check(pairs, seed)?;
    let secs = started.elapsed().as_secs_f64();
    println!("pairs {}  max |diff| {:.3e} bits/token  ({:.2}s)", check.pairs, check.max_abs_diff, secs);
    if let Some(worst) = &check.worst_case {
        println!("worst case: {worst}");
    }
    println!("null identity: {}", if check.null_identity { "ok" } else { "VIOLATED" });
    println!("definitional sums: {}", if check.sums_exact { "ok" } else { "VIOLATED" });
    let ok = check.passed(tolerance);
    println!("{} (tolerance {tolerance:e})", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::Report { run_dir, kinds, out } => report(&run_dir, kinds, out).map(|_| true),
        Command::Calibrate { train, eval, method, template, bins } => {
            calibrate(&train, &eval, method, template, bins).map(|_| true)
        }
        Command::OracleCheck { pairs, seed, tolerance } => oracle(pairs, seed, tolerance),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
