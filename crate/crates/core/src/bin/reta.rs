use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reta::datagen::{generate_benchmark, SyntheticSpec};
use reta::io::{read_dataset, write_dataset, RunConfig};
use reta::pipeline::{run_stream, run_stream_with, RunMetrics};
use reta::report::{comparison_table, open_logs, purity_csv};
use reta::Error;

#[derive(Parser)]
#[command(name = "reta", version, about = "Streaming test-time adaptation over embedding streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen(GenArgs),
    /// Adapt over a dataset, writing the prediction log and metrics.
    Run(RunArgs),
    /// Compare the configured run against its ablations on a dataset.
    Eval(RunArgs),
    /// Summarize one or more prediction logs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, env = "RETA_GEN_CLASSES", default_value_t = 10)]
    classes: usize,
    #[arg(long, env = "RETA_GEN_DIM", default_value_t = 64)]
    dim: usize,
    /// Prompts per class (K).
    #[arg(long, env = "RETA_GEN_PROMPTS", default_value_t = 8)]
    prompts: usize,
    /// Adjacent embeddings the dataset must support (M).
    #[arg(long, env = "RETA_GEN_MEMBERS", default_value_t = 3)]
    members: usize,
    #[arg(long, env = "RETA_GEN_SAMPLES_PER_CLASS", default_value_t = 200)]
    samples_per_class: usize,
    /// Augmented views per sample (N).
    #[arg(long, env = "RETA_GEN_VIEWS", default_value_t = 8)]
    views: usize,
    /// Rotation of image class means, radians.
    #[arg(long, env = "RETA_GEN_SHIFT", default_value_t = 0.6)]
    shift: f64,
    #[arg(long, env = "RETA_GEN_VIEW_JITTER")]
    view_jitter: Option<f64>,
    #[arg(long, env = "RETA_GEN_NOISE_RATE")]
    noise_rate: Option<f64>,
    #[arg(long, env = "RETA_GEN_CLASS_SIMILARITY")]
    class_similarity: Option<f64>,
    #[arg(long, env = "RETA_GEN_PROMPT_NOISE")]
    prompt_noise: Option<f64>,
    #[arg(long, env = "RETA_GEN_SAMPLE_SPREAD")]
    sample_spread: Option<f64>,
    #[arg(long, env = "RETA_GEN_CONFUSION")]
    confusion: Option<f64>,
    #[arg(long, env = "RETA_GEN_FACET_PROMPTS")]
    facet_prompts: Option<usize>,
    #[arg(long, env = "RETA_GEN_FACET_ANGLE")]
    facet_angle: Option<f64>,
    #[arg(long, env = "RETA_GEN_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(short, long, env = "RETA_GEN_OUTPUT")]
    output: PathBuf,
}

impl GenArgs {
    fn spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            classes: self.classes,
            dim: self.dim,
            prompts_per_class: self.prompts,
            members: self.members,
            samples_per_class: self.samples_per_class,
            shift: self.shift,
            view_jitter: self.view_jitter.unwrap_or(d.view_jitter),
            noise_rate: self.noise_rate.unwrap_or(d.noise_rate),
            views: self.views,
            seed: self.seed,
            class_similarity: self.class_similarity.unwrap_or(d.class_similarity),
            prompt_noise: self.prompt_noise.unwrap_or(d.prompt_noise),
            sample_spread: self.sample_spread.unwrap_or(d.sample_spread),
            confusion: self.confusion.unwrap_or(d.confusion),
            facet_prompts: self.facet_prompts.unwrap_or(d.facet_prompts),
            facet_angle: self.facet_angle.unwrap_or(d.facet_angle),
        }
    }
}

/// Config layering: `--config` file, then `RETA_<KEY>` variables, then flags.
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, env = "RETA_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "RETA_DISABLE_CER")]
    disable_cer: bool,
    #[arg(long, env = "RETA_DISABLE_DDC")]
    disable_ddc: bool,
    #[arg(long, env = "RETA_DISABLE_CACHE")]
    disable_cache: bool,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    cache_size: Option<usize>,
    /// Adjacent embeddings per class (M).
    #[arg(long)]
    adjacent: Option<usize>,
    /// Rank of the text-subspace projector (n).
    #[arg(long)]
    svd_rank: Option<usize>,
    /// Extra `key=value` overrides for any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> reta::Result<RunConfig> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("eta", self.eta.map(|v| v.to_string()));
        push("gamma", self.gamma.map(|v| v.to_string()));
        push("cache_size", self.cache_size.map(|v| v.to_string()));
        push("adjacent", self.adjacent.map(|v| v.to_string()));
        push("svd_rank", self.svd_rank.map(|v| v.to_string()));
        push("enable_cer", self.disable_cer.then(|| "false".into()));
        push("enable_ddc", self.disable_ddc.then(|| "false".into()));
        push("enable_cache", self.disable_cache.then(|| "false".into()));
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config {
                    key: item.clone(),
                    message: "expected KEY=VALUE".into(),
                })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        RunConfig::load(self.config.as_deref(), std::env::vars(), &overrides)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset file written by `reta gen` or an exporter.
    dataset: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for machine-readable artifacts.
    #[arg(short, long, env = "RETA_OUTPUT")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Prediction logs (JSONL) to compare.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Write the purity trace CSV here.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Trace sampling interval.
    #[arg(long, default_value_t = 50)]
    every: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::InvalidSpec(_)
        | Error::InvalidGamma(_)
        | Error::InvalidM { .. }
        | Error::InvalidTemperature(_)
        | Error::RankTooLarge { .. }
        | Error::TooFewPrompts { .. } => 2,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::TruncatedPayload { .. }
        | Error::HeaderPayloadMismatch(_)
        | Error::Dataset(_)
        | Error::MalformedLog { .. }
        | Error::DimensionMismatch { .. }
        | Error::InvalidClass { .. }
        | Error::Io(_) => 3,
        Error::NonFinite(_)
        | Error::NonFiniteInput(_)
        | Error::NonFiniteGradient(_)
        | Error::ZeroVector { .. }
        | Error::SvdFailure(_) => 4,
        _ => 1,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}%", 100.0 * x))
}

fn cmd_gen(args: &GenArgs) -> reta::Result<()> {
    let spec = args.spec();
    let bench = generate_benchmark(&spec)?;
    write_dataset(&args.output, &bench.header()?, &bench.prompts, &bench.records)?;
    println!(
        "wrote {}: C={} d={} K={} N={} records={}",
        args.output.display(),
        spec.classes,
        spec.dim,
        spec.prompts_per_class,
        spec.views,
        bench.records.len()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> reta::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn print_metrics(m: &RunMetrics) {
    println!("samples           {}", m.samples);
    println!("top-1 accuracy    {}", pct(m.top1_accuracy));
    println!("zero-shot acc     {}", pct(m.zero_shot_accuracy));
    println!("ECE (20 bins)     {}", pct(m.ece));
    println!("cache purity      {}", pct(m.final_cache_purity));
    println!("updates / merges  {} / {}", m.updates, m.merges);
}

fn cmd_run(args: &RunArgs) -> reta::Result<()> {
    let config = args.config.resolve()?;
    let reader = read_dataset(&args.dataset)?;
    let prompts = reader.prompts().clone();
    let output = match &args.output {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), config.to_toml())?;
            Some(dir)
        }
        None => None,
    };
    let mut log_out = match output {
        Some(dir) => Some(BufWriter::new(File::create(dir.join("predictions.jsonl"))?)),
        None => None,
    };
    let mut write_err = None;
    let run = run_stream_with(&prompts, reader, &config, |record| {
        if let Some(out) = log_out.as_mut() {
            let line = serde_json::to_string(record).expect("log record serializes");
            if let Err(e) = writeln!(out, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(mut out) = log_out {
        out.flush()?;
    }
    if let Some(dir) = output {
        write_json(&dir.join("metrics.json"), &run.metrics)?;
    }
    print_metrics(&run.metrics);
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> reta::Result<()> {
    let config = args.config.resolve()?;
    let variants: Vec<(&str, RunConfig)> = vec![
        ("configured", config.clone()),
        ("no-cer", RunConfig { enable_cer: false, ..config.clone() }),
        ("no-ddc", RunConfig { enable_ddc: false, ..config.clone() }),
        (
            "zero-shot",
            RunConfig {
                enable_cer: false,
                enable_ddc: false,
                enable_cache: false,
                eta: 0.0,
                ..config.clone()
            },
        ),
    ];
    let mut rows = Vec::new();
    println!("{:<12} {:>9} {:>9} {:>9} {:>8}", "variant", "top-1", "ECE", "purity", "updates");
    for (name, cfg) in variants {
        let reader = read_dataset(&args.dataset)?;
        let prompts = reader.prompts().clone();
        let m = run_stream(&prompts, reader, &cfg)?.metrics;
        println!(
            "{:<12} {:>9} {:>9} {:>9} {:>8}",
            name,
            pct(m.top1_accuracy),
            pct(m.ece),
            pct(m.final_cache_purity),
            m.updates
        );
        rows.push(serde_json::json!({
            "variant": name,
            "top1_accuracy": m.top1_accuracy,
            "ece": m.ece,
            "final_cache_purity": m.final_cache_purity,
            "updates": m.updates,
        }));
    }
    if let Some(path) = &args.output {
        write_json(path, &rows)?;
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> reta::Result<()> {
    let logs = open_logs(&args.logs)?;
    print!("{}", comparison_table(&logs)?);
    if let Some(path) = &args.output {
        std::fs::write(path, purity_csv(&logs, args.every))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RETA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
