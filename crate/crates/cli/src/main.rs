use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dptv_core::fringe::ClassifierThresholds;
use dptv_core::labels::{read_detections, write_detections};
use dptv_core::metrics::{read_report, MetricsReport};
use dptv_core::pipeline::{self, classify_detections, parse_stages, PipelineConfig, Stage};
use dptv_core::{Error, Raster};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Synthetic two-phase DPTV pipeline: simulate, extract, compose, classify, evaluate.
#[derive(Debug, Parser)]
#[command(name = "dptv-lab", version)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated stages for `run` (default: every configured stage).
    #[arg(long, global = true)]
    stages: Option<String>,
    /// Output root (default: config `out`, else ./dptv-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run several stages in order.
    Run,
    Simulate,
    Extract,
    Compose,
    Classify,
    Evaluate,
    /// Print a metrics report (from a file, or the configured evaluate stage).
    Report { metrics: Option<PathBuf> },
    /// Classify the detections of a detections JSON in place.
    ClassifyDir {
        #[arg(long)]
        detections: PathBuf,
        /// Directory holding `<name>.png` for every image in the file.
        #[arg(long)]
        images: PathBuf,
        /// Thresholds JSON (default thresholds when omitted).
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf), Error> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("dptv-out"));
    Ok((config, out))
}

fn print_report(r: &MetricsReport) {
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("images            {}", r.images);
    println!("ground truth PIs  {}", r.ground_truth);
    println!("AP                {:.4}", r.ap);
    println!("max recall        {:.4}", r.max_recall);
    println!("norm TAP          {:.4}", r.norm_tap);
    println!("max-F1 threshold  {:.3} (F1 {:.4})", r.f1_max_threshold, r.f1_max);
    println!(
        "detections        TP {} FP {} FN {}",
        r.detection.tp, r.detection.fp, r.detection.fn_
    );
    println!("class accuracy    {}", opt(r.class_accuracy));
    println!("FP class bias     {}", opt(r.fp_class_bias));
}

fn report(cli: &Cli, metrics: Option<&Path>) -> Result<(), Error> {
    let path = match metrics {
        Some(p) if p.is_dir() => p.join("metrics.json"),
        Some(p) => p.to_path_buf(),
        None => {
            let (config, out) = load_config(cli)?;
            config.stage_dir(&out, Stage::Evaluate)?.join("metrics.json")
        }
    };
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            stage: "report".into(),
            path,
        });
    }
    print_report(&read_report(&path)?);
    Ok(())
}

fn classify_dir(detections: &Path, images: &Path, thresholds: Option<&Path>) -> Result<(), Error> {
    let t = match thresholds {
        Some(p) => ClassifierThresholds::load(p)?,
        None => ClassifierThresholds::default(),
    };
    let mut all = read_detections(detections)?;
    for entry in &mut all {
        let img = Raster::load(&images.join(format!("{}.png", entry.name)))?;
        classify_detections(&img, &mut entry.detections, &t)?;
    }
    write_detections(detections, &all)?;
    log::info!("classified {} images in {}", all.len(), detections.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let single = match cli.command {
        Command::Simulate => Some(Stage::Simulate),
        Command::Extract => Some(Stage::Extract),
        Command::Compose => Some(Stage::Compose),
        Command::Classify => Some(Stage::Classify),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Report { ref metrics } => return report(cli, metrics.as_deref()),
        Command::ClassifyDir {
            ref detections,
            ref images,
            ref thresholds,
        } => return classify_dir(detections, images, thresholds.as_deref()),
        Command::Run => None,
    };
    let (config, out) = load_config(cli)?;
    let stages = match (single, &cli.stages) {
        (Some(s), _) => vec![s],
        (None, Some(list)) => parse_stages(list)?,
        (None, None) => config.configured(),
    };
    if stages.is_empty() {
        return Err(Error::Config("no stages to run".into()));
    }
    config.validate(&stages)?;
    for o in pipeline::run(&config, &stages, &out)? {
        println!("{}\t{}", o.stage, o.dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DPTV_LAB_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --jobs {n}: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
