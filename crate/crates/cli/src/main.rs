use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vortex_core::augment::{TransformKind, TransformSpec};
use vortex_core::experiment::{self, ExperimentConfig, Preview};
use vortex_core::Error;

#[derive(Debug, Parser)]
#[command(name = "vortex", version, about = "Consistency-trained MRI reconstruction experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Validate and print the resolved configuration without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the phantom dataset.
    GenerateData,
    /// Train a model on an existing dataset.
    Train {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test scans under every configured perturbation.
    Evaluate {
        /// Checkpoint to evaluate; the run's best checkpoint by default.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write clean, augmented and difference images for one slice.
    AugmentPreview {
        #[arg(long, default_value_t = 0)]
        scan: u64,
        #[arg(long, default_value_t = 0)]
        slice: usize,
        /// `none`, a transform kind (e.g. `motion`) or a JSON transform spec. Repeatable.
        #[arg(long = "transform", value_name = "SPEC", default_value = "none")]
        transforms: Vec<String>,
        /// Curriculum time (epoch) at which difficulties are drawn.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
    },
    /// Combine evaluation results of several runs into one table.
    Report {
        /// Run directories; the configured output directory when omitted.
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 invalid input, 3 dataset problem, 4 checkpoint problem, 5 numerical failure, 1 other.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidArgument(_)) | Some(Error::Json(_)) => 2,
        Some(Error::CorruptDataset(_)) => 3,
        Some(Error::CorruptCheckpoint(_)) => 4,
        Some(Error::NonFinite(_)) => 5,
        Some(Error::Io(_)) | None => 1,
    }
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(Error::from)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Command::Train { .. } = cli.command {
        warn_ignored(&cfg);
    }
    if cli.global.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let workers = experiment::init_workers()?;
    log::info!("using {workers} worker thread(s)");

    match cli.command {
        Command::GenerateData => {
            let manifest = experiment::generate_data(&cfg)?;
            println!(
                "wrote {} scans to {}",
                manifest.scans.len(),
                cfg.dataset_dir().display()
            );
        }
        Command::Train { resume } => {
            experiment::write_run_metadata(&cfg, &version())?;
            let outcome = experiment::run_train(&cfg, resume)?;
            println!(
                "trained {} epochs; best validation epoch {} (checkpoints in {})",
                outcome.log.len(),
                outcome.best_epoch,
                cfg.train_dir().display()
            );
        }
        Command::Evaluate { checkpoint } => {
            let results = experiment::run_evaluate(&cfg, checkpoint.as_deref())?;
            print!("{}", vortex_core::evaluate::render_table(std::slice::from_ref(&results)));
            println!("results written to {}", cfg.eval_dir().display());
        }
        Command::AugmentPreview {
            scan,
            slice,
            transforms,
            t,
        } => {
            let specs = parse_transforms(&transforms)?;
            let preview = experiment::augment_preview(&cfg, scan, slice, &specs, t)?;
            let dir = cfg.output_dir.join("preview");
            write_preview(&preview, &dir)?;
            println!("preview images written to {}", dir.display());
        }
        Command::Report { runs } => {
            let runs = if runs.is_empty() { vec![cfg.output_dir.clone()] } else { runs };
            let (_, table) = experiment::report(&runs)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn warn_ignored(cfg: &ExperimentConfig) {
    for key in cfg.train.ignored_settings() {
        log::warn!("train.{key} is ignored in {:?} mode", cfg.train.mode);
    }
}

fn version() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match git {
        Some(g) => format!("{} ({g})", experiment::version_string()),
        None => experiment::version_string(),
    }
}

fn parse_transforms(args: &[String]) -> anyhow::Result<Vec<TransformSpec>> {
    if args.len() > 1 && args.iter().any(|a| a.trim().eq_ignore_ascii_case("none")) {
        bail!(Error::InvalidArgument("`none` cannot be combined with other transforms".into()));
    }
    let mut specs = Vec::new();
    for arg in args {
        let arg = arg.trim();
        if arg.eq_ignore_ascii_case("none") {
            continue;
        }
        let spec = if arg.starts_with('{') {
            serde_json::from_str::<TransformSpec>(arg).map_err(Error::from)?
        } else {
            let kind: TransformKind = serde_json::from_value(serde_json::Value::String(arg.to_string()))
                .map_err(|_| Error::InvalidArgument(format!("unknown transform {arg:?}")))?;
            TransformSpec::new(kind)
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

/// Maps magnitudes to 8 bits over the window `[0, hi]`.
fn quantize(values: &[f64], hi: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v / hi).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn write_preview(p: &Preview, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, values) in [
        ("clean", &p.clean),
        ("augmented", &p.augmented),
        ("difference", &p.difference),
    ] {
        let pixels = quantize(values, p.window);
        let mut pgm = format!("P5\n{} {}\n255\n", p.width, p.height).into_bytes();
        pgm.extend_from_slice(&pixels);
        std::fs::write(dir.join(format!("{name}.pgm")), pgm)?;
        image::GrayImage::from_raw(p.width as u32, p.height as u32, pixels)
            .context("image buffer size")?
            .save(dir.join(format!("{name}.png")))?;
    }
    Ok(())
}
