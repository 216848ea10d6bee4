//! `keymask` command line: argument parsing, config resolution and dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use candle_core::DType;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use keymask_core::{make_synthetic_dataset, Frame, MaskVariant, Split, TransferMode, VideoDataset};
use keymask_model::checkpoint::Checkpoint;
use keymask_model::{
    animate, evaluate_reconstruction, export_masks, fit_state, load_detector, AnimationJob, MotionModel, RunConfig,
    ToolOutputs, TrainState,
};
use log::info;

/// Default config file when `--config` is not given.
pub const CONFIG_ENV: &str = "KEYMASK_CONFIG";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "keymask", version, about = "Image animation driven by keypoint masks")]
pub struct Cli {
    /// Seed for weight initialisation, pair sampling and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus loss.csv.
    Train(TrainArgs),
    /// Animate a source image with a driving video.
    Animate(AnimateArgs),
    /// Reconstruct each video from its first frame and report AKD, AED and L1.
    Evaluate(EvaluateArgs),
    /// Write a synthetic moving-blob dataset and a matching toy config.
    MakeSynthetic(SyntheticArgs),
    /// Render the raw, softmax and Gaussian heatmaps of one frame as PNGs.
    ExportMasks(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Start from the toy preset instead of the full-size defaults.
    #[arg(long)]
    pub toy: bool,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint; its architecture wins over the config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// Frame directory or a single image.
    #[arg(long)]
    pub driving: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "absolute")]
    pub mode: String,
    #[arg(long, default_value = "heatmap")]
    pub mask: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub contact_sheet: bool,
    #[arg(long)]
    pub fps: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root with `train/` and `test/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Pose tool outputs, `<dir>/{generated,truth}/<video>.csv`.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Embedding tool outputs, same layout as `--poses`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Also write the reconstructions here for the external tools.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub videos: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    /// Fraction of videos placed in `test/`.
    #[arg(long, default_value_t = 0.0)]
    pub eval_ratio: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub frame: PathBuf,
    /// Detector file or full checkpoint.
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

type Result<T> = keymask_model::Result<T>;

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            if code != 0 {
                let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
                eprintln!("ERROR UsageError: {first}");
            }
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.category(), e.to_string().replace('\n', " "));
            EXIT_FAILURE
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Animate(a) => animate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::MakeSynthetic(a) => make_synthetic(a, cli.seed.unwrap_or(0)),
        Command::ExportMasks(a) => export(a),
    }
}

/// Preset, then config file, then flags.
pub fn resolve_config(args: &TrainArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = if args.toy { RunConfig::toy() } else { RunConfig::default() };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => keymask_core::Error::NotFound(path.clone()).into(),
            _ => keymask_model::Error::Io(e),
        })?;
        cfg.apply_text(&text)?;
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| {
            keymask_model::Error::InvalidConfig(format!("override `{o}` is not KEY=VALUE"))
        })?;
        cfg.apply(k.trim(), v.trim())?;
    }
    if let Some(d) = &args.data {
        cfg.data_root = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(args, seed)?;
    cfg.validate()?;
    info!("effective config:\n{}", cfg.to_text().trim_end());
    let mut state = match &args.resume {
        Some(path) => TrainState::resume(&Checkpoint::load(path)?, Some(&cfg), DType::F32)?,
        None => TrainState::new(&cfg, DType::F32)?,
    };
    let side = state.model.side();
    let root = cfg
        .data_root
        .as_deref()
        .ok_or_else(|| keymask_model::Error::InvalidConfig("data_root is not set (use --data or the config)".into()))?;
    let data = VideoDataset::open(root, Split::Train, Some(side))?;
    let outcome = fit_state(&mut state, &data, &cfg.out_dir)?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        info!("loss {first:.4} -> {last:.4} over {} steps", outcome.losses.len());
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn animate_cmd(args: &AnimateArgs) -> Result<()> {
    let job = AnimationJob {
        source_path: args.source.clone(),
        driving_path: args.driving.clone(),
        checkpoint_path: args.ckpt.clone(),
        mode: args.mode.parse::<TransferMode>()?,
        mask_variant: args.mask.parse::<MaskVariant>()?,
        output_dir: args.out.clone(),
        fps: args.fps,
        contact_sheet: args.contact_sheet,
    };
    let frames = animate(&job)?;
    info!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let (model, _) = MotionModel::load(&args.ckpt, DType::F32)?;
    let split = args.split.parse::<Split>()?;
    let data = VideoDataset::open(&args.data, split, Some(model.side()))?;
    let tools = ToolOutputs { poses: args.poses.clone(), embeddings: args.embeddings.clone() };
    let report = evaluate_reconstruction(&model, &data, &tools, args.generated.as_deref())?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write_csv(fs::File::create(&args.out)?)?;
    print!("{}", report.table("keypoint mask"));
    Ok(())
}

/// Config written next to a synthetic dataset so `train --config` works directly.
pub const SYNTHETIC_CONFIG: &str = "toy.cfg";

fn make_synthetic(args: &SyntheticArgs, seed: u64) -> Result<()> {
    let synth = make_synthetic_dataset(args.videos, args.frames, args.side, seed)?;
    synth.write(&args.out, args.eval_ratio)?;
    let mut cfg = RunConfig::toy();
    cfg.apply("input_side", &args.side.to_string())?;
    let root = fs::canonicalize(&args.out)?;
    cfg.out_dir = root.join("run");
    cfg.data_root = Some(root);
    cfg.train.seed = seed;
    fs::write(args.out.join(SYNTHETIC_CONFIG), cfg.to_text())?;
    info!("wrote {} videos of {} frames to {}", args.videos, args.frames, args.out.display());
    Ok(())
}

fn export(args: &ExportArgs) -> Result<()> {
    let detector = load_detector(&args.detector)?;
    let frame = Frame::read_png(&args.frame)?;
    let written = export_masks(&frame, &detector, &args.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
