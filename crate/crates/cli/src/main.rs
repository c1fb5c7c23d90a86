use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stattn::checkpoint::Checkpoint;
use stattn::config::TrainConfig;
use stattn::eval::evaluate;
use stattn::gradcheck::{check_model, toy_model_config};
use stattn::heatmap::write_heatmaps;
use stattn::localization::{write_spatial_detections, write_temporal_detections};
use stattn::spatial::export_mask;
use stattn::synth::{generate_dataset, load_split, read_video, save_dataset, SynthConfig};
use stattn::temporal::write_weights_csv;
use stattn::train::train;
use stattn::unimodal::{is_log_concave, is_unimodal, logconcave_penalty};
use stattn::Result;

/// Exit status when a check ran but did not pass.
const CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "stattn", version, about = "Spatio-temporal attention for video classification and weak localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic sprite dataset with ground-truth files.
    GenData(GenDataArgs),
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a toy model.
    Gradcheck(GradcheckArgs),
    /// Write mask, overlay and temporal-strip images for one video.
    Heatmap(HeatmapArgs),
    /// Report unimodality and log-concavity of a sequence.
    CheckSequence(CheckSequenceArgs),
}

/// Training configuration: an optional `key = value` file, then per-field flags.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Configuration file with one `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda_tv: Option<String>,
    #[arg(long)]
    lambda_contrast: Option<String>,
    #[arg(long)]
    lambda_unimodal: Option<String>,
    #[arg(long)]
    n_frames: Option<String>,
    #[arg(long)]
    n_classes: Option<String>,
    #[arg(long)]
    frame_height: Option<String>,
    #[arg(long)]
    frame_width: Option<String>,
    #[arg(long)]
    in_channels: Option<String>,
    /// Comma-separated widths of the stride-2 encoder layers.
    #[arg(long)]
    encoder_channels: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    energy_width: Option<String>,
    #[arg(long)]
    mask_width1: Option<String>,
    #[arg(long)]
    mask_width2: Option<String>,
    #[arg(long)]
    mask_bias: Option<String>,
    #[arg(long)]
    mean_aggregate: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        let flags = [
            ("lambda_tv", &self.lambda_tv),
            ("lambda_contrast", &self.lambda_contrast),
            ("lambda_unimodal", &self.lambda_unimodal),
            ("n_frames", &self.n_frames),
            ("n_classes", &self.n_classes),
            ("frame_height", &self.frame_height),
            ("frame_width", &self.frame_width),
            ("in_channels", &self.in_channels),
            ("encoder_channels", &self.encoder_channels),
            ("hidden", &self.hidden),
            ("energy_width", &self.energy_width),
            ("mask_width1", &self.mask_width1),
            ("mask_width2", &self.mask_width2),
            ("mask_bias", &self.mask_bias),
            ("mean_aggregate", &self.mean_aggregate),
            ("learning_rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("grad_clip", &self.grad_clip),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
        ];
        for (key, value) in flags {
            if let Some(value) = value {
                cfg.set(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; receives `train/`, `test/` and ground-truth CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Videos generated per class, both splits together.
    #[arg(long, default_value_t = 70)]
    per_class: usize,
    /// Videos per class held out for the test split.
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    n_frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    sprite_size: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    /// First and last frame of the action window, 1-based.
    #[arg(long, num_args = 2, value_names = ["START", "END"])]
    window: Option<Vec<usize>>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for `metrics.csv` and `model.stck`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Directory for mAP tables and detection files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each video's attention matrix as CSV.
    #[arg(long, requires = "out")]
    dump_weights: bool,
    /// Also write each video's masks as PGM images.
    #[arg(long, requires = "out")]
    dump_masks: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Add a loss term the backward pass cannot see (negative control).
    #[arg(long, hide = true)]
    corrupt: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Video container (`.stav`).
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckSequenceArgs {
    /// Sequence entries.
    #[arg(required = true, allow_negative_numbers = true)]
    values: Vec<f64>,
    /// Slack allowed when checking unimodality.
    #[arg(long, default_value_t = 0.0)]
    tol: f64,
}

fn gen_data(args: &GenDataArgs) -> Result<u8> {
    let mut cfg = SynthConfig::default();
    cfg.n_frames = args.n_frames.unwrap_or(cfg.n_frames);
    cfg.height = args.height.unwrap_or(cfg.height);
    cfg.width = args.width.unwrap_or(cfg.width);
    cfg.n_classes = args.n_classes.unwrap_or(cfg.n_classes);
    cfg.sprite_size = args.sprite_size.unwrap_or(cfg.sprite_size);
    cfg.step = args.step.unwrap_or(cfg.step);
    cfg.noise = args.noise.unwrap_or(cfg.noise);
    if let Some(w) = &args.window {
        cfg.window = (w[0], w[1]);
    }
    let data = generate_dataset(&cfg, args.per_class, args.test_per_class, args.seed)?;
    save_dataset(&args.out, &data)?;
    println!("wrote {} train and {} test videos to {}", data.train.len(), data.test.len(), args.out.display());
    Ok(0)
}

fn run_train(args: &TrainArgs) -> Result<u8> {
    let cfg = args.config.resolve()?;
    let samples = load_split(&args.data.join("train"))?;
    let out = train(&cfg, &samples, &args.out)?;
    if let Some(b) = out.final_loss {
        println!(
            "final step: ce {:.6} tv {:.6} contrast {:.6} unimodal {:.6} total {:.6}",
            b.ce, b.tv, b.contrast, b.unimodal, b.total
        );
    }
    println!("checkpoint {}", out.checkpoint.display());
    println!("metrics {}", out.metrics.display());
    Ok(0)
}

fn run_eval(args: &EvalArgs) -> Result<u8> {
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let split = match args.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let samples = load_split(&args.data.join(split))?;
    let report = evaluate(&model, &samples)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy(), report.correct, report.videos);
    println!("alpha,spatial_map,temporal_map");
    for ((alpha, s), (_, t)) in report.spatial_map.iter().zip(&report.temporal_map) {
        println!("{alpha},{s:.4},{t:.4}");
    }
    if let Some(dir) = &args.out {
        report.write(dir)?;
        write_spatial_detections(&dir.join("spatial_detections.csv"), &report.spatial_detections)?;
        write_temporal_detections(&dir.join("temporal_detections.csv"), &report.temporal_detections)?;
        for (sample, p) in samples.iter().zip(&report.predictions) {
            if args.dump_weights {
                write_weights_csv(&dir.join(format!("{}_weights.csv", sample.id)), &p.attention)?;
            }
            if args.dump_masks {
                dump_masks(dir, &sample.id, &p.masks)?;
            }
        }
    }
    Ok(0)
}

fn dump_masks(dir: &Path, id: &str, masks: &stattn::Tensor) -> Result<()> {
    let s = masks.shape();
    let plane = s[2] * s[3];
    for t in 0..s[0] {
        export_mask(dir, id, t + 1, s[3], s[2], &masks.data()[t * plane..(t + 1) * plane])?;
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let config = args.config.resolve()?;
    let report = check_model(&toy_model_config(), &config.loss_weights(), config.seed, args.corrupt)?;
    println!("group,count,checked,skipped,max_rel_err");
    for g in &report.groups {
        println!("{},{},{},{},{:.3e}", g.name, g.count, g.checked, g.skipped, g.max_rel_err);
    }
    let max = report.max_rel_err();
    let pass = report.passes(args.tolerance);
    println!(
        "max relative error {max:.3e} over {} entries ({} skipped): {}",
        report.checked(),
        report.skipped(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { CHECK_FAILED })
}

fn run_heatmap(args: &HeatmapArgs) -> Result<u8> {
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let video = read_video(&args.video)?;
    let id = args
        .video
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let prediction = model.predict(&video.frames)?;
    let files = write_heatmaps(&args.out, &id, &video.frames, &prediction)?;
    println!("predicted class {} (label {})", prediction.class, video.label);
    println!("wrote {} mask, {} overlay and 1 strip image to {}", files.masks.len(), files.overlays.len(), args.out.display());
    Ok(0)
}

fn check_sequence(args: &CheckSequenceArgs) -> Result<u8> {
    let a = &args.values;
    let log_concave = is_log_concave(a)?;
    println!("unimodal {}", is_unimodal(a, args.tol));
    println!("log_concave {log_concave}");
    println!("penalty {}", logconcave_penalty(a));
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Heatmap(a) => run_heatmap(a),
        Command::CheckSequence(a) => check_sequence(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
