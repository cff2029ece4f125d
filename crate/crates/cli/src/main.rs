use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use selrcn::checkpoint::Checkpoint;
use selrcn::gradcheck::{model_grad_check, GradCheckOptions};
use selrcn::model::Preset;
use selrcn::pipeline::manifest::{load_dataset, write_dataset};
use selrcn::pipeline::synth::{synth_generate, SynthConfig};
use selrcn::pipeline::VideoSample;
use selrcn::se::{ReweightMode, SqueezeAxis};
use selrcn::train::{
    ablation_csv, ablation_grid, continue_training, evaluate, video_features, AblationAxis, TrainConfig, Trainer,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "selrcn", version, about = "Train and evaluate SE-LRCN action recognition models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-class accuracy.
    Eval(EvalArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference check of a whole model's gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset with a manifest.
    SynthGen(SynthArgs),
    /// Dump per-frame CNN features of one video as CSV.
    Features(FeaturesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    #[value(alias = "true")]
    On,
    #[value(alias = "false")]
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Full,
    Tiny,
}

/// `frame` yields one gate per frame, `channel` one per feature channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Frame,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReweightArg {
    Residual,
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AxisName {
    Se,
    Layers,
    Hidden,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    preset: PresetArg,
    /// SE blocks in the CNN; a bare flag means on.
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "on")]
    se_spatial: Option<Switch>,
    /// SE recalibration of the feature sequence; a bare flag means on.
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "on")]
    se_temporal: Option<Switch>,
    #[arg(long, value_enum)]
    squeeze_axis: Option<AxisArg>,
    #[arg(long, value_enum)]
    reweight: Option<ReweightArg>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        let preset = match self.preset {
            PresetArg::Full => Preset::Full,
            PresetArg::Tiny => Preset::Tiny,
        };
        let mut cfg = TrainConfig { seed: self.seed, ..TrainConfig::for_preset(preset) };
        if let Some(s) = self.se_spatial {
            cfg.se_spatial = s == Switch::On;
        }
        if let Some(s) = self.se_temporal {
            cfg.se_temporal = s == Switch::On;
        }
        if let Some(a) = self.squeeze_axis {
            cfg.squeeze_axis = match a {
                AxisArg::Frame => SqueezeAxis::Channel,
                AxisArg::Channel => SqueezeAxis::Time,
            };
        }
        if let Some(r) = self.reweight {
            cfg.reweight_mode = match r {
                ReweightArg::Residual => ReweightMode::Residual,
                ReweightArg::Scale => ReweightMode::ScaleOnly,
            };
        }
        cfg.lstm_layers = self.layers.unwrap_or(cfg.lstm_layers);
        cfg.hidden_units = self.hidden.unwrap_or(cfg.hidden_units);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.learning_rate = self.lr.unwrap_or(cfg.learning_rate);
        cfg.batch_size = self.batch.unwrap_or(cfg.batch_size);
        cfg
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out videos evaluated after every epoch.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
    /// Metrics CSV path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to save the final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint up to `--epochs`; its settings win over
    /// the model flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-class accuracy CSV path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    axes: Vec<AxisName>,
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluation videos; the training videos when absent.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    layer_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    hidden_grid: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 4)]
    coords: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives `manifest.csv` and one directory per video.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 400)]
    samples: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Standard deviation of the pixel noise.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 18)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Zero-based position of the video in the manifest.
    #[arg(long, default_value_t = 0)]
    video: usize,
    /// Model to use; a fresh initialization from the model flags when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<selrcn::Error> for Failure {
    fn from(e: selrcn::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult<ExitCode> {
    match command {
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::SynthGen(a) => synth(a)?,
        Command::Features(a) => features(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn validated(cfg: TrainConfig) -> CliResult<TrainConfig> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn class_count(explicit: Option<usize>, videos: &[VideoSample]) -> usize {
    explicit.unwrap_or_else(|| videos.iter().map(|v| v.label + 1).max().unwrap_or(0).max(2))
}

fn train(a: TrainArgs) -> CliResult {
    let videos = load_dataset(&a.manifest)?;
    let held = a.eval_manifest.as_deref().map(load_dataset).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
            if let Some(e) = a.model.epochs {
                t.cfg.epochs = e;
            }
            t
        }
        None => {
            let cfg = validated(a.model.config())?;
            Trainer::new(cfg, class_count(a.classes, &videos))?
        }
    };
    let until = trainer.cfg.epochs;
    let metrics = continue_training(&mut trainer, until, &videos, held.as_deref(), |m| {
        let eval = m.eval_acc.map(|x| format!(" eval_acc {x:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {} lr {:.3e} train_loss {:.4} train_acc {:.4}{eval}",
            m.epoch + 1,
            m.learning_rate,
            m.train_loss,
            m.train_acc
        );
    })?;
    if let Some(path) = &a.checkpoint {
        trainer.checkpoint().save(path)?;
    }
    emit(a.out.as_deref(), &metrics.to_csv())
}

fn eval(a: EvalArgs) -> CliResult {
    let trainer = Trainer::<f32>::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let videos = load_dataset(&a.manifest)?;
    let report = evaluate(&trainer.model, &trainer.cfg, &videos)?;
    let mut csv = String::from("class,videos,accuracy\n");
    for (k, (acc, n)) in report.per_class.iter().zip(&report.class_counts).enumerate() {
        let acc = if acc.is_nan() { String::new() } else { acc.to_string() };
        csv.push_str(&format!("{k},{n},{acc}\n"));
    }
    eprintln!("accuracy {:.4} over {} videos", report.accuracy, videos.len());
    emit(a.out.as_deref(), &csv)
}

fn ablate(a: AblateArgs) -> CliResult {
    let base = validated(a.model.config())?;
    let videos = load_dataset(&a.manifest)?;
    let held = a.eval_manifest.as_deref().map(load_dataset).transpose()?;
    let eval_set = held.as_deref().unwrap_or(&videos);
    let axes: Vec<AblationAxis> = a
        .axes
        .iter()
        .map(|axis| match axis {
            AxisName::Se => AblationAxis::Se,
            AxisName::Layers => AblationAxis::Layers(a.layer_grid.clone()),
            AxisName::Hidden => AblationAxis::Hidden(a.hidden_grid.clone()),
        })
        .collect();
    let classes = class_count(a.classes, &videos);
    let rows = ablation_grid::<f32>(&base, &axes, classes, &videos, eval_set, |r| {
        eprintln!(
            "se_spatial {} se_temporal {} layers {} hidden {} eval_acc {:.4}",
            r.se_spatial, r.se_temporal, r.layers, r.hidden, r.eval_acc
        );
    })?;
    emit(a.out.as_deref(), &ablation_csv(&rows))
}

fn gradcheck(a: GradcheckArgs) -> CliResult<ExitCode> {
    let cfg = validated(a.model.config())?;
    if !(a.delta > 0.0) || a.coords == 0 {
        return Err(Failure::Usage("--delta and --coords must be positive".into()));
    }
    let opts = GradCheckOptions { delta: a.delta, max_coords_per_tensor: Some(a.coords), seed: cfg.seed };
    let report = model_grad_check(&cfg, &opts)?;
    let worst = report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
    println!("max relative error {:.3e}", report.max_rel_error);
    eprintln!("{} coordinates checked, worst at {worst}", report.checked);
    Ok(if report.max_rel_error < GRADCHECK_TOLERANCE { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig { size: a.size, ..SynthConfig::new(a.classes, a.samples, a.frames, a.noise, a.seed) };
    let data = synth_generate(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = write_dataset(&a.out, &data.videos)?;
    eprintln!("wrote {} videos, manifest {}", data.videos.len(), manifest.display());
    Ok(())
}

fn features(a: FeaturesArgs) -> CliResult {
    let videos = load_dataset(&a.manifest)?;
    let video = videos.get(a.video).ok_or_else(|| {
        Failure::Usage(format!("--video {} is out of range for {} videos", a.video, videos.len()))
    })?;
    let trainer = match &a.checkpoint {
        Some(path) => Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?,
        None => Trainer::new(validated(a.model.config())?, class_count(a.classes, &videos))?,
    };
    let feats = video_features(&trainer.model, &trainer.cfg, video)?;
    let c = feats.channels();
    let mut csv = String::new();
    for row in feats.values().data().chunks(c) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    emit(a.out.as_deref(), &csv)
}
