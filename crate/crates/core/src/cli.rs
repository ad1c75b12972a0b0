//! Command-line front end: train, fuse, eval, ablate and attn-maps.
//!
//! Failures print one line to stderr, `error: code=<n> kind=<kind> message=<json string>`,
//! and exit with 2 (usage), 3 (io), 4 (validation) or 5 (non-finite loss).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::export_attention_maps;
use crate::checkpoint::Checkpoint;
use crate::conv::Precision;
use crate::data::{self, ColorPolicy, DatasetSpec, DEFAULT_PATCH, DEFAULT_STRIDE};
use crate::error::FusionError;
use crate::metrics::{evaluate, format_table, MetricValues};
use crate::network::Ablation;
use crate::training::{fuse, train_with, TrainConfig};
use crate::types::{FusedImage, LossWeights, NetworkConfig, TaskKind};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "crossfuse", version, about = "Cross attention guided image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a paired dataset.
    Train(TrainArgs),
    /// Fuse one pair with a trained checkpoint.
    Fuse(FuseArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
    /// Train every ablation variant with one budget and compare them.
    Ablate(AblateArgs),
    /// Export the per-block attention maps of one pair.
    AttnMaps(FuseArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root holding `a/` and `b/`.
    #[arg(long)]
    data: PathBuf,
    /// Pair manifest (`pathA,pathB` per line) used instead of `a/` and `b/`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    /// Reduce color sources to luminance at load time.
    #[arg(long)]
    gray: bool,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Arithmetic of convolution products: f32 (default) or f64.
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pair: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gray: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset root with `a/` and `b/`.
    #[arg(long)]
    pairs: PathBuf,
    /// Directory of fused images named after the `a/` files.
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "fused")]
    method: String,
    #[arg(long, default_value_t = TaskKind::InfraredVisible)]
    task: TaskKind,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Held-out pairs used for scoring; defaults to the training pairs.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints, report CSVs and the table.
    #[arg(long)]
    out: PathBuf,
}

/// Settings accepted in a `--config` TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<TaskKind>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub patch: Option<usize>,
    pub stride: Option<usize>,
    pub precision: Option<Precision>,
    pub weights: Option<LossWeights>,
    pub network: Option<NetworkConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| FusionError::InvalidConfig(format!("{}: {}", path.display(), e.message())))
    }
}

/// Training settings after applying flags over file values over defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub train: TrainConfig,
    pub patch: usize,
    pub stride: usize,
}

fn resolve(data: &DataArgs, flags: &TrainFlags, ablation: Option<Ablation>) -> Result<Resolved, FusionError> {
    let file = match &flags.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let task = data
        .task
        .or(file.task)
        .ok_or_else(|| FusionError::InvalidConfig("--task is required (flag or config file)".into()))?;
    let mut train = TrainConfig::new(task);
    if let Some(w) = file.weights {
        train.weights = w;
    }
    if let Some(n) = file.network {
        train.network = n;
    }
    train.batch_size = flags.batch.or(file.batch_size).unwrap_or(train.batch_size);
    train.learning_rate = flags.lr.or(file.learning_rate).unwrap_or(train.learning_rate);
    train.epochs = flags.epochs.or(file.epochs).unwrap_or(train.epochs);
    train.seed = flags.seed.or(file.seed).unwrap_or(train.seed);
    train.ablation = ablation.or(file.ablation).unwrap_or(train.ablation);
    train.precision = flags.precision.or(file.precision).unwrap_or(train.precision);
    let resolved = Resolved {
        patch: flags.patch.or(file.patch).unwrap_or(DEFAULT_PATCH),
        stride: flags.stride.or(file.stride).unwrap_or(DEFAULT_STRIDE),
        train,
    };
    resolved.train.validate()?;
    Ok(resolved)
}

fn echo_config(r: &Resolved) {
    if let Ok(json) = serde_json::to_string(r) {
        eprintln!("config: {json}");
    }
}

fn dataset(data: &DataArgs, root: &Path, task: TaskKind) -> DatasetSpec {
    let mut spec = DatasetSpec::new(root, task);
    if let Some(m) = &data.manifest {
        spec = spec.with_manifest(m);
    }
    if data.gray {
        spec = spec.with_color_policy(ColorPolicy::GrayReplicate);
    }
    spec
}

fn policy(gray: bool) -> ColorPolicy {
    if gray {
        ColorPolicy::GrayReplicate
    } else {
        ColorPolicy::LuminanceFuse
    }
}

fn exit_code(e: &FusionError) -> i32 {
    match e {
        FusionError::Io(_) | FusionError::Decode { .. } => EXIT_IO,
        FusionError::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        _ => EXIT_VALIDATION,
    }
}

fn kind(e: &FusionError) -> &'static str {
    match e {
        FusionError::DimensionMismatch { .. } => "dimension-mismatch",
        FusionError::ValueOutOfRange { .. } => "value-out-of-range",
        FusionError::ChannelMismatch { .. } => "channel-mismatch",
        FusionError::ShapeMismatch(_) => "shape-mismatch",
        FusionError::ShapeTooSmall { .. } => "shape-too-small",
        FusionError::LengthMismatch { .. } => "length-mismatch",
        FusionError::UnpairedFile(_) => "unpaired-file",
        FusionError::Decode { .. } => "decode",
        FusionError::PatchTooLarge { .. } => "patch-too-large",
        FusionError::EmptyDataset => "empty-dataset",
        FusionError::NonFiniteLoss { .. } => "non-finite-loss",
        FusionError::InvalidConfig(_) => "invalid-config",
        FusionError::Checkpoint(_) => "checkpoint",
        FusionError::Io(_) => "io",
    }
}

fn report_error(code: i32, kind: &str, message: &str) -> i32 {
    let message = serde_json::to_string(message.trim()).unwrap_or_else(|_| "\"\"".into());
    eprintln!("error: code={code} kind={kind} message={message}");
    code
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            let first = first.strip_prefix("error: ").unwrap_or(&first).to_string();
            return report_error(EXIT_USAGE, "usage", &first);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => report_error(exit_code(&e), kind(&e), &e.to_string()),
    }
}

fn dispatch(command: Command) -> Result<(), FusionError> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::AttnMaps(args) => cmd_attn_maps(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), FusionError> {
    let resolved = resolve(&args.data, &args.flags, args.ablation)?;
    echo_config(&resolved);
    let pairs = data::load_pairs(&dataset(&args.data, &args.data.data, resolved.train.task))?;
    let patches = data::expand_patches(&pairs, resolved.patch, resolved.stride)?;
    let ckpt = train_with(&resolved.train, &patches, |step, loss| {
        if step % 50 == 0 {
            eprintln!("step {step} loss {:.6}", loss.total);
        }
    })?;
    ckpt.save(&args.out)?;
    let last = ckpt.history.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} patches; final loss {last:.6}; wrote {}",
        ckpt.history.len(),
        patches.len(),
        args.out.display()
    );
    Ok(())
}

fn load_pair_args(args: &FuseArgs, task: TaskKind) -> Result<crate::types::ImagePair, FusionError> {
    data::load_pair(&args.pair[0], &args.pair[1], task, policy(args.gray))
}

fn cmd_fuse(args: FuseArgs) -> Result<(), FusionError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let pair = load_pair_args(&args, ckpt.config.task)?;
    let fused = fuse(&ckpt, &pair)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    data::export_fused(&fused, &pair, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_attn_maps(args: FuseArgs) -> Result<(), FusionError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let pair = load_pair_args(&args, ckpt.config.task)?;
    let maps = ckpt.network.attention_maps(&pair)?;
    let written = export_attention_maps(&maps, &args.out)?;
    println!("wrote {} attention maps to {}", written.len(), args.out.display());
    Ok(())
}

/// Finds `<dir>/<stem>.<ext>` for any supported extension.
fn find_by_stem(dir: &Path, stem: &str) -> Result<PathBuf, FusionError> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.file_stem().is_some_and(|s| s == stem) {
            return Ok(path);
        }
    }
    Err(FusionError::UnpairedFile(format!("no fused image for `{stem}` in {}", dir.display())))
}

fn cmd_eval(args: EvalArgs) -> Result<(), FusionError> {
    let pairs = data::load_pairs(&DatasetSpec::new(&args.pairs, args.task))?;
    let fused = pairs
        .iter()
        .map(|p| {
            let img = data::load_image(&find_by_stem(&args.fused, p.a().id())?, ColorPolicy::LuminanceFuse)?;
            Ok(FusedImage::from_plane(&img.gray_plane()))
        })
        .collect::<Result<Vec<_>, FusionError>>()?;
    let dataset = args.pairs.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = evaluate(&pairs, &fused)?.with_labels(dataset, &args.method);
    report.write_csv(&args.report)?;
    print!("{}", format_table(&[(args.method.clone(), report.aggregate)]));
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), FusionError> {
    let resolved = resolve(&args.data, &args.flags, None)?;
    echo_config(&resolved);
    let task = resolved.train.task;
    let train_pairs = data::load_pairs(&dataset(&args.data, &args.data.data, task))?;
    let val_pairs = match &args.val {
        Some(v) => data::load_pairs(&dataset(&args.data, v, task))?,
        None => train_pairs.clone(),
    };
    let patches = data::expand_patches(&train_pairs, resolved.patch, resolved.stride)?;
    fs::create_dir_all(&args.out)?;
    let mut rows: Vec<(String, MetricValues)> = Vec::new();
    for ablation in Ablation::ALL {
        let cfg = TrainConfig {
            ablation,
            ..resolved.train.clone()
        };
        let ckpt = train_with(&cfg, &patches, |_, _| {})?;
        ckpt.save(&args.out.join(format!("{ablation}.ckpt")))?;
        let fused = val_pairs.iter().map(|p| fuse(&ckpt, p)).collect::<Result<Vec<_>, _>>()?;
        let report = evaluate(&val_pairs, &fused)?.with_labels(task.as_str(), ablation.label());
        report.write_csv(&args.out.join(format!("{ablation}.csv")))?;
        rows.push((ablation.label().to_string(), report.aggregate));
    }
    let table = format_table(&rows);
    fs::write(args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
