//! `cellcnn` — one binary tying the pipeline together: corpus synthesis,
//! preprocessing, augmentation, training, fine-tuning, evaluation, and
//! prediction.
//!
//! Every command is deterministic given the same config, seed, and inputs.
//! On failure the process exits nonzero after printing a single
//! `error: <class>: <detail>` line to stderr.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cellcnn_core::dataset::{
    self, load_manifest, synth_generate, AugmentOrder, ChannelMode, DatasetManifest, LabeledImage,
    ManifestRow, SynthOptions, SynthStyle,
};
use cellcnn_core::error::{Error, Result};
use cellcnn_core::imageproc::{self, AugmentationPlan, PreprocessOptions};
use cellcnn_core::inference::{ensemble_predict, Ensemble, PredictionRow};
use cellcnn_core::metrics::{self, ConfusionMatrix};
use cellcnn_core::trainer::{self, Snapshot};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "cellcnn",
    about = "CNN pipeline for stained-cell image classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic six-class corpus (images, masks, manifest).
    Synth(SynthArgs),
    /// Materialize preprocessed images (normalize, optional align, resize).
    Preprocess(PreprocessArgs),
    /// Materialize the rotated variants of every image in a manifest.
    Augment(AugmentArgs),
    /// Train from scratch: split, preprocess, augment, fit, write a run dir.
    Train(TrainArgs),
    /// Continue training from a snapshot on a new corpus.
    Finetune(FinetuneArgs),
    /// Evaluate a snapshot ensemble on a labeled set and write reports.
    Eval(EvalArgs),
    /// Write per-image class probabilities for unlabeled input.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for images/, masks/, and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Square image side.
    #[arg(long, default_value_t = 78)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower bound of the cell orientation range, degrees.
    #[arg(long, default_value_t = 0.0)]
    orientation_min: f64,
    /// Upper bound of the cell orientation range, degrees.
    #[arg(long, default_value_t = 360.0)]
    orientation_max: f64,
    /// Rendering style: standard | shifted.
    #[arg(long, default_value = "standard")]
    style: String,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config (defaults are used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rotate each cell so its mask's principal direction is vertical.
    #[arg(long)]
    align: bool,
    /// Output side length.
    #[arg(long, default_value_t = 78)]
    target: usize,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rotation angle step in degrees (must divide 360).
    #[arg(long)]
    theta: u32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory that will hold the run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the augmentation angle step (360 disables augmentation).
    #[arg(long)]
    theta: Option<u32>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Snapshot file to start from.
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fine-tuning epochs.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta: Option<u32>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Snapshot files forming the ensemble.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    snapshots: Vec<PathBuf>,
    /// A run directory (its snapshots.csv supplies the ensemble).
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test-time rotation angle step; defaults to the config's.
    #[arg(long)]
    theta: Option<u32>,
    /// Which slice of the manifest to evaluate: all|train|validation|test.
    #[arg(long, default_value = "all")]
    split: String,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Directory of PNG images to classify.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Or a manifest whose labels are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    snapshots: Vec<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta: Option<u32>,
    /// Comma-separated class names for the output header.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {}: {e}", e.class());
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Train(args) => cmd_train(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let style = match args.style.as_str() {
        "standard" => SynthStyle::standard(),
        "shifted" => SynthStyle::shifted(),
        other => {
            return Err(Error::Config(format!(
                "unknown style '{other}' (expected standard or shifted)"
            )))
        }
    };
    let opts = SynthOptions {
        classes: args.classes,
        per_class: args.per_class,
        image_size: args.size,
        seed: args.seed,
        orientation_degrees: (args.orientation_min, args.orientation_max),
        style,
    };
    let manifest = synth_generate(&args.out, &opts)?;
    println!(
        "wrote {} samples over {} classes to {}",
        manifest.samples.len(),
        manifest.classes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let manifest = load_manifest(&args.manifest)?;
    let align = args.align || config.align;
    let opts = PreprocessOptions {
        align,
        target: args.target,
    };
    let images_dir = args.out.join("images");
    let masks_dir = args.out.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut rows = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        let labeled = dataset::preprocess_sample(sample, manifest.channel_mode, &opts)?;
        let image_rel = format!("images/{}.png", sample.id);
        imageproc::save_gray_u16(&args.out.join(&image_rel), &labeled.image)?;
        let mask_rel = match &sample.mask_path {
            Some(path) => {
                let mask = imageproc::load_mask(path)?;
                // Keep the mask aligned with the emitted image.
                let mask = if align {
                    let axis = imageproc::principal_axis(&mask)?;
                    if axis.isotropic {
                        mask
                    } else {
                        imageproc::rotate_mask_about_center(&mask, axis.angle_from_vertical_degrees)
                    }
                } else {
                    mask
                };
                let mask = imageproc::resize_mask(&mask, args.target, args.target);
                let rel = format!("masks/{}.png", sample.id);
                imageproc::save_mask(&args.out.join(&rel), &mask)?;
                rel
            }
            None => String::new(),
        };
        rows.push(ManifestRow {
            id: sample.id.clone(),
            image: image_rel,
            mask: mask_rel,
            label: manifest.classes[sample.label].clone(),
        });
    }
    dataset::write_manifest(
        &args.out.join("manifest.csv"),
        &manifest.classes,
        ChannelMode::Grayscale,
        &rows,
    )?;
    println!(
        "preprocessed {} samples to {}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let plan = AugmentationPlan::new(args.theta)?;
    let manifest = load_manifest(&args.manifest)?;
    let images_dir = args.out.join("images");
    let masks_dir = args.out.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let step = f64::from(plan.angle_step_degrees());
    let mut rows = Vec::new();
    for sample in &manifest.samples {
        let (source, mask) = dataset::load_source(sample, manifest.channel_mode)?;
        let gray = match &source {
            imageproc::SourceImage::Gray(g) => g.clone(),
            imageproc::SourceImage::Rgb { green, .. } => green.clone(),
        };
        let (normalized, _) = imageproc::contrast_normalize(&gray);
        for (k, variant) in imageproc::augment(&normalized, &plan).into_iter().enumerate() {
            let id = format!("{}-rot{k:03}", sample.id);
            let image_rel = format!("images/{id}.png");
            imageproc::save_gray_u16(&args.out.join(&image_rel), &variant)?;
            let mask_rel = match &mask {
                Some(m) => {
                    let rotated = if k == 0 {
                        m.clone()
                    } else {
                        imageproc::rotate_mask_about_center(m, k as f64 * step)
                    };
                    let rel = format!("masks/{id}.png");
                    imageproc::save_mask(&args.out.join(&rel), &rotated)?;
                    rel
                }
                None => String::new(),
            };
            rows.push(ManifestRow {
                id,
                image: image_rel,
                mask: mask_rel,
                label: manifest.classes[sample.label].clone(),
            });
        }
    }
    dataset::write_manifest(
        &args.out.join("manifest.csv"),
        &manifest.classes,
        ChannelMode::Grayscale,
        &rows,
    )?;
    println!(
        "augmented {} samples into {} images (m = {})",
        manifest.samples.len(),
        rows.len(),
        plan.variant_count()
    );
    Ok(())
}

/// Splits, preprocesses, and augments per the config; shared by train and
/// finetune.
fn prepare_sets(
    config: &RunConfig,
    manifest: &DatasetManifest,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<LabeledImage>)> {
    let split_spec = config.split.to_spec(config.seed);
    let (train_samples, val_samples, test_samples) = dataset::split(manifest, &split_spec)?;
    if train_samples.is_empty() {
        return Err(Error::Config(
            "training slice is empty; check split fractions".into(),
        ));
    }
    let opts = PreprocessOptions {
        align: config.align,
        target: config.network.input_size,
    };
    let plan = config.augmentation.plan()?;
    let order = if config.augmentation.rotate_before_resize {
        AugmentOrder::RotateBeforeResize
    } else {
        AugmentOrder::RotateAfterResize
    };

    let train =
        dataset::preprocess_augmented_set(&train_samples, manifest.channel_mode, &opts, &plan, order)?;
    let val = dataset::load_labeled_set(&val_samples, manifest.channel_mode, &opts)?;
    let test = dataset::load_labeled_set(&test_samples, manifest.channel_mode, &opts)?;
    Ok((train, val, test))
}

/// Writes the run directory: resolved config, per-epoch curves, snapshots,
/// and the snapshot index.
fn write_run_dir(
    out: &Path,
    config: &RunConfig,
    history: &[metrics::CurvePoint],
    snapshots: &[Snapshot],
) -> Result<PathBuf> {
    let run_dir = out.join(config.run_name()?);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    config.save(&run_dir.join("config.toml"))?;
    let curves_path = run_dir.join("curves.csv");
    std::fs::write(&curves_path, metrics::curves_to_string(history))
        .map_err(|e| Error::io(&curves_path, e))?;
    let mut index = String::from("epoch,path\n");
    for snapshot in snapshots {
        let path = snapshot.write_to(&run_dir)?;
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let _ = writeln!(index, "{},{}", snapshot.epoch, name);
    }
    let index_path = run_dir.join("snapshots.csv");
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(run_dir)
}

fn apply_overrides(config: &mut RunConfig, seed: Option<u64>, theta: Option<u32>) {
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(theta) = theta {
        config.augmentation.angle_step_degrees = theta;
    }
}

fn check_class_count(config: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    let network_classes = config.network.class_count()?;
    if network_classes != manifest.classes.len() {
        return Err(Error::Config(format!(
            "network outputs {network_classes} classes but the manifest declares {}",
            manifest.classes.len()
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.seed, args.theta);
    let manifest = load_manifest(&args.manifest)?;
    check_class_count(&config, &manifest)?;
    let (train, val, _) = prepare_sets(&config, &manifest)?;
    println!(
        "training on {} images ({} validation)",
        train.len(),
        val.len()
    );
    let train_config = config.train.to_config(config.seed);
    let (state, snapshots) = trainer::fit(&config.network, &train_config, &train, &val)?;
    let run_dir = write_run_dir(&args.out, &config, &state.history, &snapshots)?;
    if let Some(last) = state.history.last() {
        println!(
            "epoch {}: train_mca {:.4} validation_mca {}",
            last.epoch,
            last.train_mca,
            last.validation_mca
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.seed, args.theta);
    let manifest = load_manifest(&args.manifest)?;
    let snapshot = Snapshot::read_from(&args.snapshot)?;
    let (_, spec) = snapshot.params_and_spec()?;
    config.network = spec;
    let (train, val, _) = prepare_sets(&config, &manifest)?;
    let mut train_config = config.train.to_config(config.seed);
    train_config.max_epochs = args.epochs;
    train_config.snapshot_epochs = if args.epochs == 0 { vec![] } else { vec![args.epochs] };
    println!(
        "fine-tuning {} epochs on {} images",
        args.epochs,
        train.len()
    );
    let (state, snapshots) = trainer::finetune(
        &snapshot,
        manifest.classes.len(),
        &train_config,
        &train,
        &val,
    )?;
    let run_dir = write_run_dir(&args.out, &config, &state.history, &snapshots)?;
    if let Some(last) = state.history.last() {
        println!(
            "epoch {}: train_mca {:.4} validation_mca {}",
            last.epoch,
            last.train_mca,
            last.validation_mca
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

/// Collects the ensemble from --snapshots and/or a --run directory.
fn load_ensemble_snapshots(snapshots: &[PathBuf], run: Option<&Path>) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    if let Some(run_dir) = run {
        let index_path = run_dir.join("snapshots.csv");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        for line in text.lines().skip(1) {
            let Some((_, name)) = line.split_once(',') else {
                continue;
            };
            out.push(Snapshot::read_from(&run_dir.join(name.trim()))?);
        }
    }
    for path in snapshots {
        out.push(Snapshot::read_from(path)?);
    }
    if out.is_empty() {
        return Err(Error::Config(
            "no snapshots given; pass --snapshots or --run".into(),
        ));
    }
    Ok(out)
}

fn select_slice(
    manifest: &DatasetManifest,
    config: &RunConfig,
    selector: &str,
) -> Result<Vec<dataset::CellSample>> {
    if selector == "all" {
        return Ok(manifest.samples.clone());
    }
    let (train, val, test) = dataset::split(manifest, &config.split.to_spec(config.seed))?;
    match selector {
        "train" => Ok(train),
        "validation" => Ok(val),
        "test" => Ok(test),
        other => Err(Error::Config(format!(
            "unknown split selector '{other}' (expected all|train|validation|test)"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, None, args.theta);
    let manifest = load_manifest(&args.manifest)?;
    let snapshots = load_ensemble_snapshots(&args.snapshots, args.run.as_deref())?;
    let ensemble = Ensemble::from_snapshots(&snapshots, manifest.classes.clone())?;
    let plan = config.augmentation.plan()?;

    let samples = select_slice(&manifest, &config, &args.split)?;
    let opts = PreprocessOptions {
        align: config.align,
        target: ensemble.spec().input_size,
    };
    let set = dataset::load_labeled_set(&samples, manifest.channel_mode, &opts)?;
    if set.is_empty() {
        return Err(Error::Config(format!(
            "selected split '{}' is empty",
            args.split
        )));
    }

    let mut confusion = ConfusionMatrix::new(manifest.classes.len())?;
    for sample in &set {
        let (predicted, _) = ensemble_predict(&ensemble, &sample.image, &plan)?;
        confusion.accumulate(sample.label, predicted)?;
    }
    let paths = metrics::export_report(&args.out, &confusion, &manifest.classes, &[])?;
    println!(
        "evaluated {} images with {} members x {} rotations",
        set.len(),
        ensemble.len(),
        plan.variant_count()
    );
    println!(
        "mca {:.4} aca {:.4}",
        metrics::mca(&confusion)?,
        metrics::aca(&confusion)?
    );
    println!("reports: {}", paths.summary.parent().unwrap_or(&args.out).display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, None, args.theta);
    let snapshots = load_ensemble_snapshots(&args.snapshots, args.run.as_deref())?;

    // Inputs: either a directory of PNGs or a manifest (labels ignored).
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    let mut channel_mode = ChannelMode::Grayscale;
    match (&args.images, &args.manifest) {
        (Some(dir), None) => {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                let path = entry.path();
                if path.extension().and_then(|e| e.to_str()) == Some("png") {
                    let id = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string();
                    inputs.push((id, path));
                }
            }
            inputs.sort();
        }
        (None, Some(manifest_path)) => {
            let manifest = load_manifest(manifest_path)?;
            channel_mode = manifest.channel_mode;
            for s in &manifest.samples {
                inputs.push((s.id.clone(), s.image_path.clone()));
            }
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --images or --manifest".into(),
            ));
        }
    }
    if inputs.is_empty() {
        return Err(Error::Config("no input images found".into()));
    }

    let (_, spec) = snapshots[0].params_and_spec()?;
    let classes = spec.class_count()?;
    let class_names: Vec<String> = if args.classes.is_empty() {
        (0..classes).map(|i| format!("class{i}")).collect()
    } else {
        args.classes.clone()
    };
    let ensemble = Ensemble::from_snapshots(&snapshots, class_names.clone())?;
    let plan = config.augmentation.plan()?;
    let opts = PreprocessOptions {
        align: false,
        target: ensemble.spec().input_size,
    };

    let mut rows = Vec::with_capacity(inputs.len());
    for (id, path) in &inputs {
        let source = imageproc::load_raster(path)?;
        if source.is_rgb() && channel_mode == ChannelMode::Grayscale {
            channel_mode = ChannelMode::GreenOfRgb; // predict is permissive: take green
        }
        let image = imageproc::preprocess(&source, None, &opts)?;
        let (predicted, probabilities) = ensemble_predict(&ensemble, &image, &plan)?;
        rows.push(PredictionRow {
            id: id.clone(),
            predicted,
            probabilities,
        });
    }
    cellcnn_core::inference::write_predictions(&args.out, &class_names, &rows)?;
    println!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(())
}
