//! Command-line entry points: patch extraction, training, batch
//! translation, and evaluation. Every command is a thin adapter over the
//! library; progress goes to stderr, artifacts to files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histotrans::checkpoint;
use histotrans::config::TrainConfig;
use histotrans::data::{extract_patches, image_to_tensor, list_images, tensor_to_image,
    write_manifest};
use histotrans::error::{Error, Result};
use histotrans::generator::Translator;
use histotrans::metrics::{evaluate_dirs, EmbeddingExtractor};
use histotrans::ndarray::Axis;
use histotrans::scalar::Scalar;
use histotrans::train::{self, run_with_progress, Trainer};

#[derive(Parser)]
#[command(name = "histotrans", version, about = "Unpaired FF→FFPE patch translation")]
struct Cli {
    /// TOML config file; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is implemented.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut tissue-bearing patches from the slides in a directory.
    ExtractPatches(ExtractArgs),
    /// Train the dual-generator translation model.
    Train(TrainArgs),
    /// Translate every patch in a directory with a trained checkpoint.
    Translate(TranslateArgs),
    /// Compute FID/KID between two patch directories.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Directory of slide images.
    #[arg(long)]
    input_dir: PathBuf,
    /// Where patches and the manifest are written.
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Pyramid level (0 = stored resolution, each level halves).
    #[arg(long)]
    level: Option<u32>,
    /// Minimum tissue fraction for a patch to be kept.
    #[arg(long)]
    tissue_threshold: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Log losses to stderr every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// `x2y` (FF→FFPE) or `y2x`.
    #[arg(long, default_value = "x2y")]
    direction: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Where the JSON metric report is written.
    #[arg(long)]
    out: PathBuf,
    /// Embedding extractor id, e.g. `tiny-400`.
    #[arg(long, default_value = "tiny-400")]
    extractor: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<String> {
    if cli.device != "cpu" {
        return Err(Error::config(format!(
            "device `{}` is not supported; only `cpu` is implemented",
            cli.device
        )));
    }
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_toml_path(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::ExtractPatches(args) => cmd_extract(&cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Translate(args) => cmd_translate(cli.config.is_some().then_some(&cfg), args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, args),
    }
}

fn cmd_extract(cfg: &TrainConfig, args: ExtractArgs) -> Result<String> {
    if !args.input_dir.is_dir() {
        return Err(Error::config(format!(
            "input dir `{}` does not exist",
            args.input_dir.display()
        )));
    }
    let mut spec = cfg.patches.clone();
    if let Some(v) = args.patch_size {
        spec.patch_size = v;
    }
    if let Some(v) = args.level {
        spec.level = v;
    }
    if let Some(v) = args.tissue_threshold {
        spec.tissue_threshold = v;
    }
    spec.validate()?;
    let slides = list_images(&args.input_dir)?;
    if slides.is_empty() {
        return Err(Error::config(format!(
            "no slide images in `{}`",
            args.input_dir.display()
        )));
    }
    let mut files = Vec::new();
    for slide in &slides {
        let set = extract_patches(slide, &args.output_dir, &spec)?;
        files.extend(set.records.into_iter().map(|r| r.file));
    }
    let manifest = args.output_dir.join("manifest.txt");
    write_manifest(&manifest, &files)?;
    Ok(format!(
        "extracted {} patches from {} slide(s); manifest at {}",
        files.len(),
        slides.len(),
        manifest.display()
    ))
}

fn cmd_train(mut cfg: TrainConfig, args: TrainArgs) -> Result<String> {
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output.dir = dir.display().to_string();
    }
    cfg.validate()?;
    let log_every = args.log_every.max(1);
    let report = run_with_progress::<f32>(&cfg, args.resume.as_deref(), |step, b| {
        if step % log_every == 0 {
            eprintln!(
                "step {step}: total={:.4} adv_g={:.4} adv_d={:.4} cyc={:.4} idt={:.4}",
                b.total, b.adv_g, b.adv_d, b.cyc, b.idt
            );
        }
    })?;
    Ok(format!(
        "trained to step {}; losses at {}, final checkpoint at {}",
        report.steps_completed,
        report.csv_path.display(),
        report.final_checkpoint.display()
    ))
}

fn cmd_translate(cfg: Option<&TrainConfig>, args: TranslateArgs) -> Result<String> {
    let manifest = checkpoint::read_manifest(&args.checkpoint)?;
    match manifest.kind.as_str() {
        "identity_stub" => translate_identity(&args),
        "train" => {
            // Without an explicit config the checkpoint's embedded training
            // configuration reconstructs the generators.
            let cfg = match cfg {
                Some(c) => c.clone(),
                None => train::checkpoint_config(&args.checkpoint)?,
            };
            match manifest.dtype.as_str() {
                "f32" => translate_with::<f32>(&cfg, &args),
                "f64" => translate_with::<f64>(&cfg, &args),
                other => Err(Error::load(
                    &args.checkpoint,
                    format!("unsupported dtype `{other}`"),
                )),
            }
        }
        other => Err(Error::load(
            &args.checkpoint,
            format!("kind `{other}` is not a translation checkpoint"),
        )),
    }
}

fn translate_inputs(args: &TranslateArgs) -> Result<Vec<PathBuf>> {
    let inputs = list_images(&args.input_dir)?;
    if inputs.is_empty() {
        return Err(Error::config(format!(
            "no images in `{}`",
            args.input_dir.display()
        )));
    }
    std::fs::create_dir_all(&args.output_dir).map_err(|e| Error::io(&args.output_dir, e))?;
    Ok(inputs)
}

fn output_path(out_dir: &Path, input: &Path) -> PathBuf {
    out_dir
        .join(input.file_name().expect("listed files have names"))
        .with_extension("png")
}

fn translate_identity(args: &TranslateArgs) -> Result<String> {
    let inputs = translate_inputs(args)?;
    for f in &inputs {
        let img = open_rgb(f)?;
        let t = image_to_tensor::<f32>(&img);
        let back = tensor_to_image(&t)?;
        back.save(output_path(&args.output_dir, f))
            .map_err(|e| Error::data(format!("cannot write output: {e}")))?;
    }
    Ok(format!("translated {} image(s) (identity stub)", inputs.len()))
}

fn translate_with<T: Scalar>(cfg: &TrainConfig, args: &TranslateArgs) -> Result<String> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    trainer.load_checkpoint(&args.checkpoint)?;
    let gen = match args.direction.as_str() {
        "x2y" => &trainer.gen_y,
        "y2x" => &trainer.gen_x,
        other => {
            return Err(Error::config(format!(
                "direction must be `x2y` or `y2x`, got `{other}`"
            )))
        }
    };
    let inputs = translate_inputs(args)?;
    for f in &inputs {
        let img = open_rgb(f)?;
        let t = image_to_tensor::<T>(&img).insert_axis(Axis(0));
        let out = gen.translate(&t)?;
        tensor_to_image(&out)?
            .save(output_path(&args.output_dir, f))
            .map_err(|e| Error::data(format!("cannot write output: {e}")))?;
    }
    Ok(format!(
        "translated {} image(s) {} into {}",
        inputs.len(),
        args.direction,
        args.output_dir.display()
    ))
}

fn cmd_evaluate(cfg: &TrainConfig, args: EvaluateArgs) -> Result<String> {
    let ex_seed = args
        .extractor
        .strip_prefix("tiny-")
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| {
            Error::config(format!(
                "unknown extractor `{}` (expected `tiny-<seed>`)",
                args.extractor
            ))
        })?;
    let extractor = EmbeddingExtractor::tiny(ex_seed);
    let report = evaluate_dirs(
        &args.generated,
        &args.reference,
        &extractor,
        cfg.seed,
        &cfg.hash(),
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&args.out, json + "\n").map_err(|e| Error::io(&args.out, e))?;
    Ok(format!(
        "FID {:.4}, KID×10³ {:.4} ± {:.4} ({} vs {} images); report at {}",
        report.fid,
        report.kid_mean_x1000,
        report.kid_std_x1000,
        report.n_generated,
        report.n_reference,
        args.out.display()
    ))
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::load(path, e.to_string()))?
        .to_rgb8())
}
