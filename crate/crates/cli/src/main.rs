//! Command-line entry point: dataset generation, training, prediction,
//! scoring, and attention visualization as reproducible batch commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use changecap_core::config::{GenConfig, ModelKind, TrainConfig};
use changecap_core::dataset::{self, Split};
use changecap_core::evalkit;
use changecap_core::ppm::{self, Image};
use changecap_core::trainer;

pub const TRAIN_CONFIG_ECHO: &str = "train_config.txt";

#[derive(Parser)]
#[command(
    name = "changecap",
    version,
    about = "Change captioning on procedurally generated image pairs: \
             generate data, train models, decode captions, score runs, \
             and visualize attention."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of before/after image pairs with captions.
    Gen(GenArgs),
    /// Train a captioning model on a generated dataset.
    Train(TrainArgs),
    /// Decode captions for one split with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a prediction file against the dataset manifest.
    Score(ScoreArgs),
    /// Export attention maps and blend weights for one pair.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Key=value config file; omitted keys use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of scenes; each scene yields two pairs.
    #[arg(long)]
    n_scenes: Option<usize>,
    /// Master seed for scene sampling and jitter.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for images and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding a generated dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Key=value config file; omitted keys use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to train: duda, capt-pix-diff, capt-rep-diff, capt-att,
    /// capt-dual-att.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed: initialization, shuffling, caption choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoints and the log.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding the generated dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to decode with: "best", "last", or a file path.
    #[arg(long, default_value = "best")]
    checkpoint: String,
    /// Split to decode.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output predictions file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing predictions file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Directory holding the generated dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions file from `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Model kind that produced the predictions; selects the map-scoring
    /// rule.
    #[arg(long)]
    model: ModelKind,
    /// Split the predictions cover.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output directory for report.json, report.txt, difficulty.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing report files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct VizArgs {
    /// Directory holding the generated dataset (for the image size).
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions file from `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Pair id to visualize.
    #[arg(long)]
    pair: u64,
    /// Output directory for pixmaps, the blend-weight CSV, and the caption.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing visualization files.
    #[arg(long)]
    force: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Score(args) => cmd_score(args),
        Command::Viz(args) => cmd_viz(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Refuse to reuse a non-empty directory unless forced; forcing removes it.
fn claim_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            bail!(
                "output directory {} is not empty; pass --force to replace it",
                dir.display()
            );
        }
        std::fs::remove_dir_all(dir)
            .with_context(|| format!("removing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Refuse to overwrite an existing file unless forced.
fn claim_file(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite it", path.display());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Sibling temporary name for atomic writes.
fn tmp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write through a temporary file and rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = tmp_name(path);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => GenConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => GenConfig::default(),
    };
    if let Some(n) = args.n_scenes {
        cfg.n_scenes = n;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    claim_dir(&args.out, args.force)?;
    let summary = dataset::build_dataset(&cfg, &args.out)?;
    println!(
        "generated {} pairs ({} scenes) into {}",
        summary.pairs,
        cfg.n_scenes,
        args.out.display()
    );
    Ok(())
}

fn load_train_config(
    config: Option<&Path>,
    model: Option<ModelKind>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => TrainConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_train_config(args.config.as_deref(), args.model, args.epochs, args.seed)?;
    claim_dir(&args.out, args.force)?;
    let data = trainer::prepare(&args.dataset, cfg.encoder_seed, cfg.max_len)
        .with_context(|| format!("preparing dataset {}", args.dataset.display()))?;
    write_atomic(
        &args.out.join(TRAIN_CONFIG_ECHO),
        cfg.canonical_text().as_bytes(),
    )?;
    let outcome = trainer::train(&cfg, &data, &args.out)?;
    match outcome.log.epochs.last() {
        Some(last) => println!(
            "trained {} for {} epochs: train loss {:.4}, val loss {:.4}, best epoch {}",
            cfg.model,
            cfg.epochs,
            last.train_loss,
            last.val_loss,
            outcome.log.best_epoch.unwrap_or(0)
        ),
        None => println!("saved initialized {} checkpoint (0 epochs)", cfg.model),
    }
    println!("run directory: {}", args.out.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    claim_file(&args.out, args.force)?;
    let echo = args.run.join(TRAIN_CONFIG_ECHO);
    let cfg = TrainConfig::load(&echo)
        .with_context(|| format!("loading run config {}", echo.display()))?;
    let checkpoint = match args.checkpoint.as_str() {
        "best" => args.run.join(trainer::BEST_CHECKPOINT),
        "last" => args.run.join(trainer::LAST_CHECKPOINT),
        path => PathBuf::from(path),
    };
    let data = trainer::prepare(&args.dataset, cfg.encoder_seed, cfg.max_len)
        .with_context(|| format!("preparing dataset {}", args.dataset.display()))?;
    let mut model = trainer::init_model(&cfg, &data);
    model
        .load_into(&checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let tmp = tmp_name(&args.out);
    let records = trainer::predict_split(&model, &data, args.split, &tmp)?;
    std::fs::rename(&tmp, &args.out)?;
    println!(
        "decoded {} {} pairs into {}",
        records.len(),
        args.split.name(),
        args.out.display()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let report_json = args.out.join("report.json");
    let report_txt = args.out.join("report.txt");
    let difficulty_csv = args.out.join("difficulty.csv");
    for path in [&report_json, &report_txt, &difficulty_csv] {
        claim_file(path, args.force)?;
    }
    let gen_cfg = GenConfig::load(&args.dataset.join(dataset::CONFIG_ECHO_NAME))
        .with_context(|| format!("loading dataset config in {}", args.dataset.display()))?;
    let records: Vec<_> = dataset::load_manifest(&args.dataset)?
        .into_iter()
        .filter(|r| r.split == args.split)
        .collect();
    let predictions = trainer::load_predictions(&args.predictions)
        .with_context(|| format!("loading predictions {}", args.predictions.display()))?;
    let report = evalkit::score_run(
        &predictions,
        &records,
        evalkit::pointing_rule(args.model),
        gen_cfg.raster_size,
        args.model.flag(),
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    write_atomic(&report_json, json.as_bytes())?;
    write_atomic(&report_txt, evalkit::render_table(&report).as_bytes())?;
    write_atomic(&difficulty_csv, evalkit::difficulty_csv(&report).as_bytes())?;
    print!("{}", evalkit::render_table(&report));
    println!("reports written to {}", args.out.display());
    Ok(())
}

/// Grayscale image of an attention map, upsampled to the raster size.
fn map_image(map: &[f64], h: usize, w: usize, size: usize) -> anyhow::Result<Image> {
    let up = evalkit::upsample_bilinear(map, h, w, size)
        .map_err(|e| anyhow::anyhow!("upsampling attention map: {e}"))?;
    let mut samples = Vec::with_capacity(size * size * 3);
    for v in up {
        let g = v.clamp(0.0, 1.0);
        samples.extend_from_slice(&[g, g, g]);
    }
    Ok(Image { width: size, height: size, samples })
}

fn cmd_viz(args: VizArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let gen_cfg = GenConfig::load(&args.dataset.join(dataset::CONFIG_ECHO_NAME))
        .with_context(|| format!("loading dataset config in {}", args.dataset.display()))?;
    let predictions = trainer::load_predictions(&args.predictions)?;
    let Some(record) = predictions.iter().find(|p| p.id == args.pair) else {
        bail!(
            "pair {} not present in {} ({} records)",
            args.pair,
            args.predictions.display(),
            predictions.len()
        );
    };
    let stem = format!("pair_{}", args.pair);
    let caption_path = args.out.join(format!("{stem}_caption.txt"));
    let alpha_path = args.out.join(format!("{stem}_alpha.csv"));
    claim_file(&caption_path, args.force)?;
    claim_file(&alpha_path, args.force)?;
    write_atomic(&caption_path, format!("{}\n", record.caption).as_bytes())?;
    let mut csv = String::from("alpha_before,alpha_diff,alpha_after\n");
    for row in &record.alphas {
        csv.push_str(&format!("{},{},{}\n", row[0], row[1], row[2]));
    }
    write_atomic(&alpha_path, csv.as_bytes())?;
    let mut written = vec![caption_path, alpha_path];
    if !record.a_bef.is_empty() {
        for (name, map) in [("a_bef", &record.a_bef), ("a_aft", &record.a_aft)] {
            let path = args.out.join(format!("{stem}_{name}.ppm"));
            claim_file(&path, args.force)?;
            let image = map_image(map, record.map_h, record.map_w, gen_cfg.raster_size)?;
            let tmp = tmp_name(&path);
            ppm::save_p6(&tmp, &image)?;
            std::fs::rename(&tmp, &path)?;
            written.push(path);
        }
    }
    println!("caption: {}", record.caption);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
