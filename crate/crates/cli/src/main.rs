//! Command-line surface over the augmentation toolkit.
//!
//! Every subcommand reads one JSON config plus a small flag set, writes its
//! results to files (or stdout where no `--out` is given), and keeps its
//! progress chatter on stderr. All randomness flows from explicit seeds, so
//! the same command line over the same inputs produces byte-identical
//! outputs; `--threads` caps parallelism without changing any result.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 runtime/data error.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dermadiff::control::{init_adapter, train_adapter, AdapterArtifact, AdapterSpec, Vocabulary};
use dermadiff::datacore::{load_image, save_mask, BinaryMask, ImageGrid};
use dermadiff::diffusion::{train_denoiser, DenoiserArtifact};
use dermadiff::maskgen::{gen_batch, MaskGenConfig};
use dermadiff::metrics::{evaluate_generation, MetricsReport, SsimConfig};
use dermadiff::optimizer::TrainConfig;
use dermadiff::pipeline::{
    load_dataset, run_experiment, synthesize_pairs, DataConfig, ExperimentConfig, SynthesisJob,
    TagSamplerConfig,
};
use dermadiff::schedule::{NoiseSchedule, ScheduleSpec};
use dermadiff::seeding::derive_seed;
use dermadiff::segharness::{
    build_augmented, evaluate_dsc, train_segmenter, SegmenterArtifact, DEFAULT_DSC_THRESHOLD,
};
use dermadiff::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(
    name = "dermadiff",
    version,
    about = "Conditional-diffusion data augmentation for lesion segmentation"
)]
struct Cli {
    /// Cap worker threads (default: all cores). Never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural lesion masks as PNGs plus metadata.jsonl.
    Maskgen(MaskgenArgs),
    /// Train the diffusion backbone and save it as an artifact.
    TrainDiffusion(TrainArgs),
    /// Train the conditioning adapter against a frozen backbone artifact.
    TrainAdapter(TrainArgs),
    /// Synthesize paired (image, mask, tags) data from saved artifacts.
    Sample(SampleArgs),
    /// Score reference/generated image pairs (MSE, PSNR, SSIM).
    Metrics(MetricsArgs),
    /// Train the downstream segmenter on pooled real + synthetic pairs.
    SegTrain(TrainArgs),
    /// Mean DSC of a saved segmenter over a dataset.
    SegEval(EvalArgs),
    /// Full protocol: split, train, synthesize, segment, report.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct MaskgenArgs {
    /// Generator config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of masks to generate.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the trained artifact.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Synthesis job (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the job file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the job file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// JSON-Lines file of {"a": reference, "b": generated} path pairs,
    /// resolved relative to the file itself.
    #[arg(long)]
    pairs: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides seeds.master in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and report.json.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as ClapKind;
            return match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One line, machine-parseable, always on stderr.
            let msg = err.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(match err.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Runtime => 2,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Maskgen(args) => cmd_maskgen(args),
        Command::TrainDiffusion(args) => cmd_train_diffusion(args),
        Command::TrainAdapter(args) => cmd_train_adapter(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::SegTrain(args) => cmd_seg_train(args),
        Command::SegEval(args) => cmd_seg_eval(args),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

/// Read a config file. A missing/unreadable file is a runtime error (exit
/// 2); unparseable content is a validation error (exit 1), since the config
/// is user input.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json_result<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_err(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct MaskMetadataRow {
    index: usize,
    mask_path: String,
    center: (usize, usize),
    radius: f64,
    attempts_used: usize,
    seed: u64,
}

fn cmd_maskgen(args: MaskgenArgs) -> Result<()> {
    let cfg: MaskGenConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => MaskGenConfig::default(),
    };
    let masks = gen_batch(args.n, &cfg, args.seed)?;
    ensure_dir(&args.out)?;
    let meta_path = args.out.join("metadata.jsonl");
    let file = fs::File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let mut meta = std::io::BufWriter::new(file);
    for (i, gen) in masks.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_mask(&gen.mask, &args.out.join(&name))?;
        let row = MaskMetadataRow {
            index: i,
            mask_path: name,
            center: gen.center,
            radius: gen.radius,
            attempts_used: gen.attempts_used,
            seed: gen.seed,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::Config(format!("metadata row {i}: {e}")))?;
        writeln!(meta, "{line}").map_err(|e| io_err(&meta_path, e))?;
    }
    meta.flush().map_err(|e| io_err(&meta_path, e))?;
    eprintln!("wrote {} masks to {}", masks.len(), args.out.display());
    Ok(())
}

fn loss_summary(label: &str, losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!(
            "{label}: {} epochs, loss {first:.6} -> {last:.6}",
            losses.len()
        );
    }
}

#[derive(Deserialize)]
struct TrainDiffusionConfig {
    schedule: ScheduleSpec<f64>,
    data: DataConfig,
    #[serde(default)]
    sampler: TagSamplerConfig,
    train: TrainConfig,
}

fn cmd_train_diffusion(args: TrainArgs) -> Result<()> {
    let cfg: TrainDiffusionConfig = read_config(&args.config)?;
    let train_cfg = match args.seed {
        Some(seed) => cfg.train.with_seed(seed),
        None => cfg.train.clone(),
    };
    let schedule = NoiseSchedule::from_spec(&cfg.schedule)?;
    let vocab = Vocabulary::default();
    let (records, _) = load_dataset::<f64>(
        &cfg.data,
        &cfg.sampler,
        &vocab,
        derive_seed(train_cfg.seed, 0),
    )?;
    let images: Vec<ImageGrid<f64>> = records.into_iter().map(|(img, _, _)| img).collect();
    eprintln!("training denoiser on {} images", images.len());
    let trained = train_denoiser(&images, &schedule, &train_cfg)?;
    loss_summary("denoiser", &trained.epoch_loss);

    ensure_dir(&args.out)?;
    let path = args.out.join("denoiser.json");
    DenoiserArtifact::new(cfg.schedule, trained.params).save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

#[derive(Deserialize)]
struct TrainAdapterConfig {
    denoiser_path: PathBuf,
    data: DataConfig,
    #[serde(default)]
    sampler: TagSamplerConfig,
    #[serde(default = "default_embed_dim")]
    embed_dim: usize,
    #[serde(default = "default_init_scale")]
    init_scale: f64,
    train: TrainConfig,
}

fn default_embed_dim() -> usize {
    16
}

fn default_init_scale() -> f64 {
    0.1
}

fn cmd_train_adapter(args: TrainArgs) -> Result<()> {
    let cfg: TrainAdapterConfig = read_config(&args.config)?;
    let train_cfg = match args.seed {
        Some(seed) => cfg.train.with_seed(seed),
        None => cfg.train.clone(),
    };
    let backbone = DenoiserArtifact::<f64>::load(&cfg.denoiser_path)?;
    let schedule = NoiseSchedule::from_spec(&backbone.schedule)?;
    let vocab = Vocabulary::default();
    let (records, _) = load_dataset::<f64>(
        &cfg.data,
        &cfg.sampler,
        &vocab,
        derive_seed(train_cfg.seed, 0),
    )?;
    let channels = records
        .first()
        .map(|(img, _, _)| img.channels())
        .ok_or_else(|| Error::EmptyInput("adapter training data".into()))?;
    let spec = AdapterSpec {
        steps: backbone.schedule.steps,
        channels,
        embed_dim: cfg.embed_dim,
        init_scale: cfg.init_scale,
    };
    let adapter = init_adapter(backbone.params, spec, vocab, derive_seed(train_cfg.seed, 1))?;
    eprintln!("training adapter on {} pairs", records.len());
    let trained = train_adapter(adapter, &records, &schedule, &train_cfg)?;
    loss_summary("adapter", &trained.epoch_loss);

    ensure_dir(&args.out)?;
    let path = args.out.join("adapter.json");
    AdapterArtifact::from_adapter(&trained.adapter).save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let mut job: SynthesisJob = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    if let Some(out) = args.out {
        job.out_dir = out;
    }
    let output = synthesize_pairs::<f64>(&job)?;
    eprintln!(
        "wrote {} pairs and {}",
        output.pairs.len(),
        output.manifest_path.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct PairEntry {
    a: String,
    b: String,
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let file = fs::File::open(&args.pairs).map_err(|e| io_err(&args.pairs, e))?;
    let base = args
        .pairs
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let mut pairs: Vec<(ImageGrid<f64>, ImageGrid<f64>)> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&args.pairs, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PairEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{} line {}: {e}", args.pairs.display(), lineno + 1))
        })?;
        let a = load_image(&base.join(&entry.a))?;
        let b = load_image(&base.join(&entry.b))?;
        pairs.push((a, b));
    }
    let report = evaluate_generation(&pairs, &SsimConfig::default())?;
    print_metrics_table(&report);
    write_json_result(&report, args.out.as_deref())
}

/// Fixed column order: MSE, PSNR, SSIM.
fn print_metrics_table(report: &MetricsReport) {
    eprintln!("pairs: {}", report.n_pairs);
    eprintln!("MSE   {:.6}", report.mse);
    match report.psnr_db {
        Some(db) if report.n_psnr_infinite > 0 => eprintln!(
            "PSNR  {db:.3} dB ({} identical pairs excluded)",
            report.n_psnr_infinite
        ),
        Some(db) => eprintln!("PSNR  {db:.3} dB"),
        None => eprintln!("PSNR  inf (all pairs identical)"),
    }
    eprintln!("SSIM  {:.6}", report.ssim);
}

#[derive(Deserialize)]
struct SegTrainConfig {
    real: DataConfig,
    synth: Option<DataConfig>,
    #[serde(default)]
    n_synth: usize,
    #[serde(default)]
    sampler: TagSamplerConfig,
    train: TrainConfig,
}

fn load_pairs(
    data: &DataConfig,
    sampler: &TagSamplerConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<(ImageGrid<f64>, BinaryMask)>> {
    let (records, _) = load_dataset::<f64>(data, sampler, vocab, seed)?;
    Ok(records
        .into_iter()
        .map(|(img, mask, _)| (img, mask))
        .collect())
}

fn cmd_seg_train(args: TrainArgs) -> Result<()> {
    let cfg: SegTrainConfig = read_config(&args.config)?;
    let train_cfg = match args.seed {
        Some(seed) => cfg.train.with_seed(seed),
        None => cfg.train.clone(),
    };
    let vocab = Vocabulary::default();
    let real = load_pairs(
        &cfg.real,
        &cfg.sampler,
        &vocab,
        derive_seed(train_cfg.seed, 0),
    )?;
    let synth = match &cfg.synth {
        Some(data) => load_pairs(data, &cfg.sampler, &vocab, derive_seed(train_cfg.seed, 1))?,
        None => Vec::new(),
    };
    let dataset = build_augmented(real, synth, cfg.n_synth)?;
    eprintln!(
        "training segmenter on {} real + {} synthetic pairs",
        dataset.real.len(),
        dataset.n_synth_used
    );
    let trained = train_segmenter(&dataset, &train_cfg)?;
    loss_summary("segmenter", &trained.epoch_loss);

    ensure_dir(&args.out)?;
    let path = args.out.join("segmenter.json");
    SegmenterArtifact::new(trained.params).save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

#[derive(Deserialize)]
struct SegEvalConfig {
    model: PathBuf,
    data: DataConfig,
    #[serde(default)]
    sampler: TagSamplerConfig,
    #[serde(default = "default_eval_threshold")]
    threshold: f64,
    #[serde(default)]
    seed: u64,
}

fn default_eval_threshold() -> f64 {
    DEFAULT_DSC_THRESHOLD
}

#[derive(Serialize)]
struct SegEvalReport {
    n_images: usize,
    threshold: f64,
    dsc: f64,
}

fn cmd_seg_eval(args: EvalArgs) -> Result<()> {
    let cfg: SegEvalConfig = read_config(&args.config)?;
    let artifact = SegmenterArtifact::<f64>::load(&cfg.model)?;
    let vocab = Vocabulary::default();
    let testset = load_pairs(&cfg.data, &cfg.sampler, &vocab, cfg.seed)?;
    let dsc = evaluate_dsc(&artifact.params, &testset, cfg.threshold)?;
    eprintln!("DSC {dsc:.4} over {} images", testset.len());
    write_json_result(
        &SegEvalReport {
            n_images: testset.len(),
            threshold: cfg.threshold,
            dsc,
        },
        args.out.as_deref(),
    )
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut cfg: ExperimentConfig<f64> = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds.master = seed;
    }
    let report = run_experiment(&cfg, &args.out)?;
    eprintln!(
        "split {}:{}:{} (train:val:test)",
        report.n_train, report.n_val, report.n_test
    );
    for row in &report.rows {
        eprintln!(
            "n_synth {:>6}  seed {:>3}  dsc {:.4}",
            row.n_synth, row.seed, row.dsc
        );
    }
    eprintln!("report at {}", args.out.join("report.json").display());
    Ok(())
}
