//! The eight subcommands, their argument surfaces, and the glue between
//! flags, the config file, and the library types.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use slidesampler_core::detector::{
    infer_slide, run_training_protocol, write_training_log, InferConfig, OracleDetector,
    OracleDetectorConfig, SimLearner, TrainingSchedule,
};
use slidesampler_core::eval::{
    match_and_ap, read_detections, read_ground_truth, report_to_csv, report_to_json,
    write_detections, Detection, GroundTruth,
};
use slidesampler_core::model::{manifest_from_json, manifest_to_json};
use slidesampler_core::raster::{load_slide_raster, write_synthetic_slide, SyntheticSpec};
use slidesampler_core::sampler::{
    write_patch_records, SamplerConfig, SamplerIndex, SamplingMode,
};
use slidesampler_core::sync::{ServerConfig, SyncClient};
use slidesampler_core::{ClassRegistry, DatasetManifest, Rect, SplitRole};

use crate::config::FileConfig;

/// Patch sampling, training simulation, tiled inference, and scoring for
/// partially annotated slide collections.
#[derive(Parser)]
#[command(name = "slidesampler", version, about, max_term_width = 100)]
pub struct Cli {
    /// TOML config file; flags and environment variables override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for rendering and tiled inference; 0 means one per
    /// core. Output never depends on this.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a synthetic slide collection with a manifest.
    Synth(SynthArgs),
    /// Download slides and annotations from the annotation server.
    Pull(PullArgs),
    /// Upload detections to the annotation server.
    Push(PushArgs),
    /// Emit the deterministic patch stream for a manifest.
    Sample(SampleArgs),
    /// Run the training protocol against the built-in simulated learner.
    Trainsim(TrainsimArgs),
    /// Tile slides and run the oracle detector over them.
    Infer(InferArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Lay out several evaluation reports as one comparison table.
    Report(ReportArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let jobs = cli.jobs.or(file.run.jobs).unwrap_or(0);
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("sizing the worker pool")?;
    }
    match cli.command {
        Command::Synth(args) => synth(args, &file, jobs),
        Command::Pull(args) => pull(args, &file, jobs),
        Command::Push(args) => push(args, &file, jobs),
        Command::Sample(args) => sample(args, &file, jobs),
        Command::Trainsim(args) => trainsim(args, &file, jobs),
        Command::Infer(args) => infer(args, &file, jobs),
        Command::Eval(args) => eval(args, jobs),
        Command::Report(args) => report(args, jobs),
    }
}

/// Every command logs the configuration it actually ran with, after all
/// layering, so the log alone is enough to reproduce the run.
fn echo(command: &str, resolved: serde_json::Value) {
    log::info!("resolved {command} config: {resolved}");
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    manifest_from_json(&text).with_context(|| format!("in {}", path.display()))
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad count {t:?}")))
        .collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect()
}

// ---- synth ----------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the PNG rasters and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Number of slides. With three or more, the first becomes the
    /// validation slide and the second the test slide.
    #[arg(long, default_value_t = 6)]
    pub slides: u32,

    #[arg(long, default_value_t = 3072)]
    pub width: i64,

    #[arg(long, default_value_t = 3072)]
    pub height: i64,

    /// Cells per slide, split evenly across the five classes.
    #[arg(long, default_value_t = 200)]
    pub cells: u64,

    /// Explicit per-class cell counts per slide, comma separated, one per
    /// class. Overrides --cells.
    #[arg(long, value_name = "N,N,N,N,N")]
    pub counts: Option<String>,

    /// How many training slides get a partial screened region (the left
    /// half plus the bottom-right quadrant) instead of full coverage.
    #[arg(long, default_value_t = 0)]
    pub partial: u32,

    /// Side of the square training patches recorded in the manifest.
    #[arg(long, default_value_t = 1024)]
    pub patch_size: i64,

    /// Training patches per epoch recorded in the manifest.
    #[arg(long, default_value_t = 500)]
    pub epoch_length: u32,

    #[arg(long)]
    pub seed: Option<u64>,
}

fn synth(args: SynthArgs, file: &FileConfig, jobs: usize) -> Result<()> {
    use rayon::prelude::*;

    if args.slides == 0 {
        bail!("--slides must be at least 1");
    }
    let registry = ClassRegistry::canonical();
    let counts = match &args.counts {
        Some(list) => parse_u64_list(list)?,
        None => even_split(args.cells, registry.len()),
    };
    if counts.len() != registry.len() {
        bail!("--counts needs {} values, got {}", registry.len(), counts.len());
    }
    let seed = args.seed.or(file.run.seed).unwrap_or(0);
    echo(
        "synth",
        json!({
            "out": args.out, "slides": args.slides, "width": args.width,
            "height": args.height, "counts": counts, "partial": args.partial,
            "patch_size": args.patch_size, "epoch_length": args.epoch_length,
            "seed": seed, "jobs": jobs,
        }),
    );

    let full = vec![Rect::new(0, 0, args.width, args.height)];
    let partial = vec![
        Rect::new(0, 0, args.width / 2, args.height),
        Rect::new(
            args.width / 2,
            args.height / 2,
            args.width - args.width / 2,
            args.height - args.height / 2,
        ),
    ];

    let mut specs = Vec::new();
    let mut train_seen = 0u32;
    for i in 0..args.slides {
        let role = match i {
            0 if args.slides >= 3 => SplitRole::Val,
            1 if args.slides >= 3 => SplitRole::Test,
            _ => SplitRole::Train,
        };
        // Validation and test slides are always fully screened; partial
        // coverage is a property of the growing training pool.
        let screened = if role == SplitRole::Train && train_seen < args.partial {
            train_seen += 1;
            partial.clone()
        } else {
            full.clone()
        };
        specs.push(SyntheticSpec {
            slide_id: format!("synth-{i:02}"),
            width: args.width,
            height: args.height,
            screened,
            class_counts: counts.clone(),
            seed,
            split_role: role,
        });
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut slides = specs
        .par_iter()
        .map(|spec| {
            write_synthetic_slide(&args.out, spec)
                .with_context(|| format!("rendering {}", spec.slide_id))
        })
        .collect::<Result<Vec<_>>>()?;

    // Each rendered slide numbers its cells from 1; the dataset wants ids
    // unique across slides.
    let mut next_id = 1u64;
    for slide in &mut slides {
        for ann in &mut slide.annotations {
            ann.id = next_id;
            next_id += 1;
        }
    }

    let placed: usize = slides.iter().map(|s| s.annotations.len()).sum();
    let mut manifest = DatasetManifest::new(slides);
    manifest.seed = seed;
    manifest.patch_size = args.patch_size;
    manifest.epoch_length = args.epoch_length;
    manifest.validate()?;

    let path = args.out.join("manifest.json");
    fs::write(&path, manifest_to_json(&manifest))
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} slides, {} cells, {}", args.slides, placed, path.display());
    Ok(())
}

fn even_split(total: u64, classes: usize) -> Vec<u64> {
    let base = total / classes as u64;
    let rem = (total % classes as u64) as usize;
    (0..classes).map(|i| base + u64::from(i < rem)).collect()
}

// ---- pull / push ----------------------------------------------------------

#[derive(Args)]
pub struct ServerArgs {
    /// Server root, e.g. http://annotations.local:8953.
    #[arg(long, env = "SLIDESAMPLER_BASE_URL")]
    pub base_url: Option<String>,

    /// Bearer token for the annotation server.
    #[arg(long, env = "SLIDESAMPLER_TOKEN", hide_env_values = true)]
    pub token: Option<String>,

    /// Image set identifier on the server.
    #[arg(long = "set", value_name = "ID")]
    pub image_set: Option<String>,
}

fn server_config(args: &ServerArgs, file: &FileConfig) -> Result<ServerConfig> {
    let base_url = args
        .base_url
        .clone()
        .or_else(|| file.server.base_url.clone())
        .context("no server URL: pass --base-url, set SLIDESAMPLER_BASE_URL, or add base_url under [server] in the config file")?;
    let token = args
        .token
        .clone()
        .or_else(|| file.server.token.clone())
        .context("no API token: pass --token, set SLIDESAMPLER_TOKEN, or add token under [server] in the config file")?;
    let image_set = args
        .image_set
        .clone()
        .or_else(|| file.server.image_set.clone())
        .unwrap_or_else(|| "default".to_string());
    let cfg = ServerConfig::new(&base_url, &token, &image_set);
    cfg.validate()?;
    Ok(cfg)
}

/// The token itself never goes to the log; everything else is echoed.
fn server_echo(cfg: &ServerConfig) -> serde_json::Value {
    json!({
        "base_url": cfg.base_url, "image_set": cfg.image_set, "token": "<redacted>",
        "timeout_ms": cfg.timeout.as_millis() as u64, "max_retries": cfg.max_retries,
    })
}

#[derive(Args)]
pub struct PullArgs {
    #[command(flatten)]
    pub server: ServerArgs,

    /// Where to write the pulled manifest.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

fn pull(args: PullArgs, file: &FileConfig, jobs: usize) -> Result<()> {
    let cfg = server_config(&args.server, file)?;
    echo("pull", json!({ "server": server_echo(&cfg), "out": args.out, "jobs": jobs }));

    let mut client = SyncClient::new(cfg)?;
    let outcome = client.pull_dataset()?;
    for rej in &outcome.rejected {
        log::warn!(
            "rejected annotation {} on {}: {}",
            rej.annotation_id, rej.slide_id, rej.reason
        );
    }
    fs::write(&args.out, manifest_to_json(&outcome.manifest))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let cells: usize = outcome.manifest.slides.iter().map(|s| s.annotations.len()).sum();
    println!(
        "pulled {} slides, {} annotations ({} rejected, {} retries), {}",
        outcome.manifest.slides.len(),
        cells,
        outcome.rejected.len(),
        outcome.retries,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct PushArgs {
    #[command(flatten)]
    pub server: ServerArgs,

    /// Detections to upload, one JSON record per line.
    #[arg(long, value_name = "FILE")]
    pub dets: PathBuf,

    /// Only push detections for this slide.
    #[arg(long, value_name = "ID")]
    pub slide: Option<String>,

    /// Drop detections scoring below this before upload.
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
}

fn push(args: PushArgs, file: &FileConfig, jobs: usize) -> Result<()> {
    let cfg = server_config(&args.server, file)?;
    echo(
        "push",
        json!({
            "server": server_echo(&cfg), "dets": args.dets, "slide": args.slide,
            "min_score": args.min_score, "jobs": jobs,
        }),
    );

    let mut registry = ClassRegistry::canonical();
    let reader = BufReader::new(
        File::open(&args.dets).with_context(|| format!("opening {}", args.dets.display()))?,
    );
    let dets = read_detections(reader, &mut registry)?;
    let total = dets.len();

    let mut by_slide: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        if args.slide.as_deref().is_none_or(|s| s == d.image_id) {
            by_slide.entry(d.image_id.clone()).or_default().push(d);
        }
    }
    if let Some(id) = &args.slide {
        if by_slide.is_empty() {
            bail!("{} has no detections for slide {id}", args.dets.display());
        }
    }

    let mut client = SyncClient::new(cfg)?;
    let mut accepted = 0usize;
    for (slide_id, dets) in &by_slide {
        let receipts = client.push_predictions(slide_id, dets, args.min_score)?;
        log::info!("{slide_id}: accepted {} of {}", receipts.len(), dets.len());
        accepted += receipts.len();
    }
    println!(
        "accepted {accepted} of {total} predictions across {} slides",
        by_slide.len()
    );
    Ok(())
}

// ---- sample ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Patches cut around sampled cell seeds at training time.
    Live,
    /// Whole pre-extracted annotation tiles.
    SubImage,
}

impl From<ModeArg> for SamplingMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Live => SamplingMode::Live,
            ModeArg::SubImage => SamplingMode::SubImage,
        }
    }
}

fn mode_label(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::Live => "live",
        ModeArg::SubImage => "sub-image",
    }
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    #[arg(long, value_enum, default_value_t = ModeArg::Live)]
    pub mode: ModeArg,

    #[arg(long = "bs", default_value_t = 16)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 1)]
    pub epochs: u64,

    /// Overrides the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Patches per epoch; defaults to the manifest value.
    #[arg(long)]
    pub epoch_length: Option<u32>,

    /// Fail when a class has no eligible seed instead of renormalizing
    /// over the classes that do.
    #[arg(long)]
    pub strict: bool,

    /// Output file, one JSON record per patch; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn sample(args: SampleArgs, file: &FileConfig, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let mut cfg = SamplerConfig::from_manifest(&manifest, args.mode.into());
    cfg.batch_size = args.batch_size;
    if let Some(seed) = args.seed.or(file.run.seed) {
        cfg.seed = seed;
    }
    if let Some(len) = args.epoch_length {
        cfg.epoch_length = len;
    }
    cfg.strict = args.strict;
    echo(
        "sample",
        json!({
            "manifest": args.manifest, "mode": mode_label(args.mode),
            "batch_size": cfg.batch_size, "epoch_length": cfg.epoch_length,
            "epochs": args.epochs, "seed": cfg.seed, "strict": cfg.strict,
            "patch_size": cfg.patch_size, "out": args.out, "jobs": jobs,
        }),
    );

    let index = SamplerIndex::new(&manifest, cfg)?;
    let mut w = out_writer(args.out.as_deref())?;
    for epoch in 1..=args.epochs {
        for batch in index.epoch(epoch) {
            write_patch_records(&mut w, &batch, &manifest.registry)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---- trainsim -------------------------------------------------------------

#[derive(Args)]
pub struct TrainsimArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    #[arg(long = "bs", default_value_t = 16)]
    pub batch_size: usize,

    /// Seeds both the sampler and the simulated learner; defaults to the
    /// manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value_t = 60)]
    pub max_epochs: u64,

    /// Learning-rate ladder, comma separated, walked top to bottom.
    #[arg(long, value_name = "LR,LR,...")]
    pub lr_ladder: Option<String>,

    /// Epochs without a new best validation metric before dropping a rung.
    #[arg(long, default_value_t = 3)]
    pub plateau_patience: u32,

    /// Epochs without a new best, on the last rung, before stopping.
    #[arg(long, default_value_t = 10)]
    pub stop_patience: u32,

    /// Training log, one JSON record per epoch; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn trainsim(args: TrainsimArgs, file: &FileConfig, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let mut cfg = SamplerConfig::from_manifest(&manifest, SamplingMode::Live);
    cfg.batch_size = args.batch_size;
    if let Some(seed) = args.seed.or(file.run.seed) {
        cfg.seed = seed;
    }
    let schedule = TrainingSchedule {
        lr_ladder: match &args.lr_ladder {
            Some(list) => parse_f64_list(list)?,
            None => TrainingSchedule::default().lr_ladder,
        },
        plateau_patience: args.plateau_patience,
        stop_patience: args.stop_patience,
        max_epochs: args.max_epochs,
    };
    echo(
        "trainsim",
        json!({
            "manifest": args.manifest, "batch_size": cfg.batch_size,
            "epoch_length": cfg.epoch_length, "seed": cfg.seed,
            "lr_ladder": schedule.lr_ladder, "plateau_patience": schedule.plateau_patience,
            "stop_patience": schedule.stop_patience, "max_epochs": schedule.max_epochs,
            "out": args.out, "jobs": jobs,
        }),
    );

    let seed = cfg.seed;
    let index = SamplerIndex::new(&manifest, cfg)?;
    let mut learner = SimLearner::new(seed);
    // The simulated learner trains on batch metadata alone, so no pixels
    // are materialized here.
    let log = run_training_protocol(&mut learner, &index, &schedule, |_| Ok(Vec::new()), |l, e| {
        l.validation_loss(e)
    })?;

    let mut w = out_writer(args.out.as_deref())?;
    write_training_log(&mut w, &log)?;
    w.flush()?;
    log::info!(
        "stopped after {} epochs ({:?}); best {:.5} at epoch {}",
        log.epochs.len(),
        log.stop_reason,
        log.best_metric,
        log.best_epoch
    );
    Ok(())
}

// ---- infer ----------------------------------------------------------------

#[derive(Args)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    /// Directory holding the slide rasters; defaults to the manifest's
    /// directory.
    #[arg(long, value_name = "DIR")]
    pub rasters: Option<PathBuf>,

    /// Only this slide.
    #[arg(long, value_name = "ID")]
    pub slide: Option<String>,

    /// Per-class miss probability, comma separated; a single value applies
    /// to every class.
    #[arg(long, default_value = "0", value_name = "P[,P,...]")]
    pub miss_rate: String,

    /// Spurious detections per million square pixels of tile area.
    #[arg(long, default_value_t = 0.0)]
    pub fp_rate: f64,

    /// Box translation amplitude in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,

    /// Seeds the oracle's noise; defaults to the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value_t = 1024)]
    pub tile: i64,

    #[arg(long, default_value_t = 256)]
    pub overlap: i64,

    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,

    /// Output file, one JSON record per detection; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn infer(args: InferArgs, file: &FileConfig, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let base = match &args.rasters {
        Some(dir) => dir.clone(),
        None => args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };

    let classes = manifest.registry.len();
    let miss = parse_f64_list(&args.miss_rate)?;
    let miss_rate = match miss.len() {
        1 => vec![miss[0]; classes],
        n if n == classes => miss,
        n => bail!("--miss-rate needs 1 or {classes} values, got {n}"),
    };
    let seed = args.seed.or(file.run.seed).unwrap_or(manifest.seed);
    let det_cfg = OracleDetectorConfig {
        miss_rate,
        false_positive_rate: args.fp_rate / 1e6,
        jitter_px: args.jitter,
        confusion: None,
        fp_box_px: 24.0,
        seed,
    };
    let infer_cfg = InferConfig {
        tile_size: args.tile,
        overlap_px: args.overlap,
        nms_iou: args.nms_iou,
    };
    echo(
        "infer",
        json!({
            "manifest": args.manifest, "rasters": base, "slide": args.slide,
            "miss_rate": det_cfg.miss_rate, "fp_rate_per_mpx": args.fp_rate,
            "jitter_px": det_cfg.jitter_px, "seed": seed, "tile": infer_cfg.tile_size,
            "overlap": infer_cfg.overlap_px, "nms_iou": infer_cfg.nms_iou,
            "out": args.out, "jobs": jobs,
        }),
    );

    let detector = OracleDetector::new(det_cfg)?;
    let slides: Vec<_> = match &args.slide {
        Some(id) => {
            let slide = manifest
                .slides
                .iter()
                .find(|s| s.slide_id == *id)
                .with_context(|| format!("slide {id} is not in the manifest"))?;
            vec![slide]
        }
        None => manifest.slides.iter().collect(),
    };

    let mut all = Vec::new();
    let mut next_id = 1u64;
    for slide in slides {
        if slide.raster_source.is_none() && args.slide.is_none() {
            log::warn!("{}: no raster on disk, skipping", slide.slide_id);
            continue;
        }
        let raster = load_slide_raster(&base, slide)?;
        let mut dets = infer_slide(&detector, slide, &raster, &infer_cfg)?;
        // Ids restart per slide; renumber for one global stream.
        for d in &mut dets {
            d.id = next_id;
            next_id += 1;
        }
        log::info!("{}: {} detections", slide.slide_id, dets.len());
        all.extend(dets);
    }

    let mut w = out_writer(args.out.as_deref())?;
    write_detections(&mut w, &all, &manifest.registry)?;
    w.flush()?;
    Ok(())
}

// ---- eval -----------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    /// Ground truth: either a dataset manifest (every annotation on every
    /// slide counts) or a line-per-record ground-truth file.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,

    /// Detections, one JSON record per line.
    #[arg(long, value_name = "FILE")]
    pub dets: PathBuf,

    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,

    /// Also write the per-class table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

fn eval(args: EvalArgs, jobs: usize) -> Result<()> {
    if !(args.iou > 0.0 && args.iou <= 1.0) {
        bail!("--iou must be in (0, 1], got {}", args.iou);
    }
    echo(
        "eval",
        json!({
            "gt": args.gt, "dets": args.dets, "iou": args.iou,
            "csv": args.csv, "jobs": jobs,
        }),
    );

    let gt_text = fs::read_to_string(&args.gt)
        .with_context(|| format!("reading ground truth {}", args.gt.display()))?;
    let mut registry;
    let gts: Vec<GroundTruth>;
    if gt_text.trim_start().starts_with('{') {
        let manifest =
            manifest_from_json(&gt_text).with_context(|| format!("in {}", args.gt.display()))?;
        gts = manifest
            .slides
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(|a| GroundTruth::from_annotation(&s.slide_id, a))
            })
            .collect();
        registry = manifest.registry;
    } else {
        registry = ClassRegistry::canonical();
        gts = read_ground_truth(gt_text.as_bytes(), &mut registry)?;
    }

    let reader = BufReader::new(
        File::open(&args.dets).with_context(|| format!("opening {}", args.dets.display()))?,
    );
    let dets = read_detections(reader, &mut registry)?;

    let report = match_and_ap(&dets, &gts, args.iou);
    if let Some(path) = &args.csv {
        fs::write(path, report_to_csv(&report, &registry))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", report_to_json(&report, &registry));
    Ok(())
}

// ---- report ---------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Table layout: a JSON array of rows, each
    /// {"mode", "backbone", "batch_size", "eval"} where eval names an
    /// evaluation report produced by the eval subcommand, resolved
    /// relative to this file.
    #[arg(long, value_name = "FILE")]
    pub rows: PathBuf,

    /// Output file; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RowSpec {
    mode: String,
    backbone: String,
    batch_size: u64,
    eval: PathBuf,
}

#[derive(Deserialize)]
struct EvalFile {
    map: f64,
    classes: Vec<EvalFileClass>,
}

#[derive(Deserialize)]
struct EvalFileClass {
    class: String,
    ap: f64,
}

fn report(args: ReportArgs, jobs: usize) -> Result<()> {
    echo("report", json!({ "rows": args.rows, "out": args.out, "jobs": jobs }));

    let text = fs::read_to_string(&args.rows)
        .with_context(|| format!("reading {}", args.rows.display()))?;
    let rows: Vec<RowSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.rows.display()))?;
    if rows.is_empty() {
        bail!("{} holds no rows", args.rows.display());
    }

    let dir = args.rows.parent().unwrap_or(Path::new("."));
    let mut reports = Vec::new();
    for row in &rows {
        let path = if row.eval.is_absolute() { row.eval.clone() } else { dir.join(&row.eval) };
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading evaluation report {}", path.display()))?;
        let parsed: EvalFile = serde_json::from_str(&text)
            .with_context(|| format!("parsing evaluation report {}", path.display()))?;
        reports.push(parsed);
    }

    // Column order follows the first report; the rest must cover the same
    // classes or the rows would not be comparable.
    let labels: Vec<&str> = reports[0].classes.iter().map(|c| c.class.as_str()).collect();
    let mut out = String::from("mode,backbone,batch_size");
    for label in &labels {
        out.push(',');
        out.push_str(label);
    }
    out.push_str(",mean\n");
    for (row, rep) in rows.iter().zip(&reports) {
        let by_label: HashMap<&str, f64> =
            rep.classes.iter().map(|c| (c.class.as_str(), c.ap)).collect();
        out.push_str(&format!("{},{},{}", row.mode, row.backbone, row.batch_size));
        for label in &labels {
            let ap = by_label.get(label).with_context(|| {
                format!("{} is missing class {label}", row.eval.display())
            })?;
            out.push_str(&format!(",{ap:.2}"));
        }
        out.push_str(&format!(",{:.2}\n", rep.map));
    }

    let mut w = out_writer(args.out.as_deref())?;
    w.write_all(out.as_bytes())?;
    w.flush()?;
    Ok(())
}
