use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use landcover::classify::{self, ForestModel};
use landcover::fusion;
use landcover::metrics::{self, MetricsError};
use landcover::pipeline::{self, PipelineConfig, PipelineError};
use landcover::probmap;
use landcover::raster::{self, ClassPalette, DynRaster, LabelMask};
use landcover::sampling;
use landcover::segment;
use landcover::synthgen::{self, SceneSpec, SynthError};

#[derive(Parser)]
#[command(
    name = "landcover",
    version,
    about = "Land-cover mapping from multispectral rasters"
)]
struct Cli {
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (scene.tiff, truth.png).
    Synth {
        /// Scene spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Draw training centers (centers.json).
    Sample(Common),
    /// Train the random forest (model.json).
    Train(Common),
    /// Classify the raster with a trained model (probabilities.pgrd, patch_pred.png).
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Segment the raster into regions (segments.png).
    Segment(Common),
    /// Relabel every region with its majority class (final_pred.png).
    Vote {
        #[arg(long)]
        probabilities: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Pipeline config supplying the palette.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print OA, AA, kappa and the confusion matrix as JSON.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every stage and write all artifacts.
    Pipeline(Common),
}

/// Exit status 2 for usage and configuration problems, 1 for everything else.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    raster::RasterError,
    sampling::SamplingError,
    classify::ClassifyError,
    probmap::ProbabilityError,
    segment::SegmentError,
    fusion::FusionError,
    std::io::Error
);

type Outcome = Result<(), Failure>;

struct Log {
    quiet: bool,
}

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.settings.rng_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn palette_from(config: Option<&Path>) -> Result<ClassPalette, Failure> {
    match config {
        Some(p) => Ok(PipelineConfig::load(p)?.palette()?),
        None => Ok(ClassPalette::land_cover()),
    }
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn training_mask(cfg: &PipelineConfig, palette: &ClassPalette) -> Result<LabelMask, Failure> {
    let path = cfg
        .train_mask
        .as_ref()
        .or(cfg.truth.as_ref())
        .ok_or_else(|| Failure::Usage("config needs train_mask or truth for sampling".into()))?;
    Ok(raster::load_mask(path, palette)?)
}

fn cmd_synth(config: &Path, seed: Option<u64>, out: &Path, log: &Log) -> Outcome {
    let mut spec = SceneSpec::load(config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    let (r, truth) = synthgen::generate(&spec, Default::default()).map_err(|e| match e {
        SynthError::InvalidSpec(_) | SynthError::Unreadable { .. } => Failure::Usage(e.to_string()),
    })?;
    create_dir(out)?;
    raster::save_tiff(&DynRaster::from(r), out.join("scene.tiff"))?;
    raster::save_mask(&truth, &ClassPalette::land_cover(), out.join("truth.png"))?;
    log.info(format!(
        "wrote {}x{} scene to {}",
        spec.width,
        spec.height,
        out.display()
    ));
    Ok(())
}

fn cmd_sample(common: &Common, log: &Log) -> Outcome {
    let cfg = load_config(common)?;
    let mask = training_mask(&cfg, &cfg.palette()?)?;
    let centers =
        sampling::sample_centers(&mask, cfg.settings.samples_per_class, cfg.settings.rng_seed)?;
    create_dir(&cfg.output_dir)?;
    write_json(&centers, &cfg.output_dir.join("centers.json"))?;
    log.info(format!("sampled {} centers", centers.len()));
    Ok(())
}

fn cmd_train(common: &Common, log: &Log) -> Outcome {
    let cfg = load_config(common)?;
    let params = match cfg.settings.classifier.source()? {
        pipeline::ClassifierSource::Forest(p) => p.clone(),
        pipeline::ClassifierSource::Probabilities(_) => {
            return Err(Failure::Usage(
                "train needs classifier.forest in the config".into(),
            ))
        }
    };
    let r = pipeline::load_scene_raster(&cfg.raster, &cfg.settings.preprocess)?;
    let mask = training_mask(&cfg, &cfg.palette()?)?;
    let model = pipeline::train_model(&r, &mask, &cfg.settings, &params)?;
    create_dir(&cfg.output_dir)?;
    write_json(&model, &cfg.output_dir.join("model.json"))?;
    log.info(format!("trained {} trees", model.trees().len()));
    Ok(())
}

fn cmd_classify(common: &Common, model: &Path, log: &Log) -> Outcome {
    let cfg = load_config(common)?;
    let text = std::fs::read_to_string(model)
        .map_err(|e| Failure::Usage(format!("{}: {e}", model.display())))?;
    let model: ForestModel = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", model.display())))?;
    let r = pipeline::load_scene_raster(&cfg.raster, &cfg.settings.preprocess)?;
    let per_scale = classify::classify_raster_per_scale(
        &r,
        &model,
        &cfg.settings.features,
        &cfg.settings.classify_options(),
    )?;
    let pm = fusion::sum_scales(&per_scale)?;
    create_dir(&cfg.output_dir)?;
    probmap::export_probabilities(&pm, cfg.output_dir.join("probabilities.pgrd"))?;
    let patch = fusion::rasterize(&pm, r.width(), r.height())?;
    raster::save_mask(
        &patch,
        &cfg.palette()?,
        cfg.output_dir.join("patch_pred.png"),
    )?;
    log.info(format!("classified {}x{} cells", pm.grid_w(), pm.grid_h()));
    Ok(())
}

fn cmd_segment(common: &Common, log: &Log) -> Outcome {
    let cfg = load_config(common)?;
    let r = pipeline::load_scene_raster(&cfg.raster, &cfg.settings.preprocess)?;
    let part = segment::segment(&r, &cfg.settings.segmentation)?;
    create_dir(&cfg.output_dir)?;
    segment::save_region_map(&part, cfg.output_dir.join("segments.png"))?;
    log.info(format!("{} regions", part.num_regions()));
    Ok(())
}

fn cmd_vote(
    probabilities: &Path,
    segments: &Path,
    out: &Path,
    config: Option<&Path>,
    log: &Log,
) -> Outcome {
    let palette = palette_from(config)?;
    let part = segment::load_region_map(segments)?;
    let pm = probmap::import_probabilities(probabilities, Some((part.width(), part.height())))?;
    let voted = fusion::vote(&part, &pm)?;
    create_dir(out)?;
    raster::save_mask(&voted, &palette, out.join("final_pred.png"))?;
    log.info(format!("voted over {} regions", part.num_regions()));
    Ok(())
}

fn cmd_evaluate(pred: &Path, truth: &Path, config: Option<&Path>) -> Outcome {
    let palette = palette_from(config)?;
    let pred = raster::load_mask(pred, &palette)?;
    let truth = raster::load_mask(truth, &palette)?;
    let report = metrics::evaluate(&pred, &truth)
        .map_err(|e: MetricsError| Failure::Usage(e.to_string()))?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

fn cmd_pipeline(common: &Common, log: &Log) -> Outcome {
    let cfg = load_config(common)?;
    log.info(format!("running pipeline from {}", common.config.display()));
    let (run, written) = pipeline::run_pipeline(&cfg)?;
    if let Some(m) = &run.metrics {
        log.info(format!(
            "OA {:.4}  AA {:.4}  kappa {:.4}",
            m.oa, m.aa, m.kappa
        ));
    }
    log.info(format!(
        "wrote {} files to {}",
        written.len(),
        cfg.output_dir.display()
    ));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = Log { quiet: cli.quiet };
    let outcome = match &cli.command {
        Command::Synth { config, seed, out } => cmd_synth(config, *seed, out, &log),
        Command::Sample(c) => cmd_sample(c, &log),
        Command::Train(c) => cmd_train(c, &log),
        Command::Classify { common, model } => cmd_classify(common, model, &log),
        Command::Segment(c) => cmd_segment(c, &log),
        Command::Vote {
            probabilities,
            segments,
            out,
            config,
        } => cmd_vote(probabilities, segments, out, config.as_deref(), &log),
        Command::Evaluate {
            pred,
            truth,
            config,
        } => cmd_evaluate(pred, truth, config.as_deref()),
        Command::Pipeline(c) => cmd_pipeline(c, &log),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
