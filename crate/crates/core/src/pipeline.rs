//! End-to-end orchestration: sample, featurize, train (or import), classify
//! at several scales, fuse, segment and vote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    self, ClassifyError, ClassifyOptions, ForestModel, ForestParams, TrainingSet,
};
use crate::exec::Execution;
use crate::features::{FeatureError, FeatureRecipe};
use crate::fusion::{self, FusionError};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::probmap::{self, ProbabilityError, ProbabilityMap};
use crate::raster::{self, ClassPalette, LabelMask, Raster, RasterError};
use crate::sampling::{self, Center, SamplingError};
use crate::segment::{self, RegionPartition, SegmentError, SegmentParams, SimilarityWeights, Stop};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// Average the scales, then vote once.
    #[default]
    FuseThenVote,
    /// Vote every scale separately, then combine the voted masks.
    VoteThenFuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Bands to keep, in order. Defaults to the first three of a 4-band
    /// input (dropping NIR) and to every band otherwise.
    pub keep_bands: Option<Vec<usize>>,
    pub requantize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            keep_bands: None,
            requantize: true,
        }
    }
}

/// Exactly one of `forest` and `probabilities` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub forest: Option<ForestParams>,
    pub probabilities: Option<PathBuf>,
}

pub enum ClassifierSource<'a> {
    Forest(&'a ForestParams),
    Probabilities(&'a Path),
}

impl ClassifierConfig {
    pub fn source(&self) -> Result<ClassifierSource<'_>> {
        match (&self.forest, &self.probabilities) {
            (Some(f), None) => Ok(ClassifierSource::Forest(f)),
            (None, Some(p)) => Ok(ClassifierSource::Probabilities(p)),
            (Some(_), Some(_)) => Err(PipelineError::Config(
                "classifier: specify either forest or probabilities, not both".into(),
            )),
            (None, None) => Err(PipelineError::Config(
                "classifier: one of forest or probabilities is required".into(),
            )),
        }
    }
}

fn default_samples_per_class() -> usize {
    200
}

fn default_scales() -> Vec<usize> {
    vec![56, 112, 224]
}

fn default_segmentation() -> SegmentParams {
    SegmentParams {
        k: 300.0,
        sigma: 0.8,
        min_size: 64,
        stop: Stop::MinSimilarity(2.0),
        weights: SimilarityWeights::default(),
    }
}

/// Everything except file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub features: FeatureRecipe,
    pub classifier: ClassifierConfig,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_scales")]
    pub scales: Vec<usize>,
    #[serde(default)]
    pub base_stride: Option<usize>,
    #[serde(default = "default_segmentation")]
    pub segmentation: SegmentParams,
    #[serde(default)]
    pub order: StageOrder,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        self.classifier.source()?;
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(PipelineError::Config(
                "scales must be non-empty and positive".into(),
            ));
        }
        if self.base_stride == Some(0) {
            return Err(PipelineError::Config("base_stride must be positive".into()));
        }
        if self.features.block_count() == 0 {
            return Err(PipelineError::Config(
                "features: no descriptor enabled".into(),
            ));
        }
        if self.features.patch_size < 3 {
            return Err(PipelineError::Config(
                "features: patch_size must be >= 3".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(PipelineError::Config(
                "samples_per_class must be >= 1".into(),
            ));
        }
        let s = &self.segmentation;
        if !(s.k > 0.0) || !(s.sigma >= 0.0) || s.min_size == 0 {
            return Err(PipelineError::Config(
                "segmentation: need k > 0, sigma >= 0, min_size >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn classify_options(&self) -> ClassifyOptions {
        ClassifyOptions {
            scales: self.scales.clone(),
            base_stride: self.base_stride,
            execution: self.execution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub raster: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    /// Mask the training centers are drawn from; defaults to `truth`.
    #[serde(default)]
    pub train_mask: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// RGB colors for categories 0..=C; the land-cover palette when unset.
    #[serde(default)]
    pub palette: Option<Vec<[u8; 3]>>,
    #[serde(flatten)]
    pub settings: PipelineSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.settings.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.raster);
        cfg.truth.as_mut().map(fix);
        cfg.train_mask.as_mut().map(fix);
        fix(&mut cfg.output_dir);
        cfg.settings.classifier.probabilities.as_mut().map(fix);
        Ok(cfg)
    }

    pub fn palette(&self) -> Result<ClassPalette> {
        match &self.palette {
            Some(colors) => {
                ClassPalette::new(colors.clone()).map_err(|e| PipelineError::Config(e.to_string()))
            }
            None => Ok(ClassPalette::land_cover()),
        }
    }
}

/// Loads a raster and applies band selection and requantization.
pub fn load_scene_raster(path: &Path, pre: &PreprocessConfig) -> Result<Raster<u8>> {
    let dynr = raster::load_raster(path)?;
    let keep = match &pre.keep_bands {
        Some(k) => k.clone(),
        None if dynr.bands() == 4 => vec![0, 1, 2],
        None => (0..dynr.bands()).collect(),
    };
    let out = raster::preprocess(&dynr, &keep, pre.requantize)?;
    out.into_u8().map_err(|_| {
        PipelineError::Config("16-bit input requires preprocess.requantize = true".into())
    })
}

/// One training row per (center, scale): the window at that scale around
/// the center, warped to the recipe's patch size.
pub fn training_set(
    r: &Raster<u8>,
    centers: &[Center],
    num_classes: usize,
    recipe: &FeatureRecipe,
    scales: &[usize],
    exec: Execution,
) -> Result<TrainingSet> {
    let rows = exec.try_map(centers.len() * scales.len(), |i| -> Result<_> {
        let c = &centers[i / scales.len()];
        let s = scales[i % scales.len()];
        let win = sampling::window_at((c.x, c.y), s, r.width(), r.height())?;
        Ok(recipe.featurize_window(r, &win)?)
    })?;
    let labels = (0..rows.len())
        .map(|i| centers[i / scales.len()].label)
        .collect();
    Ok(TrainingSet::from_vectors(&rows, labels, num_classes)?)
}

pub fn train_model(
    r: &Raster<u8>,
    mask: &LabelMask,
    settings: &PipelineSettings,
    params: &ForestParams,
) -> Result<ForestModel> {
    let centers = sampling::sample_centers(mask, settings.samples_per_class, settings.rng_seed)?;
    let ts = training_set(
        r,
        &centers,
        mask.num_classes() as usize,
        &settings.features,
        &settings.scales,
        settings.execution,
    )?;
    Ok(classify::train_forest(
        &ts,
        params,
        settings.rng_seed,
        settings.execution,
    )?)
}

/// Combines per-scale maps and region votes according to `order`.
pub fn fuse_and_vote(
    per_scale: &[ProbabilityMap],
    partition: &RegionPartition,
    order: StageOrder,
    exec: Execution,
) -> Result<(ProbabilityMap, LabelMask)> {
    let fused = fusion::sum_scales(per_scale)?;
    let voted = match order {
        StageOrder::FuseThenVote => fusion::vote_with(partition, &fused, exec)?,
        StageOrder::VoteThenFuse => {
            let onehots = per_scale
                .iter()
                .map(|pm| {
                    let m = fusion::vote_with(partition, pm, exec)?;
                    Ok(ProbabilityMap::one_hot(&m)?)
                })
                .collect::<Result<Vec<_>>>()?;
            fusion::rasterize(
                &fusion::sum_scales(&onehots)?,
                partition.width(),
                partition.height(),
            )?
        }
    };
    Ok((fused, voted))
}

/// In-memory results of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub per_scale: Vec<ProbabilityMap>,
    pub probabilities: ProbabilityMap,
    pub patch_pred: LabelMask,
    pub partition: RegionPartition,
    pub final_pred: LabelMask,
    pub model: Option<ForestModel>,
    pub patch_metrics: Option<MetricsReport>,
    pub metrics: Option<MetricsReport>,
}

/// Runs every stage on in-memory inputs. `probabilities` supplies an
/// externally computed grid when the classifier source is a file.
pub fn run_scene(
    r: &Raster<u8>,
    truth: Option<&LabelMask>,
    train_mask: Option<&LabelMask>,
    imported: Option<ProbabilityMap>,
    settings: &PipelineSettings,
) -> Result<PipelineRun> {
    settings.validate()?;
    let (per_scale, model) = match (settings.classifier.source()?, imported) {
        (ClassifierSource::Forest(params), _) => {
            let mask = train_mask.or(truth).ok_or_else(|| {
                PipelineError::Config("forest training needs train_mask or truth".into())
            })?;
            let model = train_model(r, mask, settings, params)?;
            let maps = classify::classify_raster_per_scale(
                r,
                &model,
                &settings.features,
                &settings.classify_options(),
            )?;
            (maps, Some(model))
        }
        (ClassifierSource::Probabilities(_), Some(pm)) => {
            pm.check_extent(r.width(), r.height())?;
            (vec![pm], None)
        }
        (ClassifierSource::Probabilities(p), None) => (
            vec![probmap::import_probabilities(
                p,
                Some((r.width(), r.height())),
            )?],
            None,
        ),
    };
    let partition = segment::segment(r, &settings.segmentation)?;
    let (probabilities, final_pred) =
        fuse_and_vote(&per_scale, &partition, settings.order, settings.execution)?;
    let patch_pred = fusion::rasterize(&probabilities, r.width(), r.height())?;
    let (patch_metrics, metrics) = match truth {
        Some(t) => (
            Some(metrics::evaluate(&patch_pred, t)?),
            Some(metrics::evaluate(&final_pred, t)?),
        ),
        None => (None, None),
    };
    Ok(PipelineRun {
        per_scale,
        probabilities,
        patch_pred,
        partition,
        final_pred,
        model,
        patch_metrics,
        metrics,
    })
}

/// Contents of `metrics.json`: the final (voted) report with the
/// patch-only report nested under `patch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub patch: MetricsReport,
}

pub const ARTIFACTS: [&str; 5] = [
    "patch_pred.png",
    "segments.png",
    "final_pred.png",
    "probabilities.pgrd",
    "metrics.json",
];

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the run's artifacts into `out_dir`; returns the files written.
/// On error, files already written by this call are removed.
pub fn write_artifacts(
    run: &PipelineRun,
    palette: &ClassPalette,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let result = (|| -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
            path: out_dir.to_path_buf(),
            source,
        })?;
        let p = out_dir.join("patch_pred.png");
        written.push(p.clone());
        raster::save_mask(&run.patch_pred, palette, &p)?;
        let p = out_dir.join("segments.png");
        written.push(p.clone());
        segment::save_region_map(&run.partition, &p)?;
        let p = out_dir.join("final_pred.png");
        written.push(p.clone());
        raster::save_mask(&run.final_pred, palette, &p)?;
        let p = out_dir.join("probabilities.pgrd");
        written.push(p.clone());
        written.push(probmap::sidecar_path(&p));
        probmap::export_probabilities(&run.probabilities, &p)?;
        if let (Some(m), Some(patch)) = (&run.metrics, &run.patch_metrics) {
            let p = out_dir.join("metrics.json");
            written.push(p.clone());
            write_json(
                &RunMetrics {
                    report: m.clone(),
                    patch: patch.clone(),
                },
                &p,
            )?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            remove_all(&written);
            Err(e)
        }
    }
}

pub fn remove_all(paths: &[PathBuf]) {
    for p in paths {
        let _ = std::fs::remove_file(p);
    }
}

/// Loads inputs named by `cfg`, runs every stage and writes the artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(PipelineRun, Vec<PathBuf>)> {
    let palette = cfg.palette()?;
    let r = load_scene_raster(&cfg.raster, &cfg.settings.preprocess)?;
    let truth = cfg
        .truth
        .as_ref()
        .map(|p| raster::load_mask(p, &palette))
        .transpose()?;
    let train = cfg
        .train_mask
        .as_ref()
        .map(|p| raster::load_mask(p, &palette))
        .transpose()?;
    let run = run_scene(&r, truth.as_ref(), train.as_ref(), None, &cfg.settings)?;
    let written = write_artifacts(&run, &palette, &cfg.output_dir)?;
    Ok((run, written))
}
