//! End-to-end runs of the five experiment setups: data preparation,
//! inference, post-processing and evaluation.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentationPlan, FailurePolicy, OfflineMode, PlanFile, RNG_ALGORITHM};
use crate::io::{self, DataError, DatasetManifest, ManifestEntry, Split};
use crate::metrics::{self, ImageMetrics, MetricsReport};
use crate::postprocess::{self, PostprocessParams};
use crate::predictor::Predictor;
use crate::raster::{FloatMap, InstanceLabelMap, RgbImage};
use crate::reference::{self, AnnotatedImage, ContrastScore};
use crate::stain::{self, NormalizationParams, ReferenceProfile};
use crate::tta::{self, ChannelLayout, DropPolicy, EnsembleSpec, MorphTta, PadPolicy};

pub const SCHEMA_VERSION: u32 = 1;
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Baseline,
    Offline,
    ExtendedOffline,
    Nondet,
    NondetTtsn,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 5] = [
        ExperimentMode::Baseline,
        ExperimentMode::Offline,
        ExperimentMode::ExtendedOffline,
        ExperimentMode::Nondet,
        ExperimentMode::NondetTtsn,
    ];

    /// Row label in result tables.
    pub fn label(self) -> &'static str {
        match self {
            ExperimentMode::Baseline => "Baseline",
            ExperimentMode::Offline => "Offline normalization",
            ExperimentMode::ExtendedOffline => "Extended offline normalization",
            ExperimentMode::Nondet => "Non-det. stain normalization",
            ExperimentMode::NondetTtsn => "Non-det. stain normalization + TTSN",
        }
    }

    pub fn samples(self) -> bool {
        matches!(self, ExperimentMode::Nondet | ExperimentMode::NondetTtsn)
    }
}

/// Inference ensemble settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub weight_original: f64,
    pub weight_per_reference: f64,
    pub k_per_organ: usize,
    pub rot90: bool,
    pub hflip: bool,
    pub drop_policy: DropPolicy,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            weight_original: tta::WEIGHT_ORIGINAL,
            weight_per_reference: tta::WEIGHT_PER_REFERENCE,
            k_per_organ: 1,
            rot90: false,
            hflip: false,
            drop_policy: DropPolicy::Fatal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: ExperimentMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub predictor: crate::predictor::PredictorHandle,
    #[serde(default)]
    pub normalization: NormalizationParams,
    #[serde(default)]
    pub postprocess: PostprocessParams,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default = "default_pad")]
    pub pad: PadPolicy,
    #[serde(default = "default_p_passthrough")]
    pub p_passthrough: f64,
    /// Augmented training epochs written to disk in the sampling modes.
    #[serde(default = "default_epochs")]
    pub epochs: u32,
}

fn default_pad() -> PadPolicy {
    PadPolicy::Auto
}

fn default_p_passthrough() -> f64 {
    augment::DEFAULT_P_PASSTHROUGH
}

fn default_epochs() -> u32 {
    1
}

impl RunConfig {
    pub fn new(
        mode: ExperimentMode,
        manifest: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
        predictor: crate::predictor::PredictorHandle,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            seed: mode.samples().then_some(0),
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            predictor,
            normalization: NormalizationParams::default(),
            postprocess: PostprocessParams::default(),
            ensemble: EnsembleConfig::default(),
            pad: default_pad(),
            p_passthrough: default_p_passthrough(),
            epochs: default_epochs(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        io::read_json(path).map_err(ExperimentError::Config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.mode.samples() && self.seed.is_none() {
            return bad(format!("mode {:?} samples and needs a seed", self.mode));
        }
        if self.ensemble.k_per_organ == 0 {
            return bad("k_per_organ must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_passthrough) {
            return bad(format!("p_passthrough must lie in [0, 1], got {}", self.p_passthrough));
        }
        self.normalization.validate().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.postprocess.validate().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.ensemble_spec(Vec::new()).validate().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }

    fn ensemble_spec(&self, references: Vec<ReferenceProfile>) -> EnsembleSpec {
        EnsembleSpec {
            references,
            weight_original: self.ensemble.weight_original,
            weight_per_reference: self.ensemble.weight_per_reference,
            morphological_tta: MorphTta { rot90: self.ensemble.rot90, hflip: self.ensemble.hflip },
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cannot read config: {0}")]
    Config(DataError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl ExperimentError {
    fn stage(stage: &'static str) -> impl Fn(String) -> ExperimentError {
        move |message| ExperimentError::Stage { stage, message }
    }

    /// Validation problems, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::InvalidConfig(_) | ExperimentError::Config(_))
    }
}

/// Result of one run: the table row plus what was dropped along the way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub mode: ExperimentMode,
    pub report: MetricsReport,
    pub references: Vec<String>,
    pub dropped_variants: Vec<String>,
}

struct Loaded {
    id: String,
    organ: Option<String>,
    image: RgbImage,
    mask: Option<InstanceLabelMap>,
}

fn load_entries<'a>(
    manifest: &DatasetManifest,
    entries: impl Iterator<Item = &'a ManifestEntry>,
) -> Result<Vec<Loaded>, DataError> {
    let entries: Vec<&ManifestEntry> = entries.collect();
    entries
        .par_iter()
        .map(|e| {
            let image = io::read_rgb_png(&manifest.resolve(&e.image))?;
            let mask = e.mask.as_ref().map(|m| io::read_label_png(&manifest.resolve(m))).transpose()?;
            Ok(Loaded { id: e.id.clone(), organ: e.organ.clone(), image, mask })
        })
        .collect()
}

/// Run one experiment with the given predictor. The predictor in `config` is
/// recorded in the effective config but not used here.
pub fn run_experiment(config: &RunConfig, predictor: &dyn Predictor) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let manifest = io::load_manifest(&config.manifest).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    let out = &config.out_dir;
    let data_err = ExperimentError::stage("setup");
    io::create_dir(out).map_err(|e| data_err(e.to_string()))?;
    io::write_json(&out.join(EFFECTIVE_CONFIG_FILE), config).map_err(|e| data_err(e.to_string()))?;
    info!("{}: {}", config.mode.label(), out.display());

    let load = ExperimentError::stage("load");
    let train = load_entries(&manifest, manifest.split(Split::Train)).map_err(|e| load(e.to_string()))?;
    let test = load_entries(&manifest, manifest.split(Split::Test)).map_err(|e| load(e.to_string()))?;

    let references = if config.mode == ExperimentMode::Baseline {
        Vec::new()
    } else {
        select_stage(config, &train)?
    };
    prepare_training_data(config, &train, &references)?;
    let inference_refs = match config.mode {
        ExperimentMode::Baseline | ExperimentMode::Nondet => Vec::new(),
        ExperimentMode::Offline | ExperimentMode::ExtendedOffline => references[..1].to_vec(),
        ExperimentMode::NondetTtsn => references.clone(),
    };
    let (maps, dropped) = infer_stage(config, &test, &inference_refs, predictor)?;
    let report = evaluate_stage(config, &test, &maps)?;
    let outcome = ExperimentOutcome {
        mode: config.mode,
        report,
        references: inference_refs.iter().map(|r| r.source_id.clone()).collect(),
        dropped_variants: dropped,
    };
    let write = ExperimentError::stage("report");
    io::write_json(&out.join("metrics.json"), &outcome).map_err(|e| write(e.to_string()))?;
    let table = metrics::format_table(&[(config.mode.label().to_string(), &outcome.report)]);
    std::fs::write(out.join("table.txt"), table).map_err(|e| write(e.to_string()))?;
    Ok(outcome)
}

/// Per-organ references ordered by descending contrast, so the first is the
/// single best image for the single-reference modes.
fn select_stage(config: &RunConfig, train: &[Loaded]) -> Result<Vec<ReferenceProfile>, ExperimentError> {
    let fail = ExperimentError::stage("select-refs");
    let annotated: Vec<AnnotatedImage> = train
        .iter()
        .filter_map(|t| {
            Some(AnnotatedImage {
                id: t.id.clone(),
                organ: t.organ.clone()?,
                image: t.image.clone(),
                mask: t.mask.clone()?,
            })
        })
        .collect();
    if annotated.is_empty() {
        return Err(fail("no training entries with both organ and mask".into()));
    }
    let mut selected =
        reference::select_references(&annotated, config.ensemble.k_per_organ).map_err(|e| fail(e.to_string()))?;
    selected.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then_with(|| a.1.id.cmp(&b.1.id)));
    let dir = config.out_dir.join("references");
    io::create_dir(&dir).map_err(|e| fail(e.to_string()))?;
    let scores: Vec<&ContrastScore> = selected.iter().map(|(_, s)| s).collect();
    io::write_json(&dir.join("scores.json"), &scores).map_err(|e| fail(e.to_string()))?;
    let mut profiles = Vec::with_capacity(selected.len());
    for (img, _) in &selected {
        let profile = stain::build_reference_profile(&img.image, &img.id, &config.normalization)
            .map_err(|e| fail(format!("{}: {e}", img.id)))?;
        std::fs::write(profile_path(&dir, &img.id), profile.to_json()).map_err(|e| fail(e.to_string()))?;
        profiles.push(profile);
    }
    Ok(profiles)
}

pub fn profile_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.profile.json"))
}

/// Write the training set the external trainer would consume.
fn prepare_training_data(
    config: &RunConfig,
    train: &[Loaded],
    references: &[ReferenceProfile],
) -> Result<(), ExperimentError> {
    let fail = ExperimentError::stage("prepare");
    let dir = config.out_dir.join("train");
    let items: Vec<(String, RgbImage)> = train.iter().map(|t| (t.id.clone(), t.image.clone())).collect();
    let write_all = |sub: &Path, names: &[String], images: &[RgbImage]| -> Result<(), ExperimentError> {
        io::create_dir(sub).map_err(|e| fail(e.to_string()))?;
        names
            .par_iter()
            .zip(images)
            .try_for_each(|(name, img)| io::write_rgb_png(&sub.join(format!("{name}.png")), img))
            .map_err(|e| fail(e.to_string()))
    };
    match config.mode {
        ExperimentMode::Baseline => Ok(()),
        ExperimentMode::Offline | ExperimentMode::ExtendedOffline => {
            let mode = if config.mode == ExperimentMode::Offline { OfflineMode::Replace } else { OfflineMode::Extend };
            let images = augment::materialize_offline(&items, &references[0], mode, &config.normalization)
                .map_err(|e| fail(e.to_string()))?;
            let mut names: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
            if mode == OfflineMode::Extend {
                names = names.iter().cloned().chain(names.iter().map(|n| format!("{n}__norm"))).collect();
            }
            write_all(&dir, &names, &images)
        }
        ExperimentMode::Nondet | ExperimentMode::NondetTtsn => {
            let seed = config.seed.expect("validated");
            let plan = AugmentationPlan::new(references.to_vec(), config.p_passthrough, seed)
                .map_err(|e| fail(e.to_string()))?;
            let plan_file = PlanFile {
                p_passthrough: config.p_passthrough,
                references: references
                    .iter()
                    .map(|r| profile_path(Path::new("../references"), &r.source_id))
                    .collect(),
                seed,
                rng_algorithm: RNG_ALGORITHM.to_string(),
            };
            io::create_dir(&dir).map_err(|e| fail(e.to_string()))?;
            io::write_json(&dir.join("plan.json"), &plan_file).map_err(|e| fail(e.to_string()))?;
            let names: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
            for epoch in 0..config.epochs {
                let out = augment::augment_epoch(&items, &plan, epoch, &config.normalization, FailurePolicy::Passthrough)
                    .map_err(|e| fail(e.to_string()))?;
                let sub = dir.join(format!("epoch_{epoch:03}"));
                let images: Vec<RgbImage> = out.iter().map(|a| a.image.clone()).collect();
                write_all(&sub, &names, &images)?;
                let draws: Vec<_> = out.iter().map(|a| (a.draw, a.fell_back)).collect();
                io::write_json(&sub.join("draws.json"), &draws).map_err(|e| fail(e.to_string()))?;
            }
            Ok(())
        }
    }
}

type Maps = Vec<(FloatMap, FloatMap)>;

fn infer_stage(
    config: &RunConfig,
    test: &[Loaded],
    references: &[ReferenceProfile],
    predictor: &dyn Predictor,
) -> Result<(Maps, Vec<String>), ExperimentError> {
    let fail = ExperimentError::stage("infer");
    let layout = ChannelLayout {
        probability: config.predictor.probability_channel,
        distance: config.predictor.distance_channel,
    };
    let spec = match config.mode {
        ExperimentMode::NondetTtsn => config.ensemble_spec(references.to_vec()),
        // Raw and normalized predictions averaged with equal weight.
        ExperimentMode::ExtendedOffline => EnsembleSpec {
            references: references.to_vec(),
            weight_original: 1.0,
            weight_per_reference: 1.0,
            morphological_tta: MorphTta::default(),
        },
        _ => EnsembleSpec::baseline(),
    };
    let dir = config.out_dir.join("maps");
    io::create_dir(&dir).map_err(|e| fail(e.to_string()))?;
    let results: Vec<Result<(FloatMap, FloatMap, Vec<String>), ExperimentError>> = test
        .par_iter()
        .map(|t| {
            let mut dropped = Vec::new();
            let input = if config.mode == ExperimentMode::Offline {
                match stain::normalize_to_reference(&t.image, &references[0], &config.normalization) {
                    Ok(img) => img,
                    Err(e) => {
                        warn!("{}: normalization failed ({e}); using the raw image", t.id);
                        dropped.push(format!("{}:v1", t.id));
                        t.image.clone()
                    }
                }
            } else {
                t.image.clone()
            };
            let policy = if config.mode == ExperimentMode::Offline { DropPolicy::Fatal } else { config.ensemble.drop_policy };
            let out = tta::run_ttsn(&t.id, &input, predictor, layout, &spec, &config.normalization, config.pad, policy)
                .map_err(|e| fail(format!("{}: {e}", t.id)))?;
            dropped.extend(out.dropped.iter().map(|v| format!("{}:{v}", t.id)));
            let both = FloatMap::stack(&[&out.probability, &out.distance]).expect("same shape");
            io::write_f32m(&dir.join(format!("{}.f32m", t.id)), &both).map_err(|e| fail(e.to_string()))?;
            Ok((out.probability, out.distance, dropped))
        })
        .collect();
    let mut maps = Vec::with_capacity(results.len());
    let mut dropped = Vec::new();
    for r in results {
        let (p, d, dr) = r?;
        maps.push((p, d));
        dropped.extend(dr);
    }
    Ok((maps, dropped))
}

fn evaluate_stage(config: &RunConfig, test: &[Loaded], maps: &Maps) -> Result<MetricsReport, ExperimentError> {
    let fail = ExperimentError::stage("postprocess");
    let dir = config.out_dir.join("instances");
    io::create_dir(&dir).map_err(|e| fail(e.to_string()))?;
    let per_image: Vec<Result<Option<ImageMetrics>, ExperimentError>> = test
        .par_iter()
        .zip(maps)
        .map(|(t, (p, d))| {
            let inst = postprocess::instances_from_maps(p, d, &config.postprocess)
                .map_err(|e| fail(format!("{}: {e}", t.id)))?;
            io::write_label_png(&dir.join(format!("{}.png", t.id)), &inst).map_err(|e| fail(e.to_string()))?;
            t.mask
                .as_ref()
                .map(|gt| {
                    metrics::evaluate_pair(&t.id, gt, &inst).map_err(|e| ExperimentError::Stage {
                        stage: "evaluate",
                        message: format!("{}: {e}", t.id),
                    })
                })
                .transpose()
        })
        .collect();
    let scored: Vec<ImageMetrics> = per_image.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(ExperimentError::Stage { stage: "evaluate", message: "no test entries with masks".into() });
    }
    Ok(MetricsReport::aggregate(scored))
}

/// Run with a dedicated thread pool of `jobs` threads (0 = rayon default).
pub fn run_with_jobs(
    config: &RunConfig,
    predictor: &dyn Predictor,
    jobs: usize,
) -> Result<ExperimentOutcome, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::Stage { stage: "setup", message: e.to_string() })?;
    pool.install(|| run_experiment(config, predictor))
}
