use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use stainseg::augment::{self, AugmentationPlan, FailurePolicy, OfflineMode, PlanFile, RNG_ALGORITHM};
use stainseg::experiment::{self, ExperimentMode, RunConfig, EFFECTIVE_CONFIG_FILE};
use stainseg::io::{self, DatasetManifest, ManifestEntry, Split};
use stainseg::metrics::{self, MetricsReport};
use stainseg::postprocess::{self, MarkerDepth, PostprocessParams};
use stainseg::predictor::PredictorHandle;
use stainseg::reference::{self, AnnotatedImage};
use stainseg::stain::{self, NormalizationParams};
use stainseg::synth::{self, FixtureSpec, StainThresholdPredictor};
use stainseg::tta::{self, ChannelLayout, DropPolicy, EnsembleSpec, EnsembleSpecFile, MorphTta, PadPolicy};

#[derive(Parser, Debug)]
#[command(name = "stainseg", version, about = "Stain-normalization pipeline for nuclei instance segmentation")]
struct Cli {
    /// Worker threads (0 = one per core). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pick per-organ reference images and write their stain profiles.
    SelectRefs(SelectRefsArgs),
    /// Normalize one image to a reference profile.
    Normalize(NormalizeArgs),
    /// Write an augmentation plan for non-deterministic normalization.
    AugmentPlan(AugmentPlanArgs),
    /// Materialize a normalized training set.
    AugmentApply(AugmentApplyArgs),
    /// Run the predictor on every image, optionally with TTSN.
    Infer(InferArgs),
    /// Turn probability and distance maps into instance labels.
    Postprocess(PostprocessArgs),
    /// Score instance labels against ground truth.
    Evaluate(EvaluateArgs),
    /// Run one experiment setup end to end.
    RunExperiment(RunExperimentArgs),
    /// Write the synthetic stain-shift dataset.
    MakeFixture(MakeFixtureArgs),
    /// Stain-threshold mock predictor: PNG in, two-channel F32M out.
    MockPredict(MockPredictArgs),
}

#[derive(Args, Debug, Serialize)]
struct NormalizationFlags {
    /// Transmitted light intensity.
    #[arg(long = "io", default_value_t = 255.0)]
    io: f64,
    /// OD threshold separating tissue from background.
    #[arg(long, default_value_t = 0.15)]
    beta: f64,
    /// Angle percentile for the extreme stain directions.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Saturation percentile used for scaling.
    #[arg(long, default_value_t = 99.0)]
    sat_percentile: f64,
}

impl NormalizationFlags {
    fn params(&self) -> NormalizationParams {
        NormalizationParams {
            io: self.io,
            beta: self.beta,
            alpha: self.alpha,
            sat_percentile: self.sat_percentile,
            ..NormalizationParams::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SelectRefsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    k_per_organ: usize,
    #[command(flatten)]
    norm: NormalizationFlags,
}

#[derive(Args, Debug, Serialize)]
struct NormalizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ref_profile: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    norm: NormalizationFlags,
}

#[derive(Args, Debug, Serialize)]
struct AugmentPlanArgs {
    /// Reference profile JSON files, in reference order.
    #[arg(long = "profile", required = true)]
    profiles: Vec<PathBuf>,
    #[arg(long, default_value_t = augment::DEFAULT_P_PASSTHROUGH)]
    p_passthrough: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum ApplyMode {
    /// Every image normalized to the plan's first reference.
    Replace,
    /// Originals plus copies normalized to the plan's first reference.
    Extend,
    /// One epoch of random draws from the plan.
    Sample,
}

#[derive(Args, Debug, Serialize)]
struct AugmentApplyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_enum)]
    mode: ApplyMode,
    #[arg(long)]
    out_dir: PathBuf,
    /// Epoch index for `--mode sample`.
    #[arg(long, default_value_t = 0)]
    epoch: u32,
    #[command(flatten)]
    norm: NormalizationFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum InferMode {
    Baseline,
    Ttsn,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `map-dir:<dir>` or `cmd:<argv template>`.
    #[arg(long)]
    predictor: String,
    #[arg(long, value_enum, default_value_t = InferMode::Baseline)]
    mode: InferMode,
    /// Ensemble JSON (as written by select-refs); required for `--mode ttsn`.
    #[arg(long)]
    ensemble_spec: Option<PathBuf>,
    /// Square pad side: a number, `auto` or `none`.
    #[arg(long, default_value = "auto")]
    pad: PadPolicy,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    probability_channel: usize,
    #[arg(long, default_value_t = 1)]
    distance_channel: usize,
    /// Drop failing variants and renormalize instead of aborting.
    #[arg(long)]
    drop_failed_variants: bool,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    norm: NormalizationFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn admits(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PostprocessArgs {
    /// Directory of two-channel `<id>.f32m` maps.
    #[arg(long)]
    maps_dir: PathBuf,
    /// JSON file with post-processing parameters; flags override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    prob_threshold: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Marker depth as a fraction of the distance range.
    #[arg(long, conflicts_with = "marker_h_abs")]
    marker_h: Option<f64>,
    /// Marker depth in distance units.
    #[arg(long)]
    marker_h_abs: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    opening_radius: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

impl PostprocessArgs {
    fn resolve(&self) -> Result<PostprocessParams, CliError> {
        let mut p = match &self.params {
            Some(path) => io::read_json(path).map_err(CliError::validation)?,
            None => PostprocessParams::default(),
        };
        if let Some(v) = self.prob_threshold {
            p.prob_threshold = v;
        }
        if let Some(v) = self.sigma {
            p.gaussian_sigma = v;
        }
        if let Some(v) = self.marker_h {
            p.marker_h = MarkerDepth::Relative(v);
        }
        if let Some(v) = self.marker_h_abs {
            p.marker_h = MarkerDepth::Absolute(v);
        }
        if let Some(v) = self.min_area {
            p.min_instance_area = v;
        }
        if let Some(v) = self.opening_radius {
            p.opening_radius = v;
        }
        p.validate().map_err(CliError::validation)?;
        Ok(p)
    }
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Directory of `<id>.png` instance labels.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_manifest: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Row name in the printed table.
    #[arg(long, default_value = "run")]
    name: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args, Debug, Serialize)]
struct RunExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ExperimentMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    pad: Option<PadPolicy>,
    #[arg(long)]
    predictor: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct MakeFixtureArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    organs: usize,
    #[arg(long, default_value_t = 1)]
    train_per_organ: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct MockPredictArgs {
    input: PathBuf,
    output: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        error!("{e}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            error!("{m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            error!("{m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::SelectRefs(a) => select_refs(&a),
        Command::Normalize(a) => normalize(&a),
        Command::AugmentPlan(a) => augment_plan(&a),
        Command::AugmentApply(a) => augment_apply(&a),
        Command::Infer(a) => infer(&a),
        Command::Postprocess(a) => postprocess_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::RunExperiment(a) => run_experiment(&a),
        Command::MakeFixture(a) => make_fixture(&a),
        Command::MockPredict(a) => mock_predict(&a),
    }
}

/// Create `dir` and record the invocation in it.
fn start_output(dir: &Path, command: &str, args: &impl Serialize) -> CliResult {
    io::create_dir(dir).map_err(CliError::runtime)?;
    #[derive(Serialize)]
    struct Effective<'a, T> {
        command: &'a str,
        version: &'a str,
        args: &'a T,
    }
    let effective = Effective { command, version: env!("CARGO_PKG_VERSION"), args };
    io::write_json(&dir.join(EFFECTIVE_CONFIG_FILE), &effective).map_err(CliError::runtime)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    io::load_manifest(path).map_err(CliError::validation)
}

fn validated_params(flags: &NormalizationFlags) -> Result<NormalizationParams, CliError> {
    let params = flags.params();
    params.validate().map_err(CliError::validation)?;
    Ok(params)
}

fn select_refs(a: &SelectRefsArgs) -> CliResult {
    let params = validated_params(&a.norm)?;
    let manifest = load_manifest(&a.manifest)?;
    let mut annotated = Vec::new();
    for e in manifest.split(Split::Train) {
        let (Some(organ), Some(mask)) = (&e.organ, &e.mask) else {
            return Err(CliError::Validation(format!("entry {} needs both organ and mask", e.id)));
        };
        annotated.push((e.id.clone(), organ.clone(), manifest.resolve(&e.image), manifest.resolve(mask)));
    }
    if annotated.is_empty() {
        return Err(CliError::Validation("manifest has no training entries".into()));
    }
    let annotated: Vec<AnnotatedImage> = annotated
        .into_par_iter()
        .map(|(id, organ, image, mask)| {
            Ok(AnnotatedImage { id, organ, image: io::read_rgb_png(&image)?, mask: io::read_label_png(&mask)? })
        })
        .collect::<Result<_, io::DataError>>()
        .map_err(CliError::runtime)?;
    start_output(&a.out_dir, "select-refs", a)?;
    let scores = annotated
        .iter()
        .map(reference::contrast_score)
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::runtime)?;
    io::write_json(&a.out_dir.join("scores.json"), &scores).map_err(CliError::runtime)?;
    let selected = reference::select_references(&annotated, a.k_per_organ).map_err(CliError::validation)?;
    let mut paths = Vec::new();
    for (img, score) in &selected {
        let profile =
            stain::build_reference_profile(&img.image, &img.id, &params).map_err(|e| CliError::Runtime(format!("{}: {e}", img.id)))?;
        let path = experiment::profile_path(&a.out_dir, &img.id);
        std::fs::write(&path, profile.to_json()).map_err(CliError::runtime)?;
        info!("{} ({}): contrast {:.3}", img.id, img.organ, score.score);
        paths.push(PathBuf::from(path.file_name().expect("file name")));
    }
    let selection: Vec<_> = selected.iter().map(|(_, s)| s).collect();
    io::write_json(&a.out_dir.join("selection.json"), &selection).map_err(CliError::runtime)?;
    let spec = EnsembleSpecFile {
        references: paths,
        weight_original: tta::WEIGHT_ORIGINAL,
        weight_per_reference: tta::WEIGHT_PER_REFERENCE,
        morphological_tta: MorphTta::default(),
    };
    io::write_json(&a.out_dir.join("ensemble.json"), &spec).map_err(CliError::runtime)
}

fn normalize(a: &NormalizeArgs) -> CliResult {
    let params = validated_params(&a.norm)?;
    let profile = augment::load_profile(&a.ref_profile).map_err(CliError::validation)?;
    let img = io::read_rgb_png(&a.input).map_err(CliError::validation)?;
    let out = stain::normalize_to_reference(&img, &profile, &params).map_err(CliError::runtime)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        io::create_dir(dir).map_err(CliError::runtime)?;
    }
    io::write_rgb_png(&a.out, &out).map_err(CliError::runtime)
}

fn augment_plan(a: &AugmentPlanArgs) -> CliResult {
    let profiles = a
        .profiles
        .iter()
        .map(|p| augment::load_profile(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::validation)?;
    AugmentationPlan::new(profiles, a.p_passthrough, a.seed).map_err(CliError::validation)?;
    let root = a.out.parent().unwrap_or(Path::new(""));
    let references = a.profiles.iter().map(|p| relative_to(p, root)).collect();
    let file = PlanFile { p_passthrough: a.p_passthrough, references, seed: a.seed, rng_algorithm: RNG_ALGORITHM.into() };
    if !root.as_os_str().is_empty() {
        io::create_dir(root).map_err(CliError::runtime)?;
    }
    io::write_json(&a.out, &file).map_err(CliError::runtime)
}

/// `path` expressed relative to `base` when both are absolute or both
/// relative; otherwise made absolute.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (path, base) = (abs(path), abs(base));
    let common = path.components().zip(base.components()).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in base.components().skip(common) {
        out.push("..");
    }
    for c in path.components().skip(common) {
        out.push(c);
    }
    out
}

fn augment_apply(a: &AugmentApplyArgs) -> CliResult {
    let params = validated_params(&a.norm)?;
    let manifest = load_manifest(&a.manifest)?;
    let (_, plan) = PlanFile::load(&a.plan).map_err(CliError::validation)?;
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    let items: Vec<(String, stainseg::RgbImage)> = entries
        .par_iter()
        .map(|e| Ok((e.id.clone(), io::read_rgb_png(&manifest.resolve(&e.image))?)))
        .collect::<Result<_, io::DataError>>()
        .map_err(CliError::runtime)?;
    start_output(&a.out_dir, "augment-apply", a)?;
    let (images, mut out_entries): (Vec<stainseg::RgbImage>, Vec<ManifestEntry>) = match a.mode {
        ApplyMode::Replace | ApplyMode::Extend => {
            let mode = if a.mode == ApplyMode::Replace { OfflineMode::Replace } else { OfflineMode::Extend };
            let reference = plan
                .references
                .first()
                .ok_or_else(|| CliError::Validation("plan has no references".into()))?;
            let images = augment::materialize_offline(&items, reference, mode, &params).map_err(CliError::runtime)?;
            let mut out: Vec<ManifestEntry> = entries.iter().map(|e| derived_entry(e, &e.id, &manifest)).collect();
            if mode == OfflineMode::Extend {
                let norm: Vec<ManifestEntry> =
                    entries.iter().map(|e| derived_entry(e, &format!("{}__norm", e.id), &manifest)).collect();
                out.extend(norm);
            }
            (images, out)
        }
        ApplyMode::Sample => {
            let out = augment::augment_epoch(&items, &plan, a.epoch, &params, FailurePolicy::Passthrough)
                .map_err(CliError::runtime)?;
            let draws: Vec<_> = out.iter().map(|x| (x.draw, x.fell_back)).collect();
            io::write_json(&a.out_dir.join("draws.json"), &draws).map_err(CliError::runtime)?;
            let entries = entries.iter().map(|e| derived_entry(e, &e.id, &manifest)).collect();
            (out.into_iter().map(|x| x.image).collect(), entries)
        }
    };
    for (img, e) in images.iter().zip(&mut out_entries) {
        io::write_rgb_png(&a.out_dir.join(&e.image), img).map_err(CliError::runtime)?;
    }
    let out = DatasetManifest {
        name: format!("{}-{:?}", manifest.name, a.mode).to_lowercase(),
        entries: out_entries,
        root: a.out_dir.clone(),
    };
    out.save(&a.out_dir.join("manifest.json")).map_err(CliError::runtime)?;
    info!("wrote {} images to {}", images.len(), a.out_dir.display());
    Ok(())
}

fn derived_entry(e: &ManifestEntry, id: &str, manifest: &DatasetManifest) -> ManifestEntry {
    let abs = |p: &Path| std::path::absolute(manifest.resolve(p)).unwrap_or_else(|_| manifest.resolve(p));
    ManifestEntry {
        id: id.to_string(),
        image: PathBuf::from(format!("{id}.png")),
        mask: e.mask.as_deref().map(abs),
        organ: e.organ.clone(),
        split: e.split,
    }
}

fn infer(a: &InferArgs) -> CliResult {
    let params = validated_params(&a.norm)?;
    let manifest = load_manifest(&a.manifest)?;
    let mut predictor = PredictorHandle::parse(&a.predictor)
        .ok_or_else(|| CliError::Validation(format!("predictor must be map-dir:<dir> or cmd:<template>, got {:?}", a.predictor)))?;
    predictor.probability_channel = a.probability_channel;
    predictor.distance_channel = a.distance_channel;
    let spec = match (a.mode, &a.ensemble_spec) {
        (InferMode::Baseline, _) => EnsembleSpec::baseline(),
        (InferMode::Ttsn, Some(path)) => EnsembleSpecFile::load(path).map_err(CliError::validation)?,
        (InferMode::Ttsn, None) => return Err(CliError::Validation("--mode ttsn needs --ensemble-spec".into())),
    };
    let layout = ChannelLayout { probability: a.probability_channel, distance: a.distance_channel };
    let policy = if a.drop_failed_variants { DropPolicy::DropAndRenormalize } else { DropPolicy::Fatal };
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| a.split.admits(e.split)).collect();
    start_output(&a.out_dir, "infer", a)?;
    entries.par_iter().try_for_each(|e| {
        let img = io::read_rgb_png(&manifest.resolve(&e.image)).map_err(CliError::runtime)?;
        let out = tta::run_ttsn(&e.id, &img, &predictor, layout, &spec, &params, a.pad, policy)
            .map_err(|err| CliError::Runtime(format!("{}: {err}", e.id)))?;
        for v in &out.dropped {
            warn!("{}: variant {v} dropped", e.id);
        }
        let both = stainseg::FloatMap::stack(&[&out.probability, &out.distance]).expect("same shape");
        io::write_f32m(&a.out_dir.join(format!("{}.f32m", e.id)), &both).map_err(CliError::runtime)
    })?;
    info!("wrote {} map files to {}", entries.len(), a.out_dir.display());
    Ok(())
}

fn postprocess_cmd(a: &PostprocessArgs) -> CliResult {
    let params = a.resolve()?;
    let mut maps: Vec<PathBuf> = std::fs::read_dir(&a.maps_dir)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.maps_dir.display())))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "f32m"))
        .collect();
    maps.sort();
    if maps.is_empty() {
        return Err(CliError::Validation(format!("no .f32m maps in {}", a.maps_dir.display())));
    }
    start_output(&a.out_dir, "postprocess", &(a, params))?;
    maps.par_iter().try_for_each(|path| {
        let id = path.file_stem().expect("stem").to_string_lossy();
        let map = io::read_f32m(path).map_err(CliError::runtime)?;
        if map.channels() < 2 {
            return Err(CliError::Runtime(format!("{id}: expected two channels, found {}", map.channels())));
        }
        let inst = postprocess::instances_from_maps(&map.channel(0), &map.channel(1), &params)
            .map_err(|e| CliError::Runtime(format!("{id}: {e}")))?;
        io::write_label_png(&a.out_dir.join(format!("{id}.png")), &inst).map_err(CliError::runtime)
    })
}

fn evaluate(a: &EvaluateArgs) -> CliResult {
    let manifest = load_manifest(&a.gt_manifest)?;
    let entries: Vec<&ManifestEntry> =
        manifest.entries.iter().filter(|e| a.split.admits(e.split) && e.mask.is_some()).collect();
    if entries.is_empty() {
        return Err(CliError::Validation("no manifest entries with masks in the chosen split".into()));
    }
    let per_image = entries
        .par_iter()
        .map(|e| {
            let gt = io::read_label_png(&manifest.resolve(e.mask.as_ref().expect("filtered"))).map_err(CliError::runtime)?;
            let pred = io::read_label_png(&a.pred_dir.join(format!("{}.png", e.id))).map_err(CliError::runtime)?;
            metrics::evaluate_pair(&e.id, &gt, &pred).map_err(|err| CliError::Runtime(format!("{}: {err}", e.id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::aggregate(per_image);
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        start_output(dir, "evaluate", a)?;
    }
    io::write_json(&a.report, &report).map_err(CliError::runtime)?;
    print!("{}", metrics::format_table(&[(a.name.clone(), &report)]));
    Ok(())
}

fn run_experiment(a: &RunExperimentArgs) -> CliResult {
    let mut config = RunConfig::load(&a.config).map_err(CliError::validation)?;
    // Relative paths in the config resolve against its directory.
    let base = a.config.parent().unwrap_or(Path::new(""));
    config.manifest = base.join(&config.manifest);
    config.out_dir = base.join(&config.out_dir);
    if let stainseg::predictor::PredictorSource::MapDirectory { dir } = &mut config.predictor.source {
        *dir = base.join(&*dir);
    }
    if let Some(m) = a.mode {
        config.mode = m;
        if m.samples() && config.seed.is_none() {
            config.seed = a.seed;
        }
    }
    if let Some(s) = a.seed {
        config.seed = Some(s);
    }
    if let Some(d) = &a.out_dir {
        config.out_dir = d.clone();
    }
    if let Some(p) = a.pad {
        config.pad = p;
    }
    if let Some(p) = &a.predictor {
        let handle = PredictorHandle::parse(p)
            .ok_or_else(|| CliError::Validation(format!("predictor must be map-dir:<dir> or cmd:<template>, got {p:?}")))?;
        config.predictor.source = handle.source;
    }
    let predictor = config.predictor.clone();
    let outcome = experiment::run_experiment(&config, &predictor).map_err(|e| {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    })?;
    print!("{}", metrics::format_table(&[(config.mode.label().to_string(), &outcome.report)]));
    Ok(())
}

fn make_fixture(a: &MakeFixtureArgs) -> CliResult {
    if a.size < 48 || a.organs == 0 || a.test == 0 {
        return Err(CliError::Validation("fixture needs size >= 48, at least one organ and one test image".into()));
    }
    let spec = FixtureSpec {
        organs: a.organs,
        train_per_organ: a.train_per_organ,
        test: a.test,
        size: a.size,
        seed: a.seed,
    };
    let manifest = synth::write_fixture(&a.out_dir, &spec).map_err(CliError::runtime)?;
    println!("{}", manifest.display());
    Ok(())
}

fn mock_predict(a: &MockPredictArgs) -> CliResult {
    let img = io::read_rgb_png(&a.input).map_err(CliError::validation)?;
    let map = StainThresholdPredictor::default().predict_map(&img);
    io::write_f32m(&a.output, &map).map_err(CliError::runtime)
}
