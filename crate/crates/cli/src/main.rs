use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use geobim_core::bim::{apply_transform, load_mesh, save_obj};
use geobim_core::eval::{classification_metrics, positioning_error, ConfusionMatrix, PositioningReport};
use geobim_core::instance::segment_instances;
use geobim_core::pc::{load_cloud, write_ply, CloudFormat, PlyEncoding};
use geobim_core::pipeline::{
    recover_base, run_pipeline, weak_label_properties, write_synthetic_job, ClassificationSummary, JobConfig, PositioningSummary,
};
use geobim_core::registration::register_model;
use geobim_core::semantic::{
    import_labels, parse_labels, parse_optional_labels, propagate_labels, write_labels, write_optional_labels,
};
use geobim_core::synth::{generate_synthetic_scene, SceneSpec};
use geobim_core::weak_labels::generate_weak_labels;
use geobim_core::{ObjectKind, PointCloud, SemanticClass};

/// Urban LiDAR instance segmentation and BIM geo-referencing.
#[derive(Debug, Parser)]
#[command(name = "geobim", version)]
struct Cli {
    /// Job configuration (JSON). Relative paths inside resolve against its
    /// directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic street scene with truth and a ready job config.
    Synth(SynthArgs),
    /// Ground filter and rule-based weak labels.
    Label(LabelArgs),
    /// Dense semantic labels propagated from weak labels.
    Segment(SegmentArgs),
    /// Graph-based instance segmentation of semantic labels.
    Instance(InstanceArgs),
    /// Register one BIM mesh to the LiDAR points of its instance.
    Match(MatchArgs),
    /// Classification metrics and positioning error.
    Evaluate(EvaluateArgs),
    /// Run every stage for a job config and write all reports.
    Pipeline,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    buildings: usize,
    #[arg(long, default_value_t = 3)]
    streetlights: usize,
    #[arg(long, default_value_t = 1)]
    traffic_signals: usize,
    #[arg(long, default_value_t = 0)]
    trees: usize,
    /// Gaussian noise σ in meters.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Multiplies every sampling density.
    #[arg(long, default_value_t = 1.0)]
    density_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    slope_deg: f64,
    /// Shift added to every written coordinate, as x,y,z.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0.0, 0.0, 0.0])]
    offset: Vec<f64>,
}

#[derive(Debug, Args)]
struct SceneArg {
    /// Scene cloud (.ply, .xyz or .txt); taken from the config when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[command(flatten)]
    scene: SceneArg,
    /// Manual labels overriding the rules: one class id per point, -1 for
    /// none.
    #[arg(long)]
    manual: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[command(flatten)]
    scene: SceneArg,
    /// Weak labels to propagate (one id per point, -1 for none) instead of
    /// running the labeler.
    #[arg(long)]
    weak: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InstanceArgs {
    #[command(flatten)]
    scene: SceneArg,
    /// Dense semantic labels, e.g. from an external classifier, instead of
    /// running label and segment.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Building,
    Streetlight,
    TrafficSignal,
}

impl From<KindArg> for ObjectKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Building => ObjectKind::Building,
            KindArg::Streetlight => ObjectKind::Streetlight,
            KindArg::TrafficSignal => ObjectKind::TrafficSignal,
        }
    }
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// BIM mesh in its local frame (.obj).
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// LiDAR points of the object's instance.
    #[arg(long)]
    lidar: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Truth labels, one class id per point.
    #[arg(long, requires = "predicted")]
    truth: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    predicted: Option<PathBuf>,
    /// Registered mesh (.obj) to score against `--lidar`.
    #[arg(long, requires_all = ["kind", "lidar"])]
    mesh: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    lidar: Option<PathBuf>,
    /// Largest corner-to-neighbor distance, meters.
    #[arg(long, default_value_t = 1.0)]
    max_distance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by ": ", skipping causes already spelled out by
/// the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Synth(a) => synth(&cli, a)?,
        Command::Label(a) => label(&cli, a)?,
        Command::Segment(a) => segment(&cli, a)?,
        Command::Instance(a) => instance(&cli, a)?,
        Command::Match(a) => matching(&cli, a)?,
        Command::Evaluate(a) => evaluate(&cli, a)?,
        Command::Pipeline => return pipeline(&cli),
    }
    Ok(ExitCode::SUCCESS)
}

/// The job from `--config` or `--scene`, with the global overrides applied.
fn job(cli: &Cli, scene: Option<&Path>) -> Result<JobConfig> {
    let mut config = match (&cli.config, scene) {
        (Some(path), _) => JobConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(scene)) => JobConfig::new(scene),
        (None, None) => bail!("either --config or --scene is required"),
    };
    if let Some(scene) = scene {
        config.scene = scene.to_path_buf();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    let format = CloudFormat::from_path(path)
        .with_context(|| format!("{}: expected a .ply, .xyz or .txt cloud", path.display()))?;
    load_cloud(path, format).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn scene_of(cli: &Cli, arg: &SceneArg) -> Result<(JobConfig, PointCloud)> {
    let config = job(cli, arg.scene.as_deref())?;
    config.ground.validate()?;
    config.labeler.validate()?;
    config.graph.validate()?;
    let cloud = read_cloud(&config.scene)?;
    fs::create_dir_all(&config.output_dir).with_context(|| format!("creating {}", config.output_dir.display()))?;
    Ok((config, cloud))
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn print_json(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        buildings: a.buildings,
        streetlights: a.streetlights,
        traffic_signals: a.traffic_signals,
        trees: a.trees,
        noise: a.noise,
        density_scale: a.density_scale,
        slope_deg: a.slope_deg,
        ..SceneSpec::default()
    };
    let [x, y, z] = a.offset[..] else {
        bail!("--offset takes three comma-separated values");
    };
    let seed = cli.seed.unwrap_or(geobim_core::pipeline::DEFAULT_SEED);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
    let scene = generate_synthetic_scene(&spec, seed)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let offset = geobim_core::Point3::new(x, y, z);
    write_synthetic_job(&scene, &out, &offset, seed)?;
    print_json(&json!({
        "points": scene.cloud.len(),
        "objects": scene.objects.len(),
        "job": out.join("job.json"),
    }));
    Ok(())
}

fn label(cli: &Cli, a: &LabelArgs) -> Result<()> {
    let (config, cloud) = scene_of(cli, &a.scene)?;
    let mut outcome = generate_weak_labels(&cloud, &config.ground, &config.labeler)?;
    if let Some(path) = &a.manual {
        let manual = parse_optional_labels(&read_text(path)?, cloud.len())?;
        outcome.labels.merge_manual(&manual)?;
    }
    let out = &config.output_dir;
    write_optional_labels(&out.join("weak_labels.txt"), &outcome.labels.classes())?;
    write_ply(
        &out.join("weak_labels.ply"),
        &cloud,
        PlyEncoding::BinaryLittleEndian,
        &weak_label_properties(&outcome.labels),
    )?;
    let counts = outcome.labels.class_counts();
    print_json(&json!({
        "points": cloud.len(),
        "ground_points": outcome.ground.ground.len(),
        "labeled_points": outcome.labels.labeled_count(),
        "streetlights": outcome.streetlights,
        "traffic_signals": outcome.traffic_signals,
        "class_counts": SemanticClass::ALL.iter().map(|c| (c.name().to_string(), json!(counts[c.index()]))).collect::<serde_json::Map<_, _>>(),
    }));
    Ok(())
}

fn truth_metrics(config: &JobConfig, cloud: &PointCloud, predicted: &[SemanticClass]) -> Result<serde_json::Value> {
    Ok(match &config.truth_labels {
        Some(path) => {
            let truth = import_labels(cloud, path)?;
            let m = classification_metrics(&ConfusionMatrix::from_labels(&truth, predicted)?)?;
            serde_json::to_value(ClassificationSummary::from(&m))?
        }
        None => serde_json::Value::Null,
    })
}

fn semantic_labels(config: &JobConfig, cloud: &PointCloud, weak: Option<&Path>) -> Result<Vec<SemanticClass>> {
    let weak = match weak {
        Some(path) => parse_optional_labels(&read_text(path)?, cloud.len())?,
        None => generate_weak_labels(cloud, &config.ground, &config.labeler)?.labels.classes(),
    };
    Ok(propagate_labels(cloud, &weak, config.propagation.k)?)
}

fn segment(cli: &Cli, a: &SegmentArgs) -> Result<()> {
    let (config, cloud) = scene_of(cli, &a.scene)?;
    let labels = semantic_labels(&config, &cloud, a.weak.as_deref())?;
    let out = &config.output_dir;
    write_labels(&out.join("labels.txt"), &labels)?;
    let mut labeled = cloud.clone();
    labeled.labels = Some(labels.clone());
    write_ply(&out.join("semantic.ply"), &labeled, PlyEncoding::BinaryLittleEndian, &[])?;
    print_json(&json!({
        "points": cloud.len(),
        "classification": truth_metrics(&config, &cloud, &labels)?,
    }));
    Ok(())
}

fn instance(cli: &Cli, a: &InstanceArgs) -> Result<()> {
    let (config, cloud) = scene_of(cli, &a.scene)?;
    let labels = match &a.labels {
        Some(path) => parse_labels(&read_text(path)?, cloud.len())?,
        None => semantic_labels(&config, &cloud, None)?,
    };
    let outcome = segment_instances(&cloud, &labels, &config.graph)?;
    let out = &config.output_dir;
    write_labels(&out.join("labels.txt"), &outcome.labels)?;
    let ids: String = outcome.instance_ids.iter().map(|id| format!("{id}\n")).collect();
    fs::write(out.join("instances.txt"), ids)?;
    let mut seg = cloud.clone();
    seg.labels = Some(outcome.labels.clone());
    seg.instance_ids = Some(outcome.instance_ids.clone());
    write_ply(&out.join("instances.ply"), &seg, PlyEncoding::BinaryLittleEndian, &[])?;
    let dir = out.join("instances");
    fs::create_dir_all(&dir)?;
    let ground: Vec<usize> = (0..cloud.len()).filter(|&i| outcome.labels[i] == SemanticClass::Ground).collect();
    for inst in &outcome.instances.instances {
        let mut indices = inst.indices.clone();
        indices.extend(recover_base(&cloud, &inst.indices, &ground, config.pairing.base_radius));
        let path = dir.join(format!("instance_{}.ply", inst.id));
        write_ply(&path, &cloud.select(&indices), PlyEncoding::BinaryLittleEndian, &[])?;
    }
    let centroid = |idx: &[usize]| {
        let c = idx.iter().map(|&i| cloud.points[i]).sum::<geobim_core::Point3>() / idx.len() as f64 + cloud.origin_offset;
        [c.x, c.y, c.z]
    };
    print_json(&json!({
        "points": cloud.len(),
        "primitives": outcome.graph.vertices.len(),
        "graph_edges": outcome.graph.edges.len(),
        "instances": outcome.instances.instances.iter().map(|i| json!({
            "id": i.id,
            "class": i.class,
            "points": i.indices.len(),
            "centroid": centroid(&i.indices),
        })).collect::<Vec<_>>(),
        "outlier_points": outcome.instances.outliers.len(),
        "classification": truth_metrics(&config, &cloud, &outcome.labels)?,
    }));
    Ok(())
}

fn matching(cli: &Cli, a: &MatchArgs) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => JobConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => JobConfig::new(&a.lidar),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let (coarse, fine) = config.match_params();
    coarse.validate()?;
    fine.validate()?;
    let kind = ObjectKind::from(a.kind);
    let model = load_mesh(&a.mesh, kind).with_context(|| format!("reading {}", a.mesh.display()))?;
    let lidar = read_cloud(&a.lidar)?;
    let registration = register_model(&model, &lidar, &coarse, &fine)?;
    let placed = apply_transform(&model, &registration.transform)?;
    let positioning = positioning_error(&placed, &lidar, fine.correspondence_max_distance)?;
    let out = cli.out.clone().unwrap_or(config.output_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_obj(&out.join(format!("{}.obj", model.name)), &placed, &lidar.origin_offset)?;
    let offset = lidar.origin_offset;
    let record = json!({
        "object_name": model.name,
        "kind": kind,
        "matrix": registration.transform.to_rows(),
        "origin_offset": [offset.x, offset.y, offset.z],
        "rmse_m": registration.fine.rmse,
        "coarse_score_m": registration.coarse.score,
        "positioning": PositioningSummary::from(&PositioningReport::new(vec![positioning])),
    });
    fs::write(out.join("transform.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    print_json(&record);
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    if a.truth.is_none() && a.mesh.is_none() {
        bail!("nothing to evaluate: pass --truth/--predicted and/or --mesh/--kind/--lidar");
    }
    let mut report = serde_json::Map::new();
    if let (Some(truth), Some(predicted)) = (&a.truth, &a.predicted) {
        let pred_text = read_text(predicted)?;
        let n = pred_text.lines().filter(|l| !l.trim().is_empty()).count();
        let predicted = parse_labels(&pred_text, n)?;
        let truth = parse_labels(&read_text(truth)?, n)?;
        let cm = ConfusionMatrix::from_labels(&truth, &predicted)?;
        let metrics = classification_metrics(&cm)?;
        report.insert("confusion_matrix".into(), serde_json::to_value(cm.counts)?);
        report.insert("classification".into(), serde_json::to_value(ClassificationSummary::from(&metrics))?);
    }
    if let (Some(mesh), Some(kind), Some(lidar)) = (&a.mesh, a.kind, &a.lidar) {
        let lidar = read_cloud(lidar)?;
        let mut model = load_mesh(mesh, kind.into()).with_context(|| format!("reading {}", mesh.display()))?;
        for v in &mut model.vertices {
            *v -= lidar.origin_offset;
        }
        let entry = positioning_error(&model, &lidar, a.max_distance)?;
        report.insert(
            "positioning".into(),
            serde_json::to_value(PositioningSummary::from(&PositioningReport::new(vec![entry])))?,
        );
    }
    let report = serde_json::Value::Object(report);
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    print_json(&report);
    Ok(())
}

fn pipeline(cli: &Cli) -> Result<ExitCode> {
    if cli.config.is_none() {
        bail!("pipeline requires --config");
    }
    let config = job(cli, None)?;
    let (outcome, artifacts) = run_pipeline(&config)?;
    for (spec, result) in &outcome.objects {
        if let Err(e) = result {
            eprintln!("object {} failed: {e}", spec.name);
        }
    }
    let _ = writeln!(std::io::stdout().lock(), "{}", artifacts.summary.display());
    Ok(if outcome.failed_objects() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
