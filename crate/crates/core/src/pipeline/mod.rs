//! Job configuration and the end-to-end run: ground filter, weak labels,
//! propagation, instancing, per-object registration and reports.

mod config;
mod report;

pub use config::{
    JobConfig, MatchParams, ObjectSpec, PairingParams, PropagationParams, Selector, DEFAULT_BASE_RADIUS, DEFAULT_PAIRING_RADIUS,
    DEFAULT_SEED,
};
pub use report::{
    ClassRow, ClassificationSummary, DistanceRow, KindRow, ObjectSummary, PositioningSummary, StageSummary, Summary,
    TransformRecord,
};

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::bim::{apply_transform, load_mesh, save_obj, BimModel, ObjectKind, RigidTransform};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, positioning_error, ClassificationMetrics, ConfusionMatrix, PositioningEntry, PositioningReport};
use crate::instance::{segment_instances, InstanceOutcome, Instances};
use crate::pc::{load_cloud, write_ply, CloudFormat, ExtraProperty, PlyEncoding, Point3, PointCloud, SemanticClass, SpatialIndex};
use crate::registration::{register_model, Registration};
use crate::semantic::{import_labels, propagate_labels, write_labels};
use crate::synth::SyntheticScene;
use crate::weak_labels::{generate_weak_labels, WeakLabelOutcome, WeakLabels};

/// Scene and meshes read and checked before any computation.
#[derive(Debug, Clone)]
pub struct JobInputs {
    pub cloud: PointCloud,
    pub truth: Option<Vec<SemanticClass>>,
    pub models: Vec<BimModel>,
}

pub fn load_inputs(config: &JobConfig) -> Result<JobInputs> {
    config.validate()?;
    let format = CloudFormat::from_path(&config.scene)
        .ok_or_else(|| Error::Config(format!("unsupported scene format: {}", config.scene.display())))?;
    let cloud = load_cloud(&config.scene, format)?;
    let truth = config.truth_labels.as_deref().map(|p| import_labels(&cloud, p)).transpose()?;
    let models = config
        .objects
        .iter()
        .map(|o| {
            let mut m = load_mesh(&o.mesh, o.kind)?;
            m.name = o.name.clone();
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JobInputs { cloud, truth, models })
}

/// Semantic and instance segmentation of a scene.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub weak: WeakLabelOutcome,
    /// Per point, after propagation from the weak labels.
    pub propagated: Vec<SemanticClass>,
    pub instancing: InstanceOutcome,
}

impl Segmentation {
    /// Per point, after instance majority relabeling.
    pub fn labels(&self) -> &[SemanticClass] {
        &self.instancing.labels
    }

    pub fn instances(&self) -> &Instances {
        &self.instancing.instances
    }
}

pub fn segment_scene(cloud: &PointCloud, config: &JobConfig) -> Result<Segmentation> {
    let weak = generate_weak_labels(cloud, &config.ground, &config.labeler)?;
    info!(
        "weak labels: {} of {} points, {} streetlights, {} signals",
        weak.labels.labeled_count(),
        cloud.len(),
        weak.streetlights,
        weak.traffic_signals
    );
    let propagated = propagate_labels(cloud, &weak.labels.classes(), config.propagation.k)?;
    let instancing = segment_instances(cloud, &propagated, &config.graph)?;
    info!("instances: {}", instancing.instances.instances.len());
    Ok(Segmentation {
        weak,
        propagated,
        instancing,
    })
}

fn compatible(kind: ObjectKind, class: SemanticClass) -> bool {
    match kind {
        ObjectKind::Building => class == SemanticClass::Building,
        ObjectKind::Streetlight | ObjectKind::TrafficSignal => class == SemanticClass::PoleLike,
    }
}

/// Resolves a selector to an instance id. Hints are absolute scene
/// coordinates; distances are measured in plan view.
pub fn select_instance(
    cloud: &PointCloud,
    instances: &Instances,
    kind: ObjectKind,
    selector: &Selector,
    radius: f64,
) -> Result<u32> {
    match *selector {
        Selector::Instance(id) => instances
            .instances
            .iter()
            .any(|i| i.id == id)
            .then_some(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no instance with id {id}"))),
        Selector::Near(hint) => {
            let local = Point3::from(hint) - cloud.origin_offset;
            let mut best: Option<(f64, u32)> = None;
            for inst in instances.instances.iter().filter(|i| compatible(kind, i.class)) {
                let c = inst.indices.iter().map(|&i| cloud.points[i]).sum::<Point3>()
                    / inst.indices.len() as f64;
                let d = (c.x - local.x).hypot(c.y - local.y);
                if d <= radius && best.is_none_or(|b| d < b.0) {
                    best = Some((d, inst.id));
                }
            }
            best.map(|b| b.1).ok_or_else(|| {
                Error::InvalidArgument(format!("no {} instance within {radius} m of {hint:?}", kind.name()))
            })
        }
    }
}

/// Height above an instance's lowest point that counts as its base.
const BASE_BAND: f64 = 1.0;

/// Ground points that stand, in plan view, within `radius` of the base of
/// an instance. The ground filter takes the lowest part of every wall and
/// pole; these points give registration their bottom edge back.
pub fn recover_base(cloud: &PointCloud, instance: &[usize], ground: &[usize], radius: f64) -> Vec<usize> {
    if radius <= 0.0 || instance.is_empty() {
        return Vec::new();
    }
    let flat = |p: &Point3| Point3::new(p.x, p.y, 0.0);
    let min_z = instance.iter().map(|&i| cloud.points[i].z).fold(f64::INFINITY, f64::min);
    let base: Vec<Point3> = instance
        .iter()
        .map(|&i| cloud.points[i])
        .filter(|p| p.z <= min_z + BASE_BAND)
        .map(|p| flat(&p))
        .collect();
    let index = SpatialIndex::new(&base);
    ground
        .iter()
        .copied()
        .filter(|&g| {
            let p = cloud.points[g];
            p.z >= min_z - BASE_BAND && index.nearest(&flat(&p)).is_some_and(|n| n.dist2 <= radius * radius)
        })
        .collect()
}

/// A registered object with its accuracy report.
#[derive(Debug, Clone)]
pub struct ObjectResult {
    pub instance_id: u32,
    pub points: usize,
    pub registration: Registration,
    pub placed: BimModel,
    pub positioning: PositioningEntry,
}

pub fn register_object(
    cloud: &PointCloud,
    segmentation: &Segmentation,
    model: &BimModel,
    spec: &ObjectSpec,
    config: &JobConfig,
) -> Result<ObjectResult> {
    let id = select_instance(cloud, segmentation.instances(), model.kind, &spec.select, config.pairing.radius)?;
    let inst = segmentation.instances().instances.iter().find(|i| i.id == id).expect("selected instance exists");
    let mut indices = inst.indices.clone();
    indices.extend(recover_base(cloud, &inst.indices, &segmentation.weak.ground.ground, config.pairing.base_radius));
    let mut lidar = PointCloud::new(indices.iter().map(|&i| cloud.points[i]).collect());
    lidar.origin_offset = cloud.origin_offset;
    let (coarse, fine) = config.match_params();
    let registration = register_model(model, &lidar, &coarse, &fine)?;
    let placed = apply_transform(model, &registration.transform)?;
    let positioning = positioning_error(&placed, &lidar, fine.correspondence_max_distance)?;
    Ok(ObjectResult {
        instance_id: id,
        points: lidar.len(),
        registration,
        placed,
        positioning,
    })
}

/// Everything a run computed, before anything is written.
#[derive(Debug)]
pub struct RunOutcome {
    pub cloud: PointCloud,
    pub segmentation: Segmentation,
    /// Against the truth labels, before and after instance relabeling.
    pub pre_merge_metrics: Option<ClassificationMetrics>,
    pub metrics: Option<ClassificationMetrics>,
    /// In config order.
    pub objects: Vec<(ObjectSpec, std::result::Result<ObjectResult, String>)>,
    pub summary: Summary,
}

impl RunOutcome {
    pub fn failed_objects(&self) -> usize {
        self.objects.iter().filter(|o| o.1.is_err()).count()
    }

    pub fn positioning(&self) -> PositioningReport {
        PositioningReport::new(
            self.objects
                .iter()
                .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.positioning.clone()))
                .collect(),
        )
    }
}

/// Runs every stage without touching the file system beyond the inputs.
pub fn execute(config: &JobConfig, inputs: JobInputs) -> Result<RunOutcome> {
    let JobInputs { cloud, truth, models } = inputs;
    let segmentation = segment_scene(&cloud, config)?;
    let objects: Vec<_> = config
        .objects
        .par_iter()
        .zip(models.par_iter())
        .map(|(spec, model)| {
            let r = register_object(&cloud, &segmentation, model, spec, config).map_err(|e| e.to_string());
            match &r {
                Ok(o) => info!("{}: instance {} rmse {:.4}", spec.name, o.instance_id, o.registration.fine.rmse),
                Err(e) => log::warn!("{}: {e}", spec.name),
            }
            (spec.clone(), r)
        })
        .collect();
    let metrics_of = |pred: &[SemanticClass]| -> Result<Option<ClassificationMetrics>> {
        truth
            .as_deref()
            .map(|t| classification_metrics(&ConfusionMatrix::from_labels(t, pred)?))
            .transpose()
    };
    let pre_merge_metrics = metrics_of(&segmentation.propagated)?;
    let metrics = metrics_of(segmentation.labels())?;
    let mut outcome = RunOutcome {
        cloud,
        segmentation,
        pre_merge_metrics,
        metrics,
        objects,
        summary: Summary::default(),
    };
    outcome.summary = Summary::build(config, &outcome);
    Ok(outcome)
}

/// Files written by [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub summary: PathBuf,
    pub transforms: PathBuf,
    pub positioning: PathBuf,
    pub labels: PathBuf,
    pub segmentation: PathBuf,
    pub meshes: Vec<PathBuf>,
}

pub fn write_artifacts(out: &Path, outcome: &RunOutcome) -> Result<Artifacts> {
    let mesh_dir = out.join("objects");
    fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let mut meshes = Vec::new();
    let mut records = Vec::new();
    for (spec, result) in &outcome.objects {
        if let Ok(r) = result {
            let path = mesh_dir.join(format!("{}.obj", spec.name));
            save_obj(&path, &r.placed, &outcome.cloud.origin_offset)?;
            meshes.push(path);
            records.push(TransformRecord::new(spec, r, &outcome.cloud.origin_offset));
        }
    }
    let transforms = write("transforms.json", to_json(&records))?;
    let positioning = write("positioning.json", to_json(&outcome.positioning()))?;
    let summary = write("summary.json", outcome.summary.to_json())?;
    let labels = out.join("labels.txt");
    write_labels(&labels, outcome.segmentation.labels())?;
    let segmentation = out.join("segmentation.ply");
    let mut seg = outcome.cloud.clone();
    seg.labels = Some(outcome.segmentation.labels().to_vec());
    seg.instance_ids = Some(outcome.segmentation.instancing.instance_ids.clone());
    let extras = weak_label_properties(&outcome.segmentation.weak.labels);
    write_ply(&segmentation, &seg, PlyEncoding::BinaryLittleEndian, &extras)?;
    Ok(Artifacts {
        summary,
        transforms,
        positioning,
        labels,
        segmentation,
        meshes,
    })
}

/// PLY properties carrying each point's weak label (255 when unlabeled)
/// and the rule that assigned it (0 when unlabeled).
pub fn weak_label_properties(weak: &WeakLabels) -> [ExtraProperty; 2] {
    [
        ExtraProperty {
            name: "weak_label".into(),
            values: (0..weak.len()).map(|i| weak.get(i).map_or(255, |c| c.id() as u32)).collect(),
            byte: true,
        },
        ExtraProperty {
            name: "provenance".into(),
            values: (0..weak.len()).map(|i| weak.provenance(i).map_or(0, |p| p.id() as u32)).collect(),
            byte: true,
        },
    ]
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Validates, loads, runs and writes all artifacts into the output
/// directory. Per-object failures are recorded in the summary rather than
/// returned; check [`RunOutcome::failed_objects`].
pub fn run_pipeline(config: &JobConfig) -> Result<(RunOutcome, Artifacts)> {
    let inputs = load_inputs(config)?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let outcome = execute(config, inputs)?;
    let artifacts = write_artifacts(&config.output_dir, &outcome)?;
    Ok((outcome, artifacts))
}

/// Ground-truth placement of a synthetic object in absolute coordinates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TruthRecord {
    pub object_name: String,
    pub kind: ObjectKind,
    pub instance_id: u32,
    pub matrix: [[f64; 4]; 4],
}

/// Writes a synthetic scene as a ready-to-run job: `scene.ply` shifted by
/// `offset`, `truth_labels.txt`, local-frame meshes under `meshes/`,
/// `truth_transforms.json` and `job.json`, whose objects select their
/// instance by the placed mesh centroid. Returns the loaded job.
pub fn write_synthetic_job(scene: &SyntheticScene, dir: &Path, offset: &nalgebra::Vector3<f64>, seed: u64) -> Result<JobConfig> {
    let mesh_dir = dir.join("meshes");
    fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
    let mut cloud = scene.cloud.clone();
    cloud.origin_offset = *offset;
    cloud.labels = None;
    cloud.instance_ids = None;
    write_ply(&dir.join("scene.ply"), &cloud, PlyEncoding::BinaryLittleEndian, &[])?;
    write_labels(&dir.join("truth_labels.txt"), scene.truth_labels())?;
    let mut config = JobConfig::new("scene.ply");
    config.truth_labels = Some("truth_labels.txt".into());
    config.seed = seed;
    let mut truths = Vec::new();
    for o in &scene.objects {
        let mesh = PathBuf::from("meshes").join(format!("{}.obj", o.model.name));
        save_obj(&dir.join(&mesh), &o.model, &nalgebra::Vector3::zeros())?;
        let absolute = RigidTransform::from_translation(*offset).compose(&o.truth);
        let centroid = absolute.apply(&o.model.centroid_of_vertices());
        config.objects.push(ObjectSpec {
            name: o.model.name.clone(),
            mesh,
            kind: o.model.kind,
            select: Selector::Near(centroid.into()),
        });
        truths.push(TruthRecord {
            object_name: o.model.name.clone(),
            kind: o.model.kind,
            instance_id: o.instance_id,
            matrix: absolute.to_rows(),
        });
    }
    let job = dir.join("job.json");
    fs::write(&job, config.to_json() + "\n").map_err(|e| Error::io(&job, e))?;
    let truth = dir.join("truth_transforms.json");
    fs::write(&truth, to_json(&truths)).map_err(|e| Error::io(&truth, e))?;
    JobConfig::load(&job)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_recovery_takes_ground_under_the_base_only() {
        // Pole at the origin with an arm reaching over x = 2.
        let mut pts = vec![Point3::new(0.0, 0.0, 0.6), Point3::new(0.0, 0.0, 1.2), Point3::new(2.0, 0.0, 5.0)];
        let ground = [
            Point3::new(0.01, 0.0, 0.3),
            Point3::new(0.3, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(0.0, 0.02, 0.0),
        ];
        pts.extend(ground);
        let cloud = PointCloud::new(pts);
        let got = recover_base(&cloud, &[0, 1, 2], &[3, 4, 5, 6], 0.05);
        assert_eq!(got, vec![3, 6]);
        assert!(recover_base(&cloud, &[0, 1, 2], &[3, 4, 5, 6], 0.0).is_empty());
    }
}
