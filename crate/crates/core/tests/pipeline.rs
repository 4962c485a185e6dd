use std::fs;

use geobim_core::pipeline::{run_pipeline, write_synthetic_job, JobConfig, TruthRecord};
use geobim_core::synth::{generate_synthetic_scene, SceneSpec};
use geobim_core::{Error, ObjectKind, RigidTransform};
use nalgebra::Vector3;

#[test]
fn synthetic_job_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_synthetic_scene(&SceneSpec::default(), 42).unwrap();
    let offset = Vector3::new(835_000.0, 815_000.0, 5.0);
    let config = write_synthetic_job(&scene, dir.path(), &offset, 42).unwrap();
    let (outcome, artifacts) = run_pipeline(&config).unwrap();
    assert_eq!(outcome.failed_objects(), 0);

    let truths: Vec<TruthRecord> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("truth_transforms.json")).unwrap()).unwrap();
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&artifacts.transforms).unwrap()).unwrap();
    assert_eq!(records.len(), truths.len());
    for (truth, rec) in truths.iter().zip(&records) {
        assert_eq!(rec["object_name"], truth.object_name.as_str());
        let rows: [[f64; 4]; 4] = serde_json::from_value(rec["matrix"].clone()).unwrap();
        let shift: [f64; 3] = serde_json::from_value(rec["origin_offset"].clone()).unwrap();
        let local = RigidTransform::from_rows(&rows).unwrap();
        let absolute = RigidTransform::from_translation(Vector3::from(shift)).compose(&local);
        let (da, dt) = absolute.difference(&RigidTransform::from_rows(&truth.matrix).unwrap());
        assert!(da < 0.5 && dt < 0.05, "{}: {da} deg {dt} m", truth.object_name);
    }
    let summary = &outcome.summary;
    assert!(summary.classification.as_ref().unwrap().overall_accuracy > 0.9);
    for o in &summary.objects {
        let limit = if o.kind == ObjectKind::Building { 0.2 } else { 0.031 };
        assert!(o.positioning.as_ref().unwrap().rmse <= limit, "{}", o.name);
    }
    for m in &artifacts.meshes {
        let text = fs::read_to_string(m).unwrap();
        let v = text.lines().find(|l| l.starts_with("v ")).unwrap();
        let x: f64 = v.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(x > 834_000.0, "{m:?} not geo-referenced: {v}");
    }
    assert!(artifacts.segmentation.is_file() && artifacts.labels.is_file() && artifacts.positioning.is_file());
}

#[test]
fn missing_mesh_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_synthetic_scene(&SceneSpec { buildings: 0, streetlights: 1, traffic_signals: 0, ..Default::default() }, 1).unwrap();
    let mut config = write_synthetic_job(&scene, dir.path(), &Vector3::zeros(), 1).unwrap();
    config.objects[0].mesh = dir.path().join("nope.obj");
    let err = run_pipeline(&config).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!config.output_dir.exists());
}

#[test]
fn unmatched_selector_is_recorded_and_others_continue() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { buildings: 0, streetlights: 2, traffic_signals: 0, ..Default::default() };
    let scene = generate_synthetic_scene(&spec, 3).unwrap();
    let mut config: JobConfig = write_synthetic_job(&scene, dir.path(), &Vector3::zeros(), 3).unwrap();
    config.objects[0].select = geobim_core::pipeline::Selector::Near([500.0, 500.0, 0.0]);
    let (outcome, artifacts) = run_pipeline(&config).unwrap();
    assert_eq!(outcome.failed_objects(), 1);
    assert_eq!(outcome.summary.objects[0].status, "failed");
    assert_eq!(outcome.summary.objects[1].status, "ok");
    assert_eq!(artifacts.meshes.len(), 1);
}
