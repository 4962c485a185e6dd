use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geobim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geobim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, buildings: &str, streetlights: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", "syn", "--buildings", buildings, "--streetlights", streetlights, "--traffic-signals", "0"];
    args.extend_from_slice(extra);
    ok(&geobim(&args, dir));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "1", "1", &["--seed", "7", "--offset", "835000,815000,3"]);
    let first = ok(&geobim(&["pipeline", "--config", "syn/job.json", "--out", "run1", "--threads", "1"], d));
    assert!(first.trim().ends_with("summary.json"));
    ok(&geobim(&["pipeline", "--config", "syn/job.json", "--out", "run2"], d));
    let a = fs::read(d.join("run1/summary.json")).unwrap();
    let b = fs::read(d.join("run2/summary.json")).unwrap();
    assert_eq!(a, b);
    let summary: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["failed_objects"], 0);
    for name in ["transforms.json", "positioning.json", "labels.txt", "segmentation.ply", "objects/building_1.obj"] {
        assert!(d.join("run1").join(name).is_file(), "{name}");
    }
}

#[test]
fn missing_mesh_fails_fast_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "0", "1", &[]);
    fs::remove_file(d.join("syn/meshes/streetlight_1.obj")).unwrap();
    let out = geobim(&["pipeline", "--config", "syn/job.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("streetlight_1.obj"));
    assert!(!d.join("syn/out").exists());
}

#[test]
fn failed_object_gives_nonzero_exit_and_other_objects_still_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "0", "2", &[]);
    let path = d.join("syn/job.json");
    let mut job: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    job["objects"][0]["select"] = serde_json::json!({"near": [900.0, 900.0, 0.0]});
    fs::write(&path, job.to_string()).unwrap();
    let out = geobim(&["pipeline", "--config", "syn/job.json"], d);
    assert_eq!(out.status.code(), Some(2));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("syn/out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["objects"][0]["status"], "failed");
    assert_eq!(summary["objects"][1]["status"], "ok");
}

#[test]
fn stage_commands_chain_into_match() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "0", "1", &[]);
    let label: serde_json::Value = serde_json::from_str(&ok(&geobim(&["label", "--config", "syn/job.json", "--out", "l"], d))).unwrap();
    assert_eq!(label["streetlights"], 1);
    let weak = fs::read_to_string(d.join("l/weak_labels.txt")).unwrap();
    assert!(weak.lines().all(|l| ["-1", "0", "1", "2", "3", "4"].contains(&l)));

    let seg: serde_json::Value = serde_json::from_str(&ok(&geobim(
        &["segment", "--config", "syn/job.json", "--weak", "l/weak_labels.txt", "--out", "s"],
        d,
    )))
    .unwrap();
    assert!(seg["classification"]["overall_accuracy"].as_f64().unwrap() > 0.95);

    let inst: serde_json::Value = serde_json::from_str(&ok(&geobim(
        &["instance", "--scene", "syn/scene.ply", "--labels", "s/labels.txt", "--out", "i"],
        d,
    )))
    .unwrap();
    let pole = inst["instances"].as_array().unwrap().iter().find(|i| i["class"] == "pole_like").unwrap();
    let lidar = format!("i/instances/instance_{}.ply", pole["id"]);

    let m: serde_json::Value = serde_json::from_str(&ok(&geobim(
        &["match", "--mesh", "syn/meshes/streetlight_1.obj", "--kind", "streetlight", "--lidar", &lidar, "--out", "m"],
        d,
    )))
    .unwrap();
    assert!(m["positioning"]["combined"]["rmse"].as_f64().unwrap() <= 0.031);

    let ev: serde_json::Value = serde_json::from_str(&ok(&geobim(
        &["evaluate", "--mesh", "m/streetlight_1.obj", "--kind", "streetlight", "--lidar", &lidar],
        d,
    )))
    .unwrap();
    assert_eq!(ev["positioning"], m["positioning"]);
}

#[test]
fn evaluate_reports_hand_checked_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Ground: 3 right, 1 called building. Building: 2 right.
    fs::write(d.join("t.txt"), "1\n1\n1\n1\n2\n2\n").unwrap();
    fs::write(d.join("p.txt"), "1\n1\n1\n2\n2\n2\n").unwrap();
    let out = ok(&geobim(&["evaluate", "--truth", "t.txt", "--predicted", "p.txt", "--out", "e"], d));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["classification"]["overall_accuracy"], 0.833);
    let building = &v["classification"]["classes"][2];
    assert_eq!(building["precision"], 0.667);
    assert_eq!(building["recall"], 1.0);
    assert_eq!(building["f1"], 0.8);
    assert_eq!(v["confusion_matrix"][1][2], 1);
    assert!(d.join("e/evaluation.json").is_file());
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!geobim(&["pipeline"], dir.path()).status.success());
    assert!(!geobim(&["label"], dir.path()).status.success());
    assert!(!geobim(&["evaluate"], dir.path()).status.success());
    assert!(!geobim(&["synth", "--offset", "1,2"], dir.path()).status.success());
}
