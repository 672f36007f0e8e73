//! Command-line behavior.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dynfusion::pipeline::PipelineConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynfusion"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn dynfusion")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_SCENE: &str = r#"
frame_count = 6
frame_rate = 30.0
mask_interval = 3

[intrinsics]
fx = 130.0
fy = 130.0
cx = 79.5
cy = 59.5
width = 160
height = 120
depth_scale = 5000.0

[camera]
type = "linear"
start = [0.0, 0.0, 0.0]
end = [0.03, 0.0, 0.0]

[[primitives]]
label = "wall"
shape = { type = "plane", normal = [0.0, 0.0, -1.0], offset = -2.0 }
motion = { type = "fixed", position = [0.0, 0.0, 0.0] }

[[primitives]]
label = "floor"
shape = { type = "plane", normal = [0.0, -1.0, 0.0], offset = -0.6 }
motion = { type = "fixed", position = [0.0, 0.0, 0.0] }

[[primitives]]
label = "cup"
is_object = true
shape = { type = "sphere", radius = 0.3 }
motion = { type = "fixed", position = [0.0, 0.0, 1.3] }
"#;

const TINY_CONFIG: &str = r#"
min_mask_pixels = 200
detection_interval = 3

[background]
resolution = 96
size = 3.0

[tracking]
min_valid_pixels = 100
"#;

fn write_tiny(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let scene = dir.join("scene.toml");
    let config = dir.join("config.toml");
    fs::write(&scene, TINY_SCENE).unwrap();
    fs::write(&config, TINY_CONFIG).unwrap();
    (scene, config)
}

#[test]
fn default_config_round_trips() {
    let out = run(bin().arg("--print-default-config"));
    assert!(out.status.success());
    let parsed = PipelineConfig::from_toml(&stdout(&out)).unwrap();
    assert_eq!(parsed, PipelineConfig::default());
}

#[test]
fn missing_dataset_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = run(bin().arg("run").arg(&missing).arg("--out").arg(dir.path().join("out")));
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("nowhere"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = write_tiny(dir.path());
    let data = dir.path().join("data");
    assert!(run(bin().arg("synth").arg(&scene).arg("--out").arg(&data)).status.success());
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "detection_interval = 0\n").unwrap();
    let out = run(bin().arg("run").arg(&data).arg("--config").arg(&bad).arg("--out").arg(dir.path().join("out")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("detection_interval"), "{}", stderr(&out));
}

#[test]
fn eval_reports_zero_for_identical_and_shifted_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let (mut a, mut b) = (String::from("# timestamp tx ty tz qx qy qz qw\n"), String::new());
    for i in 0..60 {
        let t = i as f64 / 30.0;
        let (x, y, z) = (0.1 * t, 0.05 * (t * 3.0).sin(), 0.02 * t * t);
        a += &format!("{t:.6} {x:.6} {y:.6} {z:.6} 0 0 0 1\n");
        b += &format!("{t:.6} {:.6} {:.6} {:.6} 0 0 0 1\n", x + 1.0, y - 2.0, z + 0.5);
    }
    let (pa, pb) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    fs::write(&pa, &a).unwrap();
    fs::write(&pb, &b).unwrap();

    let same = run(bin().arg("eval").arg(&pa).arg(&pa));
    assert!(same.status.success());
    assert!(stdout(&same).contains("ATE-RMSE: 0.00 cm"), "{}", stdout(&same));
    assert!(stdout(&same).contains("RPE-RMSE: 0.00 cm/s"), "{}", stdout(&same));

    let shifted = run(bin().arg("eval").arg(&pb).arg(&pa));
    assert!(shifted.status.success());
    assert!(stdout(&shifted).contains("ATE-RMSE: 0.00 cm"), "{}", stdout(&shifted));
}

#[test]
fn eval_reports_the_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.txt");
    let bad = dir.path().join("bad.txt");
    fs::write(&good, "0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n0.2 0 0 0 0 0 0 1\n").unwrap();
    fs::write(&bad, "0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n0.2 0 0 zero 0 0 0 1\n").unwrap();
    let out = run(bin().arg("eval").arg(&bad).arg(&good));
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("bad.txt:3:"), "{err}");
}

#[test]
fn synth_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = write_tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(bin().arg("synth").arg(&scene).arg("--out").arg(&a)).status.success());
    assert!(run(bin().arg("synth").arg(&scene).arg("--out").arg(&b)).status.success());
    for rel in ["depth.txt", "groundtruth.txt", "intrinsics.toml", "masks/0.000000.json", "masks/0.000000.png", "depth/0.100000.png"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    assert!(a.join("groundtruth_objects/object_1.txt").exists());
    // masks only on interval frames
    assert!(a.join("masks/0.100000.png").exists());
    assert!(!a.join("masks/0.033333.png").exists());
}

#[test]
fn run_writes_manifest_trajectories_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, config) = write_tiny(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert!(run(bin().arg("synth").arg(&scene).arg("--out").arg(&data)).status.success());
    let result = run(bin()
        .args(["--threads", "2", "run"])
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--deterministic", "--dump-association", "--dump-render"]));
    assert!(result.status.success(), "{}", stderr(&result));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["threads"], 2);
    assert_eq!(manifest["frame_ms"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["detection_frames"]["frames"], 2);
    assert_eq!(manifest["tracking_frames"]["frames"], 4);
    assert_eq!(manifest["config"]["background"]["resolution"], 96);

    let camera = fs::read_to_string(out.join("camera.txt")).unwrap();
    assert_eq!(camera.lines().filter(|l| !l.starts_with('#')).count(), 6);
    assert!(camera.lines().nth(1).unwrap().starts_with("0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 1.000000"));
    let object = fs::read_to_string(out.join("objects/object_1.txt")).unwrap();
    assert_eq!(object.lines().filter(|l| !l.starts_with('#')).count(), 6);
    let labels: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("objects/labels.json")).unwrap()).unwrap();
    assert_eq!(labels[0]["label"], "cup");

    assert_eq!(fs::read_to_string(out.join("frames.jsonl")).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(out.join("objects.jsonl")).unwrap().lines().count(), 6);
    assert!(out.join("association/000001_model0.png").exists());
    assert!(out.join("association/000001_model1.png").exists());
    assert!(out.join("render/000005_ids.png").exists());
    assert!(out.join("render/000005_depth.png").exists());

    let eval = run(bin().arg("eval").arg(out.join("camera.txt")).arg(data.join("groundtruth.txt")));
    assert!(eval.status.success());
    assert!(stdout(&eval).starts_with("ATE-RMSE: "));
}
