#![allow(dead_code)]

use std::path::PathBuf;

use dynfusion::pipeline::{FrameReport, PipelineConfig, Slam};
use dynfusion::synth::SceneScript;

pub fn scenes_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenes")
}

pub fn load_scene(name: &str) -> SceneScript {
    let text = std::fs::read_to_string(scenes_dir().join(name)).expect("scene file");
    SceneScript::from_toml(&text).expect("valid scene")
}

pub fn synth_config() -> PipelineConfig {
    let text = std::fs::read_to_string(scenes_dir().join("synth_config.toml")).expect("config file");
    PipelineConfig::from_toml(&text).expect("valid config")
}

/// Run the pipeline over a scene in memory, calling `inspect` after each
/// frame with the state and the ground-truth frame index.
pub fn run_scene(
    scene: &SceneScript,
    config: PipelineConfig,
    mut inspect: impl FnMut(&Slam, &FrameReport),
) -> (Slam, Vec<FrameReport>) {
    let mut slam = Slam::new(config, scene.intrinsics).expect("pipeline");
    let mut reports = Vec::new();
    for i in 0..scene.frame_count {
        let frame = scene.frame(i);
        let report = slam.process_frame(&frame).expect("frame");
        inspect(&slam, &report);
        reports.push(report);
    }
    (slam, reports)
}

/// Every accepted step of every tracking run lowered the energy.
pub fn energy_violations(reports: &[FrameReport]) -> usize {
    let traces = reports
        .iter()
        .flat_map(|r| r.camera.iter().chain(r.objects.iter().filter_map(|o| o.tracking.as_ref())));
    traces
        .map(|t| t.energy_trace.windows(2).filter(|w| !(w[1] < w[0])).count())
        .sum()
}
