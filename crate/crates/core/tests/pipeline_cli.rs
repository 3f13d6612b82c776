mod common;

use std::path::Path;
use std::process::Command;

use evstereo::fusion::DEFAULT_FILTER_FACTOR;
use evstereo::metrics::{depth_errors, median};
use evstereo::pipeline::{run_pipeline, OutputPaths, PipelineConfig, RunReport, RunSummary};
use evstereo::synthetic::{generate, write_dataset, DatasetPaths, EventModel};
use evstereo::SE3Transform;

fn run_small(dir: &Path) -> (RunReport, DatasetPaths) {
    let scene = common::small_config().scene().unwrap();
    let data = generate(&scene, &EventModel::default()).unwrap();
    let inputs = write_dataset(&data, &dir.join("data")).unwrap();
    let config = PipelineConfig {
        fusion_views: 4,
        ..PipelineConfig::default()
    };
    let gt = |pose: &SE3Transform| scene.ground_truth_map(pose);
    let report = run_pipeline(&inputs, &config, &dir.join("run"), Some(&gt)).unwrap();
    (report, inputs)
}

#[test]
fn pipeline_writes_artifacts_and_filters_sensibly() {
    let dir = tempfile::tempdir().unwrap();
    let (report, _) = run_small(dir.path());
    let out = OutputPaths::in_dir(&dir.path().join("run"));
    for path in [
        &out.fused_csv,
        &out.depth_pgm,
        &out.uncertainty_pgm,
        &out.cloud,
        &out.ground_truth,
        &out.summary,
    ] {
        assert!(path.is_file(), "{} missing", path.display());
    }
    let views = std::fs::read_dir(&out.views).unwrap().count();
    assert_eq!(views, 5);

    let text = std::fs::read_to_string(&out.summary).unwrap();
    let summary = RunSummary::parse(&text).unwrap();
    assert_eq!(summary, report.summary);
    assert!(summary.get_f64("relative_error_pct").unwrap() < 3.0);
    assert!(summary.get_f64("confident_points").unwrap() > 100.0);

    // points the confidence filter drops are worse than the ones it keeps
    let gt = evstereo::GroundTruthMap::load(&out.ground_truth).unwrap();
    let sigma2_max = report.grid.sigma2_max().unwrap();
    let min_support = summary.get_f64("min_support").unwrap() as u32;
    let (kept, dropped): (Vec<_>, Vec<_>) = report.grid.assigned().partition(|(p, g)| {
        g.sigma2 < DEFAULT_FILTER_FACTOR * sigma2_max && report.grid.support(*p) >= min_support
    });
    let as_rho = |v: Vec<(evstereo::Pixel, evstereo::GaussianInverseDepth)>| {
        v.into_iter().map(|(p, g)| (p, g.rho)).collect::<Vec<_>>()
    };
    let kept_median = median(&mut depth_errors(&as_rho(kept), &gt)).unwrap();
    let dropped_median = median(&mut depth_errors(&as_rho(dropped), &gt)).unwrap();
    assert!(kept_median < dropped_median, "kept {kept_median} dropped {dropped_median}");
}

fn evstereo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evstereo"))
}

#[test]
fn cli_reconstruct_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (report, inputs) = run_small(dir.path());
    let out = dir.path().join("cli");
    let status = evstereo()
        .arg("reconstruct")
        .args(["--events-left", inputs.events_left.to_str().unwrap()])
        .args(["--events-right", inputs.events_right.to_str().unwrap()])
        .args(["--poses", inputs.poses.to_str().unwrap()])
        .args(["--calibration", inputs.calibration.to_str().unwrap()])
        .args(["--out", out.to_str().unwrap()])
        .args(["--fusion-views", "4", "--no-views"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let summary = RunSummary::parse(&String::from_utf8(status.stdout).unwrap()).unwrap();
    assert_eq!(summary.get("fused_cells"), report.summary.get("fused_cells"));

    let paths = OutputPaths::in_dir(&out);
    let eval = evstereo()
        .arg("eval")
        .args(["--fused", paths.fused_csv.to_str().unwrap()])
        .args(["--ground-truth", dir.path().join("run/ground_truth.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(eval.status.success());
    let metrics = RunSummary::parse(&String::from_utf8(eval.stdout).unwrap()).unwrap();
    assert_eq!(metrics.get("pixel_count"), report.summary.get("unfiltered_pixel_count"));
}

#[test]
fn missing_calibration_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    std::fs::write(dir.path().join("ev.txt"), "").unwrap();
    std::fs::write(dir.path().join("poses.txt"), "").unwrap();
    let out = evstereo()
        .arg("reconstruct")
        .args(["--events-left", dir.path().join("ev.txt").to_str().unwrap()])
        .args(["--events-right", dir.path().join("ev.txt").to_str().unwrap()])
        .args(["--poses", dir.path().join("poses.txt").to_str().unwrap()])
        .args(["--calibration", missing.to_str().unwrap()])
        .args(["--out", dir.path().join("out").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));
}

#[test]
fn invalid_settings_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = evstereo()
        .args(["synth", "--out", dir.path().to_str().unwrap(), "--filter-factor", "1.5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
