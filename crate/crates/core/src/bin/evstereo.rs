use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use evstereo::depth::DepthRangeConfig;
use evstereo::ingest::OrderPolicy;
use evstereo::pipeline::{evaluate_files, report_summary, run_pipeline, PipelineConfig, SigmaR};
use evstereo::synthetic::{generate, write_dataset, DatasetPaths, EventModel, ThreePlaneConfig};
use evstereo::{Error, Result};

/// Semi-dense depth from a stereo event camera.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reconstruct from recorded event streams.
    Reconstruct {
        #[arg(long)]
        events_left: PathBuf,
        #[arg(long)]
        events_right: PathBuf,
        /// Left-camera poses, `t tx ty tz qx qy qz qw` per line.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Sort event streams instead of rejecting out-of-order timestamps.
        #[arg(long)]
        sort_events: bool,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Generate the three-plane scene, reconstruct it and evaluate against ground truth.
    Synth {
        /// Output directory; the generated dataset goes to `data/` inside it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Compare a fused depth CSV with a ground-truth CSV.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Time-surface decay constant in milliseconds.
    #[arg(long, default_value_t = 30.0)]
    decay_ms: f64,
    /// Reference-view event window in milliseconds.
    #[arg(long, default_value_t = 10.0)]
    window_ms: f64,
    /// Smallest inverse depth searched, 1/m.
    #[arg(long, default_value_t = 0.1)]
    rho_min: f64,
    /// Largest inverse depth searched, 1/m.
    #[arg(long, default_value_t = 2.0)]
    rho_max: f64,
    /// Coarse search step, 1/m.
    #[arg(long, default_value_t = 0.05)]
    coarse_step: f64,
    /// Patch side length in pixels (odd).
    #[arg(long, default_value_t = 25)]
    patch: usize,
    /// Gauss-Newton iteration cap.
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// Skip observations during the first milliseconds of the trajectory.
    #[arg(long, default_value_t = 60.0)]
    warmup_ms: f64,
    /// Use every n-th pose sample as an observation.
    #[arg(long, default_value_t = 1)]
    observation_stride: usize,
    /// Observations on each side of a reference view used for its estimate.
    #[arg(long, default_value_t = 3)]
    neighbor_radius: usize,
    /// Neighbouring reference views fused into the middle one (4, 8 or 16).
    #[arg(long, default_value_t = 8)]
    fusion_views: usize,
    /// Spacing between fused reference views, in observations.
    #[arg(long, default_value_t = 2)]
    rv_stride: usize,
    /// Keep fused points with variance below this fraction of the largest one.
    #[arg(long, default_value_t = 0.8)]
    filter_factor: f64,
    /// Keep fused points that at least this fraction of the fused views agreed on.
    #[arg(long, default_value_t = 0.5)]
    min_support_fraction: f64,
    /// Residual noise level; estimated from the converged residuals when omitted.
    #[arg(long)]
    sigma_r: Option<f64>,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Skip writing per-view CSVs.
    #[arg(long)]
    no_views: bool,
}

impl PipelineArgs {
    fn config(&self, order: OrderPolicy) -> PipelineConfig {
        let base = PipelineConfig::default();
        PipelineConfig {
            decay_us: self.decay_ms * 1e3,
            window_us: (self.window_ms * 1e3).round() as i64,
            depth: DepthRangeConfig {
                rho_min: self.rho_min,
                rho_max: self.rho_max,
                coarse_step: self.coarse_step,
                patch_width: self.patch,
                max_iterations: self.iterations,
                ..DepthRangeConfig::default()
            },
            warmup_us: (self.warmup_ms * 1e3).round() as i64,
            observation_stride: self.observation_stride,
            neighbor_radius: self.neighbor_radius,
            fusion_views: self.fusion_views,
            rv_stride: self.rv_stride,
            filter_factor: self.filter_factor,
            min_support_fraction: self.min_support_fraction,
            sigma_r: self.sigma_r.map_or(SigmaR::Estimated, SigmaR::Fixed),
            threads: self.threads,
            order,
            write_views: !self.no_views,
            ..base
        }
    }
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Scene and timestamp-noise seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 240)]
    width: u32,
    /// Image height in pixels.
    #[arg(long, default_value_t = 180)]
    height: u32,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 200.0)]
    focal: f64,
    /// Near, middle and far plane depths in metres.
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.9, 1.8, 3.5])]
    depths: Vec<f64>,
    /// Stereo baseline in metres.
    #[arg(long, default_value_t = 0.15)]
    baseline: f64,
    /// Camera speed along +x in m/s.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Trajectory length in milliseconds.
    #[arg(long, default_value_t = 400.0)]
    duration_ms: f64,
    /// Pose (and observation) rate in Hz.
    #[arg(long, default_value_t = 100.0)]
    pose_rate: f64,
    /// Apparent texture cell size in pixels.
    #[arg(long, default_value_t = 6.0)]
    cell_px: f64,
    /// Standard deviation of timestamp noise in microseconds.
    #[arg(long, default_value_t = 0.0)]
    jitter_us: f64,
    /// Log-intensity change per event.
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
}

impl SceneArgs {
    fn scene_config(&self) -> ThreePlaneConfig {
        ThreePlaneConfig {
            width: self.width,
            height: self.height,
            focal: self.focal,
            depths: [self.depths[0], self.depths[1], self.depths[2]],
            baseline: self.baseline,
            speed: self.speed,
            duration_us: (self.duration_ms * 1e3).round() as i64,
            pose_rate_hz: self.pose_rate,
            cell_px: self.cell_px,
            seed: self.seed,
            ..ThreePlaneConfig::default()
        }
    }

    fn event_model(&self) -> EventModel {
        EventModel {
            threshold: self.threshold,
            jitter_us: self.jitter_us,
            seed: self.seed,
            ..EventModel::default()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Reconstruct {
            events_left,
            events_right,
            poses,
            calibration,
            out,
            sort_events,
            pipeline,
        } => {
            let inputs = DatasetPaths {
                events_left,
                events_right,
                poses,
                calibration,
            };
            let order = if sort_events { OrderPolicy::Sort } else { OrderPolicy::Reject };
            let report = run_pipeline(&inputs, &pipeline.config(order), &out, None)?;
            print!("{}", report.summary.to_text());
        }
        Command::Synth { out, scene, pipeline } => {
            let config = pipeline.config(OrderPolicy::Reject);
            config.validate()?;
            let scene_cfg = scene.scene_config();
            let plane_scene = scene_cfg.scene()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            let data = pool.install(|| generate(&plane_scene, &scene.event_model()))?;
            let inputs = write_dataset(&data, &out.join("data"))?;
            let gt = |pose: &evstereo::SE3Transform| plane_scene.ground_truth_map(pose);
            let report = run_pipeline(&inputs, &config, &out, Some(&gt))?;
            print!("{}", report.summary.to_text());
        }
        Command::Eval { fused, ground_truth } => {
            let report = evaluate_files(&fused, &ground_truth)?;
            print!("{}", report_summary(&report).to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
