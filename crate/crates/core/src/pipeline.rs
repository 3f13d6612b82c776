//! End-to-end orchestration: files in, per-view and fused depth maps out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::depth::{estimate_sigma_r, reconstruct_reference_view, DepthRangeConfig, InverseDepthEstimate};
use crate::error::{Error, Result};
use crate::export::{export_depth_map, uncertainty_pgm, write_depth_csv, write_pgm, write_ply};
use crate::fusion::{FusionGrid, GaussianInverseDepth, DEFAULT_FILTER_FACTOR};
use crate::geometry::{SE3Transform, StereoRig};
use crate::ingest::{format_timestamp, load_events, load_poses, Calibration, Event, OrderPolicy, Side, Timestamp};
use crate::metrics::{compute_metrics, ErrorReport, GroundTruthMap};
use crate::synthetic::DatasetPaths;
use crate::time_surface::{
    make_reference_view, LastSpikeMap, StereoObservation, DEFAULT_DECAY_US, DEFAULT_WINDOW_US,
};

/// Default residual noise used when it cannot be estimated.
pub const DEFAULT_SIGMA_R: f64 = 10.0;

/// Where the residual noise level comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaR {
    /// Fitted to the converged residuals of all reference views.
    Estimated,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Time-surface decay constant, microseconds.
    pub decay_us: f64,
    /// Reference-view event window, microseconds.
    pub window_us: Timestamp,
    pub depth: DepthRangeConfig,
    /// Observations before `start + warmup_us` are skipped while surfaces fill up.
    pub warmup_us: Timestamp,
    /// Use every n-th pose sample as an observation.
    pub observation_stride: usize,
    /// Observations on each side of a reference view that enter its estimate.
    pub neighbor_radius: usize,
    /// Number of reference views fused into the middle one.
    pub fusion_views: usize,
    /// Spacing between fused reference views, in observations.
    pub rv_stride: usize,
    pub filter_factor: f64,
    /// Fraction of the fused views that must agree on a cell before it is kept.
    pub min_support_fraction: f64,
    pub sigma_r: SigmaR,
    pub default_sigma_r: f64,
    /// 0 means one per core.
    pub threads: usize,
    pub order: OrderPolicy,
    /// Write per-view CSVs.
    pub write_views: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            decay_us: DEFAULT_DECAY_US,
            window_us: DEFAULT_WINDOW_US,
            depth: DepthRangeConfig::default(),
            warmup_us: 60_000,
            observation_stride: 1,
            neighbor_radius: 3,
            fusion_views: 8,
            rv_stride: 2,
            filter_factor: DEFAULT_FILTER_FACTOR,
            min_support_fraction: 0.5,
            sigma_r: SigmaR::Estimated,
            default_sigma_r: DEFAULT_SIGMA_R,
            threads: 0,
            order: OrderPolicy::Reject,
            write_views: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.depth.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.decay_us > 0.0) {
            return bad("decay must be positive");
        }
        if self.window_us <= 0 {
            return bad("event window must be positive");
        }
        if self.warmup_us < 0 {
            return bad("warm-up must not be negative");
        }
        if self.observation_stride == 0 || self.rv_stride == 0 {
            return bad("strides must be at least 1");
        }
        if !(self.filter_factor > 0.0 && self.filter_factor <= 1.0) {
            return bad("filter factor must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.min_support_fraction) {
            return bad("minimum support fraction must lie in [0, 1]");
        }
        if !(self.default_sigma_r > 0.0) {
            return bad("default sigma_r must be positive");
        }
        if let SigmaR::Fixed(s) = self.sigma_r {
            if !(s > 0.0) {
                return bad("sigma_r must be positive");
            }
        }
        Ok(())
    }
}

/// Supplies the ground-truth inverse-depth map for a left-camera pose.
pub type GroundTruthSource<'a> = &'a (dyn Fn(&SE3Transform) -> GroundTruthMap + Sync);

/// Everything a run produced, besides the files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub summary: RunSummary,
    pub grid: FusionGrid,
    pub metrics: Option<ErrorReport>,
    pub unfiltered_metrics: Option<ErrorReport>,
}

/// Flat `key = value` record of a run. Values are formatted once so that
/// reruns can be compared byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    entries: BTreeMap<String, String>,
}

impl RunSummary {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    /// Entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut summary = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Config(format!("summary line {}: expected `key = value`", i + 1)))?;
            summary.set(k.trim(), v.trim());
        }
        Ok(summary)
    }

    fn add_report(&mut self, prefix: &str, r: &ErrorReport) {
        self.set(&format!("{prefix}mean_error_m"), r.mean_error);
        self.set(&format!("{prefix}median_error_m"), r.median_error);
        self.set(&format!("{prefix}relative_error_pct"), r.relative_error_pct);
        self.set(&format!("{prefix}depth_range_m"), r.depth_range);
        self.set(&format!("{prefix}pixel_count"), r.pixel_count);
    }
}

/// Output locations under the run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub views: PathBuf,
    pub fused_csv: PathBuf,
    pub depth_pgm: PathBuf,
    pub uncertainty_pgm: PathBuf,
    pub cloud: PathBuf,
    pub ground_truth: PathBuf,
    pub summary: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            views: dir.join("views"),
            fused_csv: dir.join("fused_depth.csv"),
            depth_pgm: dir.join("fused_depth.pgm"),
            uncertainty_pgm: dir.join("fused_uncertainty.pgm"),
            cloud: dir.join("cloud.ply"),
            ground_truth: dir.join("ground_truth.csv"),
            summary: dir.join("summary.txt"),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn load_rectified(calib: &Calibration, path: &Path, side: Side, order: OrderPolicy) -> Result<(Vec<Event>, usize)> {
    let raw = load_events(path, order)?;
    let stream = calib.rectification_map(side)?.rectify_all(&raw);
    Ok((stream.events, stream.dropped))
}

/// Renders both time surfaces at every requested time, consuming the event
/// streams once.
pub fn build_observations(
    left: &[Event],
    right: &[Event],
    times_and_poses: &[(Timestamp, SE3Transform)],
    width: u32,
    height: u32,
    decay_us: f64,
) -> Result<Vec<StereoObservation>> {
    let mut left_map = LastSpikeMap::new(width, height);
    let mut right_map = LastSpikeMap::new(width, height);
    let (mut li, mut ri) = (0, 0);
    let mut out = Vec::with_capacity(times_and_poses.len());
    for &(t, pose) in times_and_poses {
        while li < left.len() && left[li].t <= t {
            left_map.consume(&left[li])?;
            li += 1;
        }
        while ri < right.len() && right[ri].t <= t {
            right_map.consume(&right[ri])?;
            ri += 1;
        }
        out.push(StereoObservation {
            left: left_map.render(t, decay_us)?,
            right: right_map.render(t, decay_us)?,
            t,
            pose,
        });
    }
    Ok(out)
}

/// Observation indices of the fused reference views, centred on the middle
/// observation, in chronological order. The middle one comes first in the
/// returned pair.
pub fn reference_view_indices(n_obs: usize, fusion_views: usize, stride: usize) -> (usize, Vec<usize>) {
    let mid = n_obs / 2;
    let half = fusion_views / 2;
    let mut out = Vec::new();
    for k in 0..=2 * half {
        let offset = k as i64 - half as i64;
        let idx = mid as i64 + offset * stride as i64;
        if idx >= 0 && (idx as usize) < n_obs {
            out.push(idx as usize);
        }
    }
    // odd counts add the extra view after the middle
    if fusion_views % 2 == 1 {
        let idx = mid + (half + 1) * stride;
        if idx < n_obs {
            out.push(idx);
        }
    }
    (mid, out)
}

/// Runs the whole reconstruction on a dataset on disk and writes its
/// artifacts into `out_dir`.
pub fn run_pipeline(
    inputs: &DatasetPaths,
    config: &PipelineConfig,
    out_dir: &Path,
    ground_truth: Option<GroundTruthSource>,
) -> Result<RunReport> {
    config.validate()?;
    require_file(&inputs.calibration, "calibration")?;
    require_file(&inputs.events_left, "left event")?;
    require_file(&inputs.events_right, "right event")?;
    require_file(&inputs.poses, "pose")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(inputs, config, out_dir, ground_truth))
}

fn run_inner(
    inputs: &DatasetPaths,
    config: &PipelineConfig,
    out_dir: &Path,
    ground_truth: Option<GroundTruthSource>,
) -> Result<RunReport> {
    let calib = Calibration::load(&inputs.calibration)?;
    let rig = StereoRig {
        left: calib.left,
        right: calib.right,
        t_e: calib.t_e,
    };
    let (w, h) = (calib.width(), calib.height());
    let (left, dropped_left) = load_rectified(&calib, &inputs.events_left, Side::Left, config.order)?;
    let (right, dropped_right) = load_rectified(&calib, &inputs.events_right, Side::Right, config.order)?;
    let trajectory = load_poses(&inputs.poses)?;
    info!("{} left and {} right events after rectification", left.len(), right.len());

    let first = trajectory.start() + config.warmup_us;
    let times: Vec<(Timestamp, SE3Transform)> = trajectory
        .samples()
        .iter()
        .filter(|s| s.t >= first)
        .step_by(config.observation_stride)
        .map(|s| (s.t, s.pose))
        .collect();
    if times.is_empty() {
        return Err(Error::NoData);
    }
    let observations = build_observations(&left, &right, &times, w, h, config.decay_us)?;
    let (mid, rv_indices) = reference_view_indices(observations.len(), config.fusion_views, config.rv_stride);
    info!("{} observations, {} reference views", observations.len(), rv_indices.len());

    let paths = OutputPaths::in_dir(out_dir);
    fs::create_dir_all(&paths.dir)?;
    if config.write_views {
        fs::create_dir_all(&paths.views)?;
    }

    let mut views: Vec<(usize, Vec<InverseDepthEstimate>)> = Vec::new();
    let mut residuals = Vec::new();
    let mut rejected = 0;
    let provisional_sigma_r = match config.sigma_r {
        SigmaR::Fixed(s) => s,
        SigmaR::Estimated => config.default_sigma_r,
    };
    for &i in &rv_indices {
        let obs = &observations[i];
        let rv = make_reference_view(&left, obs.t, config.window_us, obs.pose, w, h);
        let lo = i.saturating_sub(config.neighbor_radius);
        let hi = (i + config.neighbor_radius).min(observations.len() - 1);
        let rec = reconstruct_reference_view(&rv, &observations[lo..=hi], &rig, &config.depth, provisional_sigma_r)?;
        debug!(
            "view {i} at {}: {} pixels, {} estimates",
            format_timestamp(obs.t),
            rv.mask.len(),
            rec.estimates.len()
        );
        residuals.extend(rec.residuals);
        rejected += rec.rejected;
        views.push((i, rec.estimates));
    }

    let mut summary = RunSummary::default();
    let sigma_r = match config.sigma_r {
        SigmaR::Fixed(s) => s,
        SigmaR::Estimated => {
            let stats = estimate_sigma_r(&residuals, config.default_sigma_r);
            summary.set("sigma_r_fallback", stats.fallback);
            summary.set("residual_mean", stats.mean);
            stats.sigma_r
        }
    };
    for (_, estimates) in &mut views {
        for e in estimates.iter_mut() {
            *e = e.with_sigma_r(sigma_r);
        }
    }

    let rv_star = &observations[mid];
    let mut grid = FusionGrid::new(rig.left, rv_star.pose);
    let mut total_estimates = 0;
    let mut densities = Vec::new();
    for (i, estimates) in &views {
        total_estimates += estimates.len();
        if config.write_views {
            let entries: Vec<_> = estimates.iter().map(|e| (e.pixel, GaussianInverseDepth::from(e))).collect();
            write_depth_csv(&paths.views.join(format!("view_{i:04}.csv")), &entries)?;
        }
        let stats = grid.fuse_view(estimates, &observations[*i].pose);
        debug!("fused view {i}: {stats:?}");
        densities.push(grid.density().to_string());
    }

    let min_support = ((config.min_support_fraction * views.len() as f64).ceil() as u32).max(1);
    let points = grid.filter_confident(config.filter_factor, min_support);
    export_depth_map(&grid, &paths.fused_csv, &paths.depth_pgm)?;
    write_pgm(&paths.uncertainty_pgm, w, h, &uncertainty_pgm(&grid))?;
    write_ply(&paths.cloud, &points)?;

    summary.set("width", w);
    summary.set("height", h);
    summary.set("events_left", left.len());
    summary.set("events_right", right.len());
    summary.set("dropped_left", dropped_left);
    summary.set("dropped_right", dropped_right);
    summary.set("observations", observations.len());
    summary.set("reference_views", rv_indices.len());
    summary.set("rv_star_index", mid);
    summary.set("rv_star_t", format_timestamp(rv_star.t));
    summary.set("sigma_r", sigma_r);
    summary.set("estimates", total_estimates);
    summary.set("rejected", rejected);
    summary.set("fused_cells", grid.density());
    summary.set("density_progression", densities.join(","));
    summary.set("min_support", min_support);
    summary.set("confident_points", points.len());
    summary.set("sigma2_max", grid.sigma2_max().unwrap_or(0.0));

    let mut metrics = None;
    let mut unfiltered_metrics = None;
    if let Some(source) = ground_truth {
        let gt = source(&rv_star.pose);
        gt.save(&paths.ground_truth)?;
        let filtered: Vec<_> = points.iter().map(|p| (p.pixel, p.rho)).collect();
        let all: Vec<_> = grid.assigned().map(|(p, g)| (p, g.rho)).collect();
        let m = compute_metrics(&filtered, &gt)?;
        let u = compute_metrics(&all, &gt)?;
        summary.add_report("", &m);
        summary.add_report("unfiltered_", &u);
        metrics = Some(m);
        unfiltered_metrics = Some(u);
    }
    fs::write(&paths.summary, summary.to_text())?;

    Ok(RunReport {
        summary,
        grid,
        metrics,
        unfiltered_metrics,
    })
}

/// Metrics of a fused CSV against a ground-truth CSV.
pub fn evaluate_files(fused_csv: &Path, ground_truth: &Path) -> Result<ErrorReport> {
    require_file(fused_csv, "fused depth")?;
    require_file(ground_truth, "ground truth")?;
    let est: Vec<_> = crate::export::read_depth_csv(fused_csv)?
        .into_iter()
        .map(|(p, g)| (p, g.rho))
        .collect();
    compute_metrics(&est, &GroundTruthMap::load(ground_truth)?)
}

/// Summary text for an [`ErrorReport`] on its own.
pub fn report_summary(r: &ErrorReport) -> RunSummary {
    let mut s = RunSummary::default();
    s.add_report("", r);
    s
}
