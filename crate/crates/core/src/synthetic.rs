//! Ground-truth scene generator: a rectified stereo event camera moving in
//! front of textured frontal planes.
//!
//! Each plane carries a binary log-intensity texture. A pixel fires whenever
//! the texture value under its ray changes, either because a texture edge
//! slides past the pixel centre or because the ray switches to a different
//! plane at an occlusion boundary. Changes are detected per simulation step
//! and timed by bisection, so a step must be shorter than the time an edge
//! needs to cross a texture cell.

use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pixel, RectifiedCamera, SE3Transform, StereoRig};
use crate::ingest::{write_events, write_poses, Calibration, Event, PoseSample, Side, Timestamp, Trajectory};
use crate::metrics::GroundTruthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Voronoi cells around one jittered site per `cell`-sized square (metres),
    /// each bright with probability `fill`. Cell edges run in all directions,
    /// so no image row or column repeats.
    RandomCells { cell: f64, fill: f64, seed: u64 },
    /// Dark for `X < x`, bright otherwise.
    VerticalEdge { x: f64 },
}

impl Texture {
    /// 0 for dark, 1 for bright.
    pub fn value(&self, x: f64, y: f64) -> u8 {
        match *self {
            Texture::RandomCells { cell, fill, seed } => {
                let (ci, cj) = ((x / cell).floor() as i64, (y / cell).floor() as i64);
                let mut best = (f64::INFINITY, 0u64);
                for i in ci - 1..=ci + 1 {
                    for j in cj - 1..=cj + 1 {
                        let h = mix(mix(seed, i as u64), j as u64);
                        let sx = (i as f64 + unit(mix(h, 1))) * cell;
                        let sy = (j as f64 + unit(mix(h, 2))) * cell;
                        let d = (sx - x).powi(2) + (sy - y).powi(2);
                        if d < best.0 {
                            best = (d, h);
                        }
                    }
                }
                u8::from(unit(mix(best.1, 3)) < fill)
            }
            Texture::VerticalEdge { x: edge } => u8::from(x >= edge),
        }
    }
}

/// Maps a hash to `[0, 1)`.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bisections of a simulation step; 24 halvings of 1 ms is far below 1 us.
const BISECTION_STEPS: usize = 24;

/// SplitMix64 finalizer, used as a stateless per-cell hash.
fn mix(state: u64, value: u64) -> u64 {
    let mut z = state.wrapping_add(value.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Plane `Z = depth` in world coordinates, limited to `x_range` along X.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub depth: f64,
    pub x_range: (f64, f64),
    pub texture: Texture,
}

impl Plane {
    pub fn infinite(depth: f64, texture: Texture) -> Self {
        Self {
            depth,
            x_range: (f64::NEG_INFINITY, f64::INFINITY),
            texture,
        }
    }
}

/// Where a camera ray meets the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub plane: usize,
    pub x: f64,
    pub y: f64,
    /// Camera-frame depth of the hit point.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneScene {
    pub rig: StereoRig,
    pub planes: Vec<Plane>,
    /// Left-camera poses; the right camera follows through `rig.t_e`.
    pub trajectory: Trajectory,
}

/// How texture changes turn into events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventModel {
    /// Log-intensity difference between dark and bright texture.
    pub contrast: f64,
    /// Log-intensity change per event.
    pub threshold: f64,
    /// Standard deviation of zero-mean timestamp noise, microseconds; 0 disables it.
    pub jitter_us: f64,
    pub seed: u64,
    /// Simulation step, microseconds.
    pub step_us: f64,
}

impl Default for EventModel {
    fn default() -> Self {
        Self {
            contrast: 1.0,
            threshold: 0.8,
            jitter_us: 0.0,
            seed: 0,
            step_us: 1000.0,
        }
    }
}

impl EventModel {
    fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0 && self.threshold > 0.0 && self.step_us > 0.0 && self.jitter_us >= 0.0) {
            return Err(Error::Config(format!("invalid event model {self:?}")));
        }
        Ok(())
    }

    fn events_per_change(&self) -> usize {
        (self.contrast / self.threshold + 1e-9).floor() as usize
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub left: Vec<Event>,
    pub right: Vec<Event>,
    pub trajectory: Trajectory,
    pub calibration: Calibration,
}

impl PlaneScene {
    pub fn validate(&self) -> Result<()> {
        if self.trajectory.samples().len() < 2 {
            return Err(Error::Config("trajectory needs at least two samples".into()));
        }
        if self.planes.is_empty() {
            return Err(Error::Config("scene has no planes".into()));
        }
        if !(-self.rig.t_e.translation().x > 0.0) {
            return Err(Error::Config("baseline must be positive".into()));
        }
        Ok(())
    }

    /// Pose of the given camera at a fractional time.
    pub fn camera_pose(&self, side: Side, t: f64) -> SE3Transform {
        let left = interpolate(&self.trajectory, t);
        match side {
            Side::Left => left,
            Side::Right => left.compose(&self.rig.t_e.inverse()),
        }
    }

    pub fn camera(&self, side: Side) -> &RectifiedCamera {
        match side {
            Side::Left => &self.rig.left,
            Side::Right => &self.rig.right,
        }
    }

    /// Nearest plane hit by the ray through pixel `(u, v)`.
    pub fn cast(&self, camera: &RectifiedCamera, pose: &SE3Transform, u: f64, v: f64) -> Option<Hit> {
        let dir_cam = Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
        let dir = pose.rotation() * dir_cam;
        let origin = pose.translation();
        let mut best: Option<Hit> = None;
        for (i, plane) in self.planes.iter().enumerate() {
            // depth along the optical axis equals the ray parameter
            let s = (plane.depth - origin.z) / dir.z;
            if !(s > 0.0 && s.is_finite()) {
                continue;
            }
            let p = origin + dir * s;
            if p.x < plane.x_range.0 || p.x >= plane.x_range.1 {
                continue;
            }
            if best.is_none_or(|b| s < b.depth) {
                best = Some(Hit {
                    plane: i,
                    x: p.x,
                    y: p.y,
                    depth: s,
                });
            }
        }
        best
    }

    /// Inverse depth `1/z` of the scene at a pixel of the left camera with
    /// world_from_camera `pose`; `None` where the ray misses every plane.
    pub fn ground_truth_inverse_depth(&self, pose: &SE3Transform, pixel: Pixel) -> Option<f64> {
        self.cast(&self.rig.left, pose, pixel.u as f64, pixel.v as f64)
            .map(|h| 1.0 / h.depth)
    }

    pub fn ground_truth_map(&self, pose: &SE3Transform) -> GroundTruthMap {
        GroundTruthMap::from_fn(self.rig.width(), self.rig.height(), |p| {
            self.ground_truth_inverse_depth(pose, p)
        })
    }

    fn level(&self, hit: Option<Hit>) -> u8 {
        hit.map_or(0, |h| self.planes[h.plane].texture.value(h.x, h.y))
    }

    /// `poses[k]` is the camera pose at `times[k]`.
    fn pixel_events(
        &self,
        side: Side,
        u: u32,
        v: u32,
        times: &[f64],
        poses: &[SE3Transform],
        model: &EventModel,
    ) -> Vec<Event> {
        let camera = self.camera(side);
        let (uf, vf) = (u as f64, v as f64);
        let cast = |t: f64| self.cast(camera, &self.camera_pose(side, t), uf, vf);
        let per_change = model.events_per_change();
        let mut out = Vec::new();
        let mut emit = |t: f64, rising: bool| {
            let polarity = if rising { 1 } else { -1 };
            for _ in 0..per_change {
                out.push((t, polarity));
            }
        };

        let level = |t: f64| self.level(cast(t));
        let level_at = |k: usize| self.level(self.cast(camera, &poses[k], uf, vf));
        let mut prev = level_at(0);
        for k in 1..times.len() {
            let cur = level_at(k);
            if cur != prev {
                // the change happened somewhere inside the step
                let (mut lo, mut hi) = (times[k - 1], times[k]);
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + hi);
                    if level(mid) == prev {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                emit(hi, cur > prev);
            }
            prev = cur;
        }

        let mut rng = (model.jitter_us > 0.0).then(|| {
            let side_tag = match side {
                Side::Left => 0,
                Side::Right => 1,
            };
            let pixel = (u as u64) << 32 | v as u64;
            ChaCha8Rng::seed_from_u64(mix(mix(model.seed, side_tag), pixel))
        });
        let normal = Normal::new(0.0, model.jitter_us.max(f64::MIN_POSITIVE)).expect("finite jitter");
        let (start, end) = (times[0], times[times.len() - 1]);
        out.into_iter()
            .map(|(t, p)| {
                let noise = rng.as_mut().map_or(0.0, |r| normal.sample(r));
                let t = (t + noise).clamp(start, end).round() as Timestamp;
                Event::new(t, u, v, p)
            })
            .collect()
    }

    /// All events of one camera, sorted by `(t, y, x)`.
    pub fn camera_events(&self, side: Side, model: &EventModel) -> Result<Vec<Event>> {
        self.validate()?;
        model.validate()?;
        let (start, end) = (self.trajectory.start() as f64, self.trajectory.end() as f64);
        let steps = ((end - start) / model.step_us).ceil().max(1.0) as usize;
        let times: Vec<f64> = (0..=steps)
            .map(|k| (start + k as f64 * model.step_us).min(end))
            .collect();
        let poses: Vec<SE3Transform> = times.iter().map(|&t| self.camera_pose(side, t)).collect();
        let (w, h) = (self.rig.width(), self.rig.height());
        let per_pixel: Vec<Vec<Event>> = (0..w * h)
            .into_par_iter()
            .map(|i| self.pixel_events(side, i % w, i / w, &times, &poses, model))
            .collect();
        let mut events: Vec<Event> = per_pixel.into_iter().flatten().collect();
        events.sort_by_key(|e| (e.t, e.y, e.x));
        Ok(events)
    }
}

/// Pose at a fractional time, clamped to the trajectory span.
fn interpolate(trajectory: &Trajectory, t: f64) -> SE3Transform {
    let samples = trajectory.samples();
    let idx = samples.partition_point(|s| (s.t as f64) <= t);
    if idx == 0 {
        return samples[0].pose;
    }
    if idx == samples.len() {
        return samples[idx - 1].pose;
    }
    let (a, b) = (&samples[idx - 1], &samples[idx]);
    let s = (t - a.t as f64) / (b.t - a.t) as f64;
    let translation = a.pose.translation().lerp(b.pose.translation(), s);
    let rotation = a.pose.quaternion().slerp(&b.pose.quaternion(), s);
    SE3Transform::from_quaternion(rotation, translation)
}

/// Simulates both cameras.
pub fn generate(scene: &PlaneScene, model: &EventModel) -> Result<SyntheticData> {
    let left = scene.camera_events(Side::Left, model)?;
    let right = scene.camera_events(Side::Right, model)?;
    Ok(SyntheticData {
        left,
        right,
        trajectory: scene.trajectory.clone(),
        calibration: Calibration {
            left: scene.rig.left,
            right: scene.rig.right,
            t_e: scene.rig.t_e,
            rect_map_left: None,
            rect_map_right: None,
        },
    })
}

/// Parameters of the three-plane desk scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreePlaneConfig {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub baseline: f64,
    /// Near, middle and far plane depth, metres.
    pub depths: [f64; 3],
    /// Fractions of the image width, seen from the middle of the trajectory,
    /// where the middle and near planes begin. Each plane extends to +X from
    /// there, the far plane is unbounded.
    pub split_fractions: [f64; 2],
    /// Apparent texture cell size in pixels.
    pub cell_px: f64,
    pub fill: f64,
    /// Camera speed along +x, m/s.
    pub speed: f64,
    pub duration_us: Timestamp,
    pub pose_rate_hz: f64,
    pub seed: u64,
}

impl Default for ThreePlaneConfig {
    fn default() -> Self {
        Self {
            width: 240,
            height: 180,
            focal: 200.0,
            baseline: 0.15,
            depths: [0.9, 1.8, 3.5],
            split_fractions: [1.0 / 3.0, 2.0 / 3.0],
            cell_px: 6.0,
            fill: 0.5,
            speed: 1.0,
            duration_us: 400_000,
            pose_rate_hz: 100.0,
            seed: 1,
        }
    }
}

impl ThreePlaneConfig {
    pub fn camera(&self) -> RectifiedCamera {
        RectifiedCamera::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    /// Left camera moving along +x, looking down +Z, passing the origin
    /// halfway through.
    pub fn trajectory(&self) -> Result<Trajectory> {
        if !(self.pose_rate_hz > 0.0) || self.duration_us <= 0 {
            return Err(Error::Config("pose rate and duration must be positive".into()));
        }
        let period = 1e6 / self.pose_rate_hz;
        let n = (self.duration_us as f64 / period).floor() as usize;
        let samples = (0..=n)
            .map(|k| {
                let t = (k as f64 * period).round() as Timestamp;
                let x = self.speed * (t - self.duration_us / 2) as f64 * 1e-6;
                PoseSample {
                    t,
                    pose: SE3Transform::from_quaternion(UnitQuaternion::identity(), Vector3::new(x, 0.0, 0.0)),
                }
            })
            .collect();
        Trajectory::new(samples)
    }

    pub fn scene(&self) -> Result<PlaneScene> {
        let camera = self.camera();
        let planes = self
            .depths
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                // near plane starts at the larger column
                let x_min = match i {
                    0 => (self.split_fractions[1] * self.width as f64 - camera.cx) / camera.fx * z,
                    1 => (self.split_fractions[0] * self.width as f64 - camera.cx) / camera.fx * z,
                    _ => f64::NEG_INFINITY,
                };
                Plane {
                    depth: z,
                    x_range: (x_min, f64::INFINITY),
                    texture: Texture::RandomCells {
                        cell: self.cell_px * z / self.focal,
                        fill: self.fill,
                        seed: mix(self.seed, i as u64),
                    },
                }
            })
            .collect();
        let scene = PlaneScene {
            rig: StereoRig::rectified(camera, self.baseline),
            planes,
            trajectory: self.trajectory()?,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// File locations of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub events_left: PathBuf,
    pub events_right: PathBuf,
    pub poses: PathBuf,
    pub calibration: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            events_left: dir.join("events_left.txt"),
            events_right: dir.join("events_right.txt"),
            poses: dir.join("poses.txt"),
            calibration: dir.join("calibration.txt"),
        }
    }
}

/// Writes the dataset in the formats read by [`crate::ingest`].
pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = DatasetPaths::in_dir(dir);
    write_events(&paths.events_left, &data.left)?;
    write_events(&paths.events_right, &data.right)?;
    write_poses(&paths.poses, &data.trajectory)?;
    data.calibration.save(&paths.calibration)?;
    Ok(paths)
}
