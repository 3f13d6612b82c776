#![allow(dead_code)]

use nalgebra::{Point2, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evstereo::depth::{jacobian, residual};
use evstereo::geometry::{RationalWarpCoefficients, RectifiedCamera, SE3Transform};
use evstereo::ingest::{Event, Side};
use evstereo::pipeline::build_observations;
use evstereo::synthetic::{EventModel, PlaneScene, ThreePlaneConfig};
use evstereo::time_surface::StereoObservation;

/// Quarter-size three-plane scene, quick enough for unit-scale checks.
pub fn small_config() -> ThreePlaneConfig {
    ThreePlaneConfig {
        width: 120,
        height: 90,
        focal: 100.0,
        ..ThreePlaneConfig::default()
    }
}

pub struct SceneData {
    pub scene: PlaneScene,
    pub left: Vec<Event>,
    pub right: Vec<Event>,
    pub observations: Vec<StereoObservation>,
}

/// Events and stereo observations after a 60 ms warm-up.
pub fn scene_data(config: &ThreePlaneConfig) -> SceneData {
    let scene = config.scene().unwrap();
    let model = EventModel::default();
    let left = scene.camera_events(Side::Left, &model).unwrap();
    let right = scene.camera_events(Side::Right, &model).unwrap();
    let times: Vec<_> = scene
        .trajectory
        .samples()
        .iter()
        .filter(|s| s.t >= 60_000)
        .map(|s| (s.t, s.pose))
        .collect();
    let observations =
        build_observations(&left, &right, &times, config.width, config.height, 30_000.0).unwrap();
    SceneData {
        scene,
        left,
        right,
        observations,
    }
}

/// Distance from `c` to the nearest integer.
fn grid_distance(c: f64) -> f64 {
    (c - c.round()).abs()
}

/// Worst relative difference between the analytic Jacobian and a central
/// difference of the residual (h = 1e-4) over `cases` random sub-pixel
/// locations and inverse depths. Cases whose warped centres come within
/// 0.05 px of a bilinear cell edge are skipped.
pub fn jacobian_oracle(data: &SceneData, cases: usize, seed: u64) -> f64 {
    let rig = data.scene.rig;
    let obs = &data.observations;
    let (width, height) = (rig.width() as f64, rig.height() as f64);
    let w = 25;
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut worst) = (0, 0.0f64);
    let mut attempts = 0;
    while checked < cases {
        attempts += 1;
        assert!(attempts < 200 * cases, "too few usable cases");
        let r = rng.random_range(3..obs.len() - 3);
        let s = (r as i64 + rng.random_range(-3..=3i64)) as usize;
        let x = Point2::new(rng.random_range(0.0..width), rng.random_range(0.0..height));
        let rho = rng.random_range(0.25..1.2);
        let t_sr = obs[s].pose.inverse().compose(&obs[r].pose);

        // keep both warped centres, and their motion over +-h, clear of cell edges
        let left = RationalWarpCoefficients::new(&x, &t_sr, &rig.left, &rig.left);
        let right = RationalWarpCoefficients::new(&x, &rig.t_e.compose(&t_sr), &rig.right, &rig.left);
        let (Ok(x1), Ok(x2)) = (left.warp(rho), right.warp(rho)) else { continue };
        let (Ok(d1), Ok(d2)) = (left.derivative(rho), right.derivative(rho)) else { continue };
        let motion = h * [d1.0, d1.1, d2.0, d2.1].iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if [x1.x, x1.y, x2.x, x2.y].iter().any(|c| grid_distance(*c) < 0.05 + motion) {
            continue;
        }

        let (Ok(r0), Ok(rp), Ok(rm)) = (
            residual(x, rho, &obs[s], &t_sr, &rig, w),
            residual(x, rho + h, &obs[s], &t_sr, &rig, w),
            residual(x, rho - h, &obs[s], &t_sr, &rig, w),
        ) else {
            continue;
        };
        let analytic = jacobian(x, rho, &obs[s], &t_sr, &rig, w, 1e-6).unwrap();
        let numeric = (rp - rm) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if r0 < 1.0 || scale < 1e-3 {
            // identical or flat patch pair, nothing to compare
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    worst
}

pub fn random_transform(rng: &mut ChaCha8Rng) -> SE3Transform {
    let q = UnitQuaternion::from_euler_angles(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    let t = Vector3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.2..0.2),
    );
    SE3Transform::from_quaternion(q, t)
}

/// Worst relative difference between the analytic warp derivative and a
/// central difference with h = 1e-6, over `cases` random warps.
pub fn warp_derivative_oracle(cam: &RectifiedCamera, cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < cases {
        let x = Point2::new(
            rng.random_range(0.0..cam.width as f64),
            rng.random_range(0.0..cam.height as f64),
        );
        let rho = rng.random_range(0.2..2.0);
        let coeffs = RationalWarpCoefficients::new(&x, &random_transform(&mut rng), cam, cam);
        let (Ok(plus), Ok(minus), Ok((du, dv))) =
            (coeffs.warp(rho + h), coeffs.warp(rho - h), coeffs.derivative(rho))
        else {
            continue;
        };
        let fd = (plus - minus) / (2.0 * h);
        // relative to the larger component so a near-zero one is not over-weighted
        let scale = du.abs().max(dv.abs()).max(1e-6);
        worst = worst.max((du - fd.x).abs().max((dv - fd.y).abs()) / scale);
        checked += 1;
    }
    worst
}
