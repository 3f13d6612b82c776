mod common;

use nalgebra::{UnitQuaternion, Vector3};

use evstereo::geometry::{Pixel, RectifiedCamera, SE3Transform, StereoRig};
use evstereo::ingest::{PoseSample, Side, Trajectory};
use evstereo::synthetic::{Plane, PlaneScene, Texture};

/// Steps along the unit ray until it passes `Z = depth`, then bisects.
fn ray_march(origin: &Vector3<f64>, dir: &Vector3<f64>, depth: f64) -> Option<Vector3<f64>> {
    let dir = dir.normalize();
    let step = 1e-2;
    let side = |s: f64| (origin + dir * s).z - depth;
    let (mut lo, mut hi) = (0.0, step);
    while side(hi).signum() == side(lo).signum() {
        lo = hi;
        hi += step;
        if hi > 100.0 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if side(mid).signum() == side(lo).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(origin + dir * (0.5 * (lo + hi)))
}

#[test]
fn tilted_camera_matches_ray_march() {
    let cam = RectifiedCamera::new(180.0, 180.0, 60.0, 45.0, 120, 90);
    let pose = SE3Transform::from_quaternion(
        UnitQuaternion::from_euler_angles(0.15, -0.25, 0.1),
        Vector3::new(0.2, -0.1, -0.3),
    );
    let scene = PlaneScene {
        rig: StereoRig::rectified(cam, 0.1),
        planes: vec![Plane::infinite(2.0, Texture::VerticalEdge { x: 0.0 })],
        trajectory: Trajectory::new(vec![
            PoseSample { t: 0, pose },
            PoseSample { t: 1000, pose },
        ])
        .unwrap(),
    };
    let mut checked = 0;
    for v in (0..90).step_by(7) {
        for u in (0..120).step_by(7) {
            let hit = scene.cast(&cam, &pose, u as f64, v as f64).unwrap();
            let ray = Vector3::new((u as f64 - cam.cx) / cam.fx, (v as f64 - cam.cy) / cam.fy, 1.0);
            let world = ray_march(pose.translation(), &(pose.rotation() * ray), 2.0).unwrap();
            let local = pose.inverse().transform_point(&world);
            assert!((hit.depth - local.z).abs() < 1e-9, "{} vs {}", hit.depth, local.z);
            assert!((hit.x - world.x).abs() < 1e-9 && (hit.y - world.y).abs() < 1e-9);
            let gt = scene.ground_truth_inverse_depth(&pose, Pixel::new(u, v)).unwrap();
            assert!((gt - 1.0 / local.z).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 200);
}

#[test]
fn ground_truth_agrees_with_stereo_disparity() {
    let config = common::small_config();
    let scene = config.scene().unwrap();
    let pose = scene.camera_pose(Side::Left, 200_000.0);
    let right_pose = scene.camera_pose(Side::Right, 200_000.0);
    let (mut same_plane, mut total) = (0, 0);
    for v in (0..config.height).step_by(3) {
        for u in (0..config.width).step_by(3) {
            let hit = scene.cast(&scene.rig.left, &pose, u as f64, v as f64).unwrap();
            let rho = 1.0 / hit.depth;
            let u_right = u as f64 - config.focal * config.baseline * rho;
            if u_right < 0.0 {
                continue;
            }
            total += 1;
            let other = scene.cast(&scene.rig.right, &right_pose, u_right, v as f64).unwrap();
            if other.plane == hit.plane {
                same_plane += 1;
                assert!((1.0 / other.depth - rho).abs() < 1e-9);
                assert!((other.x - hit.x).abs() < 1e-9 && (other.y - hit.y).abs() < 1e-9);
            } else {
                // the right camera sees something else only when it is occluded
                assert!(other.depth < hit.depth, "({u}, {v})");
            }
        }
    }
    assert!(same_plane as f64 > 0.5 * total as f64, "{same_plane} of {total}");
}

#[test]
fn scene_spans_the_required_depth_range() {
    let config = common::small_config();
    let scene = config.scene().unwrap();
    let gt = scene.ground_truth_map(&scene.camera_pose(Side::Left, 200_000.0));
    assert!(gt.depth_range().unwrap() >= 2.5);
    let rhos: Vec<f64> = (0..config.width)
        .filter_map(|u| gt.get(Pixel::new(u, config.height / 2)))
        .collect();
    for z in config.depths {
        assert!(rhos.iter().any(|r| (r - 1.0 / z).abs() < 1e-12), "plane at {z} m not visible");
    }
}
