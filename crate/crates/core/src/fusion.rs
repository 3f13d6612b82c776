//! Transfer of Gaussian inverse-depth estimates into a chosen reference view
//! and their chi-square gated fusion.

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;

use crate::depth::InverseDepthEstimate;
use crate::error::{Error, Result};
use crate::geometry::{Pixel, RectifiedCamera, SE3Transform};

/// 95% quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_95: f64 = 5.99;

/// Offsets below this (pixels) count as lying on the grid.
pub const GRID_SNAP: f64 = 1e-9;

/// Default confidence filter factor on the largest variance.
pub const DEFAULT_FILTER_FACTOR: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianInverseDepth {
    pub rho: f64,
    pub sigma2: f64,
}

impl GaussianInverseDepth {
    pub fn new(rho: f64, sigma2: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidInverseDepth(rho));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!("variance must be positive, got {sigma2}")));
        }
        Ok(Self { rho, sigma2 })
    }
}

impl From<&InverseDepthEstimate> for GaussianInverseDepth {
    fn from(e: &InverseDepthEstimate) -> Self {
        Self {
            rho: e.rho,
            sigma2: e.sigma2,
        }
    }
}

pub fn chi2_statistic(a: &GaussianInverseDepth, b: &GaussianInverseDepth) -> f64 {
    let d2 = (a.rho - b.rho) * (a.rho - b.rho);
    d2 / a.sigma2 + d2 / b.sigma2
}

pub fn chi2_compatible(a: &GaussianInverseDepth, b: &GaussianInverseDepth) -> bool {
    chi2_statistic(a, b) < CHI2_95
}

/// Product of two compatible Gaussians.
///
/// Written as a weighted update on a canonical operand order, so the result
/// does not depend on argument order and fusing a distribution with itself
/// halves the variance exactly.
pub fn fuse(a: &GaussianInverseDepth, b: &GaussianInverseDepth) -> Result<GaussianInverseDepth> {
    if !chi2_compatible(a, b) {
        return Err(Error::Incompatible);
    }
    let first = a.sigma2.total_cmp(&b.sigma2).then(a.rho.total_cmp(&b.rho)).is_le();
    let (p, q) = if first { (a, b) } else { (b, a) };
    let s = p.sigma2 + q.sigma2;
    Ok(GaussianInverseDepth {
        rho: p.rho + (q.rho - p.rho) * (p.sigma2 / s),
        sigma2: p.sigma2 * (q.sigma2 / s),
    })
}

/// Moves an estimate at pixel `x` of one view into the view reached by
/// `transform` (source camera coordinates to target camera coordinates).
///
/// The variance is carried through the first-order sensitivity of the
/// transferred inverse depth, taken by central finite difference.
pub fn reproject_estimate(
    x: &Point2<f64>,
    est: &GaussianInverseDepth,
    transform: &SE3Transform,
    camera: &RectifiedCamera,
) -> Result<(Point2<f64>, GaussianInverseDepth)> {
    let transfer = |rho: f64| -> Result<(Point2<f64>, f64)> {
        let p = transform.transform_point(&camera.back_project(x, rho)?);
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok((camera.project(&p)?, 1.0 / p.z))
    };
    let (x_f, rho_f) = transfer(est.rho)?;
    let half = -0.5;
    if x_f.x < half
        || x_f.y < half
        || x_f.x >= camera.width as f64 + half
        || x_f.y >= camera.height as f64 + half
    {
        return Err(Error::OutOfBounds);
    }
    let h = 1e-6 * est.rho;
    let (_, plus) = transfer(est.rho + h)?;
    let (_, minus) = transfer(est.rho - h)?;
    let sensitivity = (plus - minus) / (2.0 * h);
    Ok((
        x_f,
        GaussianInverseDepth {
            rho: rho_f,
            sigma2: sensitivity * sensitivity * est.sigma2,
        },
    ))
}

/// Corners of the unit cell containing `x_f` that lie inside the image,
/// deduplicated when `x_f` sits on a grid line.
pub fn neighbor_targets(x_f: &Point2<f64>, width: u32, height: u32) -> Vec<Pixel> {
    // round-trip noise from back-projection should not spread an on-grid hit
    let snap = |c: f64| if (c - c.round()).abs() < GRID_SNAP { c.round() } else { c };
    let x_f = Point2::new(snap(x_f.x), snap(x_f.y));
    let (u0, v0) = (x_f.x.floor(), x_f.y.floor());
    let us: &[f64] = if x_f.x == u0 { &[u0] } else { &[u0, u0 + 1.0] };
    let vs: &[f64] = if x_f.y == v0 { &[v0] } else { &[v0, v0 + 1.0] };
    let mut out = Vec::with_capacity(4);
    for &v in vs {
        for &u in us {
            if u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64 {
                out.push(Pixel::new(u as u32, v as u32));
            }
        }
    }
    out
}

/// Counters for one [`FusionGrid::fuse_view`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionStats {
    pub assigned: usize,
    pub fused: usize,
    pub replaced: usize,
    pub kept: usize,
    pub dropped: usize,
}

/// 3D point recovered from a fused cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    /// World frame, metres.
    pub position: Vector3<f64>,
    pub pixel: Pixel,
    pub rho: f64,
    pub sigma2: f64,
}

/// Per-pixel Gaussian inverse depth in the fusion target view.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrid {
    camera: RectifiedCamera,
    /// world_from_camera of the target view.
    pose: SE3Transform,
    cells: Vec<Option<GaussianInverseDepth>>,
    /// Distinct views folded into each cell's current value.
    support: Vec<u32>,
    /// Last view (1-based) that touched each cell.
    last_view: Vec<u32>,
    views: u32,
}

impl FusionGrid {
    pub fn new(camera: RectifiedCamera, pose: SE3Transform) -> Self {
        Self {
            camera,
            pose,
            cells: vec![None; camera.width as usize * camera.height as usize],
            support: vec![0; camera.width as usize * camera.height as usize],
            last_view: vec![0; camera.width as usize * camera.height as usize],
            views: 0,
        }
    }

    pub fn width(&self) -> u32 {
        self.camera.width
    }

    pub fn height(&self) -> u32 {
        self.camera.height
    }

    pub fn pose(&self) -> &SE3Transform {
        &self.pose
    }

    pub fn camera(&self) -> &RectifiedCamera {
        &self.camera
    }

    pub fn get(&self, p: Pixel) -> Option<GaussianInverseDepth> {
        self.cells[self.index(p)]
    }

    pub fn set(&mut self, p: Pixel, value: Option<GaussianInverseDepth>) {
        let i = self.index(p);
        self.cells[i] = value;
        self.support[i] = u32::from(value.is_some());
        self.last_view[i] = 0;
    }

    /// How many distinct views were fused into the cell's current value.
    pub fn support(&self, p: Pixel) -> u32 {
        self.support[self.index(p)]
    }

    fn index(&self, p: Pixel) -> usize {
        p.v as usize * self.camera.width as usize + p.u as usize
    }

    /// Assigned cells in row-major order.
    pub fn assigned(&self) -> impl Iterator<Item = (Pixel, GaussianInverseDepth)> + '_ {
        let w = self.camera.width;
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.map(|g| (Pixel::new(i as u32 % w, i as u32 / w), g)))
    }

    pub fn density(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn sigma2_max(&self) -> Option<f64> {
        self.assigned().map(|(_, g)| g.sigma2).reduce(f64::max)
    }

    /// Applies one incoming distribution to one cell.
    fn merge(&mut self, target: Pixel, incoming: GaussianInverseDepth, stats: &mut FusionStats) {
        let i = self.index(target);
        let view = self.views;
        self.cells[i] = Some(match self.cells[i] {
            None => {
                stats.assigned += 1;
                self.support[i] = 1;
                self.last_view[i] = view;
                incoming
            }
            Some(existing) => match fuse(&existing, &incoming) {
                Ok(f) => {
                    stats.fused += 1;
                    if self.last_view[i] != view {
                        self.support[i] += 1;
                        self.last_view[i] = view;
                    }
                    f
                }
                Err(_) if incoming.sigma2 < existing.sigma2 => {
                    stats.replaced += 1;
                    self.support[i] = 1;
                    self.last_view[i] = view;
                    incoming
                }
                Err(_) => {
                    stats.kept += 1;
                    existing
                }
            },
        });
    }

    /// Fuses the estimates of a view whose world_from_camera pose is
    /// `source_pose`. Reprojection runs in parallel; cells are updated in
    /// estimate order.
    pub fn fuse_view(&mut self, estimates: &[InverseDepthEstimate], source_pose: &SE3Transform) -> FusionStats {
        let transform = self.pose.inverse().compose(source_pose);
        let camera = self.camera;
        let moved: Vec<_> = estimates
            .par_iter()
            .map(|e| reproject_estimate(&e.pixel.to_point(), &e.into(), &transform, &camera).ok())
            .collect();
        let mut stats = FusionStats::default();
        self.views += 1;
        for m in moved {
            let Some((x_f, g)) = m else {
                stats.dropped += 1;
                continue;
            };
            if !(g.sigma2 > 0.0 && g.rho > 0.0) {
                stats.dropped += 1;
                continue;
            }
            for target in neighbor_targets(&x_f, camera.width, camera.height) {
                self.merge(target, g, &mut stats);
            }
        }
        stats
    }

    /// Cells with `sigma2 < factor * max sigma2` that at least `min_support`
    /// views agreed on, back-projected into the world.
    pub fn filter_confident(&self, factor: f64, min_support: u32) -> Vec<ScenePoint> {
        let Some(max) = self.sigma2_max() else {
            return Vec::new();
        };
        let threshold = factor * max;
        self.assigned()
            .filter(|(p, g)| g.sigma2 < threshold && self.support(*p) >= min_support)
            .filter_map(|(p, g)| {
                let local = self.camera.back_project(&p.to_point(), g.rho).ok()?;
                Some(ScenePoint {
                    position: self.pose.transform_point(&local),
                    pixel: p,
                    rho: g.rho,
                    sigma2: g.sigma2,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn g(rho: f64, sigma2: f64) -> GaussianInverseDepth {
        GaussianInverseDepth::new(rho, sigma2).unwrap()
    }

    fn cam() -> RectifiedCamera {
        RectifiedCamera::new(200.0, 200.0, 120.0, 90.0, 240, 180)
    }

    fn est(u: u32, v: u32, rho: f64, sigma2: f64) -> InverseDepthEstimate {
        InverseDepthEstimate {
            pixel: Pixel::new(u, v),
            rho,
            sigma2,
            gamma: 1.0,
            n_obs: 1,
        }
    }

    #[test]
    fn chi2_cases() {
        assert_eq!(chi2_statistic(&g(1.0, 0.5), &g(1.0, 0.1)), 0.0);
        assert!(chi2_compatible(&g(1.0, 0.5), &g(1.0, 0.1)));
        let (a, b) = (g(3.0, 1.0), g(1.0, 1.0));
        assert_eq!(chi2_statistic(&a, &b), 8.0);
        assert!(!chi2_compatible(&a, &b));
        assert_eq!(chi2_compatible(&b, &a), chi2_compatible(&a, &b));
    }

    #[test]
    fn fuse_worked_values() {
        let f = fuse(&g(2.0, 1.0), &g(4.0, 3.0)).unwrap();
        assert_abs_diff_eq!(f.rho, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.sigma2, 0.75, epsilon = 1e-15);

        let f = fuse(&g(1.0, 0.4), &g(1.2, 0.4)).unwrap();
        assert_abs_diff_eq!(f.rho, 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(f.sigma2, 0.2, epsilon = 1e-15);

        let f = fuse(&g(1.0, 1e-12), &g(1.000001, 0.5)).unwrap();
        assert_abs_diff_eq!(f.rho, 1.0, epsilon = 1e-11);
        assert!(f.sigma2 <= 1e-12);

        assert!(matches!(fuse(&g(3.0, 1.0), &g(1.0, 1.0)), Err(Error::Incompatible)));
    }

    proptest! {
        #[test]
        fn fuse_properties(
            ra in 0.1..3.0f64, rb_off in -0.5..0.5f64,
            sa in 0.01..1.0f64, sb in 0.01..1.0f64, shift in -0.09..2.0f64,
        ) {
            let rb = (ra + rb_off).max(0.05);
            let (a, b) = (g(ra, sa), g(rb, sb));
            prop_assert_eq!(chi2_statistic(&a, &b), chi2_statistic(&b, &a));
            let (a2, b2) = (g(ra + shift + 0.1, sa), g(rb + shift + 0.1, sb));
            prop_assert!((chi2_statistic(&a2, &b2) - chi2_statistic(&a, &b)).abs() <= 1e-9 * chi2_statistic(&a, &b).max(1.0));
            if chi2_compatible(&a, &b) {
                let ab = fuse(&a, &b).unwrap();
                let ba = fuse(&b, &a).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!(ab.sigma2 < sa.min(sb));
            }
            let aa = fuse(&a, &a).unwrap();
            prop_assert_eq!(aa, g(ra, sa / 2.0));
        }
    }

    #[test]
    fn reproject_identity() {
        let x = Point2::new(37.0, 51.0);
        let e = g(0.8, 0.01);
        let (xf, ef) = reproject_estimate(&x, &e, &SE3Transform::identity(), &cam()).unwrap();
        assert_abs_diff_eq!(xf, x, epsilon = 1e-12);
        assert_abs_diff_eq!(ef.rho, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(ef.sigma2, 0.01, epsilon = 1e-9);
    }

    #[test]
    fn reproject_z_translation() {
        let d = 0.3;
        // target camera sits d metres further along the optical axis
        let t = SE3Transform::from_translation(Vector3::new(0.0, 0.0, -d));
        let x = Point2::new(120.0, 90.0);
        for rho in [0.4, 0.9, 2.0] {
            let (_, ef) = reproject_estimate(&x, &g(rho, 0.01), &t, &cam()).unwrap();
            assert_abs_diff_eq!(1.0 / ef.rho, 1.0 / rho - d, epsilon = 1e-12);
        }
    }

    #[test]
    fn reproject_variance_matches_monte_carlo() {
        let t = SE3Transform::from_quaternion(
            UnitQuaternion::from_euler_angles(0.02, -0.05, 0.01),
            Vector3::new(0.1, -0.05, -0.4),
        );
        let x = Point2::new(150.0, 70.0);
        let e = g(0.7, 0.02 * 0.02);
        let (_, ef) = reproject_estimate(&x, &e, &t, &cam()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(e.rho, e.sigma2.sqrt()).unwrap();
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                let rho = normal.sample(&mut rng);
                let p = t.transform_point(&cam().back_project(&x, rho).unwrap());
                1.0 / p.z
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!((var / ef.sigma2 - 1.0).abs() < 0.1, "mc {var} vs {}", ef.sigma2);
    }

    #[test]
    fn reproject_behind_or_outside_is_dropped() {
        let t = SE3Transform::from_translation(Vector3::new(0.0, 0.0, -5.0));
        assert!(reproject_estimate(&Point2::new(10.0, 10.0), &g(0.5, 0.1), &t, &cam()).is_err());
        let t = SE3Transform::from_translation(Vector3::new(5.0, 0.0, 0.0));
        assert!(matches!(
            reproject_estimate(&Point2::new(10.0, 10.0), &g(0.5, 0.1), &t, &cam()),
            Err(Error::OutOfBounds)
        ));
    }

    #[test]
    fn neighbor_target_cases() {
        let mut n = neighbor_targets(&Point2::new(10.5, 20.5), 240, 180);
        n.sort();
        let mut expected = vec![Pixel::new(10, 20), Pixel::new(11, 20), Pixel::new(10, 21), Pixel::new(11, 21)];
        expected.sort();
        assert_eq!(n, expected);
        assert_eq!(neighbor_targets(&Point2::new(10.0, 20.0), 240, 180), vec![Pixel::new(10, 20)]);
        assert_eq!(neighbor_targets(&Point2::new(0.2, 0.3), 240, 180).len(), 4);
        assert_eq!(
            neighbor_targets(&Point2::new(-0.3, 0.0), 240, 180),
            vec![Pixel::new(0, 0)]
        );
        let edge = neighbor_targets(&Point2::new(239.4, 179.6), 240, 180);
        assert_eq!(edge, vec![Pixel::new(239, 179)]);
        for p in neighbor_targets(&Point2::new(3.7, 8.2), 240, 180) {
            let d = ((p.u as f64 - 3.7).powi(2) + (p.v as f64 - 8.2).powi(2)).sqrt();
            assert!(d < 2f64.sqrt());
        }
    }

    #[test]
    fn grid_rules() {
        let mut grid = FusionGrid::new(cam(), SE3Transform::identity());
        let stats = grid.fuse_view(&[est(10, 20, 1.0, 0.1)], &SE3Transform::identity());
        assert_eq!(stats.assigned, 1);
        assert_eq!(grid.density(), 1);

        // a sub-pixel landing touches four cells
        let shifted = SE3Transform::from_translation(Vector3::new(0.5 / 200.0, 0.5 / 200.0, 0.0));
        let mut grid = FusionGrid::new(cam(), SE3Transform::identity());
        grid.fuse_view(&[est(50, 60, 1.0, 0.1)], &shifted);
        assert_eq!(grid.density(), 4);

        // incompatible and less certain: unchanged
        let mut grid = FusionGrid::new(cam(), SE3Transform::identity());
        grid.fuse_view(&[est(10, 20, 1.0, 0.01)], &SE3Transform::identity());
        let s = grid.fuse_view(&[est(10, 20, 1.5, 0.02)], &SE3Transform::identity());
        assert_eq!(s.kept, 1);
        let kept = grid.get(Pixel::new(10, 20)).unwrap();
        assert_abs_diff_eq!(kept.sigma2, 0.01, epsilon = 1e-9);
        // incompatible and more certain: replaced
        let s = grid.fuse_view(&[est(10, 20, 1.5, 0.001)], &SE3Transform::identity());
        assert_eq!(s.replaced, 1);
        let replaced = grid.get(Pixel::new(10, 20)).unwrap();
        assert_abs_diff_eq!(replaced.rho, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(replaced.sigma2, 0.001, epsilon = 1e-9);
    }

    #[test]
    fn self_fusion_halves_variance() {
        let estimates: Vec<_> = (0..20).map(|i| est(30 + i, 40, 0.5 + 0.01 * i as f64, 0.02)).collect();
        let mut grid = FusionGrid::new(cam(), SE3Transform::identity());
        grid.fuse_view(&estimates, &SE3Transform::identity());
        let before: Vec<_> = grid.assigned().collect();
        grid.fuse_view(&estimates, &SE3Transform::identity());
        for ((p0, g0), (p1, g1)) in before.iter().zip(grid.assigned()) {
            assert_eq!(*p0, p1);
            assert_abs_diff_eq!(g1.rho, g0.rho, epsilon = 1e-12);
            assert_abs_diff_eq!(g1.sigma2, g0.sigma2 / 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn filter_rule() {
        let mut grid = FusionGrid::new(cam(), SE3Transform::identity());
        assert!(grid.filter_confident(0.8, 1).is_empty());
        grid.fuse_view(&[est(10, 20, 1.0, 0.5), est(12, 20, 1.0, 0.5)], &SE3Transform::identity());
        assert!(grid.filter_confident(0.8, 1).is_empty());

        let mut grid = FusionGrid::new(cam(), SE3Transform::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let pose = *grid.pose();
        grid.fuse_view(&[est(120, 90, 0.5, 1.0), est(12, 20, 1.0, 10.0)], &pose);
        let pts = grid.filter_confident(0.8, 1);
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].pixel, Pixel::new(120, 90));
        assert_abs_diff_eq!(pts[0].position, Vector3::new(1.0, 0.0, 2.0), epsilon = 1e-9);
    }

    #[test]
    fn support_counts_views() {
        let id = SE3Transform::identity();
        let mut grid = FusionGrid::new(cam(), id);
        // two estimates of one view landing on the same cell count once
        grid.fuse_view(&[est(10, 20, 1.0, 0.5)], &id);
        grid.fuse_view(&[est(10, 20, 1.0, 0.5), est(30, 40, 1.0, 0.5)], &id);
        assert_eq!(grid.support(Pixel::new(10, 20)), 2);
        assert_eq!(grid.support(Pixel::new(30, 40)), 1);
        let kept: Vec<_> = grid.filter_confident(1.0, 2).iter().map(|p| p.pixel).collect();
        assert_eq!(kept, vec![Pixel::new(10, 20)]);
        assert!(grid.filter_confident(1.0, 3).is_empty());

        // an incompatible, more certain estimate restarts the count
        grid.fuse_view(&[est(10, 20, 2.0, 0.01)], &id);
        assert_eq!(grid.support(Pixel::new(10, 20)), 1);
        assert_eq!(grid.get(Pixel::new(10, 20)).unwrap().rho, 2.0);
    }
}
