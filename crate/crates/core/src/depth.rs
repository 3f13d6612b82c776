//! Per-pixel inverse-depth estimation at a reference view.
//!
//! For a reference pixel `x` and a hypothesis `rho`, each stereo observation
//! `s` contributes a temporal residual `r_s(rho)`: the l2 distance between the
//! left and right time-surface patches at the locations where the
//! back-projected point lands in both cameras. The estimator minimises the
//! mean of `r_s^2` by a coarse grid search followed by Gauss-Newton on the
//! scalar residuals, and reports `sigma_r^2 / sum_s J_s^2` as the variance.

use nalgebra::Point2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pixel, RationalWarpCoefficients, SE3Transform, StereoRig};
use crate::time_surface::{patch_distance_and_slope, patch_distance_sq, ReferenceView, StereoObservation};

/// Patch width used throughout.
pub const DEFAULT_PATCH_WIDTH: usize = 25;

/// Minimum sample count for fitting the residual distribution.
pub const MIN_SIGMA_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRangeConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub coarse_step: f64,
    /// Odd patch width `w`; patches hold `w * w` samples.
    pub patch_width: usize,
    /// Added to the residual norm in the Jacobian denominator.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step is smaller than this.
    pub convergence: f64,
    /// Step halvings tried before an iteration is declared divergent.
    pub max_halvings: usize,
    /// Fraction of the observations whose patches must fit in their images
    /// for a hypothesis to be scored.
    pub min_valid_fraction: f64,
}

impl Default for DepthRangeConfig {
    fn default() -> Self {
        Self {
            rho_min: 0.1,
            rho_max: 2.0,
            coarse_step: 0.05,
            patch_width: DEFAULT_PATCH_WIDTH,
            epsilon: 1e-6,
            max_iterations: 10,
            convergence: 1e-4,
            max_halvings: 5,
            min_valid_fraction: 0.5,
        }
    }
}

impl DepthRangeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.rho_min > 0.0 && self.rho_min < self.rho_max && self.rho_max.is_finite()) {
            return fail(format!(
                "inverse-depth range must satisfy 0 < min < max, got [{}, {}]",
                self.rho_min, self.rho_max
            ));
        }
        if !(self.coarse_step > 0.0 && self.coarse_step <= 0.1) {
            return fail(format!("coarse step must lie in (0, 0.1], got {}", self.coarse_step));
        }
        if self.patch_width == 0 || self.patch_width % 2 == 0 {
            return fail(format!("patch width must be odd, got {}", self.patch_width));
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive".into());
        }
        if !(self.min_valid_fraction > 0.0 && self.min_valid_fraction <= 1.0) {
            return fail(format!("valid fraction must lie in (0, 1], got {}", self.min_valid_fraction));
        }
        if self.max_iterations == 0 || !(self.convergence > 0.0) {
            return fail("need at least one iteration and a positive convergence threshold".into());
        }
        Ok(())
    }

    /// `{rho_min, rho_min + step, ..., rho_max}`.
    pub fn coarse_grid(&self) -> Vec<f64> {
        let n = ((self.rho_max - self.rho_min) / self.coarse_step + 1e-9).floor() as usize;
        let mut grid: Vec<f64> = (0..=n)
            .map(|k| self.rho_min + k as f64 * self.coarse_step)
            .collect();
        if self.rho_max - grid[n] > 1e-9 * self.coarse_step {
            grid.push(self.rho_max);
        }
        grid
    }

    pub fn clamp(&self, rho: f64) -> f64 {
        rho.clamp(self.rho_min, self.rho_max)
    }
}

/// Gaussian inverse-depth estimate for one reference pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthEstimate {
    pub pixel: Pixel,
    pub rho: f64,
    pub sigma2: f64,
    /// `sum_s J_s^2` at the returned `rho`.
    pub gamma: f64,
    pub n_obs: usize,
}

impl InverseDepthEstimate {
    /// Re-derives the variance for a different residual noise level.
    pub fn with_sigma_r(mut self, sigma_r: f64) -> Self {
        self.sigma2 = sigma_r * sigma_r / self.gamma;
        self
    }
}

/// Moment fit of the temporal residual distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub sigma_r: f64,
    pub samples: usize,
    /// The configured default was used because the fit was not usable.
    pub fallback: bool,
}

/// Residuals and Jacobians of all usable observations at one hypothesis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub residuals: Vec<f64>,
    pub jacobians: Vec<f64>,
}

impl Evaluation {
    pub fn energy(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum::<f64>() / self.residuals.len() as f64
    }

    pub fn gamma(&self) -> f64 {
        self.jacobians.iter().map(|j| j * j).sum()
    }

    fn jr(&self) -> f64 {
        self.jacobians.iter().zip(&self.residuals).map(|(j, r)| j * r).sum()
    }
}

/// Anything that yields per-observation residuals and Jacobians in `rho`.
pub trait ResidualModel {
    /// `None` when no observation is usable at `rho`.
    fn evaluate(&mut self, rho: f64) -> Option<Evaluation>;

    /// Mean squared residual, `None` when no observation is usable.
    fn energy(&mut self, rho: f64) -> Option<f64> {
        self.evaluate(rho).map(|e| e.energy())
    }
}

struct Link<'a> {
    obs: &'a StereoObservation,
    left: RationalWarpCoefficients,
    right: RationalWarpCoefficients,
}

/// The stereo time-surface cost of one reference pixel over a set of observations.
pub struct PixelCost<'a> {
    links: Vec<Link<'a>>,
    min_valid: usize,
    w: usize,
    epsilon: f64,
}

impl<'a> PixelCost<'a> {
    /// `rv_pose` and every observation pose are world_from_left-camera.
    pub fn new(
        x: Point2<f64>,
        rv_pose: &SE3Transform,
        observations: &'a [StereoObservation],
        rig: &StereoRig,
        w: usize,
        epsilon: f64,
    ) -> Self {
        let links = observations
            .iter()
            .map(|obs| {
                let t_sr = obs.pose.inverse().compose(rv_pose);
                let to_right = rig.t_e.compose(&t_sr);
                Link {
                    obs,
                    left: RationalWarpCoefficients::new(&x, &t_sr, &rig.left, &rig.left),
                    right: RationalWarpCoefficients::new(&x, &to_right, &rig.right, &rig.left),
                }
            })
            .collect();
        Self {
            links,
            min_valid: 1,
            w,
            epsilon,
        }
    }

    /// Hypotheses with fewer usable observations than `n` score as unusable.
    pub fn with_min_valid(mut self, n: usize) -> Self {
        self.min_valid = n.max(1);
        self
    }

    pub fn observation_count(&self) -> usize {
        self.links.len()
    }

    /// Warped locations `(x1, x2)` in observation `s`.
    pub fn warped(&self, s: usize, rho: f64) -> Option<(Point2<f64>, Point2<f64>)> {
        let link = &self.links[s];
        Some((link.left.warp(rho).ok()?, link.right.warp(rho).ok()?))
    }

    /// `r_s(rho)`, or `None` when either patch leaves its image.
    pub fn residual(&mut self, s: usize, rho: f64) -> Option<f64> {
        let w = self.w;
        let link = &self.links[s];
        let x1 = link.left.warp(rho).ok()?;
        let x2 = link.right.warp(rho).ok()?;
        let l1 = link.obs.left.layout(&x1, w)?;
        let l2 = link.obs.right.layout(&x2, w)?;
        Some(patch_distance_sq(&l1, link.obs.left.values(), &l2, link.obs.right.values(), w).sqrt())
    }

    /// `(r_s, J_s)` at `rho`.
    pub fn residual_and_jacobian(&mut self, s: usize, rho: f64) -> Option<(f64, f64)> {
        let w = self.w;
        let link = &self.links[s];
        let x1 = link.left.warp(rho).ok()?;
        let x2 = link.right.warp(rho).ok()?;
        let (du1, dv1) = link.left.derivative(rho).ok()?;
        let (du2, dv2) = link.right.derivative(rho).ok()?;
        let l1 = link.obs.left.layout(&x1, w)?;
        let l2 = link.obs.right.layout(&x2, w)?;
        let (sum, dot) = patch_distance_and_slope(
            &l1,
            link.obs.left.values(),
            (du1, dv1),
            &l2,
            link.obs.right.values(),
            (du2, dv2),
            w,
        );
        let r = sum.sqrt();
        Some((r, dot / (r + self.epsilon)))
    }
}

impl ResidualModel for PixelCost<'_> {
    fn evaluate(&mut self, rho: f64) -> Option<Evaluation> {
        let mut e = Evaluation::default();
        for s in 0..self.links.len() {
            if let Some((r, j)) = self.residual_and_jacobian(s, rho) {
                e.residuals.push(r);
                e.jacobians.push(j);
            }
        }
        (e.residuals.len() >= self.min_valid).then_some(e)
    }

    fn energy(&mut self, rho: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for s in 0..self.links.len() {
            if let Some(r) = self.residual(s, rho) {
                sum += r * r;
                n += 1;
            }
        }
        (n >= self.min_valid).then(|| sum / n as f64)
    }
}

/// Temporal residual of reference pixel `x` in one observation; `t_sr` maps
/// reference-camera coordinates into the observation's left camera.
pub fn residual(
    x: Point2<f64>,
    rho: f64,
    obs: &StereoObservation,
    t_sr: &SE3Transform,
    rig: &StereoRig,
    w: usize,
) -> Result<f64> {
    let rv_pose = obs.pose.compose(t_sr);
    PixelCost::new(x, &rv_pose, std::slice::from_ref(obs), rig, w, 1e-6)
        .residual(0, rho)
        .ok_or(Error::OutOfBounds)
}

/// `dr_s/drho` with the `1 / (r_s + epsilon)` regularised normalisation.
pub fn jacobian(
    x: Point2<f64>,
    rho: f64,
    obs: &StereoObservation,
    t_sr: &SE3Transform,
    rig: &StereoRig,
    w: usize,
    epsilon: f64,
) -> Result<f64> {
    let rv_pose = obs.pose.compose(t_sr);
    PixelCost::new(x, &rv_pose, std::slice::from_ref(obs), rig, w, epsilon)
        .residual_and_jacobian(0, rho)
        .map(|(_, j)| j)
        .ok_or(Error::OutOfBounds)
}

/// Mean squared residual over the observations usable at `rho`.
pub fn energy(
    x: Point2<f64>,
    rho: f64,
    rv_pose: &SE3Transform,
    observations: &[StereoObservation],
    rig: &StereoRig,
    w: usize,
) -> Result<f64> {
    PixelCost::new(x, rv_pose, observations, rig, w, 1e-6)
        .energy(rho)
        .ok_or(Error::NoData)
}

/// Grid point with the lowest energy; ties go to the smaller inverse depth.
pub fn coarse_search<M: ResidualModel + ?Sized>(model: &mut M, config: &DepthRangeConfig) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for rho in config.coarse_grid() {
        if let Some(e) = model.energy(rho) {
            if best.is_none_or(|(_, be)| e < be) {
                best = Some((rho, e));
            }
        }
    }
    best.map(|(rho, _)| rho).ok_or(Error::NoData)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub rho: f64,
    pub gamma: f64,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// No trial along the last direction lowered the energy; `rho` is the best iterate seen.
    pub diverged: bool,
    /// Residuals of the usable observations at `rho`.
    pub residuals: Vec<f64>,
}

/// Gauss-Newton on the scalar residuals starting at `rho0`.
///
/// A step that raises the energy is retried at half length, up to
/// `max_halvings` times; if none of the trials descends, the iteration stops
/// at the best iterate with `diverged` set.
pub fn gauss_newton_refine<M: ResidualModel + ?Sized>(
    model: &mut M,
    rho0: f64,
    config: &DepthRangeConfig,
) -> Result<Refinement> {
    let mut rho = config.clamp(rho0);
    let mut current = model.evaluate(rho).ok_or(Error::NoData)?;
    if !(current.gamma() > 0.0) {
        return Err(Error::Textureless);
    }
    let mut current_energy = current.energy();
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;

    'outer: while iterations < config.max_iterations {
        iterations += 1;
        let gamma = current.gamma();
        if !(gamma > 0.0) {
            break;
        }
        let delta = -current.jr() / gamma;
        let mut scale = 1.0;
        for _ in 0..=config.max_halvings {
            let candidate = config.clamp(rho + scale * delta);
            let step = candidate - rho;
            if step == 0.0 {
                converged = true;
                break 'outer;
            }
            // the cheaper energy decides; Jacobians only for accepted steps
            let accepted = model.energy(candidate).is_some_and(|e| e <= current_energy);
            if let Some(next) = accepted.then(|| model.evaluate(candidate)).flatten() {
                rho = candidate;
                current_energy = next.energy();
                current = next;
                if step.abs() < config.convergence {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            scale *= 0.5;
        }
        // every trial along the Gauss-Newton direction raised the energy
        diverged = true;
        break;
    }

    let gamma = current.gamma();
    if !(gamma > 0.0) {
        return Err(Error::Textureless);
    }
    Ok(Refinement {
        rho,
        gamma,
        energy: current_energy,
        iterations,
        converged,
        diverged,
        residuals: current.residuals,
    })
}

/// First-order variance `sigma_r^2 / gamma`.
pub fn estimate_uncertainty(gamma: f64, sigma_r: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Textureless);
    }
    if !(sigma_r > 0.0) {
        return Err(Error::Config(format!("sigma_r must be positive, got {sigma_r}")));
    }
    Ok(sigma_r * sigma_r / gamma)
}

/// Gaussian moment fit to residual samples. Falls back to `default_sigma_r`
/// with fewer than [`MIN_SIGMA_SAMPLES`] samples or a degenerate spread.
pub fn estimate_sigma_r(samples: &[f64], default_sigma_r: f64) -> ResidualStats {
    let n = samples.len();
    if n < MIN_SIGMA_SAMPLES {
        log::warn!("only {n} residual samples; using default sigma_r {default_sigma_r}");
        return ResidualStats {
            mean: f64::NAN,
            sigma_r: default_sigma_r,
            samples: n,
            fallback: true,
        };
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        log::warn!("degenerate residual spread; using default sigma_r {default_sigma_r}");
        return ResidualStats {
            mean,
            sigma_r: default_sigma_r,
            samples: n,
            fallback: true,
        };
    }
    ResidualStats {
        mean,
        sigma_r: sigma,
        samples: n,
        fallback: false,
    }
}

/// Result of estimating every masked pixel of a reference view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reconstruction {
    /// Row-major by pixel.
    pub estimates: Vec<InverseDepthEstimate>,
    /// Converged residuals of every accepted pixel, in pixel order.
    pub residuals: Vec<f64>,
    pub rejected: usize,
}

/// Coarse search plus refinement for one reference pixel.
pub fn estimate_pixel(
    pixel: Pixel,
    rv_pose: &SE3Transform,
    observations: &[StereoObservation],
    rig: &StereoRig,
    config: &DepthRangeConfig,
    sigma_r: f64,
) -> Result<(InverseDepthEstimate, Vec<f64>)> {
    let mut cost = PixelCost::new(
        pixel.to_point(),
        rv_pose,
        observations,
        rig,
        config.patch_width,
        config.epsilon,
    )
    .with_min_valid((config.min_valid_fraction * observations.len() as f64).ceil() as usize);
    let rho0 = coarse_search(&mut cost, config)?;
    let refined = gauss_newton_refine(&mut cost, rho0, config)?;
    let sigma2 = estimate_uncertainty(refined.gamma, sigma_r)?;
    Ok((
        InverseDepthEstimate {
            pixel,
            rho: refined.rho,
            sigma2,
            gamma: refined.gamma,
            n_obs: refined.residuals.len(),
        },
        refined.residuals,
    ))
}

/// Estimates every pixel of `rv.mask` independently. Work is spread over the
/// current rayon pool; the output order does not depend on the thread count.
pub fn reconstruct_reference_view(
    rv: &ReferenceView,
    observations: &[StereoObservation],
    rig: &StereoRig,
    config: &DepthRangeConfig,
    sigma_r: f64,
) -> Result<Reconstruction> {
    config.validate()?;
    if rv.mask.is_empty() {
        return Ok(Reconstruction::default());
    }
    if observations.is_empty() {
        return Err(Error::NoData);
    }
    let results: Vec<_> = rv
        .mask
        .par_iter()
        .map(|px| estimate_pixel(*px, &rv.pose, observations, rig, config, sigma_r).ok())
        .collect();
    let mut out = Reconstruction::default();
    for r in results {
        match r {
            Some((est, residuals)) => {
                out.estimates.push(est);
                out.residuals.extend(residuals);
            }
            None => out.rejected += 1,
        }
    }
    Ok(out)
}

/// Residuals of the masked pixels at a known inverse depth, for calibrating
/// `sigma_r` against ground truth.
pub fn sample_residuals(
    rv: &ReferenceView,
    observations: &[StereoObservation],
    rig: &StereoRig,
    w: usize,
    inverse_depth: impl Fn(Pixel) -> Option<f64> + Sync,
) -> Vec<f64> {
    let per_pixel: Vec<Vec<f64>> = rv
        .mask
        .par_iter()
        .map(|px| {
            let Some(rho) = inverse_depth(*px) else {
                return Vec::new();
            };
            let mut cost = PixelCost::new(px.to_point(), &rv.pose, observations, rig, w, 1e-6);
            (0..cost.observation_count())
                .filter_map(|s| cost.residual(s, rho))
                .collect()
        })
        .collect();
    per_pixel.into_iter().flatten().collect()
}
