//! Rigid transforms, rectified pinhole cameras and the rational inverse-depth warp.
//!
//! All pixel coordinates are rectified and undistorted. A pixel `x` of the
//! reference camera back-projected at inverse depth `rho`, moved by a rigid
//! transform and projected into a target camera lands at
//!
//! ```text
//! u(rho) = (A + B rho) / (C + D rho),   v(rho) = (A' + B' rho) / (C + D rho)
//! ```
//!
//! which makes the derivative with respect to `rho` available in closed form.

use nalgebra::{Matrix3, Matrix3x4, Point2, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// `|C + D rho|` below this is treated as a degenerate warp.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Integer pixel coordinate. Ordering is row-major (`v` first, then `u`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub v: u32,
    pub u: u32,
}

impl Pixel {
    pub fn new(u: u32, v: u32) -> Self {
        Self { v, u }
    }

    pub fn to_point(self) -> Point2<f64> {
        Point2::new(self.u as f64, self.v as f64)
    }
}

/// Rigid-body transform `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Transform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "R^T R deviates from identity by {orth:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_quaternion(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.to_rotation_matrix().matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        SE3Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Transform {
        let rt = self.rotation.transpose();
        SE3Transform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Largest absolute entry difference against `other`.
    pub fn max_abs_diff(&self, other: &SE3Transform) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

/// Skew-free rectified pinhole camera described by a 3x4 projection matrix
///
/// ```text
/// | fx  0  cx  p14 |
/// |  0 fy  cy  p24 |
/// |  0  0   1  p34 |
/// ```
///
/// The fourth column is zero for the left (reference) camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifiedCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Fourth column `(p14, p24, p34)`.
    pub offset: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl RectifiedCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            offset: Vector3::zeros(),
            width,
            height,
        }
    }

    pub fn with_offset(mut self, offset: Vector3<f64>) -> Self {
        self.offset = offset;
        self
    }

    /// Validates a full 3x4 projection matrix against the rectified form.
    pub fn from_projection(p: &Matrix3x4<f64>, width: u32, height: u32) -> Result<Self> {
        const TOL: f64 = 1e-12;
        let zero_entries = [(0, 1), (1, 0), (2, 0), (2, 1)];
        for (r, c) in zero_entries {
            if p[(r, c)].abs() > TOL {
                return Err(Error::InvalidProjection(format!(
                    "entry p{}{} must be zero, got {}",
                    r + 1,
                    c + 1,
                    p[(r, c)]
                )));
            }
        }
        if (p[(2, 2)] - 1.0).abs() > TOL {
            return Err(Error::InvalidProjection(format!(
                "entry p33 must be 1, got {}",
                p[(2, 2)]
            )));
        }
        if p[(0, 0)] <= 0.0 || p[(1, 1)] <= 0.0 {
            return Err(Error::InvalidProjection(
                "focal lengths must be positive".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidProjection("empty image size".into()));
        }
        Ok(Self {
            fx: p[(0, 0)],
            fy: p[(1, 1)],
            cx: p[(0, 2)],
            cy: p[(1, 2)],
            offset: Vector3::new(p[(0, 3)], p[(1, 3)], p[(2, 3)]),
            width,
            height,
        })
    }

    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        Matrix3x4::new(
            self.fx,
            0.0,
            self.cx,
            self.offset.x,
            0.0,
            self.fy,
            self.cy,
            self.offset.y,
            0.0,
            0.0,
            1.0,
            self.offset.z,
        )
    }

    pub fn has_zero_offset(&self) -> bool {
        self.offset == Vector3::zeros()
    }

    /// True when `x` lies inside `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, x: &Point2<f64>) -> bool {
        x.x >= 0.0
            && x.y >= 0.0
            && x.x <= (self.width - 1) as f64
            && x.y <= (self.height - 1) as f64
    }

    /// Back-projects pixel `x` at inverse depth `rho` to a camera-frame point
    /// (the homogeneous coordinate is implicitly 1). Uses the intrinsic block
    /// only, so it is meant for cameras with a zero fourth column.
    pub fn back_project(&self, x: &Point2<f64>, rho: f64) -> Result<Vector3<f64>> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidInverseDepth(rho));
        }
        Ok(Vector3::new(
            (x.x - self.cx) / (self.fx * rho),
            (x.y - self.cy) / (self.fy * rho),
            1.0 / rho,
        ))
    }

    /// Dehomogenized projection of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Point2<f64>> {
        let w = p.z + self.offset.z;
        if !(w > 0.0) {
            return Err(Error::BehindCamera(w));
        }
        let u = self.fx * p.x + self.cx * p.z + self.offset.x;
        let v = self.fy * p.y + self.cy * p.z + self.offset.y;
        Ok(Point2::new(u / w, v / w))
    }
}

/// Rectified stereo pair. `t_e` maps left-camera coordinates into the right camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub left: RectifiedCamera,
    pub right: RectifiedCamera,
    pub t_e: SE3Transform,
}

impl StereoRig {
    /// Horizontal rectified pair with the right camera `baseline` metres along +x.
    pub fn rectified(left: RectifiedCamera, baseline: f64) -> Self {
        Self {
            left,
            right: left,
            t_e: SE3Transform::from_translation(Vector3::new(-baseline, 0.0, 0.0)),
        }
    }

    pub fn width(&self) -> u32 {
        self.left.width
    }

    pub fn height(&self) -> u32 {
        self.left.height
    }
}

/// Coefficients of the warp `u = (A + B rho)/(C + D rho)`, `v = (A' + B' rho)/(C + D rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationalWarpCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub a_prime: f64,
    pub b_prime: f64,
}

impl RationalWarpCoefficients {
    /// Coefficients for pixel `x` of `cam_ref`, moved by `transform` and seen by `cam`.
    pub fn new(
        x: &Point2<f64>,
        transform: &SE3Transform,
        cam: &RectifiedCamera,
        cam_ref: &RectifiedCamera,
    ) -> Self {
        let r = transform.rotation();
        let t = transform.translation();
        let xn = (x.x - cam_ref.cx) / cam_ref.fx;
        let yn = (x.y - cam_ref.cy) / cam_ref.fy;
        // rotated bearing, i.e. R (xn, yn, 1)
        let q0 = r[(0, 0)] * xn + r[(0, 1)] * yn + r[(0, 2)];
        let q1 = r[(1, 0)] * xn + r[(1, 1)] * yn + r[(1, 2)];
        let q2 = r[(2, 0)] * xn + r[(2, 1)] * yn + r[(2, 2)];
        Self {
            a: cam.fx * q0 + cam.cx * q2,
            b: cam.fx * t.x + cam.cx * t.z + cam.offset.x,
            c: q2,
            d: t.z + cam.offset.z,
            a_prime: cam.fy * q1 + cam.cy * q2,
            b_prime: cam.fy * t.y + cam.cy * t.z + cam.offset.y,
        }
    }

    fn denominator(&self, rho: f64) -> Result<f64> {
        let den = self.c + self.d * rho;
        if den.abs() < DEGENERATE_DENOMINATOR {
            return Err(Error::DegenerateWarp(den));
        }
        Ok(den)
    }

    /// Warped subpixel location. Fails for a degenerate or negative denominator
    /// (the point would sit on or behind the target camera plane).
    pub fn warp(&self, rho: f64) -> Result<Point2<f64>> {
        let den = self.denominator(rho)?;
        if den < 0.0 {
            return Err(Error::BehindCamera(den));
        }
        Ok(Point2::new(
            (self.a + self.b * rho) / den,
            (self.a_prime + self.b_prime * rho) / den,
        ))
    }

    /// `(du/drho, dv/drho)`.
    pub fn derivative(&self, rho: f64) -> Result<(f64, f64)> {
        let den = self.denominator(rho)?;
        let den2 = den * den;
        Ok((
            (self.b * self.c - self.a * self.d) / den2,
            (self.b_prime * self.c - self.a_prime * self.d) / den2,
        ))
    }
}

/// Same as [`RationalWarpCoefficients::new`].
pub fn warp_coefficients(
    x: &Point2<f64>,
    transform: &SE3Transform,
    cam: &RectifiedCamera,
    cam_ref: &RectifiedCamera,
) -> RationalWarpCoefficients {
    RationalWarpCoefficients::new(x, transform, cam, cam_ref)
}

/// Matrix-pipeline warp `project(cam, T * back_project(cam_ref, x, rho))`.
pub fn warp_direct(
    x: &Point2<f64>,
    rho: f64,
    transform: &SE3Transform,
    cam: &RectifiedCamera,
    cam_ref: &RectifiedCamera,
) -> Result<Point2<f64>> {
    let p = cam_ref.back_project(x, rho)?;
    cam.project(&transform.transform_point(&p))
}
