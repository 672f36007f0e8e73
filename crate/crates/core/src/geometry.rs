//! Rigid-body poses, pinhole projection and depth preprocessing.
//!
//! Twists are ordered `(linear, angular)` everywhere in this crate, both in
//! [`Twist`] and in the 6-vectors used by the tracker's normal equations.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("rotation angle {0} rad is too close to pi for a stable logarithm")]
    NearSingularLog(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation given as an axis-angle vector (direction = axis, norm = angle).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::new(axis_angle).into_inner();
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let pose = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        pose.renormalized_if_drifting()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let cos = 0.5 * (r.trace() - 1.0);
        (0.5 * vee.norm()).atan2(cos)
    }

    /// Nearest rotation matrix (polar decomposition) with det +1.
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut d = Matrix3::identity();
            d[(2, 2)] = -1.0;
            r = u * d * v_t;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    fn renormalized_if_drifting(self) -> Pose {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > 1e-12 {
            self.orthonormalized()
        } else {
            self
        }
    }

    /// Max elementwise difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Element of se(3), `linear` first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: Vector3::new(v[0], v[1], v[2]),
            angular: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map se(3) -> SE(3) (Rodrigues rotation, closed-form V matrix).
pub fn se3_exp(t: &Twist) -> Pose {
    let w = t.angular;
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b, c) = if theta < 1e-3 {
        let t4 = theta2 * theta2;
        (
            1.0 - theta2 / 6.0 + t4 / 120.0,
            0.5 - theta2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = skew(&w);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Pose {
        rotation,
        translation: v * t.linear,
    }
}

/// Logarithm SE(3) -> se(3). Fails for rotation angles within 1e-6 of pi.
pub fn se3_log(p: &Pose) -> Result<Twist, GeometryError> {
    let r = &p.rotation;
    let skew_part = (r - r.transpose()) * 0.5;
    let s = vee(&skew_part);
    let sin = s.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta >= std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::NearSingularLog(theta));
    }
    let theta2 = theta * theta;
    // omega = theta / sin(theta) * s
    let scale = if theta < 1e-3 {
        1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0
    } else {
        theta / sin
    };
    let w = s * scale;
    // V^-1 = I - 1/2 [w] + coeff [w]^2
    let coeff = if theta < 1e-3 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        (1.0 - a / (2.0 * b)) / theta2
    };
    let k = skew(&w);
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * coeff;
    Ok(Twist {
        linear: v_inv * p.translation,
        angular: w,
    })
}

/// Pinhole intrinsics. `depth_scale` converts raw 16-bit depth units to meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
}

impl Default for Intrinsics {
    /// TUM RGB-D freiburg3 calibration.
    fn default() -> Self {
        Self {
            fx: 535.4,
            fy: 539.2,
            cx: 320.1,
            cy: 247.6,
            width: 640,
            height: 480,
            depth_scale: 5000.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be nonzero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray direction through pixel `(ux, uy)` scaled so that `z == 1`.
    #[inline]
    pub fn ray(&self, ux: f64, uy: f64) -> Vector3<f64> {
        Vector3::new((ux - self.cx) / self.fx, (uy - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub in_bounds: bool,
}

impl Projection {
    /// Nearest pixel, if the projection lands inside the image.
    #[inline]
    pub fn pixel(&self) -> Option<(usize, usize)> {
        if self.in_bounds {
            Some(((self.u + 0.5) as usize, (self.v + 0.5) as usize))
        } else {
            None
        }
    }
}

/// `d * C^-1 (ux, uy, 1)`.
#[inline]
pub fn backproject(ux: f64, uy: f64, d: f64, k: &Intrinsics) -> Result<Vector3<f64>, GeometryError> {
    if !(d > 0.0) {
        return Err(GeometryError::InvalidDepth(d));
    }
    Ok(k.ray(ux, uy) * d)
}

/// Sub-pixel projection. A projection is in bounds when its nearest pixel
/// lies inside the image.
#[inline]
pub fn project(p: &Vector3<f64>, k: &Intrinsics) -> Result<Projection, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    let in_bounds =
        u >= -0.5 && v >= -0.5 && u < k.width as f64 - 0.5 && v < k.height as f64 - 0.5;
    Ok(Projection { u, v, in_bounds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilateralParams {
    pub enabled: bool,
    /// Pixels.
    pub spatial_sigma: f64,
    /// Meters.
    pub range_sigma: f64,
    pub radius: usize,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            enabled: true,
            spatial_sigma: 4.5,
            range_sigma: 0.03,
            radius: 7,
        }
    }
}

/// Edge-preserving smoothing of a metric depth map. Zero (invalid) depths are
/// never used as neighbours and are never filled.
pub fn bilateral_filter(depth: &Image<f32>, spatial_sigma: f64, range_sigma: f64, radius: usize) -> Image<f32> {
    let (w, h) = (depth.width(), depth.height());
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut spatial = vec![0f32; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            spatial[((dy + r) as usize) * side + (dx + r) as usize] =
                (-d2 / (2.0 * spatial_sigma * spatial_sigma)).exp() as f32;
        }
    }
    let inv_range = (1.0 / (2.0 * range_sigma * range_sigma)) as f32;
    let src = depth.data();
    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let center = src[y * w + x];
            if center <= 0.0 {
                continue;
            }
            let (mut sum, mut norm) = (0f32, 0f32);
            let y0 = (y as isize - r).max(0) as usize;
            let y1 = (y as isize + r).min(h as isize - 1) as usize;
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = (x as isize + r).min(w as isize - 1) as usize;
            for ny in y0..=y1 {
                let krow = (ny as isize - y as isize + r) as usize * side;
                let srow = &src[ny * w..ny * w + w];
                for nx in x0..=x1 {
                    let d = srow[nx];
                    if d <= 0.0 {
                        continue;
                    }
                    let diff = d - center;
                    let wgt = spatial[krow + (nx as isize - x as isize + r) as usize]
                        * (-diff * diff * inv_range).exp();
                    sum += wgt * d;
                    norm += wgt;
                }
            }
            *o = sum / norm;
        }
    });
    Image::from_vec(w, h, out)
}
