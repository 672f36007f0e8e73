//! M-step pose estimation by direct alignment of back-projected depth with a
//! signed-distance volume.
//!
//! The tracked pose maps camera coordinates into the volume frame. Increments
//! are applied on the right, `T <- T * exp(dxi)`, so for a camera point `p`
//! with `x = T p` the residual derivative is
//! `d psi / d dxi = grad(x)^T R [I | -[p]x]`.
//!
//! Reductions are accumulated over fixed-size chunks and summed in chunk
//! order, so results do not depend on the number of worker threads.

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se3_exp, Intrinsics, Pose, Twist};
use crate::image::Image;
use crate::tsdf::TsdfVolume;

const CHUNK: usize = 2048;
const MAX_LAMBDA: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("tracking unreliable: {found} valid pixels, need {required}")]
    TooFewValidPixels { found: usize, required: usize },
    #[error("degenerate geometry: normal equations stayed singular")]
    DegenerateGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Huber threshold in meters; `None` means twice the volume's voxel size.
    pub huber_delta: Option<f64>,
    pub max_lm_iterations: usize,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
    pub convergence_twist_norm: f64,
    pub min_valid_pixels: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            huber_delta: None,
            max_lm_iterations: 50,
            lm_lambda_init: 1e-4,
            lm_lambda_factor: 10.0,
            convergence_twist_norm: 1e-6,
            min_valid_pixels: 500,
        }
    }
}

impl TrackingConfig {
    pub fn delta_for(&self, vol: &TsdfVolume) -> f64 {
        self.huber_delta.unwrap_or(2.0 * vol.voxel_size())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingResult {
    #[serde(skip)]
    pub pose: Pose,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub valid_pixel_count: usize,
    pub converged: bool,
    /// Energy at the initial pose followed by the energy after every accepted step.
    pub energy_trace: Vec<f64>,
}

/// One linearized residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub pixel: (usize, usize),
    pub residual: f64,
    pub jacobian: Vector6<f64>,
    /// Association weight times map confidence.
    pub weight: f64,
}

/// IRLS weight for the Huber norm.
#[inline]
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Huber norm scaled so that it equals `r^2` in the quadratic zone.
#[inline]
pub fn huber_norm(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r
    } else {
        delta * (2.0 * a - delta)
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    pixel: (usize, usize),
    point: Vector3<f64>,
    weight: f64,
}

fn collect_samples(
    depth: &Image<f32>,
    k: &Intrinsics,
    assoc: &Image<f32>,
    conf: &Image<f32>,
) -> Vec<Sample> {
    let w = depth.width();
    let mut out = Vec::new();
    for (idx, &d) in depth.data().iter().enumerate() {
        if d <= 0.0 {
            continue;
        }
        let weight = assoc.data()[idx] as f64 * conf.data()[idx] as f64;
        if weight <= 0.0 {
            continue;
        }
        let (x, y) = (idx % w, idx / w);
        out.push(Sample {
            pixel: (x, y),
            point: k.ray(x as f64, y as f64) * d as f64,
            weight,
        });
    }
    out
}

#[inline]
fn linearize(vol: &TsdfVolume, pose: &Pose, s: &Sample) -> Option<(f64, Vector6<f64>)> {
    let x = pose.transform_point(&s.point);
    let (psi, grad) = vol.observed_sdf_with_gradient(&x)?;
    let a = pose.rotation.transpose() * grad;
    let ang = s.point.cross(&a);
    Some((psi, Vector6::new(a.x, a.y, a.z, ang.x, ang.y, ang.z)))
}

#[derive(Debug, Clone, Copy)]
struct Accum {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    energy: f64,
    count: usize,
}

impl Accum {
    fn zero() -> Self {
        Self {
            h: Matrix6::zeros(),
            b: Vector6::zeros(),
            energy: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, o: &Accum) {
        self.h += o.h;
        self.b += o.b;
        self.energy += o.energy;
        self.count += o.count;
    }
}

fn evaluate(vol: &TsdfVolume, samples: &[Sample], pose: &Pose, delta: f64, normal_eqs: bool) -> Accum {
    let partials: Vec<Accum> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Accum::zero();
            for s in chunk {
                if normal_eqs {
                    let Some((r, j)) = linearize(vol, pose, s) else {
                        continue;
                    };
                    let w = s.weight * huber_weight(r, delta);
                    acc.h += j * j.transpose() * w;
                    acc.b += j * (w * r);
                    acc.energy += 0.5 * s.weight * huber_norm(r, delta);
                } else {
                    let Some(r) = vol.observed_sdf(&pose.transform_point(&s.point)) else {
                        continue;
                    };
                    acc.energy += 0.5 * s.weight * huber_norm(r, delta);
                }
                acc.count += 1;
            }
            acc
        })
        .collect();
    let mut total = Accum::zero();
    for p in &partials {
        total.add(p);
    }
    total
}

/// Residuals and Jacobians at `pose` for every pixel that contributes.
pub fn residuals_and_jacobian(
    vol: &TsdfVolume,
    depth: &Image<f32>,
    pose: &Pose,
    k: &Intrinsics,
    assoc: &Image<f32>,
    conf: &Image<f32>,
) -> Vec<Residual> {
    collect_samples(depth, k, assoc, conf)
        .iter()
        .filter_map(|s| {
            linearize(vol, pose, s).map(|(r, j)| Residual {
                pixel: s.pixel,
                residual: r,
                jacobian: j,
                weight: s.weight,
            })
        })
        .collect()
}

/// Map confidence: interpolated fusion weight at each back-projected pixel,
/// normalized by the frame maximum. Pixels outside the volume get 0.
pub fn map_confidence_weights(vol: &TsdfVolume, depth: &Image<f32>, pose: &Pose, k: &Intrinsics) -> Image<f32> {
    let w = depth.width();
    let raw: Vec<f32> = depth
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, &d)| {
            if d <= 0.0 {
                return 0.0;
            }
            let p = k.ray((idx % w) as f64, (idx / w) as f64) * d as f64;
            vol.interpolate_weight(&pose.transform_point(&p)).unwrap_or(0.0).max(0.0) as f32
        })
        .collect();
    let max = raw.iter().copied().fold(0f32, f32::max);
    let data = if max > 0.0 {
        raw.into_iter().map(|v| v / max).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Image::from_vec(w, depth.height(), data)
}

/// Robust energy `1/2 sum q conf |psi|_delta` and the number of contributing pixels.
pub fn robust_energy(
    vol: &TsdfVolume,
    depth: &Image<f32>,
    pose: &Pose,
    k: &Intrinsics,
    assoc: &Image<f32>,
    conf: &Image<f32>,
    delta: f64,
) -> (f64, usize) {
    let samples = collect_samples(depth, k, assoc, conf);
    let acc = evaluate(vol, &samples, pose, delta, false);
    (acc.energy, acc.count)
}

/// Levenberg-Marquardt with IRLS Huber weights. Map confidences are computed
/// once at `init` and held fixed, so every iterate is scored by the same
/// energy.
pub fn track(
    vol: &TsdfVolume,
    depth: &Image<f32>,
    init: &Pose,
    k: &Intrinsics,
    assoc: &Image<f32>,
    config: &TrackingConfig,
) -> Result<TrackingResult, TrackingError> {
    let conf = map_confidence_weights(vol, depth, init, k);
    let samples = collect_samples(depth, k, assoc, &conf);
    let delta = config.delta_for(vol);

    let mut pose = *init;
    let mut cur = evaluate(vol, &samples, &pose, delta, true);
    if cur.count < config.min_valid_pixels {
        return Err(TrackingError::TooFewValidPixels {
            found: cur.count,
            required: config.min_valid_pixels,
        });
    }
    let initial_energy = cur.energy;
    let mut trace = vec![cur.energy];
    let mut lambda = config.lm_lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_lm_iterations {
        iterations += 1;
        let mut a = cur.h;
        for i in 0..6 {
            a[(i, i)] += lambda * cur.h[(i, i)];
        }
        let Some(chol) = a.cholesky() else {
            lambda *= config.lm_lambda_factor;
            if lambda > MAX_LAMBDA {
                return Err(TrackingError::DegenerateGeometry);
            }
            continue;
        };
        let step = -chol.solve(&cur.b);
        let candidate = pose * se3_exp(&Twist::from_vector(&step));
        let next = evaluate(vol, &samples, &candidate, delta, true);
        let small = step.norm() < config.convergence_twist_norm;
        if next.count >= config.min_valid_pixels && next.energy < cur.energy {
            pose = candidate;
            cur = next;
            trace.push(cur.energy);
            lambda = (lambda / config.lm_lambda_factor).max(1e-12);
        } else {
            lambda *= config.lm_lambda_factor;
            if lambda > MAX_LAMBDA {
                converged = true;
                break;
            }
        }
        if small {
            converged = true;
            break;
        }
    }

    Ok(TrackingResult {
        pose,
        initial_energy,
        final_energy: cur.energy,
        iterations,
        valid_pixel_count: cur.count,
        converged,
        energy_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics {
            fx: 60.0,
            fy: 60.0,
            cx: 31.5,
            cy: 23.5,
            width: 64,
            height: 48,
            depth_scale: 5000.0,
        }
    }

    fn ramp() -> TsdfVolume {
        let mut v = TsdfVolume::new(Vector3::new(0.0, 0.0, 1.0), [40; 3], 0.05, 5.0, 64.0, false).unwrap();
        v.fill_from_fn(1.0, |p| p.z);
        v
    }

    #[test]
    fn huber_weight_examples() {
        assert_eq!(huber_weight(0.0, 0.1), 1.0);
        assert_eq!(huber_weight(0.1, 0.1), 1.0);
        assert_eq!(huber_weight(-0.1, 0.1), 1.0);
        assert!((huber_weight(0.2, 0.1) - 0.5).abs() < 1e-15);
        assert!((huber_weight(-0.2, 0.1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn huber_norm_is_continuous_at_delta() {
        let d = 0.03;
        assert!((huber_norm(d, d) - huber_norm(d + 1e-12, d)).abs() < 1e-12);
        assert!((huber_norm(3.0 * d, d) - d * 5.0 * d).abs() < 1e-15);
    }

    #[test]
    fn ramp_residual_and_jacobian() {
        let k = k();
        let vol = ramp();
        let mut depth = Image::filled(k.width, k.height, 0.0f32);
        let (x, y) = (31, 23);
        depth.set(x, y, 1.0);
        let ones = Image::filled(k.width, k.height, 1.0f32);
        let res = residuals_and_jacobian(&vol, &depth, &Pose::identity(), &k, &ones, &ones);
        assert_eq!(res.len(), 1);
        assert!((res[0].residual - 1.0).abs() < 1e-6);
        let j = res[0].jacobian;
        // grid values are stored in f32
        assert!(j[0].abs() < 1e-5 && j[1].abs() < 1e-5 && (j[2] - 1.0).abs() < 1e-5);
        // angular part is p x (0,0,1) = (p_y, -p_x, 0)
        let p = k.ray(x as f64, y as f64);
        assert!((j[3] - p.y).abs() < 1e-5 && (j[4] + p.x).abs() < 1e-5 && j[5].abs() < 1e-9);
    }

    #[test]
    fn zero_association_pixel_is_excluded() {
        let k = k();
        let vol = ramp();
        let depth = Image::filled(k.width, k.height, 1.0f32);
        let ones = Image::filled(k.width, k.height, 1.0f32);
        let mut assoc = ones.clone();
        assoc.set(5, 5, 0.0);
        let res = residuals_and_jacobian(&vol, &depth, &Pose::identity(), &k, &assoc, &ones);
        assert_eq!(res.len(), k.pixel_count() - 1);
        assert!(res.iter().all(|r| r.pixel != (5, 5)));
    }

    #[test]
    fn confidence_ratio_and_outside() {
        let k = k();
        let mut vol = ramp();
        vol.fill_from_fn(4.0, |p| p.z);
        let mut depth = Image::filled(k.width, k.height, 1.0f32);
        depth.set(0, 0, 50.0);
        let conf = map_confidence_weights(&vol, &depth, &Pose::identity(), &k);
        assert_eq!(conf.get(0, 0), 0.0);
        assert!((conf.get(10, 10) - 1.0).abs() < 1e-6);

        let mut vol = ramp();
        vol.fill_from_fn(2.0, |p| p.z);
        // raise the weight under one pixel's sample to 4
        let p = k.ray(20.0, 20.0);
        for kz in 0..40 {
            for j in 0..40 {
                for i in 0..40 {
                    let c = vol.voxel_center(i, j, kz);
                    if (c.x - p.x).abs() < 0.2 && (c.y - p.y).abs() < 0.2 {
                        vol.set_voxel(i, j, kz, c.z, 4.0);
                    }
                }
            }
        }
        let depth = Image::filled(k.width, k.height, 1.0f32);
        let conf = map_confidence_weights(&vol, &depth, &Pose::identity(), &k);
        assert!((conf.get(20, 20) - 1.0).abs() < 1e-6);
        assert!((conf.get(60, 2) - 0.5).abs() < 1e-6);

        let empty = TsdfVolume::new(Vector3::zeros(), [4; 3], 0.1, 0.3, 64.0, false).unwrap();
        let conf = map_confidence_weights(&empty, &depth, &Pose::identity(), &k);
        assert!(conf.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn all_zero_association_is_unreliable() {
        let k = k();
        let vol = ramp();
        let depth = Image::filled(k.width, k.height, 1.0f32);
        let zeros = Image::filled(k.width, k.height, 0.0f32);
        let err = track(&vol, &depth, &Pose::identity(), &k, &zeros, &TrackingConfig::default());
        assert!(matches!(err, Err(TrackingError::TooFewValidPixels { found: 0, .. })));
    }
}
