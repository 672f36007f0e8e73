//! Ray marching through model volumes for model masks, depth and normals.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::tsdf::{Aabb, TsdfVolume};
use crate::ModelId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaycastOptions {
    pub include_hidden_classes: bool,
    /// Fraction of the current distance value advanced per marching step.
    pub step_scale: f64,
}

impl Default for RaycastOptions {
    fn default() -> Self {
        Self {
            include_hidden_classes: true,
            step_scale: 0.8,
        }
    }
}

/// A model to render. `pose` maps camera coordinates into the volume frame.
#[derive(Clone, Copy)]
pub struct RenderModel<'a> {
    pub id: ModelId,
    pub volume: &'a TsdfVolume,
    pub pose: Pose,
    /// Background volumes are rendered regardless of foreground probability.
    pub is_background: bool,
    pub hidden: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub model_id: Image<Option<ModelId>>,
    /// Meters along the optical axis; 0 where nothing was hit.
    pub depth: Image<f32>,
    /// Unit normals in the camera frame; zero where nothing was hit.
    pub normal: Image<[f32; 3]>,
}

impl RenderResult {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn hit_count(&self, id: ModelId) -> usize {
        self.model_id.data().iter().filter(|&&m| m == Some(id)).count()
    }
}

/// A surface crossing along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the unit ray.
    pub t: f64,
    pub point: Vector3<f64>,
}

/// Entry and exit distances of a ray against a box.
fn slab(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Aabb) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < b.min[a] || origin[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut lo, mut hi) = ((b.min[a] - origin[a]) * inv, (b.max[a] - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// First positive-to-negative zero crossing along a ray given in the volume
/// frame, skipping crossings rejected by `accept`.
pub fn march_ray(
    vol: &TsdfVolume,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    step_scale: f64,
    accept: impl Fn(&Vector3<f64>) -> bool,
) -> Option<Hit> {
    let bounds = vol.sample_bounds();
    let (t_enter, t_exit) = slab(origin, dir, &bounds)?;
    let v = vol.voxel_size();
    let eps = 1e-9 * v;
    let mut t = t_enter + eps;
    let t_end = t_exit - eps;
    let mut prev: Option<(f64, f64)> = None;
    while t <= t_end {
        let p = origin + dir * t;
        let Some(psi) = vol.interpolate_sdf(&p) else {
            prev = None;
            t += v;
            continue;
        };
        if let Some((tp, psi_p)) = prev {
            if psi_p > 0.0 && psi <= 0.0 {
                if let Some(hit) = refine(vol, origin, dir, (tp, psi_p), (t, psi)) {
                    let observed = vol.interpolate_weight(&hit.point).unwrap_or(0.0) > 0.0;
                    if observed && accept(&hit.point) {
                        return Some(hit);
                    }
                }
            }
        }
        prev = Some((t, psi));
        let step = if psi.abs() > v { (step_scale * psi.abs()).max(v) } else { v };
        t += step;
    }
    None
}

/// Secant refinement of a bracketed crossing.
fn refine(
    vol: &TsdfVolume,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    mut a: (f64, f64),
    mut b: (f64, f64),
) -> Option<Hit> {
    let mut t = a.0;
    for _ in 0..3 {
        t = a.0 + (b.0 - a.0) * a.1 / (a.1 - b.1);
        let psi = vol.interpolate_sdf(&(origin + dir * t))?;
        if psi.abs() < 1e-7 {
            break;
        }
        if psi > 0.0 {
            a = (t, psi);
        } else {
            b = (t, psi);
        }
    }
    Some(Hit {
        t,
        point: origin + dir * t,
    })
}

/// Nearest visible surface of one model along a camera ray (`dir_cam` unit).
pub fn cast_model(model: &RenderModel<'_>, dir_cam: &Vector3<f64>, step_scale: f64) -> Option<Hit> {
    let origin = model.pose.translation;
    let dir = model.pose.rotation * dir_cam;
    let vol = model.volume;
    if model.is_background {
        march_ray(vol, &origin, &dir, step_scale, |_| true)
    } else {
        march_ray(vol, &origin, &dir, step_scale, |p| vol.foreground_prob(p) > 0.5)
    }
}

/// Render all models; at each pixel the nearest surviving hit wins.
pub fn raycast(models: &[RenderModel<'_>], k: &Intrinsics, opts: &RaycastOptions) -> RenderResult {
    let (w, h) = (k.width, k.height);
    let active: Vec<&RenderModel<'_>> = models
        .iter()
        .filter(|m| opts.include_hidden_classes || !m.hidden)
        .collect();
    let rows: Vec<Vec<(Option<ModelId>, f32, [f32; 3])>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = k.ray(x as f64, y as f64);
                    let dir = ray.normalize();
                    let mut best: Option<(f64, &RenderModel<'_>, Hit)> = None;
                    for m in &active {
                        if let Some(hit) = cast_model(m, &dir, opts.step_scale) {
                            if best.as_ref().map_or(true, |b| hit.t < b.0) {
                                best = Some((hit.t, m, hit));
                            }
                        }
                    }
                    match best {
                        Some((t, m, hit)) => {
                            let n = m
                                .volume
                                .sdf_gradient(&hit.point)
                                .map(|g| m.pose.rotation.transpose() * g)
                                .and_then(|g| g.try_normalize(1e-12))
                                .unwrap_or_else(Vector3::zeros);
                            (
                                Some(m.id),
                                (t * dir.z) as f32,
                                [n.x as f32, n.y as f32, n.z as f32],
                            )
                        }
                        None => (None, 0.0, [0.0; 3]),
                    }
                })
                .collect()
        })
        .collect();
    let mut ids = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut normal = Vec::with_capacity(w * h);
    for row in rows {
        for (id, d, n) in row {
            ids.push(id);
            depth.push(d);
            normal.push(n);
        }
    }
    RenderResult {
        model_id: Image::from_vec(w, h, ids),
        depth: Image::from_vec(w, h, depth),
        normal: Image::from_vec(w, h, normal),
    }
}

/// Pixels rendered as model `id`.
pub fn model_mask(render: &RenderResult, id: ModelId) -> Image<bool> {
    render.model_id.map(|m| m == Some(id))
}
