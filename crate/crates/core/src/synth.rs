//! Analytic scenes of planes, spheres and boxes with scripted rigid motion,
//! rendered to exact depth and instance masks.
//!
//! World axes follow the camera convention: x right, y down, z forward.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::io::{self, format_timestamp, InstanceMeta, IoError, MaskSet};
use crate::objects::Detection;
use crate::pipeline::{Frame, PoseTrack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    /// Half-space `normal . p <= offset` is solid; `normal` points into free
    /// space after normalization.
    Plane { normal: [f64; 3], offset: f64 },
    /// Centered at the local origin.
    Sphere { radius: f64 },
    /// Centered at the local origin.
    Box { half_extents: [f64; 3] },
}

/// Exact signed distance of a local-frame point to a shape.
pub fn analytic_sdf(shape: &Shape, p: &Vector3<f64>) -> f64 {
    match *shape {
        Shape::Plane { normal, offset } => {
            let n = Vector3::from(normal);
            (n.dot(p) - offset) / n.norm()
        }
        Shape::Sphere { radius } => p.norm() - radius,
        Shape::Box { half_extents } => {
            let q = p.abs() - Vector3::from(half_extents);
            q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
        }
    }
}

/// Distance along the ray `o + t d` (t > 0) to the shape's surface, entering
/// from outside.
pub fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    match *shape {
        Shape::Plane { normal, offset } => {
            let n = Vector3::from(normal);
            let len = n.norm();
            let (n, offset) = (n / len, offset / len);
            let denom = n.dot(d);
            if denom >= 0.0 {
                return None;
            }
            let t = (offset - n.dot(o)) / denom;
            (t > 0.0).then_some(t)
        }
        Shape::Sphere { radius } => {
            let a = d.norm_squared();
            let b = o.dot(d);
            let c = o.norm_squared() - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            (t > 0.0).then_some(t)
        }
        Shape::Box { half_extents } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                let h = half_extents[a];
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > h {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
            }
            (t0 <= t1 && t0 > 0.0).then_some(t0)
        }
    }
}

fn degrees(v: [f64; 3]) -> Vector3<f64> {
    Vector3::from(v) * std::f64::consts::PI / 180.0
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

/// Rigid motion as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Motion {
    /// Constant pose; rotation as an axis-angle vector in degrees.
    Fixed {
        position: [f64; 3],
        #[serde(default = "zero3")]
        rotation_deg: [f64; 3],
    },
    /// Straight-line motion from `start` to `end` between `t_start` and
    /// `t_end` seconds (defaults: the whole sequence), resting outside.
    Linear {
        start: [f64; 3],
        end: [f64; 3],
        #[serde(default = "zero3")]
        rotation_deg: [f64; 3],
        /// Rotation reached at `t_end`; constant rotation if absent.
        #[serde(default)]
        end_rotation_deg: Option<[f64; 3]>,
        #[serde(default)]
        t_start: Option<f64>,
        #[serde(default)]
        t_end: Option<f64>,
    },
    /// Horizontal circular arc around `target`, always looking at it. Angle 0
    /// places the camera at `target - radius * z` looking along +z.
    Arc {
        target: [f64; 3],
        radius: f64,
        start_deg: f64,
        end_deg: f64,
        #[serde(default)]
        height: f64,
    },
}

/// Camera-to-world pose looking from `eye` at `target` with y pointing down.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    Pose::new(nalgebra::Matrix3::from_columns(&[x, y, z]), *eye)
}

impl Motion {
    /// World-from-local pose at `t` seconds of a sequence lasting `duration`.
    pub fn pose_at(&self, t: f64, duration: f64) -> Pose {
        match *self {
            Motion::Fixed { position, rotation_deg } => {
                Pose::from_axis_angle(degrees(rotation_deg), Vector3::from(position))
            }
            Motion::Linear {
                start,
                end,
                rotation_deg,
                end_rotation_deg,
                t_start,
                t_end,
            } => {
                let t0 = t_start.unwrap_or(0.0);
                let t1 = t_end.unwrap_or(duration);
                let s = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
                let p = Vector3::from(start).lerp(&Vector3::from(end), s);
                let r = match end_rotation_deg {
                    Some(e) => degrees(rotation_deg).lerp(&degrees(e), s),
                    None => degrees(rotation_deg),
                };
                Pose::from_axis_angle(r, p)
            }
            Motion::Arc {
                target,
                radius,
                start_deg,
                end_deg,
                height,
            } => {
                let s = if duration > 0.0 { (t / duration).clamp(0.0, 1.0) } else { 0.0 };
                let a = (start_deg + (end_deg - start_deg) * s).to_radians();
                let target = Vector3::from(target);
                let eye = target + Vector3::new(radius * a.sin(), height, -radius * a.cos());
                look_at(&eye, &target)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub motion: Motion,
    #[serde(default)]
    pub is_object: bool,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation is `coefficient * z^2` meters.
    pub coefficient: f64,
    pub seed: u64,
}

fn default_mask_interval() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub frame_count: usize,
    pub frame_rate: f64,
    /// Masks are produced on frames whose index is a multiple of this; 0
    /// disables masks.
    #[serde(default = "default_mask_interval")]
    pub mask_interval: usize,
    #[serde(default)]
    pub start_time: f64,
    pub intrinsics: Intrinsics,
    pub camera: Motion,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
}

/// Everything rendered for one frame.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub index: usize,
    pub timestamp: f64,
    pub depth: Image<f32>,
    /// Object instance ids (1-based order of object primitives), 0 = none.
    pub instance_map: Image<u16>,
    pub has_masks: bool,
    /// World from camera.
    pub camera_pose: Pose,
    /// `(instance id, world-from-object pose)` for every object primitive.
    pub object_poses: Vec<(u16, Pose)>,
}

impl SynthFrame {
    /// Camera-frame pose of object `id`.
    pub fn object_in_camera(&self, id: u16) -> Option<Pose> {
        let (_, p) = self.object_poses.iter().find(|o| o.0 == id)?;
        Some(self.camera_pose.inverse() * *p)
    }
}

impl SceneScript {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let s: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.frame_rate > 0.0) {
            return Err("frame_rate must be positive".into());
        }
        self.intrinsics.validate().map_err(|e| e.to_string())?;
        for p in &self.primitives {
            let ok = match p.shape {
                Shape::Plane { normal, .. } => Vector3::from(normal).norm() > 0.0,
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            };
            if !ok {
                return Err(format!("degenerate primitive {:?}", p.shape));
            }
        }
        Ok(())
    }

    /// Seconds between the first and last frame.
    pub fn duration(&self) -> f64 {
        self.frame_count.saturating_sub(1) as f64 / self.frame_rate
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.frame_rate
    }

    /// Instance id of each primitive (0 for non-objects).
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut next = 0u16;
        self.primitives
            .iter()
            .map(|p| {
                if p.is_object {
                    next += 1;
                    next
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn has_masks(&self, index: usize) -> bool {
        self.mask_interval > 0 && index % self.mask_interval == 0
    }

    pub fn render_frame(&self, index: usize) -> SynthFrame {
        let k = &self.intrinsics;
        let t = index as f64 / self.frame_rate;
        let duration = self.duration();
        let camera_pose = self.camera.pose_at(t, duration);
        let ids = self.instance_ids();
        let world_from_local: Vec<Pose> = self.primitives.iter().map(|p| p.motion.pose_at(t, duration)).collect();
        // primitive-from-camera transforms, so rays can be cast in local frames
        let local_from_cam: Vec<Pose> = world_from_local.iter().map(|w| w.inverse() * camera_pose).collect();
        let rows: Vec<(Vec<f32>, Vec<u16>)> = (0..k.height)
            .into_par_iter()
            .map(|y| {
                let mut depth = vec![0f32; k.width];
                let mut id = vec![0u16; k.width];
                for x in 0..k.width {
                    // z-unit ray: the hit parameter equals depth
                    let ray = k.ray(x as f64, y as f64);
                    let mut best: Option<(f64, usize)> = None;
                    for (i, p) in self.primitives.iter().enumerate() {
                        let o = local_from_cam[i].translation;
                        let d = local_from_cam[i].rotation * ray;
                        if let Some(hit) = intersect(&p.shape, &o, &d) {
                            if best.map_or(true, |b| hit < b.0) {
                                best = Some((hit, i));
                            }
                        }
                    }
                    if let Some((z, i)) = best {
                        depth[x] = z as f32;
                        id[x] = ids[i];
                    }
                }
                (depth, id)
            })
            .collect();
        let (mut depth, mut map) = (Vec::with_capacity(k.pixel_count()), Vec::with_capacity(k.pixel_count()));
        for (d, i) in rows {
            depth.extend(d);
            map.extend(i);
        }
        let mut depth = Image::from_vec(k.width, k.height, depth);
        if let Some(noise) = self.noise {
            let mut rng = rand::rngs::StdRng::seed_from_u64(noise.seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15));
            let unit = Normal::new(0.0, 1.0).expect("unit normal");
            for d in depth.data_mut() {
                let n: f64 = unit.sample(&mut rng);
                if *d > 0.0 {
                    let z = *d as f64;
                    *d = (z + n * noise.coefficient * z * z).max(0.0) as f32;
                }
            }
        }
        SynthFrame {
            index,
            timestamp: self.timestamp(index),
            depth,
            instance_map: Image::from_vec(k.width, k.height, map),
            has_masks: self.has_masks(index),
            camera_pose,
            object_poses: ids
                .iter()
                .zip(&world_from_local)
                .filter(|(&id, _)| id > 0)
                .map(|(&id, p)| (id, *p))
                .collect(),
        }
    }

    /// Metadata for instances visible in `frame`.
    pub fn mask_set(&self, frame: &SynthFrame) -> MaskSet {
        let ids = self.instance_ids();
        let meta = self
            .primitives
            .iter()
            .zip(&ids)
            .filter(|(_, &id)| id > 0 && frame.instance_map.data().contains(&id))
            .map(|(p, &id)| InstanceMeta {
                id,
                label: p.label.clone(),
                score: 1.0,
            })
            .collect();
        MaskSet {
            instance_map: frame.instance_map.clone(),
            meta,
        }
    }

    /// Pipeline input for a frame (masks only on mask frames).
    pub fn frame(&self, index: usize) -> Frame {
        let f = self.render_frame(index);
        let detections: Option<Vec<Detection>> = f.has_masks.then(|| self.mask_set(&f).detections());
        Frame {
            index,
            timestamp: f.timestamp,
            depth: f.depth,
            detections,
        }
    }

    /// Ground-truth camera trajectory (world from camera).
    pub fn camera_trajectory(&self) -> PoseTrack {
        let d = self.duration();
        (0..self.frame_count)
            .map(|i| (self.timestamp(i), self.camera.pose_at(i as f64 / self.frame_rate, d)))
            .collect()
    }

    /// Ground-truth trajectory of object `id` in the camera frame.
    pub fn object_trajectory(&self, id: u16) -> PoseTrack {
        let d = self.duration();
        let ids = self.instance_ids();
        let Some(i) = ids.iter().position(|&x| x == id) else {
            return Vec::new();
        };
        (0..self.frame_count)
            .map(|f| {
                let t = f as f64 / self.frame_rate;
                let cam = self.camera.pose_at(t, d);
                (self.timestamp(f), cam.inverse() * self.primitives[i].motion.pose_at(t, d))
            })
            .collect()
    }

    /// Write the scene in the dataset layout read by [`io::TumSequence`].
    pub fn materialize(&self, dir: &Path) -> Result<(), IoError> {
        let err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| IoError::Io { path: p, source }
        };
        for sub in ["depth", "masks", "groundtruth_objects"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(err(&p))?;
        }
        io::write_intrinsics(&dir.join("intrinsics.toml"), &self.intrinsics)?;
        let mut index = String::from("# depth maps\n# timestamp filename\n");
        let scale = self.intrinsics.depth_scale;
        for i in 0..self.frame_count {
            let f = self.render_frame(i);
            let stem = format_timestamp(f.timestamp);
            let rel = format!("depth/{stem}.png");
            io::write_depth_png(&dir.join(&rel), &f.depth, scale)?;
            index.push_str(&format!("{stem} {rel}\n"));
            if f.has_masks {
                let set = self.mask_set(&f);
                set.write(
                    &dir.join("masks").join(format!("{stem}.png")),
                    &dir.join("masks").join(format!("{stem}.json")),
                )?;
            }
        }
        let p = dir.join("depth.txt");
        fs::write(&p, index).map_err(err(&p))?;
        io::write_trajectory(&dir.join("groundtruth.txt"), &self.camera_trajectory())?;
        for id in self.instance_ids().into_iter().filter(|&id| id > 0) {
            io::write_trajectory(
                &dir.join("groundtruth_objects").join(format!("object_{id}.txt")),
                &self.object_trajectory(id),
            )?;
        }
        Ok(())
    }
}
