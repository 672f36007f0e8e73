//! Object lifecycle: detection matching, volume creation and growth,
//! existence bookkeeping and visibility.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::raycast::RenderResult;
use crate::tsdf::{Aabb, TsdfVolume};
use crate::ModelId;

/// An instance segment supplied for a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: Image<bool>,
    pub class_label: String,
    pub score: f64,
}

impl Detection {
    pub fn pixel_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m).count()
    }

    /// Foreground probability image: 1 inside the mask, 0 outside.
    pub fn probability(&self) -> Image<f32> {
        self.mask.map(|m| if m { 1.0 } else { 0.0 })
    }
}

/// A dynamic object with its own volume.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub id: ModelId,
    pub volume: TsdfVolume,
    /// Maps camera coordinates into the volume frame.
    pub pose: Pose,
    /// Origin of the reported object frame in volume coordinates (the volume
    /// center at creation; unaffected by later growth).
    pub anchor: Vector3<f64>,
    pub class_label: String,
    pub ex_count: f64,
    pub nonex_count: f64,
    pub visible: bool,
    pub hidden_class: bool,
}

impl ObjectModel {
    /// Existence probability; 1 before any evidence has been collected.
    pub fn existence_prob(&self) -> f64 {
        let total = self.ex_count + self.nonex_count;
        if total > 0.0 {
            self.ex_count / total
        } else {
            1.0
        }
    }

    /// Pose of the object frame expressed in the camera frame.
    pub fn pose_in_camera(&self) -> Pose {
        self.pose.inverse() * Pose::from_translation(self.anchor)
    }

    /// Axis-aligned world bounds of the volume given the camera pose (world
    /// from camera).
    pub fn world_bounds(&self, camera_pose: &Pose) -> Aabb {
        let world_from_vol = camera_pose * &self.pose.inverse();
        transformed_bounds(&self.volume.bounds(), &world_from_vol)
    }
}

/// Bounds of the eight transformed corners of `b`.
pub fn transformed_bounds(b: &Aabb, t: &Pose) -> Aabb {
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for c in 0..8 {
        let corner = Vector3::new(
            if c & 1 == 0 { b.min.x } else { b.max.x },
            if c & 2 == 0 { b.min.y } else { b.max.y },
            if c & 4 == 0 { b.min.z } else { b.max.z },
        );
        let p = t.transform_point(&corner);
        min = min.inf(&p);
        max = max.sup(&p);
    }
    Aabb::new(min, max)
}

/// Volumetric intersection over union of two boxes.
pub fn box_iou(a: &Aabb, b: &Aabb) -> f64 {
    let inter = a.intersection(b).volume();
    let union = a.volume() + b.volume() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn mask_iou(a: &Image<bool>, b: &Image<bool>) -> f64 {
    assert!(a.same_size(b), "mask size mismatch");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(detection index, object id, IoU)`.
    pub pairs: Vec<(usize, ModelId, f64)>,
    pub unmatched: Vec<usize>,
}

/// Greedy one-to-one matching in descending IoU order. Pairs need IoU
/// strictly above `iou_threshold`.
pub fn match_detections(
    detections: &[Detection],
    rendered: &[(ModelId, Image<bool>)],
    iou_threshold: f64,
) -> MatchResult {
    let mut candidates = Vec::new();
    for (d, det) in detections.iter().enumerate() {
        for (o, (_, mask)) in rendered.iter().enumerate() {
            let iou = mask_iou(&det.mask, mask);
            if iou > iou_threshold {
                candidates.push((iou, d, o));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut det_used = vec![false; detections.len()];
    let mut obj_used = vec![false; rendered.len()];
    let mut result = MatchResult::default();
    for (iou, d, o) in candidates {
        if det_used[d] || obj_used[o] {
            continue;
        }
        det_used[d] = true;
        obj_used[o] = true;
        result.pairs.push((d, rendered[o].0, iou));
    }
    result.pairs.sort_by_key(|p| p.0);
    result.unmatched = (0..detections.len()).filter(|&d| !det_used[d]).collect();
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectParams {
    pub initial_resolution: usize,
    /// Growth factor applied to the percentile extent.
    pub padding: f64,
    pub truncation_voxels: f64,
    pub max_distance: f64,
    pub max_volumetric_iou: f64,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub iou_threshold: f64,
    pub weight_cap: f64,
    /// Object volumes never grow beyond this many voxels per axis.
    pub max_resolution: usize,
    pub existence_threshold: f64,
    pub visibility_min_pixels: usize,
    pub visibility_border: usize,
}

impl Default for ObjectParams {
    fn default() -> Self {
        Self {
            initial_resolution: 64,
            padding: 2.0,
            truncation_voxels: 10.0,
            max_distance: 5.0,
            max_volumetric_iou: 0.5,
            percentile_low: 0.1,
            percentile_high: 0.9,
            iou_threshold: 0.2,
            weight_cap: 64.0,
            max_resolution: 256,
            existence_threshold: 0.1,
            visibility_min_pixels: 1600,
            visibility_border: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CreateRejection {
    TooFewPoints { found: usize, required: usize },
    TooFar { distance: f64 },
    Overlapping { with: ModelId, iou: f64 },
    ExcludedClass,
}

impl fmt::Display for CreateRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewPoints { found, required } => {
                write!(f, "too few points ({found} < {required})")
            }
            Self::TooFar { distance } => write!(f, "too far ({distance:.2} m)"),
            Self::Overlapping { with, iou } => {
                write!(f, "overlaps object {with} (IoU {iou:.2})")
            }
            Self::ExcludedClass => write!(f, "excluded class"),
        }
    }
}

/// Nearest-rank percentile of a sorted slice, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Cube enclosing the per-axis percentile range of `points`, scaled by
/// `padding` along its largest axis. Returns `(center, edge length)`.
pub fn percentile_cube(points: &[Vector3<f64>], params: &ObjectParams) -> Option<(Vector3<f64>, f64)> {
    if points.is_empty() {
        return None;
    }
    let mut lo = Vector3::zeros();
    let mut hi = Vector3::zeros();
    let mut axis = Vec::with_capacity(points.len());
    for a in 0..3 {
        axis.clear();
        axis.extend(points.iter().map(|p| p[a]));
        axis.sort_by(|x, y| x.total_cmp(y));
        lo[a] = nearest_rank(&axis, params.percentile_low);
        hi[a] = nearest_rank(&axis, params.percentile_high);
    }
    let extent = (hi - lo).max();
    Some(((lo + hi) / 2.0, params.padding * extent))
}

/// Back-project valid-depth pixels under `mask` through `transform`
/// (target frame from camera).
pub fn masked_points(mask: &Image<bool>, depth: &Image<f32>, k: &Intrinsics, transform: &Pose) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.get(x, y);
            if mask.get(x, y) && d > 0.0 {
                pts.push(transform.transform_point(&(k.ray(x as f64, y as f64) * d as f64)));
            }
        }
    }
    pts
}

/// Try to create an object volume for an unmatched detection. The new
/// volume frame is the world frame, so its pose equals the camera pose.
#[allow(clippy::too_many_arguments)]
pub fn create_object(
    id: ModelId,
    det: &Detection,
    depth: &Image<f32>,
    k: &Intrinsics,
    camera_pose: &Pose,
    existing: &[ObjectModel],
    params: &ObjectParams,
    min_points: usize,
) -> Result<ObjectModel, CreateRejection> {
    let points = masked_points(&det.mask, depth, k, camera_pose);
    if points.len() < min_points.max(1) {
        return Err(CreateRejection::TooFewPoints {
            found: points.len(),
            required: min_points.max(1),
        });
    }
    let (center, size) = percentile_cube(&points, params).expect("nonempty points");
    let distance = (center - camera_pose.translation).norm();
    if distance > params.max_distance {
        return Err(CreateRejection::TooFar { distance });
    }
    let size = size.max(1e-3);
    let proposal = Aabb::from_center_half_extent(center, Vector3::repeat(size / 2.0));
    for other in existing {
        let iou = box_iou(&proposal, &other.world_bounds(camera_pose));
        if iou >= params.max_volumetric_iou {
            return Err(CreateRejection::Overlapping { with: other.id, iou });
        }
    }
    let volume = TsdfVolume::cube(
        center,
        params.initial_resolution,
        size,
        params.truncation_voxels,
        params.weight_cap,
        true,
    )
    .expect("valid object volume parameters");
    Ok(ObjectModel {
        id,
        volume,
        pose: *camera_pose,
        anchor: center,
        class_label: det.class_label.clone(),
        ex_count: 1.0,
        nonex_count: 0.0,
        visible: true,
        hidden_class: false,
    })
}

/// Grow the object's volume if the matched detection's padded percentile
/// cube (in the volume frame) does not fit. Returns whether it grew.
pub fn grow_to_fit_detection(
    obj: &mut ObjectModel,
    det: &Detection,
    depth: &Image<f32>,
    k: &Intrinsics,
    params: &ObjectParams,
) -> bool {
    let points = masked_points(&det.mask, depth, k, &obj.pose);
    let Some((center, size)) = percentile_cube(&points, params) else {
        return false;
    };
    // a hair of slack so boxes that coincide with a face do not trigger growth
    let required = Aabb::from_center_half_extent(center, Vector3::repeat(size / 2.0 - 1e-6));
    if obj.volume.bounds().contains_box(&required) {
        return false;
    }
    let (resolution, _) = obj.volume.resize_plan(&required);
    if resolution.iter().any(|&r| r > params.max_resolution) {
        return false;
    }
    obj.volume = obj.volume.resize_to_fit(&required);
    true
}

/// Count matched/unmatched evidence and return ids whose existence
/// probability dropped strictly below `threshold`.
pub fn update_existence(objects: &mut [ObjectModel], matched: &[ModelId], threshold: f64) -> Vec<ModelId> {
    let mut doomed = Vec::new();
    for obj in objects.iter_mut() {
        if matched.contains(&obj.id) {
            obj.ex_count += 1.0;
        } else {
            obj.nonex_count += 1.0;
        }
        if obj.existence_prob() < threshold {
            doomed.push(obj.id);
        }
    }
    doomed
}

/// Rendered pixels of `id` at least `border` pixels from every image edge.
pub fn interior_pixel_count(render: &RenderResult, id: ModelId, border: usize) -> usize {
    let (w, h) = (render.width(), render.height());
    if w <= 2 * border || h <= 2 * border {
        return 0;
    }
    let mut n = 0;
    for y in border..h - border {
        for x in border..w - border {
            n += (render.model_id.get(x, y) == Some(id)) as usize;
        }
    }
    n
}

pub fn visibility_check(render: &RenderResult, id: ModelId, min_pixels: usize, border: usize) -> bool {
    interior_pixel_count(render, id, border) >= min_pixels
}

/// Pixels where no other model is rendered in front of object `id`.
pub fn occlusion_ok_map(render: &RenderResult, id: ModelId) -> Image<bool> {
    render.model_id.map(|m| m.map_or(true, |m| m == id))
}
