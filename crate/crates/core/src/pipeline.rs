//! Per-frame orchestration: filtering, association, tracking, fusion and the
//! object lifecycle.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{compute_association, AssociationField, LikelihoodParams, ModelView};
use crate::geometry::{bilateral_filter, BilateralParams, Intrinsics, Pose};
use crate::image::Image;
use crate::objects::{
    create_object, grow_to_fit_detection, match_detections, occlusion_ok_map, update_existence,
    visibility_check, CreateRejection, Detection, ObjectModel, ObjectParams,
};
use crate::raycast::{model_mask, raycast, RaycastOptions, RenderModel, RenderResult};
use crate::tracking::{track, TrackingConfig, TrackingResult};
use crate::tsdf::{TsdfError, TsdfVolume};
use crate::{ModelId, BACKGROUND_ID};

/// Where the camera starts relative to the background volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Camera at the center of the volume face it looks through.
    CenterOfFace,
    /// Volume center expressed in the first camera frame.
    Offset([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub resolution: usize,
    /// Edge length in meters.
    pub size: f64,
    pub truncation_voxels: f64,
    pub placement: Placement,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            resolution: 512,
            size: 5.12,
            truncation_voxels: 10.0,
            placement: Placement::CenterOfFace,
        }
    }
}

impl BackgroundConfig {
    pub fn center(&self) -> Vector3<f64> {
        match self.placement {
            Placement::CenterOfFace => Vector3::new(0.0, 0.0, self.size / 2.0),
            Placement::Offset(c) => Vector3::from(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Masks are consumed on frames whose index is a multiple of this.
    pub detection_interval: usize,
    /// Minimum valid-depth pixels under a mask for object creation.
    pub min_mask_pixels: usize,
    pub weight_cap: f64,
    /// Reductions always run in fixed order; recorded for provenance.
    pub deterministic: bool,
    pub hidden_classes: Vec<String>,
    pub excluded_classes: Vec<String>,
    pub background: BackgroundConfig,
    pub likelihood: LikelihoodParams,
    pub bilateral: BilateralParams,
    pub tracking: TrackingConfig,
    pub objects: ObjectParams,
    pub raycast: RaycastOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detection_interval: 30,
            min_mask_pixels: 1600,
            weight_cap: 64.0,
            deterministic: true,
            hidden_classes: vec!["person".into()],
            excluded_classes: vec![
                "dining table".into(),
                "bed".into(),
                "refrigerator".into(),
                "couch".into(),
            ],
            background: BackgroundConfig::default(),
            likelihood: LikelihoodParams::default(),
            bilateral: BilateralParams::default(),
            tracking: TrackingConfig::default(),
            objects: ObjectParams::default(),
            raycast: RaycastOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.detection_interval == 0 {
            return bad("detection_interval must be positive");
        }
        if self.background.resolution == 0 || !(self.background.size > 0.0) {
            return bad("background resolution and size must be positive");
        }
        if !(self.background.truncation_voxels > 0.0) || !(self.weight_cap > 0.0) {
            return bad("truncation and weight cap must be positive");
        }
        if !self.likelihood.is_valid() {
            return bad("likelihood parameters out of range");
        }
        if self.objects.initial_resolution == 0 || !(self.objects.padding > 0.0) {
            return bad("object resolution and padding must be positive");
        }
        if self.tracking.max_lm_iterations == 0 || self.tracking.min_valid_pixels == 0 {
            return bad("tracking iteration and pixel counts must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    fn is_hidden(&self, label: &str) -> bool {
        self.hidden_classes.iter().any(|c| c == label)
    }

    fn is_excluded(&self, label: &str) -> bool {
        self.excluded_classes.iter().any(|c| c == label)
    }
}

/// One input frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    /// Depth in meters, 0 where invalid.
    pub depth: Image<f32>,
    /// Instance segments, if the detector output exists for this frame.
    pub detections: Option<Vec<Detection>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObjectTrackReport {
    pub id: ModelId,
    pub tracking: Option<TrackingResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DetectionReport {
    pub detections: usize,
    /// `(detection index, object id, IoU)`.
    pub matched: Vec<(usize, ModelId, f64)>,
    pub created: Vec<ModelId>,
    pub rejected: Vec<(usize, String)>,
    pub grown: Vec<ModelId>,
    pub deleted_nonexistent: Vec<ModelId>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub filter_ms: f64,
    pub association_ms: f64,
    pub camera_tracking_ms: f64,
    pub object_tracking_ms: f64,
    pub integration_ms: f64,
    pub detection_ms: f64,
    pub visibility_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FrameReport {
    pub index: usize,
    pub timestamp: f64,
    pub skipped: bool,
    pub warnings: Vec<String>,
    pub camera: Option<TrackingResult>,
    pub objects: Vec<ObjectTrackReport>,
    pub detection: Option<DetectionReport>,
    pub deleted_invisible: Vec<ModelId>,
    pub live_objects: Vec<ModelId>,
    pub association_passes: usize,
    pub valid_association_pixels: usize,
    pub timings: StageTimings,
}

impl FrameReport {
    pub fn is_detection_frame(&self) -> bool {
        self.detection.is_some()
    }
}

/// Registry entry written per frame for evaluation tooling.
#[derive(Debug, Clone, Serialize)]
pub struct RegistryEntry {
    pub id: ModelId,
    pub label: String,
    /// `[tx, ty, tz, qx, qy, qz, qw]` of the object in the camera frame.
    pub pose: [f64; 7],
    pub existence: f64,
    pub visible: bool,
    pub resolution: [usize; 3],
}

pub type PoseTrack = Vec<(f64, Pose)>;

/// Mutable SLAM state folded over frames.
pub struct Slam {
    config: PipelineConfig,
    k: Intrinsics,
    background: TsdfVolume,
    /// World (background volume frame) from camera.
    camera_pose: Pose,
    objects: Vec<ObjectModel>,
    next_id: ModelId,
    initialized: bool,
    camera_track: PoseTrack,
    object_tracks: BTreeMap<ModelId, PoseTrack>,
    object_labels: BTreeMap<ModelId, String>,
    last_association: Option<AssociationField>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Slam {
    pub fn new(config: PipelineConfig, k: Intrinsics) -> Result<Self, ConfigError> {
        config.validate()?;
        k.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let bg = &config.background;
        let background = TsdfVolume::cube(
            bg.center(),
            bg.resolution,
            bg.size,
            bg.truncation_voxels,
            config.weight_cap,
            false,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut objects = config.objects;
        objects.weight_cap = config.weight_cap;
        Ok(Self {
            config: PipelineConfig { objects, ..config },
            k,
            background,
            camera_pose: Pose::identity(),
            objects: Vec::new(),
            next_id: 1,
            initialized: false,
            camera_track: Vec::new(),
            object_tracks: BTreeMap::new(),
            object_labels: BTreeMap::new(),
            last_association: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn background(&self) -> &TsdfVolume {
        &self.background
    }

    pub fn camera_pose(&self) -> &Pose {
        &self.camera_pose
    }

    pub fn objects(&self) -> &[ObjectModel] {
        &self.objects
    }

    pub fn camera_track(&self) -> &PoseTrack {
        &self.camera_track
    }

    /// Trajectories of every object ever created, including deleted ones.
    pub fn object_tracks(&self) -> &BTreeMap<ModelId, PoseTrack> {
        &self.object_tracks
    }

    pub fn object_label(&self, id: ModelId) -> Option<&str> {
        self.object_labels.get(&id).map(String::as_str)
    }

    /// Association field used for integration on the latest frame.
    pub fn last_association(&self) -> Option<&AssociationField> {
        self.last_association.as_ref()
    }

    pub fn registry(&self) -> Vec<RegistryEntry> {
        self.objects
            .iter()
            .map(|o| {
                let p = o.pose_in_camera();
                let q = p.quaternion();
                RegistryEntry {
                    id: o.id,
                    label: o.class_label.clone(),
                    pose: [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w],
                    existence: o.existence_prob(),
                    visible: o.visible,
                    resolution: o.volume.resolution(),
                }
            })
            .collect()
    }

    fn model_views(&self) -> Vec<ModelView<'_>> {
        let mut views = vec![ModelView {
            id: BACKGROUND_ID,
            volume: &self.background,
            pose: self.camera_pose,
        }];
        views.extend(self.objects.iter().map(|o| ModelView {
            id: o.id,
            volume: &o.volume,
            pose: o.pose,
        }));
        views
    }

    fn associate(&self, depth: &Image<f32>) -> AssociationField {
        compute_association(depth, &self.model_views(), &self.k, &self.config.likelihood)
    }

    /// Raycast of the object volumes alone, used for matching, occlusion
    /// gating and visibility.
    pub fn render_objects(&self) -> RenderResult {
        let models: Vec<RenderModel<'_>> = self
            .objects
            .iter()
            .map(|o| RenderModel {
                id: o.id,
                volume: &o.volume,
                pose: o.pose,
                is_background: false,
                hidden: o.hidden_class,
            })
            .collect();
        let opts = RaycastOptions {
            include_hidden_classes: true,
            ..self.config.raycast
        };
        raycast(&models, &self.k, &opts)
    }

    /// Raycast of every model for visualization.
    pub fn render_scene(&self) -> RenderResult {
        let mut models = vec![RenderModel {
            id: BACKGROUND_ID,
            volume: &self.background,
            pose: self.camera_pose,
            is_background: true,
            hidden: false,
        }];
        models.extend(self.objects.iter().map(|o| RenderModel {
            id: o.id,
            volume: &o.volume,
            pose: o.pose,
            is_background: false,
            hidden: o.hidden_class,
        }));
        raycast(&models, &self.k, &self.config.raycast)
    }

    fn check_frame(&self, depth: &Image<f32>) -> Result<(), TsdfError> {
        if depth.width() != self.k.width || depth.height() != self.k.height {
            return Err(TsdfError::DimensionMismatch {
                got_w: depth.width(),
                got_h: depth.height(),
                want_w: self.k.width,
                want_h: self.k.height,
            });
        }
        Ok(())
    }

    fn emit_poses(&mut self, timestamp: f64) {
        self.camera_track.push((timestamp, self.camera_pose));
        for o in &self.objects {
            self.object_tracks
                .entry(o.id)
                .or_default()
                .push((timestamp, o.pose_in_camera()));
        }
    }

    /// Run the full per-frame update.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<FrameReport, TsdfError> {
        self.check_frame(&frame.depth)?;
        let start = Instant::now();
        let mut report = FrameReport {
            index: frame.index,
            timestamp: frame.timestamp,
            ..Default::default()
        };

        if frame.depth.data().iter().all(|&d| !(d > 0.0)) {
            warn!("frame {}: no valid depth, skipped", frame.index);
            report.skipped = true;
            report.warnings.push("no valid depth; frame skipped".into());
            self.emit_poses(frame.timestamp);
            report.timings.total_ms = ms(start);
            return Ok(report);
        }

        // (1) edge-preserving smoothing
        let t = Instant::now();
        let bp = self.config.bilateral;
        let depth = if bp.enabled {
            bilateral_filter(&frame.depth, bp.spatial_sigma, bp.range_sigma, bp.radius)
        } else {
            frame.depth.clone()
        };
        report.timings.filter_ms = ms(t);

        if !self.initialized {
            let ones = depth.map(|d| if d > 0.0 { 1.0f32 } else { 0.0 });
            self.background
                .integrate_depth(&depth, &self.camera_pose, &self.k, &ones)?;
            self.initialized = true;
            self.last_association = Some(AssociationField::single(&depth, BACKGROUND_ID));
            info!("frame {}: background initialized", frame.index);
        } else {
            self.track_and_fuse(&depth, &mut report)?;
        }

        // (8) detections
        let detection_frame = frame.index % self.config.detection_interval == 0;
        if let (true, Some(dets)) = (detection_frame, frame.detections.as_ref()) {
            let t = Instant::now();
            report.detection = Some(self.handle_detections(&depth, dets)?);
            report.timings.detection_ms = ms(t);
        }

        // (9) visibility
        if !self.objects.is_empty() {
            let t = Instant::now();
            let render = self.render_objects();
            let (min_px, border) = (
                self.config.objects.visibility_min_pixels,
                self.config.objects.visibility_border,
            );
            for o in &mut self.objects {
                o.visible = visibility_check(&render, o.id, min_px, border);
            }
            report.deleted_invisible = self.objects.iter().filter(|o| !o.visible).map(|o| o.id).collect();
            for id in &report.deleted_invisible {
                info!("frame {}: object {id} no longer visible, deleted", frame.index);
            }
            self.objects.retain(|o| o.visible);
            report.timings.visibility_ms = ms(t);
        }

        // (10) outputs
        self.emit_poses(frame.timestamp);
        report.live_objects = self.objects.iter().map(|o| o.id).collect();
        report.valid_association_pixels = self.last_association.as_ref().map_or(0, |a| a.valid_count());
        report.timings.total_ms = ms(start);
        debug!("frame {} done in {:.1} ms", frame.index, report.timings.total_ms);
        Ok(report)
    }

    /// Steps (2)-(7): association, camera tracking, object tracking, fusion.
    fn track_and_fuse(&mut self, depth: &Image<f32>, report: &mut FrameReport) -> Result<(), TsdfError> {
        // (2) association under the previous poses
        let t = Instant::now();
        let field = self.associate(depth);
        report.association_passes += 1;
        let mut assoc_ms = ms(t);

        // (3) camera against the background
        let t = Instant::now();
        let bg_weights = field.weights_or_zero(BACKGROUND_ID);
        let previous = self.camera_pose;
        match track(&self.background, depth, &previous, &self.k, &bg_weights, &self.config.tracking) {
            Ok(res) => {
                self.camera_pose = res.pose.orthonormalized();
                report.camera = Some(res);
            }
            Err(e) => {
                warn!("frame {}: camera tracking failed: {e}; keeping last pose", report.index);
                report.warnings.push(format!("camera tracking failed: {e}"));
                report.timings.camera_tracking_ms = ms(t);
                report.timings.association_ms = assoc_ms;
                return Ok(());
            }
        }
        report.timings.camera_tracking_ms = ms(t);

        // objects assumed static in the world until tracked
        let motion = previous.inverse() * self.camera_pose;
        for o in &mut self.objects {
            o.pose = (o.pose * motion).orthonormalized();
        }

        // (4) association with the updated camera pose
        let t = Instant::now();
        let field = self.associate(depth);
        report.association_passes += 1;
        assoc_ms += ms(t);

        // (5) objects, independently
        let t = Instant::now();
        let (k, cfg) = (&self.k, &self.config.tracking);
        let results: Vec<_> = self
            .objects
            .par_iter()
            .map(|o| {
                let w = field.weights_or_zero(o.id);
                track(&o.volume, depth, &o.pose, k, &w, cfg)
            })
            .collect();
        for (o, res) in self.objects.iter_mut().zip(results) {
            match res {
                Ok(r) => {
                    o.pose = r.pose.orthonormalized();
                    report.objects.push(ObjectTrackReport { id: o.id, tracking: Some(r), error: None });
                }
                Err(e) => {
                    debug!("frame {}: object {} not tracked: {e}", report.index, o.id);
                    report.objects.push(ObjectTrackReport { id: o.id, tracking: None, error: Some(e.to_string()) });
                }
            }
        }
        report.timings.object_tracking_ms = ms(t);

        // (6) association with all updated poses
        let t = Instant::now();
        let field = self.associate(depth);
        report.association_passes += 1;
        report.timings.association_ms = assoc_ms + ms(t);

        // (7) fusion
        let t = Instant::now();
        let bg_weights = field.weights_or_zero(BACKGROUND_ID);
        self.background
            .integrate_depth(depth, &self.camera_pose, &self.k, &bg_weights)?;
        let k = &self.k;
        self.objects
            .par_iter_mut()
            .map(|o| {
                let w = field.weights_or_zero(o.id);
                o.volume.integrate_depth(depth, &o.pose, k, &w)
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.last_association = Some(field);
        report.timings.integration_ms = ms(t);
        Ok(())
    }

    fn handle_detections(&mut self, depth: &Image<f32>, dets: &[Detection]) -> Result<DetectionReport, TsdfError> {
        let mut rep = DetectionReport {
            detections: dets.len(),
            ..Default::default()
        };
        let render = self.render_objects();
        let rendered: Vec<_> = self.objects.iter().map(|o| (o.id, model_mask(&render, o.id))).collect();
        let matches = match_detections(dets, &rendered, self.config.objects.iou_threshold);
        let params = self.config.objects;

        for &(d, id, iou) in &matches.pairs {
            rep.matched.push((d, id, iou));
            let obj = self.objects.iter_mut().find(|o| o.id == id).expect("matched object exists");
            if grow_to_fit_detection(obj, &dets[d], depth, &self.k, &params) {
                rep.grown.push(id);
            }
            let ok = occlusion_ok_map(&render, id);
            obj.volume
                .integrate_counts(&dets[d].probability(), &obj.pose, &self.k, &ok)?;
        }

        let matched_ids: Vec<ModelId> = matches.pairs.iter().map(|p| p.1).collect();
        let doomed = update_existence(&mut self.objects, &matched_ids, params.existence_threshold);
        if !doomed.is_empty() {
            info!("objects {doomed:?} fell below the existence threshold, deleted");
            self.objects.retain(|o| !doomed.contains(&o.id));
        }
        rep.deleted_nonexistent = doomed;

        for &d in &matches.unmatched {
            let det = &dets[d];
            if self.config.is_excluded(&det.class_label) {
                rep.rejected.push((d, CreateRejection::ExcludedClass.to_string()));
                continue;
            }
            match create_object(
                self.next_id,
                det,
                depth,
                &self.k,
                &self.camera_pose,
                &self.objects,
                &params,
                self.config.min_mask_pixels,
            ) {
                Ok(mut obj) => {
                    obj.hidden_class = self.config.is_hidden(&det.class_label);
                    let q = det.probability();
                    let all = Image::filled(self.k.width, self.k.height, true);
                    obj.volume.integrate_depth(depth, &obj.pose, &self.k, &q)?;
                    obj.volume.integrate_counts(&q, &obj.pose, &self.k, &all)?;
                    info!(
                        "created object {} ({}) with {:.2} m volume",
                        obj.id,
                        obj.class_label,
                        obj.volume.extent().x
                    );
                    self.object_labels.insert(obj.id, obj.class_label.clone());
                    rep.created.push(obj.id);
                    self.next_id += 1;
                    self.objects.push(obj);
                }
                Err(reason) => {
                    debug!("detection {d} ({}) rejected: {reason}", det.class_label);
                    rep.rejected.push((d, reason.to_string()));
                }
            }
        }
        Ok(rep)
    }
}

/// Fold `process_frame` over a sequence of frames.
pub fn run_sequence<I, E>(
    frames: I,
    config: PipelineConfig,
    k: Intrinsics,
    mut on_frame: impl FnMut(&Slam, &FrameReport) -> Result<(), E>,
) -> Result<Slam, E>
where
    I: IntoIterator<Item = Result<Frame, E>>,
    E: From<ConfigError> + From<TsdfError>,
{
    let mut slam = Slam::new(config, k)?;
    for frame in frames {
        let frame = frame?;
        let report = slam.process_frame(&frame)?;
        on_frame(&slam, &report)?;
    }
    Ok(slam)
}
