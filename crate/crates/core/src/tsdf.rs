//! Truncated signed-distance voxel volumes.
//!
//! Samples sit at voxel centers: voxel `(i, j, k)` is located at
//! `origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size`, where
//! `origin = center - resolution * voxel_size / 2`. Trilinear lookups need all
//! eight neighbouring samples, so a point is "inside" only between the first
//! and last sample planes of every axis.
//!
//! Foreground/background counts are allocated only for object volumes. A
//! volume without count grids owns every surface it stores, so its foreground
//! probability is 1.

use std::io::{self, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;

/// Resolution increment used when a volume has to grow.
pub const RESIZE_STEP: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsdfError {
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("invalid volume parameters: {0}")]
    InvalidParameters(String),
    #[error("volume has no foreground/background count grids")]
    NoCounts,
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn from_center_half_extent(center: Vector3<f64>, half: Vector3<f64>) -> Self {
        Self {
            min: center - half,
            max: center + half,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]))
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] && other.max[a] <= self.max[a])
    }

    pub fn contains_point(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn volume(&self) -> f64 {
        let e = self.max - self.min;
        e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
    }

    pub fn intersection(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.sup(&other.min),
            max: self.max.inf(&other.max),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CountGrids {
    fg: Vec<f32>,
    bg: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    center: Vector3<f64>,
    resolution: [usize; 3],
    voxel_size: f64,
    truncation: f64,
    weight_cap: f64,
    sdf: Vec<f32>,
    weight: Vec<f32>,
    counts: Option<CountGrids>,
}

/// Trilinear support of a point: lower corner voxel and fractional offsets.
#[derive(Debug, Clone, Copy)]
struct Cell {
    base: [usize; 3],
    frac: [f64; 3],
}

impl TsdfVolume {
    /// Fresh volume: every voxel at `+truncation` with zero weight.
    pub fn new(
        center: Vector3<f64>,
        resolution: [usize; 3],
        voxel_size: f64,
        truncation: f64,
        weight_cap: f64,
        with_counts: bool,
    ) -> Result<Self, TsdfError> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(TsdfError::InvalidParameters(format!(
                "resolution {resolution:?} must be at least 2 per axis"
            )));
        }
        if !(voxel_size > 0.0 && truncation > 0.0 && weight_cap > 0.0) {
            return Err(TsdfError::InvalidParameters(
                "voxel size, truncation and weight cap must be positive".into(),
            ));
        }
        // Keep the bound exactly representable in the f32 grid.
        let truncation = truncation as f32 as f64;
        let n = resolution[0] * resolution[1] * resolution[2];
        Ok(Self {
            center,
            resolution,
            voxel_size,
            truncation,
            weight_cap,
            sdf: vec![truncation as f32; n],
            weight: vec![0.0; n],
            counts: with_counts.then(|| CountGrids {
                fg: vec![0.0; n],
                bg: vec![0.0; n],
            }),
        })
    }

    /// Cubic volume with truncation `truncation_voxels * voxel_size`.
    pub fn cube(
        center: Vector3<f64>,
        resolution: usize,
        size: f64,
        truncation_voxels: f64,
        weight_cap: f64,
        with_counts: bool,
    ) -> Result<Self, TsdfError> {
        let v = size / resolution as f64;
        Self::new(
            center,
            [resolution; 3],
            v,
            truncation_voxels * v,
            weight_cap,
            with_counts,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn weight_cap(&self) -> f64 {
        self.weight_cap
    }

    pub fn has_counts(&self) -> bool {
        self.counts.is_some()
    }

    pub fn voxel_count(&self) -> usize {
        self.sdf.len()
    }

    pub fn sdf_grid(&self) -> &[f32] {
        &self.sdf
    }

    pub fn weight_grid(&self) -> &[f32] {
        &self.weight
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.resolution[0] as f64,
            self.resolution[1] as f64,
            self.resolution[2] as f64,
        ) * self.voxel_size
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.center - self.extent() * 0.5
    }

    /// Full voxel extent.
    pub fn bounds(&self) -> Aabb {
        let o = self.origin();
        Aabb::new(o, o + self.extent())
    }

    /// Region where trilinear lookups are defined (first to last sample).
    pub fn sample_bounds(&self) -> Aabb {
        let o = self.origin();
        let half = Vector3::repeat(0.5 * self.voxel_size);
        Aabb::new(o + half, o + self.extent() - half)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin()
            + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn sdf_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.sdf[self.index(i, j, k)]
    }

    pub fn weight_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.weight[self.index(i, j, k)]
    }

    /// `(fg, bg)` of a voxel, if the volume has count grids.
    pub fn counts_at(&self, i: usize, j: usize, k: usize) -> Option<(f32, f32)> {
        let idx = self.index(i, j, k);
        self.counts.as_ref().map(|c| (c.fg[idx], c.bg[idx]))
    }

    /// Overwrite one voxel; `sdf` is clamped to the truncation band and
    /// `weight` to `[0, weight_cap]`.
    pub fn set_voxel(&mut self, i: usize, j: usize, k: usize, sdf: f64, weight: f64) {
        let idx = self.index(i, j, k);
        self.sdf[idx] = sdf.clamp(-self.truncation, self.truncation) as f32;
        self.weight[idx] = weight.clamp(0.0, self.weight_cap) as f32;
    }

    pub fn set_counts(&mut self, i: usize, j: usize, k: usize, fg: f64, bg: f64) -> Result<(), TsdfError> {
        let idx = self.index(i, j, k);
        let c = self.counts.as_mut().ok_or(TsdfError::NoCounts)?;
        c.fg[idx] = fg.max(0.0) as f32;
        c.bg[idx] = bg.max(0.0) as f32;
        Ok(())
    }

    /// Fill every voxel from a signed-distance function of the voxel center.
    pub fn fill_from_fn(&mut self, weight: f64, f: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let [rx, ry, _] = self.resolution;
        let origin = self.origin();
        let (v, tau) = (self.voxel_size, self.truncation);
        let w = weight.clamp(0.0, self.weight_cap) as f32;
        self.sdf
            .par_chunks_mut(rx * ry)
            .zip(self.weight.par_chunks_mut(rx * ry))
            .enumerate()
            .for_each(|(k, (sdf, wgt))| {
                for j in 0..ry {
                    for i in 0..rx {
                        let p = origin
                            + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * v;
                        sdf[i + rx * j] = f(&p).clamp(-tau, tau) as f32;
                        wgt[i + rx * j] = w;
                    }
                }
            });
    }

    #[inline]
    fn locate(&self, p: &Vector3<f64>) -> Option<Cell> {
        let origin = self.origin();
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let r = self.resolution[a];
            let g = (p[a] - origin[a]) / self.voxel_size - 0.5;
            // Negated comparison also rejects NaN. The slack absorbs rounding
            // when querying exactly at the first or last sample.
            if !(g >= -1e-9 && g <= (r - 1) as f64 + 1e-9) {
                return None;
            }
            let g = g.clamp(0.0, (r - 1) as f64);
            let i = (g.floor() as usize).min(r - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        Some(Cell { base, frac })
    }

    #[inline]
    fn corners(&self, grid: &[f32], c: &Cell) -> [f64; 8] {
        let [i, j, k] = c.base;
        let sx = 1;
        let sy = self.resolution[0];
        let sz = self.resolution[0] * self.resolution[1];
        let b = self.index(i, j, k);
        [
            grid[b] as f64,
            grid[b + sx] as f64,
            grid[b + sy] as f64,
            grid[b + sx + sy] as f64,
            grid[b + sz] as f64,
            grid[b + sx + sz] as f64,
            grid[b + sy + sz] as f64,
            grid[b + sx + sy + sz] as f64,
        ]
    }

    #[inline]
    fn blend(c: &[f64; 8], f: &[f64; 3]) -> f64 {
        let [fx, fy, fz] = *f;
        let c00 = c[0] + (c[1] - c[0]) * fx;
        let c10 = c[2] + (c[3] - c[2]) * fx;
        let c01 = c[4] + (c[5] - c[4]) * fx;
        let c11 = c[6] + (c[7] - c[6]) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }

    /// Derivative of [`Self::blend`] with respect to the fractional coordinates.
    #[inline]
    fn blend_gradient(c: &[f64; 8], f: &[f64; 3]) -> Vector3<f64> {
        let [fx, fy, fz] = *f;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let dx = ((c[1] - c[0]) * gy + (c[3] - c[2]) * fy) * gz
            + ((c[5] - c[4]) * gy + (c[7] - c[6]) * fy) * fz;
        let dy = ((c[2] - c[0]) * gx + (c[3] - c[1]) * fx) * gz
            + ((c[6] - c[4]) * gx + (c[7] - c[5]) * fx) * fz;
        let dz = ((c[4] - c[0]) * gx + (c[5] - c[1]) * fx) * gy
            + ((c[6] - c[2]) * gx + (c[7] - c[3]) * fx) * fy;
        Vector3::new(dx, dy, dz)
    }

    /// Trilinear signed distance; `None` outside the sample region.
    #[inline]
    pub fn interpolate_sdf(&self, p: &Vector3<f64>) -> Option<f64> {
        let cell = self.locate(p)?;
        Some(Self::blend(&self.corners(&self.sdf, &cell), &cell.frac))
    }

    /// Trilinear fusion weight; `None` outside the sample region.
    #[inline]
    pub fn interpolate_weight(&self, p: &Vector3<f64>) -> Option<f64> {
        let cell = self.locate(p)?;
        Some(Self::blend(&self.corners(&self.weight, &cell), &cell.frac))
    }

    /// Analytic gradient of the trilinear interpolant (meters per meter).
    #[inline]
    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        self.sdf_with_gradient(p).map(|(_, g)| g)
    }

    /// Value and gradient from a single set of corner reads.
    #[inline]
    pub fn sdf_with_gradient(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let cell = self.locate(p)?;
        let c = self.corners(&self.sdf, &cell);
        Some((
            Self::blend(&c, &cell.frac),
            Self::blend_gradient(&c, &cell.frac) / self.voxel_size,
        ))
    }

    /// Like [`Self::sdf_with_gradient`], but `None` unless all eight support
    /// voxels have been observed (positive weight). Blending in the `+tau`
    /// of never-observed voxels would fake a surface offset.
    #[inline]
    pub fn observed_sdf_with_gradient(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let cell = self.locate(p)?;
        if self.corners(&self.weight, &cell).iter().any(|&w| w <= 0.0) {
            return None;
        }
        let c = self.corners(&self.sdf, &cell);
        Some((
            Self::blend(&c, &cell.frac),
            Self::blend_gradient(&c, &cell.frac) / self.voxel_size,
        ))
    }

    /// Trilinear signed distance where all eight support voxels are observed.
    #[inline]
    pub fn observed_sdf(&self, p: &Vector3<f64>) -> Option<f64> {
        let cell = self.locate(p)?;
        if self.corners(&self.weight, &cell).iter().any(|&w| w <= 0.0) {
            return None;
        }
        Some(Self::blend(&self.corners(&self.sdf, &cell), &cell.frac))
    }

    /// `Fg / (Fg + Bg)` from trilinearly interpolated counts. Returns 0.5
    /// without evidence or outside, and 1 for volumes without count grids.
    #[inline]
    pub fn foreground_prob(&self, p: &Vector3<f64>) -> f64 {
        let Some(counts) = &self.counts else {
            return 1.0;
        };
        let Some(cell) = self.locate(p) else {
            return 0.5;
        };
        let fg = Self::blend(&self.corners(&counts.fg, &cell), &cell.frac);
        let bg = Self::blend(&self.corners(&counts.bg, &cell), &cell.frac);
        if fg + bg < 1e-6 {
            0.5
        } else {
            (fg / (fg + bg)).clamp(0.0, 1.0)
        }
    }

    fn check_dims<T>(img: &Image<T>, k: &Intrinsics) -> Result<(), TsdfError>
    where
        T: Copy,
    {
        if img.width() != k.width || img.height() != k.height {
            return Err(TsdfError::DimensionMismatch {
                got_w: img.width(),
                got_h: img.height(),
                want_w: k.width,
                want_h: k.height,
            });
        }
        Ok(())
    }

    /// Visit every voxel whose center projects into the image, in parallel
    /// over z-slices. The callback receives the slice-local voxel index, the
    /// pixel index and the voxel depth in the camera frame.
    fn for_each_projected_voxel<S: Send>(
        resolution: [usize; 3],
        origin: Vector3<f64>,
        voxel_size: f64,
        pose_vol_from_cam: &Pose,
        k: &Intrinsics,
        slices: Vec<S>,
        visit: impl Fn(&mut S, usize, usize, f64) + Sync,
    ) {
        let [rx, ry, _] = resolution;
        let cam_from_vol = pose_vol_from_cam.inverse();
        let step = cam_from_vol.rotation.column(0) * voxel_size;
        let (w, h) = (k.width as f64, k.height as f64);
        slices.into_par_iter().enumerate().for_each(|(kz, mut slice)| {
            for j in 0..ry {
                let p0 = origin
                    + Vector3::new(0.5, j as f64 + 0.5, kz as f64 + 0.5) * voxel_size;
                let base = cam_from_vol.transform_point(&p0);
                for i in 0..rx {
                    let pc = base + step * i as f64;
                    if pc.z <= 0.0 {
                        continue;
                    }
                    let inv_z = 1.0 / pc.z;
                    let u = k.fx * pc.x * inv_z + k.cx + 0.5;
                    let v = k.fy * pc.y * inv_z + k.cy + 0.5;
                    if !(u >= 0.0 && v >= 0.0 && u < w && v < h) {
                        continue;
                    }
                    let pix = v as usize * k.width + u as usize;
                    visit(&mut slice, i + rx * j, pix, pc.z);
                }
            }
        });
    }

    /// Projective association-weighted fusion of a depth map.
    ///
    /// `weights` holds this volume's per-pixel association weight. Voxels
    /// farther than the truncation distance behind the measured surface, or
    /// whose pixel has zero weight or invalid depth, are left untouched.
    pub fn integrate_depth(
        &mut self,
        depth: &Image<f32>,
        pose_vol_from_cam: &Pose,
        k: &Intrinsics,
        weights: &Image<f32>,
    ) -> Result<(), TsdfError> {
        Self::check_dims(depth, k)?;
        Self::check_dims(weights, k)?;
        let slice = self.resolution[0] * self.resolution[1];
        let (tau, cap) = (self.truncation, self.weight_cap);
        let (resolution, origin, v) = (self.resolution, self.origin(), self.voxel_size);
        let slices: Vec<_> = self
            .sdf
            .chunks_mut(slice)
            .zip(self.weight.chunks_mut(slice))
            .collect();
        let (d_img, w_img) = (depth.data(), weights.data());
        Self::for_each_projected_voxel(
            resolution,
            origin,
            v,
            pose_vol_from_cam,
            k,
            slices,
            |(sdf, wgt), idx, pix, z| {
                let d = d_img[pix];
                if d <= 0.0 {
                    return;
                }
                let q = w_img[pix];
                if q <= 0.0 {
                    return;
                }
                let obs = d as f64 - z;
                if obs < -tau {
                    return;
                }
                fuse_observation(&mut sdf[idx], &mut wgt[idx], obs.min(tau), q as f64, cap);
            },
        );
        Ok(())
    }

    /// Accumulate foreground/background evidence from a per-pixel foreground
    /// probability, only where `occlusion_ok` holds.
    pub fn integrate_counts(
        &mut self,
        mask_prob: &Image<f32>,
        pose_vol_from_cam: &Pose,
        k: &Intrinsics,
        occlusion_ok: &Image<bool>,
    ) -> Result<(), TsdfError> {
        Self::check_dims(mask_prob, k)?;
        Self::check_dims(occlusion_ok, k)?;
        let slice = self.resolution[0] * self.resolution[1];
        let origin = self.origin();
        let (resolution, v) = (self.resolution, self.voxel_size);
        let counts = self.counts.as_mut().ok_or(TsdfError::NoCounts)?;
        let slices: Vec<_> = counts
            .fg
            .chunks_mut(slice)
            .zip(counts.bg.chunks_mut(slice))
            .collect();
        let (prob, ok) = (mask_prob.data(), occlusion_ok.data());
        Self::for_each_projected_voxel(
            resolution,
            origin,
            v,
            pose_vol_from_cam,
            k,
            slices,
            |(fg, bg), idx, pix, _| {
                if !ok[pix] {
                    return;
                }
                let p = prob[pix].clamp(0.0, 1.0);
                fg[idx] += p;
                bg[idx] += 1.0 - p;
            },
        );
        Ok(())
    }

    /// Resolution and voxel offset (relative to the current origin) of the
    /// smallest grown grid covering both the current extent and `required`.
    pub fn resize_plan(&self, required: &Aabb) -> ([usize; 3], [i64; 3]) {
        let origin = self.origin();
        let v = self.voxel_size;
        let mut resolution = self.resolution;
        let mut offset = [0i64; 3];
        for a in 0..3 {
            let r = self.resolution[a] as i64;
            let lo = (((required.min[a] - origin[a]) / v).floor() as i64).min(0);
            let hi = (((required.max[a] - origin[a]) / v).ceil() as i64).max(r);
            let need = hi - lo;
            let step = RESIZE_STEP as i64;
            let grow = if need > r { (need - r + step - 1) / step * step } else { 0 };
            let r_new = r + grow;
            offset[a] = lo - (r_new - need) / 2;
            resolution[a] = r_new as usize;
        }
        (resolution, offset)
    }

    /// Grow the grid so it covers `required`. Voxel size and truncation stay
    /// fixed, the center moves by whole voxels, and every existing voxel keeps
    /// its world position and data.
    pub fn resize_to_fit(&self, required: &Aabb) -> TsdfVolume {
        if required.is_degenerate() || self.bounds().contains_box(required) {
            return self.clone();
        }
        let (resolution, offset) = self.resize_plan(required);
        if resolution == self.resolution {
            return self.clone();
        }
        let v = self.voxel_size;
        let mut center = self.center;
        for a in 0..3 {
            let grow = (resolution[a] - self.resolution[a]) as i64 / 2;
            center[a] += (offset[a] + grow) as f64 * v;
        }
        let mut out = TsdfVolume::new(
            center,
            resolution,
            v,
            self.truncation,
            self.weight_cap,
            self.has_counts(),
        )
        .expect("parameters already validated");
        let [rx, ry, rz] = self.resolution;
        for kz in 0..rz {
            for j in 0..ry {
                for i in 0..rx {
                    let src = self.index(i, j, kz);
                    let dst = out.index(
                        (i as i64 - offset[0]) as usize,
                        (j as i64 - offset[1]) as usize,
                        (kz as i64 - offset[2]) as usize,
                    );
                    out.sdf[dst] = self.sdf[src];
                    out.weight[dst] = self.weight[src];
                    if let (Some(a), Some(b)) = (&mut out.counts, &self.counts) {
                        a.fg[dst] = b.fg[src];
                        a.bg[dst] = b.bg[src];
                    }
                }
            }
        }
        out
    }

    /// Binary snapshot: magic `TSDFVOL1`, center (3 x f32), resolution
    /// (3 x u32), voxel size (f32), truncation (f32), count flag (u32), then
    /// the sdf, weight and (if flagged) fg and bg grids as f32. All values are
    /// little-endian; grids are x-fastest.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(b"TSDFVOL1")?;
        for a in 0..3 {
            w.write_all(&(self.center[a] as f32).to_le_bytes())?;
        }
        for a in 0..3 {
            w.write_all(&(self.resolution[a] as u32).to_le_bytes())?;
        }
        w.write_all(&(self.voxel_size as f32).to_le_bytes())?;
        w.write_all(&(self.truncation as f32).to_le_bytes())?;
        w.write_all(&(self.has_counts() as u32).to_le_bytes())?;
        let mut write_grid = |g: &[f32]| -> io::Result<()> {
            let mut buf = Vec::with_capacity(g.len() * 4);
            for v in g {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)
        };
        write_grid(&self.sdf)?;
        write_grid(&self.weight)?;
        if let Some(c) = &self.counts {
            write_grid(&c.fg)?;
            write_grid(&c.bg)?;
        }
        Ok(())
    }
}

/// One step of the weighted running-mean fusion:
/// `psi <- (W psi + q d) / (W + q)`, `W <- min(W_max, W + q)`.
#[inline]
pub fn fuse_observation(sdf: &mut f32, weight: &mut f32, distance: f64, q: f64, weight_cap: f64) {
    let w = *weight as f64;
    let fused = (w * (*sdf as f64) + q * distance) / (w + q);
    *sdf = fused as f32;
    *weight = (w + q).min(weight_cap) as f32;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(res: usize) -> TsdfVolume {
        // 1 cm voxels, sample centers at integer-ish coordinates
        TsdfVolume::new(Vector3::zeros(), [res; 3], 0.01, 0.1, 64.0, true).unwrap()
    }

    fn intrinsics() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 15.5,
            cy: 11.5,
            width: 32,
            height: 24,
            depth_scale: 5000.0,
        }
    }

    #[test]
    fn sample_point_returns_stored_value() {
        let mut vol = small(8);
        vol.set_voxel(3, 4, 5, 0.042, 2.0);
        let p = vol.voxel_center(3, 4, 5);
        assert!((vol.interpolate_sdf(&p).unwrap() - 0.042f32 as f64).abs() < 1e-12);
        assert!((vol.interpolate_weight(&p).unwrap() - 2.0).abs() < 1e-12);
        // last sample along every axis is still addressable
        vol.set_voxel(7, 7, 7, -0.03, 1.0);
        let p = vol.voxel_center(7, 7, 7);
        assert!((vol.interpolate_sdf(&p).unwrap() - (-0.03f32) as f64).abs() < 1e-12);
    }

    #[test]
    fn midpoint_interpolation() {
        let mut vol = TsdfVolume::new(Vector3::zeros(), [4; 3], 0.01, 1.0, 64.0, false).unwrap();
        vol.fill_from_fn(1.0, |_| 0.1);
        for j in 0..4 {
            for k in 0..4 {
                vol.set_voxel(2, j, k, 0.3, 4.0);
                vol.set_voxel(1, j, k, 0.1, 2.0);
            }
        }
        let p = (vol.voxel_center(1, 1, 1) + vol.voxel_center(2, 1, 1)) * 0.5;
        assert!((vol.interpolate_sdf(&p).unwrap() - 0.2).abs() < 1e-7);
        assert!((vol.interpolate_weight(&p).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn outside_marker_beyond_face() {
        let vol = small(8);
        let p = vol.voxel_center(7, 3, 3) + Vector3::new(0.01, 0.0, 0.0);
        assert_eq!(vol.interpolate_sdf(&p), None);
        assert_eq!(vol.interpolate_weight(&p), None);
        assert_eq!(vol.sdf_gradient(&p), None);
        assert_eq!(vol.foreground_prob(&p), 0.5);
    }

    #[test]
    fn fresh_volume_defaults() {
        let vol = small(8);
        let p = Vector3::new(0.001, -0.002, 0.003);
        assert_eq!(vol.interpolate_weight(&p), Some(0.0));
        assert!((vol.interpolate_sdf(&p).unwrap() - 0.1).abs() < 1e-7);
        assert_eq!(vol.foreground_prob(&p), 0.5);
    }

    #[test]
    fn foreground_probability_from_counts() {
        let mut vol = small(4);
        vol.set_counts(1, 1, 1, 3.0, 1.0).unwrap();
        vol.set_counts(2, 2, 2, 1.0, 0.0).unwrap();
        assert!((vol.foreground_prob(&vol.voxel_center(1, 1, 1)) - 0.75).abs() < 1e-12);
        assert!((vol.foreground_prob(&vol.voxel_center(2, 2, 2)) - 1.0).abs() < 1e-12);
        let bg = TsdfVolume::new(Vector3::zeros(), [4; 3], 0.01, 0.1, 64.0, false).unwrap();
        assert_eq!(bg.foreground_prob(&Vector3::zeros()), 1.0);
    }

    #[test]
    fn gradient_of_linear_and_constant_fields() {
        let mut vol = TsdfVolume::new(Vector3::zeros(), [16; 3], 0.05, 1.0, 64.0, false).unwrap();
        vol.fill_from_fn(1.0, |p| p.z);
        for p in [Vector3::new(0.1, -0.07, 0.2), Vector3::new(-0.3, 0.31, -0.17)] {
            let g = vol.sdf_gradient(&p).unwrap();
            assert!((g - Vector3::new(0.0, 0.0, 1.0)).amax() < 1e-6);
        }
        vol.fill_from_fn(1.0, |_| 0.25);
        let g = vol.sdf_gradient(&Vector3::new(0.01, 0.02, 0.03)).unwrap();
        assert!(g.amax() < 1e-12);
    }

    #[test]
    fn sphere_gradient_is_radial() {
        let mut vol = TsdfVolume::new(Vector3::zeros(), [64; 3], 0.02, 0.5, 64.0, false).unwrap();
        vol.fill_from_fn(1.0, |p| p.norm() - 0.3);
        for p in [
            Vector3::new(0.25, 0.1, -0.05),
            Vector3::new(-0.2, 0.2, 0.2),
            Vector3::new(0.0, -0.33, 0.11),
        ] {
            let g = vol.sdf_gradient(&p).unwrap();
            let radial = p.normalize();
            assert!((g - radial).norm() < 0.05, "{g} vs {radial}");
        }
    }

    /// Independent finite-difference oracle on the interpolant.
    #[test]
    fn gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut vol = TsdfVolume::new(Vector3::zeros(), [24; 3], 0.02, 0.3, 64.0, false).unwrap();
        vol.fill_from_fn(1.0, |p| {
            (p - Vector3::new(0.05, -0.02, 0.03)).norm() - 0.12 + 0.03 * (7.0 * p.x).sin()
        });
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let v = vol.voxel_size();
        let h = v / 10.0;
        let origin = vol.origin();
        let mut checked = 0;
        while checked < 1000 {
            let p = Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            // stay away from cell boundaries
            let near_boundary = (0..3).any(|a| {
                let g = (p[a] - origin[a]) / v - 0.5;
                let f = g - g.floor();
                f < 0.2 || f > 0.8
            });
            if near_boundary {
                continue;
            }
            let g = vol.sdf_gradient(&p).unwrap();
            let mut fd = Vector3::zeros();
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                fd[a] = (vol.interpolate_sdf(&(p + e)).unwrap() - vol.interpolate_sdf(&(p - e)).unwrap())
                    / (2.0 * h);
            }
            let rel = (g - fd).norm() / fd.norm().max(1e-9);
            assert!(rel < 1e-2, "relative error {rel} at {p}");
            checked += 1;
        }
    }

    #[test]
    fn fusion_examples() {
        let (mut s, mut w) = (0.1f32, 0.0f32);
        fuse_observation(&mut s, &mut w, 0.3, 1.0, 64.0);
        assert!((s - 0.3).abs() < 1e-7 && w == 1.0);

        let (mut s, mut w) = (0.1f32, 1.0f32);
        fuse_observation(&mut s, &mut w, 0.3, 1.0, 64.0);
        assert!((s - 0.2).abs() < 1e-7 && w == 2.0);

        let (mut s, mut w) = (0.1f32, 64.0f32);
        fuse_observation(&mut s, &mut w, 0.3, 1.0, 64.0);
        assert!((s as f64 - (0.1 + (0.3 - 0.1) / 65.0)).abs() < 1e-7);
        assert_eq!(w, 64.0);
    }

    fn plane_scene() -> (Intrinsics, Image<f32>, Pose) {
        let k = intrinsics();
        // camera 0.5 m in front of the volume center, looking along +z
        let depth = Image::filled(k.width, k.height, 0.5f32);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -0.5));
        (k, depth, pose)
    }

    #[test]
    fn integrate_depth_fuses_plane() {
        let (k, depth, pose) = plane_scene();
        let mut vol = TsdfVolume::new(Vector3::zeros(), [16; 3], 0.01, 0.04, 64.0, false).unwrap();
        let ones = Image::filled(k.width, k.height, 1.0f32);
        vol.integrate_depth(&depth, &pose, &k, &ones).unwrap();
        // the plane z = 0 in volume coordinates
        let p = Vector3::new(0.0, 0.0, 0.015);
        let s = vol.interpolate_sdf(&p).unwrap();
        assert!((s + 0.015).abs() < 1e-6, "{s}");
        // voxels more than tau behind the plane are untouched
        let deep = vol.voxel_center(8, 8, 15);
        assert!(deep.z > 0.04);
        assert_eq!(vol.weight_at(8, 8, 15), 0.0);
        assert!(vol.sdf_grid().iter().all(|s| s.abs() as f64 <= vol.truncation()));
    }

    #[test]
    fn integrate_depth_zero_weight_is_noop() {
        let (k, depth, pose) = plane_scene();
        let mut vol = TsdfVolume::new(Vector3::zeros(), [8; 3], 0.01, 0.04, 64.0, false).unwrap();
        let before = vol.clone();
        let zeros = Image::filled(k.width, k.height, 0.0f32);
        vol.integrate_depth(&depth, &pose, &k, &zeros).unwrap();
        assert_eq!(vol, before);
    }

    #[test]
    fn integrate_rejects_mismatched_images() {
        let (k, _, pose) = plane_scene();
        let mut vol = small(8);
        let depth = Image::filled(10, 10, 1.0f32);
        let w = Image::filled(k.width, k.height, 1.0f32);
        assert!(matches!(
            vol.integrate_depth(&depth, &pose, &k, &w),
            Err(TsdfError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn integrate_counts_examples() {
        let (k, _, pose) = plane_scene();
        let mut vol = small(8);
        let ok = Image::filled(k.width, k.height, true);
        vol.integrate_counts(&Image::filled(k.width, k.height, 1.0f32), &pose, &k, &ok).unwrap();
        assert_eq!(vol.counts_at(4, 4, 4), Some((1.0, 0.0)));

        let mut vol = small(8);
        vol.integrate_counts(&Image::filled(k.width, k.height, 0.3f32), &pose, &k, &ok).unwrap();
        let (fg, bg) = vol.counts_at(4, 4, 4).unwrap();
        assert!((fg - 0.3).abs() < 1e-7 && (bg - 0.7).abs() < 1e-7);

        let mut vol = small(8);
        let blocked = Image::filled(k.width, k.height, false);
        vol.integrate_counts(&Image::filled(k.width, k.height, 1.0f32), &pose, &k, &blocked).unwrap();
        assert_eq!(vol.counts_at(4, 4, 4), Some((0.0, 0.0)));
    }

    #[test]
    fn resize_noop_when_contained() {
        let vol = small(8);
        let inner = Aabb::new(Vector3::repeat(-0.02), Vector3::repeat(0.02));
        assert_eq!(vol.resize_to_fit(&inner), vol);
    }

    #[test]
    fn resize_extends_one_face() {
        let mut vol = small(8);
        vol.fill_from_fn(3.0, |p| p.x + 2.0 * p.y - p.z);
        vol.set_counts(1, 2, 3, 2.0, 1.0).unwrap();
        let b = vol.bounds();
        let required = Aabb::new(b.min, b.max + Vector3::new(0.03, 0.0, 0.0));
        let out = vol.resize_to_fit(&required);
        assert_eq!(out.resolution(), [8 + RESIZE_STEP, 8, 8]);
        assert!(out.bounds().contains_box(&required));
        assert_eq!(out.voxel_size(), vol.voxel_size());
        assert_eq!(out.truncation(), vol.truncation());
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    let p = vol.voxel_center(i, j, k);
                    let a = vol.interpolate_sdf(&p).unwrap();
                    let b = out.interpolate_sdf(&p).unwrap();
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
        let p = vol.voxel_center(1, 2, 3);
        assert!((out.foreground_prob(&p) - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn snapshot_layout() {
        let vol = small(4);
        let mut buf = Vec::new();
        vol.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"TSDFVOL1");
        assert_eq!(buf.len(), 8 + 12 + 12 + 4 + 4 + 4 + 4 * 64 * 4);
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 4);
    }

    proptest! {
        #[test]
        fn weighted_mean_oracle(seq in prop::collection::vec((0.01f64..2.0, -0.1f64..0.1), 1..30)) {
            let (mut s, mut w) = (0.1f32, 0.0f32);
            for &(q, d) in &seq {
                fuse_observation(&mut s, &mut w, d, q, 64.0);
            }
            let total: f64 = seq.iter().map(|p| p.0).sum();
            let mean = seq.iter().map(|p| p.0 * p.1).sum::<f64>() / total;
            prop_assume!(total < 64.0);
            prop_assert!((s as f64 - mean).abs() < 1e-6);
        }

        #[test]
        fn resize_copies_exactly(
            lo in prop::array::uniform3(-0.2f64..0.0),
            hi in prop::array::uniform3(0.0f64..0.2),
        ) {
            let mut vol = TsdfVolume::new(Vector3::new(0.013, -0.021, 0.4), [6, 7, 8], 0.02, 0.08, 64.0, true).unwrap();
            vol.fill_from_fn(1.0, |p| (p.x * 3.0).sin() * 0.05 + p.y * 0.1);
            let required = Aabb::new(vol.center() + Vector3::from(lo), vol.center() + Vector3::from(hi));
            let out = vol.resize_to_fit(&required);
            prop_assert!(out.bounds().contains_box(&required) || vol == out);
            let shift = (out.center() - vol.center()) / vol.voxel_size();
            for a in 0..3 {
                prop_assert!((shift[a] - shift[a].round()).abs() < 1e-6);
                prop_assert_eq!((out.resolution()[a] - vol.resolution()[a]) % RESIZE_STEP, 0);
            }
            for k in 0..8 { for j in 0..7 { for i in 0..6 {
                let p = vol.voxel_center(i, j, k);
                let a = vol.interpolate_sdf(&p).unwrap();
                let b = out.interpolate_sdf(&p).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }}}
        }
    }
}
