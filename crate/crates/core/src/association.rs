//! E-step: per-pixel data likelihoods under every model, normalized into
//! association posteriors with a uniform prior over models.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Intrinsics, Pose};
use crate::image::Image;
use crate::tsdf::TsdfVolume;
use crate::ModelId;

/// Laplace-plus-uniform mixture parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodParams {
    /// Laplace scale in meters.
    pub sigma: f64,
    /// Weight of the Laplace (inlier) component.
    pub alpha: f64,
    /// Density of the uniform outlier component.
    pub uniform_density: f64,
}

impl Default for LikelihoodParams {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            alpha: 0.8,
            uniform_density: 1.0,
        }
    }
}

impl LikelihoodParams {
    pub fn is_valid(&self) -> bool {
        self.sigma > 0.0 && self.alpha > 0.0 && self.alpha <= 1.0 && self.uniform_density > 0.0
    }
}

/// Mixture density for a point with signed distance `psi` and foreground
/// probability `p_fg` inside a model volume.
#[inline]
pub fn mixture_likelihood(psi: f64, p_fg: f64, params: &LikelihoodParams) -> f64 {
    let laplace = (-psi.abs() / params.sigma).exp() / (2.0 * params.sigma);
    params.alpha * laplace * p_fg + (1.0 - params.alpha) * params.uniform_density
}

/// Likelihood of a point given in the volume's local frame; zero outside.
#[inline]
pub fn data_likelihood(vol: &TsdfVolume, p_local: &Vector3<f64>, params: &LikelihoodParams) -> f64 {
    match vol.interpolate_sdf(p_local) {
        Some(psi) => mixture_likelihood(psi, vol.foreground_prob(p_local), params),
        None => 0.0,
    }
}

/// Normalize likelihoods in place. Returns `false` (and leaves zeros) when
/// every likelihood is zero.
#[inline]
pub fn normalize_posterior(values: &mut [f64]) -> bool {
    let sum: f64 = values.iter().sum();
    if !(sum > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    values.iter_mut().for_each(|v| *v /= sum);
    true
}

/// A model as seen by the E-step: its volume and the transform taking camera
/// coordinates into the volume frame.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub id: ModelId,
    pub volume: &'a TsdfVolume,
    pub pose: Pose,
}

/// Per-pixel association posteriors, one weight plane per model.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationField {
    width: usize,
    height: usize,
    model_ids: Vec<ModelId>,
    /// `weights[m]` is the plane of model `model_ids[m]`.
    weights: Vec<Image<f64>>,
    valid: Image<bool>,
}

impl AssociationField {
    /// Every valid-depth pixel fully assigned to one model.
    pub fn single(depth: &Image<f32>, id: ModelId) -> Self {
        let valid = depth.map(|d| d > 0.0);
        let plane = depth.map(|d| if d > 0.0 { 1.0 } else { 0.0 });
        Self {
            width: depth.width(),
            height: depth.height(),
            model_ids: vec![id],
            weights: vec![plane],
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn model_ids(&self) -> &[ModelId] {
        &self.model_ids
    }

    pub fn valid(&self) -> &Image<bool> {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }

    /// Weight plane of a model; `None` if the model took no part.
    pub fn weights(&self, id: ModelId) -> Option<&Image<f64>> {
        let m = self.model_ids.iter().position(|&m| m == id)?;
        Some(&self.weights[m])
    }

    /// Weight plane of a model in single precision for fusion and tracking,
    /// or an all-zero plane.
    pub fn weights_or_zero(&self, id: ModelId) -> Image<f32> {
        self.weights(id)
            .map(|w| w.map(|q| q as f32))
            .unwrap_or_else(|| Image::filled(self.width, self.height, 0.0))
    }

    /// Weight of model `id` at pixel `(x, y)`.
    pub fn weight(&self, id: ModelId, x: usize, y: usize) -> f64 {
        self.weights(id).map_or(0.0, |w| w.get(x, y))
    }
}

/// Evaluate the posterior for every pixel of `depth` over `models`.
pub fn compute_association(
    depth: &Image<f32>,
    models: &[ModelView<'_>],
    k: &Intrinsics,
    params: &LikelihoodParams,
) -> AssociationField {
    let (w, h) = (depth.width(), depth.height());
    let n = models.len();
    // Row-major buffers of per-pixel posteriors; rows are independent.
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut post = vec![0f64; w * n];
            let mut valid = vec![false; w];
            let mut lik = vec![0f64; n];
            for x in 0..w {
                let d = depth.get(x, y);
                if d <= 0.0 {
                    continue;
                }
                let p = k.ray(x as f64, y as f64) * d as f64;
                for (m, model) in models.iter().enumerate() {
                    let local = model.pose.transform_point(&p);
                    lik[m] = data_likelihood(model.volume, &local, params);
                }
                if normalize_posterior(&mut lik) {
                    valid[x] = true;
                    post[x * n..(x + 1) * n].copy_from_slice(&lik);
                }
            }
            (post, valid)
        })
        .collect();
    let mut weights: Vec<Vec<f64>> = (0..n).map(|_| vec![0f64; w * h]).collect();
    let mut valid = vec![false; w * h];
    for (y, (post, vrow)) in rows.into_iter().enumerate() {
        for x in 0..w {
            valid[y * w + x] = vrow[x];
            for m in 0..n {
                weights[m][y * w + x] = post[x * n + m];
            }
        }
    }
    AssociationField {
        width: w,
        height: h,
        model_ids: models.iter().map(|m| m.id).collect(),
        weights: weights.into_iter().map(|v| Image::from_vec(w, h, v)).collect(),
        valid: Image::from_vec(w, h, valid),
    }
}
