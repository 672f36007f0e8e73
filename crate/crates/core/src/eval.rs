//! Trajectory evaluation: absolute trajectory error after rigid alignment and
//! relative pose error over fixed time intervals.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::io::ASSOCIATION_WINDOW;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("too few associated poses: {found} (need {required})")]
    TooFewPairs { found: usize, required: usize },
    #[error("no pose pair is {delta} s apart; the sequence is too short")]
    IntervalTooLong { delta: f64 },
}

/// Pair estimate and reference poses whose timestamps differ by at most
/// `window`. Closest pairs are taken first; each pose is used at most once.
/// Output is ordered by reference timestamp.
pub fn associate<'a>(
    est: &'a [(f64, Pose)],
    gt: &'a [(f64, Pose)],
    window: f64,
) -> Vec<(f64, &'a Pose, &'a Pose)> {
    let mut candidates = Vec::new();
    for (i, (te, _)) in est.iter().enumerate() {
        let lo = gt.partition_point(|g| g.0 < te - window);
        for (j, (tg, _)) in gt.iter().enumerate().skip(lo) {
            if *tg > te + window {
                break;
            }
            candidates.push(((te - tg).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut est_used = vec![false; est.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if est_used[i] || gt_used[j] {
            continue;
        }
        est_used[i] = true;
        gt_used[j] = true;
        pairs.push((j, i));
    }
    pairs.sort();
    pairs.into_iter().map(|(j, i)| (gt[j].0, &est[i].1, &gt[j].1)).collect()
}

/// Least-squares rigid transform `(R, t)` minimizing `sum |R a_i + t - b_i|^2`.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("U computed"), svd.v_t.expect("V computed"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    (r, cb - r * ca)
}

/// Root-mean-square translational error after rigid alignment of the
/// estimate onto the reference, in meters.
pub fn ate_rmse(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<f64, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_WINDOW);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            found: pairs.len(),
            required: 2,
        });
    }
    let a: Vec<_> = pairs.iter().map(|p| p.1.translation).collect();
    let b: Vec<_> = pairs.iter().map(|p| p.2.translation).collect();
    let (r, t) = align_rigid(&a, &b);
    let sum: f64 = a.iter().zip(&b).map(|(p, q)| (r * p + t - q).norm_squared()).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Translational relative pose error over intervals of `delta` seconds,
/// divided by `delta` (meters per second).
pub fn rpe_rmse(est: &[(f64, Pose)], gt: &[(f64, Pose)], delta: f64) -> Result<f64, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_WINDOW);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            found: pairs.len(),
            required: 2,
        });
    }
    let stamps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (t, e0, g0)) in pairs.iter().enumerate() {
        // first associated pose at least `delta` later
        let j = i + stamps[i..].partition_point(|&s| s < t + delta - 1e-9);
        let Some((_, e1, g1)) = pairs.get(j) else {
            break;
        };
        let rel_gt = g0.inverse() * **g1;
        let rel_est = e0.inverse() * **e1;
        let err = rel_gt.inverse() * rel_est;
        sum += err.translation.norm_squared();
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::IntervalTooLong { delta });
    }
    Ok((sum / count as f64).sqrt() / delta)
}
