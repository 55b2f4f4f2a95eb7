//! Keypoint metrics and activation-map aggregation.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `(threshold, fraction of sample-joint pairs with error ≤ threshold)`.
    pub pck: Vec<(f64, f64)>,
    pub epe_mean: f64,
    pub epe_median: f64,
    pub per_joint_epe: Vec<f64>,
    pub n_samples: usize,
}

/// Euclidean error of every (sample, joint) pair, sample-major.
/// `pred` and `gt` are flat `[N, J, D]` buffers.
pub fn joint_errors(pred: &[f64], gt: &[f64], joints: usize, dims: usize) -> Result<Vec<f64>> {
    if !(dims == 2 || dims == 3) {
        bail!(
            InvalidArgument,
            "end-point errors need 2 or 3 coordinates, got {}",
            dims
        );
    }
    if pred.len() != gt.len() || joints == 0 || !pred.len().is_multiple_of(joints * dims) {
        bail!(
            InvalidShape,
            "prediction of {} values vs ground truth of {} for {} joints",
            pred.len(),
            gt.len(),
            joints
        );
    }
    Ok(pred
        .chunks_exact(dims)
        .zip(gt.chunks_exact(dims))
        .map(|(p, g)| libm::sqrt(p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum()))
        .collect())
}

/// Even counts average the two middle values. Empty input gives 0.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// `(mean, median, per-joint mean)` of the end-point errors.
pub fn compute_epe(
    pred: &[f64],
    gt: &[f64],
    joints: usize,
    dims: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    let errs = joint_errors(pred, gt, joints, dims)?;
    Ok(epe_from_errors(&errs, joints))
}

fn epe_from_errors(errs: &[f64], joints: usize) -> (f64, f64, Vec<f64>) {
    if errs.is_empty() {
        return (0.0, 0.0, vec![0.0; joints]);
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let samples = errs.len() / joints;
    let mut per_joint = vec![0.0; joints];
    for row in errs.chunks_exact(joints) {
        per_joint.iter_mut().zip(row).for_each(|(a, e)| *a += e);
    }
    per_joint.iter_mut().for_each(|a| *a /= samples as f64);
    (mean, median(errs), per_joint)
}

/// PCK curve over non-negative, strictly increasing thresholds.
pub fn pck_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.is_empty() {
        bail!(InvalidArgument, "PCK needs at least one threshold");
    }
    if thresholds.iter().any(|&t| !(t >= 0.0 && t.is_finite()))
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        bail!(
            InvalidArgument,
            "PCK thresholds must be non-negative and strictly increasing"
        );
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total = sorted.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = sorted.partition_point(|&e| e <= t);
            (t, hits as f64 / total)
        })
        .collect())
}

pub fn compute_pck(
    pred: &[f64],
    gt: &[f64],
    joints: usize,
    dims: usize,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    pck_from_errors(&joint_errors(pred, gt, joints, dims)?, thresholds)
}

/// `points` values evenly spaced over `[0, max]`.
pub fn threshold_grid(max: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![max],
        _ => (0..points)
            .map(|i| max * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Default 3D grid in normalized pose units.
pub fn default_grid_3d() -> Vec<f64> {
    threshold_grid(1.0, 20)
}

/// Default 2D grid in pixels.
pub fn default_grid_2d() -> Vec<f64> {
    threshold_grid(15.0, 20)
}

impl Metrics {
    pub fn compute(
        pred: &[f64],
        gt: &[f64],
        joints: usize,
        dims: usize,
        thresholds: &[f64],
    ) -> Result<Self> {
        let errs = joint_errors(pred, gt, joints, dims)?;
        let (epe_mean, epe_median, per_joint_epe) = epe_from_errors(&errs, joints);
        Ok(Metrics {
            pck: pck_from_errors(&errs, thresholds)?,
            epe_mean,
            epe_median,
            per_joint_epe,
            n_samples: errs.len() / joints,
        })
    }
}

/// Grey-level image of one sample's tap: channel-wise maximum per pixel,
/// min-max stretched to 0..=255. A constant map gives all zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// One [`GrayImage`] per sample of a `[N, C, h, w]` tap.
pub fn activation_maps(tap: &Tensor) -> Result<Vec<GrayImage>> {
    let s = tap.shape();
    if s.len() != 4 {
        bail!(
            InvalidShape,
            "activation map needs a [N,C,h,w] tap, got {:?}",
            s
        );
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    debug_assert_eq!(tap.len(), n * c * h * w);
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for sample in tap.data().chunks_exact(c * plane) {
        let mut maxed = sample[..plane].to_vec();
        for ch in sample.chunks_exact(plane).skip(1) {
            maxed.iter_mut().zip(ch).for_each(|(m, &v)| *m = m.max(v));
        }
        let lo = maxed.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = maxed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = if hi > lo {
            maxed
                .iter()
                .map(|&v| libm::round(255.0 * (v - lo) / (hi - lo)) as u8)
                .collect()
        } else {
            vec![0; plane]
        };
        out.push(GrayImage {
            width: w,
            height: h,
            pixels,
        });
    }
    Ok(out)
}
