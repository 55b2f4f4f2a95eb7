//! Checkpoint evaluation in normalized 3D and pixel 2D space.

use std::path::Path;

use lupi_core::metrics::{default_grid_2d, default_grid_3d};
use lupi_core::synth::{denormalize, SkeletonConfig};
use lupi_core::train::{predict, Modality};
use lupi_core::{Metrics, Network, NetworkSpec, Sample};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Metrics of one network on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Root-relative joints in normalized pose units.
    pub metrics_3d: Metrics,
    /// Projected joints in pixels.
    pub metrics_2d: Metrics,
}

/// Threshold grids for both spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub grid_3d: Vec<f64>,
    pub grid_2d: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            grid_3d: default_grid_3d(),
            grid_2d: default_grid_2d(),
        }
    }
}

/// A one-channel network reads the privileged image, anything else the hard one.
pub fn modality_of(spec: &NetworkSpec) -> Modality {
    if spec.input_shape[0] == 1 {
        Modality::Privileged
    } else {
        Modality::Hard
    }
}

/// Predictions in the flat `[N, 3J]` label layout.
pub trait Predictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>>;
}

impl Predictor for Network {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        Ok(predict(self, samples, modality_of(self.spec()))?)
    }
}

pub fn evaluate(
    model: &dyn Predictor,
    samples: &[Sample],
    skeleton: &SkeletonConfig,
    grids: &Grids,
) -> Result<Evaluation> {
    let j = skeleton.joints();
    let pred = model.predict(samples)?;
    let gt: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.pose.data().iter().copied())
        .collect();
    let metrics_3d = Metrics::compute(&pred, &gt, j, 3, &grids.grid_3d)?;
    let (mut pred_px, mut gt_px) = (Vec::new(), Vec::new());
    for (s, p) in samples.iter().zip(pred.chunks_exact(3 * j)) {
        let (root, scale) = (s.meta.root, s.meta.scale);
        pred_px.extend(
            denormalize(p, root, scale, skeleton)
                .iter()
                .flat_map(|q| [q[0], q[1]]),
        );
        gt_px.extend(
            denormalize(s.pose.data(), root, scale, skeleton)
                .iter()
                .flat_map(|q| [q[0], q[1]]),
        );
    }
    let metrics_2d = Metrics::compute(&pred_px, &gt_px, j, 2, &grids.grid_2d)?;
    Ok(Evaluation {
        metrics_3d,
        metrics_2d,
    })
}

/// Loads a checkpoint and evaluates it on `samples`.
pub fn evaluate_checkpoint(
    path: &Path,
    samples: &[Sample],
    skeleton: &SkeletonConfig,
    grids: &Grids,
) -> Result<Evaluation> {
    let net = crate::checkpoint::load(path)?;
    check_compatible(net.spec(), samples)?;
    evaluate(&net, samples, skeleton, grids)
}

/// Errors when the network input does not match the sample images.
pub fn check_compatible(spec: &NetworkSpec, samples: &[Sample]) -> Result<()> {
    let Some(s) = samples.first() else {
        return Ok(());
    };
    let image = match modality_of(spec) {
        Modality::Privileged => &s.image_priv,
        Modality::Hard => &s.image_hard,
    };
    if image.shape() != spec.input_shape || s.pose.len() != spec.output_dim {
        return Err(lupi_core::Error::InvalidShape(format!(
            "checkpoint expects {:?} images and {} outputs, data has {:?} images and {} outputs",
            spec.input_shape,
            spec.output_dim,
            image.shape(),
            s.pose.len()
        ))
        .into());
    }
    Ok(())
}

/// Metric rows `model,space,unit,metric,threshold,joint,value`.
pub fn metric_rows(model: &str, eval: &Evaluation) -> Vec<Vec<String>> {
    use crate::formats::num;
    let mut rows = Vec::new();
    for (space, unit, m) in [
        ("3d", "normalized", &eval.metrics_3d),
        ("2d", "px", &eval.metrics_2d),
    ] {
        let row = |metric: &str, t: String, j: String, v: f64| {
            vec![
                model.to_string(),
                space.to_string(),
                unit.to_string(),
                metric.to_string(),
                t,
                j,
                num(v),
            ]
        };
        rows.push(row("epe_mean", String::new(), String::new(), m.epe_mean));
        rows.push(row(
            "epe_median",
            String::new(),
            String::new(),
            m.epe_median,
        ));
        for (j, &e) in m.per_joint_epe.iter().enumerate() {
            rows.push(row("epe_joint", String::new(), j.to_string(), e));
        }
        for &(t, f) in &m.pck {
            rows.push(row("pck", num(t), String::new(), f));
        }
    }
    rows
}

pub const METRIC_HEADER: [&str; 7] = [
    "model",
    "space",
    "unit",
    "metric",
    "threshold",
    "joint",
    "value",
];
