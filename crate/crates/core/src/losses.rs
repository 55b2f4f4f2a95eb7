//! Pose, feature-mimicking, joint and mask losses.
//!
//! Every loss is a squared L2 norm divided by the batch size N, so the
//! pose/feature balance λ means the same thing at any batch size.

use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the pose term in the joint loss.
    pub lambda: f64,
    /// Fraction of each batch that also gets the mask loss.
    pub mask_proportion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 100.0,
            mask_proportion: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            bail!(
                InvalidArgument,
                "lambda must be positive, got {}",
                self.lambda
            );
        }
        if !(0.0..=1.0).contains(&self.mask_proportion) {
            bail!(
                InvalidArgument,
                "mask proportion must lie in [0,1], got {}",
                self.mask_proportion
            );
        }
        Ok(())
    }
}

fn batch_size(g: &Graph, v: Var) -> f64 {
    g.value(v).shape()[0] as f64
}

/// `Σ (pred − target)² / N`. Used for both the student and the teacher.
pub fn loss_pose(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.value(pred).shape() != g.value(target).shape() {
        bail!(
            InvalidShape,
            "pose prediction {:?} vs target {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        );
    }
    let n = batch_size(g, pred);
    let d = g.sub(pred, target)?;
    let s = g.sum_squares(d)?;
    g.scale(s, 1.0 / n)
}

/// `‖A_teacher − A_student‖² / N`. The teacher tap must be a constant.
pub fn loss_inter(g: &mut Graph, tap_teacher: Var, tap_student: Var) -> Result<Var> {
    let (t, s) = (g.value(tap_teacher).shape(), g.value(tap_student).shape());
    if t != s {
        return Err(Error::TapIncompatible {
            teacher: t.to_vec(),
            student: s.to_vec(),
        });
    }
    if g.requires_grad(tap_teacher) {
        bail!(Contract, "teacher activations must not require gradients");
    }
    let n = batch_size(g, tap_student);
    let d = g.sub(tap_teacher, tap_student)?;
    let s = g.sum_squares(d)?;
    g.scale(s, 1.0 / n)
}

/// `inter + λ·pose`.
pub fn loss_joint(g: &mut Graph, inter: Var, pose: Var, weights: &LossWeights) -> Result<Var> {
    let weighted = g.scale(pose, weights.lambda)?;
    g.add(inter, weighted)
}

/// `‖A_student ⊙ M‖² / N` with `M` zero on the foreground and one elsewhere,
/// broadcast over channels. Only background activation is penalized.
pub fn loss_mask(g: &mut Graph, tap_student: Var, mask: Var) -> Result<Var> {
    let (ts, ms) = (g.value(tap_student).shape(), g.value(mask).shape());
    if ts.len() != 4 || ms.len() != 4 || ms[1] != 1 || ts[0] != ms[0] || ts[2..] != ms[2..] {
        bail!(InvalidShape, "mask {:?} does not cover tap {:?}", ms, ts);
    }
    if g.requires_grad(mask) {
        bail!(Contract, "mask must be a constant");
    }
    debug_assert!(
        g.value(mask).data().iter().all(|&m| m == 0.0 || m == 1.0),
        "mask values must be 0 or 1"
    );
    let n = batch_size(g, tap_student);
    let masked = g.elementwise_mul(tap_student, mask)?;
    let s = g.sum_squares(masked)?;
    g.scale(s, 1.0 / n)
}

/// Picks `round(proportion·len)` of `batch_ids`, deterministic in `seed`.
/// The result keeps the input order.
pub fn select_mask_batch(batch_ids: &[usize], proportion: f64, seed: u64) -> Vec<usize> {
    let n = batch_ids.len();
    let take = libm::round(proportion.clamp(0.0, 1.0) * n as f64) as usize;
    if take == 0 {
        return Vec::new();
    }
    let mut rng = rng::stream(seed, Stream::MaskSelect);
    let mut picked = index::sample(&mut rng, n, take.min(n)).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| batch_ids[i]).collect()
}

/// Flips a conventional foreground=1 mask to the foreground=0 polarity used here.
pub fn invert_mask(mask: &Tensor) -> Tensor {
    let data = mask
        .data()
        .iter()
        .map(|&m| if m >= 0.5 { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(mask.shape(), data).expect("same shape")
}

/// Zeroes the mask of every sample not in `keep` (positions along axis 0), so
/// those samples contribute nothing to the mask loss.
pub fn restrict_mask(mask: &Tensor, keep: &[usize]) -> Tensor {
    let n = mask.shape()[0];
    let per = mask.len() / n;
    let mut out = mask.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
        if !keep.contains(&i) {
            chunk.fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pose_loss_values() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let l = loss_pose(&mut g, p, z).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let l = loss_pose(&mut g, p, p).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let p2 = g.constant(t(&[1, 2], &[2.0, 4.0]));
        let l2 = loss_pose(&mut g, p2, z).unwrap();
        assert_eq!(g.value(l2).item(), 20.0);
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(loss_pose(&mut g, p, bad).is_err());
    }

    #[test]
    fn inter_loss_values_and_errors() {
        let mut g = Graph::new();
        let s = g.leaf(t(&[2, 1, 1, 2], &[1.0, -1.0, 2.0, 0.5]).with_requires_grad(true));
        let z = g.constant(Tensor::zeros(&[2, 1, 1, 2]));
        let l = loss_inter(&mut g, z, s).unwrap();
        assert!((g.value(l).item() - (1.0 + 1.0 + 4.0 + 0.25) / 2.0).abs() < 1e-15);
        let same = g.constant(g.value(s).clone());
        let l0 = loss_inter(&mut g, same, same).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let wrong = g.constant(Tensor::zeros(&[2, 2, 1, 2]));
        assert!(matches!(
            loss_inter(&mut g, wrong, s),
            Err(Error::TapIncompatible { .. })
        ));
        assert!(matches!(loss_inter(&mut g, s, s), Err(Error::Contract(_))));
    }

    #[test]
    fn joint_loss_values() {
        let mut g = Graph::new();
        let inter = g.constant(Tensor::scalar(0.5));
        let pose = g.constant(Tensor::scalar(0.01));
        let j = loss_joint(&mut g, inter, pose, &LossWeights::default()).unwrap();
        assert!((g.value(j).item() - 1.5).abs() < 1e-12);
        let zero = g.constant(Tensor::scalar(0.0));
        let j = loss_joint(&mut g, inter, zero, &LossWeights::default()).unwrap();
        assert_eq!(g.value(j).item(), 0.5);
    }

    #[test]
    fn mask_loss_cases() {
        let mut g = Graph::new();
        let tap = t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = g.leaf(tap.clone().with_requires_grad(true));
        let all_hand = g.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let l = loss_mask(&mut g, s, all_hand).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let all_bg = g.constant(Tensor::ones(&[1, 1, 1, 2]));
        let l = loss_mask(&mut g, s, all_bg).unwrap();
        assert_eq!(g.value(l).item(), 30.0);
        // Activation only where mask is 0.
        let inside = g.constant(t(&[1, 2, 1, 2], &[0.0, 2.0, 0.0, 4.0]));
        let m = g.constant(t(&[1, 1, 1, 2], &[1.0, 0.0]));
        let l = loss_mask(&mut g, inside, m).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let bad = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(loss_mask(&mut g, s, bad).is_err());
    }

    #[test]
    fn mask_selection() {
        let ids: Vec<usize> = (0..10).collect();
        assert!(select_mask_batch(&ids, 0.0, 3).is_empty());
        assert_eq!(select_mask_batch(&ids, 1.0, 3), ids);
        let a = select_mask_batch(&ids, 0.5, 42);
        assert_eq!(a.len(), 5);
        assert_eq!(a, select_mask_batch(&ids, 0.5, 42));
        assert_eq!(select_mask_batch(&ids, 0.2, 1).len(), 2);
    }

    #[test]
    fn restrict_and_invert() {
        let m = Tensor::ones(&[3, 1, 1, 2]);
        let r = restrict_mask(&m, &[1]);
        assert_eq!(r.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(invert_mask(&r).data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            lambda: 0.0,
            mask_proportion: 0.0
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda: 1.0,
            mask_proportion: 1.5
        }
        .validate()
        .is_err());
    }
}
