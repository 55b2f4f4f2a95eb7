//! Library results against the loop references, one random instance at a
//! time.

#![allow(dead_code)]

use lupi_core::losses::{self, LossWeights};
use lupi_core::metrics::{compute_epe, compute_pck, threshold_grid};
use lupi_core::Graph;
use rand::Rng;

use crate::oracles;
use crate::support::{self, rng, uniform};

/// Every loss against its loop reference on one random instance; returns
/// the largest absolute difference.
pub fn loss_oracle_gap(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let n = r.random_range(1..=8);
    let (c, h, w) = (
        r.random_range(1..=8),
        r.random_range(1..=6),
        r.random_range(1..=6),
    );
    let d = r.random_range(1..=63);
    let (pred, target) = (uniform(r, &[n, d]), uniform(r, &[n, d]));
    let (t, s) = (uniform(r, &[n, c, h, w]), uniform(r, &[n, c, h, w]));
    let mask = support::binary(r, &[n, 1, h, w]);
    let weights = LossWeights {
        lambda: 100.0,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let (pv, tv) = (g.constant(pred.clone()), g.constant(target.clone()));
    let (av, sv, mv) = (
        g.constant(t.clone()),
        g.constant(s.clone()),
        g.constant(mask.clone()),
    );
    let pose = losses::loss_pose(&mut g, pv, tv).unwrap();
    let inter = losses::loss_inter(&mut g, av, sv).unwrap();
    let joint = losses::loss_joint(&mut g, inter, pose, &weights).unwrap();
    let masked = losses::loss_mask(&mut g, sv, mv).unwrap();
    let ref_pose = oracles::loss_pose(pred.data(), target.data(), n);
    let ref_inter = oracles::loss_inter(t.data(), s.data(), n);
    let ref_joint = oracles::loss_joint(ref_inter, ref_pose, 100.0);
    let ref_mask = oracles::loss_mask(s.data(), mask.data(), (n, c, h, w));
    let val = |v| g.value(v).item();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    [
        rel(val(pose), ref_pose),
        rel(val(inter), ref_inter),
        rel(val(joint), ref_joint),
        rel(val(masked), ref_mask),
        rel(val(joint) - 100.0 * val(pose), val(inter)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// EPE and PCK against loop references on one random error set; returns the
/// largest absolute difference and whether PCK was non-decreasing.
pub fn metric_check(seed: u64) -> (f64, bool) {
    let r = &mut rng(seed);
    let (n, j, d) = (
        r.random_range(1..=20),
        r.random_range(1..=21),
        if r.random_bool(0.5) { 2 } else { 3 },
    );
    let scale = r.random_range(0.01..20.0);
    let pred: Vec<f64> = (0..n * j * d)
        .map(|_| r.random_range(-scale..scale))
        .collect();
    let gt: Vec<f64> = (0..n * j * d)
        .map(|_| r.random_range(-scale..scale))
        .collect();
    let errs = oracles::joint_errors(&pred, &gt, d);
    let (mean, median, _) = compute_epe(&pred, &gt, j, d).unwrap();
    let grid = threshold_grid(2.0 * scale, 20);
    let pck = compute_pck(&pred, &gt, j, d, &grid).unwrap();
    let mut gap = (mean - oracles::mean(&errs))
        .abs()
        .max((median - oracles::median(&errs)).abs());
    for &(t, f) in &pck {
        gap = gap.max((f - oracles::pck(&errs, t)).abs());
    }
    (gap, pck.windows(2).all(|w| w[0].1 <= w[1].1))
}
