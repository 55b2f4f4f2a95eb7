//! Training steps for both stages and the loss records they emit.
//!
//! Stage 1 trains the teacher on privileged images and the student on hard
//! images, each with the pose loss alone. Stage 2 freezes the teacher and
//! trains the student on `inter + λ·pose` (plus the mask loss when enabled).
//! Batches are drawn per iteration from a stream indexed by the iteration
//! number, so a stage can stop and resume anywhere without replaying
//! randomness.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{bail, Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{Network, NetworkSpec};
use crate::optim::Sgd;
use crate::rng::{self, Stream};
use crate::synth::{downsample_mask, Dataset, Sample, SkeletonConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskStages {
    pub stage1: bool,
    pub stage2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub profile: String,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    /// Stage-1 learning rate.
    pub lr: f64,
    /// Stage-2 learning rate; the joint loss carries the pose term at λ
    /// times its stage-1 weight.
    pub lr_pi: f64,
    pub momentum: f64,
    /// Iterations of linear learning-rate ramp at the start of each stage.
    pub warmup_iters: usize,
    pub weights: LossWeights,
    pub mask_stages: MaskStages,
    /// Weight initialization and batch order.
    pub seed: u64,
    /// Dataset split and sample generation.
    pub data_seed: u64,
    pub log_every: usize,
    pub checkpoint_dir: String,
    pub n_samples: usize,
    /// Test samples used for the logged test-split losses.
    pub eval_samples: usize,
    /// Test samples exported as activation maps.
    pub activation_samples: usize,
    pub skeleton: SkeletonConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            profile: "desk".into(),
            stage1_iters: 1000,
            stage2_iters: 1000,
            batch_size: 16,
            lr: 1e-3,
            lr_pi: 1e-5,
            momentum: Sgd::DEFAULT_MOMENTUM,
            warmup_iters: 50,
            weights: LossWeights::default(),
            mask_stages: MaskStages {
                stage1: false,
                stage2: true,
            },
            seed: 0,
            data_seed: 0,
            log_every: 10,
            checkpoint_dir: "checkpoints".into(),
            n_samples: 2500,
            eval_samples: 32,
            activation_samples: 4,
            skeleton: SkeletonConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            bail!(
                InvalidArgument,
                "batch size and log interval must be at least 1"
            );
        }
        if !(self.lr > 0.0 && self.lr_pi > 0.0) {
            bail!(InvalidArgument, "learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(InvalidArgument, "momentum must lie in [0,1)");
        }
        if self.n_samples < 2 {
            bail!(InvalidArgument, "need at least 2 samples");
        }
        self.weights.validate()?;
        self.skeleton.validate()
    }

    /// Student and teacher specs for the configured profile.
    pub fn specs(&self) -> Result<(NetworkSpec, NetworkSpec)> {
        let student = crate::model::profile(&self.profile)?;
        if student.output_dim != 3 * self.skeleton.joints() {
            bail!(
                InvalidShape,
                "profile predicts {} values but the skeleton has {} joints",
                student.output_dim,
                self.skeleton.joints()
            );
        }
        let f = self.skeleton.frame;
        if student.input_shape[1..] != [f, f] {
            bail!(
                InvalidShape,
                "profile expects {:?} input, frames are {}x{}",
                student.input_shape,
                f,
                f
            );
        }
        let teacher = student.clone().with_input_channels(1);
        Ok((teacher, student.with_input_channels(3)))
    }

    /// Whether the mask loss is active in stage 1 or 2.
    pub fn mask_active(&self, stage: Stage) -> bool {
        let flag = match stage {
            Stage::Pretrain => self.mask_stages.stage1,
            Stage::Pi => self.mask_stages.stage2,
        };
        flag && self.weights.mask_proportion > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Pi,
}

impl Stage {
    /// Same spelling as the serialized form.
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Pi => "pi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Hard,
    Privileged,
}

/// One logged point. Train-split values average every iteration since the
/// previous record; test-split values are evaluated on held-out samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub split: Split,
    pub loss_pose_student: Option<f64>,
    pub loss_pose_teacher: Option<f64>,
    pub loss_inter: Option<f64>,
    pub loss_joint: Option<f64>,
    pub loss_mask: Option<f64>,
}

impl LossRecord {
    fn empty(iteration: usize, stage: Stage, split: Split) -> Self {
        LossRecord {
            iteration,
            stage,
            split,
            loss_pose_student: None,
            loss_pose_teacher: None,
            loss_inter: None,
            loss_joint: None,
            loss_mask: None,
        }
    }

    /// `(name, value)` of every present loss, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("loss_pose_student", self.loss_pose_student),
            ("loss_pose_teacher", self.loss_pose_teacher),
            ("loss_inter", self.loss_inter),
            ("loss_joint", self.loss_joint),
            ("loss_mask", self.loss_mask),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// Losses of one step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub pose: f64,
    pub inter: Option<f64>,
    pub joint: Option<f64>,
    pub mask: Option<f64>,
}

/// Learning rate for 0-based iteration `it` of a stage.
pub fn scheduled_lr(base: f64, it: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((it + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// `batch` distinct training indices for one iteration.
pub fn batch_indices(n: usize, batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut r = rng::indexed(seed, Stream::Batch, iteration);
    rand::seq::index::sample(&mut r, n, batch.min(n)).into_vec()
}

pub fn stack_images(samples: &[Sample], idx: &[usize], modality: Modality) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = idx
        .iter()
        .map(|&i| match modality {
            Modality::Hard => &samples[i].image_hard,
            Modality::Privileged => &samples[i].image_priv,
        })
        .collect();
    Tensor::stack(&imgs)
}

pub fn stack_poses(samples: &[Sample], idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| &samples[i].pose).collect::<Vec<_>>())
}

pub fn stack_masks(samples: &[Sample], idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| &samples[i].mask).collect::<Vec<_>>())
}

/// Image masks of a batch, kept only for `round(proportion·N)` samples and
/// resampled to the tap resolution. `None` when no sample is selected.
pub fn batch_mask(
    samples: &[Sample],
    idx: &[usize],
    tap_hw: (usize, usize),
    proportion: f64,
    seed: u64,
) -> Result<Option<Tensor>> {
    let positions: Vec<usize> = (0..idx.len()).collect();
    let keep = losses::select_mask_batch(&positions, proportion, seed);
    if keep.is_empty() {
        return Ok(None);
    }
    let full = stack_masks(samples, idx)?;
    let small = downsample_mask(&full, tap_hw.0, tap_hw.1)?;
    Ok(Some(losses::restrict_mask(&small, &keep)))
}

fn tap_hw(spec: &NetworkSpec) -> Result<(usize, usize)> {
    let s = spec.tap_shape()?;
    Ok((s[1], s[2]))
}

/// One pose-loss update, optionally with the mask loss on the tap.
pub fn pose_step(
    net: &mut Network,
    opt: &mut Sgd,
    x: &Tensor,
    y: &Tensor,
    mask: Option<&Tensor>,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let yi = g.constant(y.clone());
    let vars = net.forward_graph(&mut g, xi)?;
    let pose = losses::loss_pose(&mut g, vars.output, yi)?;
    let mut total = pose;
    let mut mask_value = None;
    if let Some(m) = mask {
        let mi = g.constant(m.clone());
        let ml = losses::loss_mask(&mut g, vars.tap, mi)?;
        mask_value = Some(g.value(ml).item());
        total = g.add(total, ml)?;
    }
    g.backward(total)?;
    net.collect_grads(&g, &vars)?;
    opt.step(net.params_mut())?;
    Ok(StepLosses {
        pose: g.value(pose).item(),
        inter: None,
        joint: None,
        mask: mask_value,
    })
}

/// One stage-2 update of `student` against the frozen `teacher`.
#[allow(clippy::too_many_arguments)]
pub fn pi_step(
    teacher: &Network,
    student: &mut Network,
    opt: &mut Sgd,
    x_priv: &Tensor,
    x_hard: &Tensor,
    y: &Tensor,
    mask: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<StepLosses> {
    check_pair(teacher, student)?;
    let (_, teacher_tap) = teacher.forward(x_priv)?;
    pi_step_with_tap(student, opt, teacher_tap.value, x_hard, y, mask, weights)
}

fn check_pair(teacher: &Network, student: &Network) -> Result<()> {
    if !teacher.is_frozen() {
        bail!(Contract, "teacher must be frozen before stage 2");
    }
    let (tt, st) = (teacher.spec().tap_shape()?, student.spec().tap_shape()?);
    if tt != st {
        return Err(Error::TapIncompatible {
            teacher: tt,
            student: st,
        });
    }
    Ok(())
}

/// [`pi_step`] with the teacher's tap for the batch already computed.
pub fn pi_step_with_tap(
    student: &mut Network,
    opt: &mut Sgd,
    teacher_tap: Tensor,
    x_hard: &Tensor,
    y: &Tensor,
    mask: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let xi = g.constant(x_hard.clone());
    let yi = g.constant(y.clone());
    let ti = g.constant(teacher_tap);
    let vars = student.forward_graph(&mut g, xi)?;
    let pose = losses::loss_pose(&mut g, vars.output, yi)?;
    let inter = losses::loss_inter(&mut g, ti, vars.tap)?;
    let joint = losses::loss_joint(&mut g, inter, pose, weights)?;
    let mut total = joint;
    let mut mask_value = None;
    if let Some(m) = mask {
        let mi = g.constant(m.clone());
        let ml = losses::loss_mask(&mut g, vars.tap, mi)?;
        mask_value = Some(g.value(ml).item());
        total = g.add(total, ml)?;
    }
    g.backward(total)?;
    // Every gradient computed must belong to a student parameter.
    if let Some(stray) = g
        .leaves_with_grad()
        .into_iter()
        .find(|v| !vars.params.contains(v))
    {
        bail!(
            Contract,
            "gradient reached non-student leaf {}",
            stray.index()
        );
    }
    student.collect_grads(&g, &vars)?;
    opt.step(student.params_mut())?;
    Ok(StepLosses {
        pose: g.value(pose).item(),
        inter: Some(g.value(inter).item()),
        joint: Some(g.value(joint).item()),
        mask: mask_value,
    })
}

/// Predictions `[N, output_dim]` (flat) and stacked taps for every sample.
pub fn forward_all(
    net: &Network,
    samples: &[Sample],
    modality: Modality,
) -> Result<(Vec<f64>, Tensor)> {
    let mut pred = Vec::with_capacity(samples.len() * net.spec().output_dim);
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(64) {
        let x = stack_images(samples, chunk, modality)?;
        let (y, tap) = net.forward(&x)?;
        pred.extend_from_slice(y.data());
        parts.push(tap.value);
    }
    Ok((pred, Tensor::concat(&parts.iter().collect::<Vec<_>>())?))
}

/// Predictions for every sample, flat `[N, output_dim]`.
pub fn predict(net: &Network, samples: &[Sample], modality: Modality) -> Result<Vec<f64>> {
    Ok(forward_all(net, samples, modality)?.0)
}

/// Stacked taps for `samples`, `[N, C, h, w]`.
pub fn taps(net: &Network, samples: &[Sample], modality: Modality) -> Result<Tensor> {
    Ok(forward_all(net, samples, modality)?.1)
}

/// Mean per-sample pose loss.
pub fn mean_pose_loss(net: &Network, samples: &[Sample], modality: Modality) -> Result<f64> {
    Ok(pose_loss_of(&predict(net, samples, modality)?, samples))
}

/// Mean absolute tap activation over cells where the tap-resolution mask is
/// 1 (background).
pub fn background_activation(net: &Network, samples: &[Sample], modality: Modality) -> Result<f64> {
    let tap = taps(net, samples, modality)?;
    let s = tap.shape().to_vec();
    let (c, plane) = (s[1], s[2] * s[3]);
    let masks = stack_masks(samples, &(0..samples.len()).collect::<Vec<_>>())?;
    let small = downsample_mask(&masks, s[2], s[3])?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (n, sample) in tap.data().chunks_exact(c * plane).enumerate() {
        let m = &small.data()[n * plane..][..plane];
        for ch in sample.chunks_exact(plane) {
            for (v, &mv) in ch.iter().zip(m) {
                if mv == 1.0 {
                    sum += v.abs();
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Called after every iteration with the iteration index, the network, the
/// optimizer and the records emitted so far.
pub type Hook<'a> = dyn FnMut(usize, &Network, &Sgd, &[LossRecord]) -> Result<Control> + 'a;

/// Whether to stop after a given iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Running means of train-split losses between two records.
#[derive(Debug, Default, Clone)]
struct Accum {
    n: usize,
    pose: f64,
    inter: f64,
    joint: f64,
    mask: f64,
    has_mask: bool,
}

impl Accum {
    fn add(&mut self, s: &StepLosses) {
        self.n += 1;
        self.pose += s.pose;
        self.inter += s.inter.unwrap_or(0.0);
        self.joint += s.joint.unwrap_or(0.0);
        if let Some(m) = s.mask {
            self.mask += m;
            self.has_mask = true;
        }
    }
    fn mean(v: f64, n: usize) -> f64 {
        v / n as f64
    }
}

fn check_finite(s: &StepLosses, iteration: usize) -> Result<()> {
    let all = [Some(s.pose), s.inter, s.joint, s.mask];
    if all.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(iteration))
    }
}

/// Which network a stage-1 run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn modality(self) -> Modality {
        match self {
            Role::Teacher => Modality::Privileged,
            Role::Student => Modality::Hard,
        }
    }
}

fn eval_subset<'a>(data: &'a Dataset, cfg: &TrainConfig) -> &'a [Sample] {
    &data.test[..cfg.eval_samples.clamp(1, data.test.len())]
}

/// Stage-1 iterations `range` (0-based) for one network. `hook` runs after
/// every iteration with the number of completed iterations.
#[allow(clippy::too_many_arguments)]
pub fn run_pretrain(
    role: Role,
    net: &mut Network,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    range: Range<usize>,
    records: &mut Vec<LossRecord>,
    hook: &mut Hook<'_>,
) -> Result<()> {
    let modality = role.modality();
    let use_mask = role == Role::Student && cfg.mask_active(Stage::Pretrain);
    let hw = tap_hw(net.spec())?;
    let stream_seed = cfg.seed ^ (role as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F);
    let mut acc = Accum::default();
    for it in range {
        let idx = batch_indices(data.train.len(), cfg.batch_size, stream_seed, it as u64);
        let x = stack_images(&data.train, &idx, modality)?;
        let y = stack_poses(&data.train, &idx)?;
        let mask = if use_mask {
            batch_mask(
                &data.train,
                &idx,
                hw,
                cfg.weights.mask_proportion,
                stream_seed ^ it as u64,
            )?
        } else {
            None
        };
        opt.learning_rate = scheduled_lr(cfg.lr, it, cfg.warmup_iters);
        let mut s = pose_step(net, opt, &x, &y, mask.as_ref())?;
        if use_mask && s.mask.is_none() {
            s.mask = Some(0.0);
        }
        check_finite(&s, it + 1)?;
        acc.add(&s);
        let done = it + 1;
        if done % cfg.log_every == 0 {
            let mut train = LossRecord::empty(done, Stage::Pretrain, Split::Train);
            let mut test = LossRecord::empty(done, Stage::Pretrain, Split::Test);
            let pose = Accum::mean(acc.pose, acc.n);
            let subset = eval_subset(data, cfg);
            let (pred, tap) = forward_all(net, subset, modality)?;
            let test_pose = pose_loss_of(&pred, subset);
            match role {
                Role::Teacher => {
                    train.loss_pose_teacher = Some(pose);
                    test.loss_pose_teacher = Some(test_pose);
                }
                Role::Student => {
                    train.loss_pose_student = Some(pose);
                    test.loss_pose_student = Some(test_pose);
                }
            }
            if acc.has_mask {
                train.loss_mask = Some(Accum::mean(acc.mask, acc.n));
                test.loss_mask = Some(mask_loss_of(&tap, subset)?);
            }
            records.push(train);
            records.push(test);
            acc = Accum::default();
        }
        if hook(done, net, opt, records)? == Control::Stop {
            break;
        }
    }
    Ok(())
}

/// Stage-2 iterations `range` (0-based within the stage). Record iteration
/// numbers continue after `cfg.stage1_iters`.
#[allow(clippy::too_many_arguments)]
pub fn run_pi(
    teacher: &Network,
    student: &mut Network,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    range: Range<usize>,
    records: &mut Vec<LossRecord>,
    hook: &mut Hook<'_>,
) -> Result<()> {
    let use_mask = cfg.mask_active(Stage::Pi);
    let hw = tap_hw(student.spec())?;
    let stream_seed = cfg.seed ^ 0xE703_7ED1_A0B4_28DB;
    let offset = cfg.stage1_iters;
    check_pair(teacher, student)?;
    // The teacher is frozen, so its taps can be computed once up front.
    let teacher_train = taps(teacher, &data.train, Modality::Privileged)?;
    let subset = eval_subset(data, cfg);
    let teacher_test = taps(teacher, subset, Modality::Privileged)?;
    let mut acc = Accum::default();
    for it in range {
        let idx = batch_indices(data.train.len(), cfg.batch_size, stream_seed, it as u64);
        let tt = gather(&teacher_train, &idx)?;
        let xh = stack_images(&data.train, &idx, Modality::Hard)?;
        let y = stack_poses(&data.train, &idx)?;
        let mask = if use_mask {
            batch_mask(
                &data.train,
                &idx,
                hw,
                cfg.weights.mask_proportion,
                stream_seed ^ it as u64,
            )?
        } else {
            None
        };
        opt.learning_rate = scheduled_lr(cfg.lr_pi, it, cfg.warmup_iters);
        let mut s = pi_step_with_tap(student, opt, tt, &xh, &y, mask.as_ref(), &cfg.weights)?;
        if use_mask && s.mask.is_none() {
            s.mask = Some(0.0);
        }
        check_finite(&s, offset + it + 1)?;
        acc.add(&s);
        let done = it + 1;
        if done % cfg.log_every == 0 {
            let iteration = offset + done;
            let mut train = LossRecord::empty(iteration, Stage::Pi, Split::Train);
            train.loss_pose_student = Some(Accum::mean(acc.pose, acc.n));
            train.loss_inter = Some(Accum::mean(acc.inter, acc.n));
            train.loss_joint = Some(Accum::mean(acc.joint, acc.n));
            if acc.has_mask {
                train.loss_mask = Some(Accum::mean(acc.mask, acc.n));
            }
            let mut test = LossRecord::empty(iteration, Stage::Pi, Split::Test);
            let (pred, tap) = forward_all(student, subset, Modality::Hard)?;
            let pose = pose_loss_of(&pred, subset);
            let inter = inter_loss_of(&teacher_test, &tap)?;
            test.loss_pose_student = Some(pose);
            test.loss_inter = Some(inter);
            test.loss_joint = Some(inter + cfg.weights.lambda * pose);
            if acc.has_mask {
                test.loss_mask = Some(mask_loss_of(&tap, subset)?);
            }
            records.push(train);
            records.push(test);
            acc = Accum::default();
        }
        if hook(done, student, opt, records)? == Control::Stop {
            break;
        }
    }
    Ok(())
}

/// Mean per-sample `‖A_teacher − A_student‖²` on paired samples.
pub fn mean_inter_loss(teacher: &Network, student: &Network, samples: &[Sample]) -> Result<f64> {
    let t = taps(teacher, samples, Modality::Privileged)?;
    inter_loss_of(&t, &taps(student, samples, Modality::Hard)?)
}

fn inter_loss_of(t: &Tensor, s: &Tensor) -> Result<f64> {
    if t.shape() != s.shape() {
        return Err(Error::TapIncompatible {
            teacher: t.shape().to_vec(),
            student: s.shape().to_vec(),
        });
    }
    let sq: f64 = t
        .data()
        .iter()
        .zip(s.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / t.shape()[0] as f64)
}

fn pose_loss_of(pred: &[f64], samples: &[Sample]) -> f64 {
    let sq: f64 = samples
        .iter()
        .flat_map(|s| s.pose.data())
        .zip(pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    sq / samples.len() as f64
}

/// Mask loss of stacked taps with every sample selected.
fn mask_loss_of(tap: &Tensor, samples: &[Sample]) -> Result<f64> {
    let s = tap.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let masks = stack_masks(samples, &(0..samples.len()).collect::<Vec<_>>())?;
    let small = downsample_mask(&masks, s[2], s[3])?;
    let mut sq = 0.0;
    for (n, sample) in tap.data().chunks_exact(c * plane).enumerate() {
        let m = &small.data()[n * plane..][..plane];
        for ch in sample.chunks_exact(plane) {
            sq += ch
                .iter()
                .zip(m)
                .map(|(v, mv)| (v * mv) * (v * mv))
                .sum::<f64>();
        }
    }
    Ok(sq / samples.len() as f64)
}

/// Rows `idx` of a batch-major tensor.
fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let data = idx
        .iter()
        .flat_map(|&i| t.data()[i * per..][..per].iter().copied())
        .collect();
    Tensor::new(&shape, data)
}
