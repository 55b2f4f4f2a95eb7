//! Procedural paired-modality data.
//!
//! A planar-chain skeleton (one root, five chains) is posed by forward
//! kinematics and rendered twice: a clean single-channel "depth" image where
//! intensity encodes nearness on a black background, and a cluttered
//! three-channel image with smooth colour blobs, colour jitter and pixel
//! noise. The mask is zero on skeleton pixels and one elsewhere.
//!
//! World coordinates are in pixels; the camera is orthographic and looks
//! along +z, so smaller z is nearer.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// `[min, max]` of the in-plane bend and the out-of-plane elevation of one
/// joint, in radians, relative to its parent bone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub bend: [f64; 2],
    pub elevation: [f64; 2],
}

impl AngleRange {
    fn mid(&self) -> (f64, f64) {
        (
            (self.bend[0] + self.bend[1]) / 2.0,
            (self.elevation[0] + self.elevation[1]) / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkeletonConfig {
    pub chains: usize,
    pub joints_per_chain: usize,
    /// Length of the bone ending at joint `i + 1`, in pixels at scale 1.
    pub bone_lengths: Vec<f64>,
    /// Per joint; entry 0 is the global heading and tilt of the root.
    pub angle_ranges: Vec<AngleRange>,
    /// z interval mapped onto the privileged intensity ramp.
    pub depth_range: [f64; 2],
    /// Interval the root z is drawn from.
    pub root_depth: [f64; 2],
    /// Square frame size in pixels.
    pub frame: usize,
    /// Nominal root position in pixels and its uniform jitter.
    pub root_xy: [f64; 2],
    pub root_jitter: f64,
    pub scale_range: [f64; 2],
    pub bone_width: f64,
    /// Amplitude of the per-pixel uniform noise on the hard image.
    pub noise: f64,
    pub blobs: usize,
    /// Fraction of samples whose background uses the foreground hue family.
    pub same_hue_fraction: f64,
    /// Draw the hard image on black with no clutter.
    pub blank_background: bool,
    pub max_attempts: usize,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        let chains = 5;
        let per = 4;
        let mut bone_lengths = Vec::new();
        let mut angle_ranges = vec![AngleRange {
            bend: [-FRAC_PI_2 - 0.5, -FRAC_PI_2 + 0.5],
            elevation: [-0.4, 0.4],
        }];
        let spread = [-1.0, -0.45, 0.0, 0.4, 0.8];
        for (c, base) in spread.iter().enumerate() {
            let thumb = c == 0;
            let lengths = if thumb {
                [3.5, 2.8, 2.2, 1.8]
            } else {
                [5.0, 3.0, 2.4, 2.0]
            };
            for (j, &l) in lengths.iter().enumerate() {
                bone_lengths.push(l);
                angle_ranges.push(if j == 0 {
                    AngleRange {
                        bend: [base - 0.15, base + 0.15],
                        elevation: [-0.3, 0.3],
                    }
                } else {
                    AngleRange {
                        bend: [-0.2, 0.2],
                        elevation: [-0.8, 0.2],
                    }
                });
            }
        }
        debug_assert_eq!(bone_lengths.len(), chains * per);
        SkeletonConfig {
            chains,
            joints_per_chain: per,
            bone_lengths,
            angle_ranges,
            depth_range: [-12.0, 12.0],
            root_depth: [-2.0, 2.0],
            frame: 32,
            root_xy: [16.0, 21.0],
            root_jitter: 2.5,
            scale_range: [0.85, 1.1],
            bone_width: 2.0,
            noise: 0.15,
            blobs: 5,
            same_hue_fraction: 0.25,
            blank_background: false,
            max_attempts: 100,
        }
    }
}

impl SkeletonConfig {
    pub fn joints(&self) -> usize {
        1 + self.chains * self.joints_per_chain
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if self.chains == 0 || self.joints_per_chain == 0 {
            bail!(
                InvalidArgument,
                "skeleton needs at least one chain with one joint"
            );
        }
        if self.bone_lengths.len() != j - 1 || self.angle_ranges.len() != j {
            bail!(
                InvalidArgument,
                "{} joints need {} bone lengths and {} angle ranges, got {} and {}",
                j,
                j - 1,
                j,
                self.bone_lengths.len(),
                self.angle_ranges.len()
            );
        }
        if self
            .bone_lengths
            .iter()
            .any(|&l| !(l > 0.0 && l.is_finite()))
        {
            bail!(InvalidArgument, "bone lengths must be positive");
        }
        for r in &self.angle_ranges {
            if !(r.bend[0] < r.bend[1] && r.elevation[0] < r.elevation[1]) {
                bail!(InvalidArgument, "degenerate angle range {:?}", r);
            }
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        let [d0, d1] = self.depth_range;
        if d0.partial_cmp(&d1) != Some(core::cmp::Ordering::Less)
            || !ordered(self.root_depth)
            || !ordered(self.scale_range)
        {
            bail!(
                InvalidArgument,
                "depth, root depth and scale ranges must be ordered intervals"
            );
        }
        if self.scale_range[0] <= 0.0 || self.frame < 4 || self.bone_width <= 0.0 {
            bail!(
                InvalidArgument,
                "scale, frame and bone width must be positive"
            );
        }
        if !(0.0..=1.0).contains(&self.same_hue_fraction) || self.noise < 0.0 {
            bail!(
                InvalidArgument,
                "noise must be non-negative and the hue fraction in [0,1]"
            );
        }
        Ok(())
    }

    pub fn max_bone_length(&self) -> f64 {
        self.bone_lengths.iter().copied().fold(0.0, f64::max)
    }

    /// Parent joint of joint `i > 0`.
    pub fn parent(&self, i: usize) -> usize {
        let k = (i - 1) % self.joints_per_chain;
        if k == 0 {
            0
        } else {
            i - 1
        }
    }

    /// Angles at the middle of every range.
    pub fn rest_angles(&self) -> Vec<(f64, f64)> {
        self.angle_ranges.iter().map(AngleRange::mid).collect()
    }
}

/// Joint positions relative to the root at scale 1. `angles[i]` is the
/// (bend, elevation) pair of joint `i`.
pub fn forward_kinematics(cfg: &SkeletonConfig, angles: &[(f64, f64)]) -> Vec<[f64; 3]> {
    let j = cfg.joints();
    assert_eq!(angles.len(), j, "one angle pair per joint");
    let mut pos = vec![[0.0; 3]; j];
    let mut heading = vec![(0.0, 0.0); j];
    heading[0] = angles[0];
    for i in 1..j {
        let p = cfg.parent(i);
        let (theta, phi) = (heading[p].0 + angles[i].0, heading[p].1 + angles[i].1);
        heading[i] = (theta, phi);
        let l = cfg.bone_lengths[i - 1];
        let (st, ct) = (libm::sin(theta), libm::cos(theta));
        let (sp, cp) = (libm::sin(phi), libm::cos(phi));
        pos[i] = [
            pos[p][0] + l * cp * ct,
            pos[p][1] + l * cp * st,
            pos[p][2] + l * sp,
        ];
    }
    pos
}

/// A posed skeleton in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDraw {
    pub joints: Vec<[f64; 3]>,
    pub root: [f64; 3],
    pub scale: f64,
}

impl PoseDraw {
    /// Root-relative joints divided by `scale · max_bone_length`, flattened.
    pub fn normalized(&self, cfg: &SkeletonConfig) -> Vec<f64> {
        let s = self.scale * cfg.max_bone_length();
        self.joints
            .iter()
            .flat_map(|p| (0..3).map(move |k| (p[k] - self.root[k]) / s))
            .collect()
    }
}

/// Inverse of [`PoseDraw::normalized`].
pub fn denormalize(
    label: &[f64],
    root: [f64; 3],
    scale: f64,
    cfg: &SkeletonConfig,
) -> Vec<[f64; 3]> {
    let s = scale * cfg.max_bone_length();
    label
        .chunks_exact(3)
        .map(|c| [c[0] * s + root[0], c[1] * s + root[1], c[2] * s + root[2]])
        .collect()
}

fn uniform(rng: &mut rng::Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Random pose that projects inside the frame with a one-bone-width margin.
pub fn sample_pose(cfg: &SkeletonConfig, seed: u64) -> Result<PoseDraw> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Pose);
    let margin = cfg.bone_width;
    let hi = cfg.frame as f64 - margin;
    for _ in 0..cfg.max_attempts {
        let angles: Vec<(f64, f64)> = cfg
            .angle_ranges
            .iter()
            .map(|r| (uniform(&mut rng, r.bend), uniform(&mut rng, r.elevation)))
            .collect();
        let scale = uniform(&mut rng, cfg.scale_range);
        let jit = [-cfg.root_jitter, cfg.root_jitter];
        let root = [
            cfg.root_xy[0] + uniform(&mut rng, jit),
            cfg.root_xy[1] + uniform(&mut rng, jit),
            uniform(&mut rng, cfg.root_depth),
        ];
        let joints: Vec<[f64; 3]> = forward_kinematics(cfg, &angles)
            .into_iter()
            .map(|p| {
                [
                    root[0] + scale * p[0],
                    root[1] + scale * p[1],
                    root[2] + scale * p[2],
                ]
            })
            .collect();
        if joints
            .iter()
            .all(|p| p[0] >= margin && p[0] <= hi && p[1] >= margin && p[1] <= hi)
        {
            return Ok(PoseDraw {
                joints,
                root,
                scale,
            });
        }
    }
    Err(Error::PoseOutOfFrame(cfg.max_attempts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub root: [f64; 3],
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` cluttered image.
    pub image_hard: Tensor,
    /// `[1, H, W]` clean depth-like image.
    pub image_priv: Tensor,
    /// `[1, H, W]`, 0 on the skeleton, 1 elsewhere.
    pub mask: Tensor,
    /// `[3J]` root-relative, scale-normalized joints.
    pub pose: Tensor,
    pub meta: SampleMeta,
}

/// Distance from `p` to segment `ab` and the segment parameter of the
/// closest point.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (libm::sqrt(cx * cx + cy * cy), t)
}

/// Nearest-surface z per pixel, `None` off the skeleton.
fn rasterize(cfg: &SkeletonConfig, joints: &[[f64; 3]]) -> Vec<Option<f64>> {
    let f = cfg.frame;
    let half = cfg.bone_width / 2.0;
    let mut zbuf = vec![None; f * f];
    for i in 1..joints.len() {
        let (a, b) = (joints[cfg.parent(i)], joints[i]);
        let lo_x = (libm::floor(a[0].min(b[0]) - half).max(0.0)) as usize;
        let hi_x = (libm::ceil(a[0].max(b[0]) + half) as usize).min(f - 1);
        let lo_y = (libm::floor(a[1].min(b[1]) - half).max(0.0)) as usize;
        let hi_y = (libm::ceil(a[1].max(b[1]) + half) as usize).min(f - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let (d, t) = segment_distance(p, [a[0], a[1]], [b[0], b[1]]);
                if d <= half {
                    let z = a[2] + t * (b[2] - a[2]);
                    let slot = &mut zbuf[y * f + x];
                    if slot.is_none_or(|old| z < old) {
                        *slot = Some(z);
                    }
                }
            }
        }
    }
    zbuf
}

/// 1 for the nearest end of the depth range, 0 for the farthest.
fn nearness(cfg: &SkeletonConfig, z: f64) -> f64 {
    let [lo, hi] = cfg.depth_range;
    1.0 - ((z - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn skin(rng: &mut rng::Rng) -> [f64; 3] {
    let base: [f64; 3] = [0.85, 0.6, 0.45];
    core::array::from_fn(|k| (base[k] + rng.random_range(-0.1..0.1)).clamp(0.05, 1.0))
}

/// Renders both modalities and the mask for one posed skeleton. The
/// privileged image and the mask depend only on the pose; `seed` drives the
/// clutter, colour jitter and noise of the hard image.
pub fn render_pair(pose: &PoseDraw, cfg: &SkeletonConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let f = cfg.frame;
    let plane = f * f;
    let zbuf = rasterize(cfg, &pose.joints);
    let priv_data: Vec<f64> = zbuf
        .iter()
        .map(|z| z.map_or(0.0, |z| 0.25 + 0.75 * nearness(cfg, z)))
        .collect();
    let mask_data: Vec<f64> = zbuf
        .iter()
        .map(|z| if z.is_some() { 0.0 } else { 1.0 })
        .collect();

    let mut rng = rng::stream(seed, Stream::Render);
    let fg = skin(&mut rng);
    let mut hard = vec![0.0; 3 * plane];
    if !cfg.blank_background {
        let same_hue = rng.random_bool(cfg.same_hue_fraction);
        let color = |rng: &mut rng::Rng| -> [f64; 3] {
            if same_hue {
                skin(rng)
            } else {
                core::array::from_fn(|_| rng.random_range(0.1..0.9))
            }
        };
        let base = color(&mut rng);
        for (k, ch) in hard.chunks_exact_mut(plane).enumerate() {
            ch.fill(base[k]);
        }
        for _ in 0..cfg.blobs {
            let c = [
                rng.random_range(0.0..f as f64),
                rng.random_range(0.0..f as f64),
            ];
            let sigma = rng.random_range(2.5..7.0);
            let col = color(&mut rng);
            let weight = rng.random_range(0.4..0.9);
            for y in 0..f {
                for x in 0..f {
                    let (dx, dy) = (x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1]);
                    let a = weight * libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                    for k in 0..3 {
                        let v = &mut hard[k * plane + y * f + x];
                        *v = (1.0 - a) * *v + a * col[k];
                    }
                }
            }
        }
    }
    for (i, z) in zbuf.iter().enumerate() {
        if let Some(z) = z {
            let shade = 0.55 + 0.45 * nearness(cfg, *z);
            for k in 0..3 {
                hard[k * plane + i] = fg[k] * shade;
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut hard {
            *v = (*v + rng.random_range(-cfg.noise..cfg.noise)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image_hard: Tensor::new(&[3, f, f], hard)?,
        image_priv: Tensor::new(&[1, f, f], priv_data)?,
        mask: Tensor::new(&[1, f, f], mask_data)?,
        pose: Tensor::new(&[3 * cfg.joints()], pose.normalized(cfg))?,
        meta: SampleMeta {
            seed,
            root: pose.root,
            scale: pose.scale,
        },
    })
}

/// Pose and rendering for one sample seed.
pub fn generate_sample(cfg: &SkeletonConfig, seed: u64) -> Result<Sample> {
    let pose = sample_pose(cfg, seed)?;
    render_pair(&pose, cfg, seed)
}

/// Everything needed to regenerate a dataset without storing pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub skeleton_config: SkeletonConfig,
    pub n: usize,
    pub split_seed: u64,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
}

impl Manifest {
    pub const VERSION: u32 = 1;

    /// Draws `n` distinct sample seeds and splits them 80/20.
    pub fn new(n: usize, cfg: SkeletonConfig, split_seed: u64) -> Result<Self> {
        if n < 2 {
            bail!(
                InvalidArgument,
                "a dataset needs at least 2 samples, got {}",
                n
            );
        }
        cfg.validate()?;
        let mut rng = rng::stream(split_seed, Stream::Split);
        let mut seeds: Vec<u64> = Vec::with_capacity(n);
        while seeds.len() < n {
            let s: u64 = rng.random();
            if !seeds.contains(&s) {
                seeds.push(s);
            }
        }
        let n_train = (libm::round(0.8 * n as f64) as usize).clamp(1, n - 1);
        let test_seeds = seeds.split_off(n_train);
        Ok(Manifest {
            version: Self::VERSION,
            skeleton_config: cfg,
            n,
            split_seed,
            train_seeds: seeds,
            test_seeds,
        })
    }

    pub fn generate(&self) -> Result<Dataset> {
        let cfg = &self.skeleton_config;
        let gen = |seeds: &[u64]| {
            seeds
                .iter()
                .map(|&s| generate_sample(cfg, s))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Dataset {
            train: gen(&self.train_seeds)?,
            test: gen(&self.test_seeds)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Manifest plus generated samples.
pub fn make_dataset(
    n: usize,
    cfg: &SkeletonConfig,
    split_seed: u64,
) -> Result<(Dataset, Manifest)> {
    let manifest = Manifest::new(n, cfg.clone(), split_seed)?;
    Ok((manifest.generate()?, manifest))
}

/// Nearest-neighbour downsampling of the last two axes, sampling the top-left
/// texel of each cell, then re-binarized at 0.5.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() < 2 {
        bail!(InvalidShape, "mask needs two spatial axes, got {:?}", s);
    }
    let (sh, sw) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 || h > sh || w > sw {
        bail!(
            InvalidArgument,
            "cannot resample {}x{} mask to {}x{}",
            sh,
            sw,
            h,
            w
        );
    }
    let planes = mask.len() / (sh * sw);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let src = &mask.data()[p * sh * sw..][..sh * sw];
        for y in 0..h {
            let sy = y * sh / h;
            for x in 0..w {
                let sx = x * sw / w;
                out.push(if src[sy * sw + sx] >= 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
    let mut shape = s.to_vec();
    let k = shape.len();
    shape[k - 2] = h;
    shape[k - 1] = w;
    Tensor::new(&shape, out)
}
