//! Scalar-loop reference implementations, written from the definitions and
//! sharing no code with the library.

#![allow(dead_code)]

/// Cross-correlation with zero padding, `x [n,c,h,w]`, `w [f,c,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    (f, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Window maximum, first occurrence wins.
pub fn maxpool(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        let v = x[plane * h * w + (oy * stride + dy) * w + ox * stride + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// `x [n,d] · w [d,m] + b`.
pub fn fully_connected(x: &[f64], n: usize, d: usize, w: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                acc += x[i * d + k] * w[k * m + j];
            }
            out[i * m + j] = acc + b[j];
        }
    }
    out
}

pub fn loss_pose(pred: &[f64], target: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        acc += d * d;
    }
    acc / n as f64
}

pub fn loss_inter(teacher: &[f64], student: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..teacher.len() {
        let d = teacher[i] - student[i];
        acc += d * d;
    }
    acc / n as f64
}

pub fn loss_joint(inter: f64, pose: f64, lambda: f64) -> f64 {
    inter + lambda * pose
}

/// `tap [n,c,h,w]`, `mask [n,1,h,w]`.
pub fn loss_mask(tap: &[f64], mask: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> f64 {
    let mut acc = 0.0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = tap[((ni * c + ci) * h + y) * w + x] * mask[(ni * h + y) * w + x];
                    acc += v * v;
                }
            }
        }
    }
    acc / n as f64
}

/// Per-joint Euclidean errors of `[n, j, d]` arrays.
pub fn joint_errors(pred: &[f64], gt: &[f64], d: usize) -> Vec<f64> {
    pred.chunks(d)
        .zip(gt.chunks(d))
        .map(|(p, g)| {
            p.iter()
                .zip(g)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Average of the two middle values for even counts.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

pub fn pck(errors: &[f64], t: f64) -> f64 {
    errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
