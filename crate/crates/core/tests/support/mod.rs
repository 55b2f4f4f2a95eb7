//! Random instances and central finite-difference gradient checks.

#![allow(dead_code)]

use lupi_core::losses::{self, LossWeights};
use lupi_core::model::{Layer, NetworkSpec};
use lupi_core::{ConvPath, Graph, Network, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least 0.1 away from zero.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| r.random_range(0.1..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Values pairwise at least 0.05 apart, so no window has a near tie.
pub fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| 0.1 * i as f64 + r.random_range(0.0..0.05))
        .collect();
    data.shuffle(r);
    Tensor::new(shape, data).unwrap()
}

pub fn binary(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Build<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Largest relative error between autodiff and central differences over
/// every input flagged in `wrt`. `f` must return a scalar.
pub fn max_rel_error(inputs: &[Tensor], wrt: &[bool], f: Build) -> f64 {
    max_rel_error_on(ConvPath::default(), inputs, wrt, f)
}

/// As [`max_rel_error`] with graphs using the given convolution kernel.
pub fn max_rel_error_on(path: ConvPath, inputs: &[Tensor], wrt: &[bool], f: Build) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::with_conv_path(path);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::with_conv_path(path);
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &d)| {
            if d {
                g.leaf(t.clone().with_requires_grad(true))
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &d) in wrt.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = g
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= H;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * H));
        }
        worst = worst.max(relative(&analytic, &numeric));
    }
    worst
}

/// Reduces a tensor output to a scalar through `Σ (out − r)²` with a fixed
/// random `r`, so every output element carries a distinct upstream gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(uniform(&mut rng(seed ^ 0x5eed), &shape));
    let d = g.sub(out, r)?;
    g.sum_squares(d)
}

pub struct Case {
    pub name: &'static str,
    /// Relative error of one random instance.
    pub run: fn(u64) -> f64,
}

fn conv_case(seed: u64, path: ConvPath) -> f64 {
    let r = &mut rng(seed);
    let (n, c, h, w) = (
        r.random_range(1..=2),
        r.random_range(1..=2),
        r.random_range(3..=4),
        r.random_range(3..=4),
    );
    let f = r.random_range(1..=3);
    let pad = r.random_range(0..=1);
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let inputs = [
        uniform(r, &[n, c, h, w]),
        uniform(r, &[f, c, k, k]),
        uniform(r, &[f]),
    ];
    max_rel_error_on(path, &inputs, &[true; 3], &move |g, v| {
        let out = g.conv2d(v[0], v[1], v[2], stride, pad)?;
        project(g, out, seed)
    })
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d (im2col)",
            run: |s| conv_case(s, ConvPath::Im2col),
        },
        Case {
            name: "conv2d (direct)",
            run: |s| conv_case(s, ConvPath::Direct),
        },
        Case {
            name: "maxpool2d",
            run: |seed| {
                let r = &mut rng(seed);
                let (n, c) = (r.random_range(1..=2), r.random_range(1..=2));
                let (h, w) = (r.random_range(3..=4), r.random_range(3..=4));
                let (k, stride) = (r.random_range(2..=3), r.random_range(1..=2));
                let x = distinct(r, &[n, c, h, w]);
                max_rel_error(&[x], &[true], &move |g, v| {
                    let out = g.maxpool2d(v[0], k, stride)?;
                    project(g, out, seed)
                })
            },
        },
        Case {
            name: "relu",
            run: |seed| {
                let r = &mut rng(seed);
                let n = r.random_range(1..=64);
                let x = away_from_zero(r, &[n]);
                max_rel_error(&[x], &[true], &move |g, v| {
                    let out = g.relu(v[0])?;
                    project(g, out, seed)
                })
            },
        },
        Case {
            name: "fully_connected",
            run: |seed| {
                let r = &mut rng(seed);
                let (n, d, m) = (
                    r.random_range(1..=4),
                    r.random_range(1..=6),
                    r.random_range(1..=5),
                );
                let inputs = [uniform(r, &[n, d]), uniform(r, &[d, m]), uniform(r, &[m])];
                max_rel_error(&inputs, &[true; 3], &move |g, v| {
                    let out = g.fully_connected(v[0], v[1], v[2])?;
                    project(g, out, seed)
                })
            },
        },
        Case {
            name: "elementwise_mul",
            run: |seed| {
                let r = &mut rng(seed);
                let (n, c, h, w) = (
                    r.random_range(1..=2),
                    r.random_range(1..=3),
                    r.random_range(1..=3),
                    r.random_range(1..=3),
                );
                let broadcast = r.random_bool(0.5);
                let a = uniform(r, &[n, c, h, w]);
                let b = uniform(r, &[n, if broadcast { 1 } else { c }, h, w]);
                max_rel_error(&[a, b], &[true, true], &move |g, v| {
                    let out = g.elementwise_mul(v[0], v[1])?;
                    project(g, out, seed)
                })
            },
        },
        Case {
            name: "add",
            run: |seed| {
                let r = &mut rng(seed);
                let shape = [r.random_range(1..=4), r.random_range(1..=8)];
                max_rel_error(
                    &[uniform(r, &shape), uniform(r, &shape)],
                    &[true, true],
                    &move |g, v| {
                        let out = g.add(v[0], v[1])?;
                        project(g, out, seed)
                    },
                )
            },
        },
        Case {
            name: "sub",
            run: |seed| {
                let r = &mut rng(seed);
                let shape = [r.random_range(1..=4), r.random_range(1..=8)];
                max_rel_error(
                    &[uniform(r, &shape), uniform(r, &shape)],
                    &[true, true],
                    &move |g, v| {
                        let out = g.sub(v[0], v[1])?;
                        project(g, out, seed)
                    },
                )
            },
        },
        Case {
            name: "scale",
            run: |seed| {
                let r = &mut rng(seed);
                let alpha = r.random_range(-3.0..3.0);
                let n = r.random_range(1..=32);
                let x = uniform(r, &[n]);
                max_rel_error(&[x], &[true], &move |g, v| {
                    let out = g.scale(v[0], alpha)?;
                    project(g, out, seed)
                })
            },
        },
        Case {
            name: "sum_squares",
            run: |seed| {
                let r = &mut rng(seed);
                let n = r.random_range(1..=64);
                let x = uniform(r, &[n]);
                max_rel_error(&[x], &[true], &|g, v| g.sum_squares(v[0]))
            },
        },
        Case {
            name: "reshape/flatten",
            run: |seed| {
                let r = &mut rng(seed);
                let (c, w) = (r.random_range(1..=3), r.random_range(1..=4));
                let x = uniform(r, &[2, c, 2, w]);
                max_rel_error(&[x], &[true], &move |g, v| {
                    let flat = g.flatten(v[0])?;
                    let n = g.value(flat).len();
                    let back = g.reshape(flat, &[n])?;
                    project(g, back, seed)
                })
            },
        },
        Case {
            name: "loss_pose",
            run: |seed| {
                let r = &mut rng(seed);
                let shape = [r.random_range(1..=4), r.random_range(1..=12)];
                max_rel_error(
                    &[uniform(r, &shape), uniform(r, &shape)],
                    &[true, false],
                    &|g, v| losses::loss_pose(g, v[0], v[1]),
                )
            },
        },
        Case {
            name: "loss_inter",
            run: |seed| {
                let r = &mut rng(seed);
                let shape = [r.random_range(1..=3), r.random_range(1..=3), 2, 2];
                max_rel_error(
                    &[uniform(r, &shape), uniform(r, &shape)],
                    &[false, true],
                    &|g, v| losses::loss_inter(g, v[0], v[1]),
                )
            },
        },
        Case {
            name: "loss_joint",
            run: |seed| {
                let r = &mut rng(seed);
                let shape = [r.random_range(1..=3), r.random_range(1..=8)];
                let inputs = [
                    uniform(r, &shape),
                    uniform(r, &shape),
                    uniform(r, &shape),
                    uniform(r, &shape),
                ];
                max_rel_error(&inputs, &[false, true, true, false], &|g, v| {
                    let inter = losses::loss_inter(g, v[0], v[1])?;
                    let pose = losses::loss_pose(g, v[2], v[3])?;
                    losses::loss_joint(g, inter, pose, &LossWeights::default())
                })
            },
        },
        Case {
            name: "loss_mask",
            run: |seed| {
                let r = &mut rng(seed);
                let (n, c, h, w) = (
                    r.random_range(1..=2),
                    r.random_range(1..=3),
                    r.random_range(1..=3),
                    r.random_range(1..=3),
                );
                let inputs = [uniform(r, &[n, c, h, w]), binary(r, &[n, 1, h, w])];
                max_rel_error(&inputs, &[true, false], &|g, v| {
                    losses::loss_mask(g, v[0], v[1])
                })
            },
        },
        Case {
            name: "network forward",
            run: network_case,
        },
    ]
}

/// Small conv/pool/fc network; gradient with respect to every parameter.
pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            Layer::Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Relu,
            Layer::Pool { k: 2, stride: 2 },
            Layer::Conv {
                out_channels: 2,
                kernel: 2,
                stride: 1,
                pad: 0,
            },
            Layer::Relu,
            Layer::Flatten,
            Layer::Fc { out_dim: 3 },
        ],
        input_shape: [2, 4, 4],
        tap_layer_index: 3,
        output_dim: 3,
    }
}

fn network_case(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let net = Network::build(tiny_spec(), seed).unwrap();
    let x = uniform(r, &[2, 2, 4, 4]);
    let y = uniform(r, &[2, 3]);
    let loss_of = |net: &Network, g: &mut Graph| -> (Var, lupi_core::model::ForwardVars) {
        let xi = g.constant(x.clone());
        let yi = g.constant(y.clone());
        let vars = net.forward_graph(g, xi).unwrap();
        let pose = losses::loss_pose(g, vars.output, yi).unwrap();
        let tap = g.sum_squares(vars.tap).unwrap();
        (g.add(pose, tap).unwrap(), vars)
    };
    let mut g = Graph::new();
    let (loss, vars) = loss_of(&net, &mut g);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, (name, p)) in net.params().iter().enumerate() {
        let analytic = g.grad(vars.params[pi]).unwrap().to_vec();
        let numeric: Vec<f64> = (0..p.len())
            .map(|k| {
                let value = |delta: f64| {
                    let params = net
                        .params()
                        .iter()
                        .map(|(n, t)| {
                            let mut t = t.clone();
                            if n == name {
                                t.data_mut()[k] += delta;
                            }
                            (n.clone(), t)
                        })
                        .collect();
                    let moved = Network::from_parts(tiny_spec(), params).unwrap();
                    let mut g = Graph::new();
                    let (l, _) = loss_of(&moved, &mut g);
                    g.value(l).item()
                };
                (value(H) - value(-H)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(relative(&analytic, &numeric));
    }
    worst
}

/// Proptest settings without regression files, which integration tests have
/// no source root for.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        failure_persistence: None,
        ..proptest::test_runner::Config::with_cases(cases)
    }
}
