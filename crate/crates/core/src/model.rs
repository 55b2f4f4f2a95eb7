//! Declarative networks for the teacher and student branches.
//!
//! A [`NetworkSpec`] is a flat layer list. Layers are validated by symbolic
//! shape propagation when a [`Network`] is built. The tap index counts conv
//! and pool layers only, starting at 1; the tapped value is the output of
//! the ReLU directly following the indexed layer, if there is one.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{bail, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        k: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Fc {
        out_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    /// `[C, H, W]` of one sample.
    pub input_shape: [usize; 3],
    /// 1-based position among conv/pool layers.
    pub tap_layer_index: usize,
    pub output_dim: usize,
}

/// Shape of one sample after each layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShapes {
    pub outputs: Vec<Vec<usize>>,
    /// Position in `layers` whose output is tapped.
    pub tap_position: usize,
}

impl NetworkSpec {
    /// Same spec with a different input channel count. Teacher and student
    /// profiles differ only here.
    pub fn with_input_channels(mut self, channels: usize) -> Self {
        self.input_shape[0] = channels;
        self
    }

    /// Symbolic shape propagation; errors name the first bad layer.
    pub fn shapes(&self) -> Result<LayerShapes> {
        let mut cur: Vec<usize> = self.input_shape.to_vec();
        if cur.contains(&0) {
            return Err(Error::Build {
                layer: 0,
                reason: format!("input shape {:?} has a zero extent", cur),
            });
        }
        let build_err = |layer: usize, reason: String| Error::Build { layer, reason };
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut counted = 0;
        let mut tap = None;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if cur.len() != 3 {
                        return Err(build_err(
                            i,
                            format!("conv needs a spatial input, got {:?}", cur),
                        ));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(build_err(
                            i,
                            "conv needs positive channels, kernel and stride".into(),
                        ));
                    }
                    if kernel > cur[1] + 2 * pad || kernel > cur[2] + 2 * pad {
                        return Err(build_err(
                            i,
                            format!("kernel {} exceeds padded input {:?}", kernel, cur),
                        ));
                    }
                    let oh = (cur[1] + 2 * pad - kernel) / stride + 1;
                    let ow = (cur[2] + 2 * pad - kernel) / stride + 1;
                    alloc::vec![out_channels, oh, ow]
                }
                Layer::Pool { k, stride } => {
                    if cur.len() != 3 {
                        return Err(build_err(
                            i,
                            format!("pool needs a spatial input, got {:?}", cur),
                        ));
                    }
                    if k == 0 || stride == 0 || k > cur[1] || k > cur[2] {
                        return Err(build_err(
                            i,
                            format!("pool window {} stride {} on {:?}", k, stride, cur),
                        ));
                    }
                    alloc::vec![cur[0], (cur[1] - k) / stride + 1, (cur[2] - k) / stride + 1]
                }
                Layer::Relu => cur,
                Layer::Flatten => alloc::vec![cur.iter().product()],
                Layer::Fc { out_dim } => {
                    if cur.len() != 1 {
                        return Err(build_err(
                            i,
                            format!("fc needs a flat input, got {:?}", cur),
                        ));
                    }
                    if out_dim == 0 {
                        return Err(build_err(i, "fc needs a positive output size".into()));
                    }
                    alloc::vec![out_dim]
                }
            };
            if matches!(layer, Layer::Conv { .. } | Layer::Pool { .. }) {
                counted += 1;
                if counted == self.tap_layer_index {
                    let relu_next = matches!(self.layers.get(i + 1), Some(Layer::Relu));
                    tap = Some(if relu_next { i + 1 } else { i });
                }
            }
            outputs.push(cur.clone());
        }
        let last = self.layers.len();
        let Some(tap_position) = tap else {
            return Err(build_err(
                last,
                format!(
                    "tap index {} does not address one of the {} conv/pool layers",
                    self.tap_layer_index, counted
                ),
            ));
        };
        if outputs.last().map(Vec::as_slice) != Some(&[self.output_dim][..]) {
            return Err(build_err(
                last,
                format!(
                    "network ends in {:?}, expected [{}]",
                    outputs.last(),
                    self.output_dim
                ),
            ));
        }
        if !self.output_dim.is_multiple_of(3) {
            return Err(build_err(
                last,
                format!("output size {} is not 3·J", self.output_dim),
            ));
        }
        Ok(LayerShapes {
            outputs,
            tap_position,
        })
    }

    /// Per-sample tap shape `[C, h, w]`.
    pub fn tap_shape(&self) -> Result<Vec<usize>> {
        let s = self.shapes()?;
        Ok(s.outputs[s.tap_position].clone())
    }

    pub fn joints(&self) -> usize {
        self.output_dim / 3
    }
}

/// Built-in layouts. Both default to 3 input channels (the student);
/// use [`NetworkSpec::with_input_channels`] for the teacher.
pub fn predefined_profiles() -> BTreeMap<String, NetworkSpec> {
    let conv = |c| Layer::Conv {
        out_channels: c,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let pool = Layer::Pool { k: 2, stride: 2 };
    let stack = |widths: &[usize], pools_after: &[usize], hidden: usize| {
        let mut layers = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            layers.push(conv(c));
            layers.push(Layer::Relu);
            if pools_after.contains(&(i + 1)) {
                layers.push(pool);
            }
        }
        layers.extend([
            Layer::Flatten,
            Layer::Fc { out_dim: hidden },
            Layer::Relu,
            Layer::Fc { out_dim: 63 },
        ]);
        layers
    };
    let mut map = BTreeMap::new();
    map.insert(
        "desk".to_string(),
        NetworkSpec {
            layers: stack(&[16, 16, 32, 32, 64, 64], &[2, 4], 128),
            input_shape: [3, 32, 32],
            tap_layer_index: 8,
            output_dim: 63,
        },
    );
    map.insert(
        "paper".to_string(),
        NetworkSpec {
            layers: stack(
                &[
                    64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512,
                ],
                &[2, 4, 8, 12],
                1024,
            ),
            input_shape: [3, 256, 256],
            tap_layer_index: 18,
            output_dim: 63,
        },
    );
    map
}

pub fn profile(name: &str) -> Result<NetworkSpec> {
    predefined_profiles()
        .remove(name)
        .ok_or_else(|| Error::UnknownProfile(name.to_string()))
}

/// Captured intermediate activation `[N, C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap {
    pub layer_index: usize,
    pub value: Tensor,
}

/// Graph handles produced by [`Network::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub output: Var,
    pub tap: Var,
    /// One handle per parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<(String, Tensor)>,
    frozen: bool,
    frozen_digest: Option<[u8; 32]>,
}

impl Network {
    /// He-normal weights, zero biases; deterministic in `seed`.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut params = Vec::new();
        let mut cur: Vec<usize> = spec.input_shape.to_vec();
        let (mut nconv, mut nfc) = (0, 0);
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    nconv += 1;
                    let fan_in = cur[0] * kernel * kernel;
                    let w = he_normal(&mut rng, &[out_channels, cur[0], kernel, kernel], fan_in)?;
                    params.push((format!("conv{nconv}.weight"), w));
                    params.push((format!("conv{nconv}.bias"), Tensor::zeros(&[out_channels])));
                }
                Layer::Fc { out_dim } => {
                    nfc += 1;
                    let w = he_normal(&mut rng, &[cur[0], out_dim], cur[0])?;
                    params.push((format!("fc{nfc}.weight"), w));
                    params.push((format!("fc{nfc}.bias"), Tensor::zeros(&[out_dim])));
                }
                _ => {}
            }
            cur = shapes.outputs[i].clone();
        }
        for (_, p) in &mut params {
            p.set_requires_grad(true);
        }
        Ok(Network {
            spec,
            params,
            frozen: false,
            frozen_digest: None,
        })
    }

    /// Rebuilds a network from stored parameters, e.g. a checkpoint.
    pub fn from_parts(spec: NetworkSpec, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut reference = Network::build(spec, 0)?;
        if reference.params.len() != params.len() {
            bail!(
                InvalidShape,
                "expected {} parameters, got {}",
                reference.params.len(),
                params.len()
            );
        }
        for ((name, slot), (pname, value)) in reference.params.iter_mut().zip(params) {
            if *name != pname || slot.shape() != value.shape() {
                bail!(
                    InvalidShape,
                    "parameter `{}` {:?} does not match spec parameter `{}` {:?}",
                    pname,
                    value.shape(),
                    name,
                    slot.shape()
                );
            }
            *slot = value.with_requires_grad(true);
        }
        Ok(reference)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Named mutable access; values only, shapes are fixed by the spec.
    pub fn param_data_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data_mut())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Stops all gradient flow into this network and records its digest.
    pub fn freeze(&mut self) {
        if self.frozen {
            return;
        }
        for (_, p) in &mut self.params {
            p.set_requires_grad(false);
        }
        self.frozen = true;
        self.frozen_digest = Some(self.digest());
    }

    /// Digest recorded at freeze time.
    pub fn frozen_digest(&self) -> Option<[u8; 32]> {
        self.frozen_digest
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Fails if a frozen network's parameters changed since [`Network::freeze`].
    pub fn verify_frozen(&self) -> Result<()> {
        match self.frozen_digest {
            Some(d) if d == self.digest() => Ok(()),
            Some(_) => bail!(Contract, "frozen network parameters changed"),
            None => bail!(Contract, "network is not frozen"),
        }
    }

    /// Records the forward pass on `graph`. Parameters enter as leaves that
    /// require gradients unless the network is frozen.
    pub fn forward_graph(&self, graph: &mut Graph, input: Var) -> Result<ForwardVars> {
        self.record(graph, input, true)
    }

    fn record(&self, graph: &mut Graph, input: Var, track: bool) -> Result<ForwardVars> {
        let shapes = self.spec.shapes()?;
        let got = graph.value(input).shape();
        if got.len() != 4 || got[1..] != self.spec.input_shape {
            bail!(
                InvalidShape,
                "network expects [N, {:?}] input, got {:?}",
                self.spec.input_shape,
                got
            );
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| {
                if track {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        let mut next_param = params.iter().copied();
        let mut take = || next_param.next().expect("parameter count matches spec");
        let mut x = input;
        let mut tap = None;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = match *layer {
                Layer::Conv { stride, pad, .. } => {
                    let (w, b) = (take(), take());
                    graph.conv2d(x, w, b, stride, pad)?
                }
                Layer::Pool { k, stride } => graph.maxpool2d(x, k, stride)?,
                Layer::Relu => graph.relu(x)?,
                Layer::Flatten => graph.flatten(x)?,
                Layer::Fc { .. } => {
                    let (w, b) = (take(), take());
                    graph.fully_connected(x, w, b)?
                }
            };
            if i == shapes.tap_position {
                tap = Some(x);
            }
        }
        Ok(ForwardVars {
            output: x,
            tap: tap.expect("tap position validated"),
            params,
        })
    }

    /// Gradient-free forward returning the prediction and the tap.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ActivationTap)> {
        let mut g = Graph::new();
        let input = g.constant(batch.clone());
        let vars = self.record(&mut g, input, false)?;
        let tap = ActivationTap {
            layer_index: self.spec.tap_layer_index,
            value: g.value(vars.tap).clone(),
        };
        Ok((g.value(vars.output).clone(), tap))
    }

    /// Adds the graph gradients of a finished backward pass into the
    /// parameter gradient buffers.
    pub fn collect_grads(&mut self, graph: &Graph, vars: &ForwardVars) -> Result<()> {
        for ((_, p), &v) in self.params.iter_mut().zip(&vars.params) {
            if let Some(g) = graph.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn he_normal(rng: &mut rng::Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            layers: alloc::vec![
                Layer::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    pad: 1
                },
                Layer::Relu,
                Layer::Pool { k: 2, stride: 2 },
                Layer::Flatten,
                Layer::Fc { out_dim: 6 },
            ],
            input_shape: [1, 4, 4],
            tap_layer_index: 1,
            output_dim: 6,
        }
    }

    #[test]
    fn desk_profile_shapes() {
        let spec = profile("desk").unwrap();
        let s = spec.shapes().unwrap();
        assert_eq!(s.outputs.last().unwrap(), &[63]);
        assert_eq!(spec.tap_shape().unwrap(), &[64, 8, 8]);
        let counted = spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. } | Layer::Pool { .. }))
            .count();
        assert_eq!(counted, 8);
    }

    #[test]
    fn paper_profile_shapes() {
        let spec = profile("paper").unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .count();
        let pools = spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Pool { .. }))
            .count();
        let fcs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Fc { .. }))
            .count();
        assert_eq!((convs, pools, fcs), (14, 4, 2));
        // Tap 18 is the last conv layer, followed by its ReLU.
        let s = spec.shapes().unwrap();
        assert_eq!(s.outputs[s.tap_position], [512, 16, 16]);
        assert!(matches!(spec.layers[s.tap_position], Layer::Relu));
        assert!(matches!(
            spec.layers[s.tap_position - 1],
            Layer::Conv { .. }
        ));
    }

    #[test]
    fn teacher_and_student_taps_match() {
        let student = profile("desk").unwrap();
        let teacher = student.clone().with_input_channels(1);
        assert_eq!(teacher.tap_shape().unwrap(), student.tap_shape().unwrap());
    }

    #[test]
    fn unknown_profile() {
        assert_eq!(profile("huge"), Err(Error::UnknownProfile("huge".into())));
    }

    #[test]
    fn tap_beyond_last_layer_fails() {
        let mut spec = tiny();
        spec.tap_layer_index = 3;
        assert!(matches!(Network::build(spec, 1), Err(Error::Build { .. })));
        let mut spec = tiny();
        spec.tap_layer_index = 0;
        assert!(Network::build(spec, 1).is_err());
    }

    #[test]
    fn inconsistent_layer_is_named() {
        let mut spec = tiny();
        spec.layers.insert(
            4,
            Layer::Conv {
                out_channels: 1,
                kernel: 3,
                stride: 1,
                pad: 0,
            },
        );
        match Network::build(spec, 1) {
            Err(Error::Build { layer, .. }) => assert_eq!(layer, 4),
            other => panic!("expected build error, got {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::build(profile("desk").unwrap(), 11).unwrap();
        let b = Network::build(profile("desk").unwrap(), 11).unwrap();
        let c = Network::build(profile("desk").unwrap(), 12).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert!(a
            .param("conv1.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }

    #[test]
    fn desk_forward_output_shape() {
        let net = Network::build(profile("desk").unwrap().with_input_channels(1), 3).unwrap();
        let (out, tap) = net.forward(&Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[2, 63]);
        assert_eq!(tap.value.shape(), &[2, 64, 8, 8]);
        assert!(net.forward(&Tensor::zeros(&[2, 3, 32, 32])).is_err());
    }

    #[test]
    fn zero_input_zero_bias_taps_zero() {
        let net = Network::build(tiny(), 5).unwrap();
        let (_, tap) = net.forward(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert!(tap.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_forward_has_no_grad_nodes() {
        let mut net = Network::build(tiny(), 5).unwrap();
        net.freeze();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        net.forward_graph(&mut g, x).unwrap();
        assert_eq!(g.grad_node_count(), 0);
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut net = Network::build(tiny(), 5).unwrap();
        net.freeze();
        let d = net.frozen_digest();
        net.freeze();
        assert_eq!(net.frozen_digest(), d);
        assert!(net.params().iter().all(|(_, p)| !p.requires_grad()));
        net.verify_frozen().unwrap();
        net.param_data_mut("fc1.bias").unwrap()[0] = 1.0;
        assert!(net.verify_frozen().is_err());
    }

    #[test]
    fn spec_round_trips_through_parts() {
        let net = Network::build(tiny(), 9).unwrap();
        let rebuilt = Network::from_parts(net.spec().clone(), net.params().to_vec()).unwrap();
        assert_eq!(rebuilt.digest(), net.digest());
        let mut wrong = net.params().to_vec();
        wrong.pop();
        assert!(Network::from_parts(net.spec().clone(), wrong).is_err());
    }
}
