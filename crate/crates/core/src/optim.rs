//! SGD with classical momentum.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// `v ← momentum·v + grad`, `p ← p − lr·v`.
///
/// Holds one velocity buffer per trainable parameter, keyed by name. Frozen
/// parameters never get a buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub const DEFAULT_LR: f64 = 1e-3;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new<'a>(
        learning_rate: f64,
        momentum: f64,
        params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            bail!(
                InvalidArgument,
                "learning rate must be positive, got {}",
                learning_rate
            );
        }
        if !(0.0..1.0).contains(&momentum) {
            bail!(
                InvalidArgument,
                "momentum must lie in [0,1), got {}",
                momentum
            );
        }
        let velocity = params
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(name, t)| (String::from(name), vec![0.0; t.len()]))
            .collect();
        Ok(Sgd {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn velocities(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.velocity
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Replaces a stored velocity, e.g. when resuming.
    pub fn set_velocity(&mut self, name: &str, v: Vec<f64>) -> Result<()> {
        match self.velocity.get_mut(name) {
            Some(slot) if slot.len() == v.len() => {
                *slot = v;
                Ok(())
            }
            Some(slot) => bail!(
                InvalidShape,
                "velocity `{}` has {} values, got {}",
                name,
                slot.len(),
                v.len()
            ),
            None => bail!(InvalidArgument, "no velocity buffer for `{}`", name),
        }
    }

    /// Updates every trainable parameter and clears its gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    ) -> Result<()> {
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            let Some(v) = self.velocity.get_mut(name) else {
                bail!(
                    Contract,
                    "trainable parameter `{}` has no optimizer state",
                    name
                );
            };
            let Some(g) = p.take_grad() else {
                bail!(Contract, "trainable parameter `{}` has no gradient", name);
            };
            for ((vi, gi), pi) in v.iter_mut().zip(&g).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}
