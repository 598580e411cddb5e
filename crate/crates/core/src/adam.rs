use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::{ParameterSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    pub fn iter_moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    /// Restores state saved by a checkpoint.
    pub fn restore(config: AdamConfig, step: u64, moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>) -> Self {
        Adam { config, step, moments }
    }

    /// Applies one update to every parameter in `params`. Parameters missing
    /// from `grads` are treated as having zero gradient.
    pub fn step<P: ParameterSet<T> + ?Sized>(&mut self, params: &mut P, grads: &Gradients<T>) -> Result<()> {
        // Validate everything before touching any state.
        let mut mismatch = None;
        params.for_each_param(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() && mismatch.is_none() {
                    mismatch = Some(format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()));
                }
            }
            if let Some((m, _)) = self.moments.get(name) {
                if m.shape() != p.shape() && mismatch.is_none() {
                    mismatch = Some(format!("{name}: param {:?} vs moment {:?}", p.shape(), m.shape()));
                }
            }
        });
        if let Some(detail) = mismatch {
            return Err(Error::shape("adam_step", detail));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let bc1 = T::lit(1.0 - c.beta1.powf(t));
        let bc2 = T::lit(1.0 - c.beta2.powf(t));
        let moments = &mut self.moments;
        params.for_each_param_mut(&mut |name, p| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map(|g| g.data()[i]).unwrap_or_else(T::zero);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.data_mut()[i] = p.data()[i] - update;
            }
        });
        Ok(())
    }
}
