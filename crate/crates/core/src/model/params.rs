use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::BatchStats;
use crate::tensor::{ParameterSet, Scalar, Tensor};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
/// Init scale applied to the output layer so fresh models start near 0.5.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_text: usize,
    pub d_image: usize,
    pub d_vse: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl ModelDims {
    pub fn new(d_text: usize, d_image: usize, d_vse: usize) -> Self {
        ModelDims { d_text, d_image, d_vse, hidden1: 512, hidden2: 128 }
    }

    pub fn with_hidden(mut self, hidden1: usize, hidden2: usize) -> Self {
        self.hidden1 = hidden1;
        self.hidden2 = hidden2;
        self
    }

    /// Width of the fused `[article ‖ visual ‖ indicator]` vector.
    pub fn fused(&self) -> usize {
        2 * self.d_vse + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(features: usize) -> Self {
        BnState { running_mean: vec![T::zero(); features], running_var: vec![T::one(); features] }
    }

    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// All learnable weights of the detector plus batch-norm running statistics.
///
/// Projections are bias-free `[d_in x d_vse]` matrices applied to row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DidanParams<T: Scalar = f32> {
    pub dims: ModelDims,
    pub w_art: Tensor<T>,
    pub w_cap: Tensor<T>,
    pub w_vis: Tensor<T>,
    pub l1_w: Tensor<T>,
    pub l1_b: Tensor<T>,
    pub l2_w: Tensor<T>,
    pub l2_b: Tensor<T>,
    pub l3_w: Tensor<T>,
    pub l3_b: Tensor<T>,
    pub bn1: BnState<T>,
    pub bn2: BnState<T>,
}

fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

impl<T: Scalar> DidanParams<T> {
    /// Fan-based uniform init for every weight matrix, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let f = dims.fused();
        DidanParams {
            dims,
            w_art: xavier(rng, dims.d_text, dims.d_vse, 1.0),
            w_cap: xavier(rng, dims.d_text, dims.d_vse, 1.0),
            w_vis: xavier(rng, dims.d_image, dims.d_vse, 1.0),
            l1_w: xavier(rng, f, dims.hidden1, 1.0),
            l1_b: Tensor::zeros(&[1, dims.hidden1]),
            l2_w: xavier(rng, dims.hidden1, dims.hidden2, 1.0),
            l2_b: Tensor::zeros(&[1, dims.hidden2]),
            l3_w: xavier(rng, dims.hidden2, 1, OUTPUT_INIT_GAIN),
            l3_b: Tensor::zeros(&[1, 1]),
            bn1: BnState::new(dims.hidden1),
            bn2: BnState::new(dims.hidden2),
        }
    }

    /// Every trainable tensor set to zero. Scores are exactly 0.5.
    pub fn zeros(dims: ModelDims) -> Self {
        let f = dims.fused();
        DidanParams {
            dims,
            w_art: Tensor::zeros(&[dims.d_text, dims.d_vse]),
            w_cap: Tensor::zeros(&[dims.d_text, dims.d_vse]),
            w_vis: Tensor::zeros(&[dims.d_image, dims.d_vse]),
            l1_w: Tensor::zeros(&[f, dims.hidden1]),
            l1_b: Tensor::zeros(&[1, dims.hidden1]),
            l2_w: Tensor::zeros(&[dims.hidden1, dims.hidden2]),
            l2_b: Tensor::zeros(&[1, dims.hidden2]),
            l3_w: Tensor::zeros(&[dims.hidden2, 1]),
            l3_b: Tensor::zeros(&[1, 1]),
            bn1: BnState::new(dims.hidden1),
            bn2: BnState::new(dims.hidden2),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DidanParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        DidanParams {
            dims: self.dims,
            w_art: self.w_art.cast(),
            w_cap: self.w_cap.cast(),
            w_vis: self.w_vis.cast(),
            l1_w: self.l1_w.cast(),
            l1_b: self.l1_b.cast(),
            l2_w: self.l2_w.cast(),
            l2_b: self.l2_b.cast(),
            l3_w: self.l3_w.cast(),
            l3_b: self.l3_b.cast(),
            bn1: BnState { running_mean: c(&self.bn1.running_mean), running_var: c(&self.bn1.running_var) },
            bn2: BnState { running_mean: c(&self.bn2.running_mean), running_var: c(&self.bn2.running_var) },
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(&mut |_, t| ok &= t.is_finite());
        ok
    }

    /// Serializes weights and running statistics (as `f32`).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.for_each_param(&mut |name, t| ck.insert(name, t.cast()));
        for (layer, bn) in [("l1", &self.bn1), ("l2", &self.bn2)] {
            let f = |v: &[T]| Tensor::row(v.iter().map(|x| x.to_f64_lossy() as f32).collect());
            ck.insert(format!("bn.{layer}.running_mean"), f(&bn.running_mean));
            ck.insert(format!("bn.{layer}.running_var"), f(&bn.running_var));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |n: &str| ck.require(n).map(|t| t.cast::<T>());
        let w_art = get("w_art")?;
        let w_vis = get("w_vis")?;
        let l1_w = get("l1.weight")?;
        let l2_w = get("l2.weight")?;
        let dims = ModelDims {
            d_text: w_art.rows(),
            d_image: w_vis.rows(),
            d_vse: w_art.cols(),
            hidden1: l1_w.cols(),
            hidden2: l2_w.cols(),
        };
        let bn = |layer: &str| -> Result<BnState<T>> {
            Ok(BnState {
                running_mean: get(&format!("bn.{layer}.running_mean"))?.into_data(),
                running_var: get(&format!("bn.{layer}.running_var"))?.into_data(),
            })
        };
        let p = DidanParams {
            dims,
            w_art,
            w_cap: get("w_cap")?,
            w_vis,
            l1_w,
            l1_b: get("l1.bias")?,
            l2_w,
            l2_b: get("l2.bias")?,
            l3_w: get("l3.weight")?,
            l3_b: get("l3.bias")?,
            bn1: bn("l1")?,
            bn2: bn("l2")?,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.dims;
        let expect = [
            ("w_art", &self.w_art, [d.d_text, d.d_vse]),
            ("w_cap", &self.w_cap, [d.d_text, d.d_vse]),
            ("w_vis", &self.w_vis, [d.d_image, d.d_vse]),
            ("l1.weight", &self.l1_w, [d.fused(), d.hidden1]),
            ("l1.bias", &self.l1_b, [1, d.hidden1]),
            ("l2.weight", &self.l2_w, [d.hidden1, d.hidden2]),
            ("l2.bias", &self.l2_b, [1, d.hidden2]),
            ("l3.weight", &self.l3_w, [d.hidden2, 1]),
            ("l3.bias", &self.l3_b, [1, 1]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Validation(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if self.bn1.running_mean.len() != d.hidden1 || self.bn2.running_mean.len() != d.hidden2 {
            return Err(Error::Validation("batch-norm statistics do not match hidden widths".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> ParameterSet<T> for DidanParams<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w_art", &self.w_art);
        f("w_cap", &self.w_cap);
        f("w_vis", &self.w_vis);
        f("l1.weight", &self.l1_w);
        f("l1.bias", &self.l1_b);
        f("l2.weight", &self.l2_w);
        f("l2.bias", &self.l2_b);
        f("l3.weight", &self.l3_w);
        f("l3.bias", &self.l3_b);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w_art", &mut self.w_art);
        f("w_cap", &mut self.w_cap);
        f("w_vis", &mut self.w_vis);
        f("l1.weight", &mut self.l1_w);
        f("l1.bias", &mut self.l1_b);
        f("l2.weight", &mut self.l2_w);
        f("l2.bias", &mut self.l2_b);
        f("l3.weight", &mut self.l3_w);
        f("l3.bias", &mut self.l3_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_bounds_and_zero_biases() {
        let dims = ModelDims::new(6, 8, 4).with_hidden(16, 8);
        let p = DidanParams::<f32>::init(dims, &mut ChaCha8Rng::seed_from_u64(1));
        p.check_shapes().unwrap();
        let bound = (6.0f32 / (6.0 + 4.0)).sqrt();
        assert!(p.w_art.data().iter().all(|v| v.abs() <= bound));
        assert!(p.l1_b.data().iter().all(|&v| v == 0.0));
        assert!(p.l3_w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dims = ModelDims::new(6, 8, 4).with_hidden(16, 8);
        let mut p = DidanParams::<f32>::init(dims, &mut ChaCha8Rng::seed_from_u64(2));
        p.bn1.running_mean[3] = 0.25;
        let ck = p.to_checkpoint();
        assert!(ck.names().any(|n| n.starts_with("bn.")));
        let back = DidanParams::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut bn = BnState::<f64>::new(1);
        bn.update(&BatchStats { mean: vec![1.0], var: vec![3.0] });
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var[0] - 1.2).abs() < 1e-12);
    }
}
