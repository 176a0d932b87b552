use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// One layer's weights and bias together with their momentum state.
#[derive(Debug, Clone)]
pub struct ParamGroup<T: Element = f32> {
    pub name: String,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    lr_multiplier: T,
    trainable: bool,
    momentum_w: Vec<T>,
    momentum_b: Vec<T>,
}

impl<T: Element> ParamGroup<T> {
    pub fn new(name: impl Into<String>, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if bias.rank() != 1 || bias.len() != weights.dims()[0] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {} output units",
                bias.dims(),
                weights.dims()[0]
            )));
        }
        let momentum_w = vec![T::zero(); weights.len()];
        let momentum_b = vec![T::zero(); bias.len()];
        Ok(Self {
            name: name.into(),
            weights,
            bias,
            lr_multiplier: T::one(),
            trainable: true,
            momentum_w,
            momentum_b,
        })
    }

    /// Zero-mean Gaussian weights with the given standard deviation and zero bias.
    pub fn gaussian(
        name: impl Into<String>,
        weight_dims: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let n: usize = weight_dims.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        let weights = Tensor::new(weight_dims, data).unwrap();
        let bias = Tensor::zeros(&[weight_dims[0]]);
        Self::new(name, weights, bias).unwrap()
    }

    /// Number of inputs feeding one output unit.
    pub fn fan_in(&self) -> usize {
        self.weights.item_len()
    }

    pub fn lr_multiplier(&self) -> T {
        self.lr_multiplier
    }

    pub fn set_lr_multiplier(&mut self, m: T) -> Result<()> {
        if !(m > T::zero()) || !m.is_finite() {
            return Err(Error::config(format!(
                "lr multiplier for {} must be positive",
                self.name
            )));
        }
        self.lr_multiplier = m;
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn require_grad(&mut self) {
        self.weights.require_grad();
        self.bias.require_grad();
    }

    pub fn has_grad(&self) -> bool {
        self.weights.has_grad() && self.bias.has_grad()
    }

    pub fn clear_grad(&mut self) {
        self.weights.clear_grad();
        self.bias.clear_grad();
    }

    pub fn reset_momentum(&mut self) {
        self.momentum_w.iter_mut().for_each(|v| *v = T::zero());
        self.momentum_b.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Cheap order-sensitive fingerprint of the parameter values.
    pub fn checksum(&self) -> u64 {
        fingerprint(self.weights.data().iter().chain(self.bias.data()))
    }
}

fn fingerprint<'a, T: Element>(values: impl Iterator<Item = &'a T>) -> u64 {
    combine_fingerprints(values.map(|v| v.as_f64().to_bits()))
}

/// FNV-1a over a sequence of 64-bit words.
pub(crate) fn combine_fingerprints(words: impl Iterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Momentum SGD with L2 weight decay:
///
/// ```text
/// v ← momentum·v + grad + weight_decay·param
/// param ← param − base_lr·lr_multiplier·v
/// ```
///
/// Frozen groups are skipped. Gradients of every group are dropped afterwards.
pub fn sgd_step<T: Element>(
    groups: &mut [&mut ParamGroup<T>],
    base_lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    for g in groups.iter() {
        if g.trainable && !g.has_grad() {
            return Err(Error::usage(format!("sgd_step: {} has no gradient", g.name)));
        }
    }
    for g in groups.iter_mut() {
        if g.trainable {
            let lr = base_lr * g.lr_multiplier;
            update(&mut g.weights, &mut g.momentum_w, lr, momentum, weight_decay);
            update(&mut g.bias, &mut g.momentum_b, lr, momentum, weight_decay);
            g.weights.check_finite(&g.name)?;
            g.bias.check_finite(&g.name)?;
        }
        g.clear_grad();
    }
    Ok(())
}

fn update<T: Element>(param: &mut Tensor<T>, velocity: &mut [T], lr: T, momentum: T, wd: T) {
    let grad = param.grad.take().expect("checked by caller");
    for ((p, v), g) in param.data.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(value: f64, grad: f64) -> ParamGroup<f64> {
        let mut w = Tensor::new(&[1, 1], vec![value]).unwrap();
        w.require_grad();
        w.grad_mut().unwrap()[0] = grad;
        let mut b = Tensor::zeros(&[1]);
        b.require_grad();
        ParamGroup::new("p", w, b).unwrap()
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut g = scalar_group(0.7, 0.0);
        sgd_step(&mut [&mut g], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(g.weights.data()[0], 0.7);
    }

    #[test]
    fn plain_step() {
        let mut g = scalar_group(1.0, 1.0);
        sgd_step(&mut [&mut g], 0.1, 0.0, 0.0).unwrap();
        assert!((g.weights.data()[0] - 0.9).abs() < 1e-15);
        assert!(!g.has_grad());
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, p1 = 1 - 0.1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
        let mut g = scalar_group(1.0, 1.0);
        sgd_step(&mut [&mut g], 0.1, 0.9, 0.0).unwrap();
        assert!((g.weights.data()[0] - 0.9).abs() < 1e-12);
        g.weights.require_grad();
        g.weights.grad_mut().unwrap()[0] = 1.0;
        g.bias.require_grad();
        sgd_step(&mut [&mut g], 0.1, 0.9, 0.0).unwrap();
        assert!((g.weights.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn lr_multiplier_scales_step() {
        let mut g = scalar_group(1.0, 1.0);
        g.set_lr_multiplier(0.5).unwrap();
        sgd_step(&mut [&mut g], 0.1, 0.0, 0.0).unwrap();
        assert!((g.weights.data()[0] - 0.95).abs() < 1e-12);
        assert!(g.set_lr_multiplier(0.0).is_err());
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut g = scalar_group(2.0, 0.0);
        sgd_step(&mut [&mut g], 0.1, 0.0, 0.5).unwrap();
        assert!((g.weights.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut g = scalar_group(1.0, 1.0);
        g.clear_grad();
        assert!(matches!(
            sgd_step(&mut [&mut g], 0.1, 0.9, 0.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut g = scalar_group(1.0, 1.0);
        g.set_trainable(false);
        sgd_step(&mut [&mut g], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(g.weights.data()[0], 1.0);
        g.clear_grad();
        sgd_step(&mut [&mut g], 0.1, 0.9, 0.0).unwrap();
    }
}
