//! Adaptive-moment optimizer over a named parameter store.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first and second moments; parameters without a gradient keep their state.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    steps: BTreeMap<String, u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, m: BTreeMap::new(), v: BTreeMap::new(), steps: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let eps = T::lit(self.cfg.eps);
        let wd = T::lit(self.cfg.weight_decay);
        for (name, g) in grads {
            let p = match store.get_mut(name) {
                Some(p) => p,
                None => return shape_err(format!("gradient for unknown parameter {name}")),
            };
            if p.shape() != g.shape() {
                return shape_err(format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let step = self.steps.entry(name.clone()).or_insert(0);
            *step += 1;
            let bc1 = 1.0 - self.cfg.beta1.powi(*step as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(*step as i32);
            let lr_t = T::lit(lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + wd * *w;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradient L2 norm over all named tensors.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let g: BTreeMap<_, _> = [("a".to_string(), Tensor::zeros(&[3]))].into();
        for _ in 0..5 {
            opt.step(&mut s, &g, 1e-3).unwrap();
        }
        assert_eq!(s.get("a").unwrap(), before.get("a").unwrap());
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store();
        let mut opt = Adam::new(AdamConfig::default());
        let g: BTreeMap<_, _> = [("a".to_string(), Tensor::from_vec(&[3], vec![0.3, -5.0, 1e-3]).unwrap())].into();
        opt.step(&mut s, &g, 0.01).unwrap();
        let a = s.get("a").unwrap().data();
        assert!((a[0] - 0.99).abs() < 1e-6);
        assert!((a[1] + 1.99).abs() < 1e-6);
        assert!((a[2] - 0.49).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = store();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let g: BTreeMap<_, _> = [("a".to_string(), s.get("a").unwrap().map(|x| 2.0 * (x - 3.0)))].into();
            opt.step(&mut s, &g, 0.05).unwrap();
        }
        assert!(s.get("a").unwrap().data().iter().all(|&x| (x - 3.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_unknown_or_misshapen_gradients() {
        let mut s = store();
        let mut opt = Adam::new(AdamConfig::default());
        let g: BTreeMap<_, _> = [("b".to_string(), Tensor::zeros(&[3]))].into();
        assert!(opt.step(&mut s, &g, 1e-3).is_err());
        let g: BTreeMap<_, _> = [("a".to_string(), Tensor::zeros(&[2]))].into();
        assert!(opt.step(&mut s, &g, 1e-3).is_err());
    }
}
