//! Named parameter storage, initializers and the layer building blocks shared by
//! the encoder, projector, decoder and probe.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{shape_err, AliseError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| AliseError::Checkpoint(format!("missing parameter `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries, optionally restricted to a name prefix.
    pub fn numel(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Copies every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts (overwriting) every parameter of `other`.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Normal(0, std) resampled until it falls inside ±2 std.
    pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::lit(v);
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    /// Uniform(−1/√fan_in, 1/√fan_in).
    pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    pub fn linear<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, din: usize, dout: usize) {
        store.insert(format!("{name}.w"), fan_in_uniform(rng, &[din, dout], din));
        store.insert(format!("{name}.b"), fan_in_uniform(rng, &[dout], din));
    }

    pub fn conv3<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) {
        linear(store, rng, name, 9 * cin, cout);
    }

    pub fn layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) {
        store.insert(format!("{name}.g"), Tensor::full(&[d], T::one()));
        store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    }
}

/// A [`Graph`] bound to a parameter store.
///
/// Parameters are placed on the tape lazily and only once. Names matching a
/// frozen prefix enter as constants and never receive gradients.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { g: Graph::new(), store, bound: BTreeMap::new(), frozen: Vec::new() }
    }

    /// Every parameter enters the tape as a constant.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store).freeze("")
    }

    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.is_frozen(name) { self.g.constant(t) } else { self.g.param(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every trainable parameter touched by the graph; untouched ones are absent.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    /// `x[rows, din] · W + b`
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    /// Linear map over the last axis of an arbitrary-rank tensor.
    pub fn linear_last(&mut self, x: Var, name: &str) -> Result<Var> {
        let shape = self.g.shape(x).to_vec();
        let din = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / din.max(1);
        let x2 = self.g.reshape(x, &[rows, din])?;
        let y = self.linear(x2, name)?;
        let dout = self.g.shape(y)[1];
        let mut out = shape;
        *out.last_mut().expect("rank ≥ 1") = dout;
        self.g.reshape(y, &out)
    }

    /// 3x3 same-padding convolution on NHWC.
    pub fn conv3(&mut self, x: Var, name: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("conv3 expects NHWC, got {:?}", s));
        }
        let cols = self.g.im2col3(x)?;
        let y = self.linear(cols, name)?;
        let cout = self.g.shape(y)[1];
        self.g.reshape(y, &[s[0], s[1], s[2], cout])
    }

    /// Layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        let n = self.g.layer_norm(x, T::lit(1e-5));
        let n = self.g.mul_row(n, g)?;
        self.g.add_row(n, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = init::trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut store = ParamStore::<f64>::new();
        store.insert("enc.a", Tensor::full(&[2], 1.0));
        store.insert("head.b", Tensor::full(&[2], 1.0));
        let mut ctx = Ctx::new(&store).freeze("enc.");
        let a = ctx.p("enc.a").unwrap();
        let b = ctx.p("head.b").unwrap();
        let m = ctx.g.mul(a, b).unwrap();
        let s = ctx.g.sum_all(m);
        let grads = ctx.g.backward(s).unwrap();
        let pg = ctx.param_grads(&grads);
        assert!(!pg.contains_key("enc.a"));
        assert_eq!(pg["head.b"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn missing_param_is_an_error() {
        let store = ParamStore::<f32>::new();
        let mut ctx = Ctx::new(&store);
        assert!(ctx.p("nope").is_err());
    }
}
