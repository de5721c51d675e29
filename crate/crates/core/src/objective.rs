//! Latent-space projector, invariance and covariance losses, and the weighted
//! total self-supervised loss.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::LatentRep;
use crate::error::{shape_err, AliseError, Result};
use crate::nn::{init, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Embedded latent vectors `[b][n_q][d_emb][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    pub z: Tensor<T>,
}

impl<T: Scalar> Embedding<T> {
    /// One row per `(b, i, j, n)` sample, `[samples, d_emb]`.
    pub fn rows(&self) -> Result<Tensor<T>> {
        let s = self.z.shape().to_vec();
        if s.len() != 5 {
            return shape_err(format!("embedding must be rank 5, got {:?}", s));
        }
        let p = self.z.permute(&[0, 3, 4, 1, 2])?;
        p.reshape(&[s[0] * s[1] * s[3] * s[4], s[2]])
    }

    pub fn from_rows(rows: &Tensor<T>, b: usize, n_q: usize, h: usize, w: usize) -> Result<Self> {
        let d = rows.shape()[1];
        let t = rows.clone().reshape(&[b, h, w, n_q, d])?;
        Ok(Self { z: t.permute(&[0, 3, 4, 1, 2])? })
    }
}

/// Loss weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_inv: f64,
    pub w_cov: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_rec: 1.0, w_inv: 1.0, w_cov: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_rec, self.w_inv, self.w_cov];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(AliseError::Config(format!("loss weights must be finite and non-negative: {:?}", self)));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(AliseError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

pub fn total_loss(l_inv: f64, l_cov: f64, l_rec: f64, w: &LossWeights) -> f64 {
    w.w_inv * l_inv + w.w_cov * l_cov + w.w_rec * l_rec
}

/// Two-layer projector `d_model → d_emb`: affine, batch standardization, ReLU, affine.
#[derive(Clone, Debug)]
pub struct Projector {
    pub d_model: usize,
    pub d_emb: usize,
}

impl Projector {
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        init::linear(store, rng, "proj.fc1", self.d_model, self.d_emb);
        init::linear(store, rng, "proj.fc2", self.d_emb, self.d_emb);
    }

    /// Rows `[samples, d_model]` to `[samples, d_emb]`; `train` enables batch statistics.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, rows: Var, train: bool) -> Result<Var> {
        let h = ctx.linear(rows, "proj.fc1")?;
        let h = if train {
            if ctx.g.shape(h)[0] < 2 {
                log::warn!("batch standardization over a single sample");
            }
            ctx.g.batch_standardize(h, T::lit(STANDARDIZE_EPS))?
        } else {
            h
        };
        let h = ctx.g.relu(h);
        ctx.linear(h, "proj.fc2")
    }

    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, y: &LatentRep<T>, train: bool) -> Result<Embedding<T>> {
        if !y.y.all_finite() {
            return Err(AliseError::Data("latent representation is not finite".into()));
        }
        let mut ctx = Ctx::inference(store);
        let rows = latent_rows(&mut ctx.g, y)?;
        let z = self.forward(&mut ctx, rows, train)?;
        Embedding::from_rows(ctx.g.value(z), y.batch(), y.n_q(), y.h(), y.w())
    }
}

/// Places a latent batch on the tape as `[b*h*w*n_q, d_model]` rows.
pub fn latent_rows<T: Scalar>(g: &mut Graph<T>, y: &LatentRep<T>) -> Result<Var> {
    let mut items = Vec::with_capacity(y.batch());
    for b in 0..y.batch() {
        items.extend(y.pixel_major(b)?.into_data());
    }
    let n = y.batch() * y.h() * y.w() * y.n_q();
    Ok(g.constant(Tensor::from_vec(&[n, y.d_model()], items)?))
}

/// Mean over samples of the squared L2 distance between paired rows.
pub fn invariance_var<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var) -> Result<Var> {
    if g.shape(za) != g.shape(zb) {
        return shape_err(format!("invariance: {:?} vs {:?}", g.shape(za), g.shape(zb)));
    }
    let rows = g.shape(za)[0];
    let d = g.sub(za, zb)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, T::one() / T::from_usize_lossy(rows.max(1))))
}

/// `(1/d) Σ_{i≠j} C[i][j]²` with `C` the unbiased covariance of the rows.
pub fn covariance_var<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 {
        return shape_err(format!("covariance expects [samples, d], got {:?}", s));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(AliseError::Data(format!("covariance needs at least 2 samples, got {}", n)));
    }
    let zc = g.center_rows(z)?;
    let c = g.matmul_t(zc, zc, true, false)?;
    let c = g.scale(c, T::one() / T::from_usize_lossy(n - 1));
    let mut mask = Tensor::full(&[d, d], T::one());
    for i in 0..d {
        mask.set(&[i, i], T::zero());
    }
    let mask = g.constant(mask);
    let off = g.mul(c, mask)?;
    let sq = g.square(off);
    let total = g.sum_all(sq);
    Ok(g.scale(total, T::one() / T::from_usize_lossy(d)))
}

pub fn invariance_loss<T: Scalar>(za: &Embedding<T>, zb: &Embedding<T>) -> Result<T> {
    if za.z.shape() != zb.z.shape() {
        return shape_err(format!("invariance: {:?} vs {:?}", za.z.shape(), zb.z.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(za.rows()?);
    let b = g.constant(zb.rows()?);
    let l = invariance_var(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn covariance_penalty<T: Scalar>(z: &Embedding<T>) -> Result<T> {
    covariance_penalty_rows(&z.rows()?)
}

/// Covariance penalty of an explicit `[samples, d]` matrix.
pub fn covariance_penalty_rows<T: Scalar>(rows: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let v = g.constant(rows.clone());
    let l = covariance_var(&mut g, v)?;
    Ok(g.value(l).item())
}

pub fn covariance_loss<T: Scalar>(za: &Embedding<T>, zb: &Embedding<T>) -> Result<T> {
    Ok(covariance_penalty(za)? + covariance_penalty(zb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(n: usize, d: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    fn emb_from_rows(r: &Tensor<f64>) -> Embedding<f64> {
        // one batch item, one query, 1 x samples spatial grid
        Embedding::from_rows(r, 1, 1, 1, r.shape()[0]).unwrap()
    }

    #[test]
    fn invariance_examples() {
        let a = emb_from_rows(&rows(1, 3, vec![1.0, 0.0, 0.0]));
        let b = emb_from_rows(&rows(1, 3, vec![0.0, 0.0, 0.0]));
        assert_eq!(invariance_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(invariance_loss(&a, &b).unwrap(), 1.0);
        let a = emb_from_rows(&rows(2, 2, vec![1.0, 1.0, 0.0, 0.0]));
        let b = emb_from_rows(&rows(2, 2, vec![0.0; 4]));
        assert_eq!(invariance_loss(&a, &b).unwrap(), 1.0);
        let c = emb_from_rows(&rows(1, 2, vec![0.0; 2]));
        assert!(invariance_loss(&a, &c).is_err());
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance_penalty_rows(&rows(3, 2, vec![0.0; 6])).unwrap(), 0.0);
        let corr = rows(2, 2, vec![1.0, 1.0, -1.0, -1.0]);
        assert!((covariance_penalty_rows(&corr).unwrap() - 4.0).abs() < 1e-12);
        let orth = rows(4, 2, vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        assert_eq!(covariance_penalty_rows(&orth).unwrap(), 0.0);
        assert!(covariance_penalty_rows(&rows(1, 2, vec![1.0, 2.0])).is_err());

        let za = emb_from_rows(&corr);
        let zero = emb_from_rows(&rows(2, 2, vec![0.0; 4]));
        assert!((covariance_loss(&za, &zero).unwrap() - 4.0).abs() < 1e-12);
        assert!((covariance_loss(&za, &za).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(0.2, 123.0, 0.5, &w) - 0.7).abs() < 1e-15);
        let rec_only = LossWeights { w_rec: 1.0, w_inv: 0.0, w_cov: 0.0 };
        assert_eq!(total_loss(3.0, 4.0, 0.25, &rec_only), 0.25);
        assert!(LossWeights { w_cov: 0.05, ..w }.validate().is_ok());
        assert!(LossWeights { w_rec: 0.0, w_inv: 0.0, w_cov: 0.0 }.validate().is_err());
        assert!(LossWeights { w_rec: -1.0, ..w }.validate().is_err());
    }

    fn identity_projector(d_model: usize, d_emb: usize) -> (Projector, ParamStore<f64>) {
        let p = Projector { d_model, d_emb };
        let mut store = ParamStore::new();
        let eye = |r: usize, c: usize| {
            let mut t = Tensor::zeros(&[r, c]);
            for i in 0..r.min(c) {
                t.set(&[i, i], 1.0);
            }
            t
        };
        store.insert("proj.fc1.w", eye(d_model, d_emb));
        store.insert("proj.fc1.b", Tensor::zeros(&[d_emb]));
        store.insert("proj.fc2.w", eye(d_emb, d_emb));
        store.insert("proj.fc2.b", Tensor::zeros(&[d_emb]));
        (p, store)
    }

    #[test]
    fn embed_identity_smoke() {
        let (p, store) = identity_projector(3, 5);
        let y = LatentRep { y: Tensor::from_vec(&[1, 1, 3, 1, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0]).unwrap() };
        let z = p.embed(&store, &y, false).unwrap();
        assert_eq!(z.z.shape(), &[1, 1, 5, 1, 2]);
        let r = z.rows().unwrap();
        assert_eq!(r.data(), &[1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);

        let (p, store) = identity_projector(3, 2);
        let z = p.embed(&store, &y, false).unwrap();
        assert_eq!(z.rows().unwrap().data(), &[1.0, 0.5, 0.0, 3.0]);
    }

    #[test]
    fn embed_identical_pixels_and_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Projector { d_model: 4, d_emb: 6 };
        let mut store = ParamStore::new();
        p.init_params(&mut store, &mut rng);
        let mut data: Vec<f64> = (0..2 * 3 * 4 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        // make pixel (0,0) and (0,1) of batch 0 identical for every query/channel
        for q in 0..3 {
            for c in 0..4 {
                let base = ((q * 4) + c) * 4;
                data[base + 1] = data[base];
            }
        }
        let y = LatentRep { y: Tensor::from_vec(&[2, 3, 4, 2, 2], data).unwrap() };
        let z = p.embed(&store, &y, true).unwrap();
        assert_eq!(z.z.shape(), &[2, 3, 6, 2, 2]);
        for q in 0..3 {
            for c in 0..6 {
                assert_eq!(z.z.at(&[0, q, c, 0, 0]), z.z.at(&[0, q, c, 0, 1]));
            }
        }

        // hidden activations after standardization: zero mean, unit variance per feature
        let mut ctx = Ctx::inference(&store);
        let r = latent_rows(&mut ctx.g, &y).unwrap();
        let h = ctx.linear(r, "proj.fc1").unwrap();
        let s = ctx.g.batch_standardize(h, STANDARDIZE_EPS).unwrap();
        let (v, raw) = (ctx.g.value(s), ctx.g.value(h));
        let n = v.shape()[0] as f64;
        let stats = |t: &Tensor<f64>, j: usize| {
            let col: Vec<f64> = (0..t.shape()[0]).map(|i| t.at(&[i, j])).collect();
            let mean = col.iter().sum::<f64>() / n;
            (mean, col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        };
        for j in 0..6 {
            let (mean, var) = stats(v, j);
            let (_, raw_var) = stats(raw, j);
            assert!(mean.abs() < 1e-4);
            // eps shrinks the variance to raw / (raw + eps)
            assert!((var - raw_var / (raw_var + STANDARDIZE_EPS)).abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn invariance_is_symmetric_and_nonnegative(data in proptest::collection::vec(-3.0f64..3.0, 24)) {
            let a = emb_from_rows(&rows(4, 3, data[..12].to_vec()));
            let b = emb_from_rows(&rows(4, 3, data[12..].to_vec()));
            let ab = invariance_loss(&a, &b).unwrap();
            prop_assert_eq!(ab, invariance_loss(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert!(ab > 0.0 || data[..12] == data[12..]);
        }

        #[test]
        fn covariance_shift_and_scale(data in proptest::collection::vec(-2.0f64..2.0, 15), shift in -5.0f64..5.0, s in 0.5f64..2.0) {
            let base = rows(5, 3, data.clone());
            let p0 = covariance_penalty_rows(&base).unwrap();
            let shifted = rows(5, 3, data.iter().enumerate().map(|(i, v)| v + shift * (1.0 + (i % 3) as f64)).collect());
            let scaled = rows(5, 3, data.iter().map(|v| v * s).collect());
            prop_assert!((covariance_penalty_rows(&shifted).unwrap() - p0).abs() <= 1e-9 * (1.0 + p0));
            prop_assert!((covariance_penalty_rows(&scaled).unwrap() - s.powi(4) * p0).abs() <= 1e-9 * (1.0 + p0));
        }
    }
}
