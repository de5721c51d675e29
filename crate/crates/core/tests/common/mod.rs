//! Finite-difference gradient checking shared by the gradient suite and the acceptance run.

#![allow(dead_code)]

use alise::nn::{Ctx, ParamStore};
use alise::objective::LossWeights;
use alise::sits::Sits;
use alise::tensor::Tensor;
use alise::train::config::TrainConfig;
use alise::train::pretrain::{ssl_loss, Model};
use alise::views::{make_views, ViewPair};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Below this absolute gap a mismatch is numerical noise around a zero gradient.
const ABS_FLOOR: f64 = 1e-7;
const PER_TENSOR: usize = 12;

fn toy_model() -> Model {
    let cfg = TrainConfig {
        d_model: 8,
        n_q: 2,
        d_emb: 6,
        down_blocks: 1,
        n_layers: 1,
        n_heads: 2,
        d_hidden: 8,
        ..TrainConfig::default()
    };
    Model::new(&cfg, 3).unwrap()
}

fn toy_pair(rng: &mut ChaCha8Rng) -> ViewPair<f64> {
    let (t, c, h, w) = (6, 3, 4, 4);
    let d0 = NaiveDate::from_ymd_opt(2018, 2, 1).unwrap();
    let dates = (0..t).map(|i| d0 + chrono::Duration::days(7 * i as i64 + (i * i) as i64)).collect();
    let vals = (0..t * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let validity = (0..t * h * w).map(|_| rng.random_bool(0.8)).collect();
    let s = Sits::new(Tensor::from_vec(&[t, c, h, w], vals).unwrap(), dates, validity).unwrap();
    make_views(&s, 1).unwrap()
}

pub fn loss_value(model: &Model, store: &ParamStore<f64>, pairs: &[ViewPair<f64>], w: &LossWeights) -> f64 {
    let mut ctx = Ctx::inference(store);
    let (l, _) = ssl_loss(model, &mut ctx, pairs, w).unwrap();
    ctx.g.value(l).item()
}

/// Fallback steps for entries whose `STEP` stencil straddles ReLU boundaries.
const FINE_STEPS: [f64; 2] = [1e-5, 1e-6];

fn rel_err(a: f64, num: f64) -> f64 {
    let gap = (a - num).abs();
    if gap <= ABS_FLOOR {
        0.0
    } else {
        gap / a.abs().max(num.abs())
    }
}

pub struct Report {
    pub checked: usize,
    pub kinks: usize,
    pub worst: f64,
}

/// Compares analytic gradients with central differences on sampled entries of every tensor.
///
/// An entry that misses at `STEP` sits within one step of a ReLU boundary, where the central
/// difference averages two linear pieces; it must then agree at both `FINE_STEPS`.
pub fn check(model: &Model, store: &ParamStore<f64>, pairs: &[ViewPair<f64>], w: &LossWeights, label: &str) -> Report {
    let mut ctx = Ctx::new(store);
    let (l, _) = ssl_loss(model, &mut ctx, pairs, w).unwrap();
    let grads = ctx.g.backward(l).unwrap();
    let analytic = ctx.param_grads(&grads);
    drop(ctx);
    let eval = |name: &str, i: usize, delta: f64| {
        let mut s = store.clone();
        s.get_mut(name).unwrap().data_mut()[i] += delta;
        loss_value(model, &s, pairs, w)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rep = Report { checked: 0, kinks: 0, worst: 0.0 };
    for (name, t) in store.iter() {
        let g = analytic.get(name).unwrap_or_else(|| panic!("{label}: no gradient for {name}"));
        let n = t.len();
        let picks: Vec<usize> = if n <= PER_TENSOR { (0..n).collect() } else { (0..PER_TENSOR).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let a = g.data()[i];
            let num = (eval(name, i, STEP) - eval(name, i, -STEP)) / (2.0 * STEP);
            let mut rel = rel_err(a, num);
            if rel > REL_TOL {
                rel = 0.0;
                for h in FINE_STEPS {
                    let fine = (eval(name, i, h) - eval(name, i, -h)) / (2.0 * h);
                    let r = rel_err(a, fine);
                    assert!(r <= REL_TOL, "{label}: {name}[{i}] analytic {a:e} numeric {num:e}, at step {h:e} {fine:e} rel {r:e}");
                    rel = rel.max(r);
                }
                rep.kinks += 1;
            }
            rep.worst = rep.worst.max(rel);
            rep.checked += 1;
        }
    }
    println!("{label}: {} entries, {} across a ReLU boundary, worst relative error {:.2e}", rep.checked, rep.kinks, rep.worst);
    rep
}

pub fn setup() -> (Model, ParamStore<f64>, Vec<ViewPair<f64>>) {
    let model = toy_model();
    let mut store = model.init::<f64>(3);
    // break the near-zero initialization so attention weights are not uniform
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["enc.proj.queries", "enc.proj.w1", "dec.w1", "dec.w2", "dec.mask_token"] {
        for v in store.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let pairs = vec![toy_pair(&mut rng), toy_pair(&mut rng)];
    (model, store, pairs)
}

pub const LOSS_CASES: [(&str, LossWeights); 4] = [
    ("invariance", LossWeights { w_rec: 0.0, w_inv: 1.0, w_cov: 0.0 }),
    ("covariance", LossWeights { w_rec: 0.0, w_inv: 0.0, w_cov: 1.0 }),
    ("reconstruction", LossWeights { w_rec: 1.0, w_inv: 0.0, w_cov: 0.0 }),
    ("total", LossWeights { w_rec: 1.0, w_inv: 0.7, w_cov: 0.3 }),
];
