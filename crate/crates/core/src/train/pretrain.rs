//! Self-supervised pre-training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{AliseError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::objective::{covariance_var, invariance_var, LossWeights, Projector};
use crate::scalar::Scalar;
use crate::sits::{select_consecutive, select_consecutive_with, LabeledSits};
use crate::train::config::{RunConfig, TrainConfig};
use crate::train::data::{center_crop, random_crop};
use crate::train::optim::{Adam, AdamConfig};
use crate::train::schedule::cosine_warm_restarts;
use crate::views::{make_views, ViewPair};

/// Encoder, decoder and latent projector of one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub enc: Encoder,
    pub dec: Decoder,
    pub proj: Projector,
}

impl Model {
    pub fn new(cfg: &TrainConfig, channels: usize) -> Result<Self> {
        Ok(Self {
            enc: Encoder::new(cfg.encoder_config(channels))?,
            dec: Decoder::new(cfg.decoder_config(channels)),
            proj: Projector { d_model: cfg.d_model, d_emb: cfg.d_emb },
        })
    }

    /// Fresh parameters; identical seeds give identical stores.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.enc.init_params(&mut store, &mut rng);
        self.dec.init_params(&mut store, &mut rng);
        self.proj.init_params(&mut store, &mut rng);
        store
    }
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub inv: f64,
    pub cov: f64,
    pub rec: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.inv += o.inv;
        self.cov += o.cov;
        self.rec += o.rec;
    }

    fn scaled(&self, s: f64) -> LossParts {
        LossParts { total: self.total * s, inv: self.inv * s, cov: self.cov * s, rec: self.rec * s }
    }
}

/// Builds the weighted multi-view objective for a batch of view pairs.
///
/// Terms with zero weight are reported but kept off the total.
pub fn ssl_loss<T: Scalar>(model: &Model, ctx: &mut Ctx<'_, T>, pairs: &[ViewPair<T>], w: &LossWeights) -> Result<(Var, LossParts)> {
    if pairs.is_empty() {
        return Err(AliseError::Data("empty batch".into()));
    }
    let d = model.enc.cfg.d_model;
    let mut recs = Vec::with_capacity(pairs.len());
    let mut rows_a = Vec::with_capacity(pairs.len());
    let mut rows_b = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let ya = model.enc.forward(ctx, &pair.view_a)?;
        let yb = model.enc.forward(ctx, &pair.view_b)?;
        recs.push(model.dec.cross_recon_var(ctx, pair, ya, yb)?);
        let n = ctx.g.shape(ya)[0] * ctx.g.shape(ya)[1];
        rows_a.push(ctx.g.reshape(ya, &[n, d])?);
        rows_b.push(ctx.g.reshape(yb, &[n, d])?);
    }
    let mut rec = recs[0];
    for &r in &recs[1..] {
        rec = ctx.g.add(rec, r)?;
    }
    let rec = ctx.g.scale(rec, T::one() / T::from_usize_lossy(recs.len()));

    let ra = ctx.g.concat0(&rows_a)?;
    let rb = ctx.g.concat0(&rows_b)?;
    let za = model.proj.forward(ctx, ra, true)?;
    let zb = model.proj.forward(ctx, rb, true)?;
    let inv = invariance_var(&mut ctx.g, za, zb)?;
    let ca = covariance_var(&mut ctx.g, za)?;
    let cb = covariance_var(&mut ctx.g, zb)?;
    let cov = ctx.g.add(ca, cb)?;

    let mut terms = Vec::new();
    for (v, wt) in [(inv, w.w_inv), (cov, w.w_cov), (rec, w.w_rec)] {
        if wt != 0.0 {
            terms.push(ctx.g.scale(v, T::lit(wt)));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = ctx.g.add(total, t)?;
    }
    let val = |ctx: &Ctx<'_, T>, v: Var| ctx.g.value(v).item().to_f64_lossy();
    let parts = LossParts { total: val(ctx, total), inv: val(ctx, inv), cov: val(ctx, cov), rec: val(ctx, rec) };
    Ok((total, parts))
}

/// One row of the pre-training log; epoch 0 is the evaluation before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: LossParts,
}

pub const PRETRAIN_CSV_HEADER: &str = "epoch,lr,train_total,train_inv,train_cov,train_rec,val_total,val_inv,val_cov,val_rec";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let (t, v) = (&self.train, &self.val);
        format!(
            "{},{:e},{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, t.total, t.inv, t.cov, t.rec, v.total, v.inv, v.cov, v.rec
        )
    }
}

#[derive(Clone, Debug)]
pub struct PretrainResult<T> {
    /// Parameters with the lowest validation loss.
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub last: ParamStore<T>,
    pub metrics: Vec<EpochMetrics>,
}

impl<T> PretrainResult<T> {
    pub fn csv(&self) -> String {
        let mut s = String::from(PRETRAIN_CSV_HEADER);
        s.push('\n');
        for m in &self.metrics {
            s.push_str(&m.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Deterministic views of a held-out series: fixed date window and center crop.
fn eval_pairs<T: Scalar>(series: &[LabeledSits<T>], cfg: &TrainConfig) -> Result<Vec<ViewPair<T>>> {
    series
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = select_consecutive(&l.sits, cfg.n_consecutive, cfg.seed ^ (i as u64).wrapping_mul(0x2545_F491))?;
            let (s, _, _) = center_crop(&s, cfg.crop)?;
            make_views(&s, cfg.t_w)
        })
        .collect()
}

/// Mean loss over fixed batches, no parameter update.
pub fn evaluate_ssl<T: Scalar>(model: &Model, store: &ParamStore<T>, pairs: &[ViewPair<T>], cfg: &TrainConfig) -> Result<LossParts> {
    let mut acc = LossParts::default();
    let mut n = 0;
    for chunk in pairs.chunks(cfg.batch_size) {
        let mut ctx = Ctx::inference(store);
        let (_, parts) = ssl_loss(model, &mut ctx, chunk, &cfg.weights)?;
        acc.add(&parts);
        n += 1;
    }
    Ok(acc.scaled(1.0 / n.max(1) as f64))
}

/// Pre-trains from `init`; keeps the parameters with the lowest validation total loss.
pub fn pretrain<T: Scalar>(
    run: &RunConfig,
    model: &Model,
    init: ParamStore<T>,
    train: &[LabeledSits<T>],
    val: &[LabeledSits<T>],
) -> Result<PretrainResult<T>> {
    let cfg = &run.train;
    if train.is_empty() {
        return Err(AliseError::Data("no training series".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let val_pairs = eval_pairs(if val.is_empty() { train } else { val }, cfg)?;
    let train_probe = eval_pairs(&train[..train.len().min(val_pairs.len().max(1))], cfg)?;

    let mut store = init;
    let mut adam = Adam::new(AdamConfig::default());
    let initial_val = evaluate_ssl(model, &store, &val_pairs, cfg)?;
    let initial_train = evaluate_ssl(model, &store, &train_probe, cfg)?;
    let mut metrics = vec![EpochMetrics { epoch: 0, lr: 0.0, train: initial_train, val: initial_val }];
    log::info!("init: train {:.5} val {:.5}", initial_train.total, initial_val.total);
    let mut best = store.clone();
    let mut best_val = initial_val.total;
    let mut best_epoch = 0;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        let mut lr = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_warm_restarts(epoch as f64 + step as f64 / steps as f64, cfg.t0, cfg.lr_max)?;
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let s = select_consecutive_with(&train[i].sits, cfg.n_consecutive, &mut rng)?;
                    let s = random_crop(&s, cfg.crop, &mut rng)?;
                    make_views(&s, cfg.t_w)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut ctx = Ctx::new(&store);
            let (loss, parts) = ssl_loss(model, &mut ctx, &pairs, &cfg.weights)?;
            if !parts.total.is_finite() {
                log::error!("loss diverged at step {global_step} (epoch {})", epoch + 1);
                return Err(AliseError::Diverged { step: global_step, value: parts.total });
            }
            let grads = ctx.g.backward(loss)?;
            let pg = ctx.param_grads(&grads);
            drop(ctx);
            adam.step(&mut store, &pg, lr)?;
            acc.add(&parts);
            global_step += 1;
        }
        let train_mean = acc.scaled(1.0 / steps as f64);
        let val_loss = evaluate_ssl(model, &store, &val_pairs, cfg)?;
        if !val_loss.total.is_finite() {
            return Err(AliseError::Diverged { step: global_step, value: val_loss.total });
        }
        log::info!(
            "epoch {}: lr {:.2e} train {:.5} (inv {:.4} cov {:.4} rec {:.4}) val {:.5}",
            epoch + 1,
            lr,
            train_mean.total,
            train_mean.inv,
            train_mean.cov,
            train_mean.rec,
            val_loss.total
        );
        if val_loss.total < best_val {
            best_val = val_loss.total;
            best = store.clone();
            best_epoch = epoch + 1;
        }
        metrics.push(EpochMetrics { epoch: epoch + 1, lr, train: train_mean, val: val_loss });
    }
    Ok(PretrainResult { best, best_epoch, last: store, metrics })
}

/// Draws `n` distinct indices in `0..len` in a seeded order.
pub fn seeded_subset<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.truncate(n.min(len));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sits::SynthConfig;
    use crate::train::data::load_splits;

    pub(crate) fn tiny_run() -> RunConfig {
        let mut r = RunConfig::default();
        r.synth = SynthConfig { size: 8, dates_min: 10, dates_max: 12, ..SynthConfig::default() };
        r.train = TrainConfig {
            n_q: 2,
            d_model: 8,
            d_emb: 8,
            down_blocks: 1,
            n_layers: 1,
            n_heads: 2,
            d_hidden: 8,
            n_consecutive: 8,
            crop: 8,
            n_train: 4,
            n_val: 2,
            n_test: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        r
    }

    #[test]
    fn reconstruction_only_total_equals_rec() {
        let mut run = tiny_run();
        run.train.weights = LossWeights { w_rec: 1.0, w_inv: 0.0, w_cov: 0.0 };
        let splits = load_splits::<f64>(&run).unwrap();
        let model = Model::new(&run.train, 10).unwrap();
        let store = model.init::<f64>(1);
        let pairs = eval_pairs(&splits.train, &run.train).unwrap();
        let parts = evaluate_ssl(&model, &store, &pairs, &run.train).unwrap();
        assert_eq!(parts.total, parts.rec);
        assert!(parts.inv > 0.0);
    }

    #[test]
    fn pretrain_is_deterministic_and_logs_every_epoch() {
        let run = tiny_run();
        let splits = load_splits::<f32>(&run).unwrap();
        let model = Model::new(&run.train, 10).unwrap();
        let a = pretrain(&run, &model, model.init(5), &splits.train, &splits.val).unwrap();
        let b = pretrain(&run, &model, model.init(5), &splits.train, &splits.val).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.metrics.len(), 3);
        assert_ne!(a.last, model.init::<f32>(5));
    }

    #[test]
    fn divergence_is_reported() {
        let run = tiny_run();
        let splits = load_splits::<f32>(&run).unwrap();
        let model = Model::new(&run.train, 10).unwrap();
        let mut store = model.init::<f32>(5);
        store.get_mut("dec.out.b").unwrap().data_mut()[0] = f32::NAN;
        match pretrain(&run, &model, store, &splits.train, &splits.val) {
            Err(AliseError::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.best_epoch)),
        }
    }
}
