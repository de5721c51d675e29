//! Supervised segmentation on top of the encoder: linear probing, fine-tuning
//! and training from scratch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::downstream::{argmax_rows, f1_scores, F1Report, ProbeHead};
use crate::error::{AliseError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::config::RunConfig;
use crate::train::data::{year_items, Splits, YearItem};
use crate::train::optim::{Adam, AdamConfig};
use crate::train::pretrain::{seeded_subset, Model};
use crate::train::schedule::Plateau;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Frozen encoder, only the head is trained.
    Linear,
    /// Head and pre-trained encoder are trained together.
    FineTune,
    /// Head and a freshly initialized encoder are trained together.
    Scratch,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Linear => "linear",
            ProbeMode::FineTune => "finetune",
            ProbeMode::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

pub const PROBE_CSV_HEADER: &str = "epoch,lr,train_loss,val_loss,val_macro_f1";

#[derive(Clone, Debug)]
pub struct ProbeOutcome<T> {
    pub mode: ProbeMode,
    pub head: ProbeHead,
    /// Encoder (`enc.*`) and head (`head.*`) parameters at the best validation epoch.
    pub store: ParamStore<T>,
    pub n_train_series: usize,
    pub best_epoch: usize,
    pub metrics: Vec<ProbeEpoch>,
    pub val: F1Report,
    pub test: Option<F1Report>,
}

impl<T> ProbeOutcome<T> {
    pub fn csv(&self) -> String {
        let mut s = format!("{PROBE_CSV_HEADER}\n");
        for m in &self.metrics {
            s.push_str(&format!("{},{:e},{},{},{}\n", m.epoch, m.lr, m.train_loss, m.val_loss, m.val_macro_f1));
        }
        s
    }
}

/// Per-item inputs to the head: cached frozen features or live encoder passes.
enum Source<'a, T: Scalar> {
    Cached(Vec<Tensor<T>>),
    Live(&'a [YearItem<T>]),
}

impl<T: Scalar> Source<'_, T> {
    fn latent(&self, model: &Model, ctx: &mut Ctx<'_, T>, idx: &[usize]) -> Result<Var> {
        match self {
            Source::Cached(feats) => {
                let (nq, d) = (feats[0].shape()[1], feats[0].shape()[2]);
                let mut data = Vec::new();
                for &i in idx {
                    data.extend_from_slice(feats[i].data());
                }
                let rows = data.len() / (nq * d);
                Ok(ctx.g.constant(Tensor::from_vec(&[rows, nq, d], data)?))
            }
            Source::Live(items) => {
                let ys = idx
                    .iter()
                    .map(|&i| model.enc.forward(ctx, &items[i].sits))
                    .collect::<Result<Vec<_>>>()?;
                ctx.g.concat0(&ys)
            }
        }
    }
}

fn cache<T: Scalar>(model: &Model, store: &ParamStore<T>, items: &[YearItem<T>]) -> Result<Vec<Tensor<T>>> {
    items
        .iter()
        .map(|it| {
            let mut ctx = Ctx::inference(store);
            let y = model.enc.forward(&mut ctx, &it.sits)?;
            Ok(ctx.g.value(y).clone())
        })
        .collect()
}

fn labels_of<T>(items: &[YearItem<T>], idx: &[usize]) -> Vec<u8> {
    idx.iter().flat_map(|&i| items[i].labels.iter().copied()).collect()
}

/// Mean cross-entropy, predictions and truth over `items`, evaluated in batches.
fn evaluate<T: Scalar>(
    model: &Model,
    head: &ProbeHead,
    store: &ParamStore<T>,
    src: &Source<'_, T>,
    items: &[YearItem<T>],
    batch: usize,
) -> Result<(f64, Vec<u8>, Vec<u8>)> {
    let mut loss = 0.0;
    let mut n_valid = 0usize;
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    let all: Vec<usize> = (0..items.len()).collect();
    for idx in all.chunks(batch) {
        let mut ctx = Ctx::inference(store);
        let y = src.latent(model, &mut ctx, idx)?;
        let logits = head.forward_var(&mut ctx, y)?;
        let labels = labels_of(items, idx);
        let l = ctx.g.cross_entropy(logits, &labels)?;
        let nv = labels.iter().filter(|&&v| v != crate::autodiff::IGNORE_LABEL).count();
        loss += ctx.g.value(l).item().to_f64_lossy() * nv as f64;
        n_valid += nv;
        preds.extend(argmax_rows(ctx.g.value(logits)));
        truth.extend(labels);
    }
    Ok((loss / n_valid.max(1) as f64, preds, truth))
}

/// Trains a probe head in the requested mode; selects the epoch with the lowest validation loss.
///
/// `encoder` must contain the `enc.*` parameters; it is only read in `Linear` mode
/// and left untouched in every mode.
pub fn train_probe<T: Scalar>(
    run: &RunConfig,
    model: &Model,
    encoder: &ParamStore<T>,
    splits: &Splits<T>,
    mode: ProbeMode,
) -> Result<ProbeOutcome<T>> {
    let cfg = &run.train;
    let k = run.synth.n_classes;
    let head = ProbeHead::new(cfg.n_q, cfg.d_model, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC1A55));

    let n_series = if cfg.subset == 0 { splits.train.len() } else { cfg.subset };
    if n_series > splits.train.len() {
        return Err(AliseError::Config(format!("subset {} exceeds {} training series", n_series, splits.train.len())));
    }
    let mut chosen = seeded_subset(splits.train.len(), n_series, &mut rng);
    chosen.sort_unstable();
    let train_series: Vec<_> = chosen.iter().map(|&i| splits.train[i].clone()).collect();
    let train_items = year_items(&train_series, cfg.crop)?;
    let val_src_series = if splits.val.is_empty() { &train_series[..] } else { &splits.val[..] };
    let val_items = year_items(val_src_series, cfg.crop)?;
    let test_items = year_items(&splits.test, cfg.crop)?;

    let mut store = match mode {
        ProbeMode::Scratch => model.init::<T>(cfg.seed.wrapping_add(0xF5)).subset("enc."),
        _ => encoder.subset("enc."),
    };
    if store.is_empty() {
        return Err(AliseError::Config("encoder parameters missing".into()));
    }
    head.init_params(&mut store, &mut rng);

    let (lr0, epochs) = match mode {
        ProbeMode::Linear => (cfg.probe_lr, cfg.probe_epochs),
        ProbeMode::FineTune => (cfg.ft_lr, cfg.ft_epochs),
        ProbeMode::Scratch => (cfg.fs_lr, cfg.fs_epochs),
    };
    let (train_src, val_src, test_src) = if mode == ProbeMode::Linear {
        (
            Source::Cached(cache(model, &store, &train_items)?),
            Source::Cached(cache(model, &store, &val_items)?),
            Source::Cached(cache(model, &store, &test_items)?),
        )
    } else {
        (Source::Live(&train_items), Source::Live(&val_items), Source::Live(&test_items))
    };

    let mut adam = Adam::new(AdamConfig::default());
    let mut plateau = Plateau::new(lr0, cfg.patience, cfg.decay)?;
    let mut lr = lr0;
    let (v0, p0, t0) = evaluate(model, &head, &store, &val_src, &val_items, cfg.probe_batch)?;
    let mut best = (v0, store.clone(), 0usize);
    let mut metrics = vec![ProbeEpoch {
        epoch: 0,
        lr: 0.0,
        train_loss: f64::NAN,
        val_loss: v0,
        val_macro_f1: f1_scores(&p0, &t0, k)?.macro_f1,
    }];
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        let mut steps = 0usize;
        for idx in order.chunks(cfg.probe_batch) {
            let mut ctx = Ctx::new(&store);
            if mode == ProbeMode::Linear {
                ctx = ctx.freeze("enc.");
            }
            let y = train_src.latent(model, &mut ctx, idx)?;
            let logits = head.forward_var(&mut ctx, y)?;
            let loss = ctx.g.cross_entropy(logits, &labels_of(&train_items, idx))?;
            let lv = ctx.g.value(loss).item().to_f64_lossy();
            if !lv.is_finite() {
                return Err(AliseError::Diverged { step: steps, value: lv });
            }
            let grads = ctx.g.backward(loss)?;
            let pg = ctx.param_grads(&grads);
            drop(ctx);
            adam.step(&mut store, &pg, lr)?;
            acc += lv;
            steps += 1;
        }
        let (vl, p, t) = evaluate(model, &head, &store, &val_src, &val_items, cfg.probe_batch)?;
        let f1 = f1_scores(&p, &t, k)?.macro_f1;
        log::info!("{} epoch {epoch}: lr {lr:.2e} train {:.4} val {vl:.4} f1 {f1:.4}", mode.name(), acc / steps as f64);
        metrics.push(ProbeEpoch { epoch, lr, train_loss: acc / steps as f64, val_loss: vl, val_macro_f1: f1 });
        if vl < best.0 {
            best = (vl, store.clone(), epoch);
        }
        lr = plateau.observe(vl);
    }
    let (_, store, best_epoch) = best;
    let (_, p, t) = evaluate(model, &head, &store, &val_src, &val_items, cfg.probe_batch)?;
    let val = f1_scores(&p, &t, k)?;
    let test = if test_items.is_empty() {
        None
    } else {
        let (_, p, t) = evaluate(model, &head, &store, &test_src, &test_items, cfg.probe_batch)?;
        Some(f1_scores(&p, &t, k)?)
    };
    Ok(ProbeOutcome { mode, head, store, n_train_series: n_series, best_epoch, metrics, val, test })
}

/// Class map `[h*w]` of one item.
pub fn predict_item<T: Scalar>(model: &Model, head: &ProbeHead, store: &ParamStore<T>, item: &YearItem<T>) -> Result<Vec<u8>> {
    let mut ctx = Ctx::inference(store);
    let y = model.enc.forward(&mut ctx, &item.sits)?;
    let logits = head.forward_var(&mut ctx, y)?;
    Ok(argmax_rows(ctx.g.value(logits)))
}
