//! Lightweight cross-attention decoder used by the cross-reconstruction task.
//!
//! Queries are a shared mask token plus the day-offset code of each date to
//! rebuild; keys are `Y W2`, values the raw latent vectors.

use rand::Rng;

use crate::autodiff::Var;
use crate::encoder::{positional_encoding, LatentRep};
use crate::error::{shape_err, Result};
use crate::nn::{init, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::sits::{delta_t, Sits};
use crate::tensor::Tensor;
use crate::views::ViewPair;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub channels: usize,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = self.cfg.d_model;
        store.insert("dec.mask_token", init::trunc_normal(rng, &[d], 0.02));
        store.insert("dec.w1", init::trunc_normal(rng, &[d, d], 0.02));
        store.insert("dec.w2", init::trunc_normal(rng, &[d, d], 0.02));
        init::linear(store, rng, "dec.out", d, self.cfg.channels);
    }

    /// `M_β + PE(δt_i)` for every target date, `[T, d_model]`.
    pub fn build_queries<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, delta: &[i64]) -> Result<Var> {
        let pe = ctx.g.constant(positional_encoding::<T>(delta, self.cfg.d_model, self.cfg.tau)?);
        let m = ctx.p("dec.mask_token")?;
        ctx.g.add_row(pe, m)
    }

    /// `softmax(Q W1' (Y W2)ᵀ / √d) Y` per pixel: `q` is `[T, d]`, `y` is `[p, n_q, d]`; returns `[p, T, d]`.
    pub fn cross_attend<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, q: Var, y: Var) -> Result<Var> {
        let ys = ctx.g.shape(y).to_vec();
        let d = self.cfg.d_model;
        if ys.len() != 3 || ys[2] != d || ctx.g.shape(q).len() != 2 || ctx.g.shape(q)[1] != d {
            return shape_err(format!("cross_attend q {:?} y {:?}", ctx.g.shape(q), ys));
        }
        let (p, n_q) = (ys[0], ys[1]);
        let w1 = ctx.p("dec.w1")?;
        let w2 = ctx.p("dec.w2")?;
        let qp = ctx.g.matmul(q, w1)?;
        let qp = ctx.g.tile(qp, p);
        let flat = ctx.g.reshape(y, &[p * n_q, d])?;
        let keys = ctx.g.matmul(flat, w2)?;
        let keys = ctx.g.reshape(keys, &[p, n_q, d])?;
        let scores = ctx.g.matmul_t(qp, keys, false, true)?;
        let scores = ctx.g.scale(scores, T::one() / T::from_usize_lossy(d).sqrt());
        let att = ctx.g.softmax(scores);
        ctx.g.matmul(att, y)
    }

    /// Reconstruction `[p, T, c]` of the target dates from a pixel-major latent `[p, n_q, d]`.
    pub fn decode_var<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, y: Var, delta: &[i64]) -> Result<Var> {
        let q = self.build_queries(ctx, delta)?;
        let a = self.cross_attend(ctx, q, y)?;
        ctx.linear_last(a, "dec.out")
    }

    /// Inference decode of batch item `b`, `[T][c][h][w]`.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, y: &LatentRep<T>, b: usize, delta: &[i64]) -> Result<Tensor<T>> {
        let mut ctx = Ctx::inference(store);
        let yv = ctx.g.constant(y.pixel_major(b)?);
        let r = self.decode_var(&mut ctx, yv, delta)?;
        let out = ctx.g.value(r).permute(&[1, 2, 0])?;
        out.reshape(&[delta.len(), self.cfg.channels, y.h(), y.w()])
    }

    /// Validity-masked MSE between a view and its reconstruction `[p, T, c]`.
    pub fn masked_mse_var<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, view: &Sits<T>, recon: Var) -> Result<Var> {
        let (target, weight) = masked_mse_terms(view)?;
        ctx.g.masked_sq_err(recon, target, weight)
    }

    /// Cross-reconstruction loss: `½[mse(A, dec(Y_B)) + mse(B, dec(Y_A))]`.
    pub fn cross_recon_var<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, pair: &ViewPair<T>, ya: Var, yb: Var) -> Result<Var> {
        let da = delta_t(pair.view_a.dates())?;
        let db = delta_t(pair.view_b.dates())?;
        let ra = self.decode_var(ctx, yb, da.as_slice())?;
        let la = self.masked_mse_var(ctx, &pair.view_a, ra)?;
        let rb = self.decode_var(ctx, ya, db.as_slice())?;
        let lb = self.masked_mse_var(ctx, &pair.view_b, rb)?;
        let s = ctx.g.add(la, lb)?;
        Ok(ctx.g.scale(s, T::lit(0.5)))
    }

    pub fn cross_recon_loss<T: Scalar>(&self, store: &ParamStore<T>, pair: &ViewPair<T>, ya: &LatentRep<T>, yb: &LatentRep<T>) -> Result<T> {
        let mut ctx = Ctx::inference(store);
        let a = ctx.g.constant(ya.pixel_major(0)?);
        let b = ctx.g.constant(yb.pixel_major(0)?);
        let l = self.cross_recon_var(&mut ctx, pair, a, b)?;
        Ok(ctx.g.value(l).item())
    }
}

/// Target and per-entry weights in pixel-major `[h*w, t, c]` layout.
///
/// A valid pixel at date `t` weighs `1 / (n_valid_t · T_eff)` on every channel,
/// where `T_eff` counts the dates with at least one valid pixel.
pub fn masked_mse_terms<T: Scalar>(view: &Sits<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (t, c, h, w) = (view.t(), view.c(), view.h(), view.w());
    let px = h * w;
    let counts: Vec<usize> = (0..t).map(|ti| view.validity()[ti * px..(ti + 1) * px].iter().filter(|&&v| v).count()).collect();
    let t_eff = counts.iter().filter(|&&n| n > 0).count();
    if t_eff == 0 {
        log::warn!("every date of the view is fully invalid; reconstruction loss is 0");
    }
    let target = view.values().permute(&[2, 3, 0, 1])?.reshape(&[px, t, c])?;
    let mut weight = Tensor::zeros(&[px, t, c]);
    for ti in 0..t {
        if counts[ti] == 0 {
            continue;
        }
        let wv = T::one() / T::from_usize_lossy(counts[ti] * t_eff);
        for p in 0..px {
            if view.validity()[ti * px + p] {
                for ch in 0..c {
                    weight.set(&[p, ti, ch], wv);
                }
            }
        }
    }
    Ok((target, weight))
}

/// Masked MSE of a reconstruction given as `[T][c][h][w]`.
pub fn masked_mse<T: Scalar>(view: &Sits<T>, xhat: &Tensor<T>) -> Result<T> {
    if xhat.shape() != view.values().shape() {
        return shape_err(format!("reconstruction {:?} vs view {:?}", xhat.shape(), view.values().shape()));
    }
    let (target, weight) = masked_mse_terms(view)?;
    let px = view.h() * view.w();
    let pred = xhat.permute(&[2, 3, 0, 1])?.reshape(&[px, view.t(), view.c()])?;
    let mut g = crate::autodiff::Graph::new();
    let p = g.constant(pred);
    let l = g.masked_sq_err(p, target, weight)?;
    Ok(g.value(l).item())
}
