//! The aligned encoder: a spectral-spatial-temporal encoder (per-date U-Net
//! features followed by a per-pixel temporal transformer) and a temporal
//! projector that cross-attends learnable queries onto its output.
//!
//! Internally activations are pixel-major: a single series is handled as
//! `[h*w, t, d_model]` tokens so every temporal operation runs per pixel.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, AliseError, Result};
use crate::nn::{init, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::sits::{delta_t, Sits};
use crate::tensor::Tensor;

/// Architecture of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub d_model: usize,
    pub n_q: usize,
    /// Number of down/up residual conv blocks; `h` and `w` must be divisible by `2^down_blocks`.
    pub down_blocks: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    /// Heads of the temporal projector; channels are split evenly across them.
    pub proj_heads: usize,
    /// Period base of the sinusoidal day-offset code.
    pub tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 10,
            d_model: 64,
            n_q: 10,
            down_blocks: 3,
            n_layers: 3,
            n_heads: 4,
            d_hidden: 128,
            proj_heads: 2,
            tau: 10_000.0,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale architecture.
    pub fn toy() -> Self {
        Self { d_model: 16, n_q: 4, down_blocks: 1, n_layers: 1, n_heads: 2, d_hidden: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(AliseError::Config(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        if self.n_q == 0 || self.in_channels == 0 {
            return Err(AliseError::Config("n_q and in_channels must be positive".into()));
        }
        for (name, heads) in [("n_heads", self.n_heads), ("proj_heads", self.proj_heads)] {
            if heads == 0 || self.d_model % heads != 0 {
                return Err(AliseError::Config(format!("d_model {} not divisible by {} {}", self.d_model, name, heads)));
            }
        }
        Ok(())
    }
}

/// Aligned latent representation `[b][n_q][d_model][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRep<T> {
    pub y: Tensor<T>,
}

impl<T: Scalar> LatentRep<T> {
    pub fn batch(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn n_q(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.y.shape()[2]
    }

    pub fn h(&self) -> usize {
        self.y.shape()[3]
    }

    pub fn w(&self) -> usize {
        self.y.shape()[4]
    }

    /// Builds from per-item pixel-major `[h*w, n_q, d]` blocks.
    pub fn from_pixel_major(items: &[Tensor<T>], h: usize, w: usize) -> Result<Self> {
        let Some(first) = items.first() else {
            return shape_err("empty batch");
        };
        let (n_q, d) = (first.shape()[1], first.shape()[2]);
        let mut data = Vec::with_capacity(items.len() * n_q * d * h * w);
        for it in items {
            if it.shape() != [h * w, n_q, d] {
                return shape_err(format!("latent item {:?}, expected {:?}", it.shape(), [h * w, n_q, d]));
            }
            data.extend(it.permute(&[1, 2, 0])?.into_data());
        }
        Ok(Self { y: Tensor::from_vec(&[items.len(), n_q, d, h, w], data)? })
    }

    /// Item `b` as pixel-major `[h*w, n_q, d]`.
    pub fn pixel_major(&self, b: usize) -> Result<Tensor<T>> {
        let (n_q, d, h, w) = (self.n_q(), self.d_model(), self.h(), self.w());
        let n = n_q * d * h * w;
        let item = Tensor::from_vec(&[n_q, d, h * w], self.y.data()[b * n..(b + 1) * n].to_vec())?;
        item.permute(&[2, 0, 1])
    }
}

/// Sinusoidal code of day offsets: `pe[i][2j] = sin(δt_i / τ^(2j/d))`, `pe[i][2j+1] = cos(·)`.
pub fn positional_encoding<T: Scalar>(delta: &[i64], d_model: usize, tau: f64) -> Result<Tensor<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(AliseError::Config(format!("positional encoding needs an even d_model, got {}", d_model)));
    }
    let mut out = Vec::with_capacity(delta.len() * d_model);
    for &dt in delta {
        for j in 0..d_model / 2 {
            let angle = dt as f64 / tau.powf(2.0 * j as f64 / d_model as f64);
            out.push(T::lit(angle.sin()));
            out.push(T::lit(angle.cos()));
        }
    }
    Tensor::from_vec(&[delta.len(), d_model], out)
}

/// `[t][c][h][w]` -> `[t][h][w][c]`.
pub fn to_nhwc<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.permute(&[0, 2, 3, 1])
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.cfg;
        let d = c.d_model;
        init::conv3(store, rng, "enc.conv_in", c.in_channels, d);
        for i in 0..c.down_blocks {
            init::conv3(store, rng, &format!("enc.down{i}"), d, d);
            init::linear(store, rng, &format!("enc.up{i}"), d, d);
        }
        for l in 0..c.n_layers {
            let p = format!("enc.tf{l}");
            init::layer_norm(store, &format!("{p}.ln1"), d);
            for m in ["q", "k", "v", "o"] {
                init::linear(store, rng, &format!("{p}.{m}"), d, d);
            }
            init::layer_norm(store, &format!("{p}.ln2"), d);
            init::linear(store, rng, &format!("{p}.ff1"), d, c.d_hidden);
            init::linear(store, rng, &format!("{p}.ff2"), c.d_hidden, d);
        }
        init::layer_norm(store, "enc.tf_norm", d);
        store.insert("enc.proj.queries", init::trunc_normal(rng, &[c.n_q, d], 0.02));
        store.insert("enc.proj.w1", init::trunc_normal(rng, &[d, d], 0.02));
    }

    fn check_input(&self, x: &Tensor<impl Scalar>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 {
            return shape_err(format!("encoder input must be [t][c][h][w], got {:?}", s));
        }
        if s[1] != self.cfg.in_channels {
            return shape_err(format!("encoder expects {} channels, got {}", self.cfg.in_channels, s[1]));
        }
        let m = 1usize << self.cfg.down_blocks;
        if s[2] % m != 0 || s[3] % m != 0 {
            return shape_err(format!("spatial size {}x{} not divisible by {}", s[2], s[3], m));
        }
        if s[0] == 0 {
            return shape_err("empty series");
        }
        Ok(())
    }

    /// Spectral-spatial-temporal features of one series: `[h*w, t, d_model]`.
    pub fn sste<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>, delta: &[i64]) -> Result<Var> {
        self.check_input(x)?;
        let (t, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        if delta.len() != t {
            return shape_err(format!("{} day offsets for {} dates", delta.len(), t));
        }
        let d = self.cfg.d_model;
        let input = ctx.g.constant(to_nhwc(x)?);

        // per-date U-Net, shared across dates
        let f0 = ctx.conv3(input, "enc.conv_in")?;
        let f0 = ctx.g.relu(f0);
        let mut skips = vec![f0];
        let mut cur = f0;
        for i in 0..self.cfg.down_blocks {
            let y = ctx.conv3(cur, &format!("enc.down{i}"))?;
            let y = ctx.g.relu(y);
            let y = ctx.g.add(cur, y)?;
            cur = ctx.g.avg_pool2(y)?;
            skips.push(cur);
        }
        for i in (0..self.cfg.down_blocks).rev() {
            let up = ctx.g.upsample2(cur)?;
            let u = ctx.g.add(up, skips[i])?;
            let y = ctx.linear_last(u, &format!("enc.up{i}"))?;
            let y = ctx.g.relu(y);
            cur = ctx.g.add(u, y)?;
        }

        // tokens per pixel plus the day-offset code
        let pe = positional_encoding::<T>(delta, d, self.cfg.tau)?;
        let mut pe_full = Vec::with_capacity(t * h * w * d);
        for ti in 0..t {
            let row = &pe.data()[ti * d..(ti + 1) * d];
            for _ in 0..h * w {
                pe_full.extend_from_slice(row);
            }
        }
        let pe = ctx.g.constant(Tensor::from_vec(&[t, h, w, d], pe_full)?);
        let tokens = ctx.g.add(cur, pe)?;
        let tokens = ctx.g.permute(tokens, &[1, 2, 0, 3])?;
        let mut x = ctx.g.reshape(tokens, &[h * w * t, d])?;
        for l in 0..self.cfg.n_layers {
            x = self.transformer_layer(ctx, x, h * w, t, l)?;
        }
        let x = ctx.layer_norm(x, "enc.tf_norm")?;
        ctx.g.reshape(x, &[h * w, t, d])
    }

    fn split_heads<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
        let x = ctx.g.reshape(x, &[p, t, heads, dh])?;
        let x = ctx.g.permute(x, &[0, 2, 1, 3])?;
        ctx.g.reshape(x, &[p * heads, t, dh])
    }

    fn merge_heads<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
        let x = ctx.g.reshape(x, &[p, heads, t, dh])?;
        let x = ctx.g.permute(x, &[0, 2, 1, 3])?;
        ctx.g.reshape(x, &[p * t, heads * dh])
    }

    /// Pre-norm self-attention block over `[p*t, d]` rows grouped by pixel.
    fn transformer_layer<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, p: usize, t: usize, l: usize) -> Result<Var> {
        let name = format!("enc.tf{l}");
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let a = ctx.layer_norm(x, &format!("{name}.ln1"))?;
        let q = ctx.linear(a, &format!("{name}.q"))?;
        let k = ctx.linear(a, &format!("{name}.k"))?;
        let v = ctx.linear(a, &format!("{name}.v"))?;
        let q = Self::split_heads(ctx, q, p, t, heads, dh)?;
        let k = Self::split_heads(ctx, k, p, t, heads, dh)?;
        let v = Self::split_heads(ctx, v, p, t, heads, dh)?;
        let s = ctx.g.matmul_t(q, k, false, true)?;
        let s = ctx.g.scale(s, T::one() / T::from_usize_lossy(dh).sqrt());
        let att = ctx.g.softmax(s);
        let o = ctx.g.matmul(att, v)?;
        let o = Self::merge_heads(ctx, o, p, t, heads, dh)?;
        let o = ctx.linear(o, &format!("{name}.o"))?;
        let x = ctx.g.add(x, o)?;
        let b = ctx.layer_norm(x, &format!("{name}.ln2"))?;
        let f = ctx.linear(b, &format!("{name}.ff1"))?;
        let f = ctx.g.relu(f);
        let f = ctx.linear(f, &format!("{name}.ff2"))?;
        ctx.g.add(x, f)
    }

    /// Temporal projector: `softmax(Q W1ᵀ Ψᵀ / √d_model) Ψ` per pixel and head.
    ///
    /// `psi` is `[p, t, d]`; returns `[p, n_q, d]`.
    pub fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, psi: Var) -> Result<Var> {
        let s = ctx.g.shape(psi).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return shape_err(format!("projector input {:?}", s));
        }
        let (p, t, d) = (s[0], s[1], s[2]);
        let heads = self.cfg.proj_heads;
        let dh = d / heads;
        let n_q = self.cfg.n_q;
        let queries = ctx.p("enc.proj.queries")?;
        let w1 = ctx.p("enc.proj.w1")?;
        let q = ctx.g.matmul_t(queries, w1, false, true)?;
        let q = ctx.g.reshape(q, &[n_q, heads, dh])?;
        let q = ctx.g.permute(q, &[1, 0, 2])?;
        let q = ctx.g.tile(q, p);
        let q = ctx.g.reshape(q, &[p * heads, n_q, dh])?;
        let kv = ctx.g.reshape(psi, &[p * t, d])?;
        let kv = Self::split_heads(ctx, kv, p, t, heads, dh)?;
        let scores = ctx.g.matmul_t(q, kv, false, true)?;
        let scores = ctx.g.scale(scores, T::one() / T::from_usize_lossy(d).sqrt());
        let att = ctx.g.softmax(scores);
        let y = ctx.g.matmul(att, kv)?;
        let y = Self::merge_heads(ctx, y, p, n_q, heads, dh)?;
        ctx.g.reshape(y, &[p, n_q, d])
    }

    /// Latent representation of one series, pixel-major `[h*w, n_q, d]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Sits<T>) -> Result<Var> {
        let dt = delta_t(x.dates())?;
        let psi = self.sste(ctx, x.values(), dt.as_slice())?;
        self.project(ctx, psi)
    }

    /// Inference-mode encoding of a batch; items may have different date counts.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, batch: &[&Sits<T>]) -> Result<LatentRep<T>> {
        let first = batch.first().ok_or_else(|| AliseError::Data("empty batch".into()))?;
        let (h, w) = (first.h(), first.w());
        let mut items = Vec::with_capacity(batch.len());
        for s in batch {
            if (s.h(), s.w()) != (h, w) {
                return shape_err("batch items differ in spatial size");
            }
            let mut ctx = Ctx::inference(store);
            let y = self.forward(&mut ctx, s)?;
            items.push(ctx.g.value(y).clone());
        }
        LatentRep::from_pixel_major(&items, h, w)
    }

    /// SSTE output of a batch with a shared date count, `[b][t][d_model][h][w]`.
    pub fn sste_forward<T: Scalar>(&self, store: &ParamStore<T>, batch: &[&Sits<T>]) -> Result<Tensor<T>> {
        let first = batch.first().ok_or_else(|| AliseError::Data("empty batch".into()))?;
        let (t, h, w, d) = (first.t(), first.h(), first.w(), self.cfg.d_model);
        let mut data = Vec::with_capacity(batch.len() * t * d * h * w);
        for s in batch {
            if (s.t(), s.h(), s.w()) != (t, h, w) {
                return shape_err("sste_forward batch items must share t, h and w");
            }
            let dt = delta_t(s.dates())?;
            let mut ctx = Ctx::inference(store);
            let psi = self.sste(&mut ctx, s.values(), dt.as_slice())?;
            data.extend(ctx.g.value(psi).permute(&[1, 2, 0])?.into_data());
        }
        Tensor::from_vec(&[batch.len(), t, d, h, w], data)
    }

    /// Projector applied to a single pixel's `[t][d_model]` features.
    pub fn temporal_project<T: Scalar>(&self, store: &ParamStore<T>, psi: &Tensor<T>) -> Result<Tensor<T>> {
        if psi.rank() != 2 {
            return shape_err(format!("pixel features must be [t][d], got {:?}", psi.shape()));
        }
        let mut ctx = Ctx::inference(store);
        let shape = [1, psi.shape()[0], psi.shape()[1]];
        let v = ctx.g.constant(psi.clone().reshape(&shape)?);
        let y = self.project(&mut ctx, v)?;
        ctx.g.value(y).clone().reshape(&[self.cfg.n_q, self.cfg.d_model])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { in_channels: 3, d_model: 8, n_q: 2, down_blocks: 1, n_layers: 1, n_heads: 2, d_hidden: 8, ..EncoderConfig::default() }
    }

    fn rand_series(rng: &mut ChaCha8Rng, t: usize, c: usize, hw: usize) -> Sits<f64> {
        let d0 = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap();
        let dates = (0..t).map(|i| d0 + chrono::Duration::days(7 * i as i64 + rng.random_range(0..5))).collect();
        let vals = (0..t * c * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        Sits::new(Tensor::from_vec(&[t, c, hw, hw], vals).unwrap(), dates, vec![true; t * hw * hw]).unwrap()
    }

    fn setup(cfg: EncoderConfig) -> (Encoder, ParamStore<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut rng);
        (enc, store, rng)
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding::<f64>(&[0, 17, 17, 2500], 8, 10_000.0).unwrap();
        for j in 0..4 {
            assert_eq!(pe.at(&[0, 2 * j]), 0.0);
            assert_eq!(pe.at(&[0, 2 * j + 1]), 1.0);
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.data()[8..16], pe.data()[16..24]);
        assert!(positional_encoding::<f64>(&[1], 7, 10_000.0).is_err());
    }

    #[test]
    fn sste_shape_and_channel_check() {
        let (enc, store, mut rng) = setup(tiny_cfg());
        let a = rand_series(&mut rng, 5, 3, 4);
        let b = rand_series(&mut rng, 5, 3, 4);
        let out = enc.sste_forward(&store, &[&a, &b]).unwrap();
        assert_eq!(out.shape(), &[2, 5, 8, 4, 4]);
        let wrong = rand_series(&mut rng, 5, 2, 4);
        assert!(enc.sste_forward(&store, &[&wrong]).is_err());
    }

    #[test]
    fn sste_is_permutation_equivariant_in_time() {
        let (enc, store, mut rng) = setup(tiny_cfg());
        let s = rand_series(&mut rng, 4, 3, 4);
        let dt = delta_t(s.dates()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let xp = s.values().permute(&[0, 1, 2, 3]).unwrap();
        let mut permuted = Vec::new();
        let img = 3 * 16;
        for &p in &perm {
            permuted.extend_from_slice(&xp.data()[p * img..(p + 1) * img]);
        }
        let xperm = Tensor::from_vec(&[4, 3, 4, 4], permuted).unwrap();
        let dperm: Vec<i64> = perm.iter().map(|&p| dt.0[p]).collect();
        let mut c1 = Ctx::inference(&store);
        let y1 = enc.sste(&mut c1, s.values(), &dt.0).unwrap();
        let mut c2 = Ctx::inference(&store);
        let y2 = enc.sste(&mut c2, &xperm, &dperm).unwrap();
        let (a, b) = (c1.g.value(y1), c2.g.value(y2));
        for px in 0..16 {
            for (k, &p) in perm.iter().enumerate() {
                for ch in 0..8 {
                    assert!((a.at(&[px, p, ch]) - b.at(&[px, k, ch])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn projector_single_date_and_duplicates() {
        let (enc, store, mut rng) = setup(tiny_cfg());
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let one = Tensor::from_vec(&[1, 8], v.clone()).unwrap();
        let y = enc.temporal_project(&store, &one).unwrap();
        for q in 0..2 {
            for ch in 0..8 {
                assert!((y.at(&[q, ch]) - v[ch]).abs() < 1e-12);
            }
        }
        let mut twice = v.clone();
        twice.extend(&v);
        let y2 = enc.temporal_project(&store, &Tensor::from_vec(&[2, 8], twice).unwrap()).unwrap();
        for q in 0..2 {
            for ch in 0..8 {
                assert!((y2.at(&[q, ch]) - v[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_is_aligned_and_batch_independent() {
        let (enc, store, mut rng) = setup(tiny_cfg());
        let a = rand_series(&mut rng, 5, 3, 4);
        let b = rand_series(&mut rng, 9, 3, 4);
        let out = enc.encode(&store, &[&a, &b, &a]).unwrap();
        assert_eq!(out.y.shape(), &[3, 2, 8, 4, 4]);
        let n = 2 * 8 * 16;
        assert_eq!(out.y.data()[..n], out.y.data()[2 * n..3 * n]);
        assert!(out.y.all_finite());
        let back = LatentRep::from_pixel_major(&[out.pixel_major(1).unwrap()], 4, 4).unwrap();
        assert_eq!(back.y.data(), &out.y.data()[n..2 * n]);
    }

    #[test]
    fn default_config_shape() {
        let cfg = EncoderConfig { down_blocks: 1, n_layers: 1, ..EncoderConfig::default() };
        let (enc, store, mut rng) = setup(cfg);
        let s = rand_series(&mut rng, 3, 10, 4).cast::<f64>();
        let out = enc.encode(&store, &[&s]).unwrap();
        assert_eq!(out.y.shape(), &[1, 10, 64, 4, 4]);
    }
}
