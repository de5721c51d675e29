//! Downstream evaluation: linear probe head, latent and gap-filled change maps,
//! ROC-AUC and F1 metrics.

use chrono::Datelike;
use chrono::NaiveDate;
use rand::Rng;

use crate::autodiff::{Var, IGNORE_LABEL};
use crate::encoder::LatentRep;
use crate::error::{shape_err, AliseError, Result};
use crate::nn::{init, Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::sits::Sits;
use crate::tensor::Tensor;

/// Single affine layer from the `n_q · d_model` pixel features to `k` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub n_q: usize,
    pub d_model: usize,
    pub k: usize,
}

impl ProbeHead {
    pub fn new(n_q: usize, d_model: usize, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(AliseError::Config(format!("a probe needs at least 2 classes, got {}", k)));
        }
        Ok(Self { n_q, d_model, k })
    }

    pub fn in_features(&self) -> usize {
        self.n_q * self.d_model
    }

    /// Number of trainable scalars: `(n_q·d_model + 1)·k`.
    pub fn n_params(&self) -> usize {
        (self.in_features() + 1) * self.k
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        init::linear(store, rng, "head", self.in_features(), self.k);
    }

    /// Pixel-major latent `[p, n_q, d]` to logits `[p, k]`.
    pub fn forward_var<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, y: Var) -> Result<Var> {
        let s = ctx.g.shape(y).to_vec();
        if s.len() != 3 || s[1] != self.n_q || s[2] != self.d_model {
            return shape_err(format!("probe expects [p, {}, {}], got {:?}", self.n_q, self.d_model, s));
        }
        let flat = ctx.g.reshape(y, &[s[0], self.in_features()])?;
        ctx.linear(flat, "head")
    }

    /// Logits `[b][k][h][w]`.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, y: &LatentRep<T>) -> Result<Tensor<T>> {
        let (h, w) = (y.h(), y.w());
        let mut data = Vec::with_capacity(y.batch() * self.k * h * w);
        for b in 0..y.batch() {
            let mut ctx = Ctx::inference(store);
            let v = ctx.g.constant(y.pixel_major(b)?);
            let l = self.forward_var(&mut ctx, v)?;
            data.extend(ctx.g.value(l).permute(&[1, 0])?.into_data());
        }
        Tensor::from_vec(&[y.batch(), self.k, h, w], data)
    }
}

/// Per-pixel argmax of `[k][h*w]`-ordered logits given as `[p, k]` rows.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Non-negative distance map `[h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap<T> {
    pub d: Tensor<T>,
}

/// `d[h][w] = mean over (n_q, d_model) of (y1 − y2)²`, one map per batch item.
pub fn change_map<T: Scalar>(y1: &LatentRep<T>, y2: &LatentRep<T>) -> Result<Vec<ChangeMap<T>>> {
    if y1.y.shape() != y2.y.shape() {
        return shape_err(format!("change_map: {:?} vs {:?}", y1.y.shape(), y2.y.shape()));
    }
    let (b, nq, d, h, w) = (y1.batch(), y1.n_q(), y1.d_model(), y1.h(), y1.w());
    let px = h * w;
    let norm = T::one() / T::from_usize_lossy(nq * d);
    let mut maps = Vec::with_capacity(b);
    for bi in 0..b {
        let mut out = vec![T::zero(); px];
        let base = bi * nq * d * px;
        for f in 0..nq * d {
            let a = &y1.y.data()[base + f * px..base + (f + 1) * px];
            let c = &y2.y.data()[base + f * px..base + (f + 1) * px];
            for ((o, &u), &v) in out.iter_mut().zip(a).zip(c) {
                *o += (u - v) * (u - v);
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        maps.push(ChangeMap { d: Tensor::from_vec(&[h, w], out)? });
    }
    Ok(maps)
}

/// Linearly gap-filled series on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GapFilled<T> {
    /// `[grid][c][h][w]`
    pub values: Tensor<T>,
    /// Grid positions in days after January 1st of the first acquisition's year.
    pub grid: Vec<i64>,
    /// `[c][h][w]`: true where no valid sample existed and zeros were written.
    pub flagged: Vec<bool>,
}

fn year_start(d: NaiveDate) -> NaiveDate {
    NaiveDate::from_ymd_opt(d.year(), 1, 1).expect("january first")
}

/// Interpolates valid samples onto a grid every `period_days` over one year.
///
/// Outside the valid range the nearest valid value is held.
pub fn gapfill<T: Scalar>(s: &Sits<T>, period_days: usize) -> Result<GapFilled<T>> {
    if period_days == 0 {
        return Err(AliseError::Config("gap-filling period must be positive".into()));
    }
    let origin = year_start(s.dates()[0]);
    let days: Vec<i64> = s.dates().iter().map(|d| d.signed_duration_since(origin).num_days()).collect();
    let grid: Vec<i64> = (0..365).step_by(period_days).collect();
    let (t, c, h, w) = (s.t(), s.c(), s.h(), s.w());
    let px = h * w;
    let g = grid.len();
    let mut out = vec![T::zero(); g * c * px];
    let mut flagged = vec![false; c * px];
    for p in 0..px {
        let valid: Vec<usize> = (0..t).filter(|&ti| s.validity()[ti * px + p]).collect();
        for ch in 0..c {
            if valid.is_empty() {
                flagged[ch * px + p] = true;
                continue;
            }
            let val = |ti: usize| s.values().data()[(ti * c + ch) * px + p];
            let mut k = 0;
            for (gi, &gd) in grid.iter().enumerate() {
                while k + 1 < valid.len() && days[valid[k + 1]] <= gd {
                    k += 1;
                }
                let (i0, d0) = (valid[k], days[valid[k]]);
                let v = if gd <= days[valid[0]] {
                    val(valid[0])
                } else if k + 1 >= valid.len() || gd == d0 {
                    val(i0)
                } else {
                    let (i1, d1) = (valid[k + 1], days[valid[k + 1]]);
                    let a = T::lit((gd - d0) as f64 / (d1 - d0) as f64);
                    val(i0) + a * (val(i1) - val(i0))
                };
                out[(gi * c + ch) * px + p] = v;
            }
        }
    }
    if flagged.iter().any(|&f| f) {
        log::warn!("gap-filling: {} pixel-channels without any valid sample", flagged.iter().filter(|&&f| f).count());
    }
    Ok(GapFilled { values: Tensor::from_vec(&[g, c, h, w], out)?, grid, flagged })
}

/// Mean over grid dates and channels of the squared difference of the gap-filled series.
pub fn gf_change_map<T: Scalar>(s1: &Sits<T>, s2: &Sits<T>, period_days: usize) -> Result<ChangeMap<T>> {
    if (s1.c(), s1.h(), s1.w()) != (s2.c(), s2.h(), s2.w()) {
        return shape_err("gap-filled change map needs matching channel and spatial sizes");
    }
    let a = gapfill(s1, period_days)?;
    let b = gapfill(s2, period_days)?;
    let (g, c, h, w) = (a.grid.len(), s1.c(), s1.h(), s1.w());
    let px = h * w;
    let mut out = vec![T::zero(); px];
    for f in 0..g * c {
        for p in 0..px {
            let d = a.values.data()[f * px + p] - b.values.data()[f * px + p];
            out[p] += d * d;
        }
    }
    let norm = T::one() / T::from_usize_lossy(g * c);
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(ChangeMap { d: Tensor::from_vec(&[h, w], out)? })
}

/// Probability that a random positive scores above a random negative (ties count ½).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AliseError::Data("AUC needs both positive and negative samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AliseError::Data("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    /// `None` for classes absent from the truth.
    pub per_class: Vec<Option<f64>>,
    pub macro_f1: f64,
    pub n_pixels: usize,
}

/// Per-class and macro F1 over pixels whose truth is not the ignore id.
pub fn f1_scores(pred: &[u8], truth: &[u8], k: usize) -> Result<F1Report> {
    if pred.len() != truth.len() {
        return shape_err(format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fnn = vec![0usize; k];
    let mut present = vec![false; k];
    let mut n = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        if t == IGNORE_LABEL {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        if t >= k {
            return Err(AliseError::Data(format!("truth class {} outside 0..{}", t, k)));
        }
        n += 1;
        present[t] = true;
        if p == t {
            tp[t] += 1;
        } else {
            fnn[t] += 1;
            if p < k {
                fp[p] += 1;
            }
        }
    }
    if n == 0 {
        return Err(AliseError::Data("no labelled pixel to score".into()));
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            present[c].then(|| {
                let denom = 2 * tp[c] + fp[c] + fnn[c];
                2.0 * tp[c] as f64 / denom as f64
            })
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_f1 = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(F1Report { per_class, macro_f1, n_pixels: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(doy0: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2018, 1, 1).unwrap() + chrono::Duration::days(doy0)
    }

    #[test]
    fn probe_examples() {
        let head = ProbeHead::new(2, 3, 4).unwrap();
        assert_eq!(head.n_params(), (2 * 3 + 1) * 4);
        let mut store = ParamStore::<f64>::new();
        store.insert("head.w", Tensor::zeros(&[6, 4]));
        store.insert("head.b", Tensor::from_vec(&[4], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let y = LatentRep { y: Tensor::full(&[1, 2, 3, 2, 2], 0.7) };
        let logits = head.forward(&store, &y).unwrap();
        assert_eq!(logits.shape(), &[1, 4, 2, 2]);
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(logits.at(&[0, c, i, j]), store.get("head.b").unwrap().data()[c]);
                }
            }
        }
        store.insert("head.w", Tensor::from_vec(&[6, 4], (0..24).map(|x| x as f64 * 0.1).collect()).unwrap());
        let l1 = head.forward(&store, &y).unwrap();
        let y2 = LatentRep { y: y.y.map(|v| 2.0 * v) };
        let l2 = head.forward(&store, &y2).unwrap();
        for (idx, (a, b)) in l1.data().iter().zip(l2.data()).enumerate() {
            let bias = store.get("head.b").unwrap().data()[(idx / 4) % 4];
            assert!(((b - bias) - 2.0 * (a - bias)).abs() < 1e-12);
        }
        assert!(ProbeHead::new(1, 1, 1).is_err());
        let pastis = ProbeHead::new(10, 64, 18).unwrap();
        let y = LatentRep { y: Tensor::zeros(&[1, 10, 64, 2, 2]) };
        let mut store = ParamStore::<f64>::new();
        pastis.init_params(&mut store, &mut rand::rng());
        assert_eq!(pastis.forward(&store, &y).unwrap().shape(), &[1, 18, 2, 2]);
        assert!(head.forward(&store, &y).is_err());
    }

    #[test]
    fn change_map_examples() {
        let y1 = LatentRep { y: Tensor::from_vec(&[1, 2, 2, 1, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap() };
        assert!(change_map(&y1, &y1).unwrap()[0].d.data().iter().all(|&v| v == 0.0));
        let y2 = LatentRep { y: y1.y.map(|v| v + 1.0) };
        assert!(change_map(&y1, &y2).unwrap()[0].d.data().iter().all(|&v| v == 1.0));
        let y3 = LatentRep { y: y1.y.map(|v| v + 2.0) };
        assert!(change_map(&y1, &y3).unwrap()[0].d.data().iter().all(|&v| v == 4.0));
        let bad = LatentRep { y: Tensor::zeros(&[1, 1, 2, 1, 2]) };
        assert!(change_map(&y1, &bad).is_err());
    }

    fn series(days: &[i64], vals: &[f64], valid: &[bool]) -> Sits<f64> {
        let dates = days.iter().map(|&x| d(x)).collect();
        Sits::new(Tensor::from_vec(&[days.len(), 1, 1, 1], vals.to_vec()).unwrap(), dates, valid.to_vec()).unwrap()
    }

    #[test]
    fn gapfill_examples() {
        let g = gapfill(&series(&[3, 40, 100], &[2.0, 2.0, 2.0], &[true; 3]), 5).unwrap();
        assert_eq!(g.grid.len(), 73);
        assert!(g.values.data().iter().all(|&v| v == 2.0));

        let g = gapfill(&series(&[0, 10], &[0.0, 10.0], &[true, true]), 5).unwrap();
        assert_eq!(g.values.data()[1], 5.0);
        assert_eq!(g.values.data()[0], 0.0);
        assert_eq!(g.values.data()[72], 10.0);

        let g = gapfill(&series(&[0, 5, 10], &[0.0, 99.0, 10.0], &[true, false, true]), 5).unwrap();
        assert_eq!(g.values.data()[1], 5.0);

        let g = gapfill(&series(&[0, 5], &[1.0, 2.0], &[false, false]), 5).unwrap();
        assert!(g.flagged[0]);
        assert!(g.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gapfill_reproduces_on_grid_samples() {
        let s = series(&[0, 15, 23, 50, 200], &[0.3, -1.0, 4.0, 2.5, 0.0], &[true, true, false, true, true]);
        let g = gapfill(&s, 5).unwrap();
        for (ti, &day) in [0i64, 15, 50, 200].iter().enumerate() {
            let gi = (day / 5) as usize;
            let want = [0.3, -1.0, 2.5, 0.0][ti];
            assert_eq!(g.values.data()[gi], want);
        }
    }

    #[test]
    fn gf_change_map_examples() {
        let mk = |off: f64| {
            let dates: Vec<NaiveDate> = [10, 90, 200].iter().map(|&x| d(x)).collect();
            let mut v = vec![0.0; 3 * 2];
            for t in 0..3 {
                v[t * 2] = t as f64;
                v[t * 2 + 1] = 1.0 - t as f64 + off;
            }
            Sits::new(Tensor::from_vec(&[3, 2, 1, 1], v).unwrap(), dates, vec![true; 3]).unwrap()
        };
        let a = mk(0.0);
        assert_eq!(gf_change_map(&a, &a, 5).unwrap().d.data(), &[0.0]);
        // offset 0.5 in one of two bands: 0.25 on half the (date, band) cells
        let b = mk(0.5);
        assert!((gf_change_map(&a, &b, 5).unwrap().d.data()[0] - 0.25 / 2.0).abs() < 1e-12);
        assert_eq!(gf_change_map(&a, &b, 5).unwrap(), gf_change_map(&b, &a, 5).unwrap());
    }

    /// Brute force over every positive/negative pair.
    fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auc_oracle(&s, &l), 0.75);
        assert_eq!(auc_roc(&s, &l).unwrap(), 0.75);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        let truth = [0u8, 1, 0, 1, IGNORE_LABEL];
        let r = f1_scores(&truth, &truth, 2).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        let r = f1_scores(&[0, 0, 0, 0, 1], &truth, 2).unwrap();
        assert!((r.per_class[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1], Some(0.0));
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(f1_scores(&[0, 1], &[IGNORE_LABEL, IGNORE_LABEL], 2).is_err());
        // absent class 2 excluded from the macro mean
        let r = f1_scores(&[0, 1, 2], &[0, 1, 1], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert!((r.macro_f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_matches_oracle_and_is_rank_invariant(
            pairs in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc_roc(&scores, &labels).unwrap();
            prop_assert!((a - auc_oracle(&scores, &labels)).abs() < 1e-12);
            let mono: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert!((a - auc_roc(&mono, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn change_map_symmetric_and_quadratic(v in proptest::collection::vec(-2.0f64..2.0, 16), s in 0.1f64..3.0) {
            let y1 = LatentRep { y: Tensor::from_vec(&[1, 2, 2, 1, 2], v[..8].to_vec()).unwrap() };
            let y2 = LatentRep { y: Tensor::from_vec(&[1, 2, 2, 1, 2], v[8..].to_vec()).unwrap() };
            let a = change_map(&y1, &y2).unwrap();
            prop_assert_eq!(&a, &change_map(&y2, &y1).unwrap());
            prop_assert!(a[0].d.data().iter().all(|&x| x >= 0.0));
            let s1 = LatentRep { y: y1.y.map(|x| x * s) };
            let s2 = LatentRep { y: y2.y.map(|x| x * s) };
            let b = change_map(&s1, &s2).unwrap();
            for (x, y) in a[0].d.data().iter().zip(b[0].d.data()) {
                prop_assert!((y - s * s * x).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
