//! Irregular satellite image time series: containers, calendar offsets, robust
//! normalization, consecutive-date sampling and the synthetic generator.

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::IGNORE_LABEL;
use crate::error::{AliseError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Origin of the day offsets fed to the positional encoding.
pub fn reference_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2014, 3, 3).expect("valid reference date")
}

/// Sentinel-2 bands at 10 m and 20 m resolution.
pub const BAND_NAMES: [&str; 10] = ["B2", "B3", "B4", "B8", "B5", "B6", "B7", "B8A", "B11", "B12"];

/// One irregular time series: values `[t][c][h][w]`, `t` dates and a `[t][h][w]` validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sits<T> {
    values: Tensor<T>,
    dates: Vec<NaiveDate>,
    validity: Vec<bool>,
}

impl<T: Scalar> Sits<T> {
    pub fn new(values: Tensor<T>, dates: Vec<NaiveDate>, validity: Vec<bool>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(AliseError::Shape(format!("values must be [t][c][h][w], got {:?}", values.shape())));
        }
        let s = values.shape();
        if s[0] == 0 {
            return Err(AliseError::Data("a series needs at least one date".into()));
        }
        if dates.len() != s[0] {
            return Err(AliseError::Shape(format!("{} dates for {} acquisitions", dates.len(), s[0])));
        }
        if validity.len() != s[0] * s[2] * s[3] {
            return Err(AliseError::Shape(format!(
                "validity has {} entries, expected {}",
                validity.len(),
                s[0] * s[2] * s[3]
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AliseError::Date("dates must be strictly increasing".into()));
        }
        Ok(Self { values, dates, validity })
    }

    pub fn t(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn validity_mut(&mut self) -> &mut [bool] {
        &mut self.validity
    }

    pub fn is_valid(&self, t: usize, i: usize, j: usize) -> bool {
        self.validity[(t * self.h() + i) * self.w() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.values.all_finite()
    }

    /// Sub-series made of the acquisitions at `idx` (must be strictly increasing).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(AliseError::Data("empty date selection".into()));
        }
        if idx.iter().any(|&i| i >= self.t()) {
            return Err(AliseError::Data(format!("date index out of range for t={}", self.t())));
        }
        let (c, h, w) = (self.c(), self.h(), self.w());
        let img = c * h * w;
        let px = h * w;
        let mut vals = Vec::with_capacity(idx.len() * img);
        let mut valid = Vec::with_capacity(idx.len() * px);
        for &i in idx {
            vals.extend_from_slice(&self.values.data()[i * img..(i + 1) * img]);
            valid.extend_from_slice(&self.validity[i * px..(i + 1) * px]);
        }
        let dates = idx.iter().map(|&i| self.dates[i]).collect();
        Self::new(Tensor::from_vec(&[idx.len(), c, h, w], vals)?, dates, valid)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(&idx)
    }

    /// Acquisitions falling in calendar year `year`.
    pub fn year(&self, year: i32) -> Result<Self> {
        let idx: Vec<usize> = (0..self.t()).filter(|&i| self.dates[i].year() == year).collect();
        if idx.is_empty() {
            return Err(AliseError::Data(format!("no acquisition in {}", year)));
        }
        self.select(&idx)
    }

    /// Spatial window `[i0, i0+size) x [j0, j0+size)`.
    pub fn crop(&self, i0: usize, j0: usize, size: usize) -> Result<Self> {
        if i0 + size > self.h() || j0 + size > self.w() {
            return Err(AliseError::Shape(format!(
                "crop {}+{} x {}+{} outside {}x{}",
                i0,
                size,
                j0,
                size,
                self.h(),
                self.w()
            )));
        }
        let (t, c, h, w) = (self.t(), self.c(), self.h(), self.w());
        let mut vals = Vec::with_capacity(t * c * size * size);
        let mut valid = Vec::with_capacity(t * size * size);
        for ti in 0..t {
            for ci in 0..c {
                for i in i0..i0 + size {
                    let o = ((ti * c + ci) * h + i) * w;
                    vals.extend_from_slice(&self.values.data()[o + j0..o + j0 + size]);
                }
            }
            for i in i0..i0 + size {
                let o = (ti * h + i) * w;
                valid.extend_from_slice(&self.validity[o + j0..o + j0 + size]);
            }
        }
        Self::new(Tensor::from_vec(&[t, c, size, size], vals)?, self.dates.clone(), valid)
    }

    pub fn cast<U: Scalar>(&self) -> Sits<U> {
        Sits { values: self.values.cast(), dates: self.dates.clone(), validity: self.validity.clone() }
    }
}

/// Day offsets of each acquisition from [`reference_date`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeltaT(pub Vec<i64>);

impl DeltaT {
    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn delta_t(dates: &[NaiveDate]) -> Result<DeltaT> {
    let r = reference_date();
    dates
        .iter()
        .map(|d| {
            let days = d.signed_duration_since(r).num_days();
            if days < 0 {
                Err(AliseError::Date(format!("{} precedes the reference date {}", d, r)))
            } else {
                Ok(days)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DeltaT)
}

/// Per-year class maps plus the year-1 vs year-2 change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSits<T> {
    pub sits: Sits<T>,
    /// `[years][h*w]`, [`IGNORE_LABEL`] marks background.
    pub labels: Vec<Vec<u8>>,
    /// `[h*w]`
    pub change: Vec<bool>,
    pub first_year: i32,
}

impl<T: Scalar> LabeledSits<T> {
    pub fn years(&self) -> usize {
        self.labels.len()
    }

    /// Series restricted to one labelled year, with that year's labels.
    pub fn year_view(&self, year_index: usize) -> Result<(Sits<T>, &[u8])> {
        let labels = self
            .labels
            .get(year_index)
            .ok_or_else(|| AliseError::Data(format!("no labels for year index {}", year_index)))?;
        Ok((self.sits.year(self.first_year + year_index as i32)?, labels))
    }
}

pub fn change_from_labels(y1: &[u8], y2: &[u8]) -> Vec<bool> {
    y1.iter()
        .zip(y2)
        .map(|(&a, &b)| a != IGNORE_LABEL && b != IGNORE_LABEL && a != b)
        .collect()
}

/// Per-channel robust statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
}

fn quantile_sorted(v: &[f32], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] as f64 * (1.0 - frac) + v[hi] as f64 * frac
}

/// Median and inter-quartile range per channel over the valid pixels of `series`.
pub fn compute_norm_stats<T: Scalar>(series: &[&Sits<T>]) -> Result<NormStats> {
    let c = series.first().map(|s| s.c()).ok_or_else(|| AliseError::Data("no series for statistics".into()))?;
    let mut median = Vec::with_capacity(c);
    let mut iqr = Vec::with_capacity(c);
    for ch in 0..c {
        let mut vals: Vec<f32> = Vec::new();
        for s in series {
            if s.c() != c {
                return Err(AliseError::Shape(format!("channel count {} vs {}", s.c(), c)));
            }
            let (h, w) = (s.h(), s.w());
            for t in 0..s.t() {
                let base = (t * c + ch) * h * w;
                for p in 0..h * w {
                    if s.validity[t * h * w + p] {
                        vals.push(s.values.data()[base + p].to_f64_lossy() as f32);
                    }
                }
            }
        }
        if vals.is_empty() {
            return Err(AliseError::Data(format!("channel {} has no valid pixel", ch)));
        }
        vals.sort_by(f32::total_cmp);
        median.push(quantile_sorted(&vals, 0.5));
        iqr.push(quantile_sorted(&vals, 0.75) - quantile_sorted(&vals, 0.25));
    }
    Ok(NormStats { median, iqr })
}

/// `(x − median) / iqr` per channel.
pub fn robust_normalize<T: Scalar>(raw: &Sits<T>, stats: &NormStats) -> Result<Sits<T>> {
    if stats.median.len() != raw.c() || stats.iqr.len() != raw.c() {
        return Err(AliseError::Shape(format!("stats for {} channels, series has {}", stats.median.len(), raw.c())));
    }
    if let Some(ch) = stats.iqr.iter().position(|&q| q.is_nan() || q <= 0.0) {
        return Err(AliseError::ZeroIqr { channel: ch });
    }
    let (c, hw) = (raw.c(), raw.h() * raw.w());
    let mut out = raw.clone();
    for (k, chunk) in out.values.data_mut().chunks_mut(hw).enumerate() {
        let ch = k % c;
        let m = T::lit(stats.median[ch]);
        let q = T::lit(stats.iqr[ch]);
        for v in chunk {
            *v = (*v - m) / q;
        }
    }
    if !out.all_finite() {
        return Err(AliseError::Data("normalized values are not finite".into()));
    }
    Ok(out)
}

/// `n` consecutive acquisitions starting at a uniformly drawn position.
pub fn select_consecutive_with<T: Scalar, R: Rng + ?Sized>(s: &Sits<T>, n: usize, rng: &mut R) -> Result<Sits<T>> {
    if n == 0 || s.t() < n {
        return Err(AliseError::Data(format!("cannot select {} consecutive dates from {}", n, s.t())));
    }
    let start = rng.random_range(0..=s.t() - n);
    s.slice(start, n)
}

pub fn select_consecutive<T: Scalar>(s: &Sits<T>, n: usize, seed: u64) -> Result<Sits<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select_consecutive_with(s, n, &mut rng)
}

/// Parameters of the synthetic labelled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_series: usize,
    pub size: usize,
    pub n_classes: usize,
    pub channels: usize,
    /// Acquisitions per year, inclusive range.
    pub dates_min: usize,
    pub dates_max: usize,
    pub years: usize,
    pub start_year: i32,
    pub change_rate: f64,
    pub cloud_rate: f64,
    pub background_rate: f64,
    pub noise_std: f64,
    pub parcel_min: usize,
    pub parcel_max: usize,
    /// Std (days) of the per-parcel, per-year phenology shift.
    pub parcel_jitter: f64,
    /// Std (days) of the shift shared by all parcels of one series-year.
    pub year_jitter: f64,
    /// Half-width of the uniform per-parcel amplitude multiplier around 1.
    pub amp_jitter: f64,
    /// Seeds the class profiles; keep it fixed across splits.
    pub profile_seed: u64,
    /// Longest window length the data must support for view generation.
    pub t_w_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_series: 200,
            size: 16,
            n_classes: 5,
            channels: 10,
            dates_min: 12,
            dates_max: 18,
            years: 2,
            start_year: 2017,
            change_rate: 0.3,
            cloud_rate: 0.25,
            background_rate: 0.1,
            noise_std: 0.03,
            parcel_min: 3,
            parcel_max: 6,
            parcel_jitter: 10.0,
            year_jitter: 12.0,
            amp_jitter: 0.2,
            profile_seed: 7,
            t_w_max: 5,
        }
    }
}

/// Double-logistic seasonal response in `[0, 1]`.
fn double_logistic(doy: f64, onset: f64, senescence: f64, r1: f64, r2: f64) -> f64 {
    1.0 / (1.0 + (-(doy - onset) / r1).exp()) - 1.0 / (1.0 + (-(doy - senescence) / r2).exp())
}

#[derive(Clone, Debug)]
struct ClassProfile {
    onset: f64,
    senescence: f64,
    r1: f64,
    r2: f64,
    base: Vec<f64>,
    amp: Vec<f64>,
}

impl ClassProfile {
    fn value(&self, band: usize, doy: f64, shift: f64, amp_mult: f64) -> f64 {
        let s = double_logistic(doy - shift, self.onset, self.senescence, self.r1, self.r2);
        self.base[band] + amp_mult * self.amp[band] * s
    }
}

/// Signed vegetation response per band (visible and SWIR drop, red-edge/NIR rise).
const BAND_SIGN: [f64; 10] = [-0.3, -0.4, -1.0, 1.0, -0.2, 0.7, 0.9, 1.0, -0.6, -0.8];

fn class_profiles(cfg: &SynthConfig) -> Vec<ClassProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.profile_seed);
    let k = cfg.n_classes;
    // evenly spread onsets, then shuffled so class ids carry no ordering
    let mut onsets: Vec<f64> = (0..k)
        .map(|i| 70.0 + (i as f64 + rng.random_range(-0.2..0.2)) * 150.0 / k as f64)
        .collect();
    onsets.shuffle(&mut rng);
    onsets
        .into_iter()
        .map(|onset| {
            let len = rng.random_range(70.0..120.0);
            let base: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.08..0.25)).collect();
            let scale = rng.random_range(0.8..1.0);
            let amp = (0..cfg.channels)
                .map(|b| {
                    let sign = BAND_SIGN.get(b).copied().unwrap_or(0.5);
                    scale * 0.3 * sign * rng.random_range(0.8..1.2)
                })
                .collect();
            ClassProfile {
                onset,
                senescence: onset + len,
                r1: rng.random_range(6.0..12.0),
                r2: rng.random_range(6.0..12.0),
                base,
                amp,
            }
        })
        .collect()
}

/// Rectangular parcels from random row/column cuts; returns the parcel id of each pixel.
fn parcel_map<R: Rng + ?Sized>(size: usize, pmin: usize, pmax: usize, rng: &mut R) -> (Vec<usize>, usize) {
    let cuts = |rng: &mut R| {
        let mut seg = Vec::new();
        let mut pos = 0;
        while pos < size {
            let len = rng.random_range(pmin..=pmax).min(size - pos);
            seg.push(len);
            pos += len;
        }
        seg
    };
    let rows = cuts(rng);
    let cols = cuts(rng);
    let mut map = vec![0usize; size * size];
    let mut i0 = 0;
    for (ri, &rl) in rows.iter().enumerate() {
        let mut j0 = 0;
        for (ci, &cl) in cols.iter().enumerate() {
            for i in i0..i0 + rl {
                for j in j0..j0 + cl {
                    map[i * size + j] = ri * cols.len() + ci;
                }
            }
            j0 += cl;
        }
        i0 += rl;
    }
    (map, rows.len() * cols.len())
}

fn days_in_year(year: i32) -> i64 {
    let start = NaiveDate::from_ymd_opt(year, 1, 1).expect("year");
    let end = NaiveDate::from_ymd_opt(year + 1, 1, 1).expect("year");
    end.signed_duration_since(start).num_days()
}

pub fn validate_synth(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_classes < 2 {
        return Err(AliseError::Config(format!("need at least 2 classes, got {}", cfg.n_classes)));
    }
    if cfg.n_classes > 254 {
        return Err(AliseError::Config("class ids must fit below the ignore id 255".into()));
    }
    if cfg.size < 4 {
        return Err(AliseError::Config(format!("spatial size {} < 4", cfg.size)));
    }
    if cfg.dates_min > cfg.dates_max {
        return Err(AliseError::Config("dates_min > dates_max".into()));
    }
    if cfg.dates_min < 2 * cfg.t_w_max {
        return Err(AliseError::Config(format!(
            "date count {} below 2·t_w_max = {}",
            cfg.dates_min,
            2 * cfg.t_w_max
        )));
    }
    if cfg.dates_max > 365 {
        return Err(AliseError::Config("more than 365 dates per year".into()));
    }
    if cfg.years == 0 || cfg.channels == 0 {
        return Err(AliseError::Config("years and channels must be positive".into()));
    }
    if cfg.parcel_min == 0 || cfg.parcel_min > cfg.parcel_max {
        return Err(AliseError::Config("invalid parcel size range".into()));
    }
    for (name, p) in [
        ("change_rate", cfg.change_rate),
        ("cloud_rate", cfg.cloud_rate),
        ("background_rate", cfg.background_rate),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(AliseError::Config(format!("{} must lie in [0, 1], got {}", name, p)));
        }
    }
    if cfg.start_year < 2015 {
        return Err(AliseError::Config("start_year must not precede the reference date".into()));
    }
    Ok(())
}

/// Generates `cfg.n_series` labelled series; identical `(cfg, seed)` give identical output.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<LabeledSits<f32>>> {
    validate_synth(cfg)?;
    let profiles = class_profiles(cfg);
    (0..cfg.n_series)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            synth_one(cfg, &profiles, &mut rng)
        })
        .collect()
}

fn synth_one(cfg: &SynthConfig, profiles: &[ClassProfile], rng: &mut ChaCha8Rng) -> Result<LabeledSits<f32>> {
    let (size, c, k) = (cfg.size, cfg.channels, cfg.n_classes);
    let px = size * size;
    let (pmap, n_parcels) = parcel_map(size, cfg.parcel_min, cfg.parcel_max, rng);

    // parcel classes per year
    let mut parcel_class = vec![vec![0u8; n_parcels]; cfg.years];
    let mut background = vec![false; n_parcels];
    let mut bg_profile = Vec::with_capacity(n_parcels);
    for p in 0..n_parcels {
        background[p] = rng.random_bool(cfg.background_rate);
        let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..0.35)).collect();
        bg_profile.push(base);
        let first = rng.random_range(0..k) as u8;
        parcel_class[0][p] = first;
        for y in 1..cfg.years {
            parcel_class[y][p] = if rng.random_bool(cfg.change_rate) {
                let other = rng.random_range(0..k - 1) as u8;
                if other >= first {
                    other + 1
                } else {
                    other
                }
            } else {
                first
            };
        }
    }
    let labels: Vec<Vec<u8>> = (0..cfg.years)
        .map(|y| {
            pmap.iter()
                .map(|&p| if background[p] { IGNORE_LABEL } else { parcel_class[y][p] })
                .collect()
        })
        .collect();
    let change = if cfg.years >= 2 { change_from_labels(&labels[0], &labels[1]) } else { vec![false; px] };

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| AliseError::Config(e.to_string()))?;
    let year_shift = Normal::new(0.0, cfg.year_jitter.max(0.0)).map_err(|e| AliseError::Config(e.to_string()))?;
    let parcel_shift = Normal::new(0.0, cfg.parcel_jitter.max(0.0)).map_err(|e| AliseError::Config(e.to_string()))?;

    let mut dates = Vec::new();
    let mut values = Vec::new();
    let mut validity = Vec::new();
    for y in 0..cfg.years {
        let year = cfg.start_year + y as i32;
        let ndays = days_in_year(year);
        let n_dates = rng.random_range(cfg.dates_min..=cfg.dates_max);
        let mut offsets: Vec<i64> = rand::seq::index::sample(rng, ndays as usize, n_dates)
            .into_iter()
            .map(|d| d as i64)
            .collect();
        offsets.sort_unstable();
        let ys = year_shift.sample(rng);
        let shifts: Vec<f64> = (0..n_parcels).map(|_| ys + parcel_shift.sample(rng)).collect();
        let amp_mult: Vec<f64> = (0..n_parcels).map(|_| 1.0 + cfg.amp_jitter * rng.random_range(-1.0..1.0)).collect();
        let jan1 = NaiveDate::from_ymd_opt(year, 1, 1).expect("year");
        for &off in &offsets {
            let date = jan1 + chrono::Duration::days(off);
            let doy = off as f64 + 1.0;
            dates.push(date);
            let mut img = vec![0f32; c * px];
            for b in 0..c {
                for pix in 0..px {
                    let p = pmap[pix];
                    let v = if background[p] {
                        bg_profile[p][b]
                    } else {
                        profiles[parcel_class[y][p] as usize].value(b, doy, shifts[p], amp_mult[p])
                    };
                    img[b * px + pix] = (v + noise.sample(rng)) as f32;
                }
            }
            let mut valid = vec![true; px];
            if rng.random_bool(cfg.cloud_rate) {
                let n_clouds = rng.random_range(1..=2);
                for _ in 0..n_clouds {
                    let ch = rng.random_range(size / 4..=3 * size / 4).max(1);
                    let cw = rng.random_range(size / 4..=3 * size / 4).max(1);
                    let i0 = rng.random_range(0..=size - ch);
                    let j0 = rng.random_range(0..=size - cw);
                    let brightness = rng.random_range(0.35..0.7);
                    for i in i0..i0 + ch {
                        for j in j0..j0 + cw {
                            let pix = i * size + j;
                            valid[pix] = false;
                            for b in 0..c {
                                img[b * px + pix] = (brightness + noise.sample(rng)) as f32;
                            }
                        }
                    }
                }
            }
            values.extend(img);
            validity.extend(valid);
        }
    }
    let t = dates.len();
    let sits = Sits::new(Tensor::from_vec(&[t, c, size, size], values)?, dates, validity)?;
    Ok(LabeledSits { sits, labels, change, first_year: cfg.start_year })
}

/// Directory-per-series on-disk format: little-endian arrays plus a key=value sidecar.
pub mod io {
    use std::fs;
    use std::io::Write;
    use std::path::Path;

    use chrono::NaiveDate;

    use super::*;

    pub const FORMAT: &str = "alise-sits-v1";

    fn write_f32<T: Scalar>(path: &Path, data: &[T]) -> Result<()> {
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(AliseError::Data(format!("{}: length not a multiple of 4", path.display())));
        }
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    /// Parses `key=value` lines, ignoring blanks and `#` comments.
    pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| AliseError::Config(format!("expected key=value, got `{}`", l)))
            })
            .collect()
    }

    fn get<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| AliseError::Data(format!("metadata key `{}` missing", key)))
    }

    fn get_usize(kv: &[(String, String)], key: &str) -> Result<usize> {
        get(kv, key)?.parse().map_err(|_| AliseError::Data(format!("metadata `{}` not an integer", key)))
    }

    /// Writes one series directory: `values.f32`, `validity.u8`, `labels.u8`, `change.u8`, `meta.txt`.
    pub fn write_labeled<T: Scalar>(dir: &Path, s: &LabeledSits<T>, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let sits = &s.sits;
        write_f32(&dir.join("values.f32"), sits.values().data())?;
        fs::write(dir.join("validity.u8"), sits.validity().iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        fs::write(dir.join("labels.u8"), s.labels.concat())?;
        fs::write(dir.join("change.u8"), s.change.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        let mut meta = fs::File::create(dir.join("meta.txt"))?;
        writeln!(meta, "format={}", FORMAT)?;
        writeln!(meta, "t={}", sits.t())?;
        writeln!(meta, "c={}", sits.c())?;
        writeln!(meta, "h={}", sits.h())?;
        writeln!(meta, "w={}", sits.w())?;
        let names: Vec<String> = (0..sits.c())
            .map(|i| BAND_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("C{}", i)))
            .collect();
        writeln!(meta, "channels={}", names.join(","))?;
        let dates: Vec<String> = sits.dates().iter().map(|d| d.format("%Y-%m-%d").to_string()).collect();
        writeln!(meta, "dates={}", dates.join(","))?;
        writeln!(meta, "years={}", s.years())?;
        writeln!(meta, "first_year={}", s.first_year)?;
        writeln!(meta, "seed={}", seed)?;
        writeln!(meta, "layout=values:[t][c][h][w] validity:[t][h][w] labels:[year][h][w] change:[h][w]")?;
        Ok(())
    }

    pub fn read_labeled(dir: &Path) -> Result<LabeledSits<f32>> {
        let kv = parse_kv(&fs::read_to_string(dir.join("meta.txt"))?)?;
        if get(&kv, "format")? != FORMAT {
            return Err(AliseError::Data(format!("{}: unknown format", dir.display())));
        }
        let (t, c, h, w) = (get_usize(&kv, "t")?, get_usize(&kv, "c")?, get_usize(&kv, "h")?, get_usize(&kv, "w")?);
        let years = get_usize(&kv, "years")?;
        let first_year: i32 = get(&kv, "first_year")?
            .parse()
            .map_err(|_| AliseError::Data("first_year not an integer".into()))?;
        let dates = get(&kv, "dates")?
            .split(',')
            .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| AliseError::Date(format!("{}: {}", d, e))))
            .collect::<Result<Vec<_>>>()?;
        let values = read_f32(&dir.join("values.f32"))?;
        let validity: Vec<bool> = fs::read(dir.join("validity.u8"))?.into_iter().map(|b| b != 0).collect();
        let labels_flat = fs::read(dir.join("labels.u8"))?;
        if labels_flat.len() != years * h * w {
            return Err(AliseError::Data("labels.u8 size mismatch".into()));
        }
        let labels = labels_flat.chunks(h * w).map(|c| c.to_vec()).collect();
        let change: Vec<bool> = fs::read(dir.join("change.u8"))?.into_iter().map(|b| b != 0).collect();
        if change.len() != h * w {
            return Err(AliseError::Data("change.u8 size mismatch".into()));
        }
        let sits = Sits::new(Tensor::from_vec(&[t, c, h, w], values)?, dates, validity)?;
        Ok(LabeledSits { sits, labels, change, first_year })
    }

    pub fn write_dataset<T: Scalar>(dir: &Path, series: &[LabeledSits<T>], seed: u64) -> Result<()> {
        for (i, s) in series.iter().enumerate() {
            write_labeled(&dir.join(format!("series_{:05}", i)), s, seed)?;
        }
        Ok(())
    }

    pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledSits<f32>>> {
        let mut entries: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("meta.txt").exists())
            .collect();
        entries.sort();
        entries.iter().map(|p| read_labeled(p)).collect()
    }

    /// Raw float map with a key=value sidecar (predictions, change maps).
    pub fn write_map(path: &Path, shape: &[usize], data: &[f32], extra: &[(&str, String)]) -> Result<()> {
        write_f32(path, data)?;
        let mut meta = fs::File::create(path.with_extension("txt"))?;
        writeln!(meta, "format=alise-map-v1")?;
        writeln!(meta, "dtype=f32le")?;
        writeln!(meta, "shape={}", shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))?;
        for (k, v) in extra {
            writeln!(meta, "{}={}", k, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn toy(t: usize) -> Sits<f32> {
        let dates = (0..t).map(|i| d(2017, 1, 1) + chrono::Duration::days(5 * i as i64)).collect();
        let vals = (0..t * 2 * 4 * 4).map(|x| x as f32).collect();
        Sits::new(Tensor::from_vec(&[t, 2, 4, 4], vals).unwrap(), dates, vec![true; t * 16]).unwrap()
    }

    #[test]
    fn delta_t_examples() {
        assert_eq!(delta_t(&[d(2014, 3, 3)]).unwrap().0, vec![0]);
        assert_eq!(delta_t(&[d(2014, 3, 4)]).unwrap().0, vec![1]);
        // 303 remaining days of 2014 after 2014-03-03, +1 to reach 2015-01-01, then 365 + 366
        let oracle = 303 + 1 + 365 + 366;
        assert_eq!(delta_t(&[d(2017, 1, 1)]).unwrap().0, vec![oracle]);
        assert_eq!(oracle, 1035);
        assert!(delta_t(&[d(2014, 3, 2)]).is_err());
    }

    #[test]
    fn sits_rejects_unsorted_dates() {
        let vals = Tensor::<f32>::zeros(&[2, 1, 1, 1]);
        assert!(Sits::new(vals.clone(), vec![d(2017, 1, 2), d(2017, 1, 1)], vec![true; 2]).is_err());
        assert!(Sits::new(vals, vec![d(2017, 1, 1)], vec![true; 2]).is_err());
    }

    #[test]
    fn select_consecutive_identity_and_replay() {
        let s = toy(10);
        assert_eq!(select_consecutive(&s, 10, 3).unwrap(), s);
        assert_eq!(select_consecutive(&s, 4, 42).unwrap(), select_consecutive(&s, 4, 42).unwrap());
        assert!(select_consecutive(&s, 11, 0).is_err());
    }

    #[test]
    fn select_consecutive_is_uniform() {
        let s = toy(10);
        let mut counts = [0usize; 7];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        for _ in 0..n {
            let sub = select_consecutive_with(&s, 4, &mut rng).unwrap();
            let start = s.dates().iter().position(|&x| x == sub.dates()[0]).unwrap();
            counts[start] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 7.0).abs() < 0.02, "{:?}", counts);
        }
    }

    #[test]
    fn normalize_examples() {
        let s = toy(3);
        let stats = NormStats { median: vec![5.0, 7.0], iqr: vec![2.0, 1.0] };
        let n = robust_normalize(&s, &stats).unwrap();
        assert_eq!(n.values().at(&[1, 0, 2, 3]), (s.values().at(&[1, 0, 2, 3]) - 5.0) / 2.0);

        let flat = Sits::new(Tensor::full(&[2, 2, 2, 2], 3.0f32), vec![d(2017, 1, 1), d(2017, 1, 2)], vec![true; 8]).unwrap();
        let st = NormStats { median: vec![3.0, 2.0], iqr: vec![1.0, 1.0] };
        let out = robust_normalize(&flat, &st).unwrap();
        for ti in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(out.values().at(&[ti, 0, i, j]), 0.0);
                    assert_eq!(out.values().at(&[ti, 1, i, j]), 1.0);
                }
            }
        }
        let bad = NormStats { median: vec![0.0, 0.0], iqr: vec![1.0, 0.0] };
        match robust_normalize(&flat, &bad) {
            Err(AliseError::ZeroIqr { channel }) => assert_eq!(channel, 1),
            other => panic!("expected zero-iqr error, got {:?}", other),
        }
    }

    #[test]
    fn synth_shape_and_change_examples() {
        let cfg = SynthConfig {
            n_series: 1,
            size: 16,
            n_classes: 3,
            dates_min: 20,
            dates_max: 20,
            years: 1,
            ..SynthConfig::default()
        };
        let s = synth_generate(&cfg, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].sits.values().shape(), &[20, 10, 16, 16]);

        let two = SynthConfig { years: 2, change_rate: 0.0, n_series: 3, ..cfg.clone() };
        assert!(synth_generate(&two, 2).unwrap().iter().all(|s| s.change.iter().all(|&c| !c)));

        let all = SynthConfig { years: 2, change_rate: 1.0, background_rate: 0.0, n_series: 3, ..cfg.clone() };
        assert!(synth_generate(&all, 2).unwrap().iter().all(|s| s.change.iter().all(|&c| c)));
    }

    #[test]
    fn synth_rejects_bad_configs() {
        let base = SynthConfig { n_series: 1, ..SynthConfig::default() };
        assert!(synth_generate(&SynthConfig { n_classes: 1, ..base.clone() }, 0).is_err());
        assert!(synth_generate(&SynthConfig { size: 3, ..base.clone() }, 0).is_err());
        assert!(synth_generate(&SynthConfig { dates_min: 9, t_w_max: 5, ..base }, 0).is_err());
    }

    #[test]
    fn synth_labels_respect_class_count() {
        let cfg = SynthConfig { n_series: 4, ..SynthConfig::default() };
        for s in synth_generate(&cfg, 9).unwrap() {
            for y in &s.labels {
                assert!(y.iter().all(|&l| l == IGNORE_LABEL || (l as usize) < cfg.n_classes));
            }
            assert_eq!(s.change, change_from_labels(&s.labels[0], &s.labels[1]));
            assert!(s.sits.all_finite());
            assert!(s.year_view(1).is_ok());
        }
    }
}
