//! Dataset splits, normalization and spatial cropping for the training loops.

use rand::Rng;

use crate::error::{AliseError, Result};
use crate::scalar::Scalar;
use crate::sits::{compute_norm_stats, io, robust_normalize, synth_generate, LabeledSits, NormStats, Sits};
use crate::train::config::RunConfig;

/// Normalized train/val/test series plus the statistics fitted on train.
#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: Vec<LabeledSits<T>>,
    pub val: Vec<LabeledSits<T>>,
    pub test: Vec<LabeledSits<T>>,
    pub stats: NormStats,
}

/// Data seed of split `k` (0 train, 1 val, 2 test).
pub fn split_seed(data_seed: u64, k: u64) -> u64 {
    data_seed.wrapping_mul(1_000_003).wrapping_add(k)
}

/// Raw (unnormalized) splits, generated or read from `data_dir`.
pub fn raw_splits(cfg: &RunConfig) -> Result<[Vec<LabeledSits<f32>>; 3]> {
    let t = &cfg.train;
    if let Some(dir) = &t.data_dir {
        let read = |name: &str| -> Result<Vec<LabeledSits<f32>>> {
            let path = dir.join(name);
            if !path.is_dir() {
                return Ok(Vec::new());
            }
            io::read_dataset(&path)
        };
        let train = read("train")?;
        if train.is_empty() {
            return Err(AliseError::Data(format!("no training series under {}", dir.join("train").display())));
        }
        return Ok([train, read("val")?, read("test")?]);
    }
    let gen = |n: usize, k: u64| {
        let sc = crate::sits::SynthConfig { n_series: n, ..cfg.synth.clone() };
        synth_generate(&sc, split_seed(t.data_seed, k))
    };
    Ok([gen(t.n_train, 0)?, gen(t.n_val, 1)?, gen(t.n_test, 2)?])
}

fn normalize_all<T: Scalar>(items: Vec<LabeledSits<f32>>, stats: &NormStats) -> Result<Vec<LabeledSits<T>>> {
    items
        .into_iter()
        .map(|l| {
            Ok(LabeledSits {
                sits: robust_normalize(&l.sits, stats)?.cast(),
                labels: l.labels,
                change: l.change,
                first_year: l.first_year,
            })
        })
        .collect()
}

/// Loads the splits and normalizes them with statistics fitted on train only.
pub fn load_splits<T: Scalar>(cfg: &RunConfig) -> Result<Splits<T>> {
    let [train, val, test] = raw_splits(cfg)?;
    let stats = compute_norm_stats(&train.iter().map(|l| &l.sits).collect::<Vec<_>>())?;
    log::info!("normalization median {:?} iqr {:?}", stats.median, stats.iqr);
    Ok(Splits {
        train: normalize_all(train, &stats)?,
        val: normalize_all(val, &stats)?,
        test: normalize_all(test, &stats)?,
        stats,
    })
}

/// Random `crop × crop` window, or the series itself when it already fits.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(s: &Sits<T>, crop: usize, rng: &mut R) -> Result<Sits<T>> {
    if s.h() == crop && s.w() == crop {
        return Ok(s.clone());
    }
    check_fits(s, crop)?;
    let i0 = rng.random_range(0..=s.h() - crop);
    let j0 = rng.random_range(0..=s.w() - crop);
    s.crop(i0, j0, crop)
}

/// Centered window and its pixel offset.
pub fn center_crop<T: Scalar>(s: &Sits<T>, crop: usize) -> Result<(Sits<T>, usize, usize)> {
    if s.h() == crop && s.w() == crop {
        return Ok((s.clone(), 0, 0));
    }
    check_fits(s, crop)?;
    let (i0, j0) = ((s.h() - crop) / 2, (s.w() - crop) / 2);
    Ok((s.crop(i0, j0, crop)?, i0, j0))
}

fn check_fits<T: Scalar>(s: &Sits<T>, crop: usize) -> Result<()> {
    if s.h() < crop || s.w() < crop {
        return Err(AliseError::Data(format!("series {}x{} smaller than crop {}", s.h(), s.w(), crop)));
    }
    Ok(())
}

/// Crops a `[h*w]` label map with the same window.
pub fn crop_labels(labels: &[u8], w: usize, i0: usize, j0: usize, crop: usize) -> Vec<u8> {
    (0..crop).flat_map(|i| labels[(i0 + i) * w + j0..(i0 + i) * w + j0 + crop].iter().copied()).collect()
}

/// One labelled single-year item for probing and change detection.
#[derive(Clone, Debug)]
pub struct YearItem<T> {
    pub sits: Sits<T>,
    pub labels: Vec<u8>,
}

/// Every labelled year of every series, center-cropped.
pub fn year_items<T: Scalar>(series: &[LabeledSits<T>], crop: usize) -> Result<Vec<YearItem<T>>> {
    let mut out = Vec::new();
    for l in series {
        for y in 0..l.years() {
            let (s, labels) = l.year_view(y)?;
            let w = s.w();
            let (s, i0, j0) = center_crop(&s, crop)?;
            out.push(YearItem { labels: crop_labels(labels, w, i0, j0, crop), sits: s });
        }
    }
    Ok(out)
}
