//! Temporally intertwined view generation.
//!
//! The usable prefix of a series is cut into `n_w` windows of `t_w` dates;
//! even windows form view A, odd windows view B.

use crate::error::{AliseError, Result};
use crate::scalar::Scalar;
use crate::sits::Sits;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<T> {
    pub view_a: Sits<T>,
    pub view_b: Sits<T>,
    pub idx_a: Vec<usize>,
    pub idx_b: Vec<usize>,
    pub t_w: usize,
    pub n_w: usize,
}

/// Returns `(n_w, usable_t)`: the largest even window count fitting in `t`.
pub fn split_windows(t: usize, t_w: usize) -> Result<(usize, usize)> {
    if t_w == 0 {
        return Err(AliseError::Config("window length t_w must be positive".into()));
    }
    if t < 2 * t_w {
        return Err(AliseError::Data(format!("t={} is shorter than two windows of {}", t, t_w)));
    }
    let n_w = (t / t_w) & !1;
    Ok((n_w, n_w * t_w))
}

pub fn interleave(n_w: usize, t_w: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_w % 2 != 0 {
        return Err(AliseError::Data(format!("window count {} is odd", n_w)));
    }
    let mut a = Vec::with_capacity(n_w * t_w / 2);
    let mut b = Vec::with_capacity(n_w * t_w / 2);
    for i in 0..n_w / 2 {
        a.extend(2 * i * t_w..(2 * i + 1) * t_w);
        b.extend((2 * i + 1) * t_w..(2 * i + 2) * t_w);
    }
    Ok((a, b))
}

pub fn make_views<T: Scalar>(s: &Sits<T>, t_w: usize) -> Result<ViewPair<T>> {
    let (n_w, _) = split_windows(s.t(), t_w)?;
    let (idx_a, idx_b) = interleave(n_w, t_w)?;
    Ok(ViewPair { view_a: s.select(&idx_a)?, view_b: s.select(&idx_b)?, idx_a, idx_b, t_w, n_w })
}
