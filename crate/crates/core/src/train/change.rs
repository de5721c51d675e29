//! Training-free change detection between two labelled years.

use crate::autodiff::IGNORE_LABEL;
use crate::downstream::{auc_roc, change_map, gf_change_map, ChangeMap};
use crate::error::{AliseError, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::sits::LabeledSits;
use crate::train::data::{center_crop, crop_labels};
use crate::train::pretrain::Model;

#[derive(Clone, Debug)]
pub struct ChangeReport<T> {
    pub auc_latent: f64,
    pub auc_gf: f64,
    /// Non-background pixels scored.
    pub n_pixels: usize,
    pub n_changed: usize,
    /// Per series: latent distance map and gap-filled distance map.
    pub maps: Vec<(ChangeMap<T>, ChangeMap<T>)>,
}

pub const CHANGE_CSV_HEADER: &str = "auc_latent,auc_gf,n_pixels,n_changed";

impl<T> ChangeReport<T> {
    pub fn csv(&self) -> String {
        format!("{CHANGE_CSV_HEADER}\n{},{},{},{}\n", self.auc_latent, self.auc_gf, self.n_pixels, self.n_changed)
    }
}

/// Scores year 1 against year 2 of every series, ignoring background pixels.
pub fn change_detection<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    series: &[LabeledSits<T>],
    crop: usize,
    gf_period: usize,
) -> Result<ChangeReport<T>> {
    let mut latent = Vec::new();
    let mut gf = Vec::new();
    let mut truth = Vec::new();
    let mut maps = Vec::new();
    for l in series {
        if l.years() < 2 {
            return Err(AliseError::Data("change detection needs two labelled years".into()));
        }
        let (s1, _) = l.year_view(0)?;
        let (s2, _) = l.year_view(1)?;
        let w = s1.w();
        let (s1, i0, j0) = center_crop(&s1, crop)?;
        let (s2, _, _) = center_crop(&s2, crop)?;
        let y1 = model.enc.encode(store, &[&s1])?;
        let y2 = model.enc.encode(store, &[&s2])?;
        let d = change_map::<T>(&y1, &y2)?.remove(0);
        let g = gf_change_map(&s1, &s2, gf_period)?;
        let l1 = crop_labels(&l.labels[0], w, i0, j0, crop);
        let l2 = crop_labels(&l.labels[1], w, i0, j0, crop);
        let ch = crop_labels(&l.change.iter().map(|&c| c as u8).collect::<Vec<_>>(), w, i0, j0, crop);
        for p in 0..crop * crop {
            if l1[p] != IGNORE_LABEL && l2[p] != IGNORE_LABEL {
                latent.push(d.d.data()[p].to_f64_lossy());
                gf.push(g.d.data()[p].to_f64_lossy());
                truth.push(ch[p] == 1);
            }
        }
        maps.push((d, g));
    }
    let n_changed = truth.iter().filter(|&&c| c).count();
    Ok(ChangeReport {
        auc_latent: auc_roc(&latent, &truth)?,
        auc_gf: auc_roc(&gf, &truth)?,
        n_pixels: truth.len(),
        n_changed,
        maps,
    })
}
