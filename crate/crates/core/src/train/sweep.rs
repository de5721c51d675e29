//! Ablation grids: pre-train and probe every configuration cell.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::train::change::change_detection;
use crate::train::config::RunConfig;
use crate::train::data::Splits;
use crate::train::pretrain::{pretrain, Model};
use crate::train::probe::{train_probe, ProbeMode};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub t_w: usize,
    pub n_q: usize,
    pub w_inv: f64,
    pub w_cov: f64,
    pub w_rec: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    /// Test macro F1 of the linear probe (validation when no test split exists) and change AUC.
    pub result: std::result::Result<(f64, f64), String>,
}

pub const SWEEP_CSV_HEADER: &str = "t_w,n_q,w_inv,w_cov,w_rec,seed,macro_f1,auc,status";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let c = &self.cell;
        let (f1, auc, status) = match &self.result {
            Ok((f1, auc)) => (f1.to_string(), auc.to_string(), "ok".to_string()),
            Err(e) => (String::new(), String::new(), format!("error: {}", e.replace([',', '\n'], ";"))),
        };
        format!("{},{},{},{},{},{},{},{},{}", c.t_w, c.n_q, c.w_inv, c.w_cov, c.w_rec, c.seed, f1, auc, status)
    }
}

fn axis<V: Clone>(values: &[V], base: V) -> Vec<V> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the configured axes, in a fixed order.
pub fn grid_cells(run: &RunConfig) -> Vec<SweepCell> {
    let t = &run.train;
    let g = &t.sweep;
    let mut cells = Vec::new();
    for t_w in axis(&g.t_w, t.t_w) {
        for n_q in axis(&g.n_q, t.n_q) {
            for w_inv in axis(&g.w_inv, t.weights.w_inv) {
                for w_cov in axis(&g.w_cov, t.weights.w_cov) {
                    for w_rec in axis(&g.w_rec, t.weights.w_rec) {
                        for seed in axis(&g.seeds, t.seed) {
                            cells.push(SweepCell { t_w, n_q, w_inv, w_cov, w_rec, seed });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn run_cell<T: Scalar>(run: &RunConfig, cell: &SweepCell, splits: &Splits<T>) -> Result<(f64, f64)> {
    let mut r = run.clone();
    r.train.t_w = cell.t_w;
    r.train.n_q = cell.n_q;
    r.train.weights.w_inv = cell.w_inv;
    r.train.weights.w_cov = cell.w_cov;
    r.train.weights.w_rec = cell.w_rec;
    r.train.seed = cell.seed;
    r.train.sweep = Default::default();
    r.validate()?;
    let channels = splits.train[0].sits.c();
    let model = Model::new(&r.train, channels)?;
    let pre = pretrain(&r, &model, model.init(r.train.seed), &splits.train, &splits.val)?;
    let probe = train_probe(&r, &model, &pre.best, splits, ProbeMode::Linear)?;
    let f1 = probe.test.as_ref().unwrap_or(&probe.val).macro_f1;
    let eval = if splits.test.is_empty() { &splits.val } else { &splits.test };
    let auc = change_detection(&model, &pre.best, eval, r.train.crop, r.train.gf_period)?.auc_latent;
    Ok((f1, auc))
}

/// Runs every cell; a failing cell is recorded and the sweep continues.
pub fn sweep<T: Scalar>(run: &RunConfig, splits: &Splits<T>) -> Vec<SweepRow> {
    grid_cells(run)
        .into_iter()
        .map(|cell| {
            let result = run_cell(run, &cell, splits).map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("sweep cell {cell:?} failed: {e}");
            }
            SweepRow { cell, result }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let mut run = RunConfig::default();
        run.train.sweep.t_w = vec![1, 2, 5];
        run.train.sweep.w_inv = vec![0.0, 1.0];
        let cells = grid_cells(&run);
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.seed == run.train.seed && c.n_q == run.train.n_q));
        run.train.sweep.seeds = vec![0, 1, 2, 3];
        assert_eq!(grid_cells(&run).len(), 24);
    }

    #[test]
    fn failing_cells_are_isolated() {
        let row = SweepRow {
            cell: SweepCell { t_w: 2, n_q: 4, w_inv: 1.0, w_cov: 0.0, w_rec: 1.0, seed: 3 },
            result: Err("bad, thing".into()),
        };
        assert_eq!(row.csv_row(), "2,4,1,0,1,3,,,error: bad; thing");
        assert_eq!(SWEEP_CSV_HEADER.split(',').count(), row.csv_row().split(',').count());
    }
}
