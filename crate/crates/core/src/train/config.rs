//! `key=value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{AliseError, Result};
use crate::objective::LossWeights;
use crate::sits::io::parse_kv;
use crate::sits::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub t_w: usize,
    pub n_q: usize,
    pub d_model: usize,
    pub d_emb: usize,
    pub down_blocks: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub proj_heads: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub epochs: usize,
    pub seed: u64,
    /// Seeds synthetic data generation independently of model initialization.
    pub data_seed: u64,
    /// Consecutive dates drawn per series and epoch.
    pub n_consecutive: usize,
    pub lr_max: f64,
    pub t0: usize,
    /// Spatial crop side; larger series are cropped randomly at train time, centrally at eval.
    pub crop: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Reads `train/`, `val/` and `test/` datasets from here instead of generating them.
    pub data_dir: Option<PathBuf>,
    pub probe_lr: f64,
    pub probe_epochs: usize,
    /// Series per probe optimizer step.
    pub probe_batch: usize,
    pub patience: usize,
    pub decay: f64,
    /// Number of labelled training series for probing; 0 uses all.
    pub subset: usize,
    pub ft_lr: f64,
    pub ft_epochs: usize,
    /// Supervised training of the whole architecture from scratch.
    pub fs_lr: f64,
    pub fs_epochs: usize,
    pub gf_period: usize,
    pub sweep: SweepGrid,
}

/// Axes of an ablation grid; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepGrid {
    pub t_w: Vec<usize>,
    pub n_q: Vec<usize>,
    pub w_inv: Vec<f64>,
    pub w_cov: Vec<f64>,
    pub w_rec: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_w: 2,
            n_q: 10,
            d_model: 64,
            d_emb: 128,
            down_blocks: 3,
            n_layers: 3,
            n_heads: 4,
            d_hidden: 128,
            proj_heads: 2,
            tau: 10_000.0,
            batch_size: 2,
            weights: LossWeights::default(),
            epochs: 30,
            seed: 0,
            data_seed: 0,
            n_consecutive: 20,
            lr_max: 1e-3,
            t0: 2,
            crop: 16,
            n_train: 200,
            n_val: 40,
            n_test: 40,
            data_dir: None,
            probe_lr: 1e-4,
            probe_epochs: 50,
            probe_batch: 8,
            patience: 10,
            decay: 0.05,
            subset: 0,
            ft_lr: 1e-4,
            ft_epochs: 10,
            fs_lr: 1e-3,
            fs_epochs: 30,
            gf_period: 5,
            sweep: SweepGrid::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale architecture: `d_model=16, n_q=4`, one conv block and one attention layer.
    pub fn toy() -> Self {
        Self {
            n_q: 4,
            d_model: 16,
            d_emb: 32,
            down_blocks: 1,
            n_layers: 1,
            n_heads: 2,
            d_hidden: 32,
            ..Self::default()
        }
    }

    pub fn encoder_config(&self, channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels: channels,
            d_model: self.d_model,
            n_q: self.n_q,
            down_blocks: self.down_blocks,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_hidden: self.d_hidden,
            proj_heads: self.proj_heads,
            tau: self.tau,
        }
    }

    pub fn decoder_config(&self, channels: usize) -> DecoderConfig {
        DecoderConfig { d_model: self.d_model, channels, tau: self.tau }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config(1).validate()?;
        self.weights.validate()?;
        let positive = [
            ("t_w", self.t_w),
            ("d_emb", self.d_emb),
            ("batch_size", self.batch_size),
            ("t0", self.t0),
            ("crop", self.crop),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("probe_batch", self.probe_batch),
            ("patience", self.patience),
            ("gf_period", self.gf_period),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AliseError::Config(format!("{name} must be positive")));
            }
        }
        if self.n_consecutive < 2 * self.t_w {
            return Err(AliseError::Config(format!(
                "n_consecutive {} cannot hold two windows of t_w {}",
                self.n_consecutive, self.t_w
            )));
        }
        if self.crop % (1 << self.down_blocks) != 0 {
            return Err(AliseError::Config(format!("crop {} not divisible by 2^{}", self.crop, self.down_blocks)));
        }
        for (name, v) in [("lr_max", self.lr_max), ("probe_lr", self.probe_lr), ("ft_lr", self.ft_lr), ("fs_lr", self.fs_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AliseError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(AliseError::Config(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        Ok(())
    }
}

/// Training plus synthetic-data settings; synthetic keys carry a `synth.` prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| AliseError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AliseError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        crate::sits::validate_synth(&self.synth)?;
        if self.synth.t_w_max < self.train.t_w {
            return Err(AliseError::Config(format!(
                "synth.t_w_max {} below t_w {}",
                self.synth.t_w_max, self.train.t_w
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "t_w" => t.t_w = parse(key, v)?,
            "n_q" => t.n_q = parse(key, v)?,
            "d_model" => t.d_model = parse(key, v)?,
            "d_emb" => t.d_emb = parse(key, v)?,
            "down_blocks" => t.down_blocks = parse(key, v)?,
            "n_layers" => t.n_layers = parse(key, v)?,
            "n_heads" => t.n_heads = parse(key, v)?,
            "d_hidden" => t.d_hidden = parse(key, v)?,
            "proj_heads" => t.proj_heads = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "w_rec" => t.weights.w_rec = parse(key, v)?,
            "w_inv" => t.weights.w_inv = parse(key, v)?,
            "w_cov" => t.weights.w_cov = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "data_seed" => t.data_seed = parse(key, v)?,
            "n_consecutive" => t.n_consecutive = parse(key, v)?,
            "lr_max" => t.lr_max = parse(key, v)?,
            "t0" => t.t0 = parse(key, v)?,
            "crop" => t.crop = parse(key, v)?,
            "n_train" => t.n_train = parse(key, v)?,
            "n_val" => t.n_val = parse(key, v)?,
            "n_test" => t.n_test = parse(key, v)?,
            "data_dir" => t.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "probe_lr" => t.probe_lr = parse(key, v)?,
            "probe_epochs" => t.probe_epochs = parse(key, v)?,
            "probe_batch" => t.probe_batch = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "decay" => t.decay = parse(key, v)?,
            "subset" => t.subset = parse(key, v)?,
            "ft_lr" => t.ft_lr = parse(key, v)?,
            "ft_epochs" => t.ft_epochs = parse(key, v)?,
            "fs_lr" => t.fs_lr = parse(key, v)?,
            "fs_epochs" => t.fs_epochs = parse(key, v)?,
            "gf_period" => t.gf_period = parse(key, v)?,
            "sweep.t_w" => t.sweep.t_w = parse_list(key, v)?,
            "sweep.n_q" => t.sweep.n_q = parse_list(key, v)?,
            "sweep.w_inv" => t.sweep.w_inv = parse_list(key, v)?,
            "sweep.w_cov" => t.sweep.w_cov = parse_list(key, v)?,
            "sweep.w_rec" => t.sweep.w_rec = parse_list(key, v)?,
            "sweep.seeds" => t.sweep.seeds = parse_list(key, v)?,
            "synth.size" => s.size = parse(key, v)?,
            "synth.n_classes" => s.n_classes = parse(key, v)?,
            "synth.channels" => s.channels = parse(key, v)?,
            "synth.dates_min" => s.dates_min = parse(key, v)?,
            "synth.dates_max" => s.dates_max = parse(key, v)?,
            "synth.years" => s.years = parse(key, v)?,
            "synth.start_year" => s.start_year = parse(key, v)?,
            "synth.change_rate" => s.change_rate = parse(key, v)?,
            "synth.cloud_rate" => s.cloud_rate = parse(key, v)?,
            "synth.background_rate" => s.background_rate = parse(key, v)?,
            "synth.noise_std" => s.noise_std = parse(key, v)?,
            "synth.parcel_min" => s.parcel_min = parse(key, v)?,
            "synth.parcel_max" => s.parcel_max = parse(key, v)?,
            "synth.parcel_jitter" => s.parcel_jitter = parse(key, v)?,
            "synth.year_jitter" => s.year_jitter = parse(key, v)?,
            "synth.amp_jitter" => s.amp_jitter = parse(key, v)?,
            "synth.profile_seed" => s.profile_seed = parse(key, v)?,
            "synth.t_w_max" => s.t_w_max = parse(key, v)?,
            "synth.n_series" => s.n_series = parse(key, v)?,
            _ => return Err(AliseError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key=value` text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("t_w", t.t_w.to_string());
        kv("n_q", t.n_q.to_string());
        kv("d_model", t.d_model.to_string());
        kv("d_emb", t.d_emb.to_string());
        kv("down_blocks", t.down_blocks.to_string());
        kv("n_layers", t.n_layers.to_string());
        kv("n_heads", t.n_heads.to_string());
        kv("d_hidden", t.d_hidden.to_string());
        kv("proj_heads", t.proj_heads.to_string());
        kv("tau", t.tau.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("w_rec", t.weights.w_rec.to_string());
        kv("w_inv", t.weights.w_inv.to_string());
        kv("w_cov", t.weights.w_cov.to_string());
        kv("epochs", t.epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("data_seed", t.data_seed.to_string());
        kv("n_consecutive", t.n_consecutive.to_string());
        kv("lr_max", t.lr_max.to_string());
        kv("t0", t.t0.to_string());
        kv("crop", t.crop.to_string());
        kv("n_train", t.n_train.to_string());
        kv("n_val", t.n_val.to_string());
        kv("n_test", t.n_test.to_string());
        kv("data_dir", t.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("probe_lr", t.probe_lr.to_string());
        kv("probe_epochs", t.probe_epochs.to_string());
        kv("probe_batch", t.probe_batch.to_string());
        kv("patience", t.patience.to_string());
        kv("decay", t.decay.to_string());
        kv("subset", t.subset.to_string());
        kv("ft_lr", t.ft_lr.to_string());
        kv("ft_epochs", t.ft_epochs.to_string());
        kv("fs_lr", t.fs_lr.to_string());
        kv("fs_epochs", t.fs_epochs.to_string());
        kv("gf_period", t.gf_period.to_string());
        kv("sweep.t_w", join(&t.sweep.t_w));
        kv("sweep.n_q", join(&t.sweep.n_q));
        kv("sweep.w_inv", join(&t.sweep.w_inv));
        kv("sweep.w_cov", join(&t.sweep.w_cov));
        kv("sweep.w_rec", join(&t.sweep.w_rec));
        kv("sweep.seeds", join(&t.sweep.seeds));
        kv("synth.size", s.size.to_string());
        kv("synth.n_classes", s.n_classes.to_string());
        kv("synth.channels", s.channels.to_string());
        kv("synth.dates_min", s.dates_min.to_string());
        kv("synth.dates_max", s.dates_max.to_string());
        kv("synth.years", s.years.to_string());
        kv("synth.start_year", s.start_year.to_string());
        kv("synth.change_rate", s.change_rate.to_string());
        kv("synth.cloud_rate", s.cloud_rate.to_string());
        kv("synth.background_rate", s.background_rate.to_string());
        kv("synth.noise_std", s.noise_std.to_string());
        kv("synth.parcel_min", s.parcel_min.to_string());
        kv("synth.parcel_max", s.parcel_max.to_string());
        kv("synth.parcel_jitter", s.parcel_jitter.to_string());
        kv("synth.year_jitter", s.year_jitter.to_string());
        kv("synth.amp_jitter", s.amp_jitter.to_string());
        kv("synth.profile_seed", s.profile_seed.to_string());
        kv("synth.t_w_max", s.t_w_max.to_string());
        kv("synth.n_series", s.n_series.to_string());
        out
    }
}
