use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use alise::downstream::F1Report;
use alise::nn::ParamStore;
use alise::sits::io;
use alise::train::change::change_detection;
use alise::train::checkpoint::Checkpoint;
use alise::train::config::RunConfig;
use alise::train::data::{load_splits, raw_splits, year_items, Splits};
use alise::train::plot::{line_chart, Curve};
use alise::train::pretrain::{pretrain, Model};
use alise::train::probe::{predict_item, train_probe, ProbeMode, ProbeOutcome};
use alise::train::sweep::{sweep, SWEEP_CSV_HEADER};

#[derive(Parser)]
#[command(name = "alise", version, about = "Self-supervised encoder for irregular satellite image time series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// UTF-8 key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "alise_out")]
    out: PathBuf,
    /// Overrides the configured seed (the data seed for `synth`).
    #[arg(long)]
    seed: Option<u64>,
    /// Writes SVG curves into this directory.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Pre-trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/val/test datasets.
    Synth(Common),
    /// Self-supervised pre-training.
    Pretrain(Common),
    /// Linear probing on a frozen pre-trained encoder.
    Probe(WithCheckpoint),
    /// Fine-tune encoder and head; without a checkpoint the encoder starts from scratch.
    Finetune(WithCheckpoint),
    /// Training-free change detection, latent distance against the gap-filling baseline.
    Changedetect(WithCheckpoint),
    /// Pre-train and probe every cell of the configured grid.
    Sweep(Common),
}

fn load_config(c: &Common, seed_is_data: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    if let Some(s) = c.seed {
        if seed_is_data {
            cfg.train.data_seed = s;
        } else {
            cfg.train.seed = s;
        }
    }
    cfg.validate()?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

fn emit(path: &Path, csv: &str) -> Result<()> {
    print!("{csv}");
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

fn plot(dir: &Option<PathBuf>, file: &str, title: &str, curves: &[Curve<'_>]) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(file), line_chart(title, "epoch", curves))?;
    }
    Ok(())
}

fn setup(cfg: &RunConfig) -> Result<(Splits<f32>, Model)> {
    let splits = load_splits::<f32>(cfg)?;
    let channels = splits.train[0].sits.c();
    let model = Model::new(&cfg.train, channels)?;
    Ok((splits, model))
}

fn load_encoder(model: &Model, path: &Path) -> Result<ParamStore<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let template = model.init::<f32>(0).subset("enc.");
    Ok(ckpt.restore(&template)?)
}

fn f1_csv(split: &str, r: &F1Report) -> String {
    let per: Vec<String> = r.per_class.iter().map(|v| v.map(|f| f.to_string()).unwrap_or_default()).collect();
    format!("{split},{},{},{}\n", r.macro_f1, r.n_pixels, per.join(";"))
}

fn cmd_synth(c: &Common) -> Result<()> {
    let cfg = load_config(c, true)?;
    let [train, val, test] = raw_splits(&cfg)?;
    let mut csv = String::from("split,n_series,t,changed_pixels\n");
    for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
        io::write_dataset(&c.out.join(name), set, cfg.train.data_seed)?;
        let t: usize = set.iter().map(|s| s.sits.t()).sum();
        let ch: usize = set.iter().map(|s| s.change.iter().filter(|&&b| b).count()).sum();
        csv.push_str(&format!("{name},{},{t},{ch}\n", set.len()));
    }
    fs::write(c.out.join("config.txt"), cfg.to_text())?;
    emit(&c.out.join("synth.csv"), &csv)
}

fn cmd_pretrain(c: &Common) -> Result<()> {
    let cfg = load_config(c, false)?;
    let (splits, model) = setup(&cfg)?;
    let res = pretrain(&cfg, &model, model.init(cfg.train.seed), &splits.train, &splits.val)?;
    Checkpoint::new(cfg.to_text(), &res.best).save(&c.out.join("pretrain.ckpt"))?;
    emit(&c.out.join("pretrain_metrics.csv"), &res.csv())?;
    let pts = |f: fn(&alise::train::pretrain::EpochMetrics) -> f64| {
        res.metrics.iter().map(|m| (m.epoch as f64, f(m))).collect::<Vec<_>>()
    };
    plot(
        &c.plot,
        "pretrain_loss.svg",
        "pre-training loss",
        &[
            Curve { name: "train total", points: pts(|m| m.train.total) },
            Curve { name: "val total", points: pts(|m| m.val.total) },
            Curve { name: "train rec", points: pts(|m| m.train.rec) },
            Curve { name: "train inv", points: pts(|m| m.train.inv) },
        ],
    )
}

fn write_predictions(dir: &Path, model: &Model, out: &ProbeOutcome<f32>, splits: &Splits<f32>, crop: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, item) in year_items(&splits.test, crop)?.iter().enumerate() {
        let pred = predict_item(model, &out.head, &out.store, item)?;
        let data: Vec<f32> = pred.iter().map(|&p| p as f32).collect();
        io::write_map(
            &dir.join(format!("pred_{i:05}.f32")),
            &[item.sits.h(), item.sits.w()],
            &data,
            &[("kind", "class-map".to_string()), ("mode", out.mode.name().to_string())],
        )?;
    }
    Ok(())
}

fn cmd_probe(w: &WithCheckpoint, mode: ProbeMode) -> Result<()> {
    let c = &w.common;
    let cfg = load_config(c, false)?;
    let (splits, model) = setup(&cfg)?;
    let (encoder, mode) = match (&w.checkpoint, mode) {
        (Some(p), m) => (load_encoder(&model, p)?, m),
        (None, ProbeMode::FineTune) => (model.init(cfg.train.seed), ProbeMode::Scratch),
        (None, _) => bail!("--checkpoint is required for linear probing"),
    };
    let out = train_probe(&cfg, &model, &encoder, &splits, mode)?;
    let name = mode.name();
    Checkpoint::new(cfg.to_text(), &out.store).save(&c.out.join(format!("{name}.ckpt")))?;
    fs::write(c.out.join(format!("{name}_metrics.csv")), out.csv())?;
    let mut csv = format!("split,macro_f1,pixels,per_class_f1\n{}", f1_csv("val", &out.val));
    if let Some(t) = &out.test {
        csv.push_str(&f1_csv("test", t));
    }
    emit(&c.out.join(format!("{name}_scores.csv")), &csv)?;
    write_predictions(&c.out.join(format!("{name}_pred")), &model, &out, &splits, cfg.train.crop)?;
    let pts = |f: fn(&alise::train::probe::ProbeEpoch) -> f64| {
        out.metrics.iter().map(|m| (m.epoch as f64, f(m))).collect::<Vec<_>>()
    };
    plot(
        &c.plot,
        &format!("{name}_curves.svg"),
        &format!("{name} training"),
        &[
            Curve { name: "train loss", points: pts(|m| m.train_loss) },
            Curve { name: "val loss", points: pts(|m| m.val_loss) },
            Curve { name: "val macro F1", points: pts(|m| m.val_macro_f1) },
        ],
    )
}

fn cmd_changedetect(w: &WithCheckpoint) -> Result<()> {
    let c = &w.common;
    let cfg = load_config(c, false)?;
    let (splits, model) = setup(&cfg)?;
    let Some(path) = &w.checkpoint else { bail!("--checkpoint is required for change detection") };
    let encoder = load_encoder(&model, path)?;
    let eval = if splits.test.is_empty() { &splits.val } else { &splits.test };
    let rep = change_detection(&model, &encoder, eval, cfg.train.crop, cfg.train.gf_period)?;
    let dir = c.out.join("change_maps");
    fs::create_dir_all(&dir)?;
    for (i, (lat, gf)) in rep.maps.iter().enumerate() {
        for (kind, m) in [("latent", lat), ("gapfill", gf)] {
            io::write_map(&dir.join(format!("{kind}_{i:05}.f32")), m.d.shape(), m.d.data(), &[("kind", kind.to_string())])?;
        }
    }
    emit(&c.out.join("changedetect.csv"), &rep.csv())
}

fn cmd_sweep(c: &Common) -> Result<()> {
    let cfg = load_config(c, false)?;
    let splits = load_splits::<f32>(&cfg)?;
    let rows = sweep(&cfg, &splits);
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    emit(&c.out.join("sweep.csv"), &csv)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed == rows.len() && !rows.is_empty() {
        bail!("every sweep cell failed");
    }
    if failed > 0 {
        log::warn!("{failed} of {} sweep cells failed", rows.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Synth(c) => cmd_synth(c),
        Cmd::Pretrain(c) => cmd_pretrain(c),
        Cmd::Probe(w) => cmd_probe(w, ProbeMode::Linear),
        Cmd::Finetune(w) => cmd_probe(w, ProbeMode::FineTune),
        Cmd::Changedetect(w) => cmd_changedetect(w),
        Cmd::Sweep(c) => cmd_sweep(c),
    }
}
