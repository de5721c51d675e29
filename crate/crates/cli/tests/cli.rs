use std::fs;
use std::path::Path;
use std::process::Command;

fn alise(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_alise")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = alise(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "\
# tiny end-to-end run
n_q=2
d_model=8
d_emb=8
down_blocks=1
n_layers=1
n_heads=2
d_hidden=16
n_train=4
n_val=2
n_test=2
epochs=1
probe_epochs=1
ft_epochs=1
fs_epochs=1
crop=8
synth.size=8
";

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.display().to_string()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), "");
    let csv = ok(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(csv.starts_with("split,n_series,t,changed_pixels\ntrain,4,"));
    assert!(data.join("train/series_00003/meta.txt").exists());

    let cfg = write_config(tmp.path(), &format!("data_dir={}\n", data.display()));
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    let plots = tmp.path().join("plots");
    ok(&["pretrain", "--config", &cfg, "--out", o, "--plot", plots.to_str().unwrap()]);
    assert!(plots.join("pretrain_loss.svg").exists());
    let metrics = fs::read_to_string(out.join("pretrain_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    let ckpt = out.join("pretrain.ckpt");
    let c = ckpt.to_str().unwrap();
    let scores = ok(&["probe", "--config", &cfg, "--out", o, "--checkpoint", c]);
    assert!(scores.starts_with("split,macro_f1,pixels,per_class_f1\nval,"));
    assert!(out.join("linear_pred/pred_00000.f32").exists());
    ok(&["finetune", "--config", &cfg, "--out", o, "--checkpoint", c]);
    ok(&["finetune", "--config", &cfg, "--out", o]);
    let cd = ok(&["changedetect", "--config", &cfg, "--out", o, "--checkpoint", c]);
    assert!(cd.lines().count() == 2, "{cd}");
    assert!(out.join("change_maps/latent_00000.f32").exists());

    let cfg = write_config(tmp.path(), &format!("data_dir={}\nsweep.t_w=1,2\n", data.display()));
    let sweep = ok(&["sweep", "--config", &cfg, "--out", o]);
    assert_eq!(sweep.lines().count(), 3, "{sweep}");
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "no_such_key=1\n");
    assert!(!alise(&["synth", "--config", &bad]).status.success());
    assert!(!alise(&["pretrain", "--config", "/nonexistent/cfg"]).status.success());
    let cfg = write_config(tmp.path(), "");
    let o = tmp.path().join("o");
    assert!(!alise(&["probe", "--config", &cfg, "--out", o.to_str().unwrap()]).status.success());
    assert!(!alise(&["changedetect", "--config", &cfg, "--out", o.to_str().unwrap(), "--checkpoint", "/nonexistent.ckpt"]).status.success());
    assert!(!alise(&["frobnicate"]).status.success());
}
