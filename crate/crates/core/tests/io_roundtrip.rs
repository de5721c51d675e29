use std::fs;
use std::path::Path;

use alise::sits::{io, synth_generate, SynthConfig};
use alise::train::checkpoint::Checkpoint;
use alise::train::config::TrainConfig;
use alise::train::pretrain::Model;

fn small() -> SynthConfig {
    SynthConfig { n_series: 3, size: 8, ..SynthConfig::default() }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_survives_write_and_read() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_generate(&small(), 21).unwrap();
    io::write_dataset(&tmp.path().join("a"), &data, 21).unwrap();
    let back = io::read_dataset(&tmp.path().join("a")).unwrap();
    assert_eq!(back.len(), data.len());
    for (x, y) in data.iter().zip(&back) {
        assert_eq!(x.sits, y.sits);
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.change, y.change);
        assert_eq!(x.first_year, y.first_year);
    }
    io::write_dataset(&tmp.path().join("b"), &back, 21).unwrap();
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
}

#[test]
fn truncated_series_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_generate(&small(), 2).unwrap();
    io::write_dataset(tmp.path(), &data[..1], 2).unwrap();
    let dir = tmp.path().join("series_00000");
    let labels = fs::read(dir.join("labels.u8")).unwrap();
    fs::write(dir.join("labels.u8"), &labels[1..]).unwrap();
    assert!(io::read_labeled(&dir).is_err());
    fs::write(dir.join("labels.u8"), &labels).unwrap();
    fs::write(dir.join("values.f32"), [0u8; 7]).unwrap();
    assert!(io::read_labeled(&dir).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let model = Model::new(&TrainConfig::toy(), 10).unwrap();
    let store = model.init::<f32>(4);
    let path = tmp.path().join("m.ckpt");
    Checkpoint::new("seed=4\n", &store).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.restore(&store).unwrap(), store);
    loaded.save(&tmp.path().join("again.ckpt")).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(tmp.path().join("again.ckpt")).unwrap());
    let f64_store = loaded.restore(&model.init::<f64>(0)).unwrap();
    assert_eq!(Checkpoint::new("seed=4\n", &f64_store).to_bytes(), fs::read(&path).unwrap());
}
