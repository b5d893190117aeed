use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mms_core::config::RunConfigFile;
use mms_core::data::SplitManifest;
use mms_core::evaluation::{read_report, InferenceMode};
use mms_core::training::load_checkpoint;
use tempfile::TempDir;

fn mms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mms"))
        .args(args)
        .env_remove("MMS_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn status(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 4

[data.synth]
n_images = 8
height = 32
width = 32
unlabeled_per_image = 1
test_images = 3

[augment]
target_width = 32
target_height = 32

[model.seg]
encoder_base_channels = 4
multi_scale_groups = 2

[model.classifier]
conv_channels = 4
pool_count = 3
out_dim = 8

[model.projector]
conv_channels = 4
pool_count = 2
out_dim = 8

[train]
epochs = 1
batch_size = 2
k_neg = "all"
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(status(&mms(&["train", "--bogus"])), 1);
    assert_eq!(status(&mms(&["frobnicate"])), 1);
    assert_eq!(status(&mms(&[])), 1);
    assert_eq!(status(&mms(&["--help"])), 0);
}

#[test]
fn config_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data");
    let no_seed = write_config(dir.path(), "[train]\nepochs = 1\n");
    assert_eq!(status(&mms(&["synth", "--config", s(&no_seed), "--out", s(&out)])), 1);
    let typo = write_config(dir.path(), "seed = 1\n[train]\nepoch = 1\n");
    let o = mms(&["synth", "--config", s(&typo), "--out", s(&out)]);
    assert_eq!(status(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    assert_eq!(status(&mms(&["synth", "--config", s(&cfg), "--out", s(&data)])), 0);
    assert_eq!(fs::read_dir(data.join("masks")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 16);
    assert_eq!(fs::read_dir(data.join("test/images")).unwrap().count(), 3);

    let manifest = dir.path().join("split.json");
    let o = mms(&["split", "--data", s(&data), "--fraction", "0.5", "--seed", "2", "--out", s(&manifest)]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = SplitManifest::load(&manifest).unwrap();
    assert_eq!((m.labeled_x1.len(), m.labeled_x2.len()), (2, 2));
    assert_eq!(m.unlabeled.len(), 4 + 8);
    assert_eq!(m.test.len(), 3);

    let run = dir.path().join("run");
    let o = mms(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "manifest.json", "metrics.jsonl", "checkpoint.mms"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echo = RunConfigFile::load(&run.join("config.toml")).unwrap();
    assert_eq!(echo, RunConfigFile::load(&cfg).unwrap());
    assert_eq!(SplitManifest::load(&run.join("manifest.json")).unwrap(), m);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 1);

    let report = dir.path().join("mms.csv");
    let dump = dir.path().join("dump");
    let ckpt = run.join("checkpoint.mms");
    let test = data.join("test");
    let o = mms(&[
        "eval", "--checkpoint", s(&ckpt), "--test", s(&test), "--out", s(&report), "--dump", s(&dump),
    ]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&dump).unwrap().count(), 3);
    let t = read_report(&report).unwrap();
    assert_eq!(t.fractions, vec![0.5]);
    assert!(t.value("MMS", InferenceMode::Ensemble, 0.5).is_some());

    let base_run = dir.path().join("baseline");
    let o = mms(&[
        "train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&base_run), "--supervised-only",
    ]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let base = load_checkpoint(&base_run.join("checkpoint.mms")).unwrap();
    assert!(base.history.iter().all(|h| h.l_nce_sup == 0.0 && h.l_sim == 0.0 && h.l_nce == 0.0));
    let base_report = dir.path().join("sup.csv");
    let base_ckpt = base_run.join("checkpoint.mms");
    let o = mms(&[
        "eval", "--checkpoint", s(&base_ckpt), "--test", s(&test), "--out", s(&base_report),
        "--label-fraction", "0.2", "--mode", "net1",
    ]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let table = dir.path().join("table.csv");
    let o = mms(&["report", "--inputs", s(&report), s(&base_report), "--out", s(&table)]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let merged = read_report(&table).unwrap();
    assert_eq!(merged.rows.len(), 2);
    assert_eq!(merged.fractions, vec![0.2, 0.5]);
    assert!(fs::read_to_string(&table).unwrap().starts_with("method,l_a=20%,l_a=50%\n"));
    assert!(merged.value("Supervised", InferenceMode::Net1, 0.2).is_some());

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let broken = dir.path().join("broken.mms");
    fs::write(&broken, bytes).unwrap();
    let o = mms(&["eval", "--checkpoint", s(&broken), "--test", s(&test), "--out", s(&report), "--label-fraction", "0.5"]);
    assert_eq!(status(&o), 2);
}

#[test]
fn zero_epochs_writes_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 1", "epochs = 0"));
    let data = dir.path().join("data");
    assert_eq!(status(&mms(&["synth", "--config", s(&cfg), "--out", s(&data)])), 0);
    let manifest = dir.path().join("split.json");
    assert_eq!(status(&mms(&["split", "--data", s(&data), "--fraction", "1", "--seed", "0", "--out", s(&manifest)])), 0);
    let run = dir.path().join("run");
    let o = mms(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&run), "--no-classifiers", "--no-projectors"]);
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state = load_checkpoint(&run.join("checkpoint.mms")).unwrap();
    assert_eq!(state.epoch, 0);
    assert!(state.history.is_empty());
    assert!(!state.train_config.use_classifiers && !state.train_config.use_projectors);
}

#[test]
fn split_reproduces_twelve_plus_twelve() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 1\n[data.synth]\nn_images = 472\nheight = 16\nwidth = 16\ntest_images = 0\n",
    );
    let data = dir.path().join("data");
    assert_eq!(status(&mms(&["synth", "--config", s(&cfg), "--out", s(&data)])), 0);
    let manifest = dir.path().join("split.json");
    let o = Command::new(env!("CARGO_BIN_EXE_mms"))
        .args(["split", "--fraction", "0.05", "--seed", "3", "--out", s(&manifest)])
        .env("MMS_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert_eq!(status(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = SplitManifest::load(&manifest).unwrap();
    assert_eq!((m.labeled_x1.len(), m.labeled_x2.len(), m.unlabeled.len()), (12, 12, 448));
    assert!(m.test.is_empty());
}

#[test]
fn bad_split_fraction_exits_1() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[data.synth]\nn_images = 4\nheight = 16\nwidth = 16\ntest_images = 0\n");
    let data = dir.path().join("data");
    assert_eq!(status(&mms(&["synth", "--config", s(&cfg), "--out", s(&data)])), 0);
    let out = dir.path().join("m.json");
    assert_eq!(status(&mms(&["split", "--data", s(&data), "--fraction", "1.5", "--seed", "0", "--out", s(&out)])), 1);
    assert_eq!(status(&mms(&["split", "--data", s(&data), "--fraction", "0.1", "--seed", "0", "--out", s(&out)])), 1);
}

#[test]
fn selftest_passes() {
    let o = mms(&["selftest"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(status(&o), 0, "{text}");
    assert_eq!(text.matches("[PASS]").count(), 6, "{text}");
}

#[test]
fn shipped_config_parses() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let cfg = RunConfigFile::load(&p).unwrap();
    assert_eq!(cfg.train.seed, cfg.seed);
}
