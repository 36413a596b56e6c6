use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mhfpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhfpn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
backbone.stem_channels = 4
backbone.stage_channels = 4,8,8,16
neck.out_channels = 8
head.num_convs = 1
data.n_images = 10
train.epochs = 1
";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_data_writes_annotations_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "data.n_images = 6\n");
    let out = dir.path().join("data");
    let o = mhfpn(&["--config", &cfg, "--out", out.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("annotations.json").is_file());
    let pgms = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 6);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = mhfpn(&["gradcheck", "--points", "1"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let bad = mhfpn(&["gradcheck", "--points", "1", "--corrupt", "conv2d:1.01"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));

    let unknown = mhfpn(&["gradcheck", "--corrupt", "warp:2"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn unknown_config_key_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "# comment\ntrain.epochs = 2\nneck.widht = 3\n");
    let o = mhfpn(&["--config", &cfg, "train"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("neck.widht"), "{err}");
}

#[test]
fn bad_overrides_are_rejected() {
    for set in ["train.epochs", "train.epochs=many", "nope.key=1"] {
        let o = mhfpn(&["--set", set, "gen-data"]);
        assert_eq!(o.status.code(), Some(1), "{set}");
        assert!(stderr(&o).contains("--set"), "{set}: {}", stderr(&o));
    }
}

#[test]
fn train_then_eval_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let o = mhfpn(&["--config", &cfg, "--seed", "3", "--out", out, "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mhfpn(&["--config", &cfg, "--seed", "3", "--out", out, "eval"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("AP@50"));
    for f in ["checkpoint.bin", "train_log.csv", "metrics.csv", "froc.csv"] {
        assert!(Path::new(out).join(f).is_file(), "{f}");
    }

    let o = mhfpn(&["--config", &cfg, "--set", "neck.variant=FPN", "--out", out, "eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}
