use std::path::Path;
use std::process::{Command, Output};

fn sslpdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslpdl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SSLPDL_PRECISION")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = r#"{
  "seed": 3,
  "data": {"dir": "data", "synth": {"height": 32, "width": 32, "n_vars": 4}, "counts": {"train": 6, "val": 2, "test": 3}},
  "patch": {"q": 2, "p": 8},
  "arch": {"widths": [4, 8], "depths": [1, 1], "pattern": "AB", "decoder_width": 4},
  "pretrain": {"epochs": 2, "batch": 3},
  "finetune": {"epochs": 2, "batch": 3, "sampling": {"mode": "none"}},
  "out_dir": "runs"
}"#;

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.json"), SMALL).unwrap();
    std::fs::write(d.join("s.json"), r#"{"alpha": [0, 0.1, 0.3]}"#).unwrap();

    ok(&sslpdl(d, &["gen", "--config", "c.json"]));
    assert!(d.join("data/manifest.json").exists());

    ok(&sslpdl(d, &["label", "--config", "c.json", "--kind", "pdl"]));
    let csv = std::fs::read_to_string(d.join("runs/proportions_pdl.csv")).unwrap();
    assert!(csv.starts_with("class,one_hot_frac,density_frac"));

    ok(&sslpdl(d, &["pretrain", "--config", "c.json", "--out", "ck.sslc"]));
    ok(&sslpdl(d, &["finetune", "--config", "c.json", "--init", "ck.sslc", "--out", "m.sslc"]));
    ok(&sslpdl(d, &["finetune", "--config", "c.json", "--init", "scratch", "--out", "s.sslc"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m.sslc.report.json")).unwrap()).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);

    ok(&sslpdl(d, &["eval", "--model", "m.sslc", "--split", "test"]));
    let csv = std::fs::read_to_string(d.join("m.sslc.eval_test.csv")).unwrap();
    assert!(csv.starts_with("threshold,csi,f1,precision,recall"));
    assert!(csv.lines().last().unwrap().starts_with("miou,"));

    ok(&sslpdl(d, &["ablate", "--config", "c.json", "--sweep", "s.json", "--out", "abl.csv"]));
    let csv = std::fs::read_to_string(d.join("abl.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(',')), "{csv}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), r#"{"pretrain": {"mask_ratio": 2}}"#).unwrap();
    std::fs::write(d.join("c.json"), SMALL).unwrap();

    assert_eq!(sslpdl(d, &["gen", "--config", "bad.json"]).status.code(), Some(2));
    assert_eq!(sslpdl(d, &["gen", "--config", "missing.json"]).status.code(), Some(2));
    assert_eq!(sslpdl(d, &["frobnicate"]).status.code(), Some(2));
    // No dataset generated yet.
    assert_eq!(sslpdl(d, &["pretrain", "--config", "c.json", "--out", "ck.sslc"]).status.code(), Some(3));

    std::fs::write(d.join("junk.sslc"), b"not a checkpoint").unwrap();
    assert_eq!(sslpdl(d, &["eval", "--model", "junk.sslc"]).status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_sslpdl"))
        .args(["gen", "--config", "c.json"])
        .current_dir(d)
        .env("SSLPDL_PRECISION", "f16")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // A diverging learning rate is a numeric failure.
    ok(&sslpdl(d, &["gen", "--config", "c.json"]));
    let wild = SMALL.replace(r#""pretrain": {"epochs": 2, "batch": 3}"#, r#""pretrain": {"epochs": 2, "batch": 3, "lr": 1e300}"#);
    std::fs::write(d.join("wild.json"), wild).unwrap();
    assert_eq!(sslpdl(d, &["pretrain", "--config", "wild.json", "--out", "w.sslc"]).status.code(), Some(4));
}
