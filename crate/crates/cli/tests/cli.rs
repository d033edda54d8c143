mod common;

use std::path::Path;
use std::process::Command;

use cafegan_cli::model::{apply_overrides, parse_attribute_spec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cafegan"))
}

fn names() -> Vec<String> {
    ["Hat_Band", "Chin_Patch", "Bright_Skin"].iter().map(|s| s.to_string()).collect()
}

#[test]
fn attribute_spec_parsing() {
    let n = names();
    assert_eq!(parse_attribute_spec("", &n).unwrap(), vec![]);
    assert_eq!(parse_attribute_spec("Hat_Band=1, Bright_Skin=0", &n).unwrap(), vec![(0, 1), (2, 0)]);
    assert!(matches!(parse_attribute_spec("Smiling=1", &n), Err(cafegan::Error::UnknownAttribute { .. })));
    assert!(parse_attribute_spec("Hat_Band=2", &n).is_err());
    assert!(parse_attribute_spec("Hat_Band", &n).is_err());
    assert_eq!(apply_overrides(&[0, 1, 0], &[(0, 1), (1, 0)]), vec![1, 0, 0]);
}

#[test]
fn edit_and_visualize_through_binary() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("tiny.ckpt");
    common::write_tiny_checkpoint(&ck, false);
    let input = dir.path().join("in.png");
    std::fs::write(&input, common::png_bytes(40, 40)).unwrap();

    let out = dir.path().join("edited.png");
    let o = bin()
        .args(["--checkpoint", ck.to_str().unwrap(), "edit", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(&out)
        .args(["--set", "Hat_Band=1", "--source", "0,1,0"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("v_d=[1, 0, 0]"));
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let vis = dir.path().join("maps");
    let o = bin()
        .args(["--checkpoint", ck.to_str().unwrap(), "visualize", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(&vis)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&vis).unwrap().count(), 6);
}

#[test]
fn unknown_attribute_fails_with_valid_list() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("tiny.ckpt");
    common::write_tiny_checkpoint(&ck, false);
    let input = dir.path().join("in.png");
    std::fs::write(&input, common::png_bytes(32, 32)).unwrap();
    let o = bin()
        .args(["--checkpoint", ck.to_str().unwrap(), "edit", "--input"])
        .arg(&input)
        .args(["--output", dir.path().join("o.png").to_str().unwrap(), "--set", "Smiling=1"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Smiling") && err.contains("Hat_Band"), "{err}");
}

#[test]
fn no_cab_visualize_notes_missing_cafe() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("nocab.ckpt");
    common::write_tiny_checkpoint(&ck, true);
    let input = dir.path().join("in.png");
    std::fs::write(&input, common::png_bytes(32, 32)).unwrap();
    let vis = dir.path().join("maps");
    let o = bin()
        .args(["--checkpoint", ck.to_str().unwrap(), "visualize", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(&vis)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("CAFE maps unavailable"));
    assert_eq!(std::fs::read_dir(&vis).unwrap().count(), 3);
}

fn write_config(path: &Path, out: &Path) {
    let mut cfg = common::tiny_config(false);
    cfg.output_dir = out.display().to_string();
    cfg.checkpoint_every = 1;
    std::fs::write(path, cfg.to_toml_string()).unwrap();
}

#[test]
fn train_then_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    write_config(&cfg, &run);

    let o = bin().arg("--config").arg(&cfg).args(["train", "--no-classifier"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "last.ckpt", "final.ckpt", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,term,value"));
    assert!(metrics.contains("g_cm") && metrics.contains("d_gp"));

    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run.join("last.ckpt"))
        .args(["train", "--no-classifier", "--resume", "--epochs", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = cafegan::checkpoint::load_checkpoint(&run.join("final.ckpt")).unwrap();
    assert_eq!(resumed.state.epoch, 2);

    let o = bin()
        .arg("--checkpoint")
        .arg(run.join("final.ckpt"))
        .args(["evaluate", "--mode", "accuracy", "--output"])
        .arg(dir.path().join("rep"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("classifier"));
}

#[test]
fn evaluate_accuracy_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("tiny.ckpt");
    common::write_tiny_checkpoint(&ck, false);
    let rep = dir.path().join("rep");
    let o = bin()
        .arg("--checkpoint")
        .arg(&ck)
        .args(["evaluate", "--mode", "accuracy", "--n", "4", "--output"])
        .arg(&rep)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(rep.join("accuracy.csv")).unwrap();
    assert!(csv.contains("Hat_Band"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rep.join("accuracy.json")).unwrap()).unwrap();
    assert_eq!(json["attributes"].as_array().unwrap().len(), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("evaluation classifier"));
}

#[test]
fn synth_writes_folder() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let o = bin().args(["--seed", "3", "synth", "--n", "6", "--output"]).arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 6);
}
