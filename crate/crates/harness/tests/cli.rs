//! End-to-end runs of the `cosal` binary.

use std::path::Path;
use std::process::Command;

fn cosal(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_cosal")).args(args).output().unwrap();
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(
        cosal(&["gen-data", "--seed", "1", "--groups", "2", "--n", "3", "--size", "32", "--difficulty", "1", "--out", p(&data)]),
        0
    );
    assert!(data.join("group001/img/002.ppm").exists());
    assert!(data.join("group001/gt/002.pgm").exists());

    let cfg = root.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 3, "image_size": 32, "group_size": 3, "channels": 8, "stage_channels": [8, 16, 32],
            "cocl_q": 2, "batch_size": 1, "stage1_steps": 1, "stage2_steps": 1, "lr": 0.001}"#,
    )
    .unwrap();
    let run = root.join("run");
    assert_eq!(cosal(&["train", "--config", p(&cfg), "--out", p(&run)]), 0);
    let ckpt = run.join("stage2.json");
    assert!(ckpt.exists() && run.join("stage2.bin").exists() && run.join("train_log.csv").exists());

    let pred = root.join("pred");
    assert_eq!(cosal(&["infer", "--ckpt", p(&ckpt), "--group-dir", p(&data), "--order", "random:4", "--out", p(&pred)]), 0);
    let pred2 = root.join("pred2");
    assert_eq!(cosal(&["infer", "--ckpt", p(&ckpt), "--group-dir", p(&data), "--order", "2,0,1", "--out", p(&pred2)]), 0);

    let report = root.join("report.csv");
    assert_eq!(cosal(&["eval", "--pred", p(&pred), "--gt", p(&data), "--out", p(&report)]), 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("group,image,E_xi,S_m,F_beta,MAE,P,J\n"));
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    assert!(root.join("report.json").exists());

    let stab = root.join("stab.csv");
    assert_eq!(
        cosal(&["stability", "--ckpt", p(&ckpt), "--group-dir", p(&data), "--trials", "3", "--seed", "1", "--out", p(&stab)]),
        0
    );
    assert!(std::fs::read_to_string(&stab).unwrap().starts_with("group,metric,mean,std\n"));

    // A missing prediction is a data error.
    std::fs::remove_file(pred.join("group000/001.pgm")).unwrap();
    assert_eq!(cosal(&["eval", "--pred", p(&pred), "--gt", p(&data), "--out", p(&report)]), 2);
    // So is an order that is not a permutation, or a missing checkpoint.
    assert_eq!(cosal(&["infer", "--ckpt", p(&ckpt), "--group-dir", p(&data), "--order", "0,0,1", "--out", p(&pred)]), 2);
    assert_eq!(cosal(&["infer", "--ckpt", p(&root.join("none.json")), "--group-dir", p(&data), "--out", p(&pred)]), 2);
    // Usage errors.
    assert_eq!(cosal(&["infer", "--ckpt", p(&ckpt)]), 1);
    assert_eq!(cosal(&["infer", "--ckpt", p(&ckpt), "--group-dir", p(&data), "--order", "x", "--out", p(&pred)]), 1);
    assert_eq!(cosal(&["frobnicate"]), 1);
}

#[test]
fn numeric_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"image_size": 32, "group_size": 3, "channels": 8, "stage_channels": [8, 16, 32],
            "cocl_q": 2, "batch_size": 1, "stage1_steps": 2, "stage2_steps": 2, "lr": 1e30}"#,
    )
    .unwrap();
    assert_eq!(cosal(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]), 3);
}
