use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use istanet::cli::RunConfigFile;
use proptest::prelude::*;

fn istanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_istanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.join("corpus");
    let mut args = vec![
        "--seed",
        "3",
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--frames",
        "12",
        "--joints",
        "3",
    ];
    args.extend_from_slice(extra);
    let o = istanet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn config_json(
    epochs: usize,
    lr: f64,
    batch: usize,
    val: Option<&str>,
    folds: Option<usize>,
) -> String {
    let val = val.map_or("null".into(), |v| format!("\"{v}\""));
    let folds = folds.map_or("null".into(), |k| k.to_string());
    format!(
        r#"{{
  "model": {{
    "input": {{"channels": 3, "frames": 12, "joints": 3, "entities": 2}},
    "window": {{"t_w": 3, "j_w": 1, "e_w": 2}},
    "embed_channels": 8,
    "gamma": 0.1,
    "blocks": [{{"c_in": 8, "c_out": 8, "heads": 2, "c_qkv": 2, "k_u": 3, "k_t": 3, "gamma": 0.1}}],
    "num_classes": 4
  }},
  "train": {{"lr": {lr}, "momentum": 0.9, "lr_decay": 0.1, "decay_epochs": [1000], "batch_size": {batch}, "epochs": {epochs},
            "label_smoothing": 0.1, "temperature": 1.0, "entity_rearrangement": true, "seed": 0}},
  "data": {{"manifest": "corpus/manifest.txt", "val_split": {val}, "folds": {folds}}},
  "out_dir": "run"
}}"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_exits_2_naming_path() {
    let o = istanet(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(
        istanet(&["inspect", "tokens", "--sample", "x.iskel", "--window", "2,0,1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(istanet(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.iskel");
    fs::write(&bad, "ISKEL 1\n3 1 1 1 0\n1 2\n").unwrap();
    let o = istanet(&[
        "inspect",
        "tokens",
        "--sample",
        bad.to_str().unwrap(),
        "--window",
        "1,1,1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_run_writes_one_epoch() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &["--train-per-class", "2", "--test-per-class", "1"],
    );
    let cfg = write_config(
        dir.path(),
        "run.json",
        &config_json(5, 0.05, 4, Some("test"), None),
    );
    let o = istanet(&["train", "--config", &cfg, "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "train_loss", "train_top1", "val_top1"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    let run = dir.path().join("run");
    assert!(run.join("final.ckpt").exists() && run.join("epoch_0001.ckpt").exists());
    assert!(run.join("config.json").exists() && run.join("timing.jsonl").exists());
}

#[test]
fn identical_invocations_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &["--train-per-class", "2", "--test-per-class", "1"],
    );
    let cfg = write_config(
        dir.path(),
        "run.json",
        &config_json(3, 0.05, 3, Some("test"), None),
    );
    let mut logs = Vec::new();
    for (i, workers) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let o = istanet(&[
            "--workers",
            workers,
            "--seed",
            "7",
            "train",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn memorized_samples_score_100_and_eval_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &["--train-per-class", "2", "--test-per-class", "1"],
    );
    let cfg = write_config(
        dir.path(),
        "run.json",
        &config_json(60, 0.05, 8, None, None),
    );
    let o = istanet(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("run/final.ckpt");
    let manifest = dir.path().join("corpus/manifest.txt");
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        "train",
    ];
    let first = istanet(&args);
    assert!(first.status.success());
    let text = stdout(&first);
    assert!(text.starts_with("top1: 100.00\n"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("class ")).count(), 4);
    assert_eq!(stdout(&istanet(&args)), text);
}

#[test]
fn five_fold_eval_prints_each_fold_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &[
            "--train-per-class",
            "2",
            "--test-per-class",
            "1",
            "--folds",
            "5",
        ],
    );
    let cfg = write_config(
        dir.path(),
        "run.json",
        &config_json(1, 0.05, 4, None, Some(5)),
    );
    let mut ckpts = Vec::new();
    for k in 0..5 {
        let out = dir.path().join(format!("fold{k}"));
        let o = istanet(&[
            "train",
            "--config",
            &cfg,
            "--fold",
            &k.to_string(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        ckpts.push(out.join("final.ckpt").to_str().unwrap().to_string());
    }
    let manifest = dir.path().join("corpus/manifest.txt");
    let mut args = vec![
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--folds",
        "5",
        "--checkpoint",
    ];
    args.extend(ckpts.iter().map(String::as_str));
    let o = istanet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    for (k, l) in lines[..5].iter().enumerate() {
        assert!(l.starts_with(&format!("fold {k}: ")), "{l}");
    }
    assert!(lines[5].starts_with("mean: "));
    let o = istanet(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--folds",
        "5",
        "--checkpoint",
        &ckpts[0],
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tokens_csv_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("zero.iskel");
    fs::write(
        &sample,
        format!("ISKEL 1\n3 2 2 2 0\n{}\n", vec!["0"; 24].join(" ")),
    )
    .unwrap();
    let args = [
        "inspect",
        "tokens",
        "--sample",
        sample.to_str().unwrap(),
        "--window",
        "1,2,2",
    ];
    let o = istanet(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("u,t_block,j_block,e_block,s,c,value"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 24);
    let tokens: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(tokens.len(), 2);
    assert_eq!(stdout(&istanet(&args)), text);
}

#[test]
fn attention_csv_is_u_by_u_per_head() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &["--train-per-class", "1", "--test-per-class", "1"],
    );
    let cfg = write_config(dir.path(), "run.json", &config_json(1, 0.05, 4, None, None));
    assert!(istanet(&["train", "--config", &cfg]).status.success());
    let sample = dir.path().join("corpus/test_00000.iskel");
    let ckpt = dir.path().join("run/final.ckpt");
    let o = istanet(&[
        "inspect",
        "attention",
        "--sample",
        sample.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    // 12 frames / 3 by 3 joints by one entity block.
    assert_eq!(
        lines.next(),
        Some("# u_layout t_blocks=4 j_blocks=3 e_blocks=1")
    );
    assert_eq!(lines.next(), Some("block,head,u,v,score"));
    let u = 12;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * u * u);
    for head in ["0", "1"] {
        let h: Vec<_> = rows
            .iter()
            .filter(|r| r[0] == "0" && r[1] == head)
            .collect();
        assert_eq!(h.len(), u * u);
        assert_eq!(
            h.iter()
                .map(|r| r[2])
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            u
        );
        assert_eq!(
            h.iter()
                .map(|r| r[3])
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            u
        );
    }
}

#[test]
fn gradcheck_exit_codes_and_coverage() {
    let ok = istanet(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = stdout(&ok);
    let names: Vec<&str> = text
        .lines()
        .filter(|l| l.ends_with(" ok") || l.ends_with(" FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let model =
        istanet::model::IstaNet::<f64>::new(istanet::gradcheck::miniature_config(), 0).unwrap();
    assert_eq!(names, model.param_names());

    let bad = istanet(&["gradcheck", "--fault", "tanh"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("query"));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &["--train-per-class", "2", "--test-per-class", "1"],
    );
    let cfg = write_config(
        dir.path(),
        "run.json",
        &config_json(20, 1e30, 2, None, None),
    );
    let o = istanet(&["train", "--config", &cfg]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("non-finite loss at epoch") && err.contains("embed.conv.weight="),
        "{err}"
    );
}

/// Renames one key at a random depth of a valid config to a misspelling.
fn misspell(value: &mut serde_json::Value, path: &[usize], suffix: &str) -> bool {
    let serde_json::Value::Object(map) = value else {
        return false;
    };
    let keys: Vec<String> = map.keys().cloned().collect();
    let key = keys[path[0] % keys.len()].clone();
    if path.len() > 1 && misspell(map.get_mut(&key).unwrap(), &path[1..], suffix) {
        return true;
    }
    let v = map.remove(&key).unwrap();
    map.insert(format!("{key}{suffix}"), v);
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn misspelled_keys_are_rejected(path in proptest::collection::vec(0usize..16, 1..4), suffix in "[a-z_]{1,3}") {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("corpus")).unwrap();
        fs::write(dir.path().join("corpus/manifest.txt"), "").unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&config_json(1, 0.1, 2, Some("val"), None)).unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, value.to_string()).unwrap();
        prop_assert!(RunConfigFile::load(&p).is_ok());
        misspell(&mut value, &path, &suffix);
        fs::write(&p, value.to_string()).unwrap();
        prop_assert!(RunConfigFile::load(&p).is_err());
    }
}
