use std::path::Path;
use std::process::{Command, Output};

fn sad(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sad")).args(args).output().expect("spawn sad");
    assert!(
        out.status.success(),
        "sad {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_data(dir: &Path) -> String {
    let data = dir.join("events.csv");
    let data = data.to_str().unwrap().to_string();
    sad(&[
        "generate", "--out", &data, "--users", "14", "--items", "6", "--days", "3", "--rate", "10",
        "--anomaly-fraction", "0.3", "--window-days", "2", "--seed", "4",
    ]);
    data
}

const FAST: [&str; 4] = ["--per-hop", "3", "--epochs", "1"];

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let report = dir.path().join("run.json");
    let report_s = report.to_str().unwrap();

    let out = sad(&[&["train", "--data", &data, "--out", report_s, "--seed", "2"][..], &FAST].concat());
    assert!(stdout(&out).contains("test_auc"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["seed"], 2);
    assert_eq!(json["epochs"].as_array().unwrap().len(), 1);
    let ckpt = report.with_extension("ckpt");
    assert!(ckpt.exists());
    let ckpt_s = ckpt.to_str().unwrap();

    let scores = dir.path().join("scores.csv");
    let eval_json = dir.path().join("eval.json");
    let out = sad(&[
        "eval", "--checkpoint", ckpt_s, "--data", &data, "--per-hop", "3",
        "--scores", scores.to_str().unwrap(), "--out", eval_json.to_str().unwrap(),
    ]);
    assert!(stdout(&out).contains("auc"));
    let rows = csv::Reader::from_path(&scores).unwrap().records().count();
    let events = csv::Reader::from_path(&data).unwrap().records().count();
    assert_eq!(rows, events);
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval_json).unwrap()).unwrap();
    assert_eq!(ev["events"], events);

    let emb = dir.path().join("emb.csv");
    sad(&["export-embeddings", "--checkpoint", ckpt_s, "--data", &data, "--out", emb.to_str().unwrap(), "--per-hop", "3"]);
    let mut reader = csv::Reader::from_path(&emb).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), 130);
    assert_eq!((&header[0], &header[1], &header[129]), ("node_id", "t", "z127"));
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), events);
    assert!(records.iter().all(|r| r.len() == 130 && r[2].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# quick\nablation = time\nper_hop = 3\nepochs = 1\nseed = 7\nalpha = 0.2\n").unwrap();
    let report = dir.path().join("run.json");
    sad(&[
        "train", "--data", &data, "--out", report.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--set", "beta=0.05", "--seed", "3",
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let c = &json["config"];
    assert_eq!(c["ablation"], "time");
    assert_eq!(c["per_hop"], 3);
    assert_eq!(c["loss"]["alpha"], 0.2);
    assert_eq!(c["loss"]["beta"], 0.05);
    assert_eq!(json["seed"], 3);
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs=1\nwarp=9\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sad"))
        .args(["train", "--data", "missing.csv", "--out", "x.json", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("warp"), "{err}");
}

#[test]
fn sweeps_print_tables_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let few = dir.path().join("few.json");
    let out = sad(&[&["fewshot", "--data", &data, "--seeds", "1", "--out", few.to_str().unwrap()][..], &FAST].concat());
    assert_eq!(stdout(&out).lines().count(), 6);
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&few).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);

    let abl = dir.path().join("abl.json");
    let out = sad(&[&["ablate", "--data", &data, "--seeds", "1", "--out", abl.to_str().unwrap()][..], &FAST].concat());
    let text = stdout(&out);
    for v in ["backbone", "dev", "mem", "time", "scl"] {
        assert!(text.contains(v), "{text}");
    }
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&abl).unwrap()).unwrap();
    assert_eq!(rows[2]["variant"], "mem");
    assert_eq!(rows[2]["metrics"]["config"]["drop_ratio"], 0.5);
}
