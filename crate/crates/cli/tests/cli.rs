use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use ttdp_core::trainer::synthetic_email_corpus;

const ATTACK_HEADER: &str = "method,rank,params,epsilon,ppl,auc,tpr@10%,tpr@1%,tpr@0.1%,tpr@0.01%,seed";

fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("mail.txt"), synthetic_email_corpus(12_000, 60, 3)).unwrap();
    dir
}

fn base_config() -> Value {
    json!({
        "seed": 4,
        "corpus": { "path": "mail.txt", "context_len": 12, "vocab_cap": 64 },
        "model": { "embed_dim": 16, "hidden_dim": 16 },
        "adapter": { "kind": "tt", "rank": 2 },
        "pretrain": { "epochs": 1, "batch_size": 16, "learning_rate": 1.0 },
        "finetune": { "epochs": 2, "batch_size": 16, "learning_rate": 0.5 }
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn ttdp(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ttdp"));
    cmd.args(args).env_remove("TT_DP_SEED");
    if let Some(s) = seed {
        cmd.env("TT_DP_SEED", s);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn attack(dir: &Path, cfg: &Value, seed: Option<&str>) -> (Output, String) {
    let path = write_config(dir, "attack.json", cfg);
    let out = ttdp(&["attack", "--config", path.to_str().unwrap()], seed);
    let csv = String::from_utf8(out.stdout.clone()).unwrap();
    (out, csv)
}

#[test]
fn train_minimal_config_writes_artifacts() {
    let dir = workspace();
    let cfg = write_config(dir.path(), "train.json", &base_config());
    let out_dir = dir.path().join("run");
    let out = ttdp(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,val_ppl,epsilon,sigma,clip_C,adapter_kind,rank,params"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",tt,2,"));
    let ckpt: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["adapters"]["hidden"]["kind"], "tt");
    let ledger: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("ledger.json")).unwrap()).unwrap();
    assert!(ledger["epsilon"].is_null());
}

#[test]
fn private_train_stays_within_budget() {
    let dir = workspace();
    let mut cfg = base_config();
    cfg["finetune"]["learning_rate"] = json!(0.05);
    cfg["finetune"]["privacy"] = json!({ "clip_c": 1.0, "target_epsilon": 0.5 });
    let path = write_config(dir.path(), "train.json", &cfg);
    let out_dir = dir.path().join("dp");
    let out = ttdp(&["train", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let ledger: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("ledger.json")).unwrap()).unwrap();
    let eps = ledger["epsilon"].as_f64().unwrap();
    assert!(eps > 0.0 && eps <= 0.5, "{eps}");
    let entries = ledger["entries"].as_array().unwrap();
    assert!(entries.iter().all(|e| e["epsilon"].as_f64().unwrap() <= 0.5));
}

#[test]
fn missing_corpus_is_a_config_error() {
    let dir = workspace();
    let mut cfg = base_config();
    cfg["corpus"]["path"] = json!("absent.txt");
    let path = write_config(dir.path(), "train.json", &cfg);
    let out = ttdp(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("corpus.path"), "{}", stderr(&out));
}

#[test]
fn malformed_and_invalid_configs_name_the_problem() {
    let dir = workspace();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"seed\": 1,\n  \"corpus\": \n}").unwrap();
    let out = ttdp(&["attack", "--config", path.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));

    let mut cfg = base_config();
    cfg["finetune"]["batch_sise"] = json!(3);
    let (out, _) = attack(dir.path(), &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("batch_sise"), "{}", stderr(&out));

    let mut cfg = base_config();
    cfg["sweep"] = json!({ "methods": ["tt"], "ranks": [3], "epsilons": [1.0] });
    let (out, _) = attack(dir.path(), &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sweep.ranks"), "{}", stderr(&out));

    let mut cfg = base_config();
    cfg["model"]["vocab_size"] = json!(3);
    let (out, _) = attack(dir.path(), &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.vocab_size"), "{}", stderr(&out));

    let out = ttdp(&["attack", "--config", path.to_str().unwrap()], Some("minus one"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = workspace();
    let mut cfg = base_config();
    cfg["corpus"]["context_len"] = json!(100_000);
    let (out, _) = attack(dir.path(), &cfg, None);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn single_attack_gives_one_row() {
    let dir = workspace();
    let (out, csv) = attack(dir.path(), &base_config(), None);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ATTACK_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("tt,2,"));
    assert!(lines[1].ends_with(",4"));
}

#[test]
fn attack_is_byte_deterministic_and_seed_overridable() {
    let dir = workspace();
    let mut cfg = base_config();
    cfg["finetune"]["privacy"] = json!({ "clip_c": 1.0, "target_epsilon": 3.0 });
    let (a, first) = attack(dir.path(), &cfg, None);
    let (_, second) = attack(dir.path(), &cfg, None);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(first, second);
    assert!(first.lines().nth(1).unwrap().contains(",3.0,") || first.lines().nth(1).unwrap().contains(",3,"));

    let (b, reseeded) = attack(dir.path(), &cfg, Some("9"));
    assert!(b.status.success());
    assert!(reseeded.lines().nth(1).unwrap().ends_with(",9"));
    assert_ne!(first, reseeded);
}

#[test]
fn sweep_block_gives_sixty_four_rows() {
    let dir = workspace();
    let mut cfg = base_config();
    cfg["finetune"]["epochs"] = json!(1);
    cfg["finetune"]["privacy"] = json!({ "clip_c": 1.0, "target_epsilon": 1.0 });
    cfg["sweep"] = json!({
        "methods": ["tt", "lora"],
        "ranks": [2, 4, 6, 8, 10, 12, 14, 16],
        "epsilons": [0.5, 1.0, 3.0, 5.0],
        "learning_rates": { "tt": 0.05, "lora": 0.01 }
    });
    cfg["output"] = json!("sweep.csv");
    let (out, stdout) = attack(dir.path(), &cfg, None);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 64);
    let mut keys: Vec<(String, String, String)> =
        rows.iter().map(|r| (r[0].clone(), r[1].clone(), r[3].clone())).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 64);

    let report_dir = dir.path().join("report");
    let out = ttdp(
        &["report", dir.path().join("sweep.csv").to_str().unwrap(), "--out", report_dir.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    let summary = summary.as_array().unwrap();
    assert_eq!(summary.len(), 8);
    assert!(summary.iter().all(|s| s["ranks"] == 8));
    let tt_half: Vec<f64> = rows.iter().filter(|r| r[0] == "tt" && r[3] == "0.5").map(|r| r[5].parse().unwrap()).collect();
    let mean = tt_half.iter().sum::<f64>() / tt_half.len() as f64;
    let got = summary.iter().find(|s| s["method"] == "tt" && s["epsilon"] == 0.5).unwrap();
    assert!((got["auc"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn report_averages_and_rejects_foreign_schemas() {
    let dir = workspace();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, format!("{ATTACK_HEADER}\ntt,2,40,1.0,20.0,0.5,0.1,0.01,0.0,0.0,1\n")).unwrap();
    std::fs::write(&b, format!("{ATTACK_HEADER}\ntt,4,80,1.0,22.0,0.7,0.3,0.03,0.0,0.0,1\n")).unwrap();
    let out_dir = dir.path().join("r");
    let out = ttdp(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "tt");
    assert_eq!(row[2], "2");
    assert!((row[5].parse::<f64>().unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "method,rank,auc\ntt,2,0.5\n").unwrap();
    let out = ttdp(&["report", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("schema mismatch"), "{}", stderr(&out));
}
