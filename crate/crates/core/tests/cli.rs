use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tvg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvg")).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&tvg(tmp.path(), &["train", "--data", "nowhere"])), 2);
    assert_eq!(code(&tvg(tmp.path(), &["eval", "--checkpoint", "none.ckpt"])), 2);
    assert_eq!(code(&tvg(tmp.path(), &["inspect", "absent.bin"])), 2);
    assert_eq!(code(&tvg(tmp.path(), &["bench", "--config", "missing.json"])), 2);
}

#[test]
fn format_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    fs::write(w.join("junk.bin"), b"\x00\x01\x02junk").unwrap();
    fs::write(w.join("bad.json"), b"{\"seed\": ").unwrap();
    fs::write(w.join("unknown.json"), b"{\"sed\": 1}").unwrap();
    fs::write(w.join("cut.ckpt"), b"NFTVG1\x05").unwrap();
    assert_eq!(code(&tvg(w, &["inspect", "junk.bin"])), 3);
    assert_eq!(code(&tvg(w, &["inspect", "cut.ckpt"])), 3);
    assert_eq!(code(&tvg(w, &["gen-data", "--config", "bad.json"])), 3);
    assert_eq!(code(&tvg(w, &["gen-data", "--config", "unknown.json"])), 3);
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    assert_eq!(code(&tvg(w, &["gen-data", "--count", "2", "--threads", "0"])), 1);
    fs::write(w.join("mismatch.json"), br#"{"data": {"feature_dim": 8}}"#).unwrap();
    assert_eq!(code(&tvg(w, &["gen-data", "--config", "mismatch.json"])), 1);
}

#[test]
fn empty_dataset_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    assert_eq!(code(&tvg(w, &["gen-data", "--count", "0", "--out", "empty"])), 0);
    assert_eq!(fs::read_to_string(w.join("empty/annotations.jsonl")).unwrap(), "");
    // Nothing to fit: a runtime error, not a crash.
    assert_eq!(code(&tvg(w, &["train", "--data", "empty"])), 1);
}

#[test]
fn pipeline_files_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    assert!(tvg(w, &["gen-data", "--count", "4", "--seed", "2"]).status.success());
    let train = tvg(w, &["train", "--steps", "2", "--seed", "2"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let log = fs::read_to_string(w.join("model.ckpt.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log.lines().next().unwrap(), tvg_core::training::LOSS_LOG_HEADER);

    assert!(tvg(w, &["eval"]).status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(w.join("eval.json")).unwrap()).unwrap();
    for key in ["R@1,IoU@0.3", "R@1,IoU@0.5", "R@5,IoU@0.7"] {
        assert!(report["recall"][key].is_number(), "{key}");
    }
    let preds = fs::read_to_string(w.join("eval.json.predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);

    let summary = String::from_utf8(tvg(w, &["inspect", "model.ckpt"]).stdout).unwrap();
    assert!(summary.starts_with("checkpoint:"), "{summary}");
    let feats = fs::read_dir(w.join("data/features")).unwrap().next().unwrap().unwrap().path();
    let summary = String::from_utf8(tvg(w, &["inspect", feats.to_str().unwrap()]).stdout).unwrap();
    assert!(summary.starts_with("features: 100×32"), "{summary}");
    let summary = String::from_utf8(tvg(w, &["inspect", "data/annotations.jsonl"]).stdout).unwrap();
    assert!(summary.starts_with("annotations: 4 queries"), "{summary}");
}

#[test]
fn bench_writes_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path();
    fs::write(w.join("b.json"), br#"{"bench": {"t_values": [30, 40], "l": 5, "radii": [1, "full"]}}"#).unwrap();
    assert!(tvg(w, &["bench", "--config", "b.json", "--repeats", "1"]).status.success());
    let csv = fs::read_to_string(w.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], tvg_core::eval::BENCH_HEADER);
    assert_eq!(lines.len(), 5);
    // Full attention at T=30, L=5: 35².
    assert!(lines.iter().any(|l| l.contains(",1225,")), "{csv}");
}

#[test]
fn help_lists_every_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_tvg")).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen-data", "train", "eval", "bench", "inspect"] {
        assert!(text.contains(sub), "{sub}");
    }
}
