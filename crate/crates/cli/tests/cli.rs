use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
[model]
channels = 8
hidden = 4

[stfd]
reduction = 2
embedding_dim = 6

[contrast]
n_pos_hard = 4
n_neg_hard = 4
n_neg_rand = 4

[train]
epochs = 2
batch_size = 4
"#;

fn stdcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdcl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, seed: u64) -> String {
    let path = dir.join(name).display().to_string();
    let seed = seed.to_string();
    let out = stdcl(&["gen-data", "--per-class", "3", "--joints", "4", "--frames", "6", "--seed", &seed, "-o", &path]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> std::path::PathBuf {
    let data = gen(dir, "train.jsonl", 1);
    let cfg = tiny_config(dir);
    let out_dir = dir.join(out).display().to_string();
    let mut args = vec!["train", "-c", &cfg, "--data", &data, "--out", &out_dir];
    args.extend_from_slice(extra);
    let res = stdcl(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    dir.join(out)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_requested_count_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", 5);
    let b = gen(dir.path(), "b.jsonl", 5);
    let text = std::fs::read_to_string(&a).unwrap();
    // header line plus one record per sequence; 2x2 motifs, 3 per class
    assert_eq!(text.lines().count(), 1 + 12);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn gen_data_rejects_single_motif() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin").display().to_string();
    let out = stdcl(&["gen-data", "--spatial-motifs", "1", "-o", &path]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("motif"), "{}", stderr(&out));
}

#[test]
fn ablation_manifests_differ_only_in_framework_flag() {
    let dir = tempfile::tempdir().unwrap();
    let with = manifest(&train(dir.path(), "with", &[]));
    let without = manifest(&train(dir.path(), "without", &["--no-framework"]));
    assert_eq!(with["config"]["train"]["framework_enabled"], true);
    assert_eq!(without["config"]["train"]["framework_enabled"], false);
    let mut a = with.clone();
    a["config"]["train"]["framework_enabled"] = false.into();
    assert_eq!(a, without);
}

#[test]
fn tau_override_is_recorded_and_rerun_from_manifest_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = train(dir.path(), "first", &["--tau", "0.5"]);
    assert_eq!(manifest(&first)["config"]["contrast"]["tau"], 0.5);
    let manifest_path = first.join("manifest.json").display().to_string();
    let second = dir.path().join("second").display().to_string();
    let out = stdcl(&["train", "--manifest", &manifest_path, "--out", &second]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&first), read(Path::new(&second)));
}

#[test]
fn eval_reports_csv_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &[]);
    let test = gen(dir.path(), "test.jsonl", 2);
    let ckpt = run.join("final.ckpt").display().to_string();
    let csv = dir.path().join("report.csv");
    let emb = dir.path().join("emb.tsv");
    let out = stdcl(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--data",
        &test,
        "--csv",
        &csv.display().to_string(),
        "--embeddings",
        &emb.display().to_string(),
        "--temporal-motifs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let acc: f64 = row[headers.iter().position(|h| h == "accuracy").unwrap()].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let emb = std::fs::read_to_string(&emb).unwrap();
    let lines: Vec<&str> = emb.lines().collect();
    // header plus 12 instances; index, label, then 6 spatial and 6 temporal values
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[1].split('\t').count(), 2 + 6 + 6);
}

#[test]
fn baseline_checkpoint_has_no_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &["--no-framework"]);
    let test = gen(dir.path(), "test.jsonl", 2);
    let ckpt = run.join("final.ckpt").display().to_string();
    let emb = dir.path().join("emb.tsv").display().to_string();
    assert_eq!(code(&stdcl(&["eval", "--checkpoint", &ckpt, "--data", &test])), 0);
    assert_eq!(code(&stdcl(&["eval", "--checkpoint", &ckpt, "--data", &test, "--embeddings", &emb])), 2);
}

#[test]
fn corrupt_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let test = gen(dir.path(), "test.jsonl", 2);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE and some bytes").unwrap();
    let out = stdcl(&["eval", "--checkpoint", &bad.display().to_string(), "--data", &test]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn missing_data_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o").display().to_string();
    assert_eq!(code(&stdcl(&["train", "-c", &cfg, "--data", "/nonexistent.jsonl", "--out", &out])), 2);
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "[train]\nepochs = \"many\"\n").unwrap();
    let res = stdcl(&["train", "-c", &broken.display().to_string(), "--out", &out]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("line 2"), "{}", stderr(&res));
}

#[test]
fn gradcheck_filters_and_detects_injected_faults() {
    let ok = stdcl(&["gradcheck", "--op", "matmul", "--instances", "3"]);
    assert_eq!(code(&ok), 0);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 1, "{stdout}");

    let bad = stdcl(&["gradcheck", "--op", "matmul", "--instances", "3", "--inject-fault", "matmul"]);
    assert_eq!(code(&bad), 4);
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL matmul")), "{stdout}");
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_stdcl"))
        .args(["gradcheck", "--op", "matmul", "--instances", "1"])
        .env("STDCL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
