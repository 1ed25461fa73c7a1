use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn forge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = forge(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TOY: &str = "\
hidden_size = 32
intermediate_size = 64
max_position_embeddings = 96
num_attention_heads = 2
num_hidden_layers = 1
vocab_size = 300
preset = experiment2
total_steps = 6
warmup_steps = 1
lr_max = 0.003
lr_min = 0.0003
global_batch_sequences = 2
context_length = 96
checkpoint_every = 3
";

/// synth → tokenizer-train → preprocess → train → quantize → eval fim.
fn pipeline(dir: &Path) {
    fs::write(dir.join("toy.cfg"), TOY).unwrap();
    ok(dir, &["synth", "--docs", "60", "--max-fields", "3", "--out", "docs.jsonl", "--seed", "4"]);
    ok(dir, &["tokenizer-train", "--input", "docs.jsonl", "--vocab-size", "300", "--out", "vocab"]);
    let stats = ok(dir, &["preprocess", "--input", "docs.jsonl", "--vocab", "vocab", "--out", "data", "--fim-rate", "0.5", "--seed", "4"]);
    let stats: serde_json::Value = serde_json::from_str(stats.trim()).unwrap();
    assert_eq!(stats["docs"], 60);
    assert!(stats["fim"]["fim_fraction"].as_f64().unwrap() > 0.0);
    ok(dir, &["train", "--config", "toy.cfg", "--data", "data", "--vocab", "vocab", "--out", "run", "--seed", "9"]);
    ok(dir, &["quantize", "--ckpt", "run/ckpt-000006.bin", "--scheme", "q8", "--out", "model.ntq"]);
    let report = ok(dir, &[
        "eval", "fim", "--model", "model.ntq", "--vocab", "vocab", "--solutions", "docs.jsonl", "--seed", "1", "--limit", "3",
        "--max-new", "8", "--out", "fim",
    ]);
    assert!(report.lines().last().unwrap().starts_with("fim exact match = "), "{report}");
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(forge(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(dir.path(), &["quantize", "--ckpt", "missing.bin", "--scheme", "q4", "--out", "x.ntq"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
}

#[test]
fn bad_scheme_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(dir.path(), &["quantize", "--ckpt", "a.bin", "--scheme", "q3", "--out", "x.ntq"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn info_reports_base_1b_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/base-1b.cfg");
    let text = ok(dir.path(), &["info", "--config", cfg.to_str().unwrap()]);
    assert!(text.contains("parameters: 1137207296 (1.137e9)"), "{text}");
    assert!(text.contains("bf16: 2274414592 bytes (2.27 GB)"), "{text}");
    for scheme in ["f32", "q8", "q4"] {
        assert!(text.contains(&format!("{scheme} container: ")), "{text}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("info.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "info");
    assert_eq!(m["config"]["parameters"], 1_137_207_296u64);
}

#[test]
fn toy_pipeline_runs_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "docs.jsonl",
        "vocab/merges.txt",
        "data.bin",
        "data.idx",
        "run/ckpt-000003.bin",
        "run/ckpt-000006.bin",
        "run/ckpt-000006.state",
        "run/loss.tsv",
        "model.ntq",
        "fim/report.txt",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["seeds"]["train"], 9);
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert!(m["config"]["run"].as_str().unwrap().contains("fim_rate = 0.5"));
    for manifest in ["docs.jsonl.manifest.json", "vocab/manifest.json", "data.manifest.json", "model.ntq.manifest.json", "fim/manifest.json"] {
        assert!(a.path().join(manifest).exists(), "{manifest}");
    }

    // Resume picks up the last checkpoint and leaves the final weights unchanged.
    let dir = a.path();
    ok(dir, &["train", "--config", "toy.cfg", "--data", "data", "--vocab", "vocab", "--out", "run", "--seed", "9", "--resume"]);
    assert_eq!(fs::read(dir.join("run/loss.tsv")).unwrap(), fs::read(b.path().join("run/loss.tsv")).unwrap());

    // Generation from standard input, and infilling, from the float checkpoint.
    let mut child = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["generate", "--model", "run/ckpt-000006.bin", "--vocab", "vocab", "--prompt", "-", "--max-new", "5"])
        .current_dir(dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"public class").unwrap();
    assert!(child.wait_with_output().unwrap().status.success());
    assert!(dir.join("generate.manifest.json").exists());
    fs::write(dir.join("pre.txt"), "public class A {\n").unwrap();
    fs::write(dir.join("suf.txt"), "\n}\n").unwrap();
    ok(dir, &["infill", "--model", "model.ntq", "--vocab", "vocab", "--prefix", "pre.txt", "--suffix", "suf.txt", "--max-new", "4", "--stop", "\\n"]);
}

#[test]
fn passk_with_trivial_verifier() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    fs::write(
        d.join("suite.jsonl"),
        "{\"id\":\"yes\",\"prompt\":\"public\",\"verifier_cmd\":\"cat >/dev/null; true\"}\n\
         {\"id\":\"no\",\"prompt\":\"class\",\"verifier_cmd\":\"cat >/dev/null; false\",\"timeout\":5}\n",
    )
    .unwrap();
    let text = ok(d, &[
        "eval", "passk", "--model", "model.ntq", "--vocab", "vocab", "--suite", "suite.jsonl", "-n", "3", "-k", "2", "--max-new", "4",
        "--temp", "0.8", "--threads", "2", "--out", "pk",
    ]);
    assert_eq!(text.lines().last().unwrap(), "pass@k 2 = 0.5");
    assert_eq!(fs::read_to_string(d.join("pk/completions.jsonl")).unwrap().lines().count(), 6);
}
