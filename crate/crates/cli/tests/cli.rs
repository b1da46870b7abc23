//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixprompt"))
}

const TINY_CONFIG: &str = r#"
[dataset]
n_classes = 3
image_dim = 8
train_per_class = 6
test_per_class = 4

[encoder]
hidden_dim = 6
feature_dim = 4
token_dim = 3

[train]
epochs = 2
batch_size = 9
prompt_count = 2
ctx_len = 2

[train.attack]
epsilon = 0.02
steps = 2
step_size = 0.0133

[eval]
pgd_steps = 2
n_seeds = 2
"#;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn verify_theorem_reports_zero_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["verify-theorem", "--draws", "10000", "--seed", "3"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("draws: 10000"), "{stdout}");
    assert!(stdout.contains("violations: 0"), "{stdout}");
    let report = std::fs::read_to_string(dir.path().join("theorem_report.txt")).unwrap();
    assert!(report.contains("violations: 0"));
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = bin()
        .args(["gen-data"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = mixprompt::synth::load_dataset(&run.join("dataset.bin")).unwrap();
    assert_eq!(ds.train.len(), 18);
    assert_eq!(ds.test.len(), 12);
    // manifest lists every output
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    for file in ["config.toml", "dataset.bin", "manifest.json"] {
        assert!(manifest.contains(file), "{manifest}");
    }
}

#[test]
fn train_then_zero_epsilon_eval_matches_clean_in_emitted_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let train_dir = dir.path().join("train");
    let out = bin()
        .args(["train"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&train_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let eval_dir = dir.path().join("eval");
    let out = bin()
        .args(["eval", "--epsilon", "0"])
        .arg("--config")
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(train_dir.join("checkpoint.ckpt"))
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["robust_acc_pgd"], metrics["clean_acc"], "{metrics}");
    assert_eq!(metrics["robust_acc_fgsm"], metrics["clean_acc"], "{metrics}");
}

#[test]
fn identical_runs_emit_byte_identical_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = bin()
            .args(["train"])
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["history.jsonl", "metrics.json", "checkpoint.ckpt", "config.toml", "manifest.json"] {
        let fa = std::fs::read(a.join(file)).unwrap();
        let fb = std::fs::read(b.join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
}

#[test]
fn sweep_emits_table_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = bin()
        .args(["sweep", "--recipe", "table5"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.join("table5_K.csv")).unwrap();
    assert!(csv.starts_with("config,n_seeds,"));
    assert_eq!(csv.lines().count(), 5, "{csv}"); // header + K in {1,2,4,8}
    assert!(run.join("table5_K.txt").exists());
}

#[test]
fn distinct_diagnostics_for_distinct_failures() {
    let dir = tempfile::tempdir().unwrap();

    // unknown recipe
    let out = bin()
        .args(["sweep", "--recipe", "table99"])
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown recipe `table99`"), "{err}");

    // unparseable config
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = \"many\"\n").unwrap();
    let out = bin()
        .args(["train"])
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config"), "{err}");

    // unknown config key
    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[train]\nepislon = 0.1\n").unwrap();
    let out = bin()
        .args(["train"])
        .arg("--config")
        .arg(&typo)
        .arg("--out")
        .arg(dir.path().join("z"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epislon"));

    // missing checkpoint
    let out = bin()
        .args(["eval"])
        .arg("--checkpoint")
        .arg(dir.path().join("nope.ckpt"))
        .arg("--out")
        .arg(dir.path().join("w"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn seed_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = bin()
        .args(["gen-data", "--seed-data", "123"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success());
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("data = 123"), "{echoed}");
    // the source file is preserved verbatim alongside
    let source = std::fs::read_to_string(run.join("config.source.toml")).unwrap();
    assert_eq!(source, TINY_CONFIG);
}
