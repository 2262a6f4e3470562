//! End-to-end command-line behavior: output contracts, exit codes, file
//! round trips.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqlat"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("seqlat-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const GAP_CONFIG: &str = r#"
seed = 100
vocab = 4

[context]
order = 2

[lattice]
variant = "frame"
frames = 8

[weights]
variant = "unshared"
normalization = "local_softmax"
dim = 16

[encoder]
variant = "causal_rnn"
input_dim = 6

[train]
task = "late_evidence"
steps = 40
batch_size = 8
step_size = 0.02
eval_items = 32
"#;

#[test]
fn demo_prints_the_counts_and_passes() {
    let out = bin().arg("demo").output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("81"));
    assert!(stdout.contains("6 alignments"));
    assert!(stdout.contains("All checks passed"));
}

#[test]
fn demo_fault_injection_fails() {
    let out = bin().args(["demo", "--inject-fault"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn check_scopes_run_and_fault_injection_fails() {
    let out = bin().args(["check", "--scope", "grad"]).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] gradient-fd"));

    let out = bin()
        .args(["check", "--scope", "grad", "--inject-fault"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["check", "--scope", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = bin()
        .args(["demo", "--definitely-not-a-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_decode_roundtrip_on_easy_task() {
    let dir = workdir("train");
    let config_path = dir.join("run.toml");
    std::fs::write(
        &config_path,
        r#"
seed = 5
vocab = 3

[context]
order = 1

[lattice]
variant = "frame"
frames = 8

[weights]
variant = "unshared"
normalization = "local_softmax"
dim = 12

[encoder]
variant = "causal_rnn"
input_dim = 5

[train]
task = "easy"
steps = 250
batch_size = 16
step_size = 0.03
eval_items = 64
"#,
    )
    .unwrap();
    let model_path = dir.join("model.slm");
    let out = bin()
        .args(["train", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&model_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ler_line = stdout
        .lines()
        .find(|l| l.contains("final label error rate"))
        .expect("ler line");
    let ler: f64 = ler_line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(ler < 0.05, "end-to-end error rate too high: {ler}");
    assert!(dir.join("model.report.txt").exists());

    // Decode a hand-made feature file: label 1, silence, label 0.
    let features = dir.join("features.txt");
    std::fs::write(&features, "0 1 0 0 0\n0 0 0 0 0\n1 0 0 0 0\n").unwrap();
    let out = bin()
        .args(["decode", "--model"])
        .arg(&model_path)
        .arg("--features")
        .arg(&features)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("labels: 1 0"), "{stdout}");

    // Zero-frame input decodes to the empty sequence.
    let empty = dir.join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let out = bin()
        .args(["decode", "--model"])
        .arg(&model_path)
        .arg("--features")
        .arg(&empty)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("labels: \n") || stdout.starts_with("labels: \n"),
        "{stdout}"
    );

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn malformed_inputs_exit_with_data_errors() {
    let dir = workdir("bad");
    let bad_config = dir.join("bad.toml");
    std::fs::write(&bad_config, "this is not toml at all [").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&bad_config)
        .arg("--out")
        .arg(dir.join("m.slm"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let missing = bin()
        .args(["decode", "--model"])
        .arg(dir.join("missing.slm"))
        .arg("--features")
        .arg(dir.join("missing.txt"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));

    // Train without either --config or --preset is a usage error.
    let out = bin()
        .args(["train", "--out"])
        .arg(dir.join("m.slm"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn preset_training_smoke() {
    let dir = workdir("preset");
    let model_path = dir.join("ctc.slm");
    let out = bin()
        .args(["train", "--preset", "ctc", "--steps", "3", "--out"])
        .arg(&model_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(model_path.exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gap_writes_a_machine_readable_table() {
    let dir = workdir("gap");
    let config_path = dir.join("gap.toml");
    std::fs::write(&config_path, GAP_CONFIG).unwrap();
    let table_path = dir.join("gap.tsv");
    // Tiny budget: this exercises the plumbing, not the criterion.
    let out = bin()
        .args(["gap", "--config"])
        .arg(&config_path)
        .args(["--seeds", "3", "--out"])
        .arg(&table_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = std::fs::read_to_string(&table_path).unwrap();
    assert!(table.starts_with("encoder\tnormalization\torder\tmedian_ler\tseed_spread"));
    assert_eq!(table.lines().count(), 5);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_prints_the_grid() {
    let out = bin()
        .args([
            "bench", "--frames", "12", "--vocab", "4", "--dim", "8", "--reps", "2",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("train[ms]"));
    assert!(stdout.contains("shared-rnn"));
}
