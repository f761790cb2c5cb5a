use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[suite]
num_tasks = 3
classes_per_task = 3
samples_per_class = 40
input_dim = 8

[model]
hidden_dim = 12

[pretrain]
iterations = 40

[finetune]
iterations = 20
batch_size = 16
warmup_steps = 2

[grid]
points = 4
sample_cap = 64
"#;

fn talos(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talos"))
        .arg("--config")
        .arg(out.join("run.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn talos")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = talos(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn full_workflow_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    std::fs::write(out.join("run.toml"), SMALL).unwrap();

    let hash = ok(out, &["pretrain"]);
    assert_eq!(hash.trim().len(), 64);
    assert!(out.join("pretrained.tlsp").is_file());
    assert!(out.join("suite").is_dir());

    ok(out, &["finetune", "--jobs", "2"]);
    for t in 0..3 {
        for ext in ["tvec", "tmsk"] {
            assert!(out.join(format!("talos/task{t}.{ext}")).is_file());
        }
        assert!(out.join(format!("talos/task{t}_log.jsonl")).is_file());
        assert!(out.join(format!("talos/task{t}_layers.csv")).is_file());
    }

    ok(out, &["merge"]);
    ok(out, &["negate", "--task", "1"]);
    ok(out, &["eval-disentanglement", "--tasks", "0", "2"]);
    ok(out, &["eval-localization"]);
    ok(out, &["eval-diagnostics"]);
    let summary = ok(out, &["report"]);
    for stem in [
        "merge_talos",
        "negate_talos_task1",
        "disentanglement_talos_0_2",
        "localization_talos",
        "diagnostics_talos",
    ] {
        assert!(summary.contains(stem), "{stem} missing from\n{summary}");
    }
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("reports/merge_talos.json")).unwrap())
            .unwrap();
    assert_eq!(doc["config"]["suite"]["num_tasks"], 3);
    assert!(out.join("reports/prune_grid.csv").is_file());
    assert!(out.join("reports/localization_talos.csv").is_file());
}

#[test]
fn calibrate_then_finetune_reuses_mask() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    std::fs::write(out.join("run.toml"), SMALL).unwrap();
    ok(out, &["pretrain"]);
    let printed = ok(out, &["calibrate", "--task", "0"]);
    assert!(printed.contains("task 0: kept"));
    let mask = std::fs::read(out.join("talos/task0.tmsk")).unwrap();
    assert!(out.join("talos/task0_scores.csv").is_file());
    ok(out, &["finetune", "--task", "0"]);
    assert_eq!(std::fs::read(out.join("talos/task0.tmsk")).unwrap(), mask);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    std::fs::write(out.join("run.toml"), SMALL).unwrap();
    let read = |p: &str| std::fs::read(out.join(p)).unwrap();
    ok(out, &["pretrain"]);
    let ck = read("pretrained.tlsp");
    ok(out, &["finetune", "--task", "2"]);
    let tv = read("talos/task2.tvec");
    let mk = read("talos/task2.tmsk");
    ok(out, &["pretrain"]);
    ok(out, &["finetune", "--task", "2"]);
    assert_eq!(read("pretrained.tlsp"), ck);
    assert_eq!(read("talos/task2.tvec"), tv);
    assert_eq!(read("talos/task2.tmsk"), mk);

    ok(out, &["--set", "method=full_ft", "finetune", "--task", "2"]);
    let dense = talos_vector_nnz(&out.join("full_ft/task2.tvec"));
    let sparse = talos_vector_nnz(&out.join("talos/task2.tvec"));
    assert!(sparse * 5 < dense, "talos {sparse} vs full {dense}");
}

fn talos_vector_nnz(path: &Path) -> usize {
    talos::task_vector::load_vector(path).unwrap().nnz()
}

#[test]
fn missing_output_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_talos"))
        .arg("--config")
        .arg(dir.path().join("run.toml"))
        .arg("--out")
        .arg(dir.path().join("absent"))
        .arg("pretrain")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    std::fs::write(out.join("run.toml"), SMALL).unwrap();

    let bad = talos(out, &["--set", "sparsity=2.0", "pretrain"]);
    assert_eq!(bad.status.code(), Some(2));

    let missing = talos(out, &["merge"]);
    assert_eq!(missing.status.code(), Some(4));

    ok(out, &["pretrain"]);
    let mismatch = talos(out, &["--set", "model.hidden_dim=7", "merge"]);
    assert_eq!(mismatch.status.code(), Some(2));

    let range = talos(out, &["finetune", "--task", "9"]);
    assert_eq!(range.status.code(), Some(2));
}
