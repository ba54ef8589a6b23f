use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
method = "mocl"
seeds = [1]
output_dir = "out"

[model]
d_model = 16
n_heads = 2
n_layers = 1
ffn_dim = 32
max_len = 16

[train]
epochs = 3

[warm]
epochs = 1

[data.generate]
n_tasks = 3
train_size = 24
val_size = 6
test_size = 12
"#;

fn mocl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) {
    fs::write(dir.join("exp.toml"), text).unwrap();
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn run_twice_gives_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        write_config(d, TINY);
        ok(&mocl(d, &["run", "--config", "exp.toml"]));
    }
    for f in ["metrics_til.json", "metrics_cil.json", "matrix_til.csv", "heatmap.csv", "reference.csv"] {
        let rel = format!("out/mocl/1/{f}");
        assert_eq!(read(a.path(), &rel), read(b.path(), &rel), "{f} differs");
    }
    assert_eq!(read(a.path(), "out/mocl/aggregate.json"), read(b.path(), "out/mocl/aggregate.json"));
}

#[test]
fn staged_pipeline_reproduces_run() {
    let whole = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    write_config(whole.path(), TINY);
    write_config(staged.path(), TINY);
    ok(&mocl(whole.path(), &["run", "--config", "exp.toml"]));
    for stage in ["gen-data", "train", "eval"] {
        ok(&mocl(staged.path(), &[stage, "--config", "exp.toml"]));
    }
    for f in ["metrics_til.json", "metrics_cil.json", "matrix_til.csv", "matrix_cil.csv", "heatmap.csv", "suite.json"] {
        let rel = format!("out/mocl/1/{f}");
        assert_eq!(read(whole.path(), &rel), read(staged.path(), &rel), "{f} differs");
    }
}

#[test]
fn heatmap_subcommand_is_idempotent() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), TINY);
    ok(&mocl(d.path(), &["run", "--config", "exp.toml"]));
    let first = read(d.path(), "out/mocl/1/heatmap.csv");
    ok(&mocl(d.path(), &["heatmap", "--config", "exp.toml"]));
    let second = read(d.path(), "out/mocl/1/heatmap.csv");
    ok(&mocl(d.path(), &["heatmap", "--config", "exp.toml"]));
    assert_eq!(first, second);
    assert_eq!(second, read(d.path(), "out/mocl/1/heatmap.csv"));
}

#[test]
fn fwt_on_hand_written_files() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("m.csv"),
        "task,a,b,c\na,0.500000,,\nb,0.400000,0.700000,\nc,0.300000,0.600000,0.900000\n",
    )
    .unwrap();
    fs::write(d.path().join("r.csv"), "task,accuracy\na,0.5\nb,0.6\nc,0.6\n").unwrap();
    let out = mocl(d.path(), &["fwt", "--matrix", "m.csv", "--reference", "r.csv"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["fwt"].as_f64().unwrap() - 0.2).abs() < 1e-12);
    assert!((v["avg"].as_f64().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn seeds_produce_metric_files_and_aggregate() {
    let d = tempfile::tempdir().unwrap();
    write_config(
        d.path(),
        &TINY.replace("seeds = [1]", "seeds = [1, 2, 3]").replace("method = \"mocl\"", "method = \"per_task\""),
    );
    ok(&mocl(d.path(), &["run", "--config", "exp.toml"]));
    for s in 1..=3 {
        let m: serde_json::Value = serde_json::from_str(&read(d.path(), &format!("out/per_task/{s}/metrics_til.json"))).unwrap();
        assert_eq!(m["seed"], s);
        // Per-task fine-tuning transfers nothing, exactly.
        assert_eq!(m["fwt"].as_f64(), Some(0.0));
    }
    let agg: serde_json::Value = serde_json::from_str(&read(d.path(), "out/per_task/aggregate.json")).unwrap();
    assert_eq!(agg["seeds"], serde_json::json!([1, 2, 3]));
}

#[test]
fn invalid_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), "method = \"mocl\"\nbogus_key = 1\n");
    assert_eq!(mocl(d.path(), &["run", "--config", "exp.toml"]).status.code(), Some(2));
    write_config(d.path(), "method = \"progressive\"\n[peft]\nkind = \"lora\"\n");
    assert_eq!(mocl(d.path(), &["run", "--config", "exp.toml"]).status.code(), Some(2));
    assert_eq!(mocl(d.path(), &["run", "--config", "missing.toml"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), &TINY.replace("epochs = 3", "epochs = 3\nlr = 1e300"));
    let out = mocl(d.path(), &["run", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unwritable_output_exits_4() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("blocker"), "a file, not a directory").unwrap();
    write_config(d.path(), &TINY.replace("output_dir = \"out\"", "output_dir = \"blocker/out\""));
    assert_eq!(mocl(d.path(), &["run", "--config", "exp.toml"]).status.code(), Some(4));
}

#[test]
fn missing_output_dir_is_created() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), &TINY.replace("output_dir = \"out\"", "output_dir = \"deep/nested/out\""));
    ok(&mocl(d.path(), &["gen-data", "--config", "exp.toml"]));
    assert!(d.path().join("deep/nested/out/mocl/1/suite.json").exists());
}

#[test]
fn eval_refuses_stale_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), TINY);
    for stage in ["gen-data", "train"] {
        ok(&mocl(d.path(), &[stage, "--config", "exp.toml"]));
    }
    // The suite is regenerated under a changed config; the old checkpoint no
    // longer matches it.
    write_config(d.path(), &TINY.replace("epochs = 3", "epochs = 2"));
    ok(&mocl(d.path(), &["gen-data", "--config", "exp.toml"]));
    let out = mocl(d.path(), &["eval", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            mocl_core::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2, "expected example configs in {}", dir.display());
}
