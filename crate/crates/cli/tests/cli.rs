use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TOY: &str = "\
task = synthetic
seed = 1
classes = 3
features = 16
samples = 300
noise = 1.5
hidden = 32
lr = 0.05
epochs = 200
";

const PRUNE: &str = "\
task = synthetic
seed = 4
classes = 4
features = 16
samples = 800
noise = 1.0
hidden = 32
lr = 0.02
epochs = 15
lambda = 2e-4
block = 4x4
T = 2
epochs_per_iteration = 3
tau = 0.05
retrain_epochs = 5
";

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_blkrew"))
            .current_dir(self.dir.path())
            .env_remove("BLKREW_THREADS")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{:?}: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// The report written by a successful run, located via its `report:` line.
    fn report(&self, args: &[&str]) -> Value {
        let stdout = self.ok(args);
        let line = stdout
            .lines()
            .find_map(|l| l.strip_prefix("report: "))
            .expect("report line");
        let path = Path::new(line);
        let path = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.dir.path().join(path)
        };
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    }
}

#[test]
fn missing_lr_exits_with_usage_code() {
    let sb = Sandbox::new();
    sb.write("run.cfg", &TOY.replace("lr = 0.05\n", ""));
    let out = sb.run(&["train", "--config", "run.cfg", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`lr`"));
    assert!(!sb.path("m.bin").exists());
}

#[test]
fn unknown_key_names_the_line() {
    let sb = Sandbox::new();
    sb.write("run.cfg", &format!("{}learning_rate = 0.1\n", TOY));
    let out = sb.run(&["train", "--config", "run.cfg", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        err.contains("run.cfg:10") && err.contains("learning_rate"),
        "{}",
        err
    );
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        sb.run(&["train", "--config", "missing.cfg", "--out", "m.bin"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let sb = Sandbox::new();
    sb.write("run.cfg", &TOY.replace("epochs = 200", "epochs = 20"));
    sb.ok(&["train", "--config", "run.cfg", "--out", "a.bin"]);
    sb.ok(&["train", "--config", "run.cfg", "--out", "b.bin"]);
    sb.ok(&[
        "--seed", "2", "train", "--config", "run.cfg", "--out", "c.bin",
    ]);
    let read = |n| std::fs::read(sb.path(n)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_ne!(read("a.bin"), read("c.bin"));
}

#[test]
fn dense_toy_training_reaches_calibrated_accuracy() {
    let sb = Sandbox::new();
    sb.write("run.cfg", TOY);
    for seed in 1..=5 {
        let s = seed.to_string();
        let r = sb.report(&[
            "--seed", &s, "train", "--config", "run.cfg", "--out", "m.bin",
        ]);
        let acc = r["train_accuracy"].as_f64().unwrap();
        assert!(acc >= 0.97, "seed {}: train accuracy {}", seed, acc);
        assert_eq!(r["epochs"], 200);
    }
}

#[test]
fn inert_pipeline_keeps_every_weight() {
    let sb = Sandbox::new();
    sb.write(
        "run.cfg",
        &PRUNE
            .replace("lambda = 2e-4", "lambda = 0")
            .replace("tau = 0.05", "tau = 1e-12"),
    );
    let r = sb.report(&["prune", "--config", "run.cfg", "--out", "p.bin"]);
    assert_eq!(r["compression_rate"], 1.0);
    assert_eq!(r["surviving_weights"], r["total_weights"]);
    assert_eq!(r["epochs"]["pretrain"], 15);
}

#[test]
fn prune_reorder_infer_chain() {
    let sb = Sandbox::new();
    sb.write("run.cfg", PRUNE);
    sb.ok(&["train", "--config", "run.cfg", "--out", "dense.bin"]);
    let r = sb.report(&[
        "prune",
        "--config",
        "run.cfg",
        "--checkpoint",
        "dense.bin",
        "--out",
        "pruned.bin",
    ]);
    assert!(r["compression_rate"].as_f64().unwrap() > 1.0);
    assert_eq!(r["epochs"]["pretrain"], 0);
    assert_eq!(
        r["layers"][0]["block_density_histogram"]
            .as_array()
            .unwrap()
            .len(),
        10
    );

    sb.ok(&["reorder", "--checkpoint", "pruned.bin", "--out", "re.bin"]);
    sb.ok(&["reorder", "--checkpoint", "re.bin", "--out", "re2.bin"]);
    assert_eq!(
        std::fs::read(sb.path("re.bin")).unwrap(),
        std::fs::read(sb.path("re2.bin")).unwrap()
    );

    let pruned_train = r["pruned_train_accuracy"].as_f64().unwrap();
    let masked = sb.report(&[
        "infer",
        "--config",
        "run.cfg",
        "--checkpoint",
        "pruned.bin",
        "--split",
        "train",
    ]);
    assert_eq!(masked["accuracy"].as_f64().unwrap(), pruned_train);
    for w in ["1", "2", "4", "8"] {
        let i = sb.report(&[
            "--workers",
            w,
            "infer",
            "--config",
            "run.cfg",
            "--checkpoint",
            "re.bin",
            "--split",
            "train",
        ]);
        assert_eq!(
            i["accuracy"].as_f64().unwrap().to_bits(),
            pruned_train.to_bits(),
            "workers {}",
            w
        );
        assert_eq!(i["representations"][0], "reordered");
    }
    let test = sb.report(&["infer", "--config", "run.cfg", "--checkpoint", "re.bin"]);
    assert_eq!(
        test["accuracy"].as_f64().unwrap(),
        r["pruned_test_accuracy"].as_f64().unwrap()
    );
    assert_eq!(test["split"], "test");

    let summary: Value = serde_json::from_str(&sb.ok(&["report", "re.bin"])).unwrap();
    assert_eq!(summary["surviving_weights"], r["surviving_weights"]);
}

#[test]
fn whole_block_mode_prunes_entire_rows_and_columns() {
    let sb = Sandbox::new();
    sb.write(
        "run.cfg",
        &PRUNE
            .replace("block = 4x4", "block = whole")
            .replace("lambda = 2e-4", "lambda = 1e-3"),
    );
    let r = sb.report(&["prune", "--config", "run.cfg", "--out", "p.bin"]);
    assert_eq!(r["block"], "whole");
    for layer in r["layers"].as_array().unwrap() {
        assert_eq!(layer["block_m"], layer["rows"]);
        assert_eq!(layer["block_n"], layer["cols"]);
    }
    assert!(r["compression_rate"].as_f64().unwrap() > 1.0);
}

#[test]
fn dense_reorder_warns_and_uses_one_group() {
    let sb = Sandbox::new();
    sb.write("run.cfg", &TOY.replace("epochs = 200", "epochs = 2"));
    sb.ok(&["train", "--config", "run.cfg", "--out", "d.bin"]);
    let out = sb.run(&["reorder", "--checkpoint", "d.bin", "--out", "r.bin"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no mask"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("row groups per layer: 1, 1"));
}

#[test]
fn corrupted_model_is_a_runtime_failure() {
    let sb = Sandbox::new();
    sb.write("run.cfg", &TOY.replace("epochs = 200", "epochs = 2"));
    sb.ok(&["train", "--config", "run.cfg", "--out", "d.bin"]);
    let mut bytes = std::fs::read(sb.path("d.bin")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(sb.path("d.bin"), bytes).unwrap();
    let out = sb.run(&["infer", "--config", "run.cfg", "--checkpoint", "d.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn bench_report_covers_all_variants() {
    let sb = Sandbox::new();
    sb.write(
        "bench.cfg",
        "bench_shapes = 64x48x16\nbench_block = 8x8\nrepeats = 3\n",
    );
    let r = sb.report(&["--workers", "2", "bench", "--config", "bench.cfg"]);
    assert_eq!(r["workers"], 2);
    let row = &r["rows"][0];
    for variant in ["dense", "naive_sparse", "reordered"] {
        for field in ["median_ms", "min_ms", "max_ms"] {
            assert!(
                row[variant][field].as_f64().unwrap().is_finite(),
                "{}.{}",
                variant,
                field
            );
        }
    }
    assert!(row["max_abs_error"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn report_pretty_prints_json() {
    let sb = Sandbox::new();
    sb.write("r.json", r#"{"b":1,"a":[1,2]}"#);
    let out = sb.ok(&["report", "r.json"]);
    assert!(out.lines().count() > 1);
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["b"], 1);
}
