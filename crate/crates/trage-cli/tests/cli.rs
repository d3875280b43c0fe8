//! Contract tests for the `trage` binary: exit codes, artifact layout,
//! config precedence, locking, and run reproducibility. Every test spawns
//! the real executable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use trage::synth::two_protocol_dataset;

/// The binary under test, with the seed environment variable cleared so a
/// developer's shell cannot leak into precedence tests.
fn trage() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trage"));
    c.env_remove("TRAGE_SEED");
    c
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\n--- stdout ---\n{}\n--- stderr ---\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// A synthetic capture plus a labeled-flow manifest and a smoke-scale run
/// config, all inside one temp directory.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(flows_per_class: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ds = two_protocol_dataset(flows_per_class, seed);
        fs::write(dir.path().join("traffic.pcap"), &ds.pcap).unwrap();
        let mut manifest = String::from("pcap,flow,label\n");
        for (i, label) in ds.labels.iter().enumerate() {
            manifest.push_str(&format!("traffic.pcap,{i},{label}\n"));
        }
        fs::write(dir.path().join("flows.csv"), manifest).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Write a config with tiny encoders so spawned runs finish in seconds.
    fn write_config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"output_dir = "out"

[dataset]
pcaps = ["traffic.pcap"]
manifest = "flows.csv"

[header_encoder]
max_len = 32
hidden = 16
layers = 1
heads = 2

[payload_encoder]
max_len = 32
hidden = 16
layers = 1
heads = 2

[pretrain]
steps = 10
batch_size = 8

[finetune]
epochs = 2
batch_size = 8
head_hidden = 16
{extra}"#
        );
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }
}

fn count_data_rows(csv_path: &Path) -> usize {
    fs::read_to_string(csv_path).unwrap().lines().count().saturating_sub(1)
}

fn effective_toml(out_dir: &Path) -> toml::Value {
    let text = fs::read_to_string(out_dir.join("effective_config.toml")).unwrap();
    text.parse().unwrap()
}

#[test]
fn pretrain_writes_checkpoint_log_and_effective_config() {
    let fx = Fixture::new(12, 3);
    let cfg = fx.write_config("run.toml", "");
    let out = trage().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_exit(&out, 0);

    let out_dir = fx.path("out");
    let ckpt = fs::read(out_dir.join("checkpoint.trge")).unwrap();
    assert_eq!(&ckpt[..4], b"TRGE", "checkpoint must carry its magic");
    assert_eq!(count_data_rows(&out_dir.join("pretrain_log.csv")), 10, "one row per step");
    assert!(out_dir.join("effective_config.toml").is_file());
    assert!(!out_dir.join("run.lock").exists(), "lock must be released after the run");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = trage().arg("frobnicate").output().unwrap();
    assert_exit(&out, 1);
    assert!(stderr_of(&out).contains("Usage"), "stderr should carry the synopsis");
}

#[test]
fn help_and_version_exit_zero() {
    let help = trage().arg("--help").output().unwrap();
    assert_exit(&help, 0);
    for sub in ["pretrain", "finetune", "evaluate", "mask-stats", "inspect"] {
        assert!(stdout_of(&help).contains(sub), "--help should list {sub}");
    }
    let version = trage().arg("--version").output().unwrap();
    assert_exit(&version, 0);
}

#[test]
fn evaluate_rejects_mismatched_label_files_as_data_error() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("pred.txt"), "0\n1\n0\n").unwrap();
    fs::write(fx.path("truth.txt"), "0\n1\n").unwrap();
    let out = trage()
        .args(["evaluate", "--predictions"])
        .arg(fx.path("pred.txt"))
        .arg("--labels")
        .arg(fx.path("truth.txt"))
        .arg("--output-dir")
        .arg(fx.path("eval"))
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(
        stderr_of(&out).contains("labels but the truth"),
        "stderr should explain the length mismatch: {}",
        stderr_of(&out)
    );
}

#[test]
fn evaluate_scores_label_files_and_writes_metrics() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("pred.txt"), "0\n1\n1\n0\n").unwrap();
    fs::write(fx.path("truth.txt"), "0\n1\n0\n0\n").unwrap();
    let out = trage()
        .args(["evaluate", "--predictions"])
        .arg(fx.path("pred.txt"))
        .arg("--labels")
        .arg(fx.path("truth.txt"))
        .arg("--output-dir")
        .arg(fx.path("eval"))
        .output()
        .unwrap();
    assert_exit(&out, 0);
    let metrics = fs::read_to_string(fx.path("eval").join("metrics.csv")).unwrap();
    // class 0: P 1.0, R 2/3; class 1: P 0.5, R 1.0 — macro F1 computed by hand.
    assert!(metrics.contains("0,1.000000,0.666667,0.800000,3"), "metrics:\n{metrics}");
    assert!(metrics.contains("1,0.500000,1.000000,0.666667,1"), "metrics:\n{metrics}");
    assert!(metrics.contains("macro,0.750000,0.833333,0.733333,4"), "metrics:\n{metrics}");
    let confusion = fs::read_to_string(fx.path("eval").join("confusion.csv")).unwrap();
    assert!(confusion.contains("true\\pred,0,1"), "confusion:\n{confusion}");
    assert!(confusion.contains("0,2,1"), "confusion:\n{confusion}");
    assert!(confusion.contains("1,0,1"), "confusion:\n{confusion}");
}

#[test]
fn evaluate_requires_a_source_group() {
    let out = trage().arg("evaluate").output().unwrap();
    assert_exit(&out, 1);
}

#[test]
fn empty_config_file_yields_documented_defaults() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("empty.toml"), "").unwrap();
    let out = trage()
        .args(["mask-stats", "--plans", "50", "--sequence-len", "16", "--config"])
        .arg(fx.path("empty.toml"))
        .arg("--output-dir")
        .arg(fx.path("stats"))
        .output()
        .unwrap();
    assert_exit(&out, 0);
    let eff = effective_toml(&fx.path("stats"));
    assert_eq!(eff["seed"].as_integer(), Some(42));
    assert_eq!(eff["precision"].as_str(), Some("f32"));
    assert_eq!(eff["pretrain"]["geometric_p"].as_float(), Some(0.7));
    assert_eq!(eff["pretrain"]["mask_ratio"].as_float(), Some(0.15));
    assert_eq!(eff["pretrain"]["steps"].as_integer(), Some(2000));
    assert_eq!(eff["finetune"]["lr"].as_float(), Some(2e-5));
    assert_eq!(eff["finetune"]["n_max_packets"].as_integer(), Some(5));
    assert_eq!(eff["dataset"]["class_cap"].as_integer(), Some(5000));
    assert_eq!(eff["header_encoder"]["max_len"].as_integer(), Some(64));
    assert_eq!(eff["payload_encoder"]["max_len"].as_integer(), Some(128));
}

#[test]
fn flags_override_config_file_values() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("p.toml"), "[pretrain]\ngeometric_p = 0.9\n").unwrap();
    let out = trage()
        .args(["mask-stats", "--plans", "50", "--sequence-len", "16"])
        .args(["--geometric-p", "0.5", "--config"])
        .arg(fx.path("p.toml"))
        .arg("--output-dir")
        .arg(fx.path("stats"))
        .output()
        .unwrap();
    assert_exit(&out, 0);
    let eff = effective_toml(&fx.path("stats"));
    assert_eq!(eff["pretrain"]["geometric_p"].as_float(), Some(0.5));
}

#[test]
fn seed_env_var_sits_between_file_and_flag() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("s.toml"), "seed = 1\n").unwrap();

    // Environment beats the file...
    let out = trage()
        .env("TRAGE_SEED", "77")
        .args(["mask-stats", "--plans", "50", "--sequence-len", "16", "--config"])
        .arg(fx.path("s.toml"))
        .arg("--output-dir")
        .arg(fx.path("a"))
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert_eq!(effective_toml(&fx.path("a"))["seed"].as_integer(), Some(77));

    // ...and the flag beats the environment.
    let out = trage()
        .env("TRAGE_SEED", "77")
        .args(["mask-stats", "--plans", "50", "--sequence-len", "16", "--seed", "5", "--config"])
        .arg(fx.path("s.toml"))
        .arg("--output-dir")
        .arg(fx.path("b"))
        .output()
        .unwrap();
    assert_exit(&out, 0);
    assert_eq!(effective_toml(&fx.path("b"))["seed"].as_integer(), Some(5));

    // A malformed value is a data error, not a silent fallback.
    let out = trage()
        .env("TRAGE_SEED", "many")
        .args(["mask-stats", "--plans", "50", "--sequence-len", "16", "--config"])
        .arg(fx.path("s.toml"))
        .arg("--output-dir")
        .arg(fx.path("c"))
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("TRAGE_SEED"), "got: {}", stderr_of(&out));
}

#[test]
fn rerunning_the_effective_config_reproduces_the_checkpoint() {
    let fx = Fixture::new(12, 9);
    let cfg = fx.write_config("run.toml", "");
    let first = trage().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_exit(&first, 0);
    let bytes_a = fs::read(fx.path("out").join("checkpoint.trge")).unwrap();

    let second = trage()
        .args(["pretrain", "--config"])
        .arg(fx.path("out").join("effective_config.toml"))
        .arg("--output-dir")
        .arg(fx.path("rerun"))
        .output()
        .unwrap();
    assert_exit(&second, 0);
    let bytes_b = fs::read(fx.path("rerun").join("checkpoint.trge")).unwrap();
    assert_eq!(bytes_a, bytes_b, "identical config must reproduce the checkpoint byte for byte");
}

#[test]
fn invalid_config_value_is_a_data_error_naming_the_key() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("bad.toml"), "[pretrain]\ngeometric_p = 1.5\n").unwrap();
    let out = trage()
        .args(["mask-stats", "--config"])
        .arg(fx.path("bad.toml"))
        .arg("--output-dir")
        .arg(fx.path("stats"))
        .output()
        .unwrap();
    assert_exit(&out, 2);
    let err = stderr_of(&out);
    assert!(err.contains("geometric_p") && err.contains("1.5"), "got: {err}");
}

#[test]
fn unknown_config_key_is_a_data_error_naming_the_key() {
    let fx = Fixture::new(10, 5);
    fs::write(fx.path("bad.toml"), "[pretrain]\nstepz = 6\n").unwrap();
    let out = trage()
        .args(["mask-stats", "--config"])
        .arg(fx.path("bad.toml"))
        .arg("--output-dir")
        .arg(fx.path("stats"))
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("stepz"), "got: {}", stderr_of(&out));
}

#[test]
fn pre_existing_lock_aborts_with_ownership_message() {
    let fx = Fixture::new(10, 5);
    let dir = fx.path("busy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("run.lock"), "12345\n").unwrap();
    let out = trage()
        .args(["mask-stats", "--plans", "50", "--sequence-len", "16", "--output-dir"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("owned by another run"), "got: {}", stderr_of(&out));
    assert!(dir.join("run.lock").exists(), "a foreign lock must not be deleted");
}

#[test]
fn mask_stats_writes_field_and_run_length_csvs() {
    let fx = Fixture::new(10, 5);
    let out = trage()
        .args(["mask-stats", "--plans", "200", "--sequence-len", "64", "--output-dir"])
        .arg(fx.path("stats"))
        .output()
        .unwrap();
    assert_exit(&out, 0);

    let fields = fs::read_to_string(fx.path("stats").join("field_lengths.csv")).unwrap();
    assert!(fields.starts_with("length,count,empirical_freq,geometric_pmf"), "got:\n{fields}");

    let runs = fs::read_to_string(fx.path("stats").join("run_lengths.csv")).unwrap();
    assert!(runs.starts_with("length,count,empirical_freq,geometric_pmf"), "got:\n{runs}");
    let freq_sum: f64 = runs
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((freq_sum - 1.0).abs() < 1e-9, "empirical frequencies sum to {freq_sum}");
}

#[test]
fn missing_capture_is_a_data_error() {
    let fx = Fixture::new(10, 5);
    let out = trage()
        .args(["pretrain", "--pcap", "/nonexistent/capture.pcap", "--output-dir"])
        .arg(fx.path("out"))
        .args(["--steps", "1"])
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("cannot read capture"), "got: {}", stderr_of(&out));
}

#[test]
fn pretrain_without_captures_is_a_data_error() {
    let fx = Fixture::new(10, 5);
    let out = trage()
        .args(["pretrain", "--output-dir"])
        .arg(fx.path("out"))
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("--pcap"), "got: {}", stderr_of(&out));
}

#[test]
fn full_pipeline_pretrain_finetune_evaluate_inspect() {
    let fx = Fixture::new(12, 21);
    let cfg = fx.write_config("run.toml", "");

    let pre = trage().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_exit(&pre, 0);
    let ckpt = fx.path("out").join("checkpoint.trge");

    let fine = trage()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--output-dir")
        .arg(fx.path("ft"))
        .output()
        .unwrap();
    assert_exit(&fine, 0);
    let ft_dir = fx.path("ft");
    let model = fs::read(ft_dir.join("model.trgc")).unwrap();
    assert_eq!(&model[..4], b"TRGC", "model must carry its magic");
    assert_eq!(count_data_rows(&ft_dir.join("finetune_log.csv")), 2, "one row per epoch");
    for artifact in ["metrics.csv", "confusion.csv", "effective_config.toml"] {
        assert!(ft_dir.join(artifact).is_file(), "missing {artifact}");
    }

    let eval = trage()
        .args(["evaluate", "--model"])
        .arg(ft_dir.join("model.trgc"))
        .arg("--manifest")
        .arg(fx.path("flows.csv"))
        .arg("--output-dir")
        .arg(fx.path("eval"))
        .output()
        .unwrap();
    assert_exit(&eval, 0);
    let metrics = fs::read_to_string(fx.path("eval").join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,precision,recall,f1,support"), "got:\n{metrics}");
    assert!(metrics.contains("macro,"), "macro row missing:\n{metrics}");

    let ins_ckpt = trage().args(["inspect", "--artifact"]).arg(&ckpt).output().unwrap();
    assert_exit(&ins_ckpt, 0);
    let text = stdout_of(&ins_ckpt);
    assert!(text.contains("pre-training checkpoint"), "got:\n{text}");
    assert!(text.contains("optimizer moments: present"), "got:\n{text}");

    let ins_model =
        trage().args(["inspect", "--artifact"]).arg(ft_dir.join("model.trgc")).output().unwrap();
    assert_exit(&ins_model, 0);
    let text = stdout_of(&ins_model);
    assert!(text.contains("fine-tuned classifier"), "got:\n{text}");
    assert!(text.contains("classes 2"), "got:\n{text}");

    let ins_pcap = trage()
        .args(["inspect", "--pcap"])
        .arg(fx.path("traffic.pcap"))
        .args(["--packets", "3"])
        .output()
        .unwrap();
    assert_exit(&ins_pcap, 0);
    let text = stdout_of(&ins_pcap);
    assert!(text.contains("24 flows"), "got:\n{text}");
    assert!(text.contains("record 0"), "got:\n{text}");
}
