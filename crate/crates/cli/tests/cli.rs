use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn duallm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duallm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf")
}

/// Writes the pattern corpus under `dir/data/pattern`, where the shipped
/// tiny configuration expects it.
fn with_corpus() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = duallm(dir.path(), &["synth", "--out", "data/pattern"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn full_scale_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ptb_dual_mdlstm.conf");
    let o = duallm(dir.path(), &["params", "--config", conf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "22889450");
}

#[test]
fn unknown_key_is_a_single_line_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = duallm(dir.path(), &["params", "--set", "hidden_units=3"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error: config: ") && err.contains("hidden_units"),
        "{err}"
    );
}

#[test]
fn missing_corpus_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = duallm(
        dir.path(),
        &[
            "train",
            "--set",
            "train_path=absent.txt",
            "--set",
            "valid_path=a",
            "--set",
            "test_path=b",
        ],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: io: "), "{}", stderr(&o));
    assert!(!dir.path().join("out/metrics.tsv").exists());
}

#[test]
fn keys_listing_reparses_as_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = duallm(dir.path(), &["keys"]);
    assert!(o.status.success());
    std::fs::write(dir.path().join("all.conf"), stdout(&o)).unwrap();
    let o = duallm(dir.path(), &["params", "--config", "all.conf"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = duallm(
        dir.path(),
        &[
            "gradcheck",
            "--config",
            tiny_conf().to_str().unwrap(),
            "--out",
            "gc",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("gc/gradcheck.txt")).unwrap();
    assert!(report.contains("backward_window") && !report.contains("FAIL"));
}

#[test]
fn train_eval_dyneval_tune_round_trip() {
    let dir = with_corpus();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();
    let o = duallm(
        dir.path(),
        &[
            "train",
            "--config",
            conf,
            "--out",
            "runs/tiny",
            "--set",
            "epochs=3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("runs/tiny");
    for f in [
        "checkpoint.bin",
        "metrics.tsv",
        "timing.tsv",
        "report.txt",
        "config.txt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch\ttrain_loss\ttrain_ppl\tvalid_ppl\n"));

    // The echoed configuration records the override, not the file value.
    let echoed = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.lines().any(|l| l == "epochs=3"));
    assert!(echoed.lines().any(|l| l == "seed=7"));

    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let valid_ppl = report
        .lines()
        .find_map(|l| l.strip_prefix("valid_ppl\t"))
        .unwrap()
        .to_string();

    let o = duallm(
        dir.path(),
        &[
            "eval",
            "--config",
            conf,
            "--out",
            "runs/eval",
            "--set",
            "eval_split=valid",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("perplexity\t{valid_ppl}"));

    let o = duallm(
        dir.path(),
        &[
            "dyneval",
            "--config",
            conf,
            "--out",
            "runs/dyn",
            "--set",
            "lr_eval=0",
            "--set",
            "eval_split=valid",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("perplexity\t{valid_ppl}"));

    let o = duallm(
        dir.path(),
        &["tune", "--config", conf, "--out", "runs/tune"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let tune = std::fs::read_to_string(dir.path().join("runs/tune/tune.txt")).unwrap();
    assert!(
        tune.contains("mode\tstatic") && tune.contains("trials\t24"),
        "{tune}"
    );
    let trials = std::fs::read_to_string(dir.path().join("runs/tune/tune_trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 25);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let dir = with_corpus();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();
    let o = duallm(
        dir.path(),
        &[
            "train",
            "--config",
            conf,
            "--out",
            "runs/tiny",
            "--set",
            "epochs=1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = duallm(
        dir.path(),
        &["synth", "--out", "other", "--set", "synth=two_regime"],
    );
    assert!(o.status.success());
    let o = duallm(
        dir.path(),
        &[
            "eval",
            "--config",
            conf,
            "--set",
            "train_path=other/train.txt",
            "--set",
            "valid_path=other/valid.txt",
            "--set",
            "test_path=other/test.txt",
        ],
    );
    assert!(!o.status.success());
    assert!(
        stderr(&o).starts_with("error: checkpoint: "),
        "{}",
        stderr(&o)
    );
}

#[test]
fn divergence_reports_and_keeps_artifacts() {
    let dir = with_corpus();
    let o = duallm(
        dir.path(),
        &[
            "train",
            "--config",
            tiny_conf().to_str().unwrap(),
            "--out",
            "boom",
            "--set",
            "lr=1e30",
            "--set",
            "clipnorm=0",
        ],
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(
        err.lines()
            .last()
            .unwrap()
            .starts_with("error: divergence: "),
        "{err}"
    );
    assert!(dir.path().join("boom/checkpoint.bin").exists());
}
