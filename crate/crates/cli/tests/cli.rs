use std::path::Path;
use std::process::{Command, Output};

fn stgcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgcl"))
        .args(args)
        .current_dir(cwd)
        .env("STGCL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, extra_train: &str) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "dataset": {{"synth": {{"nodes": 4, "days": 6, "steps_per_day": 24}}}},
  "train": {{"epochs": 2, "batch_size": 16, "pretrain_epochs": 2{extra_train}}},
  "output_dir": "runs"
}}"#
    );
    let path = dir.join("exp.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = stgcl(
            &[
                "synth", "--nodes", "5", "--days", "4", "--seed", "3", "--out", out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["series.stgs", "edges.csv", "experiment.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn synth_files_feed_training_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = stgcl(
        &[
            "synth",
            "--nodes",
            "4",
            "--days",
            "6",
            "--steps-per-day",
            "24",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stgcl(
        &[
            "train",
            "--config",
            "data/experiment.json",
            "--scheme",
            "base-only",
            "--epochs",
            "1",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/report.json").exists());
    let o = stgcl(
        &["eval", "--ckpt", "run/ckpt_best.stgc", "--split", "val"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("average"));
}

#[test]
fn multi_seed_train_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for (arm, scheme) in [("base", "base-only"), ("jl", "joint")] {
        let o = stgcl(
            &[
                "train",
                "--config",
                cfg,
                "--scheme",
                scheme,
                "--contrast",
                "graph",
                "--seeds",
                "2",
                "--out",
                arm,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        for seed in ["seed0", "seed1"] {
            for f in [
                "metrics.jsonl",
                "report.json",
                "ckpt_best.stgc",
                "config.json",
            ] {
                assert!(
                    dir.path().join(arm).join(seed).join(f).exists(),
                    "{arm}/{seed}/{f}"
                );
            }
        }
    }
    let o = stgcl(&["report", "--runs", "base", "jl"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Welch t-test"));
    assert!(text.contains('±'));
    let tsv = std::fs::read_to_string(dir.path().join("jl/loss_curves.tsv")).unwrap();
    assert!(tsv.starts_with("seed\tstage\tepoch"));
    assert_eq!(tsv.lines().count(), 1 + 2 * 2);
}

#[test]
fn invalid_config_lists_keys_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"train": {"lambda": -1, "tua": 0.1}, "extra": 1}"#,
    )
    .unwrap();
    let o = stgcl(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    for key in ["train.tua", "extra", "train.lambda"] {
        assert!(err.contains(key), "{key} missing: {err}");
    }
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.json"),
        r#"{"dataset": {"synth": null, "series": "nope.stgs", "edges": "nope.csv"}}"#,
    )
    .unwrap();
    let o = stgcl(&["train", "--config", "exp.json"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[data]"));
}

#[test]
fn empty_negatives_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    // r_f just under half a day on a 24-slot day removes nearly every negative
    let cfg = small_config(dir.path(), r#", "r_f": 700, "lambda": 0.5"#);
    let o = stgcl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("no admissible negatives"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = stgcl(&["gradcheck", "--instances", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("node_infonce_factorized"));
    let o = stgcl(
        &["gradcheck", "--instances", "1", "--tolerance", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4));
}
