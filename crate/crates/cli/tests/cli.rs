use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3
[data]
synthetic_classes = [6, 4, 4]
synthetic_per_class = 8
synthetic_size = 16
[episode]
way = 3
queries = 2
eval_queries = 3
[augment]
resize = 14
crop = 12
[train]
episodes = 6
lr_halving_interval = 4
val_interval = 3
val_episodes = 2
checkpoint_interval = 3
[eval]
episodes = 4
";

fn ndpnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndpnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NDPNET_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = ndpnet(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ndpnet(&["fly"], dir.path()).status.code(), Some(1));
}

#[test]
fn synth_data_writes_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let o = ndpnet(
        &["synth-data", "data", "--classes", "8", "--per-class", "5", "--size", "16"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut count = 0;
    for class in std::fs::read_dir(dir.path().join("data")).unwrap() {
        let class = class.unwrap().path();
        if class.is_dir() {
            count += std::fs::read_dir(class).unwrap().count();
        }
    }
    assert_eq!(count, 40);
}

#[test]
fn config_errors_exit_one_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let o = ndpnet(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));

    let o = ndpnet(&["train", "--set", "train.bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "[episode]\nway = \"five\"\n").unwrap();
    let o = ndpnet(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.toml: line 2"), "{}", stderr(&o));
}

#[test]
fn diverging_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let o = ndpnet(
        &["train", "-c", config.to_str().unwrap(), "--set", "train.lr=1e300", "-o", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_rerun_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let o = ndpnet(&["train", "-c", config.to_str().unwrap(), "-o", "a"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = dir.path().join("a");
    assert!(a.join("latest.ckpt").exists() && a.join("best.ckpt").exists());

    // the echoed config alone reproduces the run
    let o = ndpnet(&["train", "-c", "a/config.toml", "-o", "b"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log_a = std::fs::read(a.join("train_log.csv")).unwrap();
    let log_b = std::fs::read(dir.path().join("b/train_log.csv")).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(String::from_utf8_lossy(&log_a).lines().count(), 7);

    let o = ndpnet(
        &["eval", "--checkpoint", "a/latest.ckpt", "--set", "eval.repeats=2", "-o", "e"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("test repeat 1: accuracy"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn resume_appends_to_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let o = ndpnet(
        &["train", "-c", config.to_str().unwrap(), "--set", "train.episodes=3", "-o", "r"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = ndpnet(
        &["train", "--resume", "r/latest.ckpt", "--set", "train.episodes=6", "-o", "r"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = ndpnet(&["train", "-c", config.to_str().unwrap(), "-o", "full"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resumed = std::fs::read(dir.path().join("r/train_log.csv")).unwrap();
    let full = std::fs::read(dir.path().join("full/train_log.csv")).unwrap();
    assert_eq!(resumed, full);
}
