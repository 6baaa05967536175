//! Black-box tests of the `l2sa` binary.

use std::path::Path;
use std::process::{Command, Output};

fn l2sa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2sa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn l2sa")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const QUICK_TRAIN: &[&str] = &[
    "train",
    "--model",
    "l2sa",
    "--dataset",
    "synthetic",
    "--per-class",
    "5",
    "--epochs",
    "1",
    "--batch-size",
    "8",
    "--seed",
    "3",
];

#[test]
fn train_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(dir.path(), QUICK_TRAIN);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    for file in ["runs/l2sa/seed3/checkpoint.l2sa", "runs/l2sa/seed3/metrics.csv",
                 "runs/l2sa/seed3/report.txt", "runs/l2sa/summary.txt", "runs/l2sa/manifest.tsv"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    assert!(stdout(&out).contains("best seed 3"));
}

#[test]
fn rerunning_the_same_seed_overwrites_identically() {
    let dir = tempfile::tempdir().unwrap();
    assert!(l2sa(dir.path(), QUICK_TRAIN).status.success());
    let first = std::fs::read(dir.path().join("runs/l2sa/seed3/checkpoint.l2sa")).unwrap();
    assert!(l2sa(dir.path(), QUICK_TRAIN).status.success());
    let second = std::fs::read(dir.path().join("runs/l2sa/seed3/checkpoint.l2sa")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn eval_scores_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(l2sa(dir.path(), QUICK_TRAIN).status.success());
    let out = l2sa(
        dir.path(),
        &["eval", "--checkpoint", "runs/l2sa/seed3/checkpoint.l2sa",
          "--split", "test", "--dataset", "synthetic", "--per-class", "5"],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("accuracy"), "{text}");
    assert!(text.contains("true\\pred"), "{text}");
}

#[test]
fn eval_on_a_missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(dir.path(), &["eval", "--checkpoint", "nowhere/x.l2sa"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere/x.l2sa"), "{}", stderr(&out));
}

#[test]
fn unknown_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(dir.path(), &["train", "--model", "resnet"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("--model") && err.contains("resnet"), "{err}");
}

#[test]
fn config_file_fills_gaps_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.conf"),
        "model=l2sa\ndataset=synthetic\nper-class=5\nepochs=1\nbatch-size=8\nseed=4\n",
    )
    .unwrap();
    // config alone
    let out = l2sa(dir.path(), &["train", "--config", "run.conf"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("runs/l2sa/seed4/report.txt")).unwrap();
    assert!(report.contains("epochs=1"), "{report}");
    // flag overrides the file's seed
    let out = l2sa(dir.path(), &["train", "--config", "run.conf", "--seed", "9"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(dir.path().join("runs/l2sa/seed9/checkpoint.l2sa").exists());
}

#[test]
fn malformed_config_file_is_rejected_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "epochz=3\n").unwrap();
    let out = l2sa(dir.path(), &["train", "--config", "bad.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));
}

#[test]
fn gradcheck_reports_a_pass_for_the_attention_block() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(dir.path(), &["gradcheck", "--module", "l2sab", "--tolerance", "1e-4"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("l2sab") && text.contains("pass"), "{text}");
}

#[test]
fn gradcheck_rejects_an_unknown_module_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(dir.path(), &["gradcheck", "--module", "backprop9000"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("backprop9000") && err.contains("l2sab"), "{err}");
}

#[test]
fn synth_then_split_round_trips_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(
        dir.path(),
        &["synth", "--out", "corpus", "--classes", "3", "--per-class", "4", "--seed", "2"],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let out = l2sa(
        dir.path(),
        &["split", "--dataset", "corpus", "--seed", "5", "--out", "m.tsv"],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("train 8 / val 1 / test 3"), "{}", stdout(&out));
    let manifest = std::fs::read_to_string(dir.path().join("m.tsv")).unwrap();
    assert!(manifest.starts_with("# seed=5"));
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\ttrain")).count(), 8);
}

#[test]
fn bare_data_root_implies_directory_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(
        dir.path(),
        &["synth", "--out", "corpus", "--classes", "2", "--per-class", "5", "--seed", "2"],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let out = l2sa(dir.path(), &["split", "--data-root", "corpus", "--seed", "1", "--out", "m.tsv"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    // 10 files from disk, not the 60-sample synthetic default
    assert!(stdout(&out).contains("10 samples"), "{}", stdout(&out));
    let manifest = std::fs::read_to_string(dir.path().join("m.tsv")).unwrap();
    assert!(manifest.contains("corpus/class0/0000.png") || manifest.contains("class0/0000.png"),
            "{manifest}");

    let out = l2sa(
        dir.path(),
        &["split", "--dataset", "synthetic", "--data-root", "corpus", "--out", "m2.tsv"],
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("conflicts"), "{}", stderr(&out));
}

#[test]
fn bench_prints_latency_and_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(
        dir.path(),
        &["bench", "--model", "baseline", "--iterations", "30", "--batch-size", "4"],
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("single_image_ms_median"), "{text}");
    assert!(text.contains("images_per_sec"), "{text}");
}

#[test]
fn help_lists_every_flag_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = l2sa(dir.path(), &["train", "--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for flag in ["--model", "--dataset", "--data-root", "--epochs", "--batch-size", "--lr",
                 "--adam-epsilon", "--seed", "--repeats", "--sab-kernels", "--skips", "--out",
                 "--precision"] {
        assert!(text.contains(flag), "help is missing {flag}:\n{text}");
    }
    for default in ["default: 50", "default: 64", "default: 0.01", "default: 0.1",
                    "default: 16,8,4", "default: l2sa"] {
        assert!(text.contains(default), "help is missing {default:?}:\n{text}");
    }
}

#[test]
fn noskip_variant_trains_without_skip_links() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = QUICK_TRAIN.to_vec();
    args[2] = "l2sa_noskip";
    let out = l2sa(dir.path(), &args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(dir.path().join("runs/l2sa_noskip/seed3/checkpoint.l2sa").exists());
}
