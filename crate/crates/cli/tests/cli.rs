use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use budgetlm::analysis::{RunResult, RESULT_FILE};
use budgetlm::trainer::{parse_log, LogRow, LOG_FILE};
use budgetlm::tuner::{parse_ledger, TrialStatus, LEDGER_FILE};
use budgetlm_cli::*;

fn corpus(dir: &Path, bytes: usize) -> PathBuf {
    let text = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare_1m.txt")).unwrap();
    let path = dir.join("corpus.txt");
    std::fs::write(&path, &text[..bytes]).unwrap();
    path
}

fn tiny_config(dir: &Path) -> PathBuf {
    corpus(dir, 30_000);
    let cfg = dir.join("c.cfg");
    std::fs::write(
        &cfg,
        "data.path = corpus.txt\ndata.level = char\nmodel.budget = 12000\nmodel.state_drop = 0.2\n\
         train.batch_size = 8\ntrain.unroll = 20\ntrain.max_steps = 30\ntrain.checkpoint_interval = 10\n\
         train.valid_tokens = 300\n",
    )
    .unwrap();
    cfg
}

fn budgetlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budgetlm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove(RUN_ROOT_ENV)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn deterministic(rows: &[LogRow]) -> Vec<(u64, u64, u64, u64)> {
    rows.iter().map(LogRow::deterministic_part).collect()
}

#[test]
fn train_writes_a_self_describing_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("runs/a");
    let stdout = ok(&budgetlm(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&run)]));
    let result = RunResult::parse(&stdout).unwrap();
    for f in ["best.ckpt", "latest.ckpt", LOG_FILE, CONFIG_FILE, VOCAB_FILE, RESULT_FILE] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(RunResult::parse(&std::fs::read_to_string(run.join(RESULT_FILE)).unwrap()).unwrap(), result);

    // the stored config alone reproduces the run bit for bit
    let again = dir.path().join("runs/b");
    ok(&budgetlm(&["train", "--config", s(&run.join(CONFIG_FILE)), "--seed", "1", "--out", s(&again)]));
    let log = |d: &Path| parse_log(&std::fs::read_to_string(d.join(LOG_FILE)).unwrap()).unwrap();
    assert_eq!(deterministic(&log(&run)), deterministic(&log(&again)));
    let b = RunResult::parse(&std::fs::read_to_string(again.join(RESULT_FILE)).unwrap()).unwrap();
    assert_eq!(b, result);

    // append-only: the same directory is refused
    let refused = budgetlm(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("already exists"));

    let report = ok(&budgetlm(&["report", s(&dir.path().join("runs"))]));
    assert_eq!(report.lines().count(), 3, "{report}");
}

#[test]
fn evaluate_prints_a_result_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&budgetlm(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let text = dir.path().join("test.txt");
    std::fs::write(&text, b"to be or not to be, that is the question").unwrap();
    let ck = run.join("best.ckpt");
    let out = ok(&budgetlm(&[
        "evaluate", "--checkpoint", s(&ck), "--data", s(&text), "--batch-size", "1", "--mc-samples", "16",
    ]));
    assert!(out.contains("mode\tmc\nK\t16\n"), "{out}");
    assert!(out.contains("token_count\t39\n"), "{out}");
    let mf = ok(&budgetlm(&["evaluate", "--checkpoint", s(&run), "--split", "valid"]));
    assert!(mf.contains("split\tvalid\n") && mf.contains("mode\tmeanfield\n"));
}

#[test]
fn resumed_cli_run_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let straight = dir.path().join("straight");
    ok(&budgetlm(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&straight)]));

    // stop at step 20, then resume the same directory to the full 30 steps
    let mut short = load_config(&cfg).unwrap();
    short.train.max_steps = Some(20);
    let split = dir.path().join("split");
    train_run(&short, 3, &split, false).unwrap();
    let full = load_config(&cfg).unwrap();
    std::fs::write(split.join(CONFIG_FILE), full.to_text()).unwrap();
    let resumed = train_run(&full, 3, &split, true).unwrap();
    let straight_result = RunResult::parse(&std::fs::read_to_string(straight.join(RESULT_FILE)).unwrap()).unwrap();
    assert_eq!(resumed.result, straight_result);
}

#[test]
fn tune_then_analyse_the_study() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let space = dir.path().join("s.cfg");
    std::fs::write(&space, "space.learning_rate = 1e-3 3e-2 log\nspace.output_drop = 0 0.5 linear\n").unwrap();
    let study = dir.path().join("study");
    let out = ok(&budgetlm(&[
        "tune", "--config", s(&cfg), "--space", s(&space), "--trials", "6", "--parallel", "2", "--out", s(&study),
    ]));
    assert!(out.contains("trials\t6\n"), "{out}");
    let loaded = load_study(&study).unwrap();
    assert_eq!(loaded.trials.len(), 6);
    assert!(loaded.trials.iter().all(|t| t.status == TrialStatus::Complete));
    let ledger = std::fs::read_to_string(study.join(LEDGER_FILE)).unwrap();
    assert_eq!(parse_ledger(&ledger, &loaded.space).unwrap(), loaded.trials);

    let sens = dir.path().join("sens");
    let summary = ok(&budgetlm(&["sensitivity", "--study", s(&study), "--window", "1", "--out", s(&sens)]));
    assert!(summary.contains("kept\t6\n"), "{summary}");
    assert!(sens.join("sensitivity_learning_rate.tsv").is_file());

    let rerun = dir.path().join("rerun");
    let stats = ok(&budgetlm(&["rerun", "--study", s(&study), "--seeds", "1,2", "--out", s(&rerun)]));
    assert!(stats.contains("tuner_best_z\t"), "{stats}");
    assert!(rerun.join(RERUN_FILE).is_file());

    let table = ok(&budgetlm(&["report", s(&study), "--tsv", s(&dir.path().join("r.tsv"))]));
    assert_eq!(table.lines().count(), 7);
}

#[test]
fn run_root_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_budgetlm"))
        .args(["train", "--config", s(&cfg), "--out", "rel"])
        .env(RUN_ROOT_ENV, &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("rel").join(RESULT_FILE).is_file());
}

#[test]
fn gradcheck_subcommand() {
    let out = ok(&budgetlm(&["gradcheck", "--cell", "lstm", "--coupling", "untied", "--depth", "2"]));
    assert!(out.contains("passed\ttrue"), "{out}");
    let out = ok(&budgetlm(&["gradcheck", "--cell", "rhn", "--depth", "5", "--variant", "recurrent"]));
    assert!(out.contains("passed\ttrue"), "{out}");
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [&["frobnicate"][..], &["train"][..], &["train", "--config", "x", "--out", "y", "--bogus"][..]] {
        let out = budgetlm(args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"), "{args:?}");
    }
    let missing = budgetlm(&["train", "--config", "/nonexistent.cfg", "--out", "/tmp/never"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn config_errors_name_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "data.path = x\nmodel.cell = rhn\nmodel.intra_layer_drop = 0.3\n").unwrap();
    let out = budgetlm(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
