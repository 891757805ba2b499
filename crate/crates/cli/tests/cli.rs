//! Drives the `lid` binary through a complete tiny workflow.

use std::path::Path;
use std::process::{Command, Output};

fn lid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lid(args);
    assert!(
        out.status.success(),
        "lid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "n_dialects = 2\ntrain_per_dialect = 4\ntest_per_dialect = 2\nmax_duration = 1.5\nseed = 3\n";
const CONFIG: &str = "\
[am]
max_epochs = 2
[lid]
max_epochs = 2
[cnn]
max_epochs = 1
[baseline]
max_epochs = 2
";

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    std::fs::write(root.join("spec.toml"), SPEC).unwrap();
    std::fs::write(root.join("config.toml"), CONFIG).unwrap();
    let config = root.join("config.toml");

    let out = ok(&["synth-corpus", "--spec", s(&root.join("spec.toml")), "--out", s(&corpus)]);
    assert!(out.contains("8 train and 4 test"), "{out}");

    let cache = root.join("cache");
    ok(&["featurize", "--manifest", s(&corpus.join("train.tsv")), "--cache", s(&cache)]);
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 8);

    for kind in ["baseline", "two-stage", "three-stage"] {
        let sys = root.join(kind);
        let out = ok(&[
            "train", "--system", kind, "--corpus", s(&corpus), "--config", s(&config), "--out", s(&sys), "--cache",
            s(&cache), "--seed", "4",
        ]);
        let stages = out.lines().filter(|l| l.contains("converged after")).count();
        let expected = match kind {
            "baseline" => 1,
            "two-stage" => 2,
            _ => 3,
        };
        assert_eq!(stages, expected, "{out}");
        let report = root.join(format!("{kind}-report"));
        let summary = ok(&[
            "evaluate", "--system", s(&sys), "--test", s(&corpus.join("test.tsv")), "--report", s(&report),
        ]);
        assert!(summary.contains("acc_all"), "{summary}");
        for f in ["metrics.json", "predictions.tsv", "confusion_counts.csv", "confusion_percent.csv", "confusion.pgm"] {
            assert!(report.join(f).is_file(), "{kind}: {f}");
        }
    }

    let table = ok(&[
        "compare", "--reports", s(&root.join("baseline-report")), s(&root.join("two-stage-report")), "--out",
        s(&root.join("cmp")),
    ]);
    assert!(table.contains("two-stage") && table.contains("baseline"), "{table}");
    assert!(root.join("cmp/comparison.csv").is_file());

    let am = root.join("two-stage/am.ckpt");
    let align = root.join("align.tsv");
    let out = ok(&["align", "--am", s(&am), "--manifest", s(&corpus.join("train.tsv")), "--out", s(&align)]);
    assert!(out.starts_with("aligned"), "{out}");

    let wav = std::fs::read_dir(corpus.join("wav")).unwrap().next().unwrap().unwrap().path();
    ok(&["decode", "--am", s(&am), "--utt", s(&wav), "--vocab", s(&corpus.join("vocab.txt"))]);
}

#[test]
fn failures_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lid(&["evaluate", "--system", s(&dir.path().join("missing")), "--test", "x.tsv", "--report", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = lid(&["decode", "--am", s(&ckpt), "--utt", "none.wav"]);
    assert_eq!(out.status.code(), Some(2));
}
