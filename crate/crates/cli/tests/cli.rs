use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn caf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CAF_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, count: usize, seed: u64) {
    let o = caf(
        &["gen", "--preset", "mini", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", name],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn metric(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("{key} missing in {line:?}"))
}

#[test]
fn gen_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let o = caf(&["gen", "--preset", "mini", "--count", "500", "--seed", "1", "--out", "d"], tmp.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("500"));
    let manifest = fs::read_to_string(tmp.path().join("d/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 500);
    let pgm = fs::read(tmp.path().join("d/img/00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n60 24\n255\n"));
    assert!(tmp.path().join("d/config.json").exists());
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "a", 20, 9);
    gen(tmp.path(), "b", 20, 9);
    for f in ["manifest.tsv", "config.json", "img/00013.pgm"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--count", "0", "--out", "x"][..],
        &["gen", "--count", "5", "--out", "x", "--unknown"],
        &["gen", "--count", "5"],
        &["gen", "--count", "5", "--out", "x", "--alphabet", "aa"],
        &["active", "--strategy", "best", "--out", "x"],
        &["frobnicate"],
    ] {
        let o = caf(args, tmp.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    let o = Command::new(env!("CARGO_BIN_EXE_caf"))
        .args(["gen", "--count", "1", "--out", "x"])
        .current_dir(tmp.path())
        .env("CAF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn capacity_error_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = caf(&["gen", "--preset", "mini", "--count", "1001", "--out", "x"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("1000"));
    let o = caf(&["gen", "--preset", "mini", "--count", "1001", "--allow-repeats", "--out", "x"], tmp.path());
    assert_eq!(code(&o), 0);
}

#[test]
fn help_lists_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    for (sub, flags) in [
        ("gen", &["--preset", "--count", "--out", "--seed", "--length", "--alphabet", "--width", "--height", "--skew"][..]),
        ("train", &["--data", "--holdout", "--iters", "--preset", "--seed", "--out", "--resume"]),
        ("active", &["--preset", "--strategy", "--set-policy", "--rounds", "--k", "--seed", "--repeats", "--out"]),
        ("eval", &["--checkpoint", "--data"]),
    ] {
        let o = caf(&[sub, "--help"], tmp.path());
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{sub} help lacks {f}");
        }
        if sub != "eval" {
            assert!(text.contains("[default:"), "{sub} help shows no defaults");
        }
    }
    let o = caf(&["active", "--help"], tmp.path());
    assert!(stdout(&o).contains("[default: 2]"));
}

#[test]
fn train_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d", 500, 1);
    gen(dir, "h", 300, 2);

    // Zero iterations: checkpoint holds the initialization, metrics hold the initial eval.
    let o = caf(&["train", "--data", "d", "--holdout", "h", "--iters", "0", "--seed", "4", "--out", "t0"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = fs::read_to_string(dir.join("t0/metrics.csv")).unwrap();
    let lines: Vec<&str> = m.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "run,round,iter,lr,loss,seq_acc,char_acc,train_size,mean_eta");
    assert!(lines[1].starts_with("train,0,0,0.01,,"));

    // Untrained network: chance is 1e-3; 3 sigma over 300 samples is about 0.0055.
    let o = caf(&["eval", "--checkpoint", "t0/checkpoint.bin", "--data", "h"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().last().unwrap().to_string();
    assert!(line.starts_with("seq_acc="));
    let seq = metric(&line, "seq_acc");
    assert!(seq <= 1e-3 + 3.0 * (1e-3 * 0.999f64 / 300.0).sqrt(), "{seq}");
    assert!(metric(&line, "mean_eta") > 0.9);

    // Straight 2000 versus 1000 + 1000 resumed.
    let o = caf(&["train", "--data", "d", "--holdout", "h", "--iters", "2000", "--seed", "4", "--out", "s"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = caf(&["train", "--data", "d", "--holdout", "h", "--iters", "1000", "--seed", "4", "--out", "r1"], dir);
    assert_eq!(code(&o), 0);
    let o = caf(
        &["train", "--data", "d", "--holdout", "h", "--iters", "1000", "--resume", "r1/checkpoint.bin", "--out", "r2"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(dir.join("s/checkpoint.bin")).unwrap(), fs::read(dir.join("r2/checkpoint.bin")).unwrap());

    // Final loss well under the uniform baseline 3 ln 10.
    let m = fs::read_to_string(dir.join("s/metrics.csv")).unwrap();
    let last = m.lines().last().unwrap();
    let loss: f64 = last.split(',').nth(4).unwrap().parse().unwrap();
    assert!(loss < 3.0 * 10f64.ln(), "{loss}");

    // The trained model reads its own training set almost perfectly.
    let o = caf(&["eval", "--checkpoint", "s/checkpoint.bin", "--data", "d"], dir);
    let line = stdout(&o).lines().last().unwrap().to_string();
    assert!(metric(&line, "seq_acc") > 0.9, "{line}");

    // Rerunning is byte-identical.
    let o = caf(&["train", "--data", "d", "--holdout", "h", "--iters", "2000", "--seed", "4", "--out", "s2"], dir);
    assert_eq!(code(&o), 0);
    for f in ["checkpoint.bin", "metrics.csv", "config.json"] {
        assert_eq!(fs::read(dir.join("s").join(f)).unwrap(), fs::read(dir.join("s2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_rejects_mismatched_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "d", 20, 1);
    let o = caf(&["train", "--data", "d", "--holdout", "d", "--iters", "0", "--out", "t"], dir);
    assert_eq!(code(&o), 0);
    let o = caf(&["gen", "--count", "5", "--width", "80", "--out", "wide"], dir);
    assert_eq!(code(&o), 0);
    let o = caf(&["eval", "--checkpoint", "t/checkpoint.bin", "--data", "wide"], dir);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("network:") && err.contains("dataset:") && err.contains("\"width\":80"), "{err}");

    fs::write(dir.join("t/checkpoint.bin"), b"garbage").unwrap();
    let o = caf(&["eval", "--checkpoint", "t/checkpoint.bin", "--data", "d"], dir);
    assert_eq!(code(&o), 1);
}

#[test]
fn active_writes_records_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = [
        "active", "--preset", "mini", "--strategy", "most", "--rounds", "3", "--k", "20", "--repeats", "3",
        "--initial", "40", "--pool", "100", "--holdout", "30", "--iters", "30", "--seed", "5", "--out",
    ];
    let run = |out: &str| {
        let mut a = args.to_vec();
        a.push(out);
        let o = caf(&a, dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        o
    };
    let o = run("a");
    let progress: Vec<String> = stderr(&o).lines().filter(|l| l.starts_with("round=")).map(String::from).collect();
    assert_eq!(progress.len(), 9);
    assert!(progress[0].contains("strategy=most_uncertain") && progress[0].contains("train_size=40"));

    let jsonl = fs::read_to_string(dir.join("a/rounds.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 9);
    for key in ["round", "selected", "train_set_size", "pool_correct_rate", "eta_min", "eta_mean", "eta_max", "accuracy"] {
        assert!(records[0].get(key).is_some(), "record lacks {key}");
    }
    let metrics = fs::read_to_string(dir.join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("run,round,iter,"));
    assert!(metrics.contains("\nmost_uncertain-2,3,"));

    run("b");
    for f in ["rounds.jsonl", "metrics.csv", "config.json"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn active_replace_all() {
    let tmp = tempfile::tempdir().unwrap();
    let o = caf(
        &[
            "active", "--strategy", "all", "--set-policy", "replace", "--rounds", "3", "--repeats", "1",
            "--initial", "60", "--pool", "60", "--holdout", "20", "--iters", "200", "--out", "r",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let jsonl = fs::read_to_string(tmp.path().join("r/rounds.jsonl")).unwrap();
    for line in jsonl.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["skipped"].as_bool().unwrap() {
            continue;
        }
        assert_eq!(v["train_set_size"].as_u64().unwrap() as usize, v["selected"].as_array().unwrap().len());
    }
}
