use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ctxfilter::formats::{open_dataset, read_prompts, LabelRow, ManifestEntry};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_with_env(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ctxfilter"));
    for (k, _) in std::env::vars() {
        if k.starts_with("CTXFILTER_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).envs(env.iter().copied());
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn run(args: &[&str]) -> Run {
    run_with_env(args, &[])
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus with 12 tasks under `dir`.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("synth");
    let r = run(&["synth-corpus", "--seed", "5", "--instances", "12", "--out-dir", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out
}

fn oracle_args(corpus: &Path) -> Vec<String> {
    vec![
        "--repo-root".into(),
        corpus.join("repo").to_str().unwrap().into(),
        "--tasks".into(),
        corpus.join("tasks.jsonl").to_str().unwrap().into(),
        "--backend".into(),
        "overlap".into(),
        "--backend-file".into(),
        corpus.join("oracle.json").to_str().unwrap().into(),
        "--conflict-penalty".into(),
        "0.5".into(),
    ]
}

fn with<'a>(head: &[&'a str], tail: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(tail.iter().map(String::as_str)).collect()
}

#[test]
fn index_writes_dump() {
    let dir = tempfile::tempdir().unwrap();
    let repo = dir.path().join("demo");
    fs::create_dir_all(repo.join("pkg")).unwrap();
    fs::write(repo.join("pkg/a.py"), (1..=15).map(|i| format!("a{i} = {i}\n")).collect::<String>()).unwrap();
    fs::write(repo.join("README.md"), "not code\n").unwrap();
    let out = dir.path().join("index.jsonl");
    let r = run(&["index", "--repo-root", s(&repo), "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = fs::read_to_string(out).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["start_line"], 6);
    assert_eq!(rows[1]["end_line"], 15);
}

#[test]
fn complete_without_backend_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let r = run(&[
        "complete",
        "--repo-root",
        s(&corpus.join("repo")),
        "--tasks",
        s(&corpus.join("tasks.jsonl")),
    ]);
    assert_eq!(r.code, 2);
    let last = r.stderr.lines().last().unwrap();
    let record: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(record["error"], "usage");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let r = run(&["frobnicate"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("Usage"));
}

#[test]
fn missing_repo_is_domain_error() {
    let r = run(&["index", "--repo-root", "/no/such/dir"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.lines().any(|l| l.starts_with("{\"error\"")));
}

#[test]
fn evaluate_compare_prints_three_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let args = oracle_args(&corpus);
    let r = run(&with(&["evaluate", "--compare"], &args));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows: Vec<&str> = r.stdout.lines().skip(1).take(3).collect();
    assert!(rows[0].starts_with("none "), "{}", r.stdout);
    assert!(rows[1].starts_with("full "));
    assert!(rows[2].starts_with("filter "));
    let em = |row: &str| row.split_whitespace().nth(3).unwrap().parse::<f64>().unwrap();
    assert!(em(rows[2]) >= em(rows[1]));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let r = run(&["synth-corpus", "--seed", "9", "--instances", "6", "--plant", "1,1,3", "--out-dir", s(d)]);
        assert_eq!(r.code, 0);
    }
    for f in ["tasks.jsonl", "plants.jsonl", "oracle.json", "repo/app/task0000.py"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let args = oracle_args(&a);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let rows = dir.path().join(format!("rows{i}.jsonl"));
        let data = dir.path().join(format!("data{i}.jsonl"));
        let r = run(&with(&["evaluate", "--compare", "--workers", "4", "--out", s(&rows)], &args));
        assert_eq!(r.code, 0, "{}", r.stderr);
        let d = run(&with(&["build-dataset", "--seed", "1", "--out", s(&data)], &args));
        assert_eq!(d.code, 0, "{}", d.stderr);
        outputs.push((r.stdout, fs::read(rows).unwrap(), fs::read(data).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "top_k = 3\nt_c = 0.4\nextensions = [\"py\", \"pyi\"]\n").unwrap();
    let base = ["index", "--repo-root", "r", "--show-config"];
    let show = |extra: &[&str], env: &[(&str, &str)]| {
        let args: Vec<&str> = ["retrieve", "--repo-root", "r", "--tasks", "t", "--show-config"]
            .iter()
            .chain(extra)
            .copied()
            .collect();
        let r = run_with_env(&args, env);
        assert_eq!(r.code, 0, "{}", r.stderr);
        r.stdout
    };
    assert!(show(&[], &[]).contains("top_k = 10"));
    assert!(show(&["--config", s(&cfg)], &[]).contains("top_k = 3"));
    assert!(show(&["--config", s(&cfg)], &[("CTXFILTER_TOP_K", "4")]).contains("top_k = 4"));
    assert!(show(&["--config", s(&cfg), "--top-k", "5"], &[("CTXFILTER_TOP_K", "4")]).contains("top_k = 5"));
    assert!(show(&["--config", s(&cfg)], &[]).contains("extensions = [\"py\", \"pyi\"]"));
    let r = run(&base);
    assert!(r.stdout.contains("window = 10"));

    fs::write(&cfg, "no_such_option = 1\n").unwrap();
    let r = run(&["index", "--repo-root", "r", "--config", s(&cfg)]);
    assert_eq!(r.code, 2);
}

#[test]
fn shown_config_reloads_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(&["evaluate", "--repo-root", "r", "--tasks", "t", "--tc", "0.25", "--label-tn", "-0.1", "--show-config"]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    let cfg = dir.path().join("shown.toml");
    fs::write(&cfg, &first.stdout).unwrap();
    let second = run(&["evaluate", "--repo-root", "x", "--tasks", "y", "--config", s(&cfg), "--show-config"]);
    assert_eq!(second.code, 0, "{}", second.stderr);
    assert_eq!(
        first.stdout.replace("\"r\"", "\"x\"").replace("\"t\"", "\"y\""),
        second.stdout
    );
}

#[test]
fn missing_target_rejected_by_evaluate_accepted_by_complete() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let text = fs::read_to_string(corpus.join("tasks.jsonl")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("target");
            format!("{v}\n")
        })
        .collect();
    let tasks = dir.path().join("no_target.jsonl");
    fs::write(&tasks, stripped).unwrap();
    let mut args = oracle_args(&corpus);
    args[3] = tasks.to_str().unwrap().into();
    let e = run(&with(&["evaluate"], &args));
    assert_eq!(e.code, 1);
    assert!(e.stderr.contains("\"tasks\""), "{}", e.stderr);
    let out = dir.path().join("completions.jsonl");
    let c = run(&with(&["complete", "--out", s(&out)], &args));
    assert_eq!(c.code, 0, "{}", c.stderr);
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 12);
}

#[test]
fn record_then_replay_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let log = dir.path().join("log.jsonl");
    let args = oracle_args(&corpus);
    let rows_a = dir.path().join("a.jsonl");
    let rec = run(&with(
        &["evaluate", "--compare", "--negative-subset", "--record", s(&log), "--out", s(&rows_a)],
        &args,
    ));
    assert_eq!(rec.code, 0, "{}", rec.stderr);

    let rows_b = dir.path().join("b.jsonl");
    let replay = run(&[
        "evaluate",
        "--compare",
        "--negative-subset",
        "--repo-root",
        s(&corpus.join("repo")),
        "--tasks",
        s(&corpus.join("tasks.jsonl")),
        "--backend",
        "replay",
        "--backend-file",
        s(&log),
        "--out",
        s(&rows_b),
    ]);
    assert_eq!(replay.code, 0, "{}", replay.stderr);
    assert_eq!(rec.stdout, replay.stdout);
    assert_eq!(fs::read(rows_a).unwrap(), fs::read(rows_b).unwrap());
}

#[test]
fn exported_prompts_replay_like_the_filter() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let args = oracle_args(&corpus);
    let prompts = dir.path().join("prompts");
    let trace = dir.path().join("trace.jsonl");
    let r = run(&with(&["filter-prompt", "--out-dir", s(&prompts), "--trace", s(&trace)], &args));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&fs::read_to_string(prompts.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.len(), 12);
    assert_eq!(read_prompts(&prompts).unwrap().len(), 12);
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 12);

    let r = run(&with(&["evaluate", "--compare", "--prompts-dir", s(&prompts)], &args));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let lines: Vec<&str> = r.stdout.lines().collect();
    let filter = lines.iter().find(|l| l.starts_with("filter ")).unwrap();
    let replay = lines.iter().find(|l| l.starts_with("replay ")).unwrap();
    let cols = |l: &str| l.split_whitespace().skip(1).map(String::from).collect::<Vec<_>>();
    // identical except the signal-token column
    assert_eq!(cols(filter)[..5], cols(replay)[..5]);
}

#[test]
fn label_accepts_negative_thresholds_and_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let args = oracle_args(&corpus);
    let out = dir.path().join("labels.jsonl");
    let r = run(&with(&["label", "--tp", "0.1", "--tn", "-0.05", "--out", s(&out)], &args));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows: Vec<LabelRow> = fs::read_to_string(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 12 * 10);
    assert_eq!(rows.iter().filter(|r| r.label == "positive").count(), 12);
    assert_eq!(rows.iter().filter(|r| r.label == "negative").count(), 12);

    let bad = run(&with(&["label", "--tp", "-0.1"], &args));
    assert_eq!(bad.code, 2);
}

#[test]
fn build_dataset_writes_header_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let args = oracle_args(&corpus);
    let out = dir.path().join("data.jsonl");
    let r = run(&with(&["build-dataset", "--formats", "positive_only", "--out", s(&out)], &args));
    assert_eq!(r.code, 0, "{}", r.stderr);
    let file = fs::File::open(&out).unwrap();
    let (header, records) = open_dataset(std::io::BufReader::new(file)).unwrap();
    let records: Vec<_> = records.collect::<Result<_, _>>().unwrap();
    assert_eq!(header.records, records.len());
    assert_eq!(records.len(), 12);

    let bad = run(&with(&["build-dataset", "--formats", "everything"], &args));
    assert_eq!(bad.code, 2);
}

#[test]
fn scripted_backend_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path());
    let script = dir.path().join("script.json");
    fs::write(
        &script,
        r#"{"signals": [{"kind": "distribution", "value": [["<EC>", 0.9], ["<MC>", 0.1]]}],
            "completions": [{"kind": "text", "value": "done = 1\n\nextra"}]}"#,
    )
    .unwrap();
    let tasks = dir.path().join("one.jsonl");
    let first = fs::read_to_string(corpus.join("tasks.jsonl")).unwrap();
    fs::write(&tasks, first.lines().next().unwrap()).unwrap();
    let out = dir.path().join("out.jsonl");
    let r = run(&[
        "complete",
        "--repo-root",
        s(&corpus.join("repo")),
        "--tasks",
        s(&tasks),
        "--backend",
        "scripted",
        "--backend-file",
        s(&script),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let row: serde_json::Value = serde_json::from_str(fs::read_to_string(out).unwrap().trim()).unwrap();
    assert_eq!(row["generated"], "done = 1");
    assert_eq!(row["kept_ranks"], serde_json::json!([]));
}
