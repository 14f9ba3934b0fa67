use std::path::Path;
use std::process::{Command, Output};

use orepipe_core::corpus::{write_jsonl, Dataset, Document};
use serde_json::Value;

fn orepipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orepipe"))
        .args(args)
        .output()
        .expect("spawn orepipe")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(orepipe(&["--help"]).status.code(), Some(0));
    assert_eq!(orepipe(&["--version"]).status.code(), Some(0));
    assert_eq!(orepipe(&["bogus"]).status.code(), Some(1));
    assert_eq!(orepipe(&["ttest"]).status.code(), Some(1));
    assert_eq!(orepipe(&["ttest", "--summary", "1,2,3"]).status.code(), Some(1));
    let missing = orepipe(&[
        "split",
        "--input",
        "/nonexistent/x.jsonl",
        "--train",
        "a",
        "--eval",
        "b",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
}

#[test]
fn ttest_reports_json() {
    let out = orepipe(&["ttest", "--summary", "55.51,0.29,41.2,0.25,100,-0.09"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["df"], 99);
    assert!((v["t_stat"].as_f64().unwrap() - 186.5429).abs() < 1e-3);
    assert!(v["log10_p_two_tail"].as_f64().unwrap() < -100.0);
}

#[test]
fn ttest_from_observation_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.txt"), "5.1\n4.9\n5.6\n5.8\n6.0\n").unwrap();
    std::fs::write(dir.path().join("y.txt"), "4.0\n4.1\n4.4\n5.0\n4.9\n").unwrap();
    let out = orepipe(&[
        "ttest",
        "--x",
        p(&dir.path().join("x.txt")),
        "--y",
        p(&dir.path().join("y.txt")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["n"], 5);
    assert!(v["t_stat"].as_f64().unwrap() > 0.0);
}

#[test]
fn leaderboard_and_deviation() {
    let out = orepipe(&[
        "leaderboard",
        "--score",
        "Mistral=41.2",
        "--score",
        "Ours=55.5",
        "--score",
        "Other=46.5",
        "--json",
    ]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["base_model"], "Mistral");
    assert_eq!(v["rows"][0]["model_name"], "Ours");
    assert_eq!(v["rows"][0]["delta_vs_base"].as_f64(), Some(14.3));
    assert_eq!(orepipe(&["leaderboard", "--score", "oops"]).status.code(), Some(1));

    let out = orepipe(&["deviation", "--finetuned", "135.32", "--base", "100"]);
    let v = json(&out);
    assert!((v["deviation_percent"].as_f64().unwrap() - 35.32).abs() < 1e-9);
}

fn corpus(dir: &Path) {
    let topics = [
        "the stope was backfilled after blasting the ore body",
        "haul road grade affects truck fuel burn",
        "the council approved a new library budget",
        "flotation cells recovered more copper this quarter",
    ];
    let docs: Vec<Document> = (0..200)
        .map(|i| {
            Document::new(
                format!("d{i}"),
                format!("{} note {i}", topics[i % 4]),
                "web",
                "open_data",
            )
        })
        .collect();
    write_jsonl(&Dataset::new(docs, "t").unwrap(), dir.join("corpus.jsonl")).unwrap();
    let refs = vec![
        Document::new("r0", "stope backfilled after blasting", "ref", "thesis_reports"),
        Document::new("r1", "flotation cells recovered copper", "ref", "thesis_reports"),
    ];
    write_jsonl(&Dataset::new(refs, "t").unwrap(), dir.join("refs.jsonl")).unwrap();
    std::fs::write(dir.join("glossary.txt"), "stope\nhaul road\nflotation\n").unwrap();
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let kb = d.join("kb.jsonl");
    let out = orepipe(&[
        "build-refkb",
        "--input",
        p(&d.join("refs.jsonl")),
        "--output",
        p(&kb),
        "--embedder",
        "hash",
        "--hash-dim",
        "64",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (input, glossary) = (d.join("corpus.jsonl"), d.join("glossary.txt"));
    let run = |name: &str, extra: &[&str]| {
        let output = d.join(name);
        let mut args = vec![
            "pipeline",
            "--input",
            p(&input),
            "--output",
            p(&output),
            "--glossary",
            p(&glossary),
            "--refkb",
            p(&kb),
            "--cutoff",
            "0.4",
            "--embedder",
            "hash",
            "--hash-dim",
            "64",
        ];
        args.extend_from_slice(extra);
        let out = orepipe(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (json(&out), std::fs::read(output).unwrap())
    };
    let (summary, first) = run("a.jsonl", &[]);
    assert_eq!(summary["input_rows"], 200);
    assert_eq!(summary["after_keywords"], 150);
    let kept = summary["after_cutoff"].as_u64().unwrap();
    assert!(kept > 0 && kept < 150, "kept {kept}");
    assert!(summary.get("stage_seconds").is_none());
    assert!(d.join("a.jsonl.meta.json").exists());

    let (_, again) = run(
        "b.jsonl",
        &["--batch-size", "7", "--jobs", "3", "--checkpoint-every", "11"],
    );
    assert_eq!(first, again);
}

#[test]
fn config_file_supplies_defaults_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("orepipe.conf");
    std::fs::write(&cfg, "judge_threshold = 0.9\n").unwrap();
    assert!(orepipe(&["--config", p(&cfg), "ttest", "--summary", "2,1,1,1,10,0"])
        .status
        .success());
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = orepipe(&["--config", p(&cfg), "ttest", "--summary", "2,1,1,1,10,0"]);
    assert_ne!(out.status.code(), Some(0));
}
