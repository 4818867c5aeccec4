mod common;

use std::path::Path;
use std::process::Command;

use dialogen::config::RunConfig;
use dialogen::pipeline::{run_pipeline, write_run};
use dialogen::prompts::Prompts;

fn config(seed: u64, n: usize) -> RunConfig {
    RunConfig {
        seed,
        n,
        concurrency: 2,
        ..Default::default()
    }
}

fn run_into(c: &RunConfig, dir: &Path) -> dialogen::pipeline::Manifest {
    let provider = c.provider.build().unwrap();
    let out = run_pipeline(c, &common::catalog(), &common::pools(), provider.as_ref(), &Prompts::builtin(), None).unwrap();
    write_run(&out, dir, true).unwrap();
    out.manifest
}

#[test]
fn two_runs_are_byte_identical() {
    let c = config(21, 30);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_into(&c, a.path());
    let mut c1 = c.clone();
    c1.concurrency = 1;
    run_into(&c1, b.path());
    for f in ["dataset.jsonl", "verdicts.jsonl", "stats.json", "manifest.json", "sarcasm_review.jsonl"] {
        let read = |d: &Path| std::fs::read_to_string(d.join(f)).unwrap();
        assert!(read(a.path()) == read(b.path()), "{f} differs");
    }
}

#[test]
fn noisy_labels_are_salvaged_or_discarded() {
    let mut c = config(5, 40);
    c.provider.label_noise = 0.05;
    let dir = tempfile::tempdir().unwrap();
    let m = run_into(&c, dir.path());
    assert_eq!(m.generated, 40);
    assert_eq!(m.generated, m.validated + m.salvaged + m.discarded);
    assert!(m.salvaged + m.discarded > 0, "{m:?}");
    assert_eq!(m.discard_reasons.values().sum::<usize>(), m.discarded);
    assert_eq!(m.seeds.len(), 40);
    let verdicts = std::fs::read_to_string(dir.path().join("verdicts.jsonl")).unwrap();
    assert_eq!(verdicts.lines().count(), 40);
    assert_eq!(verdicts.matches("\"passed\":false").count(), m.discarded);
    let kept = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), m.validated + m.salvaged);
}

#[test]
fn config_hash_ignores_paths_but_not_settings() {
    let a = config(1, 10);
    let mut b = a.clone();
    b.paths.out = "elsewhere".into();
    assert_eq!(a.content_hash(), b.content_hash());
    b.concurrency = 7;
    assert_eq!(a.content_hash(), b.content_hash());
    b.planner.phenomenon_rate = 0.5;
    assert_ne!(a.content_hash(), b.content_hash());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dialogen"))
        .current_dir(common::root())
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = cli(&["generate", "--n", "5", "--seed", "9", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let dataset = dir.path().join("dataset.jsonl");
    let check = cli(&["validate", dataset.to_str().unwrap(), "--out", out]);
    assert_eq!(check.status.code(), Some(0));

    let defect = common::fixture("defects/hint_in_system_commands.jsonl");
    let bad = cli(&["validate", defect.to_str().unwrap(), "--out", out]);
    assert_eq!(bad.status.code(), Some(1));
    let verdicts = std::fs::read_to_string(dir.path().join("verdicts.jsonl")).unwrap();
    assert!(verdicts.contains("hint_in_system_commands"), "{verdicts}");

    let fatal = cli(&["--config", "does/not/exist.toml", "generate"]);
    assert_eq!(fatal.status.code(), Some(2));
    let fatal = cli(&["stats", "does/not/exist.jsonl"]);
    assert_eq!(fatal.status.code(), Some(2));
}

#[test]
fn cli_stats_and_eval() {
    let fixture = common::fixture("stats50.jsonl");
    let stats = cli(&["stats", fixture.to_str().unwrap(), "--json"]);
    assert_eq!(stats.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["dialogues"], 50);
    assert_eq!(v["unhappy"], 32);

    let gold = common::fixture("eval_gold20.jsonl");
    let preds = common::fixture("eval_pred20.jsonl");
    let eval = cli(&["eval", gold.to_str().unwrap(), preds.to_str().unwrap(), "--json"]);
    assert_eq!(eval.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(v["exact_match_conversation"], 55.0);
    let same = cli(&["eval", gold.to_str().unwrap(), gold.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&same.stdout).contains("100.00"));
}

#[test]
fn cli_builds_the_committed_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "gen-intents",
        "--descriptions",
        "assets/intents/descriptions.txt",
        "--denylist",
        "assets/intents/denylist.txt",
        "--script",
        "assets/intents/stage01_script.jsonl",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["catalog.jsonl", "pools.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(common::root().join("assets/catalog").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn shipped_config_matches_defaults() {
    let loaded = RunConfig::load(&common::root().join("configs/default.toml")).unwrap();
    assert_eq!(loaded.content_hash(), RunConfig::default().content_hash());
    assert!(loaded.paths.catalog.exists());
}
