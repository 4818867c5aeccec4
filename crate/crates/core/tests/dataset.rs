mod common;

use std::collections::BTreeMap;

use dialogen::dataset::{assign_splits, compute_stats, read_dataset, write_dataset, Split};
use dialogen::planner::PhenomenonKind;

/// Frozen from an independent recount of `stats50.jsonl`.
#[test]
fn stats_of_the_fifty_conversation_fixture() {
    let stats = compute_stats(&common::records("stats50.jsonl"), &common::catalog());
    assert_eq!(stats.dialogues, 50);
    assert_eq!(stats.turns, 1140);
    assert_eq!((stats.domains, stats.intents, stats.slots), (11, 53, 201));
    let splits: Vec<usize> = Split::ALL.iter().map(|s| stats.splits[s]).collect();
    assert_eq!(splits, [38, 5, 5, 2]);
    let expected: BTreeMap<PhenomenonKind, usize> = [
        (PhenomenonKind::Cancellation, 1),
        (PhenomenonKind::AsrEarlyEnd, 1),
        (PhenomenonKind::Sarcasm, 1),
        (PhenomenonKind::DelayConfirmation, 3),
        (PhenomenonKind::AnswerAboutAnotherSlot, 4),
        (PhenomenonKind::IrrelevantAnswer, 6),
        (PhenomenonKind::OverheardAnswer, 9),
        (PhenomenonKind::InTurnCorrection, 4),
        (PhenomenonKind::Correction, 5),
    ]
    .into_iter()
    .collect();
    assert_eq!(stats.phenomena, expected);
    assert_eq!(stats.unhappy, 32);
    assert!((stats.unhappy_percent - 64.0).abs() < 1e-9);
    assert!((stats.turns_per_dialogue - 22.8).abs() < 1e-9);
}

#[test]
fn splits_land_within_one_of_their_ratio() {
    let base = common::records("stats50.jsonl").remove(1);
    let records: Vec<_> = (0..1000)
        .map(|i| {
            let mut r = base.clone();
            r.id = format!("r{i}");
            r
        })
        .collect();
    let catalog = common::catalog();
    for seed in 0..5 {
        let out = assign_splits(records.clone(), &catalog, &[], [0.8, 0.1, 0.1], seed).unwrap();
        let count = |s| out.iter().filter(|r| r.split == s).count();
        assert!(count(Split::Train).abs_diff(800) <= 1);
        assert!(count(Split::Dev).abs_diff(100) <= 1);
        assert!(count(Split::Test).abs_diff(100) <= 1);
        assert_eq!(count(Split::TestOod), 0);
    }
    assert!(assign_splits(records.clone(), &catalog, &["no_such_intent".into()], [0.8, 0.1, 0.1], 0).is_err());
    assert!(assign_splits(records, &catalog, &[], [0.8, 0.3, 0.1], 0).is_err());
}

#[test]
fn ood_intents_go_only_to_the_ood_split() {
    let catalog = common::catalog();
    let out = assign_splits(common::records("stats50.jsonl"), &catalog, &["send_email".into()], [0.8, 0.1, 0.1], 3).unwrap();
    for r in &out {
        assert_eq!(r.intents_used().contains(&"send_email"), r.split == Split::TestOod, "{}", r.id);
    }
}

#[test]
fn write_then_read_is_lossless() {
    let records = common::records("stats50.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&records, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), records);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(common::fixture("stats50.jsonl")).unwrap());
}

#[test]
fn record_fields_are_frozen() {
    let line = std::fs::read_to_string(common::fixture("stats50.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["id", "split", "turns", "phenomena", "seed"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let allowed = ["kind", "text", "commands", "signal", "phenomenon"];
    for t in v["turns"].as_array().unwrap() {
        assert!(t.as_object().unwrap().keys().all(|k| allowed.contains(&k.as_str())), "{t}");
    }
}

#[test]
fn malformed_lines_report_their_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = std::fs::read_to_string(common::fixture("stats50.jsonl")).unwrap();
    std::fs::write(&path, format!("{}\n{{\"id\": 3}}\n", good.lines().next().unwrap())).unwrap();
    match read_dataset(&path) {
        Err(dialogen::Error::Schema { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}
