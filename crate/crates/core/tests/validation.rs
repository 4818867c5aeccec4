mod common;

use dialogen::agents::{tools_listing, AbortedConversation, LabelRequest, TurnRecord};
use dialogen::dataset::read_dataset;
use dialogen::dsl::{parse_commands, SignalPayload, VarId};
use dialogen::planner::ConversationPlan;
use dialogen::prompts::Prompts;
use dialogen::provider::ScriptedProvider;
use dialogen::validation::{post_filters, rule_aware_validate, salvage, self_consistency_check, validate_record};

const SAME: &str = "x0 = play_song(song_name=<STR>)";
const RENUMBERED: &str = "x4 = play_song(song_name=<STR>)";
const DIFFERENT: &str = "x0 = play_film(film_title=<STR>)";
const UNPARSEABLE: &str = "I would start the song now.";

fn stage13(replies: [&str; 2]) -> bool {
    let catalog = common::catalog();
    let tools = tools_listing(&catalog);
    let history = vec![TurnRecord::user("Play Yellow Submarine.", None)];
    let req = LabelRequest {
        history: &history,
        catalog: &catalog,
        tools: &tools,
        var_intents: Default::default(),
        sessions: serde_json::Value::Null,
        rules: None,
    };
    let first = parse_commands(SAME).unwrap();
    let provider = ScriptedProvider::sequence(replies);
    let v = self_consistency_check(&req, &first, &provider, &Prompts::builtin(), 3, Some(1), true, 1).unwrap();
    if !v.passed {
        assert_eq!(v.reasons[0].check, "stage13_mismatch");
        assert_eq!(v.reasons[0].turn_index, 1);
    }
    v.passed
}

/// Second trial in {same, renumbered, different, unparseable} crossed with
/// third trial in {same, different, unparseable}.
#[test]
fn stage13_matrix() {
    let second = [(SAME, true), (RENUMBERED, true), (DIFFERENT, false), (UNPARSEABLE, false)];
    let third = [(SAME, true), (DIFFERENT, false), (UNPARSEABLE, false)];
    let mut cases = 0;
    for (a, a_ok) in second {
        for (b, b_ok) in third {
            assert_eq!(stage13([a, b]), a_ok && b_ok, "trials {a:?} / {b:?}");
            cases += 1;
        }
    }
    assert_eq!(cases, 12);
}

#[test]
fn stage14_outcomes() {
    let catalog = common::catalog();
    let tools = tools_listing(&catalog);
    let history = vec![TurnRecord::user("Play Yellow Submarine.", None)];
    let req = LabelRequest {
        history: &history,
        catalog: &catalog,
        tools: &tools,
        var_intents: Default::default(),
        sessions: serde_json::Value::Null,
        rules: None,
    };
    let first = parse_commands(SAME).unwrap();
    for (reply, ok) in [(RENUMBERED, true), (DIFFERENT, false), (UNPARSEABLE, false)] {
        let provider = ScriptedProvider::sequence([reply]);
        let v = rule_aware_validate(&req, &first, &provider, &Prompts::builtin(), None, true, 0).unwrap();
        assert_eq!(v.passed, ok, "{reply}");
        if !ok {
            assert_eq!(v.reasons[0].check, "stage14_mismatch");
        }
    }
}

fn aborted(turns: usize, performed: usize) -> AbortedConversation {
    let mut prefix: Vec<TurnRecord> = (0..turns - performed).map(|_| TurnRecord::user("Hello.", None)).collect();
    for i in 0..performed {
        prefix.push(TurnRecord::signal(SignalPayload::Performed {
            var: VarId(i as u32),
            entity_id: format!("songs-{}", i + 1),
        }));
    }
    AbortedConversation {
        reason: "stage13_mismatch".into(),
        detail: String::new(),
        turn_index: turns,
        prefix,
    }
}

#[test]
fn salvage_boundaries() {
    let plan = ConversationPlan::default();
    let prompts = Prompts::builtin();
    for (turns, performed, kept) in [(9, 0, false), (10, 0, true), (6, 1, true), (2, 1, true), (1, 0, false)] {
        let provider = ScriptedProvider::sequence(["Sorry, I need to stop here."]);
        let out = salvage(&aborted(turns, performed), &plan, &provider, &prompts);
        assert_eq!(out.is_some(), kept, "{performed} performed / {turns} turns");
        if let Some(r) = out {
            assert!(r.salvaged);
            assert_eq!(r.turns.len(), turns + 1);
            assert_eq!(r.turns.last().unwrap().text.as_deref(), Some("Sorry, I need to stop here."));
        }
    }
    let silent = ScriptedProvider::default();
    assert!(salvage(&aborted(12, 1), &plan, &silent, &prompts).is_none());
}

#[test]
fn each_defect_fixture_trips_its_filter() {
    for check in [
        "overwrite_without_correction",
        "empty_string_slot",
        "hint_in_system_commands",
        "unperformed_intent",
    ] {
        let records = read_dataset(&common::fixture(&format!("defects/{check}.jsonl"))).unwrap();
        let v = post_filters(&records[0]);
        assert!(!v.passed, "{check}");
        let checks: Vec<&str> = v.reasons.iter().map(|r| r.check.as_str()).collect();
        assert_eq!(checks, [check], "{check}");
        assert!(v.reasons.iter().all(|r| r.turn_index < records[0].turns.len()));
    }
}

#[test]
fn stored_records_pass_every_check() {
    let catalog = common::catalog();
    for record in common::records("stats50.jsonl") {
        assert!(post_filters(&record).passed, "{}", record.id);
        let v = validate_record(&record, &catalog, None);
        assert!(v.passed, "{}: {:?}", record.id, v.reasons);
    }
}
