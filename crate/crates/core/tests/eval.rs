mod common;

use dialogen::eval::{evaluate, fuzzy_match, gold_predictions, read_predictions, retrieve_tools, HashingEmbedder, RetrievalMode};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 0.01
}

/// Values from a brute-force recount over the same two files.
#[test]
fn perturbed_predictions_match_the_oracle() {
    let gold = common::records("eval_gold20.jsonl");
    let preds = read_predictions(&common::fixture("eval_pred20.jsonl")).unwrap();
    let r = evaluate(&gold, &preds).unwrap();
    assert!(close(r.intent_accuracy, 100.0 * 27.0 / 29.0), "{}", r.intent_accuracy);
    assert!(close(r.joint_goal_accuracy, 100.0 * 51.0 / 65.0), "{}", r.joint_goal_accuracy);
    assert!(close(r.slot_accuracy, 100.0 * 60.0 / 65.0), "{}", r.slot_accuracy);
    assert!(close(r.exact_match_turn, 100.0 * 82.0 / 101.0), "{}", r.exact_match_turn);
    assert!(close(r.exact_match_conversation, 55.0), "{}", r.exact_match_conversation);
    assert_eq!(
        (r.counts.gold_intents, r.counts.goal_points, r.counts.slot_points, r.counts.segments, r.counts.conversations),
        (29, 65, 65, 101, 20)
    );
    let rows: Vec<(&str, usize, usize)> = r
        .per_phenomenon
        .iter()
        .map(|(k, v)| (k.as_str(), v.segments, v.matched))
        .collect();
    assert_eq!(
        rows,
        [
            ("correction", 4, 2),
            ("delay_confirmation", 1, 1),
            ("in_turn_correction", 4, 4),
            ("irrelevant_answer", 1, 1),
            ("none", 85, 68),
            ("overheard_answer", 5, 5),
            ("sarcasm", 1, 1),
        ]
    );
    assert!(r.exact_match_conversation <= r.exact_match_turn);
}

#[test]
fn gold_scores_perfectly_against_itself() {
    let gold = common::records("stats50.jsonl");
    let r = evaluate(&gold, &gold_predictions(&gold)).unwrap();
    for v in [r.intent_accuracy, r.joint_goal_accuracy, r.slot_accuracy, r.exact_match_turn, r.exact_match_conversation] {
        assert_eq!(v, 100.0);
    }
}

#[test]
fn misaligned_predictions_are_rejected() {
    let gold = common::records("eval_gold20.jsonl");
    let mut preds = gold_predictions(&gold);
    preds.pop();
    assert!(matches!(evaluate(&gold, &preds), Err(dialogen::Error::Alignment(_))));
    let mut preds = gold_predictions(&gold);
    preds.push(preds[0].clone());
    assert!(matches!(evaluate(&gold, &preds), Err(dialogen::Error::Alignment(_))));
    let mut preds = gold_predictions(&gold);
    preds[0].conversation_id = "nowhere".into();
    assert!(matches!(evaluate(&gold, &preds), Err(dialogen::Error::Alignment(_))));
}

#[test]
fn fuzzy_matching() {
    assert!(fuzzy_match("The Grand Hotel", "grand hotel"));
    assert!(fuzzy_match("Bohemian Rhapsody", "Bohemian Rhapsodi"));
    assert!(fuzzy_match("Paris.", "paris"));
    assert!(!fuzzy_match("Paris", "London"));
    assert!(!fuzzy_match("7 pm", "8 pm"));
}

#[test]
fn retrieval_prefers_the_named_tool() {
    let catalog = common::catalog();
    let embedder = HashingEmbedder::default();
    let tools = retrieve_tools("I want to book a taxi to the airport", &catalog, &[], &embedder, RetrievalMode::Retrieval);
    assert_eq!(tools.first().map(|t| t.intent_name.as_str()), Some("book_taxi"));
    assert!(retrieve_tools("hello", &catalog, &[], &embedder, RetrievalMode::None).is_empty());
}
