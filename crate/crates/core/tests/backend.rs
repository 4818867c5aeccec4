mod common;

use dialogen::agents::TurnKind;
use dialogen::backend::{BackendSession, EntityStore, SessionState};
use dialogen::dsl::{Command, SignalPayload, Value, VarId};
use dialogen::schema::ValueType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random command sequences, well-formed or not, never perform an intent
/// that lacks a mandatory slot.
#[test]
fn random_sequences_never_perform_incomplete_intents() {
    let catalog = common::catalog();
    let pools = common::pools();
    let mut performed_total = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backend = BackendSession::new(catalog.clone(), EntityStore::default());
        let mut next_var = 0u32;
        for _ in 0..rng.gen_range(1..25) {
            let var = VarId(rng.gen_range(0..next_var + 1));
            let cmd = match rng.gen_range(0..4) {
                0 => {
                    let intent = catalog.intents.choose(&mut rng).unwrap();
                    let pool = pools.iter().find(|p| p.intent_name == intent.intent_name);
                    let mut args = Vec::new();
                    for s in &intent.slots {
                        if !rng.gen_bool(0.4) {
                            continue;
                        }
                        if let Some(v) = pool.and_then(|p| p.candidates(&s.name).choose(&mut rng)) {
                            args.push((s.name.clone(), v.clone()));
                        }
                    }
                    next_var += 1;
                    Command::IntentCall {
                        var: VarId(next_var - 1),
                        intent: intent.intent_name.clone(),
                        args,
                    }
                }
                1 => {
                    let Some(session) = backend.session(var) else { continue };
                    let schema = catalog.get(&session.schema_ref).unwrap();
                    let Some(slot) = schema.slots.choose(&mut rng) else { continue };
                    let value = match (slot.value_type, rng.gen_bool(0.8)) {
                        (ValueType::Integer, true) => Value::Integer(2),
                        (ValueType::Boolean, true) => Value::Boolean(true),
                        (ValueType::Number, true) => Value::Number(1.5),
                        (_, true) => slot
                            .allowed_values
                            .as_ref()
                            .and_then(|a| a.first().cloned())
                            .map_or(Value::text("x"), Value::Text),
                        (_, false) => Value::Integer(-1),
                    };
                    Command::AttrAssign {
                        var,
                        slot: slot.name.clone(),
                        value,
                    }
                }
                2 => Command::Confirm { var },
                _ => Command::Say { args: Vec::new() },
            };
            if let Ok(Some(SignalPayload::Performed { var, .. })) = backend.apply_command(&cmd) {
                let session = backend.session(var).unwrap();
                let schema = catalog.get(&session.schema_ref).unwrap();
                for slot in schema.mandatory_slots() {
                    assert!(session.provided.contains_key(&slot.name), "seed {seed}: {var} performed without {}", slot.name);
                }
                performed_total += 1;
            }
        }
        for session in backend.sessions.values() {
            if session.state == SessionState::Performed {
                let schema = catalog.get(&session.schema_ref).unwrap();
                assert!(schema.mandatory_slots().all(|s| session.provided.contains_key(&s.name)));
            }
        }
    }
    assert!(performed_total > 100, "only {performed_total} performances; sequences too weak");
}

/// Replaying the system commands of each stored record against a fresh
/// back-end reproduces the stored signals in order.
#[test]
fn replay_reproduces_stored_signals() {
    let catalog = common::catalog();
    for record in common::records("stats50.jsonl") {
        let plan = record.plan.as_ref().unwrap();
        let mut backend = BackendSession::new(catalog.clone(), plan.entities.clone());
        let mut expected = std::collections::VecDeque::new();
        for (i, turn) in record.turns.iter().enumerate() {
            match turn.kind {
                TurnKind::System => {
                    for cmd in turn.commands() {
                        expected.extend(backend.apply_command(cmd).unwrap());
                    }
                }
                TurnKind::Signal => {
                    let want = expected.pop_front().unwrap_or_else(|| panic!("{} turn {i}: unexpected signal", record.id));
                    assert_eq!(turn.signal.as_ref(), Some(&want), "{} turn {i}", record.id);
                }
                _ => {}
            }
        }
        assert!(expected.is_empty(), "{}: signals never stored", record.id);
    }
}

#[test]
fn confirmation_flow() {
    let mut backend = BackendSession::new(common::catalog(), EntityStore::default());
    let cmds = dialogen::dsl::parse_commands(
        "x0 = book_taxi(pickup_location=\"Paddington\")\nx0.dropoff_location = \"Heathrow\"\nx0.pickup_time = \"7 pm\"",
    )
    .unwrap();
    let signals: Vec<String> = cmds
        .iter()
        .map(|c| backend.apply_command(c).unwrap().unwrap().to_string())
        .collect();
    assert_eq!(
        signals,
        [
            "signal: missing_slots(x0, [\"dropoff_location\", \"pickup_time\"])",
            "signal: missing_slots(x0, [\"pickup_time\"])",
            "signal: confirmation_required(x0)",
        ]
    );
    let done = backend.apply_command(&Command::Confirm { var: VarId(0) }).unwrap().unwrap();
    assert_eq!(done.to_string(), "signal: performed(x0, id=\"taxis-1\")");
    assert!(backend.apply_command(&Command::Confirm { var: VarId(0) }).is_err());
    let late = Command::AttrAssign {
        var: VarId(0),
        slot: "number_of_passengers".into(),
        value: Value::Integer(2),
    };
    assert!(matches!(backend.apply_command(&late), Err(dialogen::Error::InvalidTransition(_))));
}
