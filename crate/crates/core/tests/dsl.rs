use std::collections::BTreeSet;

use dialogen::dsl::{canonicalize, canonicalize_in_scope, commands_equal, parse_command, parse_commands, Command, Value, VarId};
use proptest::prelude::*;

fn ident() -> impl Strategy<Value = String> {
    "[a-w_][a-z0-9_]{0,8}"
}

fn value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        any::<String>().prop_map(Value::Text),
        any::<i64>().prop_map(Value::Integer),
        (-1e12f64..1e12).prop_map(Value::Number),
        any::<bool>().prop_map(Value::Boolean),
        (0u32..6).prop_map(|v| Value::VarRef(VarId(v))),
        ((0u32..6), ident()).prop_map(|(v, s)| Value::AttrRef(VarId(v), s)),
        Just(Value::Placeholder),
    ];
    leaf.prop_recursive(2, 8, 4, |inner| prop::collection::vec(inner, 0..4).prop_map(Value::List))
}

fn kwargs() -> impl Strategy<Value = Vec<(String, Value)>> {
    prop::collection::btree_map(ident(), value(), 0..4).prop_map(|m| m.into_iter().collect())
}

fn command() -> impl Strategy<Value = Command> {
    prop_oneof![
        ((0u32..6), ident(), kwargs()).prop_map(|(v, intent, args)| Command::IntentCall { var: VarId(v), intent, args }),
        ((0u32..6), ident(), value()).prop_map(|(v, slot, value)| Command::AttrAssign { var: VarId(v), slot, value }),
        kwargs().prop_map(|args| Command::Say { args }),
        (0u32..6).prop_map(|v| Command::Confirm { var: VarId(v) }),
    ]
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(cmd in command()) {
        let text = cmd.to_string();
        prop_assert_eq!(parse_command(&text).unwrap(), cmd);
    }

    #[test]
    fn blocks_round_trip(cmds in prop::collection::vec(command(), 0..6)) {
        let text = cmds.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
        prop_assert_eq!(parse_commands(&text).unwrap(), cmds);
    }

    #[test]
    fn canonicalize_is_idempotent(cmds in prop::collection::vec(command(), 0..6)) {
        let known: BTreeSet<VarId> = (0..6).map(VarId).collect();
        if let Ok(once) = canonicalize_in_scope(&known, &cmds) {
            prop_assert_eq!(canonicalize_in_scope(&known, &once).unwrap(), once);
        }
    }

    #[test]
    fn renumbering_preserves_equality(shift in 1u32..40, intent in ident(), args in kwargs()) {
        let a = vec![
            Command::IntentCall { var: VarId(0), intent: intent.clone(), args: args.clone() },
            Command::Confirm { var: VarId(0) },
        ];
        let mut reversed = args.clone();
        reversed.reverse();
        let b = vec![
            Command::IntentCall { var: VarId(shift), intent, args: reversed },
            Command::Confirm { var: VarId(shift) },
        ];
        let refs_ok = args.iter().all(|(_, v)| !matches!(v, Value::VarRef(_) | Value::AttrRef(..) | Value::List(_)));
        prop_assume!(refs_ok);
        prop_assert!(commands_equal(&a, &b).unwrap());
    }
}

#[test]
fn canonical_form_of_a_hand_written_block() {
    let cmds = parse_commands("x4 = find_songs(genre=\"jazz\")\nx9 = play_song(song_name=x4.song_name, shuffle=False)\nconfirm(x9)").unwrap();
    let expected = parse_commands("x0 = find_songs(genre=\"jazz\")\nx1 = play_song(shuffle=False, song_name=x0.song_name)\nconfirm(x1)").unwrap();
    assert_eq!(canonicalize(&cmds).unwrap(), expected);
}

#[test]
fn syntax_errors_point_at_the_offset() {
    let err = parse_commands("say()\nx0 = f(a=)").unwrap_err();
    match err {
        dialogen::Error::Syntax { offset, .. } => assert_eq!(offset, 15),
        other => panic!("unexpected {other:?}"),
    }
}
