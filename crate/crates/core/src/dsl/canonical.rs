use std::collections::{BTreeSet, HashMap};

use super::{Command, Kwargs, Value, VarId};
use crate::{Error, Result};

/// Canonical form of a self-contained command list: variables renumbered in
/// first-use order from `x0`, keyword arguments sorted by name, numeric
/// literals normalized.
pub fn canonicalize(cmds: &[Command]) -> Result<Vec<Command>> {
    canonicalize_in_scope(&BTreeSet::new(), cmds)
}

/// Like [`canonicalize`], but for a list that continues a conversation in
/// which `known` variables are already defined. Known variables keep their
/// ids; new ones are numbered after the largest known id.
pub fn canonicalize_in_scope(known: &BTreeSet<VarId>, cmds: &[Command]) -> Result<Vec<Command>> {
    let mut renamer = Renamer {
        map: known.iter().map(|v| (*v, *v)).collect(),
        next: known.iter().next_back().map_or(0, |v| v.0 + 1),
    };
    cmds.iter().map(|c| renamer.command(c)).collect()
}

/// Equality under [`canonicalize`].
pub fn commands_equal(a: &[Command], b: &[Command]) -> Result<bool> {
    commands_equal_in_scope(&BTreeSet::new(), a, b)
}

pub fn commands_equal_in_scope(known: &BTreeSet<VarId>, a: &[Command], b: &[Command]) -> Result<bool> {
    if a.len() != b.len() {
        // Still surface dangling references on either side.
        canonicalize_in_scope(known, a)?;
        canonicalize_in_scope(known, b)?;
        return Ok(false);
    }
    Ok(canonicalize_in_scope(known, a)? == canonicalize_in_scope(known, b)?)
}

struct Renamer {
    map: HashMap<VarId, VarId>,
    next: u32,
}

impl Renamer {
    fn lookup(&self, v: VarId) -> Result<VarId> {
        self.map.get(&v).copied().ok_or(Error::DanglingVarRef(v))
    }

    fn command(&mut self, cmd: &Command) -> Result<Command> {
        Ok(match cmd {
            Command::IntentCall { var, intent, args } => {
                let args = self.kwargs(args)?;
                let fresh = VarId(self.next);
                self.next += 1;
                self.map.insert(*var, fresh);
                Command::IntentCall {
                    var: fresh,
                    intent: intent.clone(),
                    args,
                }
            }
            Command::AttrAssign { var, slot, value } => Command::AttrAssign {
                var: self.lookup(*var)?,
                slot: slot.clone(),
                value: self.value(value)?,
            },
            Command::Say { args } => Command::Say {
                args: self.kwargs(args)?,
            },
            Command::Confirm { var } => Command::Confirm {
                var: self.lookup(*var)?,
            },
        })
    }

    fn kwargs(&self, args: &Kwargs) -> Result<Kwargs> {
        let mut out = args
            .iter()
            .map(|(k, v)| Ok((k.clone(), self.value(v)?)))
            .collect::<Result<Kwargs>>()?;
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    fn value(&self, v: &Value) -> Result<Value> {
        Ok(match v {
            Value::VarRef(var) => Value::VarRef(self.lookup(*var)?),
            Value::AttrRef(var, slot) => Value::AttrRef(self.lookup(*var)?, slot.clone()),
            Value::List(items) => Value::List(items.iter().map(|i| self.value(i)).collect::<Result<_>>()?),
            Value::Number(n) if *n == 0.0 => Value::Number(0.0),
            other => other.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_commands;

    fn cmds(text: &str) -> Vec<Command> {
        parse_commands(text).unwrap()
    }

    #[test]
    fn renumbers_in_first_use_order() {
        let out = canonicalize(&cmds(r#"x3 = set_alarm(time="7am")"#)).unwrap();
        assert_eq!(out, cmds(r#"x0 = set_alarm(time="7am")"#));
    }

    #[test]
    fn sorts_keyword_arguments() {
        let out = canonicalize(&cmds("x0 = f(b=1, a=2)")).unwrap();
        assert_eq!(out, cmds("x0 = f(a=2, b=1)"));
    }

    #[test]
    fn dangling_reference_is_an_error() {
        let err = canonicalize(&cmds("x0 = f()\nx0.time = x9.time")).unwrap_err();
        assert!(matches!(err, Error::DanglingVarRef(VarId(9))));
    }

    #[test]
    fn references_follow_renumbering() {
        let out = canonicalize(&cmds("x5 = f()\nx2 = g(of=x5)\nx5.a = x2.b\nconfirm(x2)")).unwrap();
        assert_eq!(out, cmds("x0 = f()\nx1 = g(of=x0)\nx0.a = x1.b\nconfirm(x1)"));
    }

    #[test]
    fn equality_ignores_numbering_and_order() {
        // Hand-canonicalized: both sides become `x0 = book_flight(a="1", b=2)`, `confirm(x0)`.
        let a = cmds("x0 = book_flight(b=2, a=\"1\")\nconfirm(x0)");
        let b = cmds("x7 = book_flight(a=\"1\", b=2)\nconfirm(x7)");
        assert!(commands_equal(&a, &b).unwrap());
        assert!(commands_equal(&a, &a).unwrap());
        let c = cmds("x7 = book_flight(a=\"1\", b=3)\nconfirm(x7)");
        assert!(!commands_equal(&a, &c).unwrap());
    }

    #[test]
    fn scope_keeps_known_variables() {
        let known: BTreeSet<_> = [VarId(0)].into();
        let a = cmds("x0.city = \"Paris\"\nx4 = find_hotel_rooms()");
        let out = canonicalize_in_scope(&known, &a).unwrap();
        assert_eq!(out, cmds("x0.city = \"Paris\"\nx1 = find_hotel_rooms()"));
        assert!(canonicalize(&a).is_err());
    }

    #[test]
    fn negative_zero_normalizes() {
        let a = canonicalize(&cmds("say(v=-0.0)")).unwrap();
        let b = canonicalize(&cmds("say(v=0.0)")).unwrap();
        assert_eq!(format!("{}", a[0]), format!("{}", b[0]));
    }
}
