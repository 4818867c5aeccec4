use std::fmt;

use serde::{Deserialize, Serialize};

use super::parser::Parser;
use super::{Kwargs, Value, VarId};
use crate::Result;

/// An entity held by the mock back-end and returned by query intents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: String,
    #[serde(with = "kwargs_map")]
    pub fields: Kwargs,
}

impl EntityRecord {
    pub fn field(&self, name: &str) -> Option<&Value> {
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }
}

impl fmt::Display for EntityRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entity(id={}", Value::text(self.id.clone()))?;
        for (k, v) in &self.fields {
            write!(f, ", {k}={v}")?;
        }
        f.write_str(")")
    }
}

/// What the mock back-end reports after processing a system command.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalPayload {
    MissingSlots { var: VarId, slots: Vec<String> },
    ConfirmationRequired { var: VarId },
    Performed { var: VarId, entity_id: String },
    QueryResult { var: VarId, entities: Vec<EntityRecord> },
    Hint { text: String },
}

impl SignalPayload {
    pub fn var(&self) -> Option<VarId> {
        match self {
            SignalPayload::MissingSlots { var, .. }
            | SignalPayload::ConfirmationRequired { var }
            | SignalPayload::Performed { var, .. }
            | SignalPayload::QueryResult { var, .. } => Some(*var),
            SignalPayload::Hint { .. } => None,
        }
    }

    /// True when the signal reports an intent as completed.
    pub fn is_completion(&self) -> bool {
        matches!(self, SignalPayload::Performed { .. } | SignalPayload::QueryResult { .. })
    }
}

impl fmt::Display for SignalPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("signal: ")?;
        match self {
            SignalPayload::MissingSlots { var, slots } => {
                let list = Value::List(slots.iter().cloned().map(Value::Text).collect());
                write!(f, "missing_slots({var}, {list})")
            }
            SignalPayload::ConfirmationRequired { var } => write!(f, "confirmation_required({var})"),
            SignalPayload::Performed { var, entity_id } => {
                write!(f, "performed({var}, id={})", Value::text(entity_id.clone()))
            }
            SignalPayload::QueryResult { var, entities } => {
                write!(f, "query_result({var}, entities=[")?;
                for (i, e) in entities.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str("])")
            }
            SignalPayload::Hint { text } => write!(f, "hint({})", Value::text(text.clone())),
        }
    }
}

pub fn serialize_signal(signal: &SignalPayload) -> String {
    signal.to_string()
}

/// Parses a `signal: ...` line.
pub fn parse_signal(line: &str) -> Result<SignalPayload> {
    let mut p = Parser::new(line);
    p.expect("signal")?;
    p.expect(":")?;
    let kind = p.expect_ident("signal kind")?;
    p.expect("(")?;
    let signal = match kind {
        "missing_slots" => {
            let var = p.expect_var()?;
            p.expect(",")?;
            p.expect("[")?;
            let mut slots = Vec::new();
            loop {
                p.ws();
                slots.push(p.string()?);
                p.ws();
                if p.eat("]") {
                    break;
                }
                p.expect(",")?;
            }
            SignalPayload::MissingSlots { var, slots }
        }
        "confirmation_required" => SignalPayload::ConfirmationRequired { var: p.expect_var()? },
        "performed" => {
            let var = p.expect_var()?;
            p.expect(",")?;
            p.expect("id")?;
            p.expect("=")?;
            p.ws();
            SignalPayload::Performed {
                var,
                entity_id: p.string()?,
            }
        }
        "query_result" => {
            let var = p.expect_var()?;
            p.expect(",")?;
            p.expect("entities")?;
            p.expect("=")?;
            p.expect("[")?;
            let mut entities = Vec::new();
            p.ws();
            if !p.eat("]") {
                loop {
                    p.expect("entity")?;
                    p.expect("(")?;
                    p.expect("id")?;
                    p.expect("=")?;
                    p.ws();
                    let id = p.string()?;
                    p.ws();
                    let fields = if p.eat(",") { p.kwargs()? } else { Vec::new() };
                    p.expect(")")?;
                    entities.push(EntityRecord { id, fields });
                    p.ws();
                    if p.eat("]") {
                        break;
                    }
                    p.expect(",")?;
                }
            }
            SignalPayload::QueryResult { var, entities }
        }
        "hint" => {
            p.ws();
            SignalPayload::Hint { text: p.string()? }
        }
        _ => return p.error(&["signal kind"]),
    };
    p.expect(")")?;
    p.end()?;
    Ok(signal)
}

/// Serde adapter storing an optional signal as its `signal:` line.
pub mod serde_opt_line {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{parse_signal, SignalPayload};

    pub fn serialize<S: Serializer>(sig: &Option<SignalPayload>, s: S) -> Result<S::Ok, S::Error> {
        match sig {
            Some(sig) => s.serialize_str(&sig.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SignalPayload>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|l| parse_signal(&l).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Serde adapter: keyword arguments as an ordered JSON object.
pub(crate) mod kwargs_map {
    use serde::de::{MapAccess, Visitor};
    use serde::ser::SerializeMap;
    use serde::{Deserializer, Serializer};

    use super::{Kwargs, Value};

    pub fn serialize<S: Serializer>(args: &Kwargs, s: S) -> Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(args.len()))?;
        for (k, v) in args {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Kwargs, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Kwargs;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map of slot values")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Kwargs, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(out)
            }
        }
        d.deserialize_map(V)
    }
}
