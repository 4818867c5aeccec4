//! The function-call annotation language used by System and Signal turns.
//!
//! One command per line:
//!
//! ```text
//! x0 = book_hotel_room(city="Paris")
//! x0.check_in_date = "5th of March"
//! confirm(x0)
//! say(message="Hi")
//! ```
//!
//! Commands are plain data; [`parse_command`] and [`serialize_command`] are
//! inverse to each other, and [`canonicalize`] defines the equality used by the
//! self-consistency validators and the exact-match metrics.

mod canonical;
mod parser;
mod signal;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use canonical::{canonicalize, canonicalize_in_scope, commands_equal, commands_equal_in_scope};
pub use parser::{parse_command, parse_commands, parse_kwargs, parse_value};
pub use signal::{parse_signal, serde_opt_line as serde_opt_signal, serialize_signal, EntityRecord, SignalPayload};

/// Spelling of the string placeholder emitted by the labelling stage before
/// string slot values are extracted.
pub const PLACEHOLDER: &str = "<STR>";

/// A variable id, written `x<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

impl std::str::FromStr for VarId {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('x')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse().ok())
            .map(VarId)
            .ok_or_else(|| crate::Error::parse(format!("`{s}` is not a variable id")))
    }
}

impl Serialize for VarId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VarId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Integer(i64),
    Number(f64),
    Boolean(bool),
    VarRef(VarId),
    AttrRef(VarId, String),
    List(Vec<Value>),
    /// `<STR>`: a string slot value still to be extracted from the user text.
    Placeholder,
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, Value::Placeholder)
    }

    /// True if this value or any nested element is the placeholder.
    pub fn contains_placeholder(&self) -> bool {
        match self {
            Value::Placeholder => true,
            Value::List(items) => items.iter().any(Value::contains_placeholder),
            _ => false,
        }
    }

    /// Renders the value as the user would say it, without quoting.
    pub fn display_plain(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Boolean(true) => "yes".into(),
            Value::Boolean(false) => "no".into(),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => write_quoted(f, s),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Number(n) => {
                let s = format!("{n}");
                if s.contains(['.', 'e', 'E']) {
                    f.write_str(&s)
                } else {
                    write!(f, "{s}.0")
                }
            }
            Value::Boolean(true) => f.write_str("True"),
            Value::Boolean(false) => f.write_str("False"),
            Value::VarRef(v) => write!(f, "{v}"),
            Value::AttrRef(v, slot) => write!(f, "{v}.{slot}"),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            Value::Placeholder => f.write_str(PLACEHOLDER),
        }
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            '\r' => f.write_str("\\r")?,
            c if c.is_control() => write!(f, "\\u{{{:x}}}", c as u32)?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::{SerializeMap, SerializeSeq};
        match self {
            Value::Text(t) => s.serialize_str(t),
            Value::Integer(i) => s.serialize_i64(*i),
            Value::Number(n) => s.serialize_f64(*n),
            Value::Boolean(b) => s.serialize_bool(*b),
            Value::List(items) => {
                let mut seq = s.serialize_seq(Some(items.len()))?;
                for item in items {
                    seq.serialize_element(item)?;
                }
                seq.end()
            }
            // References and placeholders have no JSON literal; keep their DSL text.
            other => {
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("dsl", &other.to_string())?;
                m.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::{self, MapAccess, SeqAccess, Visitor};

        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Value;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a slot value")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Value, E> {
                Ok(Value::text(v))
            }
            fn visit_string<E: de::Error>(self, v: String) -> Result<Value, E> {
                Ok(Value::Text(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Value, E> {
                Ok(Value::Integer(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
                i64::try_from(v)
                    .map(Value::Integer)
                    .map_err(|_| E::custom("integer out of range"))
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
                Ok(Value::Number(v))
            }
            fn visit_bool<E: de::Error>(self, v: bool) -> Result<Value, E> {
                Ok(Value::Boolean(v))
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
                let mut items = Vec::new();
                while let Some(item) = seq.next_element()? {
                    items.push(item);
                }
                Ok(Value::List(items))
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Value, A::Error> {
                let (key, text): (String, String) = map
                    .next_entry()?
                    .ok_or_else(|| de::Error::custom("empty value object"))?;
                if key != "dsl" {
                    return Err(de::Error::unknown_field(&key, &["dsl"]));
                }
                parse_value(&text).map_err(de::Error::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Ordered keyword arguments.
pub type Kwargs = Vec<(String, Value)>;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    IntentCall {
        var: VarId,
        intent: String,
        args: Kwargs,
    },
    AttrAssign {
        var: VarId,
        slot: String,
        value: Value,
    },
    Say {
        args: Kwargs,
    },
    Confirm {
        var: VarId,
    },
}

impl Command {
    /// Slot assignments carried by this command: intent-call arguments or the
    /// single attribute assignment. `say` arguments are not slot values.
    pub fn slot_values(&self) -> Vec<(VarId, &str, &Value)> {
        match self {
            Command::IntentCall { var, args, .. } => {
                args.iter().map(|(k, v)| (*var, k.as_str(), v)).collect()
            }
            Command::AttrAssign { var, slot, value } => vec![(*var, slot.as_str(), value)],
            _ => Vec::new(),
        }
    }

    pub fn is_say(&self) -> bool {
        matches!(self, Command::Say { .. })
    }

    pub fn contains_placeholder(&self) -> bool {
        match self {
            Command::IntentCall { args, .. } | Command::Say { args } => {
                args.iter().any(|(_, v)| v.contains_placeholder())
            }
            Command::AttrAssign { value, .. } => value.contains_placeholder(),
            Command::Confirm { .. } => false,
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn kwargs(f: &mut fmt::Formatter<'_>, args: &Kwargs) -> fmt::Result {
            for (i, (k, v)) in args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{k}={v}")?;
            }
            Ok(())
        }
        match self {
            Command::IntentCall { var, intent, args } => {
                write!(f, "{var} = {intent}(")?;
                kwargs(f, args)?;
                f.write_str(")")
            }
            Command::AttrAssign { var, slot, value } => write!(f, "{var}.{slot} = {value}"),
            Command::Say { args } => {
                f.write_str("say(")?;
                kwargs(f, args)?;
                f.write_str(")")
            }
            Command::Confirm { var } => write!(f, "confirm({var})"),
        }
    }
}

/// Canonical single-line text for a command.
pub fn serialize_command(cmd: &Command) -> String {
    cmd.to_string()
}

/// True for identifiers the grammar accepts as intent, slot or keyword names.
pub fn is_identifier(s: &str) -> bool {
    let mut bytes = s.bytes();
    matches!(bytes.next(), Some(b) if b.is_ascii_alphabetic() || b == b'_')
        && bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Serde adapter storing a command list as canonical text lines.
pub mod serde_lines {
    use super::*;

    pub fn serialize<S: Serializer>(cmds: &[Command], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(cmds.iter().map(serialize_command))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Command>, D::Error> {
        let lines = Vec::<String>::deserialize(d)?;
        lines
            .iter()
            .map(|l| parse_command(l).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// [`serde_lines`] for an optional command list.
pub mod serde_opt_lines {
    use super::*;

    pub fn serialize<S: Serializer>(cmds: &Option<Vec<Command>>, s: S) -> Result<S::Ok, S::Error> {
        match cmds {
            Some(c) => s.collect_seq(c.iter().map(serialize_command)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Command>>, D::Error> {
        let lines = Option::<Vec<String>>::deserialize(d)?;
        lines
            .map(|lines| {
                lines
                    .iter()
                    .map(|l| parse_command(l).map_err(serde::de::Error::custom))
                    .collect()
            })
            .transpose()
    }
}
