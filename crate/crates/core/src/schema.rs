//! Intent schemas: generation from descriptions, slot value pools, query
//! intent derivation and merging.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsl::{is_identifier, Value};
use crate::prompts::{Prompts, Stage};
use crate::provider::{with_retries, LlmProvider, DEFAULT_TEMPERATURE};
use crate::{Error, Result};

/// `book_hotel_room` as `book hotel room`.
pub fn humanize(name: &str) -> String {
    name.replace('_', " ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Text,
    Integer,
    Number,
    Boolean,
    DateText,
    TimeText,
    EnumText,
}

impl ValueType {
    pub fn name(self) -> &'static str {
        match self {
            ValueType::Text => "text",
            ValueType::Integer => "integer",
            ValueType::Number => "number",
            ValueType::Boolean => "boolean",
            ValueType::DateText => "date_text",
            ValueType::TimeText => "time_text",
            ValueType::EnumText => "enum_text",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "text" => ValueType::Text,
            "integer" => ValueType::Integer,
            "number" => ValueType::Number,
            "boolean" => ValueType::Boolean,
            "date_text" => ValueType::DateText,
            "time_text" => ValueType::TimeText,
            "enum_text" => ValueType::EnumText,
            _ => return None,
        })
    }

    /// Free-text slots whose values are copied from spans of the user text.
    pub fn is_string(self) -> bool {
        matches!(self, ValueType::Text | ValueType::DateText | ValueType::TimeText)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub value_type: ValueType,
    pub mandatory: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_values: Option<Vec<String>>,
}

impl SlotSpec {
    pub fn new(name: &str, value_type: ValueType, mandatory: bool) -> Self {
        Self {
            name: name.into(),
            value_type,
            mandatory,
            allowed_values: None,
        }
    }

    pub fn is_string(&self) -> bool {
        self.value_type.is_string()
    }

    /// True if `value` is a well-typed value for this slot.
    pub fn accepts(&self, value: &Value) -> bool {
        match (self.value_type, value) {
            (ValueType::Text | ValueType::DateText | ValueType::TimeText, Value::Text(_)) => true,
            (ValueType::EnumText, Value::Text(s)) => self
                .allowed_values
                .as_ref()
                .is_some_and(|a| a.iter().any(|v| v.eq_ignore_ascii_case(s.trim()))),
            (ValueType::Integer, Value::Integer(_)) => true,
            (ValueType::Number, Value::Number(n)) => n.is_finite(),
            (ValueType::Number, Value::Integer(_)) => true,
            (ValueType::Boolean, Value::Boolean(_)) => true,
            _ => false,
        }
    }

    /// Reads a raw candidate as this slot's type; `None` if it does not fit.
    pub fn coerce(&self, raw: &str) -> Option<Value> {
        let raw = raw.trim();
        if raw.is_empty() {
            return None;
        }
        let value = match self.value_type {
            ValueType::Integer => Value::Integer(raw.parse().ok()?),
            ValueType::Number => Value::Number(raw.parse::<f64>().ok().filter(|n| n.is_finite())?),
            ValueType::Boolean => match raw.to_ascii_lowercase().as_str() {
                "true" | "yes" => Value::Boolean(true),
                "false" | "no" => Value::Boolean(false),
                _ => return None,
            },
            ValueType::EnumText => {
                let allowed = self.allowed_values.as_ref()?;
                Value::text(allowed.iter().find(|a| a.eq_ignore_ascii_case(raw))?.clone())
            }
            _ => Value::text(raw),
        };
        self.accepts(&value).then_some(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    Transactional,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSchema {
    pub intent_name: String,
    pub domain: String,
    pub kind: IntentKind,
    pub slots: Vec<SlotSpec>,
    pub entity_name: String,
    pub requires_confirmation: bool,
    pub description: String,
}

fn is_snake_case(s: &str) -> bool {
    s.bytes().next().is_some_and(|b| b.is_ascii_lowercase())
        && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        && is_identifier(s)
}

impl IntentSchema {
    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn mandatory_slots(&self) -> impl Iterator<Item = &SlotSpec> {
        self.slots.iter().filter(|s| s.mandatory)
    }

    pub fn optional_slots(&self) -> impl Iterator<Item = &SlotSpec> {
        self.slots.iter().filter(|s| !s.mandatory)
    }

    pub fn is_query(&self) -> bool {
        self.kind == IntentKind::Query
    }

    /// Checks the per-schema invariants.
    pub fn validate(&self) -> Result<()> {
        for (what, name) in [
            ("intent name", &self.intent_name),
            ("domain", &self.domain),
            ("entity name", &self.entity_name),
        ] {
            if !is_snake_case(name) {
                return Err(Error::parse(format!("{what} `{name}` is not lowercase snake_case")));
            }
        }
        let mut seen = HashSet::new();
        for slot in &self.slots {
            if !is_snake_case(&slot.name) {
                return Err(Error::parse(format!(
                    "slot name `{}` is not lowercase snake_case",
                    slot.name
                )));
            }
            if !seen.insert(slot.name.as_str()) {
                return Err(Error::parse(format!(
                    "duplicate slot `{}` in {}",
                    slot.name, self.intent_name
                )));
            }
            if slot.value_type == ValueType::EnumText
                && slot.allowed_values.as_ref().is_none_or(Vec::is_empty)
            {
                return Err(Error::parse(format!("enum slot `{}` has no allowed values", slot.name)));
            }
        }
        if self.is_query() && self.slots.iter().any(|s| s.mandatory) {
            return Err(Error::parse(format!(
                "query intent {} has mandatory slots",
                self.intent_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub intents: Vec<IntentSchema>,
    pub domains: Vec<String>,
}

impl SchemaCatalog {
    /// Builds a catalog, listing domains in first-appearance order.
    pub fn new(intents: Vec<IntentSchema>) -> Self {
        let mut domains: Vec<String> = Vec::new();
        for i in &intents {
            if !domains.contains(&i.domain) {
                domains.push(i.domain.clone());
            }
        }
        Self { intents, domains }
    }

    pub fn get(&self, name: &str) -> Option<&IntentSchema> {
        self.intents.iter().find(|i| i.intent_name == name)
    }

    pub fn require(&self, name: &str) -> Result<&IntentSchema> {
        self.get(name).ok_or_else(|| Error::UnknownIntent(name.to_string()))
    }

    pub fn transactional(&self) -> impl Iterator<Item = &IntentSchema> {
        self.intents.iter().filter(|i| i.kind == IntentKind::Transactional)
    }

    pub fn queries(&self) -> impl Iterator<Item = &IntentSchema> {
        self.intents.iter().filter(|i| i.kind == IntentKind::Query)
    }

    /// The query intent returning `entity_name`, if any.
    pub fn query_for_entity(&self, entity_name: &str) -> Option<&IntentSchema> {
        self.queries().find(|q| q.entity_name == entity_name)
    }

    /// Slot specs describing the entities of `entity_name`: the union of the
    /// producing transactional intents' slots. A field is required when it is
    /// mandatory in every producer.
    pub fn entity_fields(&self, entity_name: &str) -> Vec<SlotSpec> {
        let producers: Vec<_> = self
            .transactional()
            .filter(|t| t.entity_name == entity_name)
            .collect();
        let mut out: Vec<SlotSpec> = Vec::new();
        for p in &producers {
            for s in &p.slots {
                if out.iter().all(|o| o.name != s.name) {
                    let required = producers
                        .iter()
                        .all(|q| q.slot(&s.name).is_some_and(|x| x.mandatory));
                    out.push(SlotSpec {
                        mandatory: required,
                        ..s.clone()
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for intent in &self.intents {
            intent.validate()?;
            if !names.insert(intent.intent_name.as_str()) {
                return Err(Error::parse(format!("duplicate intent `{}`", intent.intent_name)));
            }
            if !self.domains.contains(&intent.domain) {
                return Err(Error::parse(format!(
                    "intent `{}` has unlisted domain `{}`",
                    intent.intent_name, intent.domain
                )));
            }
            if intent.is_query()
                && !self
                    .transactional()
                    .any(|t| t.entity_name == intent.entity_name)
            {
                return Err(Error::parse(format!(
                    "query `{}` returns `{}`, which no transactional intent produces",
                    intent.intent_name, intent.entity_name
                )));
            }
        }
        Ok(())
    }

    /// Total number of (intent, slot) pairs.
    pub fn slot_count(&self) -> usize {
        self.intents.iter().map(|i| i.slots.len()).sum()
    }
}

/// Writes a catalog file: one intent per line.
pub fn write_catalog(catalog: &SchemaCatalog, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for intent in &catalog.intents {
        serde_json::to_writer(&mut out, intent).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<SchemaCatalog> {
    let text = std::fs::read_to_string(path)?;
    let intents = crate::dataset::parse_lines::<IntentSchema>(&text)?;
    let catalog = SchemaCatalog::new(intents);
    catalog.validate()?;
    Ok(catalog)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotValuePool {
    pub intent_name: String,
    pub values_per_slot: BTreeMap<String, Vec<Value>>,
}

impl SlotValuePool {
    pub fn candidates(&self, slot: &str) -> &[Value] {
        self.values_per_slot.get(slot).map(Vec::as_slice).unwrap_or_default()
    }
}

pub fn write_pools(pools: &[SlotValuePool], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pool in pools {
        serde_json::to_writer(&mut out, pool).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pools(path: &Path) -> Result<Vec<SlotValuePool>> {
    let text = std::fs::read_to_string(path)?;
    crate::dataset::parse_lines(&text)
}

/// Parses a stage-1 reply in the `KEY: value` line format.
pub fn parse_schema_reply(description: &str, reply: &str) -> Result<IntentSchema> {
    let mut intent = None;
    let mut domain = None;
    let mut entity = None;
    let mut confirm = None;
    let mut slots = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(format!("unexpected line `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "INTENT" => intent = Some(value.to_string()),
            "DOMAIN" => domain = Some(value.to_string()),
            "ENTITY" => entity = Some(value.to_string()),
            "CONFIRM" => {
                confirm = Some(match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::parse(format!("CONFIRM must be true or false, got `{value}`"))),
                })
            }
            "SLOT" => slots.push(parse_slot_line(value)?),
            other => return Err(Error::parse(format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::parse(format!("reply has no {k} line"));
    let schema = IntentSchema {
        intent_name: intent.ok_or_else(|| missing("INTENT"))?,
        domain: domain.ok_or_else(|| missing("DOMAIN"))?,
        kind: IntentKind::Transactional,
        slots,
        entity_name: entity.ok_or_else(|| missing("ENTITY"))?,
        requires_confirmation: confirm.unwrap_or(true),
        description: description.trim().to_string(),
    };
    schema.validate()?;
    Ok(schema)
}

fn parse_slot_line(value: &str) -> Result<SlotSpec> {
    let parts: Vec<&str> = value.split('|').map(str::trim).collect();
    let (name, ty, req, allowed) = match parts.as_slice() {
        [n, t, r] => (*n, *t, *r, None),
        [n, t, r, a] => (*n, *t, *r, Some(*a)),
        _ => return Err(Error::parse(format!("bad SLOT line `{value}`"))),
    };
    let value_type = ValueType::from_name(ty)
        .ok_or_else(|| Error::parse(format!("unsupported slot type `{ty}`")))?;
    let mandatory = match req {
        "mandatory" => true,
        "optional" => false,
        _ => return Err(Error::parse(format!("expected mandatory or optional, got `{req}`"))),
    };
    let allowed_values = match (value_type, allowed) {
        (ValueType::EnumText, Some(a)) => Some(
            a.split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect(),
        ),
        (ValueType::EnumText, None) => None,
        (_, Some(_)) => {
            return Err(Error::parse(format!("only enum_text slots list allowed values (`{name}`)")))
        }
        (_, None) => None,
    };
    Ok(SlotSpec {
        name: name.to_string(),
        value_type,
        mandatory,
        allowed_values,
    })
}

/// Stage 1: asks the provider for a schema matching `description`.
pub fn generate_intent_schema(
    description: &str,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Result<IntentSchema> {
    if description.trim().is_empty() {
        return Err(Error::precondition("intent description is empty"));
    }
    let prompt = prompts.render(
        Stage::IntentSchema,
        &[("description", description.trim())],
        serde_json::json!({ "description": description.trim() }),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, None)?;
    parse_schema_reply(description, &reply)
}

/// Parses a stage-2 reply (`VALUE: slot|candidate` lines), dropping
/// candidates that do not type-check.
pub fn parse_pool_reply(schema: &IntentSchema, reply: &str) -> Result<SlotValuePool> {
    let mut values: BTreeMap<String, Vec<Value>> = schema
        .slots
        .iter()
        .map(|s| (s.name.clone(), Vec::new()))
        .collect();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let body = line
            .strip_prefix("VALUE:")
            .ok_or_else(|| Error::parse(format!("unexpected line `{line}`")))?;
        let (slot, raw) = body
            .split_once('|')
            .ok_or_else(|| Error::parse(format!("bad VALUE line `{line}`")))?;
        let slot = slot.trim();
        let spec = schema
            .slot(slot)
            .ok_or_else(|| Error::parse(format!("`{slot}` is not a slot of {}", schema.intent_name)))?;
        match spec.coerce(raw) {
            Some(v) => {
                let list = values.get_mut(slot).expect("initialized for every slot");
                if !list.contains(&v) {
                    list.push(v);
                }
            }
            None => log::debug!("dropping candidate `{}` for {slot}", raw.trim()),
        }
    }
    if let Some((slot, _)) = values.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::TypeMismatch(format!(
            "no valid candidate for slot `{slot}` of {}",
            schema.intent_name
        )));
    }
    Ok(SlotValuePool {
        intent_name: schema.intent_name.clone(),
        values_per_slot: values,
    })
}

/// Stage 2: plausible candidate values for every slot.
pub fn generate_slot_value_pool(
    schema: &IntentSchema,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Result<SlotValuePool> {
    schema.validate()?;
    let listing = schema
        .slots
        .iter()
        .map(|s| format!("- {} ({})", s.name, s.value_type.name()))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = prompts.render(
        Stage::SlotValues,
        &[("schema", &format!("{}\n{listing}", schema.intent_name))],
        serde_json::json!({ "schema": schema }),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, None)?;
    parse_pool_reply(schema, &reply)
}

/// The query intent returning the entities `transactional` creates.
pub fn derive_query_intent(transactional: &IntentSchema) -> Result<IntentSchema> {
    if transactional.kind != IntentKind::Transactional {
        return Err(Error::precondition(format!(
            "{} is already a query intent",
            transactional.intent_name
        )));
    }
    Ok(IntentSchema {
        intent_name: format!("find_{}", transactional.entity_name),
        domain: transactional.domain.clone(),
        kind: IntentKind::Query,
        slots: transactional
            .slots
            .iter()
            .map(|s| SlotSpec {
                mandatory: false,
                ..s.clone()
            })
            .collect(),
        entity_name: transactional.entity_name.clone(),
        requires_confirmation: false,
        description: format!("Find {}", transactional.entity_name.replace('_', " ")),
    })
}

/// Merges query intents returning the same entity into one, taking the union
/// of their slots. Transactional intents are untouched.
pub fn merge_query_intents(catalog: &SchemaCatalog) -> SchemaCatalog {
    let mut out: Vec<IntentSchema> = Vec::with_capacity(catalog.intents.len());
    for intent in &catalog.intents {
        if intent.is_query() {
            if let Some(existing) = out
                .iter_mut()
                .find(|i| i.is_query() && i.entity_name == intent.entity_name)
            {
                for slot in &intent.slots {
                    if existing.slot(&slot.name).is_none() {
                        existing.slots.push(slot.clone());
                    }
                }
                continue;
            }
        }
        out.push(intent.clone());
    }
    SchemaCatalog::new(out)
}

/// Outcome of running stages 1-2 over a list of descriptions.
#[derive(Debug, Default)]
pub struct CatalogBuild {
    pub catalog: SchemaCatalog,
    pub pools: Vec<SlotValuePool>,
    /// Descriptions skipped after exhausting the retry budget, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Stages 1-2 for every description, then query derivation and merging.
/// Intents named in `denylist` are dropped after generation.
pub fn build_catalog(
    descriptions: &[String],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    denylist: &[String],
    retries: u32,
) -> CatalogBuild {
    let retryable = |e: &Error| matches!(e, Error::Parse(_) | Error::Provider(_) | Error::TypeMismatch(_));
    let mut build = CatalogBuild::default();
    let mut transactional: Vec<IntentSchema> = Vec::new();
    for description in descriptions {
        let schema = with_retries(retries, retryable, |_| {
            generate_intent_schema(description, provider, prompts)
        });
        let schema = match schema {
            Ok(s) => s,
            Err(e) => {
                build.skipped.push((description.clone(), e.to_string()));
                continue;
            }
        };
        if denylist.contains(&schema.intent_name) {
            build
                .skipped
                .push((description.clone(), format!("{} is denylisted", schema.intent_name)));
            continue;
        }
        if transactional.iter().any(|t| t.intent_name == schema.intent_name) {
            build
                .skipped
                .push((description.clone(), format!("duplicate intent {}", schema.intent_name)));
            continue;
        }
        transactional.push(schema);
    }
    let mut intents = transactional.clone();
    for t in &transactional {
        intents.push(derive_query_intent(t).expect("transactional by construction"));
    }
    let catalog = merge_query_intents(&SchemaCatalog::new(intents));

    let mut kept = Vec::new();
    for intent in &catalog.intents {
        match with_retries(retries, retryable, |_| generate_slot_value_pool(intent, provider, prompts)) {
            Ok(pool) => {
                build.pools.push(pool);
                kept.push(intent.clone());
            }
            Err(e) => build
                .skipped
                .push((intent.description.clone(), format!("slot values: {e}"))),
        }
    }
    // Dropping a producer can orphan a query; drop those too.
    let mut catalog = SchemaCatalog::new(kept);
    let produced: HashSet<String> = catalog.transactional().map(|t| t.entity_name.clone()).collect();
    catalog.intents.retain(|i| !i.is_query() || produced.contains(&i.entity_name));
    build
        .pools
        .retain(|p| catalog.get(&p.intent_name).is_some());
    build.catalog = SchemaCatalog::new(catalog.intents);
    build
}
