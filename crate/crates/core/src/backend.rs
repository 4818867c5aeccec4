//! The mock back-end: per-intent sessions driven by system commands.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsl::{Command, EntityRecord, Kwargs, SignalPayload, Value, VarId};
use crate::schema::{IntentKind, IntentSchema, SchemaCatalog};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Collecting,
    AwaitingConfirmation,
    Performed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentSession {
    pub var: VarId,
    pub schema_ref: String,
    pub provided: BTreeMap<String, Value>,
    pub state: SessionState,
    pub entity_id: Option<String>,
}

/// Entities by entity name. Ids are `<entity_name>-<n>`, numbered per name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityStore {
    pub entities: BTreeMap<String, Vec<EntityRecord>>,
}

impl EntityStore {
    /// Adds an entity and returns its new id.
    pub fn insert(&mut self, entity_name: &str, fields: Kwargs) -> String {
        let list = self.entities.entry(entity_name.to_string()).or_default();
        let mut n = list.len() + 1;
        let id = loop {
            let id = format!("{entity_name}-{n}");
            if list.iter().all(|e| e.id != id) {
                break id;
            }
            n += 1;
        };
        list.push(EntityRecord { id: id.clone(), fields });
        id
    }

    pub fn get(&self, entity_name: &str) -> &[EntityRecord] {
        self.entities.get(entity_name).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entities.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks id uniqueness within each entity name.
    pub fn validate(&self) -> Result<()> {
        for (name, list) in &self.entities {
            let mut ids = std::collections::HashSet::new();
            for e in list {
                if !ids.insert(e.id.as_str()) {
                    return Err(Error::parse(format!("duplicate entity id `{}` in {name}", e.id)));
                }
            }
        }
        Ok(())
    }
}

fn values_match(field: &Value, wanted: &Value) -> bool {
    match (field, wanted) {
        (Value::Text(a), Value::Text(b)) => a.trim().eq_ignore_ascii_case(b.trim()),
        (Value::Integer(a), Value::Number(b)) | (Value::Number(b), Value::Integer(a)) => {
            *a as f64 == *b
        }
        (a, b) => a == b,
    }
}

/// Entities of the query's entity name matching every argument exactly.
pub fn query_filter(
    store: &EntityStore,
    intent: &IntentSchema,
    args: &[(String, Value)],
) -> Result<Vec<EntityRecord>> {
    if intent.kind != IntentKind::Query {
        return Err(Error::precondition(format!("{} is not a query intent", intent.intent_name)));
    }
    for (slot, value) in args {
        let spec = intent.slot(slot).ok_or_else(|| {
            Error::TypeMismatch(format!("`{slot}` is not a filter of {}", intent.intent_name))
        })?;
        if !spec.accepts(value) {
            return Err(Error::TypeMismatch(format!(
                "{value} is not a valid {} for `{slot}`",
                spec.value_type.name()
            )));
        }
    }
    Ok(store
        .get(&intent.entity_name)
        .iter()
        .filter(|e| {
            args.iter()
                .all(|(k, v)| e.field(k).is_some_and(|f| values_match(f, v)))
        })
        .cloned()
        .collect())
}

/// Provided slot values of one intent, as tracked for goal-state comparison.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalEntry {
    pub intent: String,
    pub slots: BTreeMap<String, Value>,
    #[serde(default)]
    pub cancelled: bool,
}

pub type GoalState = BTreeMap<VarId, GoalEntry>;

/// Folds one command into a goal state without any schema checks. References
/// are resolved against the state where possible; unresolved ones are kept.
pub fn fold_goal(state: &mut GoalState, cmd: &Command) {
    let resolve = |state: &GoalState, v: &Value| match v {
        Value::AttrRef(var, slot) => state
            .get(var)
            .and_then(|e| e.slots.get(slot))
            .cloned()
            .unwrap_or_else(|| v.clone()),
        _ => v.clone(),
    };
    match cmd {
        Command::IntentCall { var, intent, args } => {
            let slots = args
                .iter()
                .filter(|(_, v)| !v.contains_placeholder())
                .map(|(k, v)| (k.clone(), resolve(state, v)))
                .collect();
            state.insert(
                *var,
                GoalEntry {
                    intent: intent.clone(),
                    slots,
                    cancelled: false,
                },
            );
        }
        Command::AttrAssign { var, slot, value } if !value.contains_placeholder() => {
            let value = resolve(state, value);
            state.entry(*var).or_default().slots.insert(slot.clone(), value);
        }
        _ => {}
    }
}

/// One conversation's back-end: intent sessions plus the entity store.
#[derive(Debug, Clone)]
pub struct BackendSession {
    pub sessions: BTreeMap<VarId, IntentSession>,
    pub store: EntityStore,
    catalog: Arc<SchemaCatalog>,
}

impl BackendSession {
    pub fn new(catalog: Arc<SchemaCatalog>, store: EntityStore) -> Self {
        Self {
            sessions: BTreeMap::new(),
            store,
            catalog,
        }
    }

    pub fn catalog(&self) -> &SchemaCatalog {
        &self.catalog
    }

    pub fn session(&self, var: VarId) -> Option<&IntentSession> {
        self.sessions.get(&var)
    }

    /// Applies a system command; `None` for commands with no back-end effect.
    pub fn apply_command(&mut self, cmd: &Command) -> Result<Option<SignalPayload>> {
        match cmd {
            Command::Say { .. } => Ok(None),
            Command::IntentCall { var, intent, args } => {
                let schema = self.catalog.require(intent)?.clone();
                if self.sessions.contains_key(var) {
                    return Err(Error::InvalidTransition(format!("{var} is already defined")));
                }
                let args = args
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), self.resolve(&schema, k, v)?)))
                    .collect::<Result<Vec<_>>>()?;
                let mut session = IntentSession {
                    var: *var,
                    schema_ref: schema.intent_name.clone(),
                    provided: args.iter().cloned().collect(),
                    state: SessionState::Collecting,
                    entity_id: None,
                };
                if schema.is_query() {
                    let entities = query_filter(&self.store, &schema, &args)?;
                    session.state = SessionState::Performed;
                    self.sessions.insert(*var, session);
                    return Ok(Some(SignalPayload::QueryResult {
                        var: *var,
                        entities,
                    }));
                }
                self.sessions.insert(*var, session);
                self.evaluate(*var, &schema).map(Some)
            }
            Command::AttrAssign { var, slot, value } => {
                let session = self.sessions.get(var).ok_or(Error::UnknownVariable(*var))?;
                let schema = self.catalog.require(&session.schema_ref)?.clone();
                if matches!(session.state, SessionState::Performed | SessionState::Cancelled) {
                    return Err(Error::InvalidTransition(format!(
                        "cannot assign `{slot}` on {var}, which is {:?}",
                        session.state
                    )));
                }
                let value = self.resolve(&schema, slot, value)?;
                self.sessions
                    .get_mut(var)
                    .expect("checked above")
                    .provided
                    .insert(slot.clone(), value);
                self.evaluate(*var, &schema).map(Some)
            }
            Command::Confirm { var } => {
                let session = self.sessions.get(var).ok_or(Error::UnknownVariable(*var))?;
                if session.state != SessionState::AwaitingConfirmation {
                    return Err(Error::InvalidTransition(format!(
                        "confirm on {var}, which is {:?}",
                        session.state
                    )));
                }
                let schema = self.catalog.require(&session.schema_ref)?.clone();
                Ok(Some(self.perform(*var, &schema)))
            }
        }
    }

    /// Marks every session not yet performed as cancelled.
    pub fn cancel_open(&mut self) {
        for s in self.sessions.values_mut() {
            if s.state != SessionState::Performed {
                s.state = SessionState::Cancelled;
            }
        }
    }

    pub fn goal_state(&self) -> GoalState {
        self.sessions
            .iter()
            .map(|(var, s)| {
                (
                    *var,
                    GoalEntry {
                        intent: s.schema_ref.clone(),
                        slots: s.provided.clone(),
                        cancelled: s.state == SessionState::Cancelled,
                    },
                )
            })
            .collect()
    }

    fn resolve(&self, schema: &IntentSchema, slot: &str, value: &Value) -> Result<Value> {
        let spec = schema.slot(slot).ok_or_else(|| {
            Error::TypeMismatch(format!("`{slot}` is not a slot of {}", schema.intent_name))
        })?;
        let value = match value {
            Value::AttrRef(var, other) => self
                .sessions
                .get(var)
                .ok_or(Error::UnknownVariable(*var))?
                .provided
                .get(other)
                .cloned()
                .ok_or_else(|| Error::TypeMismatch(format!("{var}.{other} has no value")))?,
            Value::VarRef(var) => return Err(Error::TypeMismatch(format!("{var} is not a slot value"))),
            v => v.clone(),
        };
        if !spec.accepts(&value) {
            return Err(Error::TypeMismatch(format!(
                "{value} is not a valid {} for `{slot}`",
                spec.value_type.name()
            )));
        }
        Ok(value)
    }

    fn evaluate(&mut self, var: VarId, schema: &IntentSchema) -> Result<SignalPayload> {
        let session = self.sessions.get_mut(&var).expect("session exists");
        let missing: Vec<String> = schema
            .mandatory_slots()
            .filter(|s| !session.provided.contains_key(&s.name))
            .map(|s| s.name.clone())
            .collect();
        if !missing.is_empty() {
            return Ok(SignalPayload::MissingSlots { var, slots: missing });
        }
        if schema.requires_confirmation {
            session.state = SessionState::AwaitingConfirmation;
            return Ok(SignalPayload::ConfirmationRequired { var });
        }
        Ok(self.perform(var, schema))
    }

    fn perform(&mut self, var: VarId, schema: &IntentSchema) -> SignalPayload {
        let session = self.sessions.get_mut(&var).expect("session exists");
        debug_assert!(schema.mandatory_slots().all(|s| session.provided.contains_key(&s.name)));
        let fields: Kwargs = schema
            .slots
            .iter()
            .filter_map(|s| session.provided.get(&s.name).map(|v| (s.name.clone(), v.clone())))
            .collect();
        let entity_id = self.store.insert(&schema.entity_name, fields);
        session.state = SessionState::Performed;
        session.entity_id = Some(entity_id.clone());
        SignalPayload::Performed { var, entity_id }
    }
}
