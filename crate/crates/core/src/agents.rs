//! User, system and response agents, and the turn-by-turn conversation loop.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendSession, SessionState};
use crate::dataset::ConversationRecord;
use crate::dsl::{parse_commands, parse_value, Command, SignalPayload, Value, VarId};
use crate::planner::{strip_token, ConversationPlan, ConversationRules, Phenomenon, PhenomenonKind, TriggerHint};
use crate::prompts::{Prompts, Stage};
use crate::provider::{with_retries, LlmProvider, DEFAULT_TEMPERATURE};
use crate::schema::SchemaCatalog;
use crate::validation::{self, ValidationConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    User,
    System,
    Signal,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub kind: TurnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::dsl::serde_opt_lines")]
    pub commands: Option<Vec<Command>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::dsl::serde_opt_signal")]
    pub signal: Option<SignalPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phenomenon: Option<PhenomenonKind>,
}

impl TurnRecord {
    pub fn user(text: impl Into<String>, phenomenon: Option<PhenomenonKind>) -> Self {
        Self {
            kind: TurnKind::User,
            text: Some(text.into()),
            commands: None,
            signal: None,
            phenomenon,
        }
    }

    pub fn system(commands: Vec<Command>) -> Self {
        Self {
            kind: TurnKind::System,
            text: None,
            commands: Some(commands),
            signal: None,
            phenomenon: None,
        }
    }

    pub fn signal(signal: SignalPayload) -> Self {
        Self {
            kind: TurnKind::Signal,
            text: None,
            commands: None,
            signal: Some(signal),
            phenomenon: None,
        }
    }

    pub fn response(text: impl Into<String>) -> Self {
        Self {
            kind: TurnKind::Response,
            text: Some(text.into()),
            commands: None,
            signal: None,
            phenomenon: None,
        }
    }

    pub fn commands(&self) -> &[Command] {
        self.commands.as_deref().unwrap_or_default()
    }

    /// Checks that the payload matches the kind.
    pub fn check(&self) -> Result<()> {
        let ok = match self.kind {
            TurnKind::User | TurnKind::Response => self.text.is_some() && self.commands.is_none() && self.signal.is_none(),
            TurnKind::System => self.commands.is_some() && self.text.is_none() && self.signal.is_none(),
            TurnKind::Signal => self.signal.is_some() && self.text.is_none() && self.commands.is_none(),
        };
        if !ok || (self.phenomenon.is_some() && self.kind != TurnKind::User) {
            return Err(Error::precondition(format!("{:?} turn has the wrong payload", self.kind)));
        }
        Ok(())
    }
}

/// Checks the turn grammar: the conversation opens with a user turn, system
/// turns follow user or signal turns, signals follow system or signal turns,
/// responses follow a system `say` or close a salvaged conversation.
pub fn check_turn_grammar(turns: &[TurnRecord], salvaged: bool) -> std::result::Result<(), (usize, String)> {
    if turns.first().is_some_and(|t| t.kind != TurnKind::User) {
        return Err((0, "conversation does not open with a user turn".into()));
    }
    for (i, turn) in turns.iter().enumerate() {
        turn.check().map_err(|e| (i, e.to_string()))?;
        let prev = i.checked_sub(1).map(|p| &turns[p]);
        let ok = match (turn.kind, prev.map(|p| p.kind)) {
            (TurnKind::User, None | Some(TurnKind::Response)) => true,
            (TurnKind::System, Some(TurnKind::User | TurnKind::Signal)) => true,
            (TurnKind::Signal, Some(TurnKind::System | TurnKind::Signal)) => true,
            (TurnKind::Response, Some(TurnKind::System)) => prev.is_some_and(|p| p.commands().iter().any(Command::is_say)),
            (TurnKind::Response, Some(TurnKind::Response)) => salvaged && i + 1 == turns.len(),
            _ => false,
        };
        if !ok {
            return Err((i, format!("{:?} turn cannot follow {:?}", turn.kind, prev.map(|p| p.kind))));
        }
        if turn.kind == TurnKind::System
            && turn.commands().iter().any(Command::is_say)
            && turns.get(i + 1).map(|t| t.kind) != Some(TurnKind::Response)
        {
            return Err((i, "say() is not followed by a response".into()));
        }
    }
    if let Some(last) = turns.last() {
        if last.kind != TurnKind::Response {
            return Err((turns.len() - 1, "conversation does not end with a response".into()));
        }
    }
    Ok(())
}

/// Plain-text transcript used in prompts.
pub fn render_history(turns: &[TurnRecord]) -> String {
    turns
        .iter()
        .map(|t| match t.kind {
            TurnKind::User => format!("User: {}", t.text.as_deref().unwrap_or_default()),
            TurnKind::System => format!(
                "System: {}",
                t.commands().iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
            ),
            TurnKind::Signal => format!("Signal: {}", t.signal.as_ref().map(ToString::to_string).unwrap_or_default()),
            TurnKind::Response => format!("Response: {}", t.text.as_deref().unwrap_or_default()),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Tool listing for labelling prompts, and its structured form.
pub fn tools_listing(catalog: &SchemaCatalog) -> (String, serde_json::Value) {
    let text = catalog
        .intents
        .iter()
        .map(|i| {
            let slots: Vec<String> = i
                .slots
                .iter()
                .map(|s| format!("{}: {}{}", s.name, s.value_type.name(), if s.mandatory { "" } else { "?" }))
                .collect();
            format!("{}({})", i.intent_name, slots.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n");
    let json = catalog
        .intents
        .iter()
        .map(|i| {
            serde_json::json!({
                "name": i.intent_name,
                "slots": i.slots.iter().map(|s| serde_json::json!({
                    "name": s.name,
                    "type": s.value_type.name(),
                    "string": s.is_string(),
                    "allowed": s.allowed_values,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    (text, serde_json::Value::Array(json))
}

/// Everything a labelling call (stages 10, 13 and 14) sees.
pub struct LabelRequest<'a> {
    pub history: &'a [TurnRecord],
    pub catalog: &'a SchemaCatalog,
    pub tools: &'a (String, serde_json::Value),
    /// Variables defined so far, with their intent.
    pub var_intents: BTreeMap<VarId, String>,
    /// Structured back-end state offered as context.
    pub sessions: serde_json::Value,
    pub rules: Option<&'a ConversationRules>,
}

impl LabelRequest<'_> {
    pub fn known(&self) -> BTreeSet<VarId> {
        self.var_intents.keys().copied().collect()
    }

    pub fn prompt(&self, stage: Stage, prompts: &Prompts) -> String {
        let history = render_history(self.history);
        let rules = self.rules.map(ConversationRules::render).unwrap_or_default();
        let next_var = self.var_intents.keys().next_back().map_or(0, |v| v.0 + 1);
        prompts.render(
            stage,
            &[("tools", &self.tools.0), ("history", &history), ("rules", &rules)],
            serde_json::json!({
                "history": self.history,
                "tools": self.tools.1,
                "sessions": self.sessions,
                "next_var": next_var,
            }),
        )
    }
}

pub fn sessions_json(backend: &BackendSession) -> serde_json::Value {
    backend
        .sessions
        .values()
        .map(|s| {
            serde_json::json!({
                "var": s.var,
                "intent": s.schema_ref,
                "state": s.state,
                "provided": s.provided.keys().collect::<Vec<_>>(),
            })
        })
        .collect()
}

/// Parses a labelling reply and enforces the placeholder contract: string
/// slots carry `<STR>`, other slots carry literals.
pub fn parse_label_reply(reply: &str, req: &LabelRequest) -> Result<Vec<Command>> {
    let cmds = parse_commands(reply)?;
    if cmds.is_empty() {
        return Err(Error::parse("no commands in reply"));
    }
    let mut intents = req.var_intents.clone();
    for cmd in &cmds {
        if let Command::IntentCall { var, intent, .. } = cmd {
            intents.insert(*var, intent.clone());
        }
        for (var, slot, value) in cmd.slot_values() {
            let spec = intents
                .get(&var)
                .and_then(|i| req.catalog.get(i))
                .and_then(|i| i.slot(slot));
            let Some(spec) = spec else { continue };
            if spec.is_string() && matches!(value, Value::Text(_)) {
                return Err(Error::parse(format!("literal string for `{slot}`; expected <STR>")));
            }
            if !spec.is_string() && value.contains_placeholder() {
                return Err(Error::parse(format!("<STR> for non-string slot `{slot}`")));
            }
        }
    }
    Ok(cmds)
}

/// Stage 10.
pub fn system_label(req: &LabelRequest, provider: &dyn LlmProvider, prompts: &Prompts, seed: Option<u64>) -> Result<Vec<Command>> {
    if !matches!(req.history.last().map(|t| t.kind), Some(TurnKind::User | TurnKind::Signal)) {
        return Err(Error::precondition("labelling needs a preceding user or signal turn"));
    }
    let reply = provider.complete(&req.prompt(Stage::System, prompts), DEFAULT_TEMPERATURE, seed)?;
    parse_label_reply(&reply, req)
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stage 11: fills every `<STR>` with a span of the user text.
pub fn extract_string_slots(
    commands: &[Command],
    user_text: &str,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<Vec<Command>> {
    let holes: Vec<(VarId, String)> = commands
        .iter()
        .flat_map(|c| c.slot_values())
        .filter(|(_, _, v)| v.is_placeholder())
        .map(|(var, slot, _)| (var, slot.to_string()))
        .collect();
    if holes.is_empty() {
        return Err(Error::precondition("no <STR> placeholders to fill"));
    }
    let listing = commands.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
    let prompt = prompts.render(
        Stage::Extract,
        &[("user_text", user_text), ("commands", &listing)],
        serde_json::json!({
            "user_text": user_text,
            "placeholders": holes.iter().map(|(v, s)| serde_json::json!({"var": v, "slot": s})).collect::<Vec<_>>(),
        }),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != holes.len() {
        return Err(Error::parse(format!("expected {} values, got {}", holes.len(), lines.len())));
    }
    let haystack = normalize_ws(user_text);
    let mut fills = Vec::new();
    for (line, (_, slot)) in lines.iter().zip(&holes) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("expected `slot = \"span\"`, got `{line}`")))?;
        if k.trim() != slot {
            return Err(Error::parse(format!("expected a value for `{slot}`, got `{}`", k.trim())));
        }
        let Value::Text(span) = parse_value(v.trim())? else {
            return Err(Error::parse(format!("value for `{slot}` is not a string")));
        };
        let needle = normalize_ws(&span);
        if !needle.is_empty() && !haystack.contains(&needle) {
            return Err(Error::SpanViolation { value: span });
        }
        fills.push(Value::text(span));
    }
    let mut fills = fills.into_iter();
    let mut fill = |v: &Value| {
        if v.is_placeholder() {
            fills.next().expect("one fill per placeholder")
        } else {
            v.clone()
        }
    };
    Ok(commands
        .iter()
        .map(|c| match c {
            Command::IntentCall { var, intent, args } => Command::IntentCall {
                var: *var,
                intent: intent.clone(),
                args: args.iter().map(|(k, v)| (k.clone(), fill(v))).collect(),
            },
            Command::AttrAssign { var, slot, value } => Command::AttrAssign {
                var: *var,
                slot: slot.clone(),
                value: fill(value),
            },
            other => other.clone(),
        })
        .collect())
}

/// Stage 12.
pub fn respond(
    history: &[TurnRecord],
    signals: &[SignalPayload],
    pending: Option<&SignalPayload>,
    sessions: serde_json::Value,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<TurnRecord> {
    let signal_text = if signals.is_empty() {
        "(nothing new)".to_string()
    } else {
        signals.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
    };
    let user_text = history
        .iter()
        .rev()
        .find(|t| t.kind == TurnKind::User)
        .and_then(|t| t.text.clone());
    let prompt = prompts.render(
        Stage::Respond,
        &[("signal", &signal_text), ("history", &render_history(history))],
        serde_json::json!({
            "signals": signals.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "pending": pending.map(ToString::to_string),
            "sessions": sessions,
            "user_text": user_text,
        }),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let text = normalize_ws(&reply);
    if text.is_empty() {
        return Err(Error::parse("empty response"));
    }
    Ok(TurnRecord::response(text))
}

/// What the user agent is asked to do next, derived from the plan and the
/// back-end state. Passed as context so that rule-following simulators can
/// act on it; a language model follows the rendered rules instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "act", rename_all = "snake_case")]
pub enum UserAct {
    Start {
        intent: String,
        first: bool,
        slots: Vec<(String, Value)>,
    },
    Provide {
        intent: String,
        slot: String,
        value: Value,
    },
    Confirm {
        intent: String,
    },
    Phenomenon {
        intent: String,
        kind: PhenomenonKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slot: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alt: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        related_slot: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        related_value: Option<Value>,
    },
}

/// Stage 9. When `due` is set the reply must carry its token, which is
/// stripped from the stored text; otherwise no token may appear.
pub fn user_turn(
    rules: &ConversationRules,
    history: &[TurnRecord],
    act: &UserAct,
    due: Option<PhenomenonKind>,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<TurnRecord> {
    let active = match due.and_then(|k| rules.rules.iter().find(|r| r.phenomenon == Some(k))) {
        Some(rule) => format!("Apply this rule now: [{}] {}", rule.turn_scope, rule.instruction),
        None => String::new(),
    };
    let prompt = prompts.render(
        Stage::User,
        &[
            ("rules", &rules.render()),
            ("active_rule", &active),
            ("history", &render_history(history)),
        ],
        serde_json::json!({ "act": act }),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let (text, token) = strip_token(&reply);
    match (due, token) {
        (Some(d), t) if t != Some(d) => {
            return Err(Error::MissingToken {
                expected: d.token().unwrap_or_default().into(),
            })
        }
        (None, Some(t)) => return Err(Error::parse(format!("unexpected phenomenon token for {t}"))),
        _ => {}
    }
    if text.is_empty() {
        return Err(Error::parse("empty user message"));
    }
    Ok(TurnRecord::user(text, token))
}

/// The provider for each agent role.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub user: &'a dyn LlmProvider,
    pub system: &'a dyn LlmProvider,
    pub response: &'a dyn LlmProvider,
}

impl<'a> Providers<'a> {
    pub fn single(p: &'a dyn LlmProvider) -> Self {
        Self {
            user: p,
            system: p,
            response: p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub max_turns: usize,
    pub retries: u32,
    /// System labelling steps allowed between two user turns.
    pub max_system_steps: usize,
    pub validation: ValidationConfig,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_turns: 80,
            retries: 2,
            max_system_steps: 4,
            validation: ValidationConfig::default(),
        }
    }
}

/// A conversation stopped early, with the prefix up to the last complete
/// exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct AbortedConversation {
    pub reason: String,
    pub detail: String,
    pub turn_index: usize,
    pub prefix: Vec<TurnRecord>,
}

impl std::fmt::Display for AbortedConversation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "aborted at turn {} ({}): {}", self.turn_index, self.reason, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Progress {
    NotStarted,
    Active,
    Done,
    Cancelled,
}

struct Run<'a> {
    plan: &'a ConversationPlan,
    catalog: &'a SchemaCatalog,
    providers: Providers<'a>,
    prompts: &'a Prompts,
    limits: &'a Limits,
    tools: (String, serde_json::Value),
    turns: Vec<TurnRecord>,
    backend: BackendSession,
    var_intents: BTreeMap<VarId, String>,
    intent_vars: Vec<Option<VarId>>,
    progress: Vec<Progress>,
    realized: Vec<bool>,
    last_signal: BTreeMap<VarId, SignalPayload>,
    safe_len: usize,
    calls: u64,
}

impl Run<'_> {
    fn abort(&self, reason: &str, detail: impl Into<String>) -> AbortedConversation {
        AbortedConversation {
            reason: reason.into(),
            detail: detail.into(),
            turn_index: self.turns.len(),
            prefix: self.turns[..self.safe_len].to_vec(),
        }
    }

    fn seed(&mut self) -> Option<u64> {
        self.calls += 1;
        Some(self.plan.seed.wrapping_add(self.calls << 8))
    }

    fn due_phenomenon(&self, i: usize, trigger: TriggerHint, slot: Option<&str>) -> Option<usize> {
        self.plan.phenomena.iter().enumerate().position(|(k, p)| {
            !self.realized[k]
                && p.target_intent == i
                && p.trigger_turn_hint == trigger
                && (trigger != TriggerHint::OnSlotRequest || p.target_slot.as_deref() == slot)
        })
    }

    /// The value the user gives for `slot` outside any phenomenon: the wrong
    /// value first when a later correction is planned.
    fn spoken_value(&self, i: usize, slot: &str) -> Value {
        let planned = self.plan.slot_assignments[i][slot].clone();
        self.plan
            .phenomena
            .iter()
            .find(|p| {
                p.kind == PhenomenonKind::Correction && p.target_intent == i && p.target_slot.as_deref() == Some(slot)
            })
            .and_then(|p| p.alt_value.clone())
            .unwrap_or(planned)
    }

    fn phenomenon_act(&self, i: usize, p: &Phenomenon) -> UserAct {
        let values = &self.plan.slot_assignments[i];
        UserAct::Phenomenon {
            intent: self.plan.intent_sequence[i].clone(),
            kind: p.kind,
            slot: p.target_slot.clone(),
            value: p.target_slot.as_ref().and_then(|s| values.get(s).cloned()),
            alt: p.alt_value.clone(),
            related_slot: p.related_slot.clone(),
            related_value: p.related_slot.as_ref().and_then(|s| values.get(s).cloned()),
        }
    }

    fn next_act(&self, i: usize) -> std::result::Result<(UserAct, Option<usize>), AbortedConversation> {
        let intent = self.plan.intent_sequence[i].clone();
        let schema = self.catalog.get(&intent).expect("plan validated against catalog");
        if self.progress[i] == Progress::NotStarted {
            let withheld = &self.plan.withheld[i];
            let slots = schema
                .slots
                .iter()
                .filter(|s| self.plan.slot_assignments[i].contains_key(&s.name) && !withheld.contains(&s.name))
                .map(|s| (s.name.clone(), self.spoken_value(i, &s.name)))
                .collect();
            return Ok((
                UserAct::Start {
                    intent,
                    first: i == 0,
                    slots,
                },
                None,
            ));
        }
        let var = self.intent_vars[i].expect("active intents have a variable");
        match self.last_signal.get(&var) {
            Some(SignalPayload::MissingSlots { slots, .. }) => {
                let requested = slots[0].as_str();
                if let Some(k) = self.due_phenomenon(i, TriggerHint::OnSlotRequest, Some(requested)) {
                    return Ok((self.phenomenon_act(i, &self.plan.phenomena[k]), Some(k)));
                }
                let value = self
                    .plan
                    .slot_assignments[i]
                    .get(requested)
                    .map(|_| self.spoken_value(i, requested))
                    .ok_or_else(|| self.abort("plan_deviation", format!("no planned value for `{requested}`")))?;
                Ok((
                    UserAct::Provide {
                        intent,
                        slot: requested.to_string(),
                        value,
                    },
                    None,
                ))
            }
            Some(SignalPayload::ConfirmationRequired { .. }) => {
                if let Some(k) = self.due_phenomenon(i, TriggerHint::OnConfirmationRequest, None) {
                    return Ok((self.phenomenon_act(i, &self.plan.phenomena[k]), Some(k)));
                }
                Ok((UserAct::Confirm { intent }, None))
            }
            other => Err(self.abort("plan_deviation", format!("no pending request for {var}: {other:?}"))),
        }
    }

    fn label_request(&self) -> LabelRequest<'_> {
        LabelRequest {
            history: &self.turns,
            catalog: self.catalog,
            tools: &self.tools,
            var_intents: self.var_intents.clone(),
            sessions: sessions_json(&self.backend),
            rules: Some(&self.plan.rules),
        }
    }

    /// Labels, validates and fills one system step.
    fn system_step(&mut self, user_text: &str) -> std::result::Result<Vec<Command>, AbortedConversation> {
        let retries = self.limits.retries;
        let seed = self.seed();
        let turn = self.turns.len();
        let (labels, verdict) = {
            let req = self.label_request();
            let system = self.providers.system;
            let prompts = self.prompts;
            let labels = with_retries(retries, |e| matches!(e, Error::Parse(_) | Error::Syntax { .. } | Error::Provider(_)), |a| {
                system_label(&req, system, prompts, seed.map(|s| s + u64::from(a) * 16))
            })
            .map_err(|e| self.abort("system_label", e.to_string()))?;
            let verdict = validation::validate_labels(&req, &labels, system, prompts, &self.limits.validation, seed, turn)
                .map_err(|e| self.abort("validator_error", e.to_string()))?;
            (labels, verdict)
        };
        if !verdict.passed {
            let r = &verdict.reasons[0];
            return Err(self.abort(&r.check, r.detail.clone()));
        }
        let labels: Vec<Command> = labels
            .into_iter()
            .map(|c| match c {
                Command::Say { args } => Command::Say {
                    args: args.into_iter().filter(|(_, v)| !v.contains_placeholder()).collect(),
                },
                c => c,
            })
            .collect();
        if !labels.iter().any(Command::contains_placeholder) {
            return Ok(labels);
        }
        let seed = self.seed();
        let system = self.providers.system;
        let prompts = self.prompts;
        // A span violation is re-asked once, then the conversation is dropped.
        with_retries(1, |e| matches!(e, Error::SpanViolation { .. } | Error::Parse(_) | Error::Syntax { .. }), |a| {
            extract_string_slots(&labels, user_text, system, prompts, seed.map(|s| s + u64::from(a) * 16))
        })
        .map_err(|e| {
            let reason = if matches!(e, Error::SpanViolation { .. }) { "span_violation" } else { "extraction" };
            self.abort(reason, e.to_string())
        })
    }

    fn run(mut self) -> std::result::Result<ConversationRecord, AbortedConversation> {
        let n = self.plan.intent_sequence.len();
        let mut current = 0;
        while current < n {
            if self.turns.len() >= self.limits.max_turns {
                return Err(self.abort("turn_limit", format!("reached {} turns", self.limits.max_turns)));
            }
            let (act, due) = self.next_act(current)?;
            let due_kind = due.map(|k| self.plan.phenomena[k].kind);
            let retries = self.limits.retries;
            let seed = self.seed();
            let user = {
                let (rules, turns, provider, prompts) = (&self.plan.rules, &self.turns, self.providers.user, self.prompts);
                with_retries(retries, |e| matches!(e, Error::Parse(_) | Error::MissingToken { .. } | Error::Provider(_)), |a| {
                    user_turn(rules, turns, &act, due_kind, provider, prompts, seed.map(|s| s + u64::from(a) * 16))
                })
            };
            let user = user.map_err(|e| {
                let reason = if matches!(e, Error::MissingToken { .. }) { "missing_token" } else { "user_turn" };
                self.abort(reason, e.to_string())
            })?;
            let user_text = user.text.clone().unwrap_or_default();
            let user_index = self.turns.len();
            self.turns.push(user);
            if let Some(k) = due {
                self.realized[k] = true;
            }
            if due_kind == Some(PhenomenonKind::Cancellation) {
                self.progress[current] = Progress::Cancelled;
            }

            let mut step_signals: Vec<SignalPayload> = Vec::new();
            let mut said = false;
            for step in 0.. {
                if step >= self.limits.max_system_steps {
                    return Err(self.abort("system_loop", "too many system steps without a response"));
                }
                if self.turns.len() >= self.limits.max_turns {
                    return Err(self.abort("turn_limit", format!("reached {} turns", self.limits.max_turns)));
                }
                let cmds = self.system_step(&user_text)?;
                if step == 0 {
                    if let Some(kind) = due_kind {
                        let ctx = validation::phenomenon_context(&self.turns, user_index, self.plan);
                        let verdict = validation::phenomenon_signal_check(kind, &cmds, &ctx, user_index);
                        if !verdict.passed {
                            return Err(self.abort("phenomenon_signal", verdict.reasons[0].detail.clone()));
                        }
                    }
                    if self.progress[current] == Progress::NotStarted {
                        let started = cmds.iter().find_map(|c| match c {
                            Command::IntentCall { var, intent, .. } if *intent == self.plan.intent_sequence[current] => Some(*var),
                            _ => None,
                        });
                        let Some(var) = started else {
                            return Err(self.abort("plan_deviation", format!("{} was not started", self.plan.intent_sequence[current])));
                        };
                        self.intent_vars[current] = Some(var);
                        self.progress[current] = Progress::Active;
                    }
                }
                let mut signals = Vec::new();
                for cmd in &cmds {
                    if let Command::IntentCall { var, intent, .. } = cmd {
                        self.var_intents.insert(*var, intent.clone());
                    }
                    match self.backend.apply_command(cmd) {
                        Ok(Some(sig)) => signals.push(sig),
                        Ok(None) => {}
                        Err(e) => return Err(self.abort("backend", format!("{cmd}: {e}"))),
                    }
                }
                said = cmds.iter().any(Command::is_say);
                self.turns.push(TurnRecord::system(cmds));
                for sig in &signals {
                    if let Some(var) = sig.var() {
                        self.last_signal.insert(var, sig.clone());
                    }
                    self.turns.push(TurnRecord::signal(sig.clone()));
                }
                if !signals.is_empty() {
                    step_signals = signals;
                }
                if said {
                    break;
                }
                if step_signals.is_empty() {
                    return Err(self.abort("no_progress", "system step produced neither a signal nor say()"));
                }
                if self.turns.last().map(|t| t.kind) != Some(TurnKind::Signal) {
                    return Err(self.abort("no_progress", "system step produced no signal"));
                }
            }
            debug_assert!(said);
            let pending = self.intent_vars[current].and_then(|v| self.last_signal.get(&v)).cloned();
            let seed = self.seed();
            let response = {
                let (turns, provider, prompts) = (&self.turns, self.providers.response, self.prompts);
                let sessions = sessions_json(&self.backend);
                with_retries(retries, |e| matches!(e, Error::Parse(_) | Error::Provider(_)), |a| {
                    respond(turns, &step_signals, pending.as_ref(), sessions.clone(), provider, prompts, seed.map(|s| s + u64::from(a) * 16))
                })
            }
            .map_err(|e| self.abort("response", e.to_string()))?;
            self.turns.push(response);

            if let Some(var) = self.intent_vars[current] {
                let done = self.backend.session(var).is_some_and(|s| s.state == SessionState::Performed);
                if done {
                    self.progress[current] = Progress::Done;
                }
            }
            if matches!(self.progress[current], Progress::Done | Progress::Cancelled) {
                current += 1;
            }
            self.safe_len = self.turns.len();
        }
        if let Some(k) = self.realized.iter().position(|r| !r) {
            return Err(self.abort("phenomenon_not_realized", format!("{} never came up", self.plan.phenomena[k].kind)));
        }
        if self.progress.contains(&Progress::Cancelled) {
            self.backend.cancel_open();
        }
        let record = ConversationRecord::new(self.plan.clone(), self.turns);
        Ok(record)
    }
}

/// Drives the turn loop for one planned conversation.
pub fn run_conversation(
    plan: &ConversationPlan,
    catalog: &Arc<SchemaCatalog>,
    providers: Providers,
    prompts: &Prompts,
    limits: &Limits,
) -> std::result::Result<ConversationRecord, AbortedConversation> {
    let fail = |e: Error| AbortedConversation {
        reason: "invalid_plan".into(),
        detail: e.to_string(),
        turn_index: 0,
        prefix: Vec::new(),
    };
    plan.validate(catalog).map_err(fail)?;
    if plan.withheld.len() != plan.intent_sequence.len() {
        return Err(fail(Error::precondition("plan has no withheld-slot list per intent")));
    }
    let n = plan.intent_sequence.len();
    Run {
        plan,
        catalog,
        providers,
        prompts,
        limits,
        tools: tools_listing(catalog),
        turns: Vec::new(),
        backend: BackendSession::new(Arc::clone(catalog), plan.entities.clone()),
        var_intents: BTreeMap::new(),
        intent_vars: vec![None; n],
        progress: vec![Progress::NotStarted; n],
        realized: vec![false; plan.phenomena.len()],
        last_signal: BTreeMap::new(),
        safe_len: 0,
        calls: 0,
    }
    .run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_command;
    use crate::provider::ScriptedProvider;

    #[test]
    fn user_turn_strips_token() {
        let rules = ConversationRules::default();
        let act = UserAct::Confirm { intent: "x".into() };
        let prompts = Prompts::builtin();
        let p = ScriptedProvider::sequence(["Book me a hotel in Paris", "nothing, ignore that <OVERHEARD>", "hello"]);
        let t = user_turn(&rules, &[], &act, None, &p, &prompts, None).unwrap();
        assert_eq!(t.text.as_deref(), Some("Book me a hotel in Paris"));
        let t = user_turn(&rules, &[], &act, Some(PhenomenonKind::OverheardAnswer), &p, &prompts, None).unwrap();
        assert_eq!(t.text.as_deref(), Some("nothing, ignore that"));
        assert_eq!(t.phenomenon, Some(PhenomenonKind::OverheardAnswer));
        let err = user_turn(&rules, &[], &act, Some(PhenomenonKind::OverheardAnswer), &p, &prompts, None).unwrap_err();
        assert!(matches!(err, Error::MissingToken { .. }));
    }

    #[test]
    fn extraction_requires_spans() {
        let prompts = Prompts::builtin();
        let cmds = vec![parse_command("x0.review = <STR>").unwrap()];
        let text = "my review is an absolute classic!";
        let p = ScriptedProvider::sequence(["review = \"an absolute classic!\"", "review = \"a masterpiece\""]);
        let out = extract_string_slots(&cmds, text, &p, &prompts, None).unwrap();
        assert_eq!(out[0].to_string(), "x0.review = \"an absolute classic!\"");
        assert!(matches!(
            extract_string_slots(&cmds, text, &p, &prompts, None),
            Err(Error::SpanViolation { .. })
        ));
        let none = vec![parse_command("confirm(x0)").unwrap()];
        assert!(matches!(
            extract_string_slots(&none, text, &p, &prompts, None),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn respond_echoes_and_rejects_empty() {
        let prompts = Prompts::builtin();
        let sig = crate::dsl::parse_signal(r#"signal: missing_slots(x0, ["check_in_date"])"#).unwrap();
        let p = ScriptedProvider::sequence(["When would you like to check in?", "   "]);
        let h = vec![TurnRecord::user("hi", None)];
        let t = respond(&h, std::slice::from_ref(&sig), None, serde_json::Value::Null, &p, &prompts, None).unwrap();
        assert_eq!(t.text.as_deref(), Some("When would you like to check in?"));
        assert!(respond(&h, &[sig], None, serde_json::Value::Null, &p, &prompts, None).is_err());
    }

    #[test]
    fn turn_grammar() {
        let u = TurnRecord::user("hi", None);
        let s = TurnRecord::system(vec![parse_command("say()").unwrap()]);
        let r = TurnRecord::response("hello");
        assert!(check_turn_grammar(&[u.clone(), s.clone(), r.clone()], false).is_ok());
        assert!(check_turn_grammar(&[s.clone(), r.clone()], false).is_err());
        assert!(check_turn_grammar(&[u.clone(), s.clone(), r.clone(), r.clone()], false).is_err());
        assert!(check_turn_grammar(&[u.clone(), s.clone(), r.clone(), r.clone()], true).is_ok());
        assert!(check_turn_grammar(&[u, r], false).is_err());
    }

    #[test]
    fn turn_serialization() {
        let t = TurnRecord::system(vec![parse_command(r#"x0 = book_hotel_room(city="Paris")"#).unwrap()]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"kind":"system","commands":["x0 = book_hotel_room(city=\"Paris\")"]}"#);
        assert_eq!(serde_json::from_str::<TurnRecord>(&json).unwrap(), t);
        let s = TurnRecord::signal(crate::dsl::parse_signal("signal: confirmation_required(x0)").unwrap());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"kind":"signal","signal":"signal: confirmation_required(x0)"}"#);
    }
}
