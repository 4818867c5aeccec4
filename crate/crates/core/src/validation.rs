//! Validators (stages 13-14), phenomenon signal checks, post-filters and
//! salvage.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{parse_label_reply, render_history, sessions_json, tools_listing, AbortedConversation, LabelRequest, TurnKind, TurnRecord};
use crate::backend::{fold_goal, BackendSession, GoalState};
use crate::dataset::ConversationRecord;
use crate::dsl::{commands_equal_in_scope, Command, SignalPayload, Value, VarId};
use crate::planner::{ConversationPlan, PhenomenonKind};
use crate::prompts::{Prompts, Stage};
use crate::provider::{LlmProvider, DEFAULT_TEMPERATURE};
use crate::schema::SchemaCatalog;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reason {
    pub check: String,
    pub detail: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub reasons: Vec<Reason>,
}

impl Verdict {
    pub fn pass() -> Self {
        Self {
            passed: true,
            reasons: Vec::new(),
        }
    }

    pub fn fail(check: &str, detail: impl Into<String>, turn_index: usize) -> Self {
        Self {
            passed: false,
            reasons: vec![Reason {
                check: check.into(),
                detail: detail.into(),
                turn_index,
            }],
        }
    }

    pub fn merge(&mut self, other: Verdict) {
        self.passed &= other.passed;
        self.reasons.extend(other.reasons);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub self_consistency_trials: usize,
    pub rule_validator: bool,
    /// Compare labels under canonicalization rather than as written.
    pub canonical_equality: bool,
    /// Write sarcasm turns to a review file.
    pub review_sarcasm: bool,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            self_consistency_trials: 3,
            rule_validator: true,
            canonical_equality: true,
            review_sarcasm: false,
        }
    }
}

fn labels_equal(known: &BTreeSet<VarId>, a: &[Command], b: &[Command], canonical: bool) -> bool {
    if canonical {
        commands_equal_in_scope(known, a, b).unwrap_or(false)
    } else {
        a == b
    }
}

/// Stage 13: re-runs labelling `trials - 1` more times; passes iff every
/// trial equals `first`. An unparseable trial counts as a disagreement.
#[allow(clippy::too_many_arguments)]
pub fn self_consistency_check(
    req: &LabelRequest,
    first: &[Command],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    trials: usize,
    seed: Option<u64>,
    canonical: bool,
    turn_index: usize,
) -> Result<Verdict> {
    let prompt = req.prompt(Stage::SelfConsistency, prompts);
    let known = req.known();
    for k in 1..trials.max(1) {
        let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed.map(|s| s.wrapping_add(k as u64)))?;
        match parse_label_reply(&reply, req) {
            Ok(cmds) if labels_equal(&known, first, &cmds, canonical) => {}
            Ok(cmds) => {
                let shown = cmds.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                return Ok(Verdict::fail("stage13_mismatch", format!("trial {k} labelled `{shown}`"), turn_index));
            }
            Err(e) => return Ok(Verdict::fail("stage13_mismatch", format!("trial {k} unparseable: {e}"), turn_index)),
        }
    }
    Ok(Verdict::pass())
}

/// Stage 14: an independent labelling with the conversation rules in view
/// must match `first` exactly.
pub fn rule_aware_validate(
    req: &LabelRequest,
    first: &[Command],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
    canonical: bool,
    turn_index: usize,
) -> Result<Verdict> {
    let prompt = req.prompt(Stage::RuleValidator, prompts);
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    Ok(match parse_label_reply(&reply, req) {
        Ok(cmds) if labels_equal(&req.known(), first, &cmds, canonical) => Verdict::pass(),
        Ok(cmds) => {
            let shown = cmds.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            Verdict::fail("stage14_mismatch", format!("validator labelled `{shown}`"), turn_index)
        }
        Err(e) => Verdict::fail("stage14_mismatch", format!("validator reply unparseable: {e}"), turn_index),
    })
}

/// Stages 13 and 14 over one labelling step, as configured.
pub fn validate_labels(
    req: &LabelRequest,
    labels: &[Command],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    config: &ValidationConfig,
    seed: Option<u64>,
    turn_index: usize,
) -> Result<Verdict> {
    let canonical = config.canonical_equality;
    let v = self_consistency_check(
        req,
        labels,
        provider,
        prompts,
        config.self_consistency_trials,
        seed,
        canonical,
        turn_index,
    )?;
    if !v.passed || !config.rule_validator {
        return Ok(v);
    }
    let trials = config.self_consistency_trials.max(1) as u64;
    rule_aware_validate(req, labels, provider, prompts, seed.map(|s| s.wrapping_add(trials)), canonical, turn_index)
}

/// What a phenomenon check needs to know about the turn it inspects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhenomenonContext {
    pub target_slot: Option<String>,
    pub planned: Option<Value>,
    /// The slot the assistant last asked for.
    pub requested_slot: Option<String>,
    /// Goal state before the system reacts to the turn.
    pub prior: GoalState,
}

/// Reconstructs the check context for the user turn at `user_index`.
pub fn phenomenon_context(turns: &[TurnRecord], user_index: usize, plan: &ConversationPlan) -> PhenomenonContext {
    let kind = turns.get(user_index).and_then(|t| t.phenomenon);
    let requested_slot = turns[..user_index]
        .iter()
        .rev()
        .find(|t| t.kind == TurnKind::Signal)
        .and_then(|t| match &t.signal {
            Some(SignalPayload::MissingSlots { slots, .. }) => slots.first().cloned(),
            _ => None,
        });
    let mut prior = GoalState::new();
    for t in &turns[..user_index] {
        for c in t.commands() {
            fold_goal(&mut prior, c);
        }
    }
    let candidates: Vec<_> = plan.phenomena.iter().filter(|p| Some(p.kind) == kind).collect();
    let target = candidates
        .iter()
        .find(|p| p.target_slot.is_some() && p.target_slot == requested_slot)
        .or_else(|| candidates.first())
        .copied();
    let planned = target.and_then(|p| {
        p.target_slot
            .as_ref()
            .and_then(|s| plan.slot_assignments.get(p.target_intent)?.get(s).cloned())
    });
    PhenomenonContext {
        target_slot: target.and_then(|p| p.target_slot.clone()),
        planned,
        requested_slot,
        prior,
    }
}

/// Checks that the system's reaction to a phenomenon turn has the expected
/// shape for its kind.
pub fn phenomenon_signal_check(kind: PhenomenonKind, cmds: &[Command], ctx: &PhenomenonContext, turn_index: usize) -> Verdict {
    let assignments: Vec<(VarId, &str, &Value)> = cmds.iter().flat_map(Command::slot_values).collect();
    let fail = |detail: &str| Verdict::fail("phenomenon_signal", format!("{kind}: {detail}"), turn_index);
    match kind {
        PhenomenonKind::IrrelevantAnswer | PhenomenonKind::OverheardAnswer | PhenomenonKind::Sarcasm => {
            if cmds.is_empty() || !cmds.iter().all(Command::is_say) {
                return fail("expected say() and nothing else");
            }
        }
        PhenomenonKind::Correction => {
            let overwrites = cmds.iter().any(|c| match c {
                Command::AttrAssign { var, slot, .. } => {
                    ctx.target_slot.as_ref().is_none_or(|t| t == slot)
                        && ctx.prior.get(var).is_some_and(|e| e.slots.contains_key(slot))
                }
                _ => false,
            });
            if !overwrites {
                return fail("no assignment overwrites an existing slot");
            }
        }
        PhenomenonKind::InTurnCorrection => {
            let hits = assignments
                .iter()
                .any(|(_, s, _)| ctx.target_slot.as_deref().is_none_or(|t| t == *s));
            if !hits {
                return fail("the corrected slot is not assigned");
            }
        }
        PhenomenonKind::DelayConfirmation | PhenomenonKind::Cancellation => {
            if cmds.iter().any(|c| matches!(c, Command::Confirm { .. })) {
                return fail("confirm() issued");
            }
        }
        PhenomenonKind::AsrEarlyEnd => {
            if let Some(Value::Text(planned)) = &ctx.planned {
                let prefix = assignments.iter().any(|(_, s, v)| {
                    ctx.target_slot.as_deref().is_none_or(|t| t == *s)
                        && matches!(v, Value::Text(t) if !t.is_empty() && t.len() < planned.len() && planned.starts_with(t.as_str()))
                });
                if !prefix {
                    return fail("no text slot holds a strict prefix of the planned value");
                }
            }
        }
        PhenomenonKind::AnswerAboutAnotherSlot => {
            let requested = ctx.requested_slot.as_deref();
            let other = assignments.iter().any(|(_, s, _)| Some(*s) != requested);
            let same = assignments.iter().any(|(_, s, _)| Some(*s) == requested);
            if !other || same {
                return fail("expected an assignment to a slot other than the requested one");
            }
        }
        PhenomenonKind::None => {}
    }
    Verdict::pass()
}

fn segments(turns: &[TurnRecord]) -> Vec<Option<PhenomenonKind>> {
    let mut current = None;
    turns
        .iter()
        .map(|t| {
            if t.kind == TurnKind::User {
                current = t.phenomenon;
            }
            current
        })
        .collect()
}

/// Record-level filters: overwrites without a correction, empty string
/// values, hints among system commands and unperformed intents.
pub fn post_filters(record: &ConversationRecord) -> Verdict {
    let mut verdict = Verdict::pass();
    let turns = &record.turns;
    let tags = segments(turns);
    let mut state = GoalState::new();
    for (i, t) in turns.iter().enumerate() {
        for cmd in t.commands() {
            if let Command::AttrAssign { var, slot, value } = cmd {
                let previous = state.get(var).and_then(|e| e.slots.get(slot));
                let corrected = matches!(tags[i], Some(PhenomenonKind::Correction | PhenomenonKind::InTurnCorrection));
                if previous.is_some_and(|p| p != value) && !corrected {
                    verdict.merge(Verdict::fail(
                        "overwrite_without_correction",
                        format!("{var}.{slot} changed without a correction"),
                        i,
                    ));
                }
            }
            for (_, slot, value) in cmd.slot_values() {
                if matches!(value, Value::Text(s) if s.trim().is_empty()) {
                    verdict.merge(Verdict::fail("empty_string_slot", format!("`{slot}` is empty"), i));
                }
            }
            let hint = match cmd {
                Command::IntentCall { intent, .. } => intent == "hint",
                Command::Say { args } => args.iter().any(|(k, _)| k == "hint"),
                _ => false,
            };
            if hint {
                verdict.merge(Verdict::fail("hint_in_system_commands", cmd.to_string(), i));
            }
            fold_goal(&mut state, cmd);
        }
    }

    let cancelled = turns.iter().any(|t| t.phenomenon == Some(PhenomenonKind::Cancellation));
    if !cancelled && !turns.is_empty() {
        let mut started: Vec<(VarId, String)> = Vec::new();
        let mut performed: BTreeSet<VarId> = BTreeSet::new();
        for t in turns {
            for c in t.commands() {
                if let Command::IntentCall { var, intent, .. } = c {
                    started.push((*var, intent.clone()));
                }
            }
            if let Some(sig) = &t.signal {
                if sig.is_completion() {
                    performed.extend(sig.var());
                }
            }
        }
        let last = turns.len() - 1;
        let mut required: Vec<String> = match &record.plan {
            Some(plan) => plan.intent_sequence.clone(),
            None => started.iter().map(|(_, i)| i.clone()).collect(),
        };
        if record.salvaged {
            // The interrupted intent and anything after it are exempt.
            let done: Vec<&String> = started.iter().filter(|(v, _)| performed.contains(v)).map(|(_, i)| i).collect();
            required.retain(|i| done.contains(&i));
        }
        let mut done: Vec<String> = started
            .iter()
            .filter(|(v, _)| performed.contains(v))
            .map(|(_, i)| i.clone())
            .collect();
        for intent in required {
            match done.iter().position(|d| *d == intent) {
                Some(p) => {
                    done.remove(p);
                }
                None => verdict.merge(Verdict::fail("unperformed_intent", format!("{intent} was never performed"), last)),
            }
        }
    }
    verdict
}

/// Keeps the prefix of an aborted conversation if at least one intent was
/// performed or at least ten turns happened, closing it with a response.
pub fn salvage(
    aborted: &AbortedConversation,
    plan: &ConversationPlan,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Option<ConversationRecord> {
    let prefix = &aborted.prefix;
    let performed = prefix
        .iter()
        .filter(|t| t.signal.as_ref().is_some_and(SignalPayload::is_completion))
        .count();
    if prefix.is_empty() || (performed == 0 && prefix.len() < 10) {
        return None;
    }
    let prompt = prompts.render(
        Stage::Salvage,
        &[("history", &render_history(prefix))],
        serde_json::json!({"reason": aborted.reason, "turns": prefix.len()}),
    );
    let reply = match provider.complete(&prompt, DEFAULT_TEMPERATURE, Some(plan.seed)) {
        Ok(r) => r.split_whitespace().collect::<Vec<_>>().join(" "),
        Err(e) => {
            log::debug!("salvage closing failed: {e}");
            return None;
        }
    };
    if reply.is_empty() {
        return None;
    }
    let mut turns = prefix.clone();
    turns.push(TurnRecord::response(reply));
    let mut record = ConversationRecord::new(plan.clone(), turns);
    record.salvaged = true;
    Some(record)
}

/// Replaces literal string-slot values with `<STR>`, the form labels take
/// before span extraction.
pub fn to_placeholder_form(cmds: &[Command], var_intents: &BTreeMap<VarId, String>, catalog: &SchemaCatalog) -> Vec<Command> {
    let mut intents = var_intents.clone();
    let is_string = |intents: &BTreeMap<VarId, String>, var: &VarId, slot: &str| {
        intents
            .get(var)
            .and_then(|i| catalog.get(i))
            .and_then(|i| i.slot(slot))
            .is_some_and(|s| s.is_string())
    };
    cmds.iter()
        .map(|c| match c {
            Command::IntentCall { var, intent, args } => {
                intents.insert(*var, intent.clone());
                Command::IntentCall {
                    var: *var,
                    intent: intent.clone(),
                    args: args
                        .iter()
                        .map(|(k, v)| {
                            let v = if is_string(&intents, var, k) && matches!(v, Value::Text(_)) { Value::Placeholder } else { v.clone() };
                            (k.clone(), v)
                        })
                        .collect(),
                }
            }
            Command::AttrAssign { var, slot, value } => Command::AttrAssign {
                var: *var,
                slot: slot.clone(),
                value: if is_string(&intents, var, slot) && matches!(value, Value::Text(_)) { Value::Placeholder } else { value.clone() },
            },
            other => other.clone(),
        })
        .collect()
}

/// Provider-backed re-validation settings for [`validate_record`].
pub struct Relabel<'a> {
    pub provider: &'a dyn LlmProvider,
    pub prompts: &'a Prompts,
    pub config: &'a ValidationConfig,
}

/// The full validation suite over a finished record: turn grammar, recorded
/// phenomena, signal replay, phenomenon checks, post-filters and, when
/// `relabel` is given, stages 13-14 at every system turn.
pub fn validate_record(record: &ConversationRecord, catalog: &Arc<SchemaCatalog>, relabel: Option<&Relabel>) -> Verdict {
    let mut verdict = Verdict::pass();
    let turns = &record.turns;
    if let Err((i, detail)) = crate::agents::check_turn_grammar(turns, record.salvaged) {
        verdict.merge(Verdict::fail("turn_grammar", detail, i));
    }
    if record.phenomena != crate::dataset::observed_phenomena(turns) {
        verdict.merge(Verdict::fail("phenomena_list", "phenomena do not match the tokens in the turns", 0));
    }

    let store = record.plan.as_ref().map(|p| p.entities.clone()).unwrap_or_default();
    let mut backend = BackendSession::new(Arc::clone(catalog), store);
    let mut var_intents: BTreeMap<VarId, String> = BTreeMap::new();
    let tools = tools_listing(catalog);
    let empty_plan = ConversationPlan::default();
    let plan = record.plan.as_ref().unwrap_or(&empty_plan);
    let mut expected: std::collections::VecDeque<SignalPayload> = Default::default();
    let mut last_user = None;
    for (i, t) in turns.iter().enumerate() {
        match t.kind {
            TurnKind::User => last_user = Some(i),
            TurnKind::Signal => match (expected.pop_front(), &t.signal) {
                (Some(e), Some(s)) if e == *s => {}
                (e, s) => verdict.merge(Verdict::fail(
                    "signal_replay",
                    format!("expected {e:?}, recorded {s:?}"),
                    i,
                )),
            },
            TurnKind::System => {
                if let Some(leftover) = expected.pop_front() {
                    verdict.merge(Verdict::fail("signal_replay", format!("{leftover} was not recorded"), i));
                    expected.clear();
                }
                let cmds = t.commands();
                if let (Some(u), Some(kind)) = (last_user, last_user.and_then(|u| turns[u].phenomenon)) {
                    if i == u + 1 {
                        let ctx = phenomenon_context(turns, u, plan);
                        verdict.merge(phenomenon_signal_check(kind, cmds, &ctx, u));
                    }
                }
                if let Some(r) = relabel {
                    let sessions = sessions_json(&backend);
                    let req = LabelRequest {
                        history: &turns[..i],
                        catalog,
                        tools: &tools,
                        var_intents: var_intents.clone(),
                        sessions,
                        rules: Some(&plan.rules),
                    };
                    let labels = to_placeholder_form(cmds, &var_intents, catalog);
                    match validate_labels(&req, &labels, r.provider, r.prompts, r.config, Some(record.seed), i) {
                        Ok(v) => verdict.merge(v),
                        Err(e) => verdict.merge(Verdict::fail("validator_error", e.to_string(), i)),
                    }
                }
                for c in cmds {
                    if let Command::IntentCall { var, intent, .. } = c {
                        var_intents.insert(*var, intent.clone());
                    }
                    match backend.apply_command(c) {
                        Ok(Some(sig)) => expected.push_back(sig),
                        Ok(None) => {}
                        Err(e) => verdict.merge(Verdict::fail("backend", format!("{c}: {e}"), i)),
                    }
                }
            }
            TurnKind::Response => {
                if let Some(leftover) = expected.pop_front() {
                    verdict.merge(Verdict::fail("signal_replay", format!("{leftover} was not recorded"), i));
                    expected.clear();
                }
            }
        }
    }
    verdict.merge(post_filters(record));
    verdict
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub conversation_id: String,
    pub passed: bool,
    pub reasons: Vec<Reason>,
}
