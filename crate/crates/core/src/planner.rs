//! Conversation planning: shape sampling, intent sequences, slot values,
//! query entities, phenomenon placement and conversation rules.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::EntityStore;
use crate::dsl::{parse_command, parse_value, Command, Value};
use crate::prompts::{Prompts, Stage};
use crate::provider::{with_retries, LlmProvider, DEFAULT_TEMPERATURE};
use crate::schema::{humanize, IntentSchema, SchemaCatalog, SlotValuePool};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenomenonKind {
    Cancellation,
    AsrEarlyEnd,
    Sarcasm,
    DelayConfirmation,
    AnswerAboutAnotherSlot,
    IrrelevantAnswer,
    OverheardAnswer,
    InTurnCorrection,
    Correction,
    None,
}

impl PhenomenonKind {
    /// Every kind that can be planned.
    pub const PLANNABLE: [PhenomenonKind; 9] = [
        PhenomenonKind::Cancellation,
        PhenomenonKind::AsrEarlyEnd,
        PhenomenonKind::Sarcasm,
        PhenomenonKind::DelayConfirmation,
        PhenomenonKind::AnswerAboutAnotherSlot,
        PhenomenonKind::IrrelevantAnswer,
        PhenomenonKind::OverheardAnswer,
        PhenomenonKind::InTurnCorrection,
        PhenomenonKind::Correction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhenomenonKind::Cancellation => "cancellation",
            PhenomenonKind::AsrEarlyEnd => "asr_early_end",
            PhenomenonKind::Sarcasm => "sarcasm",
            PhenomenonKind::DelayConfirmation => "delay_confirmation",
            PhenomenonKind::AnswerAboutAnotherSlot => "answer_about_another_slot",
            PhenomenonKind::IrrelevantAnswer => "irrelevant_answer",
            PhenomenonKind::OverheardAnswer => "overheard_answer",
            PhenomenonKind::InTurnCorrection => "in_turn_correction",
            PhenomenonKind::Correction => "correction",
            PhenomenonKind::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::PLANNABLE
            .into_iter()
            .chain([PhenomenonKind::None])
            .find(|k| k.name() == s)
    }

    /// The special token the user agent emits; `None` has no token.
    pub fn token(self) -> Option<&'static str> {
        Some(match self {
            PhenomenonKind::Cancellation => "<CANCEL>",
            PhenomenonKind::AsrEarlyEnd => "<ASR_END>",
            PhenomenonKind::Sarcasm => "<SARCASM>",
            PhenomenonKind::DelayConfirmation => "<DELAY_CONFIRM>",
            PhenomenonKind::AnswerAboutAnotherSlot => "<OTHER_SLOT>",
            PhenomenonKind::IrrelevantAnswer => "<IRRELEVANT>",
            PhenomenonKind::OverheardAnswer => "<OVERHEARD>",
            PhenomenonKind::InTurnCorrection => "<INTURN_CORRECTION>",
            PhenomenonKind::Correction => "<CORRECTION>",
            PhenomenonKind::None => return None,
        })
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::PLANNABLE.into_iter().find(|k| k.token() == Some(token))
    }

    pub fn is_slot_scoped(self) -> bool {
        matches!(
            self,
            PhenomenonKind::Correction
                | PhenomenonKind::InTurnCorrection
                | PhenomenonKind::AnswerAboutAnotherSlot
                | PhenomenonKind::AsrEarlyEnd
                | PhenomenonKind::OverheardAnswer
                | PhenomenonKind::IrrelevantAnswer
        )
    }

    pub fn is_confirmation_scoped(self) -> bool {
        matches!(self, PhenomenonKind::Cancellation | PhenomenonKind::DelayConfirmation)
    }

    /// Default sampling weights, proportional to observed conversation counts.
    pub fn default_weight(self) -> f64 {
        match self {
            PhenomenonKind::Cancellation => 12.0,
            PhenomenonKind::AsrEarlyEnd => 58.0,
            PhenomenonKind::Sarcasm => 63.0,
            PhenomenonKind::DelayConfirmation => 76.0,
            PhenomenonKind::AnswerAboutAnotherSlot => 113.0,
            PhenomenonKind::IrrelevantAnswer => 163.0,
            PhenomenonKind::OverheardAnswer => 203.0,
            PhenomenonKind::InTurnCorrection => 215.0,
            PhenomenonKind::Correction => 250.0,
            PhenomenonKind::None => 3200.0,
        }
    }
}

impl fmt::Display for PhenomenonKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Finds and removes the first phenomenon token in `text`.
pub fn strip_token(text: &str) -> (String, Option<PhenomenonKind>) {
    for kind in PhenomenonKind::PLANNABLE {
        let token = kind.token().expect("plannable kinds have tokens");
        if let Some(pos) = text.find(token) {
            let mut out = String::with_capacity(text.len());
            out.push_str(&text[..pos]);
            out.push_str(&text[pos + token.len()..]);
            let cleaned = out.split_whitespace().collect::<Vec<_>>().join(" ");
            return (cleaned, Some(kind));
        }
    }
    (text.trim().to_string(), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerHint {
    OnSlotRequest,
    OnConfirmationRequest,
    Anywhere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phenomenon {
    pub kind: PhenomenonKind,
    pub target_intent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_slot: Option<String>,
    pub trigger_turn_hint: TriggerHint,
    /// The value said first (corrections) or heard (early end of speech).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_value: Option<Value>,
    /// The slot answered instead of the requested one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub related_slot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub turn_scope: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phenomenon: Option<PhenomenonKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConversationRules {
    pub rules: Vec<Rule>,
}

impl ConversationRules {
    pub fn render(&self) -> String {
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}. [{}] {}", i + 1, r.turn_scope, r.instruction))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn for_phenomenon(&self, kind: PhenomenonKind, nth: usize) -> Option<&Rule> {
        self.rules
            .iter()
            .filter(|r| r.phenomenon == Some(kind))
            .nth(nth)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversationPlan {
    pub seed: u64,
    pub intent_sequence: Vec<String>,
    pub slot_assignments: Vec<BTreeMap<String, Value>>,
    pub optional_slot_choices: Vec<Vec<String>>,
    /// Slots left out of the opening request of each intent.
    pub withheld: Vec<Vec<String>>,
    pub phenomena: Vec<Phenomenon>,
    pub justifications: Vec<Option<String>>,
    pub entities: EntityStore,
    pub rules: ConversationRules,
}

impl ConversationPlan {
    pub fn validate(&self, catalog: &SchemaCatalog) -> Result<()> {
        if self.intent_sequence.is_empty() {
            return Err(Error::precondition("plan has no intents"));
        }
        let n = self.intent_sequence.len();
        if self.slot_assignments.len() != n {
            return Err(Error::precondition("slot assignments do not match the intent sequence"));
        }
        for (name, values) in self.intent_sequence.iter().zip(&self.slot_assignments) {
            let schema = catalog.require(name)?;
            for slot in schema.mandatory_slots() {
                if !values.contains_key(&slot.name) {
                    return Err(Error::precondition(format!(
                        "{name} has no value for mandatory slot `{}`",
                        slot.name
                    )));
                }
            }
            for (slot, v) in values {
                let spec = schema
                    .slot(slot)
                    .ok_or_else(|| Error::TypeMismatch(format!("`{slot}` is not a slot of {name}")))?;
                if !spec.accepts(v) {
                    return Err(Error::TypeMismatch(format!("{v} does not fit `{slot}` of {name}")));
                }
            }
        }
        for p in &self.phenomena {
            let name = self.intent_sequence.get(p.target_intent).ok_or_else(|| {
                Error::precondition(format!("phenomenon targets intent {}", p.target_intent))
            })?;
            if let Some(slot) = &p.target_slot {
                catalog
                    .require(name)?
                    .slot(slot)
                    .ok_or_else(|| Error::precondition(format!("phenomenon targets unknown slot `{slot}`")))?;
            } else if p.kind.is_slot_scoped() {
                return Err(Error::precondition(format!("{} needs a target slot", p.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Weight of 1, 2, 3, ... intents per conversation.
    pub intent_count_weights: Vec<f64>,
    pub optional_slot_probability: f64,
    pub phenomenon_rate: f64,
    /// Weight of 1, 2, ... phenomena in a conversation that has any.
    pub phenomenon_count_weights: Vec<f64>,
    pub phenomenon_weights: BTreeMap<PhenomenonKind, f64>,
    pub candidate_count: usize,
    pub withhold_probability: f64,
    pub retries: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            intent_count_weights: vec![0.55, 0.3, 0.15],
            optional_slot_probability: 0.4,
            phenomenon_rate: 0.252,
            phenomenon_count_weights: vec![0.93, 0.07],
            phenomenon_weights: PhenomenonKind::PLANNABLE
                .into_iter()
                .map(|k| (k, k.default_weight()))
                .collect(),
            candidate_count: 15,
            withhold_probability: 0.5,
            retries: 2,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, p) in [
            ("optional_slot_probability", self.optional_slot_probability),
            ("phenomenon_rate", self.phenomenon_rate),
            ("withhold_probability", self.withhold_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must be in [0, 1], got {p}")));
            }
        }
        for (what, w) in [
            ("intent_count_weights", &self.intent_count_weights),
            ("phenomenon_count_weights", &self.phenomenon_count_weights),
        ] {
            if WeightedIndex::new(w).is_err() {
                return Err(Error::Config(format!("{what} must be non-negative with a positive sum")));
            }
        }
        let kinds: Vec<f64> = self.phenomenon_weights.values().copied().collect();
        if self.phenomenon_weights.contains_key(&PhenomenonKind::None) || WeightedIndex::new(&kinds).is_err() {
            return Err(Error::Config("phenomenon_weights must weight plannable kinds".into()));
        }
        if self.candidate_count == 0 {
            return Err(Error::Config("candidate_count must be positive".into()));
        }
        Ok(())
    }
}

/// The sampled skeleton of a conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationShape {
    pub primary_intent: String,
    pub intent_count: usize,
    /// Bit `j` of entry `i` includes the `j`-th optional slot of intent `i`.
    pub optional_masks: Vec<u64>,
    pub phenomena: Vec<PhenomenonKind>,
}

/// Independent seed for conversation `index` under `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index);
    rng.next_u64()
}

pub fn sample_conversation_shape(catalog: &SchemaCatalog, seed: u64, config: &PlannerConfig) -> ConversationShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = WeightedIndex::new(&config.intent_count_weights).expect("validated config");
    let intent_count = counts.sample(&mut rng) + 1;
    let mut primary_intent = catalog
        .intents
        .choose(&mut rng)
        .map(|i| i.intent_name.clone())
        .unwrap_or_default();
    let optional_masks = (0..intent_count)
        .map(|_| {
            (0..64).fold(0u64, |mask, bit| {
                if rng.gen_bool(config.optional_slot_probability) {
                    mask | (1 << bit)
                } else {
                    mask
                }
            })
        })
        .collect();
    let mut phenomena = Vec::new();
    if rng.gen_bool(config.phenomenon_rate) {
        let n = WeightedIndex::new(&config.phenomenon_count_weights)
            .expect("validated config")
            .sample(&mut rng)
            + 1;
        let kinds: Vec<_> = config.phenomenon_weights.iter().collect();
        let dist = WeightedIndex::new(kinds.iter().map(|(_, w)| **w)).expect("validated config");
        for _ in 0..n {
            phenomena.push(*kinds[dist.sample(&mut rng)].0);
        }
    }
    let needs_confirm = phenomena.iter().any(|k| {
        matches!(
            k,
            PhenomenonKind::Cancellation | PhenomenonKind::DelayConfirmation | PhenomenonKind::Correction
        )
    });
    let fits = |i: &IntentSchema| !i.is_query() && (!needs_confirm || i.requires_confirmation);
    if !phenomena.is_empty() && !catalog.get(&primary_intent).is_some_and(fits) {
        let candidates: Vec<_> = catalog.intents.iter().filter(|i| fits(i)).collect();
        if let Some(t) = candidates.choose(&mut rng) {
            primary_intent = t.intent_name.clone();
        }
    }
    ConversationShape {
        primary_intent,
        intent_count,
        optional_masks,
        phenomena,
    }
}

fn retryable(e: &Error) -> bool {
    matches!(
        e,
        Error::Parse(_) | Error::Provider(_) | Error::TypeMismatch(_) | Error::UnknownIntent(_)
    )
}

/// Candidate intents offered to stage 3: same-domain intents first, then a
/// uniform sample of the rest.
pub fn sample_candidates(primary: &IntentSchema, catalog: &SchemaCatalog, count: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut same: Vec<&IntentSchema> = catalog
        .intents
        .iter()
        .filter(|i| i.domain == primary.domain && i.intent_name != primary.intent_name)
        .collect();
    same.shuffle(rng);
    let mut out: Vec<String> = same.iter().take(count).map(|i| i.intent_name.clone()).collect();
    let mut rest: Vec<&IntentSchema> = catalog
        .intents
        .iter()
        .filter(|i| i.domain != primary.domain)
        .collect();
    rest.shuffle(rng);
    out.extend(rest.iter().take(count.saturating_sub(out.len())).map(|i| i.intent_name.clone()));
    out
}

/// Stage 3.
pub fn plan_intent_sequence(
    primary: &str,
    length: usize,
    candidates: &[String],
    catalog: &SchemaCatalog,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<Vec<String>> {
    let schema = catalog.require(primary)?;
    if length <= 1 {
        return Ok(vec![primary.to_string()]);
    }
    let listing = candidates
        .iter()
        .filter_map(|c| catalog.get(c))
        .map(|c| format!("- {}: {}", c.intent_name, c.description))
        .collect::<Vec<_>>()
        .join("\n");
    let context = serde_json::json!({
        "primary": primary,
        "primary_domain": schema.domain,
        "length": length,
        "candidates": candidates
            .iter()
            .filter_map(|c| catalog.get(c))
            .map(|c| serde_json::json!({"name": c.intent_name, "domain": c.domain}))
            .collect::<Vec<_>>(),
    });
    let prompt = prompts.render(
        Stage::IntentSequence,
        &[
            ("primary", primary),
            ("length", &length.to_string()),
            ("candidates", &listing),
        ],
        context,
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| Error::parse("empty intent sequence"))?;
    let mut names: Vec<String> = line
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.first().map(String::as_str) != Some(primary) {
        names.insert(0, primary.to_string());
    }
    for n in &names[1..] {
        if !candidates.contains(n) {
            return Err(Error::UnknownIntent(n.clone()));
        }
    }
    let unique: HashSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::parse("intent sequence repeats an intent"));
    }
    if names.len() != length {
        return Err(Error::parse(format!("expected {length} intents, got {}", names.len())));
    }
    Ok(names)
}

fn render_values(values: &BTreeMap<String, Value>) -> String {
    values
        .iter()
        .map(|(k, v)| format!("{k} = {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses `slot = literal` lines over exactly the key set of `expected`.
fn parse_value_lines(
    schema: &IntentSchema,
    expected: &BTreeMap<String, Value>,
    lines: &[&str],
) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("expected `slot = value`, got `{line}`")))?;
        let k = k.trim();
        if !expected.contains_key(k) {
            return Err(Error::parse(format!("unexpected slot `{k}`")));
        }
        let value = parse_value(v.trim())?;
        let spec = schema.slot(k).ok_or_else(|| Error::parse(format!("unknown slot `{k}`")))?;
        if !spec.accepts(&value) || matches!(&value, Value::Text(s) if s.trim().is_empty()) {
            return Err(Error::TypeMismatch(format!("{value} does not fit `{k}`")));
        }
        if out.insert(k.to_string(), value).is_some() {
            return Err(Error::parse(format!("slot `{k}` given twice")));
        }
    }
    if out.len() != expected.len() {
        let missing: Vec<_> = expected.keys().filter(|k| !out.contains_key(*k)).collect();
        return Err(Error::parse(format!("reply is missing slots {missing:?}")));
    }
    Ok(out)
}

fn nonblank_lines(reply: &str) -> Vec<&str> {
    reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Stage 4.
pub fn refine_slot_values(
    schema: &IntentSchema,
    draft: &BTreeMap<String, Value>,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<BTreeMap<String, Value>> {
    let prompt = prompts.render(
        Stage::RefineSlots,
        &[("intent", &schema.intent_name), ("values", &render_values(draft))],
        serde_json::json!({"intent": schema.intent_name, "values": draft}),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    parse_value_lines(schema, draft, &nonblank_lines(&reply))
}

/// Stage 5. Keeps the first paragraph of the reply.
pub fn justify_followup(
    history: &[String],
    next_intent: &str,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<String> {
    let summary = history
        .iter()
        .map(|h| format!("- {}", humanize(h)))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = prompts.render(
        Stage::Justify,
        &[("history", &summary), ("next_intent", &humanize(next_intent))],
        serde_json::json!({"history": history, "next_intent": next_intent}),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let paragraph = reply
        .trim()
        .split("\n\n")
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    if paragraph.is_empty() {
        return Err(Error::parse("empty justification"));
    }
    Ok(paragraph)
}

/// Stage 6, followed by a stage-4 pass over its result.
pub fn followup_slot_values(
    schema: &IntentSchema,
    justification: &str,
    draft: &BTreeMap<String, Value>,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<BTreeMap<String, Value>> {
    let prompt = prompts.render(
        Stage::FollowupSlots,
        &[
            ("intent", &humanize(&schema.intent_name)),
            ("justification", justification),
            ("values", &render_values(draft)),
        ],
        serde_json::json!({"intent": schema.intent_name, "justification": justification, "values": draft}),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let values = parse_value_lines(schema, draft, &nonblank_lines(&reply))?;
    refine_slot_values(schema, &values, provider, prompts, seed)
}

/// Stage 7: values may change; intents, keys and phenomena may not.
pub fn harmonize_slot_values(
    plan: &ConversationPlan,
    catalog: &SchemaCatalog,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<ConversationPlan> {
    let listing = plan
        .intent_sequence
        .iter()
        .zip(&plan.slot_assignments)
        .enumerate()
        .map(|(i, (name, values))| format!("[{i}:{name}]\n{}", render_values(values)))
        .collect::<Vec<_>>()
        .join("\n");
    let context = serde_json::json!({
        "plan": plan.intent_sequence.iter().zip(&plan.slot_assignments)
            .map(|(n, v)| serde_json::json!({"intent": n, "values": v}))
            .collect::<Vec<_>>(),
    });
    let prompt = prompts.render(Stage::Harmonize, &[("plan", &listing)], context);
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;

    let mut blocks: Vec<(String, Vec<&str>)> = Vec::new();
    for line in nonblank_lines(&reply) {
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            blocks.push((header.to_string(), Vec::new()));
        } else if let Some((_, lines)) = blocks.last_mut() {
            lines.push(line);
        } else {
            return Err(Error::parse(format!("value line before any intent header: `{line}`")));
        }
    }
    if blocks.len() != plan.intent_sequence.len() {
        return Err(Error::parse("reply changes the intent list"));
    }
    let mut out = plan.clone();
    for (i, (header, lines)) in blocks.iter().enumerate() {
        let expected = format!("{i}:{}", plan.intent_sequence[i]);
        if header.replace(' ', "") != expected {
            return Err(Error::parse(format!("expected header [{expected}], got [{header}]")));
        }
        let schema = catalog.require(&plan.intent_sequence[i])?;
        out.slot_assignments[i] = parse_value_lines(schema, &plan.slot_assignments[i], lines)?;
    }
    Ok(out)
}

/// Stage 8: entities for every query intent in the plan.
pub fn generate_query_entities(
    plan: &ConversationPlan,
    catalog: &SchemaCatalog,
    pools: &[SlotValuePool],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    seed: Option<u64>,
) -> Result<EntityStore> {
    let mut wanted: Vec<(&IntentSchema, &BTreeMap<String, Value>)> = Vec::new();
    for (name, values) in plan.intent_sequence.iter().zip(&plan.slot_assignments) {
        let schema = catalog.require(name)?;
        if schema.is_query() && wanted.iter().all(|(w, _)| w.entity_name != schema.entity_name) {
            wanted.push((schema, values));
        }
    }
    if wanted.is_empty() {
        return Ok(EntityStore::default());
    }
    let mut listing = Vec::new();
    let mut specs = Vec::new();
    for (q, filters) in &wanted {
        let fields = catalog.entity_fields(&q.entity_name);
        listing.push(format!(
            "{}: fields {}; the user will search with {}",
            q.entity_name,
            fields
                .iter()
                .map(|f| format!("{} ({}{})", f.name, f.value_type.name(), if f.mandatory { ", required" } else { "" }))
                .collect::<Vec<_>>()
                .join(", "),
            if filters.is_empty() { "no filters".to_string() } else { render_values(filters).replace('\n', ", ") }
        ));
        let pool = pools.iter().find(|p| p.intent_name == q.intent_name);
        specs.push(serde_json::json!({
            "entity_name": q.entity_name,
            "fields": fields,
            "filters": filters,
            "pool": pool.map(|p| &p.values_per_slot),
        }));
    }
    let prompt = prompts.render(
        Stage::Entities,
        &[("entities", &listing.join("\n"))],
        serde_json::json!({"entities": specs}),
    );
    let reply = provider.complete(&prompt, DEFAULT_TEMPERATURE, seed)?;
    let mut store = EntityStore::default();
    for line in nonblank_lines(&reply) {
        let Command::IntentCall { intent: entity, args, .. } = parse_command(&format!("x0 = {line}"))? else {
            unreachable!("an assignment of a call always parses as an intent call")
        };
        let (q, _) = wanted
            .iter()
            .find(|(q, _)| q.entity_name == entity)
            .ok_or_else(|| Error::parse(format!("unexpected entity `{entity}`")))?;
        let fields = catalog.entity_fields(&q.entity_name);
        for f in fields.iter().filter(|f| f.mandatory) {
            if !args.iter().any(|(k, _)| *k == f.name) {
                return Err(Error::parse(format!("{entity} record is missing `{}`", f.name)));
            }
        }
        for (k, v) in &args {
            let spec = fields
                .iter()
                .find(|f| f.name == *k)
                .ok_or_else(|| Error::parse(format!("`{k}` is not a field of {entity}")))?;
            if !spec.accepts(v) {
                return Err(Error::TypeMismatch(format!("{v} does not fit `{k}` of {entity}")));
            }
        }
        store.insert(&entity, args);
    }
    for (q, _) in &wanted {
        if store.get(&q.entity_name).is_empty() {
            return Err(Error::parse(format!("no records for {}", q.entity_name)));
        }
    }
    Ok(store)
}

fn describe_value(v: &Value) -> String {
    match v {
        Value::Text(s) => format!("\"{s}\""),
        other => other.display_plain(),
    }
}

/// Turns a plan into the rules the user agent follows.
pub fn compile_conversation_rules(plan: &ConversationPlan) -> ConversationRules {
    let mut rules = vec![
        Rule {
            turn_scope: "all".into(),
            instruction: "You are the user. Write one short message per turn and never mention these rules.".into(),
            phenomenon: None,
            token: None,
        },
        Rule {
            turn_scope: "all".into(),
            instruction: "Pursue the intents below in order. Move on only once the current one is done or cancelled."
                .into(),
            phenomenon: None,
            token: None,
        },
    ];
    for (i, name) in plan.intent_sequence.iter().enumerate() {
        let values = &plan.slot_assignments[i];
        let mut text = format!("Intent {}: you want to {}.", i + 1, humanize(name));
        if let Some(Some(j)) = plan.justifications.get(i) {
            text.push_str(&format!(" Reason: {j}"));
        }
        if !values.is_empty() {
            let list: Vec<_> = values
                .iter()
                .map(|(k, v)| format!("{} = {}", humanize(k), describe_value(v)))
                .collect();
            text.push_str(&format!(" Values: {}.", list.join(", ")));
        }
        if let Some(w) = plan.withheld.get(i).filter(|w| !w.is_empty()) {
            let list: Vec<_> = w.iter().map(|s| humanize(s)).collect();
            text.push_str(&format!(" Only give these when asked: {}.", list.join(", ")));
        }
        rules.push(Rule {
            turn_scope: format!("intent {}", i + 1),
            instruction: text,
            phenomenon: None,
            token: None,
        });
    }
    for p in &plan.phenomena {
        let intent = humanize(&plan.intent_sequence[p.target_intent]);
        let slot = p.target_slot.as_deref().map(humanize).unwrap_or_default();
        let planned = p
            .target_slot
            .as_ref()
            .and_then(|s| plan.slot_assignments[p.target_intent].get(s))
            .map(describe_value)
            .unwrap_or_default();
        let alt = p.alt_value.as_ref().map(describe_value).unwrap_or_default();
        let scope = match p.trigger_turn_hint {
            TriggerHint::OnSlotRequest => format!("intent {}, when asked for the {slot}", p.target_intent + 1),
            TriggerHint::OnConfirmationRequest => format!("intent {}, when asked to confirm", p.target_intent + 1),
            TriggerHint::Anywhere => format!("intent {}", p.target_intent + 1),
        };
        let what = match p.kind {
            PhenomenonKind::Cancellation => format!("Change your mind and cancel the request to {intent}."),
            PhenomenonKind::AsrEarlyEnd => {
                format!("Your message is cut off part-way through the {slot}: say only {alt}, with nothing after it.")
            }
            PhenomenonKind::Sarcasm => "Reply sarcastically without giving an answer.".into(),
            PhenomenonKind::DelayConfirmation => "Say you need a moment to think before deciding.".into(),
            PhenomenonKind::AnswerAboutAnotherSlot => {
                let related = p.related_slot.as_deref().unwrap_or_default();
                let value = plan.slot_assignments[p.target_intent]
                    .get(related)
                    .map(describe_value)
                    .unwrap_or_default();
                format!("Give the {} ({value}) instead of the {slot}.", humanize(related))
            }
            PhenomenonKind::IrrelevantAnswer => "Reply with something irrelevant to the question.".into(),
            PhenomenonKind::OverheardAnswer => {
                "Reply with something said to a person nearby, not to the assistant.".into()
            }
            PhenomenonKind::InTurnCorrection => {
                format!("Say the {slot} is {alt}, then correct yourself to {planned} in the same message.")
            }
            PhenomenonKind::Correction => {
                format!("You first gave the {slot} as {alt}; correct it to {planned}.")
            }
            PhenomenonKind::None => String::new(),
        };
        let token = p.kind.token().map(str::to_string);
        rules.push(Rule {
            turn_scope: scope,
            instruction: format!("{what} End that message with {}.", token.as_deref().unwrap_or_default()),
            phenomenon: Some(p.kind),
            token,
        });
    }
    ConversationRules { rules }
}

fn alternative(pool: Option<&SlotValuePool>, slot: &str, planned: &Value, rng: &mut impl Rng) -> Option<Value> {
    let options: Vec<&Value> = pool?
        .candidates(slot)
        .iter()
        .filter(|v| *v != planned)
        .filter(|v| match (v, planned) {
            (Value::Text(a), Value::Text(b)) => !a.trim().eq_ignore_ascii_case(b.trim()),
            _ => true,
        })
        .collect();
    options.choose(rng).map(|v| (*v).clone())
}

/// Strict non-empty prefix of a value, cut about half way.
pub fn truncate_for_asr(value: &str) -> Option<String> {
    let chars: Vec<char> = value.chars().collect();
    if chars.len() < 2 {
        return None;
    }
    let cut: String = chars[..chars.len().div_ceil(2)].iter().collect();
    let cut = cut.trim_end().to_string();
    (!cut.is_empty() && cut.len() < value.len()).then_some(cut)
}

const CONFIRM_KEY: &str = "#confirm";

fn place_phenomenon(
    kind: PhenomenonKind,
    plan: &ConversationPlan,
    catalog: &SchemaCatalog,
    pools: &[SlotValuePool],
    taken: &mut HashSet<(usize, String)>,
    rng: &mut impl Rng,
) -> Option<Phenomenon> {
    let mut options: Vec<Phenomenon> = Vec::new();
    for (i, name) in plan.intent_sequence.iter().enumerate() {
        let schema = catalog.get(name)?;
        if schema.is_query() {
            continue;
        }
        let values = &plan.slot_assignments[i];
        let pool = pools.iter().find(|p| p.intent_name == *name);
        let confirm_free = schema.requires_confirmation && !taken.contains(&(i, CONFIRM_KEY.to_string()));
        let at_confirm = |kind| Phenomenon {
            kind,
            target_intent: i,
            target_slot: None,
            trigger_turn_hint: TriggerHint::OnConfirmationRequest,
            alt_value: None,
            related_slot: None,
        };
        let on_slot = |kind, slot: &str| Phenomenon {
            kind,
            target_intent: i,
            target_slot: Some(slot.to_string()),
            trigger_turn_hint: TriggerHint::OnSlotRequest,
            alt_value: None,
            related_slot: None,
        };
        let free_mandatory: Vec<&str> = schema
            .mandatory_slots()
            .map(|s| s.name.as_str())
            .filter(|s| !taken.contains(&(i, s.to_string())))
            .collect();
        match kind {
            PhenomenonKind::Cancellation | PhenomenonKind::DelayConfirmation if confirm_free => {
                options.push(at_confirm(kind));
            }
            PhenomenonKind::Sarcasm => {
                if confirm_free {
                    options.push(at_confirm(kind));
                }
                options.extend(free_mandatory.iter().map(|s| on_slot(kind, s)));
            }
            PhenomenonKind::Correction if confirm_free => {
                for s in &free_mandatory {
                    if let Some(alt) = alternative(pool, s, &values[*s], rng) {
                        options.push(Phenomenon {
                            target_slot: Some(s.to_string()),
                            alt_value: Some(alt),
                            ..at_confirm(kind)
                        });
                    }
                }
            }
            PhenomenonKind::InTurnCorrection => {
                for s in &free_mandatory {
                    if let Some(alt) = alternative(pool, s, &values[*s], rng) {
                        options.push(Phenomenon {
                            alt_value: Some(alt),
                            ..on_slot(kind, s)
                        });
                    }
                }
            }
            PhenomenonKind::AsrEarlyEnd => {
                for s in &free_mandatory {
                    let string_slot = schema.slot(s).is_some_and(|x| x.is_string());
                    if let (true, Some(Value::Text(v))) = (string_slot, values.get(*s)) {
                        if let Some(cut) = truncate_for_asr(v) {
                            options.push(Phenomenon {
                                alt_value: Some(Value::text(cut)),
                                ..on_slot(kind, s)
                            });
                        }
                    }
                }
            }
            PhenomenonKind::OverheardAnswer | PhenomenonKind::IrrelevantAnswer => {
                options.extend(free_mandatory.iter().map(|s| on_slot(kind, s)));
            }
            PhenomenonKind::AnswerAboutAnotherSlot => {
                let order: Vec<&str> = schema.slots.iter().map(|s| s.name.as_str()).collect();
                for s in &free_mandatory {
                    let pos = order.iter().position(|o| o == s).unwrap_or(0);
                    let related: Vec<&str> = schema
                        .slots
                        .iter()
                        .enumerate()
                        .filter(|(j, x)| {
                            values.contains_key(&x.name)
                                && x.name != *s
                                && !taken.contains(&(i, x.name.clone()))
                                && (!x.mandatory || *j > pos)
                        })
                        .map(|(_, x)| x.name.as_str())
                        .collect();
                    if let Some(r) = related.choose(rng) {
                        options.push(Phenomenon {
                            related_slot: Some(r.to_string()),
                            ..on_slot(kind, s)
                        });
                    }
                }
            }
            _ => {}
        }
    }
    let chosen = options.choose(rng)?.clone();
    let i = chosen.target_intent;
    if chosen.trigger_turn_hint == TriggerHint::OnConfirmationRequest {
        taken.insert((i, CONFIRM_KEY.to_string()));
    }
    if let Some(s) = &chosen.target_slot {
        taken.insert((i, s.clone()));
    }
    if let Some(r) = &chosen.related_slot {
        taken.insert((i, r.clone()));
    }
    Some(chosen)
}

fn draft_values(schema: &IntentSchema, mask: u64, pool: Option<&SlotValuePool>, rng: &mut impl Rng) -> Result<(BTreeMap<String, Value>, Vec<String>)> {
    let mut values = BTreeMap::new();
    let mut optional = Vec::new();
    let mut opt_index = 0;
    for slot in &schema.slots {
        let include = if slot.mandatory {
            true
        } else {
            let bit = opt_index < 64 && mask & (1 << opt_index) != 0;
            opt_index += 1;
            bit
        };
        if !include {
            continue;
        }
        let candidates = pool.map(|p| p.candidates(&slot.name)).unwrap_or_default();
        let Some(v) = candidates.choose(rng) else {
            if slot.mandatory {
                return Err(Error::precondition(format!(
                    "no candidate values for `{}` of {}",
                    slot.name, schema.intent_name
                )));
            }
            continue;
        };
        values.insert(slot.name.clone(), v.clone());
        if !slot.mandatory {
            optional.push(slot.name.clone());
        }
    }
    Ok((values, optional))
}

/// Runs stages 3-8 for one conversation and compiles its rules.
pub fn plan_conversation(
    catalog: &SchemaCatalog,
    pools: &[SlotValuePool],
    seed: u64,
    config: &PlannerConfig,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Result<ConversationPlan> {
    let shape = sample_conversation_shape(catalog, seed, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let primary = catalog.require(&shape.primary_intent)?;
    let candidates = sample_candidates(primary, catalog, config.candidate_count, &mut rng);
    let length = shape.intent_count.min(candidates.len() + 1);
    let seed_arg = Some(seed);
    let retries = config.retries;

    let sequence = with_retries(retries, retryable, |_| {
        plan_intent_sequence(&primary.intent_name, length, &candidates, catalog, provider, prompts, seed_arg)
    })?;

    let mut plan = ConversationPlan {
        seed,
        intent_sequence: sequence.clone(),
        ..Default::default()
    };
    for (i, name) in sequence.iter().enumerate() {
        let schema = catalog.require(name)?;
        let pool = pools.iter().find(|p| p.intent_name == *name);
        let (draft, optional) = draft_values(schema, shape.optional_masks[i], pool, &mut rng)?;
        let (values, justification) = if i == 0 {
            let v = with_retries(retries, retryable, |_| refine_slot_values(schema, &draft, provider, prompts, seed_arg))?;
            (v, None)
        } else {
            let j = with_retries(retries, retryable, |_| {
                justify_followup(&sequence[..i], name, provider, prompts, seed_arg)
            })?;
            let v = with_retries(retries, retryable, |_| {
                followup_slot_values(schema, &j, &draft, provider, prompts, seed_arg)
            })?;
            (v, Some(j))
        };
        plan.slot_assignments.push(values);
        plan.optional_slot_choices.push(optional);
        plan.justifications.push(justification);
    }
    plan = with_retries(retries, retryable, |_| harmonize_slot_values(&plan, catalog, provider, prompts, seed_arg))?;

    let mut taken = HashSet::new();
    for kind in &shape.phenomena {
        match place_phenomenon(*kind, &plan, catalog, pools, &mut taken, &mut rng) {
            Some(p) => plan.phenomena.push(p),
            None => log::debug!("seed {seed}: no place for {kind}"),
        }
    }

    let mut forced: Vec<HashSet<String>> = vec![HashSet::new(); sequence.len()];
    for p in &plan.phenomena {
        if p.trigger_turn_hint == TriggerHint::OnSlotRequest {
            forced[p.target_intent].extend(p.target_slot.clone());
            forced[p.target_intent].extend(p.related_slot.clone());
        }
    }
    for (i, name) in sequence.iter().enumerate() {
        let schema = catalog.require(name)?;
        let mut withheld = Vec::new();
        for slot in &schema.slots {
            if !plan.slot_assignments[i].contains_key(&slot.name) {
                continue;
            }
            let forced_here = forced[i].contains(&slot.name);
            if forced_here || (slot.mandatory && rng.gen_bool(config.withhold_probability)) {
                withheld.push(slot.name.clone());
            }
        }
        plan.withheld.push(withheld);
    }

    plan.entities = with_retries(retries, retryable, |_| {
        generate_query_entities(&plan, catalog, pools, provider, prompts, seed_arg)
    })?;
    plan.rules = compile_conversation_rules(&plan);
    plan.validate(catalog)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ScriptedProvider;
    use crate::schema::{derive_query_intent, IntentKind, SlotSpec, ValueType};

    fn hotel() -> IntentSchema {
        IntentSchema {
            intent_name: "book_hotel_room".into(),
            domain: "accommodation".into(),
            kind: IntentKind::Transactional,
            slots: vec![
                SlotSpec::new("city", ValueType::Text, true),
                SlotSpec::new("check_in_date", ValueType::DateText, true),
                SlotSpec::new("check_out_date", ValueType::DateText, true),
            ],
            entity_name: "hotel_rooms".into(),
            requires_confirmation: true,
            description: "Book a hotel room".into(),
        }
    }

    fn catalog() -> SchemaCatalog {
        let h = hotel();
        let mut flight = hotel();
        flight.intent_name = "book_flight".into();
        flight.domain = "transportation".into();
        flight.entity_name = "flights".into();
        SchemaCatalog::new(vec![h.clone(), flight, derive_query_intent(&h).unwrap()])
    }

    fn values(pairs: &[(&str, &str)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), Value::text(*v))).collect()
    }

    #[test]
    fn tokens_round_trip_and_strip() {
        for k in PhenomenonKind::PLANNABLE {
            assert_eq!(PhenomenonKind::from_token(k.token().unwrap()), Some(k));
            assert_eq!(PhenomenonKind::from_name(k.name()), Some(k));
        }
        let (text, kind) = strip_token("nothing, ignore that <OVERHEARD>");
        assert_eq!(text, "nothing, ignore that");
        assert_eq!(kind, Some(PhenomenonKind::OverheardAnswer));
        assert_eq!(strip_token(" hi ").1, None);
    }

    #[test]
    fn forced_minimal_shape() {
        let config = PlannerConfig {
            intent_count_weights: vec![1.0],
            phenomenon_rate: 0.0,
            ..Default::default()
        };
        let s = sample_conversation_shape(&catalog(), 7, &config);
        assert_eq!(s.intent_count, 1);
        assert!(s.phenomena.is_empty());
        assert_eq!(s, sample_conversation_shape(&catalog(), 7, &config));
    }

    #[test]
    fn sequence_echo_and_unknown_intent() {
        let c = catalog();
        let cands = vec!["book_flight".to_string()];
        let p = ScriptedProvider::sequence(["book_hotel_room, book_flight", "book_hotel_room, find_hotel_rooms"]);
        let prompts = Prompts::builtin();
        let s = plan_intent_sequence("book_hotel_room", 2, &cands, &c, &p, &prompts, None).unwrap();
        assert_eq!(s, ["book_hotel_room", "book_flight"]);
        let err = plan_intent_sequence("book_hotel_room", 2, &cands, &c, &p, &prompts, None).unwrap_err();
        assert!(matches!(err, Error::UnknownIntent(_)));
        let quiet = ScriptedProvider::default();
        let one = plan_intent_sequence("book_hotel_room", 1, &cands, &c, &quiet, &prompts, None).unwrap();
        assert_eq!(one, ["book_hotel_room"]);
        assert_eq!(quiet.calls(), 0);
    }

    #[test]
    fn refine_fixes_dates_and_checks_keys() {
        let draft = values(&[("city", "Paris"), ("check_in_date", "9th of May"), ("check_out_date", "2nd of May")]);
        let fixed = "city = \"Paris\"\ncheck_in_date = \"2nd of May\"\ncheck_out_date = \"9th of May\"";
        let p = ScriptedProvider::sequence([fixed.to_string(), format!("{fixed}\nstars = 4")]);
        let prompts = Prompts::builtin();
        let out = refine_slot_values(&hotel(), &draft, &p, &prompts, None).unwrap();
        assert_eq!(out["check_in_date"], Value::text("2nd of May"));
        assert_eq!(out["check_out_date"], Value::text("9th of May"));
        let err = refine_slot_values(&hotel(), &draft, &p, &prompts, None).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let same = ScriptedProvider::sequence([render_values(&draft)]);
        assert_eq!(refine_slot_values(&hotel(), &draft, &same, &prompts, None).unwrap(), draft);
    }

    #[test]
    fn justification_keeps_first_paragraph() {
        let prompts = Prompts::builtin();
        let p = ScriptedProvider::sequence(["They need a place to stay.\n\nAlso they like hotels.", "  "]);
        let h = vec!["book_flight".to_string()];
        assert_eq!(
            justify_followup(&h, "book_hotel_room", &p, &prompts, None).unwrap(),
            "They need a place to stay."
        );
        assert!(matches!(
            justify_followup(&h, "book_hotel_room", &p, &prompts, None),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn followup_values_are_refined_again() {
        let prompts = Prompts::builtin();
        let draft = values(&[("city", "Paris"), ("check_in_date", "1st of May"), ("check_out_date", "3rd of May")]);
        let stage6 = "city = \"Rome\"\ncheck_in_date = \"1st of May\"\ncheck_out_date = \"3rd of May\"";
        let stage4 = "city = \"Rome\"\ncheck_in_date = \"2nd of May\"\ncheck_out_date = \"3rd of May\"";
        let p = ScriptedProvider::sequence([stage6, stage4]);
        let out = followup_slot_values(&hotel(), "a trip", &draft, &p, &prompts, None).unwrap();
        assert_eq!(out["city"], Value::text("Rome"));
        assert_eq!(out["check_in_date"], Value::text("2nd of May"));
        assert_eq!(p.calls(), 2);
    }

    fn two_intent_plan() -> ConversationPlan {
        ConversationPlan {
            intent_sequence: vec!["book_flight".into(), "book_hotel_room".into()],
            slot_assignments: vec![
                values(&[("city", "Rome"), ("check_in_date", "1st of May"), ("check_out_date", "3rd of May")]),
                values(&[("city", "Rome"), ("check_in_date", "1st of May"), ("check_out_date", "3rd of May")]),
            ],
            ..Default::default()
        }
    }

    #[test]
    fn harmonize_contract() {
        let prompts = Prompts::builtin();
        let plan = two_intent_plan();
        let same = "[0:book_flight]\ncity = \"Rome\"\ncheck_in_date = \"1st of May\"\ncheck_out_date = \"3rd of May\"\n[1:book_hotel_room]\ncity = \"Rome\"\ncheck_in_date = \"1st of May\"\ncheck_out_date = \"3rd of May\"";
        let edited = same.replacen("3rd of May", "4th of May", 1);
        let dropped = "[0:book_flight]\ncity = \"Rome\"\ncheck_in_date = \"1st of May\"\ncheck_out_date = \"3rd of May\"";
        let p = ScriptedProvider::sequence([same.to_string(), edited, dropped.to_string()]);
        let c = catalog();
        assert_eq!(harmonize_slot_values(&plan, &c, &p, &prompts, None).unwrap(), plan);
        let out = harmonize_slot_values(&plan, &c, &p, &prompts, None).unwrap();
        assert_eq!(out.slot_assignments[0]["check_out_date"], Value::text("4th of May"));
        assert_eq!(out.intent_sequence, plan.intent_sequence);
        assert!(matches!(
            harmonize_slot_values(&plan, &c, &p, &prompts, None),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn entities_for_queries() {
        let prompts = Prompts::builtin();
        let c = catalog();
        let none = ScriptedProvider::default();
        assert!(generate_query_entities(&two_intent_plan(), &c, &[], &none, &prompts, None)
            .unwrap()
            .is_empty());
        let mut plan = two_intent_plan();
        plan.intent_sequence[1] = "find_hotel_rooms".into();
        plan.slot_assignments[1] = BTreeMap::new();
        let p = ScriptedProvider::sequence([
            "hotel_rooms(city=\"Rome\", check_in_date=\"1st of May\", check_out_date=\"3rd of May\")\nhotel_rooms(city=\"Oslo\", check_in_date=\"2nd of May\", check_out_date=\"4th of May\")",
            "hotel_rooms(city=\"Rome\", check_in_date=\"1st of May\")",
        ]);
        let store = generate_query_entities(&plan, &c, &[], &p, &prompts, None).unwrap();
        assert_eq!(store.get("hotel_rooms").len(), 2);
        assert_eq!(store.get("hotel_rooms")[1].id, "hotel_rooms-2");
        assert!(matches!(
            generate_query_entities(&plan, &c, &[], &p, &prompts, None),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn rules_carry_one_marker_per_phenomenon() {
        let mut plan = two_intent_plan();
        let base = compile_conversation_rules(&plan);
        assert_eq!(base.rules.len(), 2 + 2);
        assert!(base.rules.iter().all(|r| r.phenomenon.is_none()));
        plan.phenomena.push(Phenomenon {
            kind: PhenomenonKind::Correction,
            target_intent: 1,
            target_slot: Some("city".into()),
            trigger_turn_hint: TriggerHint::OnConfirmationRequest,
            alt_value: Some(Value::text("Milan")),
            related_slot: None,
        });
        let rules = compile_conversation_rules(&plan);
        assert_eq!(rules.rules.len(), 5);
        let marked: Vec<_> = rules.rules.iter().filter(|r| r.token.is_some()).collect();
        assert_eq!(marked.len(), 1);
        assert_eq!(marked[0].token.as_deref(), Some("<CORRECTION>"));
        assert_eq!(rules, compile_conversation_rules(&plan));
    }

    #[test]
    fn asr_prefix_is_strict() {
        assert_eq!(truncate_for_asr("Paris").as_deref(), Some("Par"));
        assert_eq!(truncate_for_asr("an absolute classic").as_deref(), Some("an absolut"));
        assert_eq!(truncate_for_asr("a"), None);
    }

    #[test]
    fn config_validation() {
        PlannerConfig::default().validate().unwrap();
        let bad = PlannerConfig {
            phenomenon_rate: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
