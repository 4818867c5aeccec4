//! A deterministic, rule-based provider.
//!
//! It answers every stage from the prompt's `CONTEXT` block: the user agent
//! speaks in fixed phrasings, and the labeller parses those phrasings back.
//! Variety comes from the call seed, so identical seeds give identical text.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::Value as Json;

use crate::agents::{TurnKind, TurnRecord, UserAct};
use crate::backend::SessionState;
use crate::dsl::{parse_signal, SignalPayload, Value};
use crate::planner::PhenomenonKind;
use crate::prompts::{context_of, Stage};
use crate::provider::{prompt_hash, LlmProvider};
use crate::schema::{humanize, IntentSchema, SlotSpec, ValueType};
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct SimulatedProvider {
    /// Probability that a stage-10 label is replaced by a bare `say()`.
    pub label_noise: f64,
}

impl SimulatedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_label_noise(label_noise: f64) -> Self {
        Self { label_noise }
    }
}

fn rng_for(prompt: &str, seed: Option<u64>) -> ChaCha8Rng {
    let h = prompt_hash(prompt);
    let base = u64::from_str_radix(&h[..16], 16).unwrap_or_default();
    ChaCha8Rng::seed_from_u64(base ^ seed.unwrap_or_default())
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().unwrap_or_default()
}

impl LlmProvider for SimulatedProvider {
    fn complete(&self, prompt: &str, _temperature: f64, seed: Option<u64>) -> Result<String> {
        let ctx = context_of(prompt)?;
        let stage = ctx["stage"]
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .and_then(Stage::from_number)
            .ok_or_else(|| Error::Provider("prompt context names no stage".into()))?;
        let mut rng = rng_for(prompt, seed);
        match stage {
            Stage::IntentSchema => Ok(schema_reply(ctx["description"].as_str().unwrap_or_default())),
            Stage::SlotValues => {
                let schema: IntentSchema = from_ctx(&ctx["schema"])?;
                Ok(pool_reply(&schema))
            }
            Stage::IntentSequence => sequence_reply(&ctx, &mut rng),
            Stage::RefineSlots | Stage::FollowupSlots => Ok(value_lines(&from_ctx(&ctx["values"])?)),
            Stage::Justify => {
                let history: Vec<String> = from_ctx(&ctx["history"])?;
                let next = humanize(ctx["next_intent"].as_str().unwrap_or_default());
                Ok(match history.last() {
                    Some(last) => format!(
                        "Now that the {} part is taken care of, the user wants to {next} so the rest of the plan falls into place.",
                        humanize(last)
                    ),
                    None => format!("The user wants to {next}."),
                })
            }
            Stage::Harmonize => {
                #[derive(Deserialize)]
                struct Entry {
                    intent: String,
                    values: BTreeMap<String, Value>,
                }
                let plan: Vec<Entry> = from_ctx(&ctx["plan"])?;
                Ok(plan
                    .iter()
                    .enumerate()
                    .map(|(i, e)| format!("[{i}:{}]\n{}", e.intent, value_lines(&e.values)))
                    .collect::<Vec<_>>()
                    .join("\n"))
            }
            Stage::Entities => entities_reply(&ctx),
            Stage::User => {
                let act: UserAct = from_ctx(&ctx["act"])?;
                Ok(user_reply(&act, &mut rng))
            }
            Stage::System | Stage::SelfConsistency | Stage::RuleValidator => {
                let reply = label_reply(&ctx)?;
                if stage == Stage::System && self.label_noise > 0.0 && rng.gen::<f64>() < self.label_noise && reply != "say()" {
                    return Ok("say()".into());
                }
                Ok(reply)
            }
            Stage::Extract => extract_reply(&ctx),
            Stage::Respond => respond_reply(&ctx, &mut rng),
            Stage::Salvage => Ok("I'm sorry, I can't finish this request right now. Please try again a little later.".into()),
        }
    }
}

fn from_ctx<T: serde::de::DeserializeOwned>(v: &Json) -> Result<T> {
    T::deserialize(v).map_err(|e| Error::Provider(format!("unexpected prompt context: {e}")))
}

fn value_lines(values: &BTreeMap<String, Value>) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}")).collect::<Vec<_>>().join("\n")
}

const STOPWORDS: &[&str] = &["a", "an", "the", "to", "for", "of", "my", "at", "in", "on", "with", "and", "i", "me", "some", "your", "from"];

fn schema_reply(description: &str) -> String {
    let words: Vec<String> = description
        .split(|c: char| !c.is_ascii_alphabetic())
        .map(str::to_ascii_lowercase)
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(&w.as_str()))
        .take(3)
        .collect();
    let name = if words.is_empty() { "do_task".to_string() } else { words.join("_") };
    format!("INTENT: {name}\nDOMAIN: general\nSLOT: details|text|mandatory\nENTITY: {name}_requests\nCONFIRM: true")
}

const DATES: &[&str] = &["next Friday", "the 5th of March", "tomorrow", "the 12th of June", "this Saturday"];
const TIMES: &[&str] = &["7 pm", "10:30 am", "noon", "8:15 pm", "6 am"];
const GENERIC: &[&str] = &["something simple", "the usual one", "the blue one", "the large option", "the quick version"];

/// Candidate text values, chosen by the first keyword found in the slot name.
const TEXT_BANKS: &[(&[&str], &[&str])] = &[
    (&["email", "sender", "cc"], &["sam.okafor@example.com", "priya@example.org", "jordan.lee@example.net"]),
    (&["url"], &["www.example.com/news", "www.bbc.co.uk/weather", "docs.example.org/start"]),
    (&["card_number", "account_number"], &["4929 1234 5678 9012", "12345678", "5500 0000 0000 0004"]),
    (&["song"], &["Bohemian Rhapsody", "Clair de Lune", "Yellow Submarine", "Blue in Green"]),
    (&["artist", "author"], &["Nina Simone", "Radiohead", "Agatha Christie", "Miles Davis"]),
    (&["playlist"], &["Sunday Morning", "Road Trip Mix", "Focus Beats"]),
    (&["podcast"], &["The Daily Brief", "Science Weekly", "History Hour"]),
    (&["book"], &["Pride and Prejudice", "The Hobbit", "Dune"]),
    (&["film", "program"], &["The Grand Budapest Hotel", "Spirited Away", "Planet Earth"]),
    (&["restaurant"], &["The Golden Spoon", "Luigi's Trattoria", "Sakura House"]),
    (&["cinema"], &["Odeon Leicester Square", "The Picturehouse", "Vue Westfield"]),
    (&["salon", "spa", "pool"], &["Serenity Spa", "Blue Wave Centre", "Studio Nine"]),
    (&["channel", "platform"], &["BBC One", "Channel 4", "Sky Arts"]),
    (&["review", "comment"], &["absolutely wonderful", "a bit disappointing", "great value for money"]),
    (&["subject", "title", "label"], &["weekly update", "morning run", "project kickoff"]),
    (&["message", "note", "body", "reminder", "content", "description", "reason", "requests"], &[
        "pick up milk on the way home",
        "call the plumber",
        "running ten minutes late",
        "window seat if possible",
    ]),
    (&["items", "songs"], &["bread, milk and eggs", "two margherita pizzas", "apples and bananas"]),
    (&["address"], &["12 Baker Street", "4 Elm Road", "221 Station Avenue"]),
    (&["port", "city", "location", "destination", "origin"], &["Lisbon", "Edinburgh", "Kyoto", "Toronto", "Barcelona"]),
    (&["name", "recipient", "payee", "biller"], &["Alex Morgan", "Priya Patel", "Sam Okafor", "Maria Rossi"]),
    (&["language"], &["Italian", "German", "Japanese"]),
    (&["days"], &["weekdays", "every Monday", "weekends"]),
    (&["reference"], &["rent payment", "invoice 1042", "gym membership"]),
    (&["goal", "type", "treatment"], &["build strength", "deep clean", "improve stamina"]),
];

fn text_bank(slot: &str) -> &'static [&'static str] {
    TEXT_BANKS
        .iter()
        .find(|(keys, _)| keys.iter().any(|k| slot.contains(k)))
        .map_or(GENERIC, |(_, bank)| bank)
}

fn candidates_for(spec: &SlotSpec) -> Vec<String> {
    match spec.value_type {
        ValueType::Integer => ["1", "2", "3", "4"].map(String::from).to_vec(),
        ValueType::Number => ["1.5", "2.0", "3.5", "10.0"].map(String::from).to_vec(),
        ValueType::Boolean => ["true", "false"].map(String::from).to_vec(),
        ValueType::EnumText => spec.allowed_values.clone().unwrap_or_default(),
        ValueType::DateText => DATES.iter().map(|s| s.to_string()).collect(),
        ValueType::TimeText => TIMES.iter().map(|s| s.to_string()).collect(),
        ValueType::Text => text_bank(&spec.name).iter().map(|s| s.to_string()).collect(),
    }
}

fn pool_reply(schema: &IntentSchema) -> String {
    schema
        .slots
        .iter()
        .flat_map(|s| candidates_for(s).into_iter().map(move |v| format!("VALUE: {}|{v}", s.name)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn sequence_reply(ctx: &Json, rng: &mut ChaCha8Rng) -> Result<String> {
    #[derive(Deserialize)]
    struct Candidate {
        name: String,
        domain: String,
    }
    let primary = ctx["primary"].as_str().unwrap_or_default();
    let domain = ctx["primary_domain"].as_str().unwrap_or_default();
    let length = ctx["length"].as_u64().unwrap_or(1) as usize;
    let candidates: Vec<Candidate> = from_ctx(&ctx["candidates"])?;
    let (mut same, mut other): (Vec<_>, Vec<_>) = candidates
        .iter()
        .filter(|c| c.name != primary)
        .partition(|c| c.domain == domain);
    same.shuffle(rng);
    other.shuffle(rng);
    let mut names = vec![primary.to_string()];
    names.extend(same.iter().chain(&other).take(length.saturating_sub(1)).map(|c| c.name.clone()));
    Ok(names.join(", "))
}

fn default_value(spec: &SlotSpec, k: usize) -> Option<Value> {
    let c = candidates_for(spec);
    spec.coerce(c.get(k % c.len().max(1))?)
}

fn entities_reply(ctx: &Json) -> Result<String> {
    #[derive(Deserialize)]
    struct Spec {
        entity_name: String,
        fields: Vec<SlotSpec>,
        filters: BTreeMap<String, Value>,
        pool: Option<BTreeMap<String, Vec<Value>>>,
    }
    let specs: Vec<Spec> = from_ctx(&ctx["entities"])?;
    let mut lines = Vec::new();
    for spec in &specs {
        for k in 0..2 {
            let fields: Vec<String> = spec
                .fields
                .iter()
                .filter_map(|f| {
                    let from_pool = spec.pool.as_ref().and_then(|p| p.get(&f.name)).and_then(|c| c.get(k % c.len().max(1)).cloned());
                    let v = match (k, spec.filters.get(&f.name)) {
                        (0, Some(v)) => Some(v.clone()),
                        _ => from_pool.or_else(|| default_value(f, k)),
                    }?;
                    Some(format!("{}={v}", f.name))
                })
                .collect();
            lines.push(format!("{}({})", spec.entity_name, fields.join(", ")));
        }
    }
    Ok(lines.join("\n"))
}

fn statement(slot: &str, value: &Value) -> String {
    format!("The {} is \"{}\".", humanize(slot), value.display_plain())
}

fn user_reply(act: &UserAct, rng: &mut ChaCha8Rng) -> String {
    match act {
        UserAct::Start { intent, first, slots } => {
            let opening = if *first {
                format!("{} I want to {}.", pick(rng, &["Hi!", "Hello!", "Hey there!"]), humanize(intent))
            } else {
                format!("Also, I want to {}.", humanize(intent))
            };
            std::iter::once(opening)
                .chain(slots.iter().map(|(s, v)| statement(s, v)))
                .collect::<Vec<_>>()
                .join(" ")
        }
        UserAct::Provide { slot, value, .. } => {
            let lead = pick(rng, &["", "Sure. ", "Oh, right. "]);
            format!("{lead}{}", statement(slot, value))
        }
        UserAct::Confirm { .. } => pick(rng, &["Yes, please go ahead.", "Yes, go ahead.", "That's right, go ahead."]).into(),
        UserAct::Phenomenon {
            kind,
            slot,
            value,
            alt,
            related_slot,
            related_value,
            ..
        } => {
            let slot_h = slot.as_deref().map(humanize).unwrap_or_default();
            let plain = value.as_ref().map(Value::display_plain).unwrap_or_default();
            let alt_plain = alt.as_ref().map(Value::display_plain).unwrap_or_else(|| plain.clone());
            let text = match kind {
                PhenomenonKind::Cancellation => "Actually, forget it, I don't want to do that any more.".to_string(),
                PhenomenonKind::AsrEarlyEnd => format!("The {slot_h} is \"{alt_plain}"),
                PhenomenonKind::Sarcasm => pick(
                    rng,
                    &["Oh wonderful, another question. I just love these.", "Oh sure, because I have all day for this."],
                )
                .into(),
                PhenomenonKind::DelayConfirmation => {
                    pick(rng, &["Hmm, give me a second to think about it.", "Hold on, let me check something first."]).into()
                }
                PhenomenonKind::AnswerAboutAnotherSlot => match (related_slot, related_value) {
                    (Some(s), Some(v)) => statement(s, v),
                    _ => "I'm not sure yet.".into(),
                },
                PhenomenonKind::IrrelevantAnswer => pick(
                    rng,
                    &[
                        "By the way, do you know if it will rain later today?",
                        "I just remembered I need to water my plants.",
                        "Did you know octopuses have three hearts?",
                    ],
                )
                .into(),
                PhenomenonKind::OverheardAnswer => pick(
                    rng,
                    &[
                        "Honey, did you remember to feed the cat?",
                        "Can you pass me the charger, please?",
                        "No, not you, I was talking to my brother.",
                    ],
                )
                .into(),
                PhenomenonKind::InTurnCorrection => {
                    format!("The {slot_h} is \"{alt_plain}\", no wait, sorry, make that \"{plain}\".")
                }
                PhenomenonKind::Correction => format!("Actually, sorry, the {slot_h} is \"{plain}\" instead."),
                PhenomenonKind::None => "Okay.".into(),
            };
            match kind.token() {
                Some(token) => format!("{text} {token}"),
                None => text,
            }
        }
    }
}

const CORRECTION_BRIDGE: &str = ", no wait, sorry, make that \"";

/// The value a user statement gives for `slot`, as written in `text`.
fn stated_value<'t>(text: &'t str, slot: &str) -> Option<&'t str> {
    let lower = text.to_ascii_lowercase();
    let needle = format!("the {} is \"", humanize(slot));
    let start = lower.find(&needle)? + needle.len();
    let rest = &text[start..];
    let (value, after) = match rest.find('"') {
        Some(end) => (&rest[..end], &rest[end + 1..]),
        None => (rest, ""),
    };
    if let Some(corrected) = after.strip_prefix(CORRECTION_BRIDGE) {
        return Some(corrected.split('"').next().unwrap_or_default().trim());
    }
    Some(value.trim())
}

#[derive(Deserialize)]
struct Tool {
    name: String,
    slots: Vec<ToolSlot>,
}

#[derive(Deserialize)]
struct ToolSlot {
    name: String,
    #[serde(rename = "type")]
    value_type: String,
    string: bool,
    allowed: Option<Vec<String>>,
}

impl ToolSlot {
    fn literal(&self, raw: &str) -> Value {
        if self.string {
            return Value::Placeholder;
        }
        let spec = SlotSpec {
            name: self.name.clone(),
            value_type: ValueType::from_name(&self.value_type).unwrap_or(ValueType::Text),
            mandatory: false,
            allowed_values: self.allowed.clone(),
        };
        spec.coerce(raw).unwrap_or_else(|| Value::text(raw))
    }
}

#[derive(Deserialize)]
struct SessionView {
    var: crate::dsl::VarId,
    intent: String,
    state: SessionState,
}

fn label_reply(ctx: &Json) -> Result<String> {
    let history: Vec<TurnRecord> = from_ctx(&ctx["history"])?;
    let tools: Vec<Tool> = from_ctx(&ctx["tools"])?;
    let sessions: Vec<SessionView> = from_ctx(&ctx["sessions"])?;
    let next_var = ctx["next_var"].as_u64().unwrap_or_default();
    let Some(last) = history.last() else {
        return Ok("say()".into());
    };
    if last.kind != TurnKind::User {
        return Ok("say()".into());
    }
    let text = last.text.as_deref().unwrap_or_default();
    let lower = text.to_ascii_lowercase();
    let mut lines = Vec::new();

    let started = tools
        .iter()
        .filter(|t| lower.contains(&format!("i want to {}.", humanize(&t.name))))
        .max_by_key(|t| t.name.len());
    let mut consumed: Vec<&str> = Vec::new();
    if let Some(tool) = started {
        let args: Vec<String> = tool
            .slots
            .iter()
            .filter_map(|s| stated_value(text, &s.name).map(|raw| format!("{}={}", s.name, s.literal(raw))))
            .collect();
        consumed.extend(tool.slots.iter().filter(|s| stated_value(text, &s.name).is_some()).map(|s| s.name.as_str()));
        lines.push(format!("x{next_var} = {}({})", tool.name, args.join(", ")));
    }

    let open: Vec<&SessionView> = sessions
        .iter()
        .rev()
        .filter(|s| matches!(s.state, SessionState::Collecting | SessionState::AwaitingConfirmation))
        .collect();
    if started.is_none() {
        let mut assigned = Vec::new();
        for session in &open {
            let Some(tool) = tools.iter().find(|t| t.name == session.intent) else { continue };
            for s in &tool.slots {
                if consumed.contains(&s.name.as_str()) || assigned.contains(&s.name) {
                    continue;
                }
                if let Some(raw) = stated_value(text, &s.name) {
                    lines.push(format!("{}.{} = {}", session.var, s.name, s.literal(raw)));
                    assigned.push(s.name.clone());
                }
            }
        }
        if lower.contains("go ahead") {
            if let Some(s) = open.iter().find(|s| s.state == SessionState::AwaitingConfirmation) {
                lines.push(format!("confirm({})", s.var));
            }
        }
    }
    if lines.is_empty() {
        lines.push("say()".into());
    }
    Ok(lines.join("\n"))
}

fn extract_reply(ctx: &Json) -> Result<String> {
    #[derive(Deserialize)]
    struct Hole {
        slot: String,
    }
    let text = ctx["user_text"].as_str().unwrap_or_default();
    let holes: Vec<Hole> = from_ctx(&ctx["placeholders"])?;
    holes
        .iter()
        .map(|h| {
            stated_value(text, &h.slot)
                .filter(|v| !v.is_empty())
                .map(|v| format!("{} = {}", h.slot, Value::text(v)))
                .ok_or_else(|| Error::Provider(format!("no span for `{}`", h.slot)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|l| l.join("\n"))
}

fn describe(signal: &SignalPayload, rng: &mut ChaCha8Rng) -> String {
    match signal {
        SignalPayload::MissingSlots { slots, .. } => {
            let slot = humanize(slots.first().map(String::as_str).unwrap_or("details"));
            format!("{} {slot}?", pick(rng, &["Sure. What is the", "Okay. Could you tell me the", "Got it. What's the"]))
        }
        SignalPayload::ConfirmationRequired { .. } => {
            pick(rng, &["I have everything I need. Shall I go ahead?", "Just to confirm, should I proceed?"]).into()
        }
        SignalPayload::Performed { .. } => pick(rng, &["Done! That's all taken care of.", "All set, your request is complete."]).into(),
        SignalPayload::QueryResult { entities, .. } => match entities.len() {
            0 => "I couldn't find anything matching that.".into(),
            1 => "I found one match for you.".into(),
            n => format!("I found {n} matches for you."),
        },
        SignalPayload::Hint { text } => text.clone(),
    }
}

fn respond_reply(ctx: &Json, rng: &mut ChaCha8Rng) -> Result<String> {
    let signals: Vec<String> = from_ctx(&ctx["signals"])?;
    if let Some(last) = signals.last() {
        return Ok(describe(&parse_signal(last)?, rng));
    }
    let user = ctx["user_text"].as_str().unwrap_or_default().to_ascii_lowercase();
    if user.contains("forget it") {
        return Ok("No problem, I've cancelled that request.".into());
    }
    let pending = ctx["pending"].as_str().map(parse_signal).transpose()?;
    Ok(match pending {
        Some(s @ (SignalPayload::MissingSlots { .. } | SignalPayload::ConfirmationRequired { .. })) => {
            format!("{} {}", pick(rng, &["No worries.", "Alright."]), describe(&s, rng))
        }
        _ => "Is there anything else I can help you with?".into(),
    })
}
