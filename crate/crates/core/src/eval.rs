//! Scoring of predicted system commands against gold conversations, and
//! tool retrieval for prompting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{TurnKind, TurnRecord};
use crate::backend::{fold_goal, GoalState};
use crate::dataset::{parse_lines, ConversationRecord};
use crate::dsl::{commands_equal_in_scope, Command, Value, VarId};
use crate::planner::PhenomenonKind;
use crate::schema::{humanize, IntentSchema, SchemaCatalog};
use crate::{Error, Result};

/// Predicted commands for one system turn of one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub conversation_id: String,
    pub point_index: usize,
    #[serde(with = "crate::dsl::serde_lines")]
    pub commands: Vec<Command>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    parse_lines(&std::fs::read_to_string(path)?)
}

pub fn write_predictions(lines: &[PredictionLine], path: &Path) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The gold commands of every system turn, as a prediction file would hold them.
pub fn gold_predictions(records: &[ConversationRecord]) -> Vec<PredictionLine> {
    records
        .iter()
        .flat_map(|r| {
            system_points(&r.turns).into_iter().enumerate().map(|(i, t)| PredictionLine {
                conversation_id: r.id.clone(),
                point_index: i,
                commands: r.turns[t].commands().to_vec(),
            })
        })
        .collect()
}

fn system_points(turns: &[TurnRecord]) -> Vec<usize> {
    turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TurnKind::System)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fuzzy_threshold: f64,
    pub strip_articles: bool,
    /// Keep intents the user cancelled in the goal state.
    pub include_cancelled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fuzzy_threshold: 0.85,
            strip_articles: true,
            include_cancelled: true,
        }
    }
}

fn normalize(s: &str, strip_articles: bool) -> String {
    let lower = s.to_lowercase();
    let mut words: Vec<&str> = lower.split_whitespace().collect();
    if strip_articles && words.len() > 1 && matches!(words[0], "the" | "a" | "an") {
        words.remove(0);
    }
    let joined = words.join(" ");
    joined
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim()
        .to_string()
}

/// Normalized equality, or normalized Levenshtein similarity at or above
/// the threshold.
pub fn fuzzy_match_with(a: &str, b: &str, config: &EvalConfig) -> bool {
    let (a, b) = (normalize(a, config.strip_articles), normalize(b, config.strip_articles));
    a == b || strsim::normalized_levenshtein(&a, &b) >= config.fuzzy_threshold
}

pub fn fuzzy_match(a: &str, b: &str) -> bool {
    fuzzy_match_with(a, b, &EvalConfig::default())
}

fn values_match(gold: &Value, pred: &Value, config: &EvalConfig) -> bool {
    match (gold, pred) {
        (Value::Text(g), Value::Text(p)) => fuzzy_match_with(g, p, config),
        (Value::List(g), Value::List(p)) => g.len() == p.len() && g.iter().zip(p).all(|(g, p)| values_match(g, p, config)),
        (g, p) => g == p,
    }
}

fn slot_maps_match(gold: &BTreeMap<String, Value>, pred: &BTreeMap<String, Value>, config: &EvalConfig) -> bool {
    gold.len() == pred.len() && gold.iter().all(|(k, g)| pred.get(k).is_some_and(|p| values_match(g, p, config)))
}

fn goals_match(gold: &GoalState, pred: &GoalState, config: &EvalConfig) -> bool {
    gold.len() == pred.len()
        && gold.iter().all(|(var, g)| {
            pred.get(var)
                .is_some_and(|p| g.intent == p.intent && g.cancelled == p.cancelled && slot_maps_match(&g.slots, &p.slots, config))
        })
}

type PointSlots = BTreeMap<(VarId, String), Value>;

fn point_slots(cmds: &[Command]) -> PointSlots {
    cmds.iter()
        .flat_map(Command::slot_values)
        .map(|(v, s, val)| ((v, s.to_string()), val.clone()))
        .collect()
}

fn point_slots_match(gold: &PointSlots, pred: &PointSlots, config: &EvalConfig) -> bool {
    gold.len() == pred.len() && gold.iter().all(|(k, g)| pred.get(k).is_some_and(|p| values_match(g, p, config)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhenomenonRow {
    pub segments: usize,
    pub matched: usize,
    pub exact_match_turn: f64,
}

/// Denominators behind each metric.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub gold_intents: usize,
    pub goal_points: usize,
    pub slot_points: usize,
    pub segments: usize,
    pub conversations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub intent_accuracy: f64,
    pub joint_goal_accuracy: f64,
    pub slot_accuracy: f64,
    pub exact_match_turn: f64,
    pub exact_match_conversation: f64,
    pub per_phenomenon: BTreeMap<String, PhenomenonRow>,
    pub counts: MetricCounts,
}

fn pct(hit: usize, total: usize) -> f64 {
    if total == 0 {
        100.0
    } else {
        100.0 * hit as f64 / total as f64
    }
}

#[derive(Default)]
struct Tally {
    intents: (usize, usize),
    goals: (usize, usize),
    slots: (usize, usize),
    turns: (usize, usize),
    conversations: (usize, usize),
    phenomena: BTreeMap<String, (usize, usize)>,
}

fn bump(t: &mut (usize, usize), hit: bool) {
    t.0 += usize::from(hit);
    t.1 += 1;
}

fn cancelled_vars(record: &ConversationRecord) -> BTreeSet<VarId> {
    if !record.turns.iter().any(|t| t.phenomenon == Some(PhenomenonKind::Cancellation)) {
        return BTreeSet::new();
    }
    let completed: BTreeSet<VarId> = record
        .turns
        .iter()
        .filter_map(|t| t.signal.as_ref())
        .filter(|s| s.is_completion())
        .filter_map(|s| s.var())
        .collect();
    record
        .turns
        .iter()
        .flat_map(TurnRecord::commands)
        .filter_map(|c| match c {
            Command::IntentCall { var, .. } if !completed.contains(var) => Some(*var),
            _ => None,
        })
        .collect()
}

fn score_conversation(record: &ConversationRecord, preds: &[&[Command]], config: &EvalConfig, tally: &mut Tally) {
    let points = system_points(&record.turns);
    let drop = if config.include_cancelled { BTreeSet::new() } else { cancelled_vars(record) };
    let mut gold_state = GoalState::new();
    let mut pred_state = GoalState::new();
    let mut known = BTreeSet::new();
    let mut all_match = true;
    // (user token, every point matched so far, any point)
    let mut segment: Option<(Option<PhenomenonKind>, bool, bool)> = None;
    let close = |segment: &mut Option<(Option<PhenomenonKind>, bool, bool)>, tally: &mut Tally| {
        if let Some((kind, ok, any)) = segment.take() {
            if any {
                bump(&mut tally.turns, ok);
                let key = kind.map_or("none", PhenomenonKind::name).to_string();
                bump(tally.phenomena.entry(key).or_default(), ok);
            }
        }
    };
    let mut p = 0;
    for (i, turn) in record.turns.iter().enumerate() {
        match turn.kind {
            TurnKind::User => {
                close(&mut segment, tally);
                segment = Some((turn.phenomenon.filter(|k| *k != PhenomenonKind::None), true, false));
            }
            TurnKind::System => {
                debug_assert_eq!(points[p], i);
                let gold = turn.commands();
                let pred = preds[p];
                p += 1;

                for g in gold {
                    if let Command::IntentCall { intent, .. } = g {
                        let hit = pred.iter().any(|c| matches!(c, Command::IntentCall { intent: pi, .. } if pi == intent));
                        bump(&mut tally.intents, hit);
                    }
                }

                for c in gold {
                    fold_goal(&mut gold_state, c);
                }
                for c in pred {
                    fold_goal(&mut pred_state, c);
                }
                let (gs, ps) = (point_slots(gold), point_slots(pred));
                if !gs.is_empty() || !ps.is_empty() {
                    let mut g = gold_state.clone();
                    let mut pr = pred_state.clone();
                    g.retain(|v, _| !drop.contains(v));
                    pr.retain(|v, _| !drop.contains(v));
                    bump(&mut tally.goals, goals_match(&g, &pr, config));
                    bump(&mut tally.slots, point_slots_match(&gs, &ps, config));
                }

                let equal = commands_equal_in_scope(&known, gold, pred).unwrap_or(false);
                all_match &= equal;
                if let Some((_, ok, any)) = segment.as_mut() {
                    *ok &= equal;
                    *any = true;
                }
                for c in gold {
                    if let Command::IntentCall { var, .. } = c {
                        known.insert(*var);
                    }
                }
            }
            TurnKind::Signal | TurnKind::Response => {}
        }
    }
    close(&mut segment, tally);
    bump(&mut tally.conversations, all_match);
}

/// Scores `predictions` against the system turns of `gold`. Every gold
/// system turn needs exactly one prediction line and vice versa.
pub fn evaluate_with(gold: &[ConversationRecord], predictions: &[PredictionLine], config: &EvalConfig) -> Result<MetricsReport> {
    let mut by_conv: BTreeMap<&str, BTreeMap<usize, &[Command]>> = BTreeMap::new();
    for line in predictions {
        let slot = by_conv.entry(line.conversation_id.as_str()).or_default();
        if slot.insert(line.point_index, &line.commands).is_some() {
            return Err(Error::Alignment(format!(
                "duplicate prediction for {} point {}",
                line.conversation_id, line.point_index
            )));
        }
    }
    let ids: BTreeSet<&str> = gold.iter().map(|r| r.id.as_str()).collect();
    if ids.len() != gold.len() {
        return Err(Error::Alignment("gold conversation ids are not unique".into()));
    }
    if let Some(extra) = by_conv.keys().find(|k| !ids.contains(*k)) {
        return Err(Error::Alignment(format!("prediction for unknown conversation {extra}")));
    }
    let mut tally = Tally::default();
    for record in gold {
        let n = system_points(&record.turns).len();
        let empty = BTreeMap::new();
        let lines = by_conv.get(record.id.as_str()).unwrap_or(&empty);
        if lines.len() != n || lines.keys().enumerate().any(|(i, k)| i != *k) {
            return Err(Error::Alignment(format!(
                "{} has {n} system turns but predictions for points {:?}",
                record.id,
                lines.keys().collect::<Vec<_>>()
            )));
        }
        let preds: Vec<&[Command]> = lines.values().copied().collect();
        score_conversation(record, &preds, config, &mut tally);
    }
    Ok(MetricsReport {
        intent_accuracy: pct(tally.intents.0, tally.intents.1),
        joint_goal_accuracy: pct(tally.goals.0, tally.goals.1),
        slot_accuracy: pct(tally.slots.0, tally.slots.1),
        exact_match_turn: pct(tally.turns.0, tally.turns.1),
        exact_match_conversation: pct(tally.conversations.0, tally.conversations.1),
        per_phenomenon: tally
            .phenomena
            .into_iter()
            .map(|(k, (hit, n))| {
                (
                    k,
                    PhenomenonRow {
                        segments: n,
                        matched: hit,
                        exact_match_turn: pct(hit, n),
                    },
                )
            })
            .collect(),
        counts: MetricCounts {
            gold_intents: tally.intents.1,
            goal_points: tally.goals.1,
            slot_points: tally.slots.1,
            segments: tally.turns.1,
            conversations: tally.conversations.1,
        },
    })
}

pub fn evaluate(gold: &[ConversationRecord], predictions: &[PredictionLine]) -> Result<MetricsReport> {
    evaluate_with(gold, predictions, &EvalConfig::default())
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>7}", "metric", "score")?;
        for (name, v) in [
            ("intent accuracy", self.intent_accuracy),
            ("joint goal accuracy", self.joint_goal_accuracy),
            ("slot accuracy", self.slot_accuracy),
            ("exact match (turn)", self.exact_match_turn),
            ("exact match (conversation)", self.exact_match_conversation),
        ] {
            writeln!(f, "{name:<26} {v:>7.2}")?;
        }
        writeln!(f)?;
        writeln!(f, "{:<26} {:>8} {:>7}", "phenomenon", "segments", "match")?;
        for (k, row) in &self.per_phenomenon {
            writeln!(f, "{k:<26} {:>8} {:>7.2}", row.segments, row.exact_match_turn)?;
        }
        Ok(())
    }
}

/// Maps text to a vector; retrieval compares directions only.
pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag of hashed word unigrams and character trigrams, normalized to unit
/// length.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim.max(1)];
        let lower = text.to_lowercase();
        let mut features: Vec<String> = Vec::new();
        for w in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            features.push(format!("w:{w}"));
            let padded: Vec<char> = format!("#{w}#").chars().collect();
            features.extend(padded.windows(3).map(|t| format!("c:{}", t.iter().collect::<String>())));
        }
        for feat in features {
            let h = Sha256::digest(feat.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % v.len();
            v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    None,
    Retrieval,
    Oracle,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "retrieval" => Ok(Self::Retrieval),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Config(format!("unknown retrieval mode `{other}`"))),
        }
    }
}

fn mentioned_tools(turns: &[TurnRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in turns.iter().flat_map(TurnRecord::commands) {
        if let Command::IntentCall { intent, .. } = c {
            if !out.contains(intent) {
                out.push(intent.clone());
            }
        }
    }
    out
}

/// Tools offered to a labeller. `retrieval` returns the tool whose name is
/// nearest to the utterance, then every tool called in `history`; `oracle`
/// returns the tools called in `history`, which should then be the whole
/// gold conversation. Ties go to the earlier catalog entry.
pub fn retrieve_tools<'c>(
    utterance: &str,
    catalog: &'c SchemaCatalog,
    history: &[TurnRecord],
    embedder: &dyn Embedder,
    mode: RetrievalMode,
) -> Vec<&'c IntentSchema> {
    let lookup = |names: Vec<String>| names.iter().filter_map(|n| catalog.get(n)).collect::<Vec<_>>();
    match mode {
        RetrievalMode::None => Vec::new(),
        RetrievalMode::Oracle => lookup(mentioned_tools(history)),
        RetrievalMode::Retrieval => {
            let query = embedder.embed(utterance);
            let mut best: Option<(&IntentSchema, f64)> = None;
            for intent in &catalog.intents {
                let score = cosine(&embedder.embed(&humanize(&intent.intent_name)), &query);
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((intent, score));
                }
            }
            let mut out: Vec<&IntentSchema> = best.map(|(i, _)| i).into_iter().collect();
            for t in lookup(mentioned_tools(history)) {
                if !out.iter().any(|o| o.intent_name == t.intent_name) {
                    out.push(t);
                }
            }
            out
        }
    }
}
