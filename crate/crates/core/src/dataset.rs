//! Conversation records, splits and statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agents::{TurnKind, TurnRecord};
use crate::dsl::Command;
use crate::planner::{ConversationPlan, PhenomenonKind};
use crate::schema::SchemaCatalog;
use crate::{Error, Result};

/// Parses one JSON record per non-blank line; errors carry the 1-based line.
pub fn parse_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Schema {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Dev, Split::Test, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::TestOod => "test_ood",
        }
    }
}

/// One serialized conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub turns: Vec<TurnRecord>,
    /// Phenomenon tokens observed in user turns, in order of first use.
    pub phenomena: Vec<PhenomenonKind>,
    #[serde(default)]
    pub salvaged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ConversationPlan>,
}

impl ConversationRecord {
    pub fn new(plan: ConversationPlan, turns: Vec<TurnRecord>) -> Self {
        Self {
            id: String::new(),
            split: Split::Train,
            seed: plan.seed,
            phenomena: observed_phenomena(&turns),
            turns,
            salvaged: false,
            plan: Some(plan),
        }
    }

    /// Intent names started by system commands, in order.
    pub fn intents_used(&self) -> Vec<&str> {
        self.turns
            .iter()
            .flat_map(TurnRecord::commands)
            .filter_map(|c| match c {
                Command::IntentCall { intent, .. } => Some(intent.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Distinct phenomenon tokens of the user turns, in order of appearance.
pub fn observed_phenomena(turns: &[TurnRecord]) -> Vec<PhenomenonKind> {
    let mut out = Vec::new();
    for t in turns {
        if let Some(k) = t.phenomenon {
            if t.kind == TurnKind::User && k != PhenomenonKind::None && !out.contains(&k) {
                out.push(k);
            }
        }
    }
    out
}

pub fn write_dataset(records: &[ConversationRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ConversationRecord>> {
    parse_lines(&fs::read_to_string(path)?)
}

/// Sends every record touching an OOD intent to `test_ood` and partitions
/// the rest by `ratios` (train, dev, test) after a seeded shuffle.
pub fn assign_splits(
    mut records: Vec<ConversationRecord>,
    catalog: &SchemaCatalog,
    ood_intents: &[String],
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<ConversationRecord>> {
    if let Some(unknown) = ood_intents.iter().find(|i| catalog.get(i).is_none()) {
        return Err(Error::Config(format!("ood intent `{unknown}` is not in the catalog")));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let mut pool = Vec::new();
    for (i, r) in records.iter_mut().enumerate() {
        if r.intents_used().iter().any(|n| ood_intents.iter().any(|o| o == n)) {
            r.split = Split::TestOod;
        } else {
            pool.push(i);
        }
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = pool.len() as f64;
    let train = (n * ratios[0]).round() as usize;
    let dev = ((n * ratios[1]).round() as usize).min(pool.len() - train);
    for (k, &i) in pool.iter().enumerate() {
        records[i].split = if k < train {
            Split::Train
        } else if k < train + dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub domains: usize,
    pub intents: usize,
    pub slots: usize,
    pub dialogues: usize,
    /// User, system, signal and response turns.
    pub turns: usize,
    pub turns_per_dialogue: f64,
    pub splits: BTreeMap<Split, usize>,
    /// Conversations containing each phenomenon at least once.
    pub phenomena: BTreeMap<PhenomenonKind, usize>,
    pub unhappy: usize,
    pub unhappy_percent: f64,
}

/// Counts over the records; domains, intents and slots cover the intents the
/// records actually use.
pub fn compute_stats(records: &[ConversationRecord], catalog: &SchemaCatalog) -> DatasetStats {
    let mut stats = DatasetStats {
        dialogues: records.len(),
        ..Default::default()
    };
    for s in Split::ALL {
        stats.splits.insert(s, 0);
    }
    for k in PhenomenonKind::PLANNABLE {
        stats.phenomena.insert(k, 0);
    }
    let mut intents = BTreeSet::new();
    for r in records {
        stats.turns += r.turns.len();
        *stats.splits.entry(r.split).or_default() += 1;
        let kinds = observed_phenomena(&r.turns);
        if !kinds.is_empty() {
            stats.unhappy += 1;
        }
        for k in kinds {
            *stats.phenomena.entry(k).or_default() += 1;
        }
        intents.extend(r.intents_used());
    }
    let mut domains = BTreeSet::new();
    for name in &intents {
        stats.intents += 1;
        if let Some(i) = catalog.get(name) {
            domains.insert(i.domain.as_str());
            stats.slots += i.slots.len();
        }
    }
    stats.domains = domains.len();
    if !records.is_empty() {
        stats.turns_per_dialogue = stats.turns as f64 / records.len() as f64;
        stats.unhappy_percent = 100.0 * stats.unhappy as f64 / records.len() as f64;
    }
    stats
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "domains                   {}", self.domains)?;
        writeln!(f, "intents                   {}", self.intents)?;
        writeln!(f, "slots                     {}", self.slots)?;
        writeln!(f, "dialogues                 {}", self.dialogues)?;
        writeln!(f, "turns                     {}", self.turns)?;
        writeln!(f, "turns per dialogue        {:.2}", self.turns_per_dialogue)?;
        for (s, n) in &self.splits {
            writeln!(f, "split {:<19} {n}", s.name())?;
        }
        for (k, n) in &self.phenomena {
            writeln!(f, "{:<25} {n}", k.name())?;
        }
        write!(f, "unhappy                   {} ({:.1}%)", self.unhappy, self.unhappy_percent)
    }
}
