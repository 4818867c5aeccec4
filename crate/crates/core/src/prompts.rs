//! Prompt templates, one editable text file per stage.
//!
//! Templates use `{{name}}` placeholders. Every template ends with a
//! `CONTEXT:` block holding the structured inputs of the call as JSON; the
//! simulated provider reads that block, a remote model simply sees it as part
//! of the prompt.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The LLM calls of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    IntentSchema,
    SlotValues,
    IntentSequence,
    RefineSlots,
    Justify,
    FollowupSlots,
    Harmonize,
    Entities,
    User,
    System,
    Extract,
    Respond,
    SelfConsistency,
    RuleValidator,
    Salvage,
}

impl Stage {
    pub const ALL: [Stage; 15] = [
        Stage::IntentSchema,
        Stage::SlotValues,
        Stage::IntentSequence,
        Stage::RefineSlots,
        Stage::Justify,
        Stage::FollowupSlots,
        Stage::Harmonize,
        Stage::Entities,
        Stage::User,
        Stage::System,
        Stage::Extract,
        Stage::Respond,
        Stage::SelfConsistency,
        Stage::RuleValidator,
        Stage::Salvage,
    ];

    /// Stage number 1..=14; the salvage closing prompt is 15.
    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    fn file_name(self) -> String {
        match self {
            Stage::Salvage => "salvage.txt".into(),
            // Self-consistency re-runs the labelling prompt.
            Stage::SelfConsistency => "stage10.txt".into(),
            s => format!("stage{:02}.txt", s.number()),
        }
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("stage01.txt", include_str!("../templates/stage01.txt")),
    ("stage02.txt", include_str!("../templates/stage02.txt")),
    ("stage03.txt", include_str!("../templates/stage03.txt")),
    ("stage04.txt", include_str!("../templates/stage04.txt")),
    ("stage05.txt", include_str!("../templates/stage05.txt")),
    ("stage06.txt", include_str!("../templates/stage06.txt")),
    ("stage07.txt", include_str!("../templates/stage07.txt")),
    ("stage08.txt", include_str!("../templates/stage08.txt")),
    ("stage09.txt", include_str!("../templates/stage09.txt")),
    ("stage10.txt", include_str!("../templates/stage10.txt")),
    ("stage11.txt", include_str!("../templates/stage11.txt")),
    ("stage12.txt", include_str!("../templates/stage12.txt")),
    ("stage14.txt", include_str!("../templates/stage14.txt")),
    ("salvage.txt", include_str!("../templates/salvage.txt")),
];

pub const CONTEXT_MARKER: &str = "CONTEXT:\n";

#[derive(Debug, Clone)]
pub struct Prompts {
    by_file: HashMap<String, String>,
}

impl Default for Prompts {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Prompts {
    pub fn builtin() -> Self {
        Self {
            by_file: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Built-in templates, overridden by any same-named file in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut prompts = Self::builtin();
        for (name, _) in BUILTIN {
            let path = dir.join(name);
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                prompts.by_file.insert(name.to_string(), text);
            }
        }
        Ok(prompts)
    }

    pub fn template(&self, stage: Stage) -> &str {
        self.by_file
            .get(&stage.file_name())
            .map(String::as_str)
            .unwrap_or_default()
    }

    /// Fills `{{name}}` placeholders and the `{{context}}` block.
    pub fn render(&self, stage: Stage, vars: &[(&str, &str)], context: serde_json::Value) -> String {
        let mut context = context;
        if let serde_json::Value::Object(map) = &mut context {
            map.insert("stage".into(), stage.number().into());
        }
        let mut out = self.template(stage).to_string();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out.replace("{{context}}", &context.to_string())
    }
}

/// Extracts the JSON context block from a rendered prompt.
pub fn context_of(prompt: &str) -> Result<serde_json::Value> {
    let (_, tail) = prompt
        .rsplit_once(CONTEXT_MARKER)
        .ok_or_else(|| Error::parse("prompt has no CONTEXT block"))?;
    serde_json::from_str(tail.trim()).map_err(|e| Error::parse(format!("bad CONTEXT block: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_stage_has_a_template_with_context() {
        let p = Prompts::builtin();
        for stage in Stage::ALL {
            let t = p.template(stage);
            assert!(t.contains("{{context}}"), "{stage:?}");
        }
    }

    #[test]
    fn render_fills_vars_and_stage() {
        let p = Prompts::builtin();
        let out = p.render(
            Stage::IntentSchema,
            &[("description", "Book a hotel room")],
            serde_json::json!({"description": "Book a hotel room"}),
        );
        assert!(out.contains("Intent description: Book a hotel room"));
        let ctx = context_of(&out).unwrap();
        assert_eq!(ctx["stage"], 1);
    }

    #[test]
    fn stage_numbers_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_number(s.number()), Some(s));
        }
        assert_eq!(Stage::from_number(0), None);
    }
}
