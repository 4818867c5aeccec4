//! End-to-end generation runs: plan, converse, validate, salvage, split and
//! write.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{run_conversation, Providers, TurnKind};
use crate::config::RunConfig;
use crate::dataset::{assign_splits, compute_stats, write_dataset, ConversationRecord, DatasetStats, Split};
use crate::planner::{derive_seed, plan_conversation, ConversationPlan, PhenomenonKind};
use crate::prompts::Prompts;
use crate::provider::LlmProvider;
use crate::schema::{SchemaCatalog, SlotValuePool};
use crate::validation::{salvage, validate_record, Reason, Verdict, VerdictLine};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Validated(ConversationRecord),
    Salvaged(ConversationRecord),
    Discarded { reason: String },
}

/// Result of one conversation job.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub index: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub verdict: VerdictLine,
}

pub fn conversation_id(index: usize) -> String {
    format!("conv-{index:05}")
}

/// Plans conversation `index` of a run.
pub fn plan_one(
    index: usize,
    config: &RunConfig,
    catalog: &SchemaCatalog,
    pools: &[SlotValuePool],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Result<ConversationPlan> {
    let seed = derive_seed(config.seed, index as u64);
    plan_conversation(catalog, pools, seed, &config.planner, provider, prompts)
}

fn discard(index: usize, seed: u64, reason: &str, detail: String, turn_index: usize) -> Job {
    Job {
        index,
        seed,
        outcome: Outcome::Discarded { reason: reason.into() },
        verdict: VerdictLine {
            conversation_id: conversation_id(index),
            passed: false,
            reasons: vec![Reason {
                check: reason.into(),
                detail,
                turn_index,
            }],
        },
    }
}

/// Runs, checks and if need be salvages one planned conversation.
pub fn converse_one(
    index: usize,
    plan: Result<ConversationPlan>,
    config: &RunConfig,
    catalog: &Arc<SchemaCatalog>,
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Job {
    let fallback_seed = derive_seed(config.seed, index as u64);
    let plan = match plan {
        Ok(p) => p,
        Err(e) => return discard(index, fallback_seed, "planning", e.to_string(), 0),
    };
    let seed = plan.seed;
    let (mut record, salvaged) = match run_conversation(&plan, catalog, Providers::single(provider), prompts, &config.limits) {
        Ok(r) => (r, false),
        Err(aborted) => match salvage(&aborted, &plan, provider, prompts) {
            Some(r) => (r, true),
            None => return discard(index, seed, &aborted.reason, aborted.detail, aborted.turn_index),
        },
    };
    record.id = conversation_id(index);
    let verdict = validate_record(&record, catalog, None);
    if !verdict.passed {
        let Verdict { reasons, .. } = verdict;
        let mut job = discard(index, seed, &reasons[0].check, reasons[0].detail.clone(), reasons[0].turn_index);
        job.verdict.reasons = reasons;
        return job;
    }
    Job {
        index,
        seed,
        verdict: VerdictLine {
            conversation_id: record.id.clone(),
            passed: true,
            reasons: Vec::new(),
        },
        outcome: if salvaged { Outcome::Salvaged(record) } else { Outcome::Validated(record) },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub generated: usize,
    pub validated: usize,
    pub salvaged: usize,
    pub discarded: usize,
    pub discard_reasons: BTreeMap<String, usize>,
    pub splits: BTreeMap<Split, usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ConversationRecord>,
    pub verdicts: Vec<VerdictLine>,
    pub stats: DatasetStats,
    pub manifest: Manifest,
}

fn pool(concurrency: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Plans conversations `0..config.n`.
pub fn plan_all(
    config: &RunConfig,
    catalog: &SchemaCatalog,
    pools: &[SlotValuePool],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
) -> Result<Vec<Result<ConversationPlan>>> {
    config.validate()?;
    Ok(pool(config.concurrency)?.install(|| {
        (0..config.n)
            .into_par_iter()
            .map(|i| plan_one(i, config, catalog, pools, provider, prompts))
            .collect()
    }))
}

/// Generates, validates and splits a dataset. Jobs run in parallel; results
/// are collected in index order so output does not depend on scheduling.
/// With `plans`, those plans are used instead of planning afresh.
pub fn run_pipeline(
    config: &RunConfig,
    catalog: &Arc<SchemaCatalog>,
    pools: &[SlotValuePool],
    provider: &dyn LlmProvider,
    prompts: &Prompts,
    plans: Option<Vec<ConversationPlan>>,
) -> Result<RunOutput> {
    config.validate()?;
    for ood in &config.splits.ood_intents {
        catalog.require(ood)?;
    }
    let n = plans.as_ref().map_or(config.n, Vec::len);
    let jobs: Vec<Job> = pool(config.concurrency)?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let plan = match &plans {
                    Some(p) => Ok(p[i].clone()),
                    None => plan_one(i, config, catalog, pools, provider, prompts),
                };
                converse_one(i, plan, config, catalog, provider, prompts)
            })
            .collect()
    });

    let mut manifest = Manifest {
        root_seed: config.seed,
        config_hash: config.content_hash(),
        generated: jobs.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    let mut verdicts = Vec::new();
    for job in jobs {
        manifest.seeds.push(job.seed);
        verdicts.push(job.verdict);
        match job.outcome {
            Outcome::Validated(r) => {
                manifest.validated += 1;
                records.push(r);
            }
            Outcome::Salvaged(r) => {
                manifest.salvaged += 1;
                records.push(r);
            }
            Outcome::Discarded { reason } => {
                manifest.discarded += 1;
                *manifest.discard_reasons.entry(reason).or_default() += 1;
            }
        }
    }
    let records = assign_splits(records, catalog, &config.splits.ood_intents, config.splits.ratios, config.seed)?;
    for s in Split::ALL {
        manifest.splits.insert(s, records.iter().filter(|r| r.split == s).count());
    }
    let stats = compute_stats(&records, catalog);
    Ok(RunOutput {
        records,
        verdicts,
        stats,
        manifest,
    })
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))
}

fn write_json_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_plans(plans: &[ConversationPlan], path: &Path) -> Result<()> {
    write_json_lines(plans, path)
}

pub fn read_plans(path: &Path) -> Result<Vec<ConversationPlan>> {
    crate::dataset::parse_lines(&std::fs::read_to_string(path)?)
}

#[derive(Serialize)]
struct ReviewLine<'a> {
    conversation_id: &'a str,
    turn_index: usize,
    text: &'a str,
}

/// Writes `dataset.jsonl`, `verdicts.jsonl`, `stats.json` and
/// `manifest.json` into `dir`, plus `sarcasm_review.jsonl` when asked.
pub fn write_run(output: &RunOutput, dir: &Path, sarcasm_review: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_dataset(&output.records, &dir.join("dataset.jsonl"))?;
    write_json_lines(&output.verdicts, &dir.join("verdicts.jsonl"))?;
    std::fs::write(dir.join("stats.json"), pretty(&output.stats)? + "\n")?;
    std::fs::write(dir.join("manifest.json"), pretty(&output.manifest)? + "\n")?;
    if sarcasm_review {
        let mut lines = Vec::new();
        for r in &output.records {
            for (i, t) in r.turns.iter().enumerate() {
                if t.kind == TurnKind::User && t.phenomenon == Some(PhenomenonKind::Sarcasm) {
                    lines.push(ReviewLine {
                        conversation_id: &r.id,
                        turn_index: i,
                        text: t.text.as_deref().unwrap_or_default(),
                    });
                }
            }
        }
        write_json_lines(&lines, &dir.join("sarcasm_review.jsonl"))?;
    }
    Ok(())
}
