use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{info, warn};

use dialogen::config::{ProviderKind, RunConfig};
use dialogen::dataset::{compute_stats, read_dataset};
use dialogen::eval::{evaluate, gold_predictions, read_predictions};
use dialogen::pipeline::{plan_all, read_plans, run_pipeline, write_plans, write_run};
use dialogen::prompts::Prompts;
use dialogen::schema::{build_catalog, read_catalog, read_pools, write_catalog, write_pools};
use dialogen::validation::{validate_record, Relabel, VerdictLine};
use dialogen::{Error, Result};

#[derive(Parser)]
#[command(name = "dialogen", version, about = "Generate, validate and score task-oriented dialogue data")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of conversations (overrides the config).
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Model provider (overrides the config).
    #[arg(long, global = true, value_parser = ["scripted", "remote"])]
    provider: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the intent catalog and slot value pools from descriptions.
    GenIntents {
        #[arg(long, default_value = "assets/intents/descriptions.txt")]
        descriptions: PathBuf,
        #[arg(long)]
        denylist: Option<PathBuf>,
        /// Scripted stage-1 replies (overrides `provider.script`).
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Plan conversations and write `plans.jsonl`.
    Plan,
    /// Generate, validate and split a dataset.
    Generate {
        /// Use plans from a previous `plan` run.
        #[arg(long)]
        plans: Option<PathBuf>,
    },
    /// Re-run structural checks on a dataset and write `verdicts.jsonl`.
    Validate {
        dataset: PathBuf,
        /// Also re-label every system step with the provider.
        #[arg(long)]
        relabel: bool,
    },
    /// Print dataset statistics.
    Stats {
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Score predictions (or another dataset) against gold.
    Eval {
        gold: PathBuf,
        predictions: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.n {
        config.n = n;
    }
    if let Some(p) = &cli.provider {
        config.provider.kind = p.parse::<ProviderKind>()?;
    }
    if let Some(out) = &cli.out {
        config.paths.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn prompts(config: &RunConfig) -> Result<Prompts> {
    match &config.paths.prompts {
        Some(dir) => Prompts::with_overrides(dir),
        None => Ok(Prompts::builtin()),
    }
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli)?;
    let out = &config.paths.out;
    match &cli.command {
        Command::GenIntents { descriptions, denylist, script } => {
            let mut provider_config = config.provider.clone();
            if script.is_some() {
                provider_config.script = script.clone();
            }
            let provider = provider_config.build()?;
            let denylist = match denylist {
                Some(p) => read_list(p)?,
                None => Vec::new(),
            };
            let build = build_catalog(&read_list(descriptions)?, provider.as_ref(), &prompts(&config)?, &denylist, config.limits.retries);
            for (desc, why) in &build.skipped {
                warn!("skipped `{desc}`: {why}");
            }
            std::fs::create_dir_all(out)?;
            write_catalog(&build.catalog, &out.join("catalog.jsonl"))?;
            write_pools(&build.pools, &out.join("pools.jsonl"))?;
            println!(
                "{} intents ({} transactional, {} query), {} skipped",
                build.catalog.intents.len(),
                build.catalog.transactional().count(),
                build.catalog.queries().count(),
                build.skipped.len()
            );
        }
        Command::Plan => {
            config.check_inputs()?;
            let catalog = read_catalog(&config.paths.catalog)?;
            let pools = read_pools(&config.paths.pools)?;
            let provider = config.provider.build()?;
            let mut plans = Vec::new();
            let mut failed = 0;
            for (i, plan) in plan_all(&config, &catalog, &pools, provider.as_ref(), &prompts(&config)?)?.into_iter().enumerate() {
                match plan {
                    Ok(p) => plans.push(p),
                    Err(e) => {
                        warn!("plan {i}: {e}");
                        failed += 1;
                    }
                }
            }
            std::fs::create_dir_all(out)?;
            write_plans(&plans, &out.join("plans.jsonl"))?;
            println!("{} plans written, {failed} failed", plans.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Generate { plans } => {
            config.check_inputs()?;
            let catalog = Arc::new(read_catalog(&config.paths.catalog)?);
            let pools = read_pools(&config.paths.pools)?;
            let provider = config.provider.build()?;
            let plans = plans.as_deref().map(read_plans).transpose()?;
            let output = run_pipeline(&config, &catalog, &pools, provider.as_ref(), &prompts(&config)?, plans)?;
            write_run(&output, out, config.limits.validation.review_sarcasm)?;
            let m = &output.manifest;
            info!("wrote {}", out.display());
            println!(
                "generated {} validated {} salvaged {} discarded {}",
                m.generated, m.validated, m.salvaged, m.discarded
            );
            if m.discarded > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Validate { dataset, relabel } => {
            let catalog = Arc::new(read_catalog(&config.paths.catalog)?);
            let records = read_dataset(dataset)?;
            let provider = config.provider.build()?;
            let prompts = prompts(&config)?;
            let relabel = relabel.then(|| Relabel {
                provider: provider.as_ref(),
                prompts: &prompts,
                config: &config.limits.validation,
            });
            let verdicts: Vec<VerdictLine> = records
                .iter()
                .map(|r| {
                    let v = validate_record(r, &catalog, relabel.as_ref());
                    VerdictLine {
                        conversation_id: r.id.clone(),
                        passed: v.passed,
                        reasons: v.reasons,
                    }
                })
                .collect();
            let failed = verdicts.iter().filter(|v| !v.passed).count();
            std::fs::create_dir_all(out)?;
            let mut text = String::new();
            for v in &verdicts {
                text += &serde_json::to_string(v).map_err(|e| Error::Parse(e.to_string()))?;
                text.push('\n');
            }
            std::fs::write(out.join("verdicts.jsonl"), text)?;
            println!("{} passed, {failed} failed", verdicts.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Stats { dataset, json } => {
            let catalog = read_catalog(&config.paths.catalog)?;
            let stats = compute_stats(&read_dataset(dataset)?, &catalog);
            if *json {
                println!("{}", to_json(&stats)?);
            } else {
                print!("{stats}");
            }
        }
        Command::Eval { gold, predictions, json } => {
            let gold = read_dataset(gold)?;
            let predictions = match read_predictions(predictions) {
                Ok(p) => p,
                Err(_) => gold_predictions(&read_dataset(predictions)?),
            };
            let report = evaluate(&gold, &predictions)?;
            if *json {
                println!("{}", to_json(&report)?);
            } else {
                print!("{report}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}
