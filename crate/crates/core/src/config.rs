//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::Limits;
use crate::planner::PlannerConfig;
use crate::provider::{LlmProvider, RemoteConfig, RemoteProvider, ScriptedProvider};
use crate::simulator::SimulatedProvider;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Scripted,
    Remote,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "remote" => Ok(Self::Remote),
            other => Err(Error::Config(format!("unknown provider `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Script file for the scripted provider; unmatched calls fall through
    /// to the simulator.
    pub script: Option<PathBuf>,
    /// Simulator stage-10 noise rate.
    pub label_noise: f64,
    pub remote: RemoteConfig,
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Box<dyn LlmProvider>> {
        Ok(match self.kind {
            ProviderKind::Scripted => {
                let sim = SimulatedProvider::with_label_noise(self.label_noise);
                let scripted = match &self.script {
                    Some(path) => ScriptedProvider::from_file(path)?,
                    None => ScriptedProvider::default(),
                };
                Box::new(scripted.with_fallback(sim))
            }
            ProviderKind::Remote => Box::new(RemoteProvider::new(self.remote.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, dev and test shares of the non-OOD conversations.
    pub ratios: [f64; 3],
    /// Intents held out for the unseen-intent test split.
    pub ood_intents: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            ood_intents: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub catalog: PathBuf,
    pub pools: PathBuf,
    /// Directory of template overrides.
    pub prompts: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            catalog: "assets/catalog/catalog.jsonl".into(),
            pools: "assets/catalog/pools.jsonl".into(),
            prompts: None,
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every conversation derives its own seed from it.
    pub seed: u64,
    pub n: usize,
    /// Simultaneous conversation jobs; 0 means one per core.
    pub concurrency: usize,
    pub provider: ProviderConfig,
    pub planner: PlannerConfig,
    pub limits: Limits,
    pub splits: SplitConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 100,
            concurrency: 0,
            provider: ProviderConfig::default(),
            planner: PlannerConfig::default(),
            limits: Limits::default(),
            splits: SplitConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a TOML file; relative paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.catalog);
        fix(&mut self.paths.pools);
        fix(&mut self.paths.out);
        if let Some(p) = self.paths.prompts.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.script.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        let r = self.splits.ratios;
        if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split ratios {r:?} must lie in [0, 1] and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.provider.label_noise) {
            return Err(Error::Config("label_noise must be in [0, 1]".into()));
        }
        if self.limits.max_turns == 0 || self.limits.max_system_steps == 0 {
            return Err(Error::Config("turn limits must be positive".into()));
        }
        if self.limits.validation.self_consistency_trials == 0 {
            return Err(Error::Config("self_consistency_trials must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that input files exist.
    pub fn check_inputs(&self) -> Result<()> {
        let mut inputs = vec![&self.paths.catalog, &self.paths.pools];
        inputs.extend(self.paths.prompts.as_ref());
        inputs.extend(self.provider.script.as_ref());
        match inputs.into_iter().find(|p| !p.exists()) {
            Some(missing) => Err(Error::Config(format!("{} does not exist", missing.display()))),
            None => Ok(()),
        }
    }

    /// SHA-256 over the settings that affect generated content. Paths and
    /// concurrency are left out.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.concurrency = 0;
        c.provider.script = c.provider.script.as_ref().and_then(|p| p.file_name().map(PathBuf::from));
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
