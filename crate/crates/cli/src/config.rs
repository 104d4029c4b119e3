//! Run configuration, read from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use promptsearch_core::backend::mock::MockSpec;
use promptsearch_core::backend::server::FaultRule;
use promptsearch_core::backend::{BackendEndpoint, RetryPolicy, Role};
use promptsearch_core::dataset::SamplingRule;
use promptsearch_core::mutation::{MutationSettings, MutatorKind};
use promptsearch_core::prompt::RenderStyle;
use promptsearch_core::self_training::SelfTrainConfig;
use promptsearch_core::text::TokenUnit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_in_flight() -> usize {
    8
}

/// What the search evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenomeMode {
    /// Prompt templates from the templates file, scored by the language model.
    #[default]
    Template,
    /// Plain strings scored by their length and grown by appending suffixes.
    /// Needs no model; used to trace the search itself.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpsSection {
    pub iterations: usize,
    pub top_k: usize,
    pub offspring_per_parent: usize,
    pub dedup: bool,
    pub genome: GenomeMode,
    pub mutator: MutatorKind,
    /// Templates forming the initial population; all of the task's when empty.
    pub template_ids: Vec<String>,
    /// Initial population in text mode.
    pub initial_prompts: Vec<String>,
    /// Suffixes appended by the text-mode mutator.
    pub suffixes: Vec<String>,
}

impl Default for GpsSection {
    fn default() -> Self {
        Self {
            iterations: 3,
            top_k: 3,
            offspring_per_parent: 2,
            dedup: true,
            genome: GenomeMode::Template,
            mutator: MutatorKind::Mock,
            template_ids: Vec::new(),
            initial_prompts: Vec::new(),
            suffixes: vec!["a".into(), "b".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainSection {
    pub tau: f64,
    pub tau_overrides: BTreeMap<String, f64>,
    pub epochs: usize,
    /// JSONL of `{task_id, source_id, segments, embedding?}`.
    pub unlabeled: Option<PathBuf>,
    /// Keep only the `k` pool items most similar to the task's training data.
    pub retrieve_k: Option<usize>,
    /// Template used for pseudo-labeling, per task; first of the task's otherwise.
    pub template_ids: BTreeMap<String, String>,
}

impl Default for SelfTrainSection {
    fn default() -> Self {
        let core = SelfTrainConfig::default();
        Self {
            tau: core.tau,
            tau_overrides: core.tau_overrides,
            epochs: core.epochs,
            unlabeled: None,
            retrieve_k: None,
            template_ids: BTreeMap::new(),
        }
    }
}

impl SelfTrainSection {
    pub fn core(&self) -> SelfTrainConfig {
        SelfTrainConfig {
            tau: self.tau,
            tau_overrides: self.tau_overrides.clone(),
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub backend: MockSpec,
    pub faults: Vec<FaultRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub registry: PathBuf,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Root of run directories. Not part of the run identity.
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
    #[serde(default = "default_n")]
    pub contamination_n: usize,
    #[serde(default)]
    pub token_unit: TokenUnit,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Keyed by role: `score`, `generate`, `translate`, `embed`.
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub gps: GpsSection,
    #[serde(default)]
    pub mutation: MutationSettings,
    #[serde(default)]
    pub meta_prompt: Option<PathBuf>,
    #[serde(default)]
    pub sampling: SamplingRule,
    #[serde(default)]
    pub render: RenderStyle,
    #[serde(default)]
    pub self_train: SelfTrainSection,
    #[serde(default)]
    pub mock: MockSection,
}

fn default_out() -> PathBuf {
    "runs".into()
}

fn default_n() -> usize {
    30
}

fn default_max_new_tokens() -> u32 {
    64
}

pub fn role_name(role: Role) -> &'static str {
    match role {
        Role::Score => "score",
        Role::Generate => "generate",
        Role::Translate => "translate",
        Role::Embed => "embed",
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// A parsed config plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// `out` came from the command line and resolves against the working
    /// directory.
    pub base_out_is_cli: bool,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            base_dir,
            base_out_is_cli: false,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Applies command-line overrides and checks the invariants.
    pub fn finalize(&mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), ConfigError> {
        if let Some(s) = seed {
            self.config.seeds = vec![s];
        }
        if let Some(o) = out {
            self.config.out = o;
            self.base_out_is_cli = true;
        }
        self.validate()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if c.seeds.is_empty() {
            return Err(ConfigError::Invalid(
                "at least one seed is required (seeds = [...] or --seed)".into(),
            ));
        }
        if c.contamination_n == 0 {
            return Err(ConfigError::Invalid("contamination_n must be >= 1".into()));
        }
        for (role, ep) in &c.endpoints {
            if !["score", "generate", "translate", "embed"].contains(&role.as_str()) {
                return Err(ConfigError::Invalid(format!("unknown endpoint role {role:?}")));
            }
            if ep.max_in_flight == 0 {
                return Err(ConfigError::Invalid(format!(
                    "endpoint {role}: max_in_flight must be >= 1"
                )));
            }
        }
        if c.gps.top_k == 0 || c.gps.offspring_per_parent == 0 {
            return Err(ConfigError::Invalid(
                "gps.top_k and gps.offspring_per_parent must be >= 1".into(),
            ));
        }
        if c.gps.genome == GenomeMode::Text && c.gps.suffixes.is_empty() {
            return Err(ConfigError::Invalid(
                "gps.suffixes must be non-empty in text mode".into(),
            ));
        }
        Ok(())
    }

    /// Declared endpoint for `role`.
    pub fn endpoint(&self, role: Role) -> Result<BackendEndpoint, ConfigError> {
        let name = role_name(role);
        let ep = self
            .config
            .endpoints
            .get(name)
            .ok_or_else(|| ConfigError::Invalid(format!("no [endpoints.{name}] declared (or pass --mock)")))?;
        Ok(BackendEndpoint {
            base_url: ep.base_url.clone(),
            role,
            timeout_ms: ep.timeout_ms,
            max_in_flight: ep.max_in_flight,
        })
    }

    /// Canonical JSON of the effective config.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    /// Short hex digest naming the run directory.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical_json()).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }

    /// `out/<hash>`, resolved against the config directory unless `--out`
    /// was given (then against the working directory).
    pub fn run_dir(&self) -> PathBuf {
        let root = if self.base_out_is_cli {
            self.config.out.clone()
        } else {
            self.resolve(&self.config.out)
        };
        root.join(self.hash())
    }
}
