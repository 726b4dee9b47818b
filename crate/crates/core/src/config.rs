//! Engine configuration file (JSON). Unknown keys are rejected and relative
//! paths resolve against the directory holding the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deliberation::{DeliberationConfig, Strategy, DEFAULT_EXPERIENCE_IN_PROMPT, DEFAULT_STAGES};
use crate::evalbench::datasets::{DatasetKind, Split};
use crate::experience::{DistillConfig, DEFAULT_CAPACITY};
use crate::llm::Role;
use crate::perception::PerceptionConfig;
use crate::router::FusionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingPaths {
    pub gallery: PathBuf,
    /// Separate reference-image vectors; the gallery file is used when absent.
    #[serde(default)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextEmbedderConfig {
    /// Attribute-word reader of a synthetic benchmark's metadata file.
    Synthetic { metadata: PathBuf },
    Sidecar {
        base_url: String,
        model_tag: String,
        #[serde(default)]
        dim: Option<usize>,
    },
    /// Precomputed text vectors keyed by exact text.
    Fixture { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeliberationSection {
    /// Number of reasoning stages (pages); 0 disables deliberation.
    pub stages: usize,
    pub strategy_override: Option<Strategy>,
    pub experience_in_prompt: usize,
}

impl Default for DeliberationSection {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGES,
            strategy_override: None,
            experience_in_prompt: DEFAULT_EXPERIENCE_IN_PROMPT,
        }
    }
}

impl DeliberationSection {
    pub fn to_config(&self) -> DeliberationConfig {
        DeliberationConfig {
            stages: self.stages,
            strategy_override: self.strategy_override,
            experience_in_prompt: self.experience_in_prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperienceSection {
    /// Library file read by `run` and written by `distill`.
    pub path: Option<PathBuf>,
    pub capacity: usize,
    pub distill: DistillConfig,
}

impl Default for ExperienceSection {
    fn default() -> Self {
        Self {
            path: None,
            capacity: DEFAULT_CAPACITY,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoleEndpoint {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub concurrency_bound: usize,
    pub retries: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Per-role overrides of the endpoint fields above.
    pub roles: BTreeMap<Role, RoleEndpoint>,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            concurrency_bound: 8,
            retries: 3,
            base_backoff_ms: 250,
            max_backoff_ms: 8000,
            timeout_secs: 120,
            base_url: None,
            model: None,
            api_key_env: None,
            roles: BTreeMap::new(),
        }
    }
}

impl LlmSection {
    /// Endpoint for `role`: role override first, then the shared fields.
    pub fn endpoint(&self, role: Role) -> RoleEndpoint {
        let r = self.roles.get(&role).cloned().unwrap_or_default();
        RoleEndpoint {
            base_url: r.base_url.or_else(|| self.base_url.clone()),
            model: r.model.or_else(|| self.model.clone()),
            api_key_env: r.api_key_env.or_else(|| self.api_key_env.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub annotations: PathBuf,
    #[serde(default)]
    pub gallery: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
    /// Overrides the task family's multi-target default.
    #[serde(default)]
    pub multi_gt: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Queries processed concurrently.
    pub query_concurrency: usize,
    /// A run with a larger share of failed queries exits with failure.
    pub max_failure_rate: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            query_concurrency: 8,
            max_failure_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub seed: u64,
    pub embeddings: EmbeddingPaths,
    pub proxies: PathBuf,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    pub text_embedder: TextEmbedderConfig,
    #[serde(default)]
    pub perception: PerceptionConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub deliberation: DeliberationSection,
    #[serde(default)]
    pub experience: ExperienceSection,
    #[serde(default)]
    pub llm: LlmSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub run: RunSection,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl EngineConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })
    }

    /// Reads, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json(&raw, &path.display().to_string())?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        rebase(base, &mut self.embeddings.gallery);
        if let Some(p) = &mut self.embeddings.reference {
            rebase(base, p);
        }
        rebase(base, &mut self.proxies);
        if let Some(p) = &mut self.prompts_dir {
            rebase(base, p);
        }
        match &mut self.text_embedder {
            TextEmbedderConfig::Synthetic { metadata } => rebase(base, metadata),
            TextEmbedderConfig::Fixture { path } => rebase(base, path),
            TextEmbedderConfig::Sidecar { .. } => {}
        }
        if let Some(p) = &mut self.experience.path {
            rebase(base, p);
        }
        rebase(base, &mut self.dataset.annotations);
        if let Some(p) = &mut self.dataset.gallery {
            rebase(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.fusion
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.deliberation
            .to_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.experience
            .distill
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.experience.capacity == 0 {
            return invalid("experience.capacity must be at least 1".into());
        }
        if self.perception.top_n == 0 {
            return invalid("perception.top_n must be at least 1".into());
        }
        if self.perception.top_n < self.fusion.k {
            return invalid(format!(
                "perception.top_n ({}) must be >= fusion.k ({})",
                self.perception.top_n, self.fusion.k
            ));
        }
        if self.llm.concurrency_bound == 0 {
            return invalid("llm.concurrency_bound must be at least 1".into());
        }
        if self.run.query_concurrency == 0 {
            return invalid("run.query_concurrency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.run.max_failure_rate) {
            return invalid(format!(
                "run.max_failure_rate must be in [0, 1], got {}",
                self.run.max_failure_rate
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::FusionMode;

    const MINIMAL: &str = r#"{
        "embeddings": {"gallery": "emb.embv1"},
        "proxies": "proxies.jsonl",
        "text_embedder": {"kind": "synthetic", "metadata": "synthetic.json"},
        "dataset": {"kind": "generic_jsonl", "annotations": "triplets.jsonl"}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = EngineConfig::from_json(MINIMAL, "t").unwrap();
        assert_eq!(c.fusion.tau, 60.0);
        assert_eq!(c.fusion.k, 50);
        assert_eq!(c.fusion.mode, FusionMode::Ipr);
        assert_eq!(c.deliberation.stages, 2);
        assert_eq!(c.run.max_failure_rate, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("\"proxies\"", "\"fusion\": {\"tua\": 60}, \"proxies\"");
        assert!(matches!(
            EngineConfig::from_json(&typo, "t"),
            Err(ConfigError::Parse { .. })
        ));
        let top = MINIMAL.replace("\"proxies\"", "\"sed\": 1, \"proxies\"");
        assert!(EngineConfig::from_json(&top, "t").is_err());
    }

    #[test]
    fn paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("engine.json");
        fs::write(&p, MINIMAL).unwrap();
        let c = EngineConfig::load(&p).unwrap();
        assert_eq!(c.embeddings.gallery, dir.path().join("emb.embv1"));
        assert_eq!(c.dataset.annotations, dir.path().join("triplets.jsonl"));
    }

    #[test]
    fn invalid_values_are_reported() {
        let c = MINIMAL.replace("\"proxies\"", "\"fusion\": {\"k\": 1}, \"proxies\"");
        let c = EngineConfig::from_json(&c, "t").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn role_endpoint_overrides_shared_fields() {
        let mut l = LlmSection {
            base_url: Some("http://a".into()),
            model: Some("m".into()),
            ..Default::default()
        };
        l.roles.insert(
            Role::DeJudge,
            RoleEndpoint {
                model: Some("judge".into()),
                ..Default::default()
            },
        );
        assert_eq!(l.endpoint(Role::DeJudge).model.as_deref(), Some("judge"));
        assert_eq!(l.endpoint(Role::DeJudge).base_url.as_deref(), Some("http://a"));
        assert_eq!(l.endpoint(Role::SiWorker).model.as_deref(), Some("m"));
    }
}
