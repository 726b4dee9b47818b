//! End-to-end query processing: perception, routing, fusion, deliberation
//! and scoring, plus the distillation driver that reuses the same buffers.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use thiserror::Error;
use tracing::{info, warn};

use crate::config::{ConfigError, EngineConfig, TextEmbedderConfig};
use crate::deliberation::{DeliberationError, Deliberator, PageDecision, QueryView};
use crate::domain::ImageId;
use crate::embedder::{EmbedError, FixtureEmbedder, SidecarEmbedder, TextEmbedder};
use crate::embedstore::{load_embv1, EmbedStoreError, EmbeddingMatrix};
use crate::evalbench::datasets::{load_dataset, Dataset, DatasetError, TripletRecord};
use crate::evalbench::oracle::{oracle_gateway, OracleJudge};
use crate::evalbench::report::{QueryMetrics, QueryRecord, RunReport, RunSettings};
use crate::evalbench::synthetic::{SyntheticBenchmark, SyntheticError};
use crate::experience::{
    run_distillation, AttributeTable, DistillOutcome, ExperienceError, ExperienceLibrary, SandboxSource,
};
use crate::llm::{
    ChatCompletionProvider, Gateway, GatewayBuilder, LlmProvider, LlmSession, MockProvider, RetryPolicy, Role,
};
use crate::perception::Workers;
use crate::prompts::{PromptError, PromptSet};
use crate::proxies::{ProxyError, ProxyStore};
use crate::router::{fuse, route_intent, Branches, CandidateBuffer, FusionMode, IntentWeights};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("embeddings: {0}")]
    Store(#[from] EmbedStoreError),
    #[error("proxies: {0}")]
    Proxy(#[from] ProxyError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("synthetic benchmark: {0}")]
    Synthetic(#[from] SyntheticError),
    #[error("text embedder: {0}")]
    Embed(#[from] EmbedError),
    #[error("prompts: {0}")]
    Prompt(#[from] PromptError),
    #[error("deliberation: {0}")]
    Deliberation(#[from] DeliberationError),
    #[error("experience: {0}")]
    Experience(#[from] ExperienceError),
    #[error("{missing} gallery images have no embedding (first: {first})")]
    Coverage { missing: usize, first: String },
    #[error("environment variable {0} (llm.api_key_env) is not set")]
    MissingApiKey(String),
    #[error("live tier: role {role} has no {field} (set llm.{field} or llm.roles.{role}.{field})")]
    Endpoint { role: Role, field: &'static str },
}

/// Which providers answer LLM calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProviderTier {
    /// Deterministic stand-in for every role.
    Mock,
    /// Ground-truth judge and router, mock elsewhere; `error_rate` is the
    /// judge's per-page error at the reference page size.
    Oracle { error_rate: f64 },
    /// HTTP chat-completion endpoints from the config.
    Live,
}

impl ProviderTier {
    pub fn label(&self) -> &'static str {
        match self {
            ProviderTier::Mock => "mock",
            ProviderTier::Oracle { .. } => "oracle",
            ProviderTier::Live => "live",
        }
    }

    pub fn deterministic(&self) -> bool {
        !matches!(self, ProviderTier::Live)
    }
}

/// Everything a run reads from disk.
pub struct Resources {
    pub gallery: EmbeddingMatrix,
    pub references: Option<EmbeddingMatrix>,
    pub proxies: ProxyStore,
    pub prompts: Arc<PromptSet>,
    pub dataset: Dataset,
    pub embedder: Arc<dyn TextEmbedder>,
    pub attributes: Option<AttributeTable>,
    pub experience: ExperienceLibrary,
}

impl Resources {
    pub fn load(cfg: &EngineConfig) -> Result<Self, PipelineError> {
        let gallery = load_embv1(&cfg.embeddings.gallery)?;
        let references = cfg.embeddings.reference.as_ref().map(load_embv1).transpose()?;
        let proxies = ProxyStore::load(&cfg.proxies)?;
        let prompts = match &cfg.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::default(),
        };
        let dataset = load_dataset(
            cfg.dataset.kind,
            &cfg.dataset.annotations,
            cfg.dataset.gallery.as_deref(),
            cfg.dataset.split,
        )?;
        let missing: Vec<&ImageId> = dataset.gallery.iter().filter(|id| !gallery.contains(id)).collect();
        if let Some(first) = missing.first() {
            return Err(PipelineError::Coverage {
                missing: missing.len(),
                first: first.to_string(),
            });
        }
        let (embedder, attributes): (Arc<dyn TextEmbedder>, _) = match &cfg.text_embedder {
            TextEmbedderConfig::Synthetic { metadata } => {
                let bench = SyntheticBenchmark::load(metadata)?;
                (Arc::new(bench.text_embedder()), Some(bench.attribute_table()))
            }
            TextEmbedderConfig::Fixture { path } => (Arc::new(FixtureEmbedder::load(path)?), None),
            TextEmbedderConfig::Sidecar {
                base_url,
                model_tag,
                dim,
            } => (
                Arc::new(SidecarEmbedder::new(
                    base_url,
                    model_tag.clone(),
                    dim.or(Some(gallery.dim())),
                )),
                None,
            ),
        };
        let experience = match &cfg.experience.path {
            Some(p) if p.exists() => ExperienceLibrary::load(p)?,
            _ => ExperienceLibrary::new(cfg.experience.capacity),
        };
        Ok(Self {
            gallery,
            references,
            proxies,
            prompts: Arc::new(prompts),
            dataset,
            embedder,
            attributes,
            experience,
        })
    }

    /// In-memory resources for a generated benchmark.
    pub fn from_synthetic(bench: &SyntheticBenchmark) -> Self {
        Self {
            gallery: bench.embeddings.clone(),
            references: None,
            proxies: bench.proxies.clone(),
            prompts: Arc::new(PromptSet::default()),
            dataset: bench.dataset(),
            embedder: Arc::new(bench.text_embedder()),
            attributes: Some(bench.attribute_table()),
            experience: ExperienceLibrary::new(crate::experience::DEFAULT_CAPACITY),
        }
    }

    pub fn targets(&self) -> HashMap<String, BTreeSet<ImageId>> {
        self.dataset
            .triplets
            .iter()
            .map(|t| (t.query_id.clone(), t.targets.clone()))
            .collect()
    }
}

fn configure(builder: GatewayBuilder, cfg: &EngineConfig) -> Gateway {
    builder
        .concurrency_bound(cfg.llm.concurrency_bound)
        .retry(RetryPolicy {
            retries: cfg.llm.retries,
            base_backoff: Duration::from_millis(cfg.llm.base_backoff_ms),
            max_backoff: Duration::from_millis(cfg.llm.max_backoff_ms),
        })
        .timeout(Duration::from_secs(cfg.llm.timeout_secs))
        .build()
}

pub fn build_gateway(cfg: &EngineConfig, tier: ProviderTier, resources: &Resources) -> Result<Gateway, PipelineError> {
    let builder = match tier {
        ProviderTier::Mock => Gateway::builder().fallback(Arc::new(MockProvider::new(cfg.seed))),
        ProviderTier::Oracle { error_rate } => {
            let judge = OracleJudge::new(resources.targets()).with_error(error_rate, cfg.seed);
            oracle_gateway(judge, cfg.seed)
        }
        ProviderTier::Live => {
            let mut b = Gateway::builder();
            for role in Role::ALL {
                let ep = cfg.llm.endpoint(role);
                let base_url = ep.base_url.ok_or(PipelineError::Endpoint {
                    role,
                    field: "base_url",
                })?;
                let model = ep.model.ok_or(PipelineError::Endpoint { role, field: "model" })?;
                let key = match ep.api_key_env {
                    Some(var) => Some(std::env::var(&var).map_err(|_| PipelineError::MissingApiKey(var))?),
                    None => None,
                };
                let provider: Arc<dyn LlmProvider> = Arc::new(ChatCompletionProvider::new(&base_url, model, key));
                b = b.provider(role, provider);
            }
            b
        }
    };
    Ok(configure(builder, cfg))
}

/// Fused candidates of one query and what produced them.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub buffer: CandidateBuffer,
    pub hypothesis: Option<String>,
    pub router_fallback: bool,
    pub failures: Vec<String>,
}

pub struct Engine {
    config: EngineConfig,
    tier: ProviderTier,
    resources: Arc<Resources>,
    session: LlmSession,
    workers: Workers,
    deliberator: Deliberator,
    multi_gt: bool,
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        tier: ProviderTier,
        resources: Arc<Resources>,
        gateway: Arc<Gateway>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let workers = Workers::new(
            Arc::clone(&resources.prompts),
            Arc::clone(&resources.embedder),
            config.perception.clone(),
        );
        let deliberator = Deliberator::new(Arc::clone(&resources.prompts), config.deliberation.to_config())?;
        let multi_gt = config.dataset.multi_gt.unwrap_or_else(|| resources.dataset.multi_gt());
        Ok(Self {
            config,
            tier,
            resources,
            session: LlmSession::new(gateway),
            workers,
            deliberator,
            multi_gt,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn resources(&self) -> &Arc<Resources> {
        &self.resources
    }

    /// Queries of the configured split, in file order, at most `limit`.
    pub fn queries(&self, limit: Option<usize>) -> Vec<&TripletRecord> {
        self.resources
            .dataset
            .triplets
            .iter()
            .filter(|t| t.split == self.config.dataset.split)
            .take(limit.unwrap_or(usize::MAX))
            .collect()
    }

    /// Perception, routing and fusion for one query.
    pub async fn retrieve(&self, session: &LlmSession, triplet: &TripletRecord) -> Result<Retrieval, String> {
        let query = triplet.to_query().map_err(|e| e.to_string())?;
        let res = &self.resources;
        let out = self
            .workers
            .run(session, &query, &res.gallery, res.references.as_ref(), &res.proxies)
            .await
            .map_err(|e| e.to_string())?;
        let failures: Vec<String> = out
            .failures
            .iter()
            .map(|f| format!("{:?}: {}", f.view, f.reason))
            .collect();
        let (weights, router_fallback) = match self.config.fusion.mode {
            FusionMode::Ipr => {
                let r = route_intent(session, &res.prompts, &query.mod_text)
                    .await
                    .map_err(|e| e.to_string())?;
                (r.weights, r.fallback)
            }
            FusionMode::Static => (self.config.fusion.static_weights, false),
            FusionMode::Avg => (IntentWeights::UNIFORM, false),
        };
        let buffer = fuse(
            Branches {
                pred: &out.pred,
                key: &out.key,
                vis: &out.vis,
            },
            &weights,
            &self.config.fusion,
        )
        .map_err(|e| {
            let mut all = failures.clone();
            all.push(e.to_string());
            all.join("; ")
        })?;
        Ok(Retrieval {
            buffer,
            hypothesis: out.hypothesis.map(|h| h.text),
            router_fallback,
            failures,
        })
    }

    pub async fn run_query(&self, triplet: &TripletRecord) -> QueryRecord {
        let session = self.session.fork();
        let subset = triplet.subset.as_deref();
        let score = |ranking: &[ImageId]| QueryMetrics::score(ranking, &triplet.targets, subset);
        let mut record = QueryRecord {
            query_id: triplet.query_id.clone(),
            targets: triplet.targets.clone(),
            final_ranking: Vec::new(),
            fused_ranking: Vec::new(),
            metrics: score(&[]),
            fused_metrics: score(&[]),
            weights: IntentWeights::UNIFORM.as_array(),
            router_fallback: false,
            tokens_out: 0,
            deliberation_tokens_out: 0,
            decisions: Vec::<PageDecision>::new(),
            failures: Vec::new(),
            failed: false,
        };
        let retrieval = match self.retrieve(&session, triplet).await {
            Ok(r) => r,
            Err(reason) => {
                warn!(query = %triplet.query_id, %reason, "query failed before fusion");
                record.failures.push(reason);
                record.failed = true;
                record.tokens_out = session.tokens_out();
                return record;
            }
        };
        record.fused_ranking = retrieval.buffer.ids();
        record.fused_metrics = score(&record.fused_ranking);
        record.weights = retrieval.buffer.weights_used.as_array();
        record.router_fallback = retrieval.router_fallback;
        record.failures = retrieval.failures;

        let res = &self.resources;
        let ref_proxy = res.proxies.text(&triplet.ref_image).unwrap_or_default();
        let view = QueryView {
            query_id: &triplet.query_id,
            ref_proxy,
            mod_text: &triplet.mod_text,
            hypothesis: retrieval.hypothesis.as_deref(),
        };
        let strategy = self.deliberator.strategy_for(Some(self.multi_gt));
        match self
            .deliberator
            .deliberate(
                strategy,
                &session,
                &view,
                &retrieval.buffer,
                &res.proxies,
                &res.experience,
            )
            .await
        {
            Ok(result) => {
                record.final_ranking = result.final_ranking.ids().cloned().collect();
                record.deliberation_tokens_out = result.total_tokens_out;
                record.decisions = result.decisions;
            }
            Err(e) => {
                warn!(query = %triplet.query_id, error = %e, "deliberation failed, keeping fused order");
                record.failures.push(e.to_string());
                record.failed = true;
                record.final_ranking = record.fused_ranking.clone();
            }
        }
        record.metrics = score(&record.final_ranking);
        record.tokens_out = session.tokens_out();
        record
    }

    pub fn settings(&self) -> RunSettings {
        let mode = match self.config.fusion.mode {
            FusionMode::Ipr => "ipr",
            FusionMode::Static => "static",
            FusionMode::Avg => "avg",
        };
        RunSettings {
            tier: self.tier.label().to_string(),
            seed: self.config.seed,
            fusion_mode: mode.to_string(),
            tau: self.config.fusion.tau,
            k: self.config.fusion.k,
            stages: self.config.deliberation.stages,
            strategy_override: self
                .config
                .deliberation
                .strategy_override
                .map(|s| format!("{s:?}").to_lowercase()),
            dataset: Some(
                serde_json::to_value(self.config.dataset.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
            ),
        }
    }

    /// Runs every selected query; results keep dataset order.
    pub async fn run(&self, limit: Option<usize>) -> RunReport {
        let started = Instant::now();
        let queries = self.queries(limit);
        info!(queries = queries.len(), tier = self.tier.label(), "run started");
        let records: Vec<QueryRecord> = stream::iter(queries)
            .map(|t| self.run_query(t))
            .buffered(self.config.run.query_concurrency)
            .collect()
            .await;
        let wall = (!self.tier.deterministic()).then(|| started.elapsed().as_secs_f64());
        RunReport::new(self.settings(), records, wall)
    }

    /// Fused buffers and imagined targets for the selected queries.
    pub async fn candidate_buffers(
        &self,
        limit: Option<usize>,
    ) -> (HashMap<String, CandidateBuffer>, HashMap<String, String>) {
        let queries = self.queries(limit);
        let results: Vec<(String, Result<Retrieval, String>)> = stream::iter(queries)
            .map(|t| async move { (t.query_id.clone(), self.retrieve(&self.session.fork(), t).await) })
            .buffered(self.config.run.query_concurrency)
            .collect()
            .await;
        let mut buffers = HashMap::new();
        let mut hypotheses = HashMap::new();
        for (qid, r) in results {
            match r {
                Ok(r) => {
                    if let Some(h) = r.hypothesis {
                        hypotheses.insert(qid.clone(), h);
                    }
                    buffers.insert(qid, r.buffer);
                }
                Err(reason) => warn!(query = %qid, %reason, "no buffer for distillation"),
            }
        }
        (buffers, hypotheses)
    }

    /// Distills an experience library from the selected labeled queries.
    pub async fn distill(
        &self,
        limit: Option<usize>,
        persist_to: Option<&Path>,
    ) -> Result<DistillOutcome, PipelineError> {
        let (buffers, hypotheses) = self.candidate_buffers(limit).await;
        let queries: Vec<_> = self
            .queries(limit)
            .into_iter()
            .filter_map(|t| t.to_query().ok())
            .collect();
        let res = &self.resources;
        let source = SandboxSource {
            queries: &queries,
            buffers: &buffers,
            proxies: &res.proxies,
            hypotheses: &hypotheses,
            attributes: res.attributes.as_ref(),
        };
        let initial = ExperienceLibrary::new(self.config.experience.capacity);
        Ok(run_distillation(
            &self.config.experience.distill,
            &source,
            &self.session.fork(),
            &res.prompts,
            initial,
            persist_to,
        )
        .await?)
    }
}
