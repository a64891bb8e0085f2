//! End-to-end runs: outline, retrieval tree, bottom-up synthesis, refine
//! loop, plus the configuration and artifacts around them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, CorpusError, CorpusStore, EmbeddingCache, HashEmbedder, DEFAULT_EMBED_DIM};
use crate::evaluation::{run_benchmark, BenchmarkReport, DatasetItem, ItemAnswer, LlmJudge, Metric, Skipped};
use crate::exec::ExecMode;
use crate::llm::{
    CallLog, CallRecord, CallScope, ChatBackend, CompletionParams, FixtureBackend, HttpBackend,
    HttpBackendConfig, LlmClient, Pricing, ResponseCache, RetryPolicy, UsageTotals,
};
use crate::planner::{generate_outline, Outline};
use crate::reasoning::ReasoningConfig;
use crate::retrieval_tree::{
    run_adaptive_retrieval, scope_label, synthesize_tree, RetrievalNode, RetrievalTree, TreeConfig,
    TreeContext, TreeError,
};
use crate::sim::SimModel;
use crate::synthesis::{refine_loop, CitedAnswer, Feedback, DEFAULT_MAX_REFINE_ROUNDS};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
/// A mock fixture directory holding this file runs the simulated model.
pub const SIM_FIXTURE: &str = "sim.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub endpoint: String,
    pub model_id: String,
    /// Environment variable holding the API key; the key itself is never
    /// stored in config or traces.
    pub api_key_env: String,
    pub concurrency: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub pricing: Pricing,
    pub retry: RetryPolicy,
}

impl Default for BackendSettings {
    fn default() -> Self {
        let http = HttpBackendConfig::default();
        let params = CompletionParams::default();
        Self {
            endpoint: http.endpoint,
            model_id: params.model_id,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            concurrency: crate::llm::DEFAULT_CONCURRENCY,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            timeout_secs: http.timeout_secs,
            pricing: http.pricing,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub backend: BackendSettings,
    pub tree: TreeConfig,
    /// `tree.top_k_papers` overrides `reasoning.top_k`.
    pub reasoning: ReasoningConfig,
    pub max_refine_rounds: usize,
    pub embed_dim: usize,
    pub mode: ExecMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backend: BackendSettings::default(),
            tree: TreeConfig::default(),
            reasoning: ReasoningConfig::default(),
            max_refine_rounds: DEFAULT_MAX_REFINE_ROUNDS,
            embed_dim: DEFAULT_EMBED_DIM,
            mode: ExecMode::default(),
            cache_dir: None,
            corpus_path: None,
            trace_path: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("cache: {0}")]
    Cache(String),
    #[error("outline: {0}")]
    Outline(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl EngineConfig {
    /// Reads a JSON config; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let raw = fs::read_to_string(path).map_err(|e| EngineError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config: EngineConfig = serde_json::from_str(&raw).map_err(|e| EngineError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.cache_dir, &mut config.corpus_path, &mut config.trace_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.tree.validate().map_err(|e| EngineError::Invalid(e.to_string()))?;
        if self.backend.concurrency == 0 {
            return Err(EngineError::Invalid("backend.concurrency must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(EngineError::Invalid("embed_dim must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.backend.temperature) {
            return Err(EngineError::Invalid("backend.temperature must be within 0..=2".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let raw = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&raw))
    }

    pub fn embedding_cache_path(&self) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join("embeddings.json"))
    }

    pub fn response_cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join("responses"))
    }

    pub fn params(&self) -> CompletionParams {
        CompletionParams {
            model_id: self.backend.model_id.clone(),
            temperature: self.backend.temperature,
            max_tokens: self.backend.max_tokens,
        }
    }
}

/// Live backend; the API key comes from `backend.api_key_env`.
pub fn http_backend(settings: &BackendSettings) -> Result<HttpBackend, EngineError> {
    let api_key = std::env::var(&settings.api_key_env).ok().filter(|k| !k.is_empty());
    if api_key.is_none() {
        return Err(EngineError::Invalid(format!(
            "no API key: set {} or run with a mock fixture directory",
            settings.api_key_env
        )));
    }
    Ok(HttpBackend::new(HttpBackendConfig {
        endpoint: settings.endpoint.clone(),
        api_key,
        timeout_secs: settings.timeout_secs,
        pricing: settings.pricing.clone(),
    }))
}

/// Offline backend from a fixture directory: the simulated model when the
/// directory has `sim.json`, hash and rule fixtures otherwise.
pub fn mock_backend(dir: &Path) -> Result<Arc<dyn ChatBackend>, EngineError> {
    let sim = dir.join(SIM_FIXTURE);
    if sim.is_file() {
        let raw = fs::read_to_string(&sim).map_err(io_err(&sim))?;
        let model: SimModel = serde_json::from_str(&raw).map_err(|e| EngineError::Config {
            path: sim.clone(),
            message: e.to_string(),
        })?;
        return Ok(Arc::new(model));
    }
    Ok(Arc::new(FixtureBackend::from_dir(dir).map_err(io_err(dir))?))
}

/// Loads the corpus with the configured embedder, reusing the on-disk
/// embedding cache when there is one.
pub fn open_corpus(config: &EngineConfig, path: &Path) -> Result<CorpusStore, EngineError> {
    let store = load_corpus(path, Arc::new(HashEmbedder::new(config.embed_dim)))?.with_mode(config.mode);
    Ok(match config.embedding_cache_path() {
        Some(p) => store.with_cache(EmbeddingCache::load(&p)?),
        None => store,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub rounds: usize,
    pub forced_stop: bool,
    pub feedback: Vec<Feedback>,
}

/// The persisted run record: nodes keyed by id, the call log, and totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    /// False when the run stopped early; the nodes present are still valid.
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub question: String,
    pub config_digest: String,
    pub config: EngineConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outline: Option<Outline>,
    pub nodes: BTreeMap<String, RetrievalNode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineSummary>,
    pub calls: Vec<CallRecord>,
    pub usage: UsageTotals,
    pub warnings: Vec<String>,
}

impl RunTrace {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Nodes whose id equals `selector` or whose path string starts with
    /// it, shallowest first then by id.
    pub fn select(&self, node_id: Option<&str>, path_prefix: Option<&str>) -> Vec<&RetrievalNode> {
        let mut out: Vec<&RetrievalNode> = self
            .nodes
            .values()
            .filter(|n| node_id.is_none_or(|id| n.node_id == id))
            .filter(|n| path_prefix.is_none_or(|p| crate::retrieval_tree::node_path(n).starts_with(p)))
            .collect();
        out.sort_by(|a, b| a.depth.cmp(&b.depth).then_with(|| a.node_id.cmp(&b.node_id)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<CitedAnswer>,
    /// Answer text followed by the reference section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_text: Option<String>,
    pub usage: UsageTotals,
    pub trace: RunTrace,
}

impl RunArtifact {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    /// Writes `answer.md` (when there is an answer) and `trace.json` into
    /// `dir`, or the trace to `trace_path` when given.
    pub fn write(&self, dir: &Path, trace_path: Option<&Path>) -> Result<(PathBuf, Option<PathBuf>), EngineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let trace = trace_path.map_or_else(|| dir.join("trace.json"), Path::to_path_buf);
        if let Some(parent) = trace.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&trace, self.trace.to_json()).map_err(io_err(&trace))?;
        let answer = match &self.final_text {
            Some(text) => {
                let p = dir.join("answer.md");
                fs::write(&p, text).map_err(io_err(&p))?;
                Some(p)
            }
            None => None,
        };
        Ok((trace, answer))
    }
}

/// A run that stopped before a final answer; `artifact` holds the partial
/// trace.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: EngineError,
    pub artifact: Box<RunArtifact>,
}

/// Whatever a run produced before it finished or stopped.
#[derive(Default)]
struct RunParts {
    outline: Option<Outline>,
    tree: Option<RetrievalTree>,
    refine: Option<RefineSummary>,
    answer: Option<CitedAnswer>,
    error: Option<String>,
    warnings: Vec<String>,
}

pub struct Engine {
    config: EngineConfig,
    client: LlmClient,
    store: CorpusStore,
    /// Model calls wait on the network, so parallel fan-out gets a pool sized
    /// by the concurrency limit rather than by the core count.
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Engine {
    pub fn new(config: EngineConfig, backend: Arc<dyn ChatBackend>, store: CorpusStore) -> Result<Self, EngineError> {
        config.validate()?;
        let mut client = LlmClient::new(backend)
            .with_concurrency(config.backend.concurrency)
            .with_retry(config.backend.retry.clone())
            .with_params(config.params());
        if let Some(dir) = config.response_cache_dir() {
            client = client.with_cache(ResponseCache::open(dir).map_err(EngineError::Cache)?);
        }
        #[cfg(feature = "parallel")]
        let pool = if config.mode.is_concurrent() {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.backend.concurrency.max(rayon::current_num_threads()))
                    .thread_name(|i| format!("citeweave-{i}"))
                    .build()
                    .map_err(|e| EngineError::Invalid(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            client,
            store,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(f);
        }
        f()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn client(&self) -> &LlmClient {
        &self.client
    }

    pub fn store(&self) -> &CorpusStore {
        &self.store
    }

    /// Saves the embedding cache if one is configured.
    pub fn persist_embeddings(&self) -> Result<(), EngineError> {
        if let Some(p) = self.config.embedding_cache_path() {
            self.store.cache().save(&p)?;
        }
        Ok(())
    }

    fn artifact(&self, question: &str, log: &CallLog, parts: RunParts) -> RunArtifact {
        let RunParts {
            outline,
            tree,
            refine,
            answer,
            error,
            mut warnings,
        } = parts;
        let usage = log.totals();
        let nodes = match tree {
            Some(mut t) => {
                t.attach_usage(log);
                warnings.extend(t.warnings);
                t.nodes.into_iter().map(|n| (n.node_id.clone(), n)).collect()
            }
            None => BTreeMap::new(),
        };
        RunArtifact {
            final_text: answer.as_ref().map(CitedAnswer::render_final),
            answer,
            usage,
            trace: RunTrace {
                complete: error.is_none(),
                error,
                question: question.to_string(),
                config_digest: self.config.digest(),
                config: self.config.clone(),
                outline,
                nodes,
                refine,
                calls: log.sorted(),
                usage,
                warnings,
            },
        }
    }

    /// Outline, tree, synthesis, refinement. Only an outline or root-node
    /// failure stops the run; anything later degrades with warnings.
    pub fn answer(&self, question: &str) -> Result<RunArtifact, RunFailure> {
        self.in_pool(|| self.run(question))
    }

    fn run(&self, question: &str) -> Result<RunArtifact, RunFailure> {
        let log = CallLog::new();
        let fail = |error: EngineError, outline: Option<Outline>, tree: Option<RetrievalTree>| RunFailure {
            artifact: Box::new(self.artifact(
                question,
                &log,
                RunParts {
                    outline,
                    tree,
                    error: Some(error.to_string()),
                    ..RunParts::default()
                },
            )),
            error,
        };
        let outline = match generate_outline(&self.client, &CallScope::new(log.clone(), "outline"), question) {
            Ok(o) => o,
            Err(e) => return Err(fail(EngineError::Outline(e.to_string()), None, None)),
        };
        let ctx = TreeContext {
            client: &self.client,
            store: &self.store,
            reasoning: &self.config.reasoning,
            log: log.clone(),
            mode: self.config.mode,
        };
        let mut tree = match run_adaptive_retrieval(&ctx, question, &outline, &self.config.tree) {
            Ok(t) => t,
            Err(TreeError::RootFailed { failure, node }) => {
                let partial = RetrievalTree {
                    nodes: vec![*node.clone()],
                    warnings: Vec::new(),
                };
                return Err(fail(
                    EngineError::Tree(TreeError::RootFailed { failure, node }),
                    Some(outline),
                    Some(partial),
                ));
            }
            Err(e) => return Err(fail(e.into(), Some(outline), None)),
        };
        synthesize_tree(&ctx, &mut tree);
        let root_answer = tree.root().final_answer().cloned().expect("a returned tree has an answered root");
        let mut warnings = Vec::new();
        let scope = CallScope::new(log.clone(), scope_label("n0", "refine"));
        let (answer, refine) = match refine_loop(
            &self.client,
            &scope,
            question,
            root_answer.clone(),
            &outline,
            self.config.max_refine_rounds,
        ) {
            Ok(r) => {
                warnings.extend(r.warnings);
                let summary = RefineSummary {
                    rounds: r.rounds,
                    forced_stop: r.forced_stop,
                    feedback: r.feedback,
                };
                (r.answer, Some(summary))
            }
            Err(e) => {
                let message = format!("refinement failed, keeping the synthesized answer: {e}");
                log::warn!("{message}");
                warnings.push(message);
                (root_answer, None)
            }
        };
        Ok(self.artifact(
            question,
            &log,
            RunParts {
                outline: Some(outline),
                tree: Some(tree),
                refine,
                answer: Some(answer),
                error: None,
                warnings,
            },
        ))
    }

    /// Every item through [`Engine::answer`], scored with a model-backed
    /// judge on the same client. Returns the report and the per-item
    /// artifacts in line order (failed items carry their partial trace).
    pub fn benchmark(
        &self,
        items: &[(usize, DatasetItem)],
        skipped: Vec<Skipped>,
        metrics: &[Metric],
    ) -> (BenchmarkReport, Vec<(usize, RunArtifact)>) {
        let judge = LlmJudge::new(&self.client);
        let artifacts = std::sync::Mutex::new(Vec::new());
        let digest = bench_digest(&self.config, metrics);
        let answer = |item: &DatasetItem| {
            let line = items.iter().find(|(_, i)| std::ptr::eq(i, item)).map_or(0, |(l, _)| *l);
            match self.run(&item.question) {
                Ok(a) => {
                    let out = ItemAnswer {
                        answer: a.answer.clone().expect("complete runs have answers"),
                        usage: a.usage,
                    };
                    artifacts.lock().expect("artifact lock").push((line, a));
                    Ok(out)
                }
                Err(f) => {
                    artifacts.lock().expect("artifact lock").push((line, *f.artifact));
                    Err(f.error.to_string())
                }
            }
        };
        let report = self.in_pool(|| run_benchmark(items, skipped, metrics, &judge, self.config.mode, &digest, answer));
        let mut artifacts = artifacts.into_inner().expect("artifact lock");
        artifacts.sort_by_key(|(line, _)| *line);
        (report, artifacts)
    }
}

/// Digest of the pipeline config plus the metric list.
pub fn bench_digest(config: &EngineConfig, metrics: &[Metric]) -> String {
    let mut names: Vec<&str> = metrics.iter().map(|m| m.name()).collect();
    names.sort_unstable();
    let mut hasher = Sha256::new();
    hasher.update(config.digest().as_bytes());
    hasher.update(names.join(",").as_bytes());
    hex::encode(hasher.finalize())
}
