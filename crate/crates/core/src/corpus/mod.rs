//! Paper collection, snippet-level similarity retrieval and the citation
//! graph used for one-hop expansion.
//!
//! The store is immutable after load. Snippet embeddings are computed lazily
//! on the first retrieval (or eagerly via [`CorpusStore::precompute`]) and
//! shared across threads.

mod embed;
mod graph;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

pub use embed::{
    EmbedError, Embedder, EmbeddingCache, EmbeddingVector, HashEmbedder, DEFAULT_EMBED_DIM,
};
pub use graph::{CitationGraph, Expansion};

use crate::exec::{self, ExecMode};
use crate::text::split_sentences;

/// Default number of snippets fetched per query.
pub const DEFAULT_SNIPPET_K: usize = 10;
/// Abstracts without explicit snippets are cut into windows of this many sentences.
pub const SNIPPET_WINDOW_SENTENCES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate paper ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("hop limit {0} not supported (only 0 or 1)")]
    HopLimit(u32),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("embedding cache: {0}")]
    EmbeddingCache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub parent_id: String,
    pub snippet_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub year: Option<i32>,
    pub cited_ids: Vec<String>,
    pub snippets: Vec<SnippetRef>,
}

/// Counts emitted after a successful load.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub papers: usize,
    pub snippets: usize,
    pub dropped_edges: usize,
    pub duplicate_ids: usize,
}

/// One line of the corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippets: Option<Vec<SnippetLine>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnippetLine {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSnippet {
    pub snippet: SnippetRef,
    pub score: f64,
}

pub struct CorpusStore {
    papers: Vec<PaperRecord>,
    index: HashMap<String, usize>,
    graph: CitationGraph,
    snippets: Vec<SnippetRef>,
    embedder: Arc<dyn Embedder>,
    vectors: OnceLock<Vec<EmbeddingVector>>,
    cache: EmbeddingCache,
    report: LoadReport,
    mode: ExecMode,
}

impl std::fmt::Debug for CorpusStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorpusStore")
            .field("report", &self.report)
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

fn default_snippets(paper_id: &str, title: &str, abstract_text: &str) -> Vec<SnippetRef> {
    let sentences = split_sentences(abstract_text);
    let mut out: Vec<SnippetRef> = sentences
        .chunks(SNIPPET_WINDOW_SENTENCES)
        .enumerate()
        .map(|(i, window)| SnippetRef {
            parent_id: paper_id.to_string(),
            snippet_id: format!("s{i}"),
            text: window.join(" "),
        })
        .collect();
    if out.is_empty() && !title.trim().is_empty() {
        out.push(SnippetRef {
            parent_id: paper_id.to_string(),
            snippet_id: "s0".to_string(),
            text: title.trim().to_string(),
        });
    }
    out
}

impl CorpusLine {
    fn into_record(self, line: usize) -> Result<PaperRecord, CorpusError> {
        if self.id.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "empty id".into(),
            });
        }
        let snippets = match self.snippets {
            Some(list) if !list.is_empty() => {
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(list.len());
                for s in list {
                    if s.text.trim().is_empty() {
                        return Err(CorpusError::Malformed {
                            line,
                            message: format!("snippet {} has empty text", s.id),
                        });
                    }
                    if !seen.insert(s.id.clone()) {
                        return Err(CorpusError::Malformed {
                            line,
                            message: format!("duplicate snippet id {}", s.id),
                        });
                    }
                    out.push(SnippetRef {
                        parent_id: self.id.clone(),
                        snippet_id: s.id,
                        text: s.text,
                    });
                }
                out
            }
            _ => default_snippets(&self.id, &self.title, &self.abstract_text),
        };
        Ok(PaperRecord {
            paper_id: self.id,
            title: self.title,
            abstract_text: self.abstract_text,
            year: self.year,
            cited_ids: self.citations,
            snippets,
        })
    }
}

/// Parses corpus JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<PaperRecord>, CorpusError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: CorpusLine = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(line.into_record(i + 1)?);
    }
    Ok(records)
}

pub fn load_corpus(path: &Path, embedder: Arc<dyn Embedder>) -> Result<CorpusStore, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CorpusStore::from_records(parse_corpus(&text)?, embedder)
}

impl CorpusStore {
    /// Indexes records. Duplicate ids reject the whole load; self-citations
    /// and citations to unknown ids are dropped and counted.
    pub fn from_records(
        mut records: Vec<PaperRecord>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(records.len());
        let mut duplicates = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.paper_id.clone(), i).is_some() {
                duplicates.insert(r.paper_id.clone());
            }
        }
        if !duplicates.is_empty() {
            return Err(CorpusError::DuplicateIds(duplicates.into_iter().collect()));
        }

        let mut dropped = 0usize;
        for r in records.iter_mut() {
            let own = r.paper_id.clone();
            let mut seen = HashSet::new();
            let mut kept = Vec::with_capacity(r.cited_ids.len());
            for cited in r.cited_ids.drain(..) {
                if cited == own || !index.contains_key(cited.as_str()) {
                    log::debug!("{own}: dropping citation edge to {cited}");
                    dropped += 1;
                } else if seen.insert(cited.clone()) {
                    kept.push(cited);
                }
            }
            r.cited_ids = kept;
        }

        let graph = CitationGraph::from_edges(
            records.iter().map(|r| r.paper_id.clone()),
            records
                .iter()
                .flat_map(|r| r.cited_ids.iter().map(|c| (r.paper_id.clone(), c.clone())))
                .collect::<Vec<_>>(),
        );
        let snippets: Vec<SnippetRef> = records
            .iter()
            .flat_map(|r| r.snippets.iter().cloned())
            .collect();
        let report = LoadReport {
            papers: records.len(),
            snippets: snippets.len(),
            dropped_edges: dropped,
            duplicate_ids: 0,
        };
        Ok(Self {
            papers: records,
            index,
            graph,
            snippets,
            embedder,
            vectors: OnceLock::new(),
            cache: EmbeddingCache::default(),
            report,
            mode: ExecMode::default(),
        })
    }
    /// Sets the fan-out mode for embedding precompute and snippet scans.
    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    /// Replaces the in-memory embedding cache (e.g. one loaded from disk).
    pub fn with_cache(mut self, cache: EmbeddingCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn graph(&self) -> &CitationGraph {
        &self.graph
    }

    pub fn papers(&self) -> &[PaperRecord] {
        &self.papers
    }

    pub fn paper(&self, id: &str) -> Option<&PaperRecord> {
        self.index.get(id).map(|&i| &self.papers[i])
    }

    pub fn snippets(&self) -> &[SnippetRef] {
        &self.snippets
    }

    pub fn snippet(&self, paper_id: &str, snippet_id: &str) -> Option<&SnippetRef> {
        self.paper(paper_id)?
            .snippets
            .iter()
            .find(|s| s.snippet_id == snippet_id)
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, CorpusError> {
        Ok(self.cache.get_or_embed(self.embedder.as_ref(), text)?)
    }

    /// Embeds every snippet once; later calls are free.
    pub fn precompute(&self) -> Result<&[EmbeddingVector], CorpusError> {
        if let Some(v) = self.vectors.get() {
            return Ok(v);
        }
        let computed: Result<Vec<_>, _> = exec::map_slice(self.mode, &self.snippets, |s| {
            self.cache.get_or_embed(self.embedder.as_ref(), &s.text)
        })
        .into_iter()
        .collect();
        // a racing initializer computed the same deterministic vectors
        let _ = self.vectors.set(computed?);
        Ok(self.vectors.get().expect("vectors initialized"))
    }

    /// Top `k` snippets by cosine similarity, ties broken by ascending
    /// `(paper_id, snippet_id)`.
    pub fn retrieve_snippets(&self, query: &str, k: usize) -> Result<Vec<ScoredSnippet>, CorpusError> {
        if k == 0 {
            return Err(CorpusError::ZeroK);
        }
        if self.snippets.is_empty() {
            return Ok(Vec::new());
        }
        let query_vec = self.embed_text(query)?;
        let vectors = self.precompute()?;
        let positions: Vec<usize> = (0..self.snippets.len()).collect();
        let mut scored: Vec<(usize, f64)> = exec::map_slice(self.mode, &positions, |&i| {
            (i, query_vec.cosine(&vectors[i]))
        });
        scored.sort_by(|a, b| self.rank_order(a, b));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, score)| ScoredSnippet {
                snippet: self.snippets[i].clone(),
                score,
            })
            .collect())
    }

    fn rank_order(&self, a: &(usize, f64), b: &(usize, f64)) -> Ordering {
        let (sa, sb) = (&self.snippets[a.0], &self.snippets[b.0]);
        b.1.total_cmp(&a.1)
            .then_with(|| sa.parent_id.cmp(&sb.parent_id))
            .then_with(|| sa.snippet_id.cmp(&sb.snippet_id))
    }

    /// Highest-scoring snippet of one paper for `query`; the earliest
    /// snippet wins ties.
    pub fn best_snippet(&self, paper_id: &str, query: &str) -> Result<Option<ScoredSnippet>, CorpusError> {
        let Some(paper) = self.paper(paper_id) else {
            return Ok(None);
        };
        let query_vec = self.embed_text(query)?;
        let mut best: Option<ScoredSnippet> = None;
        for s in &paper.snippets {
            let score = query_vec.cosine(&self.embed_text(&s.text)?);
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(ScoredSnippet {
                    snippet: s.clone(),
                    score,
                });
            }
        }
        Ok(best)
    }

    pub fn expand_citations<'a>(
        &self,
        seeds: impl IntoIterator<Item = &'a str>,
        hop_limit: u32,
    ) -> Result<Expansion, CorpusError> {
        self.graph.expand(seeds, hop_limit)
    }
}
