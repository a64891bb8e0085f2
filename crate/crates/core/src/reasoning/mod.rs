//! Citation-aware evidence selection for one retrieval node: the sufficiency
//! judge, optional one-hop citation expansion, role tagging (Step 1),
//! relationship building (Step 2), coherence analysis (Step 3a) and final
//! selection (Step 3b), ending in a top-K cut.
//!
//! Malformed model rows are dropped with a warning instead of failing the
//! node. Every warning lands in the node's [`ReasoningTrace`].

mod symbol;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use symbol::{format_relation_symbol, parse_relation_symbol, Label, RelEndpoint, SymbolError};

use crate::corpus::{CorpusError, CorpusStore, SnippetRef};
use crate::llm::{
    render, CallScope, ChatMessage, LlmClient, LlmError, TemplateId,
};
use crate::text::word_tokens;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_PAPER_TEXT_CHARS: usize = 1500;
pub const DEFAULT_MAX_CANDIDATES: usize = 30;

/// Appended to the Step-3a prompt when the first reply was empty.
pub const ANALYSIS_REASK: &str = "Please provide the analysis as plain text.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relevance {
    High,
    Medium,
    Low,
}

impl Relevance {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "high" => Some(Relevance::High),
            "medium" => Some(Relevance::Medium),
            "low" => Some(Relevance::Low),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTag {
    pub label: Label,
    pub description: String,
    pub relevance: Relevance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedPaper {
    pub paper_index: usize,
    pub segments: Vec<SegmentTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    pub source: RelEndpoint,
    pub target: RelEndpoint,
    pub rationale: String,
}

impl Relationship {
    pub fn symbol(&self) -> String {
        format_relation_symbol(&self.source, &self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptPaper {
    pub paper_index: usize,
    pub rank: usize,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedPaper {
    pub paper_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalSelection {
    #[serde(rename = "final_selection")]
    pub kept: Vec<KeptPaper>,
    #[serde(rename = "discarded_items")]
    pub discarded: Vec<DiscardedPaper>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceAnalysis {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionGraph {
    pub tagged: Vec<TaggedPaper>,
    pub relationships: Vec<Relationship>,
    pub analysis: CoherenceAnalysis,
    pub selection: FinalSelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Retrieved,
    Expanded,
}

/// One paper in a node's evidence pool, with the snippet that surfaced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub paper_id: String,
    pub title: String,
    pub abstract_text: String,
    pub snippet: Option<SnippetRef>,
    pub score: f64,
    pub origin: Origin,
}

impl Candidate {
    /// Title plus abstract (snippet text when the abstract is empty), cut to
    /// `max_chars` characters.
    pub fn paper_text(&self, max_chars: usize) -> String {
        let body = if self.abstract_text.trim().is_empty() {
            self.snippet.as_ref().map_or("", |s| s.text.as_str())
        } else {
            self.abstract_text.as_str()
        };
        let full = format!("{}\n{}", self.title.trim(), body.trim());
        match full.char_indices().nth(max_chars) {
            Some((cut, _)) => full[..cut].to_string(),
            None => full,
        }
    }
}

/// Groups ranked snippets into papers, keeping each paper's best snippet and
/// the order of first appearance.
pub fn candidates_from_snippets(
    store: &CorpusStore,
    hits: &[crate::corpus::ScoredSnippet],
) -> Vec<Candidate> {
    let mut seen = HashSet::new();
    hits.iter()
        .filter(|h| seen.insert(h.snippet.parent_id.clone()))
        .filter_map(|h| {
            let paper = store.paper(&h.snippet.parent_id)?;
            Some(Candidate {
                paper_id: paper.paper_id.clone(),
                title: paper.title.clone(),
                abstract_text: paper.abstract_text.clone(),
                snippet: Some(h.snippet.clone()),
                score: h.score,
                origin: Origin::Retrieved,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SufficiencyMode {
    /// Ask the model.
    #[default]
    Judge,
    AlwaysExpand,
    NeverExpand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasoningConfig {
    pub top_k: usize,
    pub hop_limit: u32,
    pub max_candidates: usize,
    pub paper_text_chars: usize,
    pub sufficiency: SufficiencyMode,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            hop_limit: 1,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            paper_text_chars: DEFAULT_PAPER_TEXT_CHARS,
            sufficiency: SufficiencyMode::Judge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyVerdict {
    /// True means "insufficient, expand along the citation graph".
    pub expand: bool,
    pub rationale: String,
    /// Verdict could not be read and defaulted to expand.
    pub flagged: bool,
}

/// The first of EXPAND / INSUFFICIENT / SUFFICIENT (whole words, any case)
/// decides. No verdict word defaults to expand and is flagged.
pub fn parse_sufficiency(text: &str) -> SufficiencyVerdict {
    let verdict = word_tokens(text).into_iter().find_map(|t| match t.as_str() {
        "expand" | "insufficient" => Some(true),
        "sufficient" => Some(false),
        _ => None,
    });
    SufficiencyVerdict {
        expand: verdict.unwrap_or(true),
        rationale: text.trim().to_string(),
        flagged: verdict.is_none(),
    }
}

fn numbered_papers(candidates: &[Candidate], max_chars: usize) -> String {
    let mut out = String::new();
    for (i, c) in candidates.iter().enumerate() {
        out.push_str(&format!("\n[{}] {}", i + 1, c.paper_text(max_chars)));
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum ReasoningError {
    #[error("no candidate papers")]
    EmptyCandidates,
    #[error("top-K must be at least 1")]
    ZeroK,
    #[error("Step 3a returned an empty analysis twice")]
    EmptyAnalysis,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub fn judge_sufficiency(
    client: &LlmClient,
    scope: &CallScope,
    query: &str,
    candidates: &[Candidate],
    config: &ReasoningConfig,
) -> Result<SufficiencyVerdict, ReasoningError> {
    if candidates.is_empty() {
        return Err(ReasoningError::EmptyCandidates);
    }
    let papers = numbered_papers(candidates, config.paper_text_chars);
    let prompt = render(
        TemplateId::Sufficiency,
        [("query", query), ("paper_text", papers.as_str())],
    )
    .map_err(LlmError::from)?;
    let out = client.complete(scope, TemplateId::Sufficiency, &[ChatMessage::user(prompt)])?;
    Ok(parse_sufficiency(&out.text))
}

/// Grows `p0` by the `hop_limit` citation neighborhood. New papers follow the
/// seeds, ordered by their best snippet score for `query` (ties by id), and
/// the pool is capped at `max_candidates`.
pub fn expand_pool(
    store: &CorpusStore,
    query: &str,
    p0: &[Candidate],
    config: &ReasoningConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<Candidate>, ReasoningError> {
    let seeds: Vec<&str> = p0.iter().map(|c| c.paper_id.as_str()).collect();
    let expansion = store.expand_citations(seeds.iter().copied(), config.hop_limit)?;
    for id in &expansion.unknown_seeds {
        warn(warnings, format!("expansion skipped unknown seed {id}"));
    }
    let present: HashSet<&str> = seeds.iter().copied().collect();
    let mut added = Vec::new();
    for id in expansion.ids.iter().filter(|id| !present.contains(id.as_str())) {
        let Some(paper) = store.paper(id) else { continue };
        let best = store.best_snippet(id, query)?;
        added.push(Candidate {
            paper_id: paper.paper_id.clone(),
            title: paper.title.clone(),
            abstract_text: paper.abstract_text.clone(),
            score: best.as_ref().map_or(0.0, |b| b.score),
            snippet: best.map(|b| b.snippet),
            origin: Origin::Expanded,
        });
    }
    added.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.paper_id.cmp(&b.paper_id)));
    let mut pool = p0.to_vec();
    let room = config.max_candidates.saturating_sub(pool.len());
    if added.len() > room {
        warn(
            warnings,
            format!(
                "citation expansion found {} new papers; kept {room} (max_candidates {})",
                added.len(),
                config.max_candidates
            ),
        );
        added.truncate(room);
    }
    pool.extend(added);
    Ok(pool)
}

fn warn(warnings: &mut Vec<String>, message: String) {
    log::warn!("{message}");
    warnings.push(message);
}

fn as_index(v: &Value) -> Option<usize> {
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn as_text(v: Option<&Value>) -> String {
    v.and_then(Value::as_str).unwrap_or("").trim().to_string()
}

/// Reads the Step-1 `papers` array. Indices must fall in `1..=n`; each paper
/// keeps its first entry and needs at least one segment with a description.
pub fn parse_step1(value: &Value, n: usize, warnings: &mut Vec<String>) -> Vec<TaggedPaper> {
    let Some(papers) = value.get("papers").and_then(Value::as_array) else {
        warn(warnings, "step1: no \"papers\" array".into());
        return Vec::new();
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for entry in papers {
        let Some(index) = entry.get("paper_index").and_then(as_index) else {
            warn(warnings, format!("step1: entry without paper_index dropped: {entry}"));
            continue;
        };
        if index == 0 || index > n {
            warn(warnings, format!("step1: paper_index {index} out of range 1..={n}, dropped"));
            continue;
        }
        if !seen.insert(index) {
            warn(warnings, format!("step1: duplicate paper_index {index}, later entry dropped"));
            continue;
        }
        let mut segments = Vec::new();
        for seg in entry.get("segments").and_then(Value::as_array).into_iter().flatten() {
            let label = as_text(seg.get("label"));
            let description = as_text(seg.get("description"));
            if label.is_empty() || description.is_empty() {
                warn(warnings, format!("step1: paper {index} segment missing label or description, dropped"));
                continue;
            }
            let raw_rel = as_text(seg.get("relevance"));
            let relevance = Relevance::parse(&raw_rel).unwrap_or_else(|| {
                warn(warnings, format!("step1: paper {index} relevance {raw_rel:?} read as Low"));
                Relevance::Low
            });
            segments.push(SegmentTag {
                label: Label::from_token(&label),
                description,
                relevance,
            });
        }
        if segments.is_empty() {
            warn(warnings, format!("step1: paper {index} has no valid segments, dropped"));
            continue;
        }
        out.push(TaggedPaper {
            paper_index: index,
            segments,
        });
    }
    out
}

/// Reads the Step-2 `relationships` array, keeping entries whose symbol
/// parses, whose source is a paper and whose endpoints are tagged papers.
pub fn parse_step2(
    value: &Value,
    tagged: &[TaggedPaper],
    warnings: &mut Vec<String>,
) -> Vec<Relationship> {
    let Some(rows) = value.get("relationships").and_then(Value::as_array) else {
        warn(warnings, "step2: no \"relationships\" array".into());
        return Vec::new();
    };
    let known: HashSet<usize> = tagged.iter().map(|t| t.paper_index).collect();
    let closed = |e: &RelEndpoint| match e {
        RelEndpoint::Paper { paper_index, .. } => known.contains(paper_index),
        RelEndpoint::Query => true,
    };
    let mut out = Vec::new();
    for row in rows {
        let raw = as_text(row.get("symbol"));
        let rationale = as_text(row.get("rationale"));
        match parse_relation_symbol(&raw) {
            Err(e) => warn(warnings, format!("step2: {e}, dropped")),
            Ok(_) if rationale.is_empty() => {
                warn(warnings, format!("step2: {raw:?} has no rationale, dropped"))
            }
            Ok((source, target)) if !closed(&source) || !closed(&target) => warn(
                warnings,
                format!("step2: {raw:?} references an untagged paper, dropped"),
            ),
            Ok((source, target)) => out.push(Relationship {
                source,
                target,
                rationale,
            }),
        }
    }
    out
}

/// Reads the Step-3b payload. Unknown indices are dropped, a paper listed as
/// both kept and discarded stays kept, and ranks are rewritten to 1..n after
/// a stable sort on the emitted rank.
pub fn parse_step3b(value: &Value, n: usize, warnings: &mut Vec<String>) -> FinalSelection {
    let in_range = |i: usize| i >= 1 && i <= n;
    let mut kept: Vec<(usize, usize, String)> = Vec::new();
    let mut kept_ids = HashSet::new();
    for row in value
        .get("final_selection")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
    {
        let Some(index) = row.get("paper_index").and_then(as_index).filter(|&i| in_range(i)) else {
            warn(warnings, format!("step3b: kept entry with unknown paper_index dropped: {row}"));
            continue;
        };
        if !kept_ids.insert(index) {
            warn(warnings, format!("step3b: paper {index} kept twice, later entry dropped"));
            continue;
        }
        // a missing rank sorts after every emitted one, keeping emitted order
        let rank = row.get("rank").and_then(as_index).unwrap_or(usize::MAX);
        kept.push((rank, index, as_text(row.get("justification"))));
    }
    kept.sort_by_key(|(rank, _, _)| *rank);
    let kept: Vec<KeptPaper> = kept
        .into_iter()
        .enumerate()
        .map(|(i, (_, paper_index, justification))| KeptPaper {
            paper_index,
            rank: i + 1,
            justification,
        })
        .collect();

    let mut discarded = Vec::new();
    let mut discarded_ids = HashSet::new();
    for row in value
        .get("discarded_items")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
    {
        let Some(index) = row.get("paper_index").and_then(as_index).filter(|&i| in_range(i)) else {
            warn(warnings, format!("step3b: discarded entry with unknown paper_index dropped: {row}"));
            continue;
        };
        if kept_ids.contains(&index) {
            warn(warnings, format!("step3b: paper {index} both kept and discarded; kept wins"));
            continue;
        }
        if discarded_ids.insert(index) {
            discarded.push(DiscardedPaper {
                paper_index: index,
                reason: as_text(row.get("reason")),
            });
        }
    }
    FinalSelection { kept, discarded }
}

fn system_message(path: &str, query: &str) -> Result<ChatMessage, LlmError> {
    Ok(ChatMessage::system(render(
        TemplateId::ReasoningSystem,
        [("path", path), ("query", query)],
    )?))
}

fn step1_json(tagged: &[TaggedPaper]) -> String {
    serde_json::to_string_pretty(&json!({ "papers": tagged })).expect("serializable")
}

fn step2_json(relationships: &[Relationship]) -> String {
    let rows: Vec<Value> = relationships
        .iter()
        .map(|r| json!({ "symbol": r.symbol(), "rationale": r.rationale }))
        .collect();
    serde_json::to_string_pretty(&json!({ "relationships": rows })).expect("serializable")
}

/// Ask-and-parse result carrying the raw model text for the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Staged<T> {
    pub value: T,
    pub raw: String,
}

pub fn tag_segments(
    client: &LlmClient,
    scope: &CallScope,
    path: &str,
    query: &str,
    candidates: &[Candidate],
    config: &ReasoningConfig,
    warnings: &mut Vec<String>,
) -> Result<Staged<Vec<TaggedPaper>>, ReasoningError> {
    let papers = numbered_papers(candidates, config.paper_text_chars);
    let prompt = render(
        TemplateId::Step1,
        [("paper_text", papers.as_str()), ("query_text", query)],
    )
    .map_err(LlmError::from)?;
    let messages = [system_message(path, query)?, ChatMessage::user(prompt)];
    let (value, raw) = client.complete_json(scope, TemplateId::Step1, &messages)?;
    Ok(Staged {
        value: parse_step1(&value, candidates.len(), warnings),
        raw,
    })
}

pub fn build_relationships(
    client: &LlmClient,
    scope: &CallScope,
    path: &str,
    query: &str,
    tagged: &[TaggedPaper],
    warnings: &mut Vec<String>,
) -> Result<Staged<Vec<Relationship>>, ReasoningError> {
    let step1 = step1_json(tagged);
    let prompt = render(
        TemplateId::Step2,
        [("step1_result_json", step1.as_str()), ("query", query)],
    )
    .map_err(LlmError::from)?;
    let messages = [system_message(path, query)?, ChatMessage::user(prompt)];
    let (value, raw) = client.complete_json(scope, TemplateId::Step2, &messages)?;
    Ok(Staged {
        value: parse_step2(&value, tagged, warnings),
        raw,
    })
}

pub fn analyze_coherence(
    client: &LlmClient,
    scope: &CallScope,
    path: &str,
    query: &str,
    tagged: &[TaggedPaper],
    relationships: &[Relationship],
) -> Result<CoherenceAnalysis, ReasoningError> {
    let (step1, step2) = (step1_json(tagged), step2_json(relationships));
    let prompt = render(
        TemplateId::Step3a,
        [
            ("step2_relationships_json", step2.as_str()),
            ("step1_result_json", step1.as_str()),
            ("query", query),
            ("path", path),
        ],
    )
    .map_err(LlmError::from)?;
    let system = system_message(path, query)?;
    let first = client.complete(
        scope,
        TemplateId::Step3a,
        &[system.clone(), ChatMessage::user(&prompt)],
    )?;
    if !first.text.trim().is_empty() {
        return Ok(CoherenceAnalysis { text: first.text });
    }
    log::warn!("step3a: empty analysis, re-asking once");
    let second = client.complete(
        scope,
        TemplateId::Step3a,
        &[system, ChatMessage::user(format!("{prompt}\n\n{ANALYSIS_REASK}"))],
    )?;
    if second.text.trim().is_empty() {
        return Err(ReasoningError::EmptyAnalysis);
    }
    Ok(CoherenceAnalysis { text: second.text })
}

#[allow(clippy::too_many_arguments)]
pub fn finalize_selection(
    client: &LlmClient,
    scope: &CallScope,
    path: &str,
    query: &str,
    n_candidates: usize,
    tagged: &[TaggedPaper],
    relationships: &[Relationship],
    analysis: &CoherenceAnalysis,
    warnings: &mut Vec<String>,
) -> Result<Staged<FinalSelection>, ReasoningError> {
    let (step1, step2) = (step1_json(tagged), step2_json(relationships));
    let prompt = render(
        TemplateId::Step3b,
        [
            ("step2_relationships_json", step2.as_str()),
            ("step1_result_json", step1.as_str()),
            ("query", query),
            ("path", path),
            ("analysis_from_step3a", analysis.text.as_str()),
        ],
    )
    .map_err(LlmError::from)?;
    let messages = [system_message(path, query)?, ChatMessage::user(prompt)];
    let (value, raw) = client.complete_json(scope, TemplateId::Step3b, &messages)?;
    Ok(Staged {
        value: parse_step3b(&value, n_candidates, warnings),
        raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sufficiency,
    Expansion,
    Step1,
    Step2,
    Step3a,
    Step3b,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutput {
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyRecord {
    pub mode: SufficiencyMode,
    pub expand: bool,
    pub rationale: String,
    pub flagged: bool,
    pub pool_before: usize,
    pub pool_after: usize,
}

/// Per-node reasoning payload. The four step keys follow the published
/// snapshot schema; the rest is added for auditing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub query: String,
    pub path: String,
    pub papers_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sufficiency: Option<SufficiencyRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step1_analysis: Option<StageOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step2_relationships: Option<StageOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step3_analysis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step3_final_selection: Option<FinalSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ReasoningTrace {
    pub fn is_complete(&self) -> bool {
        self.step1_analysis.is_some()
            && self.step2_relationships.is_some()
            && self.step3_analysis.is_some()
            && self.step3_final_selection.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    /// Kept papers in rank order, at most `top_k`.
    pub selected: Vec<Candidate>,
    /// Pool the steps ran over (P after optional expansion).
    pub pool: Vec<Candidate>,
    pub graph: ContributionGraph,
    pub trace: ReasoningTrace,
}

#[derive(Debug, thiserror::Error)]
#[error("reasoning failed at {stage:?}: {message}")]
pub struct ReasoningFailure {
    pub stage: Stage,
    pub message: String,
    pub trace: Box<ReasoningTrace>,
}

pub struct Reasoner<'a> {
    pub client: &'a LlmClient,
    pub store: &'a CorpusStore,
    pub config: &'a ReasoningConfig,
}

impl Reasoner<'_> {
    /// Runs the full selection for one node. `p0` is the similarity pool.
    pub fn rerank_and_filter(
        &self,
        scope: &CallScope,
        query: &str,
        path: &str,
        p0: &[Candidate],
    ) -> Result<RerankOutcome, ReasoningFailure> {
        let mut trace = ReasoningTrace {
            query: query.to_string(),
            path: path.to_string(),
            papers_count: p0.len(),
            ..ReasoningTrace::default()
        };
        let fail = |stage: Stage, err: ReasoningError, mut trace: ReasoningTrace, warnings: Vec<String>| {
            trace.warnings = warnings;
            ReasoningFailure {
                stage,
                message: err.to_string(),
                trace: Box::new(trace),
            }
        };
        let mut warnings = Vec::new();
        if p0.is_empty() {
            return Err(fail(Stage::Sufficiency, ReasoningError::EmptyCandidates, trace, warnings));
        }
        if self.config.top_k == 0 {
            return Err(fail(Stage::Step3b, ReasoningError::ZeroK, trace, warnings));
        }

        let verdict = match self.config.sufficiency {
            SufficiencyMode::Judge => {
                match judge_sufficiency(self.client, scope, query, p0, self.config) {
                    Ok(v) => v,
                    Err(e) => return Err(fail(Stage::Sufficiency, e, trace, warnings)),
                }
            }
            forced => SufficiencyVerdict {
                expand: forced == SufficiencyMode::AlwaysExpand,
                rationale: String::new(),
                flagged: false,
            },
        };
        if verdict.flagged {
            warn(&mut warnings, "sufficiency verdict unreadable; defaulting to expand".into());
        }
        let pool = if verdict.expand && self.config.hop_limit > 0 {
            match expand_pool(self.store, query, p0, self.config, &mut warnings) {
                Ok(p) => p,
                Err(e) => return Err(fail(Stage::Expansion, e, trace, warnings)),
            }
        } else {
            p0.to_vec()
        };
        trace.sufficiency = Some(SufficiencyRecord {
            mode: self.config.sufficiency,
            expand: verdict.expand,
            rationale: verdict.rationale,
            flagged: verdict.flagged,
            pool_before: p0.len(),
            pool_after: pool.len(),
        });
        trace.papers_count = pool.len();
        trace.candidates = Some(pool.iter().map(|c| c.paper_id.clone()).collect());

        let tagged = match tag_segments(self.client, scope, path, query, &pool, self.config, &mut warnings) {
            Ok(s) => s,
            Err(e) => return Err(fail(Stage::Step1, e, trace, warnings)),
        };
        trace.step1_analysis = Some(StageOutput { output: tagged.raw });
        let tagged = tagged.value;

        let relationships = match build_relationships(self.client, scope, path, query, &tagged, &mut warnings) {
            Ok(s) => s,
            Err(e) => return Err(fail(Stage::Step2, e, trace, warnings)),
        };
        trace.step2_relationships = Some(StageOutput {
            output: relationships.raw,
        });
        let relationships = relationships.value;

        let analysis = match analyze_coherence(self.client, scope, path, query, &tagged, &relationships) {
            Ok(a) => a,
            Err(e) => return Err(fail(Stage::Step3a, e, trace, warnings)),
        };
        trace.step3_analysis = Some(analysis.text.clone());

        let selection = match finalize_selection(
            self.client,
            scope,
            path,
            query,
            pool.len(),
            &tagged,
            &relationships,
            &analysis,
            &mut warnings,
        ) {
            Ok(s) => s.value,
            Err(e) => return Err(fail(Stage::Step3b, e, trace, warnings)),
        };
        let listed: BTreeSet<usize> = selection
            .kept
            .iter()
            .map(|k| k.paper_index)
            .chain(selection.discarded.iter().map(|d| d.paper_index))
            .collect();
        let unlisted: Vec<usize> = (1..=pool.len()).filter(|i| !listed.contains(i)).collect();
        if !unlisted.is_empty() {
            warn(&mut warnings, format!("step3b: papers {unlisted:?} neither kept nor discarded; not selected"));
        }
        if selection.kept.len() > self.config.top_k {
            log::debug!(
                "step3b kept {} papers; truncating to top_k {}",
                selection.kept.len(),
                self.config.top_k
            );
        }
        trace.step3_final_selection = Some(selection.clone());
        trace.warnings = warnings;

        let selected: Vec<Candidate> = selection
            .kept
            .iter()
            .take(self.config.top_k)
            .map(|k| pool[k.paper_index - 1].clone())
            .collect();
        Ok(RerankOutcome {
            selected,
            pool,
            graph: ContributionGraph {
                tagged,
                relationships,
                analysis,
                selection,
            },
            trace,
        })
    }
}
