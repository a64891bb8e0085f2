//! A deterministic stand-in for the chat model.
//!
//! [`SimModel`] reads the rendered prompt of each template and produces a
//! well-formed reply: it tags every listed paper, links each to the query,
//! keeps them all, cites the references it was shown and proposes the
//! sub-queries configured for each query. Output is a pure function of the
//! prompt, so pipelines run against it are reproducible. Used by the test
//! suites and benches; not a model of answer quality.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{
    approx_tokens, BackendError, ChatBackend, CompletionRequest, CompletionResult, TemplateId, Usage,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimModel {
    /// Sub-queries proposed for a query; missing or empty means complete.
    pub subqueries: HashMap<String, Vec<String>>,
    /// Sub-queries proposed for any query not in `subqueries`.
    pub default_subqueries: Vec<String>,
    /// Feedback rounds before the terminate sentinel.
    pub feedback_rounds: usize,
    pub expand: bool,
    /// Discard the highest-indexed paper in Step 3b when more than one is listed.
    pub discard_last: bool,
    /// Appends a marker past the reference list to every drafted answer.
    pub emit_dangling: bool,
    pub cost_per_call: f64,
    pub latency_ms: u64,
}

impl Default for SimModel {
    fn default() -> Self {
        Self {
            subqueries: HashMap::new(),
            default_subqueries: Vec::new(),
            feedback_rounds: 0,
            expand: false,
            discard_last: false,
            emit_dangling: false,
            cost_per_call: 0.01,
            latency_ms: 0,
        }
    }
}

/// Marker the refinement reply appends; feedback counts them.
pub const REFINED_TAG: &str = "(refined)";

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    Some(rest[..to].trim())
}

fn after_last<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.rfind(label).map(|i| text[i + label.len()..].trim())
}

fn index_lines(text: &str) -> Vec<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^\[(\d+)\] ").expect("static regex"));
    let mut out: Vec<usize> = re
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn json_indices(text: &str) -> Vec<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r#""paper_index":\s*(\d+)"#).expect("static regex"));
    let mut out: Vec<usize> = re
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn delimited(body: &str) -> String {
    format!("[Response_Start]{body}[Response_End]")
}

impl SimModel {
    pub fn with_tree<I, Q, C>(mut self, tree: I) -> Self
    where
        I: IntoIterator<Item = (Q, Vec<C>)>,
        Q: Into<String>,
        C: Into<String>,
    {
        for (q, children) in tree {
            self.subqueries
                .insert(q.into(), children.into_iter().map(Into::into).collect());
        }
        self
    }

    fn proposals(&self, query: &str) -> &[String] {
        match self.subqueries.get(query) {
            Some(list) => list,
            None => &self.default_subqueries,
        }
    }

    fn answer(&self, subject: &str, refs: &[usize]) -> String {
        let mut body = format!("Overview of {subject}.");
        match refs {
            [] => body.push_str(" No references were available."),
            [only] => body.push_str(&format!(" The main finding is supported [{only}].")),
            [first, .., last] => body.push_str(&format!(
                " The main finding is supported [{first}]. Further evidence agrees [{last}]."
            )),
        }
        if self.emit_dangling {
            let past = refs.last().copied().unwrap_or(0) + 7;
            body.push_str(&format!(" An unverifiable aside [{past}]."));
        }
        body
    }

    pub fn respond(&self, template: TemplateId, prompt: &str) -> String {
        match template {
            TemplateId::Outline => delimited(
                "\n1. (40%) The answer should explain the background of the question.\n2. (40%) The answer should compare the main approaches with evidence.\n3. (20%) The answer should note open limitations.\n",
            ),
            TemplateId::InitialAnswer => {
                let question = between(prompt, "\nQuestion: ", "\nOutline:").unwrap_or("the question");
                let refs = index_lines(between(prompt, "References: ", "\nQuestion: ").unwrap_or(""));
                delimited(&self.answer(question, &refs))
            }
            TemplateId::NodeAnswer => {
                let query = between(prompt, "retrieval step for: ", ".\nProvide").unwrap_or("the query");
                let refs = index_lines(after_last(prompt, "References: ").unwrap_or(""));
                delimited(&self.answer(query, &refs))
            }
            TemplateId::BranchSynthesis => {
                let query = between(prompt, "retrieval step for query: ", ".\nPlease").unwrap_or("the query");
                let refs = index_lines(after_last(prompt, "Here is the references: ").unwrap_or(""));
                let supplements = between(prompt, "Here is the supplemented queries and answers: ", "\nHere is the references: ")
                    .map_or(0, |s| s.matches("Sub-query: ").count());
                let mut body = self.answer(query, &refs);
                body.push_str(&format!(" This synthesis folds in {supplements} supplementary answer(s)."));
                delimited(&body)
            }
            TemplateId::GapIdentification => {
                let query = after_last(prompt, "Original Query: ").unwrap_or("");
                if self.proposals(query).is_empty() {
                    "The answer is complete and contains no information gaps.".to_string()
                } else {
                    format!("The answer lacks detail on: {}.", self.proposals(query).join("; "))
                }
            }
            TemplateId::SubqueryGeneration => {
                let query = after_last(prompt, "Original Query (for context): ").unwrap_or("");
                let list = self.proposals(query);
                if list.is_empty() {
                    "[end]terminate".to_string()
                } else {
                    list.iter()
                        .enumerate()
                        .map(|(i, q)| format!("({}) {q}", i + 1))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            }
            TemplateId::Feedback => {
                let answer = between(prompt, "\nAnswer: ", "\nOutline: ").unwrap_or("");
                if answer.matches(REFINED_TAG).count() >= self.feedback_rounds {
                    delimited("Feedback: [terminate]")
                } else {
                    delimited("Feedback: Add more concrete results.\nFeedback: Improve the organization.")
                }
            }
            TemplateId::Refine => {
                let original = between(prompt, "- Original Answer: ", "\n- Feedback: ").unwrap_or("");
                delimited(&format!("{original} {REFINED_TAG}"))
            }
            TemplateId::Sufficiency => {
                if self.expand {
                    "EXPAND\nFoundational work is likely missing.".to_string()
                } else {
                    "SUFFICIENT\nThe retrieved papers cover the query.".to_string()
                }
            }
            TemplateId::Step1 => {
                let papers = between(prompt, "(abstracts or snippets): ", "\nThe query is: ").unwrap_or("");
                let rows: Vec<String> = index_lines(papers)
                    .into_iter()
                    .map(|i| {
                        format!(
                            r#"{{"paper_index": {i}, "segments": [{{"label": "T", "description": "Theory of paper {i}.", "relevance": "High"}}, {{"label": "E", "description": "Experiments of paper {i}.", "relevance": "Medium"}}]}}"#
                        )
                    })
                    .collect();
                format!("{{\"papers\": [{}]}}", rows.join(", "))
            }
            TemplateId::Step2 => {
                let indices = json_indices(prompt);
                let mut rows: Vec<String> = indices
                    .iter()
                    .map(|i| format!(r#"{{"symbol": "[{i}]T -> [Q]", "rationale": "Paper {i} addresses the query."}}"#))
                    .collect();
                if indices.len() >= 2 {
                    rows.push(format!(
                        r#"{{"symbol": "[{}]E -> [{}]T", "rationale": "Experiments support the theory."}}"#,
                        indices[0], indices[1]
                    ));
                }
                format!("{{\"relationships\": [{}]}}", rows.join(", "))
            }
            TemplateId::Step3a => {
                let indices = json_indices(prompt);
                format!(
                    "Core papers (most central): {:?}. No contradictions were found among the listed relationships.",
                    indices
                )
            }
            TemplateId::Step3b => {
                let step1 = between(prompt, "And the breakdown of each paper from Step 1:", "For the query").unwrap_or("");
                let mut indices = json_indices(step1);
                let discarded = if self.discard_last && indices.len() > 1 {
                    indices.pop()
                } else {
                    None
                };
                let kept: Vec<String> = indices
                    .iter()
                    .enumerate()
                    .map(|(rank, i)| {
                        format!(r#"{{"paper_index": {i}, "rank": {}, "justification": "Relevant."}}"#, rank + 1)
                    })
                    .collect();
                let dropped: Vec<String> = discarded
                    .into_iter()
                    .map(|i| format!(r#"{{"paper_index": {i}, "reason": "Tangential."}}"#))
                    .collect();
                format!(
                    "{{\"final_selection\": [{}], \"discarded_items\": [{}]}}",
                    kept.join(", "),
                    dropped.join(", ")
                )
            }
            TemplateId::CitationSupport
            | TemplateId::CitationWorthiness
            | TemplateId::ContextSupport => "yes".to_string(),
            TemplateId::ReasoningSystem => String::new(),
        }
    }
}

impl ChatBackend for SimModel {
    fn name(&self) -> &str {
        "sim"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        // the user turn carries the template body; the system turn is context
        let prompt = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let text = self.respond(request.template, prompt);
        Ok(CompletionResult {
            usage: Usage {
                prompt_tokens: approx_tokens(&request.prompt_text()),
                completion_tokens: approx_tokens(&text),
                cost_usd: self.cost_per_call,
                latency_ms: self.latency_ms,
                retries: 0,
            },
            text,
        })
    }

    fn measures_latency(&self) -> bool {
        false
    }
}
