//! Answer-quality metrics: citation precision/recall, exact match on label
//! tasks, ROUGE-L, and the uncited-sentence hallucination audit.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{render, CallLog, CallScope, ChatMessage, LlmClient, TemplateId};
use crate::synthesis::{CitedAnswer, ReferenceEntry};
use crate::text::{scan_markers, sentence_spans};

pub mod bench;

pub use bench::{
    aggregate, load_dataset, parse_dataset, run_benchmark, Aggregate, BenchmarkReport, Dataset, DatasetItem, ItemAnswer, ItemReport, Metric, Skipped,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceUnit {
    pub text: String,
    /// Distinct marker indices in order of appearance.
    pub cited_indices: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub citation_worthy: Option<bool>,
}

pub fn sentence_units(text: &str) -> Vec<SentenceUnit> {
    sentence_spans(text)
        .into_iter()
        .map(|span| {
            let s = &text[span];
            let mut cited = Vec::new();
            for m in scan_markers(s) {
                let i = usize::try_from(m.index).unwrap_or(usize::MAX);
                if !cited.contains(&i) {
                    cited.push(i);
                }
            }
            SentenceUnit {
                text: s.to_string(),
                cited_indices: cited,
                citation_worthy: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("judge failed: {0}")]
pub struct JudgeError(pub String);

/// Yes/no decisions behind the metrics.
pub trait SupportJudge: Send + Sync {
    /// Does this reference support the sentence?
    fn supports(&self, sentence: &str, reference: &ReferenceEntry) -> Result<bool, JudgeError>;
    /// Is the sentence a claim that needs a citation?
    fn citation_worthy(&self, sentence: &str) -> Result<bool, JudgeError>;
    /// Is the sentence supported by the whole reference context?
    fn context_supports(&self, sentence: &str, context: &str) -> Result<bool, JudgeError>;
}

/// Table-driven judge for tests; sentences are matched after trimming.
#[derive(Debug, Clone, Default)]
pub struct ScriptedJudge {
    /// (sentence, ref_index) pairs that are supported.
    pub support: HashSet<(String, usize)>,
    pub worthy: HashSet<String>,
    /// Uncited sentences the context supports.
    pub context: HashSet<String>,
    /// Sentences on which every call fails.
    pub failing: HashSet<String>,
}

impl ScriptedJudge {
    fn check(&self, sentence: &str) -> Result<String, JudgeError> {
        let key = sentence.trim().to_string();
        if self.failing.contains(&key) {
            return Err(JudgeError(format!("scripted failure on {key:?}")));
        }
        Ok(key)
    }
}

impl SupportJudge for ScriptedJudge {
    fn supports(&self, sentence: &str, reference: &ReferenceEntry) -> Result<bool, JudgeError> {
        let key = self.check(sentence)?;
        Ok(self.support.contains(&(key, reference.ref_index)))
    }

    fn citation_worthy(&self, sentence: &str) -> Result<bool, JudgeError> {
        Ok(self.worthy.contains(&self.check(sentence)?))
    }

    fn context_supports(&self, sentence: &str, _context: &str) -> Result<bool, JudgeError> {
        Ok(self.context.contains(&self.check(sentence)?))
    }
}

/// Model-backed judge using the yes/no judge templates. Its calls go to its
/// own log so they never mix with pipeline accounting.
pub struct LlmJudge<'a> {
    client: &'a LlmClient,
    scope: CallScope,
}

impl<'a> LlmJudge<'a> {
    pub fn new(client: &'a LlmClient) -> Self {
        Self {
            client,
            scope: CallScope::new(CallLog::new(), "judge"),
        }
    }

    pub fn log(&self) -> &Arc<CallLog> {
        self.scope.log()
    }

    fn ask(&self, template: TemplateId, prompt: Result<String, crate::llm::TemplateError>) -> Result<bool, JudgeError> {
        let prompt = prompt.map_err(|e| JudgeError(e.to_string()))?;
        let reply = self
            .client
            .complete(&self.scope, template, &[ChatMessage::user(prompt)])
            .map_err(|e| JudgeError(e.to_string()))?;
        parse_yes_no(&reply.text).ok_or_else(|| JudgeError(format!("{template}: no yes/no in {:?}", reply.text)))
    }
}

/// The first "yes" or "no" word decides.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    crate::text::word_tokens(text).into_iter().find_map(|w| match w.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    })
}

impl SupportJudge for LlmJudge<'_> {
    fn supports(&self, sentence: &str, reference: &ReferenceEntry) -> Result<bool, JudgeError> {
        self.ask(
            TemplateId::CitationSupport,
            render(
                TemplateId::CitationSupport,
                [("sentence", sentence), ("reference", reference.display_text.as_str())],
            ),
        )
    }

    fn citation_worthy(&self, sentence: &str) -> Result<bool, JudgeError> {
        self.ask(
            TemplateId::CitationWorthiness,
            render(TemplateId::CitationWorthiness, [("sentence", sentence)]),
        )
    }

    fn context_supports(&self, sentence: &str, context: &str) -> Result<bool, JudgeError> {
        self.ask(
            TemplateId::ContextSupport,
            render(TemplateId::ContextSupport, [("sentence", sentence), ("context", context)]),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationCounts {
    /// (sentence, citation) pairs.
    pub cited: usize,
    /// Pairs whose citation supports the sentence.
    pub supported: usize,
    pub worthy: usize,
    pub worthy_and_cited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceJudgment {
    pub unit: SentenceUnit,
    /// One verdict per entry of `unit.cited_indices`.
    pub supported: Vec<bool>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_sentence: Vec<SentenceJudgment>,
    pub counts: CitationCounts,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Recomputes precision, recall and F1 from a judgment table.
pub fn score_judgments(per_sentence: Vec<SentenceJudgment>) -> MetricReport {
    let mut counts = CitationCounts::default();
    for j in &per_sentence {
        counts.cited += j.supported.len();
        counts.supported += j.supported.iter().filter(|&&s| s).count();
        if j.unit.citation_worthy == Some(true) {
            counts.worthy += 1;
            if !j.unit.cited_indices.is_empty() {
                counts.worthy_and_cited += 1;
            }
        }
    }
    let precision = ratio(counts.supported, counts.cited);
    let recall = ratio(counts.worthy_and_cited, counts.worthy);
    MetricReport {
        precision,
        recall,
        f1: harmonic(precision, recall),
        per_sentence,
        counts,
    }
}

/// Per-pair precision, per-sentence recall. Judge failures count against
/// the answer and are flagged.
pub fn citation_f1(answer: &CitedAnswer, judge: &dyn SupportJudge) -> MetricReport {
    let by_index: HashMap<usize, &ReferenceEntry> =
        answer.references.entries.iter().map(|e| (e.ref_index, e)).collect();
    let per_sentence = sentence_units(&answer.text)
        .into_iter()
        .map(|mut unit| {
            let mut flags = Vec::new();
            let supported = unit
                .cited_indices
                .iter()
                .map(|i| match by_index.get(i) {
                    None => {
                        flags.push(format!("[{i}] is not in the reference list"));
                        false
                    }
                    Some(entry) => judge.supports(&unit.text, entry).unwrap_or_else(|e| {
                        flags.push(format!("support [{i}]: {e}"));
                        false
                    }),
                })
                .collect();
            // a sentence the judge cannot classify is treated as worthy
            unit.citation_worthy = Some(judge.citation_worthy(&unit.text).unwrap_or_else(|e| {
                flags.push(format!("worthiness: {e}"));
                true
            }));
            SentenceJudgment { unit, supported, flags }
        })
        .collect();
    score_judgments(per_sentence)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactMatch {
    pub score: u8,
    pub predicted: Option<String>,
    pub flagged: bool,
}

/// Last label token (case-insensitive, whole words) in `prediction`,
/// compared with `gold`.
pub fn exact_match(prediction: &str, gold: &str, label_set: &[String]) -> ExactMatch {
    let mut labels: Vec<String> = label_set
        .iter()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect();
    // longer labels first so "not supported" beats "supported"
    labels.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    labels.dedup();
    if labels.is_empty() {
        return ExactMatch {
            score: 0,
            predicted: None,
            flagged: true,
        };
    }
    let alternatives: Vec<String> = labels.iter().map(|l| regex::escape(l).replace(' ', r"\s+")).collect();
    let re = Regex::new(&format!(r"(?i)\b(?:{})\b", alternatives.join("|"))).expect("escaped labels");
    let last = re.find_iter(prediction).last();
    match last {
        Some(m) => {
            let predicted = m.as_str().split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            ExactMatch {
                score: u8::from(predicted == gold.trim().to_lowercase()),
                predicted: Some(predicted),
                flagged: false,
            }
        }
        None => ExactMatch {
            score: 0,
            predicted: None,
            flagged: true,
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(prediction: &str, reference: &str) -> RougeScore {
    let p = rouge_tokens(prediction);
    let r = rouge_tokens(reference);
    if p.is_empty() || r.is_empty() {
        return RougeScore::default();
    }
    let lcs = lcs_len(&p, &r);
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / r.len() as f64;
    RougeScore {
        precision,
        recall,
        f: harmonic(precision, recall),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub unsupported_fraction: f64,
    pub uncited: usize,
    pub unsupported: usize,
    /// Uncited sentences judged unsupported (or unjudgeable).
    pub flagged: Vec<String>,
    /// Sentences the judge failed on; also present in `flagged`.
    pub judge_failures: Vec<String>,
}

/// Judges every uncited sentence against the full reference context.
pub fn hallucination_audit(answer: &CitedAnswer, judge: &dyn SupportJudge) -> AuditReport {
    let context = answer.references.context_lines();
    let mut report = AuditReport {
        unsupported_fraction: 0.0,
        uncited: 0,
        unsupported: 0,
        flagged: Vec::new(),
        judge_failures: Vec::new(),
    };
    for unit in sentence_units(&answer.text).into_iter().filter(|u| u.cited_indices.is_empty()) {
        report.uncited += 1;
        let supported = match judge.context_supports(&unit.text, &context) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("audit: {e}");
                report.judge_failures.push(unit.text.clone());
                false
            }
        };
        if !supported {
            report.unsupported += 1;
            report.flagged.push(unit.text);
        }
    }
    report.unsupported_fraction = ratio(report.unsupported, report.uncited);
    report
}

fn default_labels() -> &'static [String] {
    static LABELS: OnceLock<Vec<String>> = OnceLock::new();
    LABELS.get_or_init(|| ["yes", "no", "maybe"].map(String::from).to_vec())
}
