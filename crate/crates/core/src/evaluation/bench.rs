//! Dataset-driven benchmark runs: one pipeline run per item, the chosen
//! metrics per answer, and a report whose bytes depend only on the inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{citation_f1, default_labels, exact_match, hallucination_audit, rouge_l, SupportJudge};
use crate::exec::{map_slice, ExecMode};
use crate::llm::UsageTotals;
use crate::synthesis::CitedAnswer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CitationF1,
    ExactMatch,
    RougeL,
    Hallucination,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::CitationF1, Metric::ExactMatch, Metric::RougeL, Metric::Hallucination];

    pub fn name(self) -> &'static str {
        match self {
            Metric::CitationF1 => "citation_f1",
            Metric::ExactMatch => "exact_match",
            Metric::RougeL => "rouge_l",
            Metric::Hallucination => "hallucination",
        }
    }

    /// Comma-separated names; duplicates collapse, order is canonical.
    pub fn parse_list(text: &str) -> Result<Vec<Metric>, String> {
        let mut out: Vec<Metric> = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?} (expected one of citation_f1, exact_match, rouge_l, hallucination)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    /// 1-based line in the dataset file.
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
}

/// Items with their 1-based line numbers, plus the rows that were skipped.
pub type Dataset = (Vec<(usize, DatasetItem)>, Vec<Skipped>);

/// One JSON object per line; blank lines are ignored and malformed lines
/// are reported rather than fatal.
pub fn parse_dataset(text: &str) -> Dataset {
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetItem>(raw) {
            Ok(item) if item.question.trim().is_empty() => skipped.push(Skipped {
                line,
                id: Some(item.id),
                reason: "empty question".into(),
            }),
            Ok(item) => items.push((line, item)),
            Err(e) => skipped.push(Skipped {
                line,
                id: serde_json::from_str::<serde_json::Value>(raw)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|x| x.as_str()).map(String::from)),
                reason: format!("malformed row: {e}"),
            }),
        }
    }
    (items, skipped)
}

pub fn load_dataset(path: &Path) -> std::io::Result<Dataset> {
    Ok(parse_dataset(&std::fs::read_to_string(path)?))
}

/// What the pipeline hands back for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemAnswer {
    pub answer: CitedAnswer,
    pub usage: UsageTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub line: usize,
    pub id: String,
    pub scores: BTreeMap<String, f64>,
    pub usage: UsageTotals,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scored: usize,
    pub skipped: usize,
    /// Mean of each score over the items that have it.
    pub means: BTreeMap<String, f64>,
    pub usage: UsageTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_digest: String,
    pub metrics: Vec<Metric>,
    pub items: Vec<ItemReport>,
    pub aggregate: Aggregate,
    pub skipped: Vec<Skipped>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn score_item(item: &DatasetItem, answer: &CitedAnswer, metrics: &[Metric], judge: &dyn SupportJudge) -> (BTreeMap<String, f64>, Vec<String>) {
    let mut scores = BTreeMap::new();
    let mut flags = Vec::new();
    for metric in metrics {
        match metric {
            Metric::CitationF1 => {
                let r = citation_f1(answer, judge);
                scores.insert("citation_precision".into(), r.precision);
                scores.insert("citation_recall".into(), r.recall);
                scores.insert("citation_f1".into(), r.f1);
                flags.extend(r.per_sentence.into_iter().flat_map(|j| j.flags));
            }
            Metric::ExactMatch => match &item.gold_label {
                Some(gold) => {
                    let labels = item.label_set.as_deref().unwrap_or(default_labels());
                    let em = exact_match(&answer.text, gold, labels);
                    if em.flagged {
                        flags.push("exact_match: no label token in the answer".into());
                    }
                    scores.insert("exact_match".into(), f64::from(em.score));
                }
                None => flags.push("exact_match: item has no gold_label".into()),
            },
            Metric::RougeL => match &item.gold_answer {
                Some(gold) => {
                    scores.insert("rouge_l".into(), rouge_l(&answer.text, gold).f);
                }
                None => flags.push("rouge_l: item has no gold_answer".into()),
            },
            Metric::Hallucination => {
                let a = hallucination_audit(answer, judge);
                scores.insert("hallucination".into(), a.unsupported_fraction);
                flags.extend(a.judge_failures.into_iter().map(|s| format!("audit judge failed on {s:?}")));
            }
        }
    }
    (scores, flags)
}

/// Means are plain sums over items in line order divided by the count, so a
/// recount over `items` reproduces them exactly.
pub fn aggregate(items: &[ItemReport], skipped: usize) -> Aggregate {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut usage = UsageTotals::default();
    for item in items {
        for (k, v) in &item.scores {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        usage.merge(&item.usage);
    }
    Aggregate {
        scored: items.len(),
        skipped,
        means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        usage,
    }
}

/// Runs `answer` on every item (concurrently in parallel mode) and scores
/// the results. A failed item is skipped with its error; the report is
/// ordered by dataset line whatever the completion order.
pub fn run_benchmark<F>(
    items: &[(usize, DatasetItem)],
    mut skipped: Vec<Skipped>,
    metrics: &[Metric],
    judge: &dyn SupportJudge,
    mode: ExecMode,
    config_digest: &str,
    answer: F,
) -> BenchmarkReport
where
    F: Fn(&DatasetItem) -> Result<ItemAnswer, String> + Sync + Send,
{
    let outcomes = map_slice(mode, items, |(line, item)| {
        (*line, item.id.clone(), answer(item).map(|a| {
            let (scores, flags) = score_item(item, &a.answer, metrics, judge);
            (scores, flags, a.usage)
        }))
    });
    let mut reports = Vec::new();
    for (line, id, outcome) in outcomes {
        match outcome {
            Ok((scores, flags, usage)) => reports.push(ItemReport {
                line,
                id: id.clone(),
                scores,
                usage,
                flags,
            }),
            Err(reason) => skipped.push(Skipped {
                line,
                id: Some(id),
                reason,
            }),
        }
    }
    skipped.sort_by_key(|s| s.line);
    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    BenchmarkReport {
        config_digest: config_digest.to_string(),
        aggregate: aggregate(&reports, skipped.len()),
        metrics,
        items: reports,
        skipped,
    }
}
