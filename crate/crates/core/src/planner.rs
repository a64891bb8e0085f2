//! Weighted answer outline: generation, parsing and weight normalization.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{render, CallScope, ChatMessage, LlmClient, LlmError, TemplateId};

/// Appended to the outline prompt when the first reply had no parseable lines.
pub const FORMAT_REMINDER: &str =
    "Please list the outline as numbered lines in the form \"1. (50%) What the section must cover.\"";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineSection {
    pub index: usize,
    /// Weight as emitted by the model; 0 when no "(W%)" was present.
    pub weight_pct: u32,
    /// Weight after proportional scaling to a total of exactly 100.
    pub normalized_pct: u32,
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outline {
    pub sections: Vec<OutlineSection>,
    pub raw_text: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no outline lines of the form \"N. (W%) directive\" found")]
    NoSections { raw: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // optional bullet / heading / bold, "N." or "N)", optional "(W%)", directive
        Regex::new(
            r"^[\s>*#•-]*(?:\*\*|__)?\s*(\d{1,3})\s*[.)]\s*(?:\*\*|__)?\s*(?:[(\[]\s*(\d{1,3}(?:\.\d+)?)\s*%\s*[)\]])?\s*(?:\*\*|__|:)?\s*(.*?)\s*$",
        )
        .expect("static regex")
    })
}

fn clean_directive(raw: &str) -> String {
    raw.trim_matches(|c: char| c == '*' || c == '_' || c.is_whitespace())
        .to_string()
}

/// Proportional scaling to 100 with largest-remainder rounding. Ties in the
/// remainder go to the earlier section. All-zero weights split evenly.
pub fn normalize_weights(weights: &[u32]) -> Vec<u32> {
    if weights.is_empty() {
        return Vec::new();
    }
    let total: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    let effective: Vec<u64> = if total == 0 {
        vec![1; weights.len()]
    } else {
        weights.iter().map(|&w| u64::from(w)).collect()
    };
    let denom: u64 = effective.iter().sum();
    // exact integer arithmetic: share_i = 100 * w_i / denom
    let mut out: Vec<u64> = effective.iter().map(|w| 100 * w / denom).collect();
    let mut order: Vec<usize> = (0..effective.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = 100 * effective[a] % denom;
        let rb = 100 * effective[b] % denom;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    let assigned: u64 = out.iter().sum();
    for &i in order.iter().take((100 - assigned) as usize) {
        out[i] += 1;
    }
    out.into_iter().map(|v| v as u32).collect()
}

/// Extracts "N. (W%) directive" lines in order, ignoring everything else.
pub fn parse_outline(text: &str) -> Result<Outline, PlannerError> {
    let mut pending: Vec<(u32, String)> = Vec::new();
    for line in text.lines() {
        let Some(caps) = line_regex().captures(line) else {
            continue;
        };
        let directive = clean_directive(caps.get(3).map_or("", |m| m.as_str()));
        if directive.is_empty() {
            continue;
        }
        let weight = caps
            .get(2)
            .and_then(|m| m.as_str().parse::<f64>().ok())
            .map_or(0, |w| w.round() as u32);
        pending.push((weight, directive));
    }
    if pending.is_empty() {
        return Err(PlannerError::NoSections {
            raw: text.to_string(),
        });
    }
    let raw_weights: Vec<u32> = pending.iter().map(|(w, _)| *w).collect();
    let normalized = normalize_weights(&raw_weights);
    let sections = pending
        .into_iter()
        .zip(normalized)
        .enumerate()
        .map(|(i, ((weight_pct, directive), normalized_pct))| OutlineSection {
            index: i + 1,
            weight_pct,
            normalized_pct,
            directive,
        })
        .collect();
    Ok(Outline {
        sections,
        raw_text: text.to_string(),
    })
}

impl Outline {
    /// Model-facing form using the raw weights; `parse_outline` of this text
    /// reproduces the same sections.
    pub fn to_text(&self) -> String {
        self.sections
            .iter()
            .map(|s| format!("{}. ({}%) {}", s.index, s.weight_pct, s.directive))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Form embedded in downstream prompts, with weights summing to 100.
    pub fn prompt_text(&self) -> String {
        self.sections
            .iter()
            .map(|s| format!("{}. ({}%) {}", s.index, s.normalized_pct, s.directive))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Single-section fallback used when a pipeline runs without planning.
    pub fn single(directive: &str) -> Self {
        Self {
            sections: vec![OutlineSection {
                index: 1,
                weight_pct: 100,
                normalized_pct: 100,
                directive: directive.to_string(),
            }],
            raw_text: String::new(),
        }
    }
}

pub fn generate_outline(
    client: &LlmClient,
    scope: &CallScope,
    question: &str,
) -> Result<Outline, PlannerError> {
    if question.trim().is_empty() {
        return Err(PlannerError::EmptyQuestion);
    }
    let prompt = render(TemplateId::Outline, [("question", question)])
        .map_err(LlmError::from)?;
    let first = client.complete_delimited(scope, TemplateId::Outline, &[ChatMessage::user(&prompt)])?;
    match parse_outline(&first.text) {
        Ok(outline) => Ok(outline),
        Err(_) => {
            log::warn!("outline reply had no sections; retrying with a format reminder");
            let retry = format!("{prompt}\n{FORMAT_REMINDER}");
            let second =
                client.complete_delimited(scope, TemplateId::Outline, &[ChatMessage::user(retry)])?;
            parse_outline(&second.text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CallLog, ScriptedBackend};
    use proptest::prelude::*;
    use std::sync::Arc;

    const TEMPLATE_EXAMPLE: &str = "1. (33%) The answer should begin by explaining the importance of robustness and safety for quadrotor UAVs in extreme weather conditions.
2. (33%) The answer should discuss strategies and solutions to improve the robustness and safety of quadrotor UAVs in extreme weather conditions.
3. (33%) The answer should highlight the limitations or challenges associated with designing robust and safe solutions for quadrotor UAVs under extreme weather conditions.";

    fn weights(o: &Outline) -> Vec<u32> {
        o.sections.iter().map(|s| s.weight_pct).collect()
    }

    fn normalized(o: &Outline) -> Vec<u32> {
        o.sections.iter().map(|s| s.normalized_pct).collect()
    }

    #[test]
    fn template_example_block() {
        let o = parse_outline(TEMPLATE_EXAMPLE).unwrap();
        assert_eq!(weights(&o), vec![33, 33, 33]);
        assert_eq!(normalized(&o), vec![34, 33, 33]);
        assert!(o.sections[0]
            .directive
            .starts_with("The answer should begin by explaining"));
    }

    #[test]
    fn singleton_and_basic() {
        let o = parse_outline("1. (100%) Cover everything.").unwrap();
        assert_eq!(weights(&o), vec![100]);
        let o = parse_outline("1. (50%) A\n2. (50%) B").unwrap();
        assert_eq!(o.sections.len(), 2);
        assert_eq!(o.sections[1].directive, "B");
    }

    #[test]
    fn noise_is_ignored_and_bullets_tolerated() {
        let o = parse_outline("Intro text\n1. (33%) X\n...noise...\n2. (67%) Y").unwrap();
        assert_eq!(o.sections.len(), 2);
        assert_eq!(weights(&o), vec![33, 67]);
        let o = parse_outline("- **1. (60%)** Background\n* 2. (40%) **Methods**").unwrap();
        assert_eq!(o.sections[0].directive, "Background");
        assert_eq!(o.sections[1].directive, "Methods");
    }

    #[test]
    fn largest_remainder_normalization() {
        // 40/110 and 30/110 of 100 are 36.36 and 27.27; one leftover point
        // goes to the largest remainder (first section on the tie).
        assert_eq!(normalize_weights(&[40, 40, 30]), vec![37, 36, 27]);
        assert_eq!(normalize_weights(&[50, 50]), vec![50, 50]);
        assert_eq!(normalize_weights(&[0, 0, 0]), vec![34, 33, 33]);
        assert_eq!(normalize_weights(&[1, 0]), vec![100, 0]);
    }

    #[test]
    fn unweighted_section_kept_with_zero() {
        let o = parse_outline("1. (70%) A\n2. B without weight\n3. (30%) C").unwrap();
        assert_eq!(weights(&o), vec![70, 0, 30]);
        assert_eq!(normalized(&o), vec![70, 0, 30]);
    }

    #[test]
    fn no_lines_is_error() {
        assert!(matches!(
            parse_outline("just prose"),
            Err(PlannerError::NoSections { .. })
        ));
    }

    #[test]
    fn generate_retries_once_with_reminder() {
        let backend = ScriptedBackend::new(|req| {
            if req.prompt_text().contains(FORMAT_REMINDER) {
                Some("[Response_Start]1. (100%) Everything.[Response_End]".into())
            } else {
                Some("[Response_Start]I cannot outline this.[Response_End]".into())
            }
        });
        let client = LlmClient::new(Arc::new(backend));
        let log = CallLog::new();
        let scope = CallScope::new(log.clone(), "outline");
        let o = generate_outline(&client, &scope, "Q?").unwrap();
        assert_eq!(o.sections.len(), 1);
        assert_eq!(log.len(), 2);
        assert!(matches!(
            generate_outline(&client, &scope, "  "),
            Err(PlannerError::EmptyQuestion)
        ));
    }

    proptest! {
        #[test]
        fn normalized_sums_to_100(ws in prop::collection::vec(0u32..200, 1..12)) {
            let n = normalize_weights(&ws);
            prop_assert_eq!(n.iter().sum::<u32>(), 100);
            prop_assert_eq!(n.len(), ws.len());
        }

        #[test]
        fn parse_idempotent_on_own_form(
            secs in prop::collection::vec((0u32..101, "[A-Za-z][A-Za-z ,]{0,30}[a-z]"), 1..8)
        ) {
            let text = secs.iter().enumerate()
                .map(|(i, (w, d))| format!("{}. ({}%) {}", i + 1, w, d))
                .collect::<Vec<_>>().join("\n");
            let once = parse_outline(&text).unwrap();
            let twice = parse_outline(&once.to_text()).unwrap();
            prop_assert_eq!(once.sections, twice.sections);
        }
    }
}
