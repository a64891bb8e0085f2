//! Cited answers: drafting at the root and at tree nodes, bottom-up branch
//! synthesis over merged reference lists, and the feedback/refine loop.
//!
//! Every [`CitedAnswer`] handed out has been bound to its reference list:
//! markers pointing past the list are stripped (with a warning) and the
//! marker list is a fresh scan of the text.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::llm::{
    detect_sentinel, render, CallScope, ChatMessage, LlmClient, LlmError, Sentinel, TemplateId,
};
use crate::planner::Outline;
use crate::reasoning::Candidate;
use crate::text::scan_markers;

pub const DEFAULT_MAX_REFINE_ROUNDS: usize = 3;
/// Characters of snippet text shown after the title in a reference line.
pub const DISPLAY_EXCERPT_CHARS: usize = 200;
/// Appended when a drafting prompt came back empty.
pub const ANSWER_REASK: &str =
    "Please provide the answer, marked as [Response_Start] Answer [Response_End].";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub ref_index: usize,
    pub paper_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet_id: Option<String>,
    pub title: String,
    pub display_text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceList {
    pub entries: Vec<ReferenceEntry>,
}

fn excerpt(text: &str, max_chars: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(max_chars) {
        Some((cut, _)) => flat[..cut].to_string(),
        None => flat,
    }
}

/// Title and snippet excerpt joined by a spaced dash, on one line.
pub fn display_text(title: &str, snippet: &str) -> String {
    let title = title.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("{title} \u{2014} {}", excerpt(snippet, DISPLAY_EXCERPT_CHARS))
}

impl ReferenceList {
    /// Numbers candidates 1..n in the given order, skipping repeats of the
    /// same (paper, snippet).
    pub fn from_candidates(candidates: &[Candidate]) -> Self {
        let mut list = ReferenceList::default();
        for c in candidates {
            let snippet_text = c
                .snippet
                .as_ref()
                .map_or(c.abstract_text.as_str(), |s| s.text.as_str());
            list.push_unique(ReferenceEntry {
                ref_index: 0,
                paper_id: c.paper_id.clone(),
                snippet_id: c.snippet.as_ref().map(|s| s.snippet_id.clone()),
                title: c.title.clone(),
                display_text: display_text(&c.title, snippet_text),
            });
        }
        list
    }

    fn key(e: &ReferenceEntry) -> (&str, Option<&str>) {
        (e.paper_id.as_str(), e.snippet_id.as_deref())
    }

    /// Appends unless the key is present; returns the entry's index either way.
    fn push_unique(&mut self, mut entry: ReferenceEntry) -> usize {
        if let Some(existing) = self.entries.iter().find(|e| Self::key(e) == Self::key(&entry)) {
            return existing.ref_index;
        }
        entry.ref_index = self.entries.len() + 1;
        self.entries.push(entry);
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, ref_index: usize) -> bool {
        ref_index >= 1 && ref_index <= self.entries.len()
    }

    /// Prompt context: one "[n] display_text" line per entry, each on its own
    /// line.
    pub fn context_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("\n[{}] {}", e.ref_index, e.display_text))
            .collect()
    }

    /// "[n] title (paper_id)" lines for the final artifact.
    pub fn bibliography(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("[{}] {} ({})", e.ref_index, e.title.trim(), e.paper_id))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn is_well_formed(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .enumerate()
            .all(|(i, e)| e.ref_index == i + 1 && seen.insert(Self::key(e)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationMarker {
    pub ref_index: usize,
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitedAnswer {
    pub text: String,
    pub markers: Vec<CitationMarker>,
    pub references: ReferenceList,
}

fn markers_of(text: &str) -> Vec<CitationMarker> {
    scan_markers(text)
        .into_iter()
        .map(|m| CitationMarker {
            ref_index: usize::try_from(m.index).unwrap_or(usize::MAX),
            char_span: (m.span.start, m.span.end),
        })
        .collect()
}

fn warn(warnings: &mut Vec<String>, message: String) {
    log::warn!("{message}");
    warnings.push(message);
}

/// Removes markers whose index is not in `1..=n`, returning the new text and
/// the removed indices in order of appearance.
pub fn strip_dangling(text: &str, n: usize) -> (String, Vec<u64>) {
    let mut out = String::with_capacity(text.len());
    let mut removed = Vec::new();
    let mut last = 0;
    for m in scan_markers(text) {
        if m.index == 0 || m.index > n as u64 {
            out.push_str(&text[last..m.span.start]);
            last = m.span.end;
            removed.push(m.index);
        }
    }
    out.push_str(&text[last..]);
    (out, removed)
}

impl CitedAnswer {
    /// Binds text to references, stripping dangling markers.
    pub fn bind(text: &str, references: ReferenceList, warnings: &mut Vec<String>) -> Self {
        let (clean, removed) = strip_dangling(text, references.len());
        if !removed.is_empty() {
            warn(
                warnings,
                format!(
                    "stripped dangling citation marker(s) {removed:?} (only {} references)",
                    references.len()
                ),
            );
        }
        Self {
            markers: markers_of(&clean),
            text: clean,
            references,
        }
    }

    /// No dangling markers and `markers` equals a fresh scan.
    pub fn is_consistent(&self) -> bool {
        self.markers == markers_of(&self.text)
            && self.markers.iter().all(|m| self.references.contains(m.ref_index))
    }

    pub fn cited_indices(&self) -> Vec<usize> {
        self.markers.iter().map(|m| m.ref_index).collect()
    }

    /// Plain-text artifact: the answer followed by a References section.
    pub fn render_final(&self) -> String {
        format!("{}\n\nReferences\n{}\n", self.text.trim_end(), self.references.bibliography())
    }
}

pub type Remap = BTreeMap<usize, usize>;

/// Union of `parent` then each child list in order, deduplicated by
/// (paper, snippet) and renumbered 1..n, with one old-to-new table per input.
pub fn merge_references(parent: &ReferenceList, children: &[&ReferenceList]) -> (ReferenceList, Vec<Remap>) {
    let mut merged = ReferenceList::default();
    let mut remaps = Vec::with_capacity(children.len() + 1);
    for list in std::iter::once(parent).chain(children.iter().copied()) {
        let mut remap = Remap::new();
        for e in &list.entries {
            let new = merged.push_unique(e.clone());
            remap.insert(e.ref_index, new);
        }
        remaps.push(remap);
    }
    (merged, remaps)
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("no evidence to answer from")]
    NoEvidence,
    #[error("{template} produced an empty answer twice")]
    EmptyAnswer { template: TemplateId },
    #[error("no remap entry for citation [{index}]")]
    MissingRemap { index: u64 },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Rewrites every `[old]` to `[remap[old]]`, right to left so spans stay
/// valid. Other bytes are untouched.
pub fn reindex_text(text: &str, remap: &Remap) -> Result<String, SynthesisError> {
    let hits = scan_markers(text);
    let mut replacements = Vec::with_capacity(hits.len());
    for m in &hits {
        let new = usize::try_from(m.index)
            .ok()
            .and_then(|i| remap.get(&i))
            .ok_or(SynthesisError::MissingRemap { index: m.index })?;
        replacements.push((m.span.clone(), format!("[{new}]")));
    }
    let mut out = text.to_string();
    for (span, marker) in replacements.into_iter().rev() {
        out.replace_range(span, &marker);
    }
    Ok(out)
}

pub fn reindex_citations(
    answer: &CitedAnswer,
    remap: &Remap,
    references: ReferenceList,
) -> Result<CitedAnswer, SynthesisError> {
    let text = reindex_text(&answer.text, remap)?;
    let mut warnings = Vec::new();
    let bound = CitedAnswer::bind(&text, references, &mut warnings);
    debug_assert!(warnings.is_empty() || !remap.values().all(|&v| bound.references.contains(v)));
    Ok(bound)
}

/// A draft plus anything worth recording in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Drafted {
    pub answer: CitedAnswer,
    pub warnings: Vec<String>,
}

fn draft(
    client: &LlmClient,
    scope: &CallScope,
    template: TemplateId,
    prompt: String,
    references: ReferenceList,
) -> Result<Drafted, SynthesisError> {
    let mut warnings = Vec::new();
    let mut reply = client.complete_delimited(scope, template, &[ChatMessage::user(&prompt)])?;
    if reply.text.is_empty() {
        log::warn!("{template}: empty answer, re-asking once");
        reply = client.complete_delimited(
            scope,
            template,
            &[ChatMessage::user(format!("{prompt}\n{ANSWER_REASK}"))],
        )?;
        if reply.text.is_empty() {
            return Err(SynthesisError::EmptyAnswer { template });
        }
    }
    if reply.fallback {
        warn(&mut warnings, format!("{template}: response markers missing, used the raw reply"));
    }
    let answer = CitedAnswer::bind(&reply.text, references, &mut warnings);
    Ok(Drafted { answer, warnings })
}

pub fn generate_initial_answer(
    client: &LlmClient,
    scope: &CallScope,
    question: &str,
    outline: &Outline,
    references: ReferenceList,
) -> Result<Drafted, SynthesisError> {
    if references.is_empty() {
        return Err(SynthesisError::NoEvidence);
    }
    let context = references.context_lines();
    let outline_text = outline.prompt_text();
    let prompt = render(
        TemplateId::InitialAnswer,
        [
            ("context", context.as_str()),
            ("input", question),
            ("outline", outline_text.as_str()),
        ],
    )
    .map_err(LlmError::from)?;
    draft(client, scope, TemplateId::InitialAnswer, prompt, references)
}

pub fn generate_node_answer(
    client: &LlmClient,
    scope: &CallScope,
    path: &str,
    query: &str,
    references: ReferenceList,
) -> Result<Drafted, SynthesisError> {
    if references.is_empty() {
        return Err(SynthesisError::NoEvidence);
    }
    let context = references.context_lines();
    let prompt = render(
        TemplateId::NodeAnswer,
        [("path", path), ("query", query), ("context", context.as_str())],
    )
    .map_err(LlmError::from)?;
    draft(client, scope, TemplateId::NodeAnswer, prompt, references)
}

/// A child's contribution to its parent's synthesis; `None` when it failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildAnswer<'a> {
    pub query: &'a str,
    pub answer: Option<&'a CitedAnswer>,
}

pub fn branch_synthesize(
    client: &LlmClient,
    scope: &CallScope,
    path: &str,
    query: &str,
    answer: &CitedAnswer,
    children: &[ChildAnswer<'_>],
) -> Result<Drafted, SynthesisError> {
    let mut warnings = Vec::new();
    let live: Vec<(&str, &CitedAnswer)> = children
        .iter()
        .filter_map(|c| c.answer.map(|a| (c.query, a)))
        .collect();
    if live.is_empty() {
        if !children.is_empty() {
            warn(&mut warnings, format!("all {} children failed; keeping the node answer", children.len()));
        }
        return Ok(Drafted {
            answer: answer.clone(),
            warnings,
        });
    }
    let child_refs: Vec<&ReferenceList> = live.iter().map(|(_, a)| &a.references).collect();
    let (merged, remaps) = merge_references(&answer.references, &child_refs);
    let own = reindex_citations(answer, &remaps[0], merged.clone())?;
    let mut supplement = String::new();
    for ((sub_query, child), remap) in live.iter().zip(&remaps[1..]) {
        let rebound = reindex_citations(child, remap, merged.clone())?;
        supplement.push_str(&format!("\nSub-query: {sub_query}\nAnswer: {}\n", rebound.text));
    }
    let context = merged.context_lines();
    let prompt = render(
        TemplateId::BranchSynthesis,
        [
            ("path", path),
            ("query", query),
            ("answer", own.text.as_str()),
            ("supplement", supplement.as_str()),
            ("context", context.as_str()),
        ],
    )
    .map_err(LlmError::from)?;
    let mut drafted = draft(client, scope, TemplateId::BranchSynthesis, prompt, merged)?;
    warnings.append(&mut drafted.warnings);
    drafted.warnings = warnings;
    Ok(drafted)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub items: Vec<String>,
    pub terminate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Splits on every "Feedback:" prefix (any case). The terminate sentinel wins
/// over any items; text with neither is read as terminate.
pub fn parse_feedback(text: &str) -> Feedback {
    if detect_sentinel(text, Sentinel::FeedbackTerminate) {
        return Feedback {
            items: Vec::new(),
            terminate: true,
            warning: None,
        };
    }
    let lower = text.to_lowercase();
    let starts: Vec<usize> = lower.match_indices("feedback:").map(|(i, _)| i).collect();
    let mut items = Vec::new();
    for (k, &start) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(text.len());
        let item = text[start + "feedback:".len()..end].trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    if items.is_empty() {
        let message = "feedback had neither the terminate sentinel nor any \"Feedback:\" item; treating as terminate".to_string();
        log::warn!("{message}");
        return Feedback {
            items,
            terminate: true,
            warning: Some(message),
        };
    }
    Feedback {
        items,
        terminate: false,
        warning: None,
    }
}

pub fn generate_feedback(
    client: &LlmClient,
    scope: &CallScope,
    question: &str,
    answer: &CitedAnswer,
    outline: &Outline,
) -> Result<Feedback, SynthesisError> {
    let outline_text = outline.prompt_text();
    let prompt = render(
        TemplateId::Feedback,
        [
            ("question", question),
            ("answer", answer.text.as_str()),
            ("outline", outline_text.as_str()),
        ],
    )
    .map_err(LlmError::from)?;
    let reply = client.complete_delimited(scope, TemplateId::Feedback, &[ChatMessage::user(prompt)])?;
    Ok(parse_feedback(&reply.text))
}

pub fn refine_answer(
    client: &LlmClient,
    scope: &CallScope,
    question: &str,
    answer: &CitedAnswer,
    feedback: &Feedback,
    outline: &Outline,
) -> Result<Drafted, SynthesisError> {
    let outline_text = outline.prompt_text();
    let feedback_text = feedback
        .items
        .iter()
        .map(|i| format!("Feedback: {i}"))
        .collect::<Vec<_>>()
        .join("\n");
    let references = answer.references.context_lines();
    let prompt = render(
        TemplateId::Refine,
        [
            ("question", question),
            ("original_answer", answer.text.as_str()),
            ("feedback", feedback_text.as_str()),
            ("outline", outline_text.as_str()),
            ("references", references.as_str()),
        ],
    )
    .map_err(LlmError::from)?;
    draft(client, scope, TemplateId::Refine, prompt, answer.references.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub answer: CitedAnswer,
    pub rounds: usize,
    /// The loop stopped at the round cap rather than on a terminate.
    pub forced_stop: bool,
    pub feedback: Vec<Feedback>,
    pub warnings: Vec<String>,
}

/// Alternates feedback and refinement until the terminate sentinel or
/// `max_rounds` refinements.
pub fn refine_loop(
    client: &LlmClient,
    scope: &CallScope,
    question: &str,
    answer: CitedAnswer,
    outline: &Outline,
    max_rounds: usize,
) -> Result<RefineOutcome, SynthesisError> {
    let mut current = answer;
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut rounds = 0;
    let forced_stop = loop {
        if rounds == max_rounds {
            break true;
        }
        let feedback = generate_feedback(client, scope, question, &current, outline)?;
        if let Some(w) = &feedback.warning {
            warnings.push(w.clone());
        }
        let done = feedback.terminate;
        history.push(feedback);
        if done {
            break false;
        }
        let refined = refine_answer(client, scope, question, &current, history.last().expect("pushed"), outline)?;
        warnings.extend(refined.warnings);
        current = refined.answer;
        rounds += 1;
    };
    if forced_stop {
        warn(&mut warnings, format!("refinement stopped at the cap of {max_rounds} round(s)"));
    }
    Ok(RefineOutcome {
        answer: current,
        rounds,
        forced_stop,
        feedback: history,
        warnings,
    })
}

/// Count of markers per reference index; handy for audits.
pub fn citation_histogram(answer: &CitedAnswer) -> HashMap<usize, usize> {
    let mut out = HashMap::new();
    for m in &answer.markers {
        *out.entry(m.ref_index).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SnippetRef;
    use crate::llm::{CallLog, ScriptedBackend};
    use crate::reasoning::Origin;
    use crate::sim::SimModel;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn entry(paper: &str) -> ReferenceEntry {
        ReferenceEntry {
            ref_index: 0,
            paper_id: paper.into(),
            snippet_id: Some("s0".into()),
            title: format!("Title {paper}"),
            display_text: format!("Title {paper} \u{2014} text"),
        }
    }

    fn list(papers: &[&str]) -> ReferenceList {
        let mut l = ReferenceList::default();
        for p in papers {
            l.push_unique(entry(p));
        }
        l
    }

    fn ids(l: &ReferenceList) -> Vec<&str> {
        l.entries.iter().map(|e| e.paper_id.as_str()).collect()
    }

    #[test]
    fn merge_examples() {
        let (merged, remaps) = merge_references(&list(&["P1", "P2"]), &[&list(&["P2", "P3"])]);
        assert_eq!(ids(&merged), vec!["P1", "P2", "P3"]);
        assert_eq!(remaps[1], Remap::from([(1, 2), (2, 3)]));
        assert_eq!(remaps[0], Remap::from([(1, 1), (2, 2)]));

        let (merged, _) = merge_references(&list(&["A", "B"]), &[&list(&["C", "D"])]);
        assert_eq!(merged.len(), 4);
        assert_eq!(&ids(&merged)[..2], &["A", "B"]);

        let (merged, remaps) = merge_references(&ReferenceList::default(), &[&ReferenceList::default()]);
        assert!(merged.is_empty());
        assert!(remaps.iter().all(Remap::is_empty));
    }

    #[test]
    fn reindex_examples() {
        let remap = Remap::from([(1, 3), (2, 1)]);
        assert_eq!(reindex_text("A [1]. B [2].", &remap).unwrap(), "A [3]. B [1].");
        let swap = Remap::from([(1, 2), (2, 1)]);
        assert_eq!(reindex_text("x [1][2] y", &swap).unwrap(), "x [2][1] y");
        let identity = Remap::from([(1, 1), (2, 2)]);
        let s = "Keep   this\n[1] exactly [2]!";
        assert_eq!(reindex_text(s, &identity).unwrap(), s);
        assert!(matches!(
            reindex_text("lost [4]", &identity),
            Err(SynthesisError::MissingRemap { index: 4 })
        ));
        // widening indices shifts later spans; right-to-left keeps them valid
        let grow = Remap::from([(1, 10), (2, 200)]);
        assert_eq!(reindex_text("[1] and [2][1]", &grow).unwrap(), "[10] and [200][10]");
    }

    #[test]
    fn binding_strips_dangling_markers() {
        let mut w = Vec::new();
        let a = CitedAnswer::bind("X is true [1].", list(&["a", "b"]), &mut w);
        assert_eq!(a.cited_indices(), vec![1]);
        let a = CitedAnswer::bind("claims [1][2]", list(&["a", "b"]), &mut w);
        assert_eq!(a.markers[0].char_span.1, a.markers[1].char_span.0);
        assert!(w.is_empty());
        let a = CitedAnswer::bind("orphan [7]", list(&["a", "b", "c"]), &mut w);
        assert_eq!(a.text, "orphan ");
        assert!(a.markers.is_empty());
        assert_eq!(w.len(), 1);
        assert!(a.is_consistent());
    }

    #[test]
    fn display_text_shape() {
        let long = "word ".repeat(100);
        let d = display_text("A Title", &long);
        assert!(d.starts_with("A Title \u{2014} word"));
        assert_eq!(d.chars().count(), "A Title \u{2014} ".chars().count() + DISPLAY_EXCERPT_CHARS);
        let c = Candidate {
            paper_id: "p".into(),
            title: "T".into(),
            abstract_text: "abs".into(),
            snippet: Some(SnippetRef {
                parent_id: "p".into(),
                snippet_id: "s1".into(),
                text: "line one\nline two".into(),
            }),
            score: 1.0,
            origin: Origin::Retrieved,
        };
        let refs = ReferenceList::from_candidates(&[c.clone(), c]);
        assert_eq!(refs.len(), 1);
        assert_eq!(refs.context_lines(), "\n[1] T \u{2014} line one line two");
    }

    #[test]
    fn feedback_parsing() {
        assert!(parse_feedback("Feedback: [terminate]").terminate);
        let f = parse_feedback("Feedback: add citations.\nFeedback: reorganize part 2.");
        assert_eq!(f.items, vec!["add citations.", "reorganize part 2."]);
        assert!(!f.terminate);
        let f = parse_feedback("This is fine prose with no structure.");
        assert!(f.terminate && f.items.is_empty() && f.warning.is_some());
    }

    fn client(model: SimModel) -> (LlmClient, Arc<CallLog>, CallScope) {
        let log = CallLog::new();
        let scope = CallScope::new(log.clone(), "root");
        (LlmClient::new(Arc::new(model)), log, scope)
    }

    fn answer(text: &str, refs: ReferenceList) -> CitedAnswer {
        CitedAnswer::bind(text, refs, &mut Vec::new())
    }

    fn count(log: &CallLog, t: TemplateId) -> usize {
        log.sorted().iter().filter(|r| r.template == t).count()
    }

    #[test]
    fn refine_loop_round_counts() {
        let outline = Outline::single("Everything.");
        for (rounds, cap, expect, forced) in [(0, 3, 0, false), (2, 3, 2, false), (99, 3, 3, true)] {
            let (c, log, scope) = client(SimModel {
                feedback_rounds: rounds,
                ..SimModel::default()
            });
            let out = refine_loop(&c, &scope, "Q", answer("A [1].", list(&["a"])), &outline, cap).unwrap();
            assert_eq!(out.rounds, expect);
            assert_eq!(out.forced_stop, forced);
            assert_eq!(count(&log, TemplateId::Refine), expect);
            assert!(out.answer.is_consistent());
        }
    }

    #[test]
    fn branch_synthesis_folds_new_reference() {
        let (c, _, scope) = client(SimModel::default());
        let parent = answer("Parent claim [1]. Second [2].", list(&["P1", "P2"]));
        let child = answer("Child claim [2].", list(&["P2", "P3"]));
        let out = branch_synthesize(
            &c,
            &scope,
            "root",
            "root",
            &parent,
            &[ChildAnswer {
                query: "sub",
                answer: Some(&child),
            }],
        )
        .unwrap();
        assert_eq!(out.answer.references.len(), 3);
        assert!(out.answer.cited_indices().contains(&3), "{}", out.answer.text);
        assert!(out.answer.is_consistent());
    }

    #[test]
    fn branch_synthesis_pass_through_cases() {
        let (c, log, scope) = client(SimModel::default());
        let parent = answer("Leaf [1].", list(&["P1"]));
        let out = branch_synthesize(&c, &scope, "r", "r", &parent, &[]).unwrap();
        assert_eq!(out.answer, parent);
        assert!(out.warnings.is_empty());
        let failed = [ChildAnswer {
            query: "x",
            answer: None,
        }];
        let out = branch_synthesize(&c, &scope, "r", "r", &parent, &failed).unwrap();
        assert_eq!(out.answer, parent);
        assert_eq!(out.warnings.len(), 1);
        assert!(log.is_empty());
    }

    #[test]
    fn node_answer_prompt_carries_path() {
        let backend = ScriptedBackend::new(|req| {
            let p = req.prompt_text();
            assert!(p.contains("The retrieval path is: root -> sub."));
            assert!(p.contains("retrieval step for: sub."));
            Some("[Response_Start]Fine [1].[Response_End]".into())
        });
        let c = LlmClient::new(Arc::new(backend));
        let scope = CallScope::new(CallLog::new(), "n");
        let out = generate_node_answer(&c, &scope, "root -> sub", "sub", list(&["a"])).unwrap();
        assert_eq!(out.answer.text, "Fine [1].");
        assert!(matches!(
            generate_node_answer(&c, &scope, "p", "q", ReferenceList::default()),
            Err(SynthesisError::NoEvidence)
        ));
    }

    #[test]
    fn empty_draft_reasks_then_fails() {
        let backend = ScriptedBackend::new(|_| Some("[Response_Start] [Response_End]".into()));
        let c = LlmClient::new(Arc::new(backend));
        let log = CallLog::new();
        let scope = CallScope::new(log.clone(), "n");
        let err = generate_initial_answer(&c, &scope, "Q", &Outline::single("x"), list(&["a"])).unwrap_err();
        assert!(matches!(err, SynthesisError::EmptyAnswer { .. }));
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn final_rendering() {
        let a = answer("Body [1].", list(&["p9"]));
        assert_eq!(a.render_final(), "Body [1].\n\nReferences\n[1] Title p9 (p9)\n");
    }

    fn arb_list() -> impl Strategy<Value = ReferenceList> {
        prop::collection::vec((0u8..12, prop::option::of(0u8..3)), 0..15).prop_map(|rows| {
            let mut l = ReferenceList::default();
            for (p, s) in rows {
                l.push_unique(ReferenceEntry {
                    ref_index: 0,
                    paper_id: format!("p{p}"),
                    snippet_id: s.map(|s| format!("s{s}")),
                    title: format!("T{p}"),
                    display_text: format!("T{p}"),
                });
            }
            l
        })
    }

    proptest! {
        #[test]
        fn merge_with_self_is_identity(l in arb_list()) {
            let (merged, remaps) = merge_references(&l, &[&l]);
            prop_assert_eq!(&merged, &l);
            for remap in &remaps {
                prop_assert!(remap.iter().all(|(a, b)| a == b));
            }
        }

        #[test]
        fn merged_list_is_well_formed(a in arb_list(), b in arb_list(), c in arb_list()) {
            let (merged, remaps) = merge_references(&a, &[&b, &c]);
            prop_assert!(merged.is_well_formed());
            for (list, remap) in [&a, &b, &c].iter().zip(&remaps) {
                for e in &list.entries {
                    let target = &merged.entries[remap[&e.ref_index] - 1];
                    prop_assert_eq!(&target.paper_id, &e.paper_id);
                    prop_assert_eq!(&target.snippet_id, &e.snippet_id);
                }
            }
        }

        #[test]
        fn reindex_preserves_non_marker_bytes(
            parts in prop::collection::vec(("[a-z .,\n]{0,8}", 1usize..6), 0..10),
            tail in "[a-z .]{0,8}",
            perm in Just((1..=5usize).collect::<Vec<_>>()).prop_shuffle()
        ) {
            let text: String = parts.iter().map(|(s, i)| format!("{s}[{i}]")).collect::<String>() + &tail;
            let remap: Remap = (1..=5).map(|i| (i, perm[i - 1] * 11)).collect();
            let out = reindex_text(&text, &remap).unwrap();
            let strip = |s: &str| {
                let mut o = String::new();
                let mut last = 0;
                for m in scan_markers(s) {
                    o.push_str(&s[last..m.span.start]);
                    o.push('\u{0}');
                    last = m.span.end;
                }
                o.push_str(&s[last..]);
                o
            };
            prop_assert_eq!(strip(&text), strip(&out));
            let old: Vec<u64> = scan_markers(&text).iter().map(|m| m.index).collect();
            let new: Vec<u64> = scan_markers(&out).iter().map(|m| m.index).collect();
            let expect: Vec<u64> = old.iter().map(|&i| remap[&(i as usize)] as u64).collect();
            prop_assert_eq!(new, expect);
        }
    }
}
