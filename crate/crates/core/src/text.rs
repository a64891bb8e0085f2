//! Sentence segmentation and citation-marker scanning shared by the corpus
//! loader (default snippet windows), the synthesis module and the metrics.

use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;

/// Abbreviations whose trailing period never ends a sentence. Compared
/// case-insensitively against the text right before a candidate boundary.
const ABBREVIATIONS: &[&str] = &["e.g.", "i.e.", "et al.", "fig.", "eq."];

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").expect("static regex"))
}

/// A `[n]` citation marker found in text; `span` is a byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerHit {
    pub index: u64,
    pub span: Range<usize>,
}

/// All `[n]` markers in order of appearance. Indices that overflow `u64`
/// are reported as `u64::MAX` so callers treat them as dangling.
pub fn scan_markers(text: &str) -> Vec<MarkerHit> {
    marker_regex()
        .captures_iter(text)
        .map(|caps| {
            let whole = caps.get(0).expect("group 0");
            let index = caps[1].parse::<u64>().unwrap_or(u64::MAX);
            MarkerHit {
                index,
                span: whole.range(),
            }
        })
        .collect()
}

fn is_closer(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '"' | '\'' | ')' | '\u{201d}' | '\u{2019}')
}

fn guarded(text: &str, punct_end: usize) -> bool {
    let head = &text[..punct_end];
    let lower = head.to_lowercase();
    for abbr in ABBREVIATIONS {
        if lower.ends_with(abbr) {
            let before = &lower[..lower.len() - abbr.len()];
            if before
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric())
            {
                return true;
            }
        }
    }
    // "1." / "2)" style list numbering at the start of a line.
    let line = head.rsplit('\n').next().unwrap_or(head);
    let stripped = line
        .trim_start()
        .trim_start_matches(['-', '*', '#', ' '])
        .trim_end_matches('.');
    !stripped.is_empty() && stripped.chars().all(|c| c.is_ascii_digit())
}

/// Position right after any `[n]` markers that follow `from` (spaces allowed
/// before the first marker). Returns `from` when no marker follows.
fn absorb_markers(text: &str, from: usize) -> usize {
    let rest = &text[from..];
    let trimmed = rest.trim_start_matches(' ');
    let mut pos = from + (rest.len() - trimmed.len());
    let mut matched = false;
    loop {
        let tail = &text[pos..];
        match marker_regex().find(tail) {
            Some(m) if m.start() == 0 => {
                pos += m.end();
                matched = true;
            }
            _ => break,
        }
    }
    if matched {
        pos
    } else {
        from
    }
}

/// Byte ranges of sentences in `text`, trimmed, empty units skipped.
///
/// A boundary is sentence-final punctuation (plus closing quotes/brackets and
/// any directly following `[n]` markers) followed by whitespace or the end of
/// the text. Text without terminal punctuation, such as headings, merges into
/// the following sentence.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((pos, c)) = iter.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let mut end = pos + c.len_utf8();
        while let Some(&(p, n)) = iter.peek() {
            if is_closer(n) {
                end = p + n.len_utf8();
                iter.next();
            } else {
                break;
            }
        }
        let after = absorb_markers(text, end);
        let at_break = text[after..].chars().next().is_none_or(char::is_whitespace);
        if !at_break || guarded(text, end) {
            continue;
        }
        push_trimmed(text, start..after, &mut spans);
        start = after;
        while iter.peek().is_some_and(|&(p, _)| p < after) {
            iter.next();
        }
    }
    push_trimmed(text, start..text.len(), &mut spans);
    spans
}

fn push_trimmed(text: &str, range: Range<usize>, out: &mut Vec<Range<usize>>) {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    if lead + trail < slice.len() {
        out.push(range.start + lead..range.end - trail);
    }
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// Lowercased alphanumeric tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}
