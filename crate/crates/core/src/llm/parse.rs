//! Output conventions shared by every prompt: the `[Response_Start]` /
//! `[Response_End]` envelope, embedded JSON payloads and termination
//! sentinels.

use serde_json::Value;

pub const RESPONSE_START: &str = "[Response_Start]";
pub const RESPONSE_END: &str = "[Response_End]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delimited {
    pub text: String,
    /// True when the envelope was missing or incomplete.
    pub fallback: bool,
}

/// Text strictly between the first start marker and the last end marker.
pub fn extract_delimited(text: &str) -> Delimited {
    let start = text.find(RESPONSE_START);
    let end = text.rfind(RESPONSE_END);
    match (start, end) {
        (Some(s), Some(e)) if e >= s + RESPONSE_START.len() => Delimited {
            text: text[s + RESPONSE_START.len()..e].trim().to_string(),
            fallback: false,
        },
        (Some(s), _) => Delimited {
            text: text[s + RESPONSE_START.len()..].trim().to_string(),
            fallback: true,
        },
        (None, Some(e)) => Delimited {
            text: text[..e].trim().to_string(),
            fallback: true,
        },
        (None, None) => Delimited {
            text: text.trim().to_string(),
            fallback: true,
        },
    }
}

pub fn wrap_delimited(inner: &str) -> String {
    format!("{RESPONSE_START}{inner}{RESPONSE_END}")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no parseable JSON payload in model output")]
pub struct JsonPayloadError {
    pub raw: String,
}

/// End (exclusive) of the balanced JSON value opening at `start`, honoring
/// string literals and escapes.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut stack: Vec<u8> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn normalize_quotes(text: &str) -> String {
    text.replace(['\u{201c}', '\u{201d}'], "\"")
        .replace(['\u{2018}', '\u{2019}'], "'")
}

/// Removes commas that directly precede a closing bracket, outside strings.
fn strip_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|n| !n.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn candidates(text: &str) -> impl Iterator<Item = &str> {
    text.char_indices()
        .filter(|(_, c)| *c == '{' || *c == '[')
        .filter_map(move |(i, _)| balanced_end(text, i).map(|end| &text[i..end]))
}

/// First balanced JSON object or array in `text` that parses, trying the
/// raw text before the two repair rules (smart quotes, trailing commas).
pub fn extract_json_payload(text: &str) -> Result<Value, JsonPayloadError> {
    for slice in candidates(text) {
        if let Ok(v) = serde_json::from_str::<Value>(slice) {
            return Ok(v);
        }
    }
    let normalized = normalize_quotes(text);
    for slice in candidates(&normalized) {
        if let Ok(v) = serde_json::from_str::<Value>(&strip_trailing_commas(slice)) {
            return Ok(v);
        }
    }
    Err(JsonPayloadError {
        raw: text.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sentinel {
    /// `[end]terminate` from the sub-query decision prompt.
    SubqueryTerminate,
    /// `Feedback: [terminate]` from the feedback prompt.
    FeedbackTerminate,
}

impl Sentinel {
    pub fn token(self) -> &'static str {
        match self {
            Sentinel::SubqueryTerminate => "[end]terminate",
            Sentinel::FeedbackTerminate => "feedback: [terminate]",
        }
    }
}

/// Lowercases and collapses whitespace runs to one space.
pub fn normalize_for_match(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn detect_sentinel(text: &str, sentinel: Sentinel) -> bool {
    normalize_for_match(text).contains(sentinel.token())
}
