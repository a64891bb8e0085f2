//! The Step-2 relationship grammar: `[i]L -> [j]L'` or `[i]L -> [Q]`.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Role tag of a paper segment. Unknown tokens are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    T,
    E,
    M,
    A,
    Other(String),
}

impl Label {
    /// Known labels match case-insensitively; anything else is preserved.
    pub fn from_token(token: &str) -> Self {
        match token.trim() {
            t if t.eq_ignore_ascii_case("t") => Label::T,
            t if t.eq_ignore_ascii_case("e") => Label::E,
            t if t.eq_ignore_ascii_case("m") => Label::M,
            t if t.eq_ignore_ascii_case("a") => Label::A,
            t => Label::Other(t.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Label::T => "T",
            Label::E => "E",
            Label::M => "M",
            Label::A => "A",
            Label::Other(s) => s,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Label::from_token(&String::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelEndpoint {
    Paper { paper_index: usize, label: Label },
    Query,
}

impl fmt::Display for RelEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelEndpoint::Paper { paper_index, label } => write!(f, "[{paper_index}]{label}"),
            RelEndpoint::Query => f.write_str("[Q]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SymbolError {
    #[error("malformed relationship symbol {0:?}")]
    Malformed(String),
    #[error("relationship symbol {0:?} starts at the query; sources must be papers")]
    QuerySource(String),
}

fn symbol_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^\s*\[\s*([1-9]\d*)\s*\]\s*([A-Za-z][A-Za-z0-9_]*)\s*(?:->|→)\s*\[\s*(?:([1-9]\d*)\s*\]\s*([A-Za-z][A-Za-z0-9_]*)|([Qq])\s*\])\s*$",
        )
        .expect("static regex")
    })
}

fn query_source_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\[\s*[Qq]\s*\]").expect("static regex"))
}

/// Parses one relationship symbol, tolerating whitespace around every token
/// and the Unicode arrow.
pub fn parse_relation_symbol(text: &str) -> Result<(RelEndpoint, RelEndpoint), SymbolError> {
    let Some(caps) = symbol_regex().captures(text) else {
        if query_source_regex().is_match(text) {
            return Err(SymbolError::QuerySource(text.to_string()));
        }
        return Err(SymbolError::Malformed(text.to_string()));
    };
    let index = |i: usize| -> Result<usize, SymbolError> {
        caps[i]
            .parse()
            .map_err(|_| SymbolError::Malformed(text.to_string()))
    };
    let source = RelEndpoint::Paper {
        paper_index: index(1)?,
        label: Label::from_token(&caps[2]),
    };
    let target = if caps.get(5).is_some() {
        RelEndpoint::Query
    } else {
        RelEndpoint::Paper {
            paper_index: index(3)?,
            label: Label::from_token(&caps[4]),
        }
    };
    Ok((source, target))
}

/// Canonical text form, `[i]L -> [j]L'` or `[i]L -> [Q]`.
pub fn format_relation_symbol(source: &RelEndpoint, target: &RelEndpoint) -> String {
    format!("{source} -> {target}")
}
