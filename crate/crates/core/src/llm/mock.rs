//! Offline backends. Both are pure functions of the rendered prompt, so a
//! pipeline run against them is deterministic.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    approx_tokens, BackendError, ChatBackend, CompletionRequest, CompletionResult, TemplateId,
    Usage,
};

type Script = dyn Fn(&CompletionRequest<'_>) -> Option<String> + Send + Sync;

/// Backend driven by a closure; `None` is reported as a mock miss.
pub struct ScriptedBackend {
    script: Box<Script>,
    cost_per_call: f64,
    latency_ms: u64,
}

impl ScriptedBackend {
    pub fn new(
        script: impl Fn(&CompletionRequest<'_>) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Box::new(script),
            cost_per_call: 0.0,
            latency_ms: 0,
        }
    }

    pub fn with_cost(mut self, cost_per_call: f64) -> Self {
        self.cost_per_call = cost_per_call;
        self
    }

    /// Reported (not slept) latency per call.
    pub fn with_latency(mut self, latency_ms: u64) -> Self {
        self.latency_ms = latency_ms;
        self
    }
}

fn mock_usage(request: &CompletionRequest<'_>, text: &str, cost: f64, latency_ms: u64) -> Usage {
    Usage {
        prompt_tokens: approx_tokens(&request.prompt_text()),
        completion_tokens: approx_tokens(text),
        cost_usd: cost,
        latency_ms,
        retries: 0,
    }
}

fn miss(request: &CompletionRequest<'_>) -> BackendError {
    BackendError::MockMiss {
        template: request.template,
        hash: request.prompt_hash(),
        prompt: request.prompt_text(),
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        let text = (self.script)(request).ok_or_else(|| miss(request))?;
        let usage = mock_usage(request, &text, self.cost_per_call, self.latency_ms);
        Ok(CompletionResult { text, usage })
    }

    fn measures_latency(&self) -> bool {
        false
    }
}

/// One substring rule from `rules.json`. All present conditions must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateId>,
    /// Every string must occur in the prompt text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// No string may occur in the prompt text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    pub response: String,
}

impl MockRule {
    pub fn matches(&self, request: &CompletionRequest<'_>, prompt: &str) -> bool {
        self.template.is_none_or(|t| t == request.template)
            && self.contains.iter().all(|s| prompt.contains(s.as_str()))
            && !self.excludes.iter().any(|s| prompt.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRules {
    #[serde(default)]
    pub cost_per_call: f64,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub rules: Vec<MockRule>,
}

/// Fixture directory backend.
///
/// Layout: `responses/<prompt-hash>.txt` holds exact-prompt responses and
/// takes precedence; `rules.json` holds ordered substring rules where the
/// first match wins.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    dir: PathBuf,
    exact: HashMap<String, String>,
    rules: MockRules,
}

impl FixtureBackend {
    pub fn from_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mut exact = HashMap::new();
        let responses = dir.join("responses");
        if responses.is_dir() {
            for entry in fs::read_dir(&responses)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "txt") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        exact.insert(stem.to_string(), fs::read_to_string(&path)?);
                    }
                }
            }
        }
        let rules_path = dir.join("rules.json");
        let rules = if rules_path.is_file() {
            let raw = fs::read_to_string(&rules_path)?;
            serde_json::from_str(&raw).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}: {e}", rules_path.display()),
                )
            })?
        } else {
            MockRules::default()
        };
        Ok(Self { dir, exact, rules })
    }

    pub fn from_rules(rules: MockRules) -> Self {
        Self {
            dir: PathBuf::new(),
            exact: HashMap::new(),
            rules,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn rules(&self) -> &MockRules {
        &self.rules
    }
}

impl ChatBackend for FixtureBackend {
    fn name(&self) -> &str {
        "fixture"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<CompletionResult, BackendError> {
        let text = match self.exact.get(&request.prompt_hash()) {
            Some(t) => t.clone(),
            None => {
                let prompt = request.prompt_text();
                self.rules
                    .rules
                    .iter()
                    .find(|r| r.matches(request, &prompt))
                    .map(|r| r.response.clone())
                    .ok_or_else(|| miss(request))?
            }
        };
        let usage = mock_usage(request, &text, self.rules.cost_per_call, self.rules.latency_ms);
        Ok(CompletionResult { text, usage })
    }

    fn measures_latency(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{prompt_hash, ChatMessage, CompletionParams};

    fn request<'a>(
        template: TemplateId,
        messages: &'a [ChatMessage],
        params: &'a CompletionParams,
    ) -> CompletionRequest<'a> {
        CompletionRequest {
            template,
            messages,
            params,
        }
    }

    #[test]
    fn fixture_exact_beats_rules_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let msgs = vec![ChatMessage::user("what is a graph?")];
        fs::create_dir(dir.path().join("responses")).unwrap();
        fs::write(
            dir.path().join("responses").join(format!("{}.txt", prompt_hash(&msgs))),
            "exact hit",
        )
        .unwrap();
        fs::write(
            dir.path().join("rules.json"),
            r#"{"cost_per_call":0.01,"rules":[{"contains":["graph"],"response":"rule hit"}]}"#,
        )
        .unwrap();
        let backend = FixtureBackend::from_dir(dir.path()).unwrap();
        let params = CompletionParams::default();
        let a = backend.complete(&request(TemplateId::Outline, &msgs, &params)).unwrap();
        let b = backend.complete(&request(TemplateId::Outline, &msgs, &params)).unwrap();
        assert_eq!(a.text, "exact hit");
        assert_eq!(a, b);
        assert_eq!(a.usage.cost_usd, 0.01);

        let other = vec![ChatMessage::user("graph again")];
        let c = backend.complete(&request(TemplateId::Outline, &other, &params)).unwrap();
        assert_eq!(c.text, "rule hit");
    }

    #[test]
    fn rule_conditions_and_miss() {
        let backend = FixtureBackend::from_rules(MockRules {
            rules: vec![
                MockRule {
                    template: Some(TemplateId::Feedback),
                    contains: vec!["alpha".into()],
                    excludes: vec!["beta".into()],
                    response: "first".into(),
                },
                MockRule {
                    template: None,
                    contains: vec![],
                    excludes: vec![],
                    response: "fallback".into(),
                },
            ],
            ..MockRules::default()
        });
        let params = CompletionParams::default();
        let m1 = vec![ChatMessage::user("alpha")];
        let m2 = vec![ChatMessage::user("alpha beta")];
        assert_eq!(
            backend.complete(&request(TemplateId::Feedback, &m1, &params)).unwrap().text,
            "first"
        );
        assert_eq!(
            backend.complete(&request(TemplateId::Feedback, &m2, &params)).unwrap().text,
            "fallback"
        );
        assert_eq!(
            backend.complete(&request(TemplateId::Refine, &m1, &params)).unwrap().text,
            "fallback"
        );

        let empty = FixtureBackend::from_rules(MockRules::default());
        let err = empty
            .complete(&request(TemplateId::Outline, &m1, &params))
            .unwrap_err();
        match err {
            BackendError::MockMiss { prompt, .. } => assert_eq!(prompt, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
