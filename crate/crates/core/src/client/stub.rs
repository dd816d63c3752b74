use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{prompt_hash, Backend, ClientError, RoundOutput, RoundRequest, Source};

/// Scripted completions keyed on the prompt text.
///
/// Rules are tried in order; the first whose matcher and optional attempt
/// filter both match supplies the full completion. The stub then serves that
/// completion in rounds of at most `max_tokens` tokens, where a token is a
/// run of whitespace followed by a run of non-whitespace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default)]
    pub rules: Vec<StubRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub completion: String,
}

impl StubRule {
    pub fn exact(prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        Self {
            prompt: Some(prompt.into()),
            prompt_contains: None,
            prompt_sha256: None,
            attempt: None,
            completion: completion.into(),
        }
    }

    pub fn containing(needle: impl Into<String>, completion: impl Into<String>) -> Self {
        Self {
            prompt: None,
            prompt_contains: Some(needle.into()),
            prompt_sha256: None,
            attempt: None,
            completion: completion.into(),
        }
    }

    pub fn on_attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    fn matches(&self, prompt: &str, hash: &str, attempt: u32) -> bool {
        self.attempt.is_none_or(|a| a == attempt)
            && self.prompt.as_deref().is_none_or(|p| p == prompt)
            && self
                .prompt_contains
                .as_deref()
                .is_none_or(|n| prompt.contains(n))
            && self.prompt_sha256.as_deref().is_none_or(|h| {
                h == hash || hash.strip_prefix("sha256:") == Some(h)
            })
    }
}

impl StubScript {
    pub fn with_default(completion: impl Into<String>) -> Self {
        Self {
            default: Some(completion.into()),
            rules: Vec::new(),
        }
    }

    pub fn rule(mut self, rule: StubRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Backend(format!("stub script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ClientError::Backend(format!("stub script {}: {e}", path.display())))
    }

    fn lookup(&self, prompt: &str, attempt: u32) -> Result<&str, ClientError> {
        let hash = prompt_hash(prompt);
        self.rules
            .iter()
            .find(|r| r.matches(prompt, &hash, attempt))
            .map(|r| r.completion.as_str())
            .or(self.default.as_deref())
            .ok_or(ClientError::NoStubRule {
                prompt_hash: hash,
                attempt_index: attempt,
            })
    }
}

#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    script: StubScript,
}

impl StubBackend {
    pub fn new(script: StubScript) -> Self {
        Self { script }
    }
}

/// Byte offsets at which each stub token ends.
fn token_ends(text: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() && in_word {
            ends.push(i);
            in_word = false;
        } else if !c.is_whitespace() {
            in_word = true;
        }
    }
    if !text.is_empty() {
        ends.push(text.len());
    }
    ends
}

impl Backend for StubBackend {
    fn source(&self) -> Source {
        Source::Stub
    }

    fn round(&self, request: RoundRequest<'_>) -> Result<RoundOutput, ClientError> {
        let full = self.script.lookup(request.prompt, request.attempt_index)?;
        let remaining = full.strip_prefix(request.accumulated).ok_or_else(|| {
            ClientError::Backend("stub continuation diverged from its script".into())
        })?;
        let ends = token_ends(remaining);
        let budget = request.max_tokens as usize;
        let (cut, tokens) = if ends.len() <= budget {
            (remaining.len(), ends.len())
        } else {
            (ends[budget - 1], budget)
        };
        Ok(RoundOutput {
            text: remaining[..cut].to_string(),
            tokens,
            finished: cut == remaining.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::GenerationParams;

    #[test]
    fn tokens_concatenate_exactly() {
        let text = "  def f():\n    return 1\n";
        let ends = token_ends(text);
        assert_eq!(ends.len(), 5);
        assert_eq!(*ends.last().unwrap(), text.len());
        assert!(token_ends("").is_empty());
    }

    #[test]
    fn rules_match_in_order() {
        let script = StubScript::default()
            .rule(StubRule::containing("XOR", "wrong").on_attempt(1))
            .rule(StubRule::containing("XOR", "right"))
            .rule(StubRule::exact("p", "exact"));
        assert_eq!(script.lookup("use XOR", 1).unwrap(), "wrong");
        assert_eq!(script.lookup("use XOR", 2).unwrap(), "right");
        assert_eq!(script.lookup("p", 1).unwrap(), "exact");
        assert!(matches!(
            script.lookup("other", 1),
            Err(ClientError::NoStubRule { .. })
        ));
    }

    #[test]
    fn sha_rule_accepts_bare_hex() {
        let hash = prompt_hash("hello");
        let rule = StubRule {
            prompt_sha256: Some(hash.trim_start_matches("sha256:").to_string()),
            ..StubRule::exact("hello", "x")
        };
        assert!(rule.matches("hello", &hash, 1));
    }

    #[test]
    fn parses_script_json() {
        let script: StubScript = serde_json::from_str(
            r#"{"default": "", "rules": [{"prompt_contains": "NAND", "attempt": 2, "completion": "x"}]}"#,
        )
        .unwrap();
        assert_eq!(script.rules[0].attempt, Some(2));
        let backend = StubBackend::new(script);
        let out = backend
            .round(RoundRequest {
                prompt: "NAND",
                accumulated: "",
                params: &GenerationParams::default(),
                max_tokens: 128,
                attempt_index: 2,
            })
            .unwrap();
        assert_eq!(out.text, "x");
        assert!(out.finished);
    }
}
