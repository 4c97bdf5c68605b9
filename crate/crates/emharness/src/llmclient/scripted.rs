//! Scripted backend: deterministic canned responses for offline experiments
//! and tests.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{whitespace_tokens, ChatBackend, ClientError, CompletionRequest, CompletionResult, TokenUsage};

#[derive(Debug)]
pub enum ScriptMatcher {
    /// Entire last user message must match byte for byte.
    Exact(String),
    /// Last user message must contain the fragment.
    Substring(String),
    /// Last user message must match the regular expression.
    Pattern(regex::Regex),
}

impl ScriptMatcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            ScriptMatcher::Exact(text) => prompt == text,
            ScriptMatcher::Substring(fragment) => prompt.contains(fragment),
            ScriptMatcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ScriptOutcome {
    Respond(String),
    /// Injected failure for exercising retry and error paths.
    Fail { message: String, transient: bool },
}

#[derive(Debug)]
pub struct ScriptEntry {
    pub matcher: ScriptMatcher,
    pub outcome: ScriptOutcome,
    /// Override for the reported usage; whitespace token counts otherwise.
    pub usage: Option<TokenUsage>,
    pub delay: Duration,
}

impl ScriptEntry {
    pub fn exact(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: ScriptMatcher::Exact(prompt.into()),
            outcome: ScriptOutcome::Respond(response.into()),
            usage: None,
            delay: Duration::ZERO,
        }
    }

    pub fn substring(fragment: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: ScriptMatcher::Substring(fragment.into()),
            outcome: ScriptOutcome::Respond(response.into()),
            usage: None,
            delay: Duration::ZERO,
        }
    }

    pub fn pattern(pattern: &str, response: impl Into<String>) -> Result<Self, ClientError> {
        let re = regex::Regex::new(pattern).map_err(|e| ClientError::BadScript {
            message: format!("invalid pattern {pattern:?}: {e}"),
        })?;
        Ok(ScriptEntry {
            matcher: ScriptMatcher::Pattern(re),
            outcome: ScriptOutcome::Respond(response.into()),
            usage: None,
            delay: Duration::ZERO,
        })
    }

    pub fn failing(fragment: impl Into<String>, message: impl Into<String>, transient: bool) -> Self {
        ScriptEntry {
            matcher: ScriptMatcher::Substring(fragment.into()),
            outcome: ScriptOutcome::Fail {
                message: message.into(),
                transient,
            },
            usage: None,
            delay: Duration::ZERO,
        }
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some(TokenUsage::new(prompt_tokens, completion_tokens));
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// Replays canned responses keyed off the last user message. Entries are
/// consulted in order and the first match wins; an optional fallback answers
/// anything unmatched, otherwise unmatched prompts are an error.
pub struct ScriptedBackend {
    name: String,
    entries: Vec<ScriptEntry>,
    fallback: Option<String>,
}

#[derive(Deserialize)]
struct ScriptFile {
    #[serde(default)]
    fallback: Option<String>,
    entries: Vec<ScriptFileEntry>,
}

#[derive(Deserialize)]
struct ScriptFileEntry {
    match_kind: String,
    pattern: String,
    response: String,
    #[serde(default)]
    usage: Option<TokenUsage>,
    #[serde(default)]
    delay_ms: u64,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>) -> Self {
        ScriptedBackend {
            name: name.into(),
            entries: Vec::new(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn with_entry(mut self, entry: ScriptEntry) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn push(&mut self, entry: ScriptEntry) {
        self.entries.push(entry);
    }

    /// Load a script from JSON: `{"fallback": ..., "entries": [{"match_kind":
    /// "exact"|"substring"|"pattern", "pattern": ..., "response": ...,
    /// "usage"?: {...}, "delay_ms"?: n}]}`.
    pub fn from_json_file(path: &Path) -> Result<Self, ClientError> {
        let raw = std::fs::read_to_string(path)?;
        let file: ScriptFile = serde_json::from_str(&raw).map_err(|e| ClientError::BadScript {
            message: format!("{}: {e}", path.display()),
        })?;
        let mut backend = ScriptedBackend::new("scripted");
        backend.fallback = file.fallback;
        for entry in file.entries {
            let matcher = match entry.match_kind.as_str() {
                "exact" => ScriptMatcher::Exact(entry.pattern),
                "substring" => ScriptMatcher::Substring(entry.pattern),
                "pattern" => ScriptMatcher::Pattern(regex::Regex::new(&entry.pattern).map_err(
                    |e| ClientError::BadScript {
                        message: format!("invalid pattern {:?}: {e}", entry.pattern),
                    },
                )?),
                other => {
                    return Err(ClientError::BadScript {
                        message: format!("unknown match_kind {other:?}"),
                    })
                }
            };
            backend.entries.push(ScriptEntry {
                matcher,
                outcome: ScriptOutcome::Respond(entry.response),
                usage: entry.usage,
                delay: Duration::from_millis(entry.delay_ms),
            });
        }
        Ok(backend)
    }

    fn respond(
        &self,
        request: &CompletionRequest,
        text: &str,
        usage: Option<TokenUsage>,
        started: Instant,
    ) -> CompletionResult {
        let usage = usage.unwrap_or_else(|| {
            let prompt: u64 = request
                .conversation
                .messages
                .iter()
                .map(|m| whitespace_tokens(&m.content))
                .sum();
            TokenUsage::new(prompt, whitespace_tokens(text))
        });
        CompletionResult {
            text: text.to_string(),
            usage,
            latency_secs: started.elapsed().as_secs_f64(),
            backend: self.name.clone(),
            cached: false,
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        let started = Instant::now();
        let prompt = request.conversation.last_user_content().unwrap_or("");
        for entry in &self.entries {
            if entry.matcher.matches(prompt) {
                if !entry.delay.is_zero() {
                    std::thread::sleep(entry.delay);
                }
                return match &entry.outcome {
                    ScriptOutcome::Respond(text) => {
                        Ok(self.respond(request, text, entry.usage, started))
                    }
                    ScriptOutcome::Fail { message, transient } => Err(ClientError::Scripted {
                        message: message.clone(),
                        transient: *transient,
                    }),
                };
            }
        }
        match &self.fallback {
            Some(text) => Ok(self.respond(request, text, None, started)),
            None => Err(ClientError::ScriptMiss {
                preview: prompt.chars().take(80).collect(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptkit::{Message, RenderedConversation};
    use std::io::Write;

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest::new(
            "toy-model",
            RenderedConversation::new(vec![Message::user(prompt)]),
        )
    }

    #[test]
    fn first_matching_entry_wins() {
        let backend = ScriptedBackend::new("scripted")
            .with_entry(ScriptEntry::substring("tape", "Yes."))
            .with_entry(ScriptEntry::substring("dymo", "No."));
        let result = backend.complete(&request("dymo tape 12mm")).unwrap();
        assert_eq!(result.text, "Yes.");
    }

    #[test]
    fn matchers_inspect_the_last_user_message() {
        let backend = ScriptedBackend::new("scripted")
            .with_entry(ScriptEntry::exact("exact prompt", "a"))
            .with_entry(ScriptEntry::pattern(r"^item-\d+$", "b").unwrap())
            .with_entry(ScriptEntry::substring("needle", "c"));
        assert_eq!(backend.complete(&request("exact prompt")).unwrap().text, "a");
        assert_eq!(backend.complete(&request("item-042")).unwrap().text, "b");
        assert_eq!(
            backend
                .complete(&request("haystack with needle inside"))
                .unwrap()
                .text,
            "c"
        );
        // Exact means the whole message, not a prefix.
        assert!(backend.complete(&request("exact prompt plus")).is_err());

        let multi_turn = CompletionRequest::new(
            "toy-model",
            RenderedConversation::new(vec![
                Message::user("needle in the first turn"),
                Message::assistant("Yes."),
                Message::user("nothing to see"),
            ]),
        );
        assert!(matches!(
            backend.complete(&multi_turn),
            Err(ClientError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn fallback_answers_unmatched_prompts() {
        let backend = ScriptedBackend::new("scripted").with_fallback("No.");
        assert_eq!(backend.complete(&request("anything")).unwrap().text, "No.");
    }

    #[test]
    fn default_usage_counts_whitespace_tokens() {
        let backend = ScriptedBackend::new("scripted").with_fallback("No, they differ.");
        let req = CompletionRequest::new(
            "toy-model",
            RenderedConversation::new(vec![
                Message::user("one two three"),
                Message::assistant("four"),
                Message::user("five six"),
            ]),
        );
        let result = backend.complete(&req).unwrap();
        assert_eq!(result.usage, TokenUsage::new(6, 3));
    }

    #[test]
    fn explicit_usage_overrides_the_token_count() {
        let backend = ScriptedBackend::new("scripted")
            .with_entry(ScriptEntry::substring("x", "Yes.").with_usage(71, 49));
        let result = backend.complete(&request("x")).unwrap();
        assert_eq!(result.usage, TokenUsage::new(71, 49));
    }

    #[test]
    fn scripted_delay_shows_up_in_latency() {
        let backend = ScriptedBackend::new("scripted").with_entry(
            ScriptEntry::substring("slow", "Yes.").with_delay(Duration::from_millis(30)),
        );
        let result = backend.complete(&request("slow prompt")).unwrap();
        assert!(result.latency_secs >= 0.03);
    }

    #[test]
    fn script_files_load_entries_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(
            f,
            r#"{{
                "fallback": "No.",
                "entries": [
                    {{"match_kind": "substring", "pattern": "alpha", "response": "Yes.",
                      "usage": {{"prompt_tokens": 10, "completion_tokens": 1}}}},
                    {{"match_kind": "exact", "pattern": "beta", "response": "No."}}
                ]
            }}"#
        )
        .unwrap();
        let backend = ScriptedBackend::from_json_file(&path).unwrap();
        let hit = backend.complete(&request("contains alpha token")).unwrap();
        assert_eq!(hit.text, "Yes.");
        assert_eq!(hit.usage, TokenUsage::new(10, 1));
        assert_eq!(backend.complete(&request("unmatched")).unwrap().text, "No.");
    }

    #[test]
    fn bad_script_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(
            &path,
            r#"{"entries": [{"match_kind": "glob", "pattern": "x", "response": "y"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            ScriptedBackend::from_json_file(&path),
            Err(ClientError::BadScript { .. })
        ));
    }
}
