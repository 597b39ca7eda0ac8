use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;

use super::{ClientConfig, LvlmBackend, LvlmClient, ResponseCache, TransportError};
use crate::prompting::{MultimodalPrompt, Segment};
use crate::Label;

/// Non-committal answer; parses as abstain.
pub const MOCK_ABSTAIN_RESPONSE: &str = "I'm sorry, I cannot determine the authenticity of this article.";

#[derive(Debug, Clone, PartialEq)]
pub enum MockPolicy {
    /// Repeat the last multimodal-classifier label found in the prompt.
    EchoSmallModel,
    Fixed(Label),
    /// Responses keyed by the test article's news text (the last `News:`
    /// line, without the prefix and trailing period).
    Scripted(HashMap<String, String>),
}

pub struct MockBackend {
    policy: MockPolicy,
    model_id: String,
}

impl MockBackend {
    pub fn new(policy: MockPolicy) -> Self {
        let model_id = match &policy {
            MockPolicy::EchoSmallModel => "mock-echo".to_string(),
            MockPolicy::Fixed(l) => format!("mock-fixed:{l}"),
            MockPolicy::Scripted(_) => "mock-scripted".to_string(),
        };
        Self { policy, model_id }
    }
}

fn echo_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Multimodal classifier prediction: (real|fake)").expect("static regex"))
}

fn test_news_text(prompt: &MultimodalPrompt) -> Option<&str> {
    prompt.segments.iter().rev().find_map(|s| match s {
        Segment::Text(t) => t.strip_prefix(" News: ").map(|rest| rest.strip_suffix('.').unwrap_or(rest)),
        Segment::Image(_) => None,
    })
}

impl LvlmBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &MultimodalPrompt, _: f64, _: Duration) -> Result<String, TransportError> {
        Ok(match &self.policy {
            MockPolicy::EchoSmallModel => {
                let text = prompt.plain_text();
                echo_pattern()
                    .captures_iter(&text)
                    .last()
                    .map(|c| c[1].to_string())
                    .unwrap_or_else(|| MOCK_ABSTAIN_RESPONSE.to_string())
            }
            MockPolicy::Fixed(label) => label.as_str().to_string(),
            MockPolicy::Scripted(map) => test_news_text(prompt)
                .and_then(|t| map.get(t))
                .cloned()
                .unwrap_or_else(|| MOCK_ABSTAIN_RESPONSE.to_string()),
        })
    }
}

/// Offline client with default settings and an in-memory cache.
pub fn make_mock_client(policy: MockPolicy) -> LvlmClient {
    LvlmClient::new(
        Arc::new(MockBackend::new(policy)),
        ClientConfig::default(),
        ResponseCache::in_memory(),
    )
    .expect("default config is valid")
}
