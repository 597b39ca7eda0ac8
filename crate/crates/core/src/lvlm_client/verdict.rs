use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Real,
    Fake,
    Abstain,
}

impl Verdict {
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Real => Some(Label::Real),
            Verdict::Fake => Some(Label::Fake),
            Verdict::Abstain => None,
        }
    }
}

impl From<Label> for Verdict {
    fn from(label: Label) -> Self {
        match label {
            Label::Real => Verdict::Real,
            Label::Fake => Verdict::Fake,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub verdict: Verdict,
    pub raw_response: String,
}

fn keyword() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(real|fake)\b").expect("static regex"))
}

/// First whole-word, case-insensitive `real` or `fake` wins; neither means
/// abstain.
pub fn parse_verdict(response: &str) -> ParsedVerdict {
    let verdict = match keyword().find(response) {
        Some(m) if m.as_str().eq_ignore_ascii_case("real") => Verdict::Real,
        Some(_) => Verdict::Fake,
        None => Verdict::Abstain,
    };
    ParsedVerdict {
        verdict,
        raw_response: response.to_string(),
    }
}
