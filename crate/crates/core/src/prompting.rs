//! Prompt templates and prompt assembly.
//!
//! Every rendered article is a short run of segments: a text lead-in, the
//! image, and the `News:` line. Example articles additionally end with a
//! blank-line separator so that a flat concatenation of segments reads:
//!
//! ```text
//! Read this news and its image, ... Just answer if it's real or fake. This is a fake news. [IMAGE] News: <text>.
//!
//! Read this news and its image, ... Just answer if it's real or fake. [IMAGE] News: <text>.
//! ```
//!
//! Spacing lives inside the text segments, so [`MultimodalPrompt::to_marked_text`]
//! is a plain concatenation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{HeadVote, SmallModelPrediction};
use crate::datasets::{ImageRef, NewsArticle};
use crate::Label;

pub const INSTRUCTION: &str =
    "Read this news and its image, do you think this is real or fake news? Just answer if it's real or fake.";
/// Sentinel standing in for an image in text renderings and golden files.
pub const IMAGE_SENTINEL: &str = "[IMAGE]";
/// Separator closing every in-context example.
pub const EXAMPLE_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("mode {0} requires a small-model prediction")]
    MissingPrediction(PromptMode),
    #[error("mode {0} takes no in-context examples")]
    NoExamplesInMode(PromptMode),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    /// Standard in-context learning: ground-truth labels only.
    Icl,
    /// Labels plus small-model predictions and confidences.
    Imfnd,
    /// Labels plus small-model predictions without confidences.
    ImfndNoProba,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::ZeroShot, PromptMode::Icl, PromptMode::Imfnd, PromptMode::ImfndNoProba];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::Icl => "icl",
            PromptMode::Imfnd => "imfnd",
            PromptMode::ImfndNoProba => "imfnd_no_proba",
        }
    }

    pub fn uses_predictions(self) -> bool {
        matches!(self, PromptMode::Imfnd | PromptMode::ImfndNoProba)
    }

    pub fn uses_examples(self) -> bool {
        self != PromptMode::ZeroShot
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zeroshot" => Ok(PromptMode::ZeroShot),
            "icl" => Ok(PromptMode::Icl),
            "imfnd" => Ok(PromptMode::Imfnd),
            "imfnd_no_proba" => Ok(PromptMode::ImfndNoProba),
            other => Err(format!("unknown prompt mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrompt {
    pub segments: Vec<Segment>,
    pub temperature: f64,
}

impl MultimodalPrompt {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Text with each image replaced by [`IMAGE_SENTINEL`].
    pub fn to_marked_text(&self) -> String {
        marked_text(&self.segments)
    }

    /// Text segments only, concatenated.
    pub fn plain_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                Segment::Image(_) => None,
            })
            .collect()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(i) => Some(i),
            Segment::Text(_) => None,
        })
    }

    /// Unambiguous serialisation with images by digest; feeds cache keys.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.segments {
            let (tag, body) = match s {
                Segment::Text(t) => (b'T', t.as_bytes()),
                Segment::Image(i) => (b'I', i.digest().as_bytes()),
            };
            out.push(tag);
            out.extend((body.len() as u64).to_le_bytes());
            out.extend(body);
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

pub fn marked_text(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => t.as_str(),
            Segment::Image(_) => IMAGE_SENTINEL,
        })
        .collect()
}

fn percent(confidence: f64) -> u32 {
    (confidence * 100.0).round() as u32
}

fn classifier_sentence(out: &mut String, name: &str, vote: HeadVote, with_probability: bool) {
    out.push(' ');
    out.push_str(name);
    out.push_str(" classifier prediction: ");
    out.push_str(vote.label.as_str());
    if with_probability {
        out.push_str(&format!(" with {}% confidence", percent(vote.confidence)));
    }
    out.push('.');
}

fn lead_in(ground_truth: Option<Label>, pred: Option<&SmallModelPrediction>, mode: PromptMode) -> Result<String> {
    let mut text = String::from(INSTRUCTION);
    if let Some(label) = ground_truth {
        text.push_str(&format!(" This is a {} news.", label.as_str()));
    }
    if mode.uses_predictions() {
        let pred = pred.ok_or(PromptError::MissingPrediction(mode))?;
        let with_probability = mode == PromptMode::Imfnd;
        classifier_sentence(&mut text, "Text", pred.text, with_probability);
        classifier_sentence(&mut text, "Image", pred.image, with_probability);
        classifier_sentence(&mut text, "Multimodal", pred.meta, with_probability);
    }
    text.push(' ');
    Ok(text)
}

fn news_line(article: &NewsArticle) -> Segment {
    Segment::Text(format!(" News: {}.", article.text.trim()))
}

/// An in-context example: lead-in with the ground-truth label, image, news
/// line, separator.
pub fn render_example(
    article: &NewsArticle,
    label: Label,
    pred: Option<&SmallModelPrediction>,
    mode: PromptMode,
) -> Result<Vec<Segment>> {
    if !mode.uses_examples() {
        return Err(PromptError::NoExamplesInMode(mode));
    }
    Ok(vec![
        Segment::Text(lead_in(Some(label), pred, mode)?),
        Segment::Image(article.image.clone()),
        news_line(article),
        Segment::Text(EXAMPLE_SEPARATOR.into()),
    ])
}

/// The query article: lead-in without any label, image, news line.
pub fn render_test_input(article: &NewsArticle, pred: Option<&SmallModelPrediction>, mode: PromptMode) -> Result<Vec<Segment>> {
    Ok(vec![
        Segment::Text(lead_in(None, pred, mode)?),
        Segment::Image(article.image.clone()),
        news_line(article),
    ])
}

/// Examples in the given order, then the test input.
pub fn assemble_prompt(examples: Vec<Vec<Segment>>, test: Vec<Segment>, temperature: f64) -> MultimodalPrompt {
    let mut segments: Vec<Segment> = examples.into_iter().flatten().collect();
    segments.extend(test);
    MultimodalPrompt { segments, temperature }
}
