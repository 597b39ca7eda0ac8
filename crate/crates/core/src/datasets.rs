//! Dataset ingest, best-image preprocessing, stratified splitting and n-shot
//! support sampling.
//!
//! Ingest format is JSONL, one object per line:
//! `{"id": str, "text": str, "image_paths": [str, ...], "label": 0|1, "language": "en"|"zh"}`
//! with image paths resolved relative to a declared root directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoders::{select_best_image, EncoderBackend, EncoderError};
use crate::rng::{domain, SeededRng};
use crate::Label;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{malformed} of {total} records are malformed (limit 1%)")]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("record `{id}` has no usable image: {reason}")]
    MissingImage { id: String, reason: String },
    #[error("record `{id}` lists {count} images; run preprocessing to select one")]
    AmbiguousImage { id: String, count: usize },
    #[error("class {label} has {count} members; at least 2 are required")]
    DegenerateDataset { label: Label, count: usize },
    #[error("class {label} has {available} training articles, {requested} requested")]
    InsufficientData { label: Label, available: usize, requested: usize },
    #[error("invalid fraction {0}; expected a value in (0, 1)")]
    InvalidFraction(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Shared, content-addressed image bytes.
#[derive(Clone)]
pub struct ImageRef {
    bytes: Arc<[u8]>,
    digest: String,
}

impl ImageRef {
    pub fn new(bytes: impl Into<Arc<[u8]>>) -> Self {
        let bytes: Arc<[u8]> = bytes.into();
        let digest = hex::encode(Sha256::digest(&bytes));
        Self { bytes, digest }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Hex SHA-256 of the bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.digest == other.digest
    }
}

impl Eq for ImageRef {}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageRef({}…, {} bytes)", &self.digest[..12], self.bytes.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[default]
    En,
    Zh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsArticle {
    pub id: String,
    pub text: String,
    pub image: ImageRef,
    pub label: Label,
    pub language: Language,
}

/// One JSONL line before image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    pub image_paths: Vec<String>,
    #[serde(with = "label_code")]
    pub label: Label,
    #[serde(default)]
    pub language: Language,
}

mod label_code {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::Label;

    pub fn serialize<S: Serializer>(label: &Label, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(label.index() as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Label, D::Error> {
        let code = u64::deserialize(d)?;
        Label::from_index(code as usize).ok_or_else(|| D::Error::custom(format!("label must be 0 or 1, found {code}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

impl ClassCounts {
    pub fn of<'a>(labels: impl IntoIterator<Item = &'a Label>) -> Self {
        let mut c = Self::default();
        for l in labels {
            match l {
                Label::Real => c.real += 1,
                Label::Fake => c.fake += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.real + self.fake
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Real => self.real,
            Label::Fake => self.fake,
        }
    }
}

#[derive(Debug)]
pub struct RecordSet {
    pub records: Vec<RawRecord>,
    /// Skipped lines with their schema errors.
    pub malformed: Vec<DatasetError>,
}

/// Parses a JSONL file, skipping (and logging) malformed lines. Fails when
/// more than 1% of non-blank lines are malformed.
pub fn read_records(path: &Path) -> Result<RecordSet> {
    let raw = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    let mut malformed = Vec::new();
    let mut seen = HashSet::new();
    let mut total = 0;
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<RawRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| {
                if r.id.is_empty() {
                    Err("empty id".to_string())
                } else if r.text.trim().is_empty() {
                    Err(format!("record `{}` has empty text", r.id))
                } else if !seen.insert(r.id.clone()) {
                    Err(format!("duplicate id `{}`", r.id))
                } else {
                    Ok(r)
                }
            });
        match parsed {
            Ok(r) => records.push(r),
            Err(message) => {
                let err = DatasetError::Schema { line: i + 1, message };
                warn!("{}: skipping {err}", path.display());
                malformed.push(err);
            }
        }
    }
    if malformed.len() * 100 > total {
        return Err(DatasetError::TooManyMalformed {
            malformed: malformed.len(),
            total,
        });
    }
    Ok(RecordSet { records, malformed })
}

#[derive(Debug)]
pub struct Dataset {
    pub articles: Vec<NewsArticle>,
    pub counts: ClassCounts,
    pub skipped: Vec<DatasetError>,
}

impl Dataset {
    pub fn digest(&self) -> String {
        dataset_digest(&self.articles)
    }
}

fn read_image(root: &Path, rel: &str, id: &str) -> Result<ImageRef> {
    let path = root.join(rel);
    fs::read(&path)
        .map(ImageRef::new)
        .map_err(|e| DatasetError::MissingImage {
            id: id.to_string(),
            reason: format!("{}: {e}", path.display()),
        })
}

fn default_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a preprocessed dataset (one image per record).
pub fn load_dataset(path: &Path, image_root: Option<&Path>) -> Result<Dataset> {
    load_dataset_with(path, image_root, None)
}

/// Like [`load_dataset`], but records with several images are resolved with
/// [`select_best_image`] when a backend is given.
pub fn load_dataset_with(path: &Path, image_root: Option<&Path>, backend: Option<&dyn EncoderBackend>) -> Result<Dataset> {
    let set = read_records(path)?;
    let root = image_root.map(Path::to_path_buf).unwrap_or_else(|| default_root(path));
    let articles = match backend {
        Some(b) => preprocess_multi_image(&set.records, &root, b)?.into_iter().map(|(a, _)| a).collect(),
        None => set
            .records
            .iter()
            .map(|r| match r.image_paths.as_slice() {
                [] => Err(DatasetError::MissingImage {
                    id: r.id.clone(),
                    reason: "image_paths is empty".into(),
                }),
                [only] => Ok(article_from(r, read_image(&root, only, &r.id)?)),
                many => Err(DatasetError::AmbiguousImage {
                    id: r.id.clone(),
                    count: many.len(),
                }),
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let counts = ClassCounts::of(articles.iter().map(|a| &a.label));
    Ok(Dataset {
        articles,
        counts,
        skipped: set.malformed,
    })
}

fn article_from(r: &RawRecord, image: ImageRef) -> NewsArticle {
    NewsArticle {
        id: r.id.clone(),
        text: r.text.clone(),
        image,
        label: r.label,
        language: r.language,
    }
}

/// Keeps, per record, the candidate image most similar to its text. Returns
/// each article with the relative path of the retained image.
pub fn preprocess_multi_image(
    records: &[RawRecord],
    image_root: &Path,
    backend: &dyn EncoderBackend,
) -> Result<Vec<(NewsArticle, String)>> {
    records
        .iter()
        .map(|r| {
            if r.image_paths.is_empty() {
                return Err(DatasetError::MissingImage {
                    id: r.id.clone(),
                    reason: "image_paths is empty".into(),
                });
            }
            let images = r
                .image_paths
                .iter()
                .map(|p| read_image(image_root, p, &r.id))
                .collect::<Result<Vec<_>>>()?;
            let best = if images.len() == 1 {
                0
            } else {
                let bytes: Vec<&[u8]> = images.iter().map(ImageRef::bytes).collect();
                select_best_image(backend, &r.text, &bytes)?
            };
            Ok((article_from(r, images[best].clone()), r.image_paths[best].clone()))
        })
        .collect()
}

/// SHA-256 over records sorted by id, each contributing `id \0 label \n`.
pub fn dataset_digest(articles: &[NewsArticle]) -> String {
    let mut keyed: Vec<(&str, Label)> = articles.iter().map(|a| (a.id.as_str(), a.label)).collect();
    keyed.sort();
    let mut hasher = Sha256::new();
    for (id, label) in keyed {
        hasher.update(id.as_bytes());
        hasher.update([0u8, label.index() as u8, b'\n']);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<NewsArticle>,
    pub test: Vec<NewsArticle>,
    pub seed: u64,
    pub fraction: f64,
}

/// Round half up, tolerant of representation error just below `.5`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

pub fn test_count(fraction: f64, class_size: usize) -> usize {
    round_half_up(fraction * class_size as f64).min(class_size)
}

fn by_class(articles: &[NewsArticle], label: Label) -> Vec<NewsArticle> {
    let mut members: Vec<NewsArticle> = articles.iter().filter(|a| a.label == label).cloned().collect();
    members.sort_by(|a, b| a.id.cmp(&b.id));
    members
}

/// Per-class shuffle (members ordered by id, then a seeded partial
/// Fisher-Yates); the first `round_half_up(fraction * size)` of each class go
/// to test. Classes are processed REAL then FAKE from one generator.
pub fn stratified_split(articles: &[NewsArticle], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let mut rng = SeededRng::for_domain(seed, domain::SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in Label::ALL {
        let mut members = by_class(articles, label);
        if members.len() < 2 {
            return Err(DatasetError::DegenerateDataset {
                label,
                count: members.len(),
            });
        }
        let k = test_count(fraction, members.len());
        rng.partial_shuffle(&mut members, k);
        let rest = members.split_off(k);
        test.extend(members);
        train.extend(rest);
    }
    Ok(DatasetSplit {
        train,
        test,
        seed,
        fraction,
    })
}

#[derive(Debug, Clone)]
pub struct SupportSet {
    /// Interleaved REAL, FAKE, REAL, ... in draw order.
    pub articles: Vec<NewsArticle>,
    pub n_per_class: usize,
    pub seed: u64,
}

impl SupportSet {
    /// SHA-256 over the ordered member ids.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for a in &self.articles {
            hasher.update(a.id.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Draws `n` articles per class from `split.train` without replacement.
pub fn sample_n_shot(split: &DatasetSplit, n: usize, seed: u64) -> Result<SupportSet> {
    let mut rng = SeededRng::for_domain(seed, domain::SUPPORT);
    let mut drawn = Vec::new();
    for label in Label::ALL {
        let mut members = by_class(&split.train, label);
        if members.len() < n {
            return Err(DatasetError::InsufficientData {
                label,
                available: members.len(),
                requested: n,
            });
        }
        rng.partial_shuffle(&mut members, n);
        members.truncate(n);
        drawn.push(members);
    }
    let fake = drawn.pop().expect("two classes");
    let real = drawn.pop().expect("two classes");
    let articles = real.into_iter().zip(fake).flat_map(|(r, f)| [r, f]).collect();
    Ok(SupportSet {
        articles,
        n_per_class: n,
        seed,
    })
}
