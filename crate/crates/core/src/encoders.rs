//! Text and image encoders.
//!
//! A backend turns raw text or image bytes into token-level features plus a
//! pooled vector. [`encode_text`] and [`encode_image`] wrap any backend and
//! enforce the shared output contract (non-empty, finite, declared width,
//! text truncated to the backend's token limit).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("empty input")]
    EmptyInput,
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("image decode error: {0}")]
    DecodeError(String),
    #[error("zero vector cannot be normalised")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in encoder output")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Token matrix (`N x d`) with its pooled `d`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub tokens: Array2<f64>,
    pub pooled: Array1<f64>,
    pub modality: Modality,
}

impl TokenFeatures {
    /// Builds features whose pooled vector is the mean of `tokens`.
    pub fn mean_pooled(tokens: Array2<f64>, modality: Modality) -> Result<Self> {
        let pooled = tokens.mean_axis(Axis(0)).ok_or(EncoderError::EmptyInput)?;
        Ok(Self {
            tokens,
            pooled,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.pooled.len()
    }
}

/// A frozen encoder. Implementations must be deterministic and hold no
/// mutable state after construction.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_text_tokens(&self) -> usize;
    fn text_features(&self, text: &str) -> Result<TokenFeatures>;
    fn image_features(&self, image: &[u8]) -> Result<TokenFeatures>;
}

fn validate(features: TokenFeatures, dim: usize, modality: Modality) -> Result<TokenFeatures> {
    if features.tokens.nrows() == 0 {
        return Err(EncoderError::EmptyInput);
    }
    if features.tokens.ncols() != dim {
        return Err(EncoderError::DimensionMismatch {
            expected: dim,
            found: features.tokens.ncols(),
        });
    }
    if features.pooled.len() != dim {
        return Err(EncoderError::DimensionMismatch {
            expected: dim,
            found: features.pooled.len(),
        });
    }
    if !features.tokens.iter().chain(features.pooled.iter()).all(|v| v.is_finite()) {
        return Err(EncoderError::NonFinite);
    }
    if features.modality != modality {
        return Err(EncoderError::BackendFailure(format!(
            "backend returned {:?} features for a {:?} input",
            features.modality, modality
        )));
    }
    Ok(features)
}

pub fn encode_text(backend: &dyn EncoderBackend, text: &str) -> Result<TokenFeatures> {
    if text.trim().is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let mut features = validate(backend.text_features(text)?, backend.dim(), Modality::Text)?;
    let limit = backend.max_text_tokens();
    if features.tokens.nrows() > limit {
        features.tokens = features.tokens.slice(s![..limit, ..]).to_owned();
    }
    Ok(features)
}

pub fn encode_image(backend: &dyn EncoderBackend, image: &[u8]) -> Result<TokenFeatures> {
    if image.is_empty() {
        return Err(EncoderError::DecodeError("empty image buffer".into()));
    }
    validate(backend.image_features(image)?, backend.dim(), Modality::Image)
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EncoderError::ZeroVector);
    }
    Ok(v.mapv(|x| x / norm))
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EncoderError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::ZeroVector);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the image whose pooled feature is most similar to the text's.
/// Ties resolve to the lowest index.
pub fn select_best_image<B: AsRef<[u8]>>(
    backend: &dyn EncoderBackend,
    text: &str,
    images: &[B],
) -> Result<usize> {
    if images.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let text_vec = l2_normalize(encode_text(backend, text)?.pooled.view())?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, image) in images.iter().enumerate() {
        let image_vec = l2_normalize(encode_image(backend, image.as_ref())?.pooled.view())?;
        let sim = cosine_similarity(text_vec.view(), image_vec.view())?;
        if sim > best.1 {
            best = (i, sim);
        }
    }
    Ok(best.0)
}

/// Lowercased word pieces: runs of alphanumerics, with every CJK ideograph and
/// every other non-space character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if is_cjk(ch) || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_lowercase().collect());
        } else if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F
        | 0x3000..=0x303F | 0xFF00..=0xFFEF)
}

/// Weight-free deterministic backend.
///
/// Text tokens embed to pseudo-random vectors seeded from a keyed SHA-256 of
/// the token. Images are resized to a `grid x grid` mosaic of 8x8 RGB patches;
/// each patch is mapped through a fixed random projection seeded from the key,
/// so visually similar images get similar features.
pub struct HashBackend {
    key: String,
    dim: usize,
    max_text_tokens: usize,
    grid: u32,
    projection: Array2<f64>,
}

const PATCH: u32 = 8;

impl HashBackend {
    pub fn new(key: impl Into<String>, dim: usize, max_text_tokens: usize) -> Self {
        assert!(dim > 0 && max_text_tokens > 0);
        let key = key.into();
        let grid = 4;
        let patch_len = (PATCH * PATCH * 3) as usize;
        let mut rng = SeededRng::new(seed_from(&key, "projection", b""));
        let scale = 1.0 / (patch_len as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, patch_len), |_| rng.symmetric(1.0) * scale * 3f64.sqrt());
        Self {
            key,
            dim,
            max_text_tokens,
            grid,
            projection,
        }
    }

    fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut rng = SeededRng::new(seed_from(&self.key, "text", token.as_bytes()));
        Array1::from_shape_fn(self.dim, |_| rng.symmetric(1.0))
    }
}

fn seed_from(key: &str, domain: &str, payload: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(payload);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl EncoderBackend for HashBackend {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_text_tokens(&self) -> usize {
        self.max_text_tokens
    }

    fn text_features(&self, text: &str) -> Result<TokenFeatures> {
        let pieces = tokenize(text);
        if pieces.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        let n = pieces.len().min(self.max_text_tokens);
        let mut tokens = Array2::zeros((n, self.dim));
        for (mut row, piece) in tokens.outer_iter_mut().zip(&pieces) {
            row.assign(&self.token_vector(piece));
        }
        TokenFeatures::mean_pooled(tokens, Modality::Text)
    }

    fn image_features(&self, image: &[u8]) -> Result<TokenFeatures> {
        let decoded = image::load_from_memory(image)
            .map_err(|e| EncoderError::DecodeError(e.to_string()))?
            .to_rgb8();
        let side = self.grid * PATCH;
        let resized = image::imageops::resize(&decoded, side, side, image::imageops::FilterType::Triangle);
        let patch_len = (PATCH * PATCH * 3) as usize;
        let n = (self.grid * self.grid) as usize;
        let mut tokens = Array2::zeros((n, self.dim));
        let mut patch = Array1::zeros(patch_len);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let mut k = 0;
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let px = resized.get_pixel(gx * PATCH + x, gy * PATCH + y);
                        for c in 0..3 {
                            patch[k] = px[c] as f64 / 255.0 - 0.5;
                            k += 1;
                        }
                    }
                }
                let row = (gy * self.grid + gx) as usize;
                tokens.row_mut(row).assign(&self.projection.dot(&patch));
            }
        }
        TokenFeatures::mean_pooled(tokens, Modality::Image)
    }
}

/// Features computed offline by an external encoder (for example CLIP),
/// looked up by the SHA-256 of the exact input bytes.
///
/// File layout (JSON):
/// `{"name": str, "dim": int, "max_text_tokens": int,
///   "text": {hex: entry}, "image": {hex: entry}}`
/// with `entry = {"tokens": [[f64; dim]; N], "pooled": [f64; dim]}`.
pub struct PrecomputedBackend {
    name: String,
    dim: usize,
    max_text_tokens: usize,
    text: HashMap<String, StoredFeatures>,
    image: HashMap<String, StoredFeatures>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredFeatures {
    pub tokens: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrecomputedFile {
    pub name: String,
    pub dim: usize,
    pub max_text_tokens: usize,
    #[serde(default)]
    pub text: HashMap<String, StoredFeatures>,
    #[serde(default)]
    pub image: HashMap<String, StoredFeatures>,
}

pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PrecomputedBackend {
    pub fn from_file(file: PrecomputedFile) -> Self {
        Self {
            name: file.name,
            dim: file.dim,
            max_text_tokens: file.max_text_tokens,
            text: file.text,
            image: file.image,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| EncoderError::BackendFailure(format!("{}: {e}", path.display())))?;
        let file: PrecomputedFile = serde_json::from_str(&raw)
            .map_err(|e| EncoderError::BackendFailure(format!("{}: {e}", path.display())))?;
        Ok(Self::from_file(file))
    }

    fn lookup(&self, table: &HashMap<String, StoredFeatures>, bytes: &[u8], modality: Modality) -> Result<TokenFeatures> {
        let key = content_digest(bytes);
        let stored = table
            .get(&key)
            .ok_or_else(|| EncoderError::BackendFailure(format!("no precomputed features for {key}")))?;
        let n = stored.tokens.len();
        if n == 0 {
            return Err(EncoderError::EmptyInput);
        }
        let mut tokens = Array2::zeros((n, self.dim));
        for (i, row) in stored.tokens.iter().enumerate() {
            if row.len() != self.dim {
                return Err(EncoderError::DimensionMismatch {
                    expected: self.dim,
                    found: row.len(),
                });
            }
            tokens.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Ok(TokenFeatures {
            tokens,
            pooled: Array1::from(stored.pooled.clone()),
            modality,
        })
    }
}

impl EncoderBackend for PrecomputedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_text_tokens(&self) -> usize {
        self.max_text_tokens
    }

    fn text_features(&self, text: &str) -> Result<TokenFeatures> {
        self.lookup(&self.text, text.as_bytes(), Modality::Text)
    }

    fn image_features(&self, image: &[u8]) -> Result<TokenFeatures> {
        self.lookup(&self.image, image, Modality::Image)
    }
}

/// Configuration key selecting a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    /// `"hash"` or `"precomputed"`.
    pub name: String,
    /// Hash key for `hash`; ignored otherwise.
    #[serde(default = "default_key")]
    pub key: String,
    /// Feature file for `precomputed`.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_max_tokens")]
    pub max_text_tokens: usize,
}

fn default_key() -> String {
    "imfnd".into()
}

fn default_dim() -> usize {
    512
}

fn default_max_tokens() -> usize {
    77
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            name: "hash".into(),
            key: default_key(),
            weights: None,
            dim: default_dim(),
            max_text_tokens: default_max_tokens(),
        }
    }
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn EncoderBackend>> {
        match self.name.as_str() {
            "hash" => {
                if self.dim == 0 || self.max_text_tokens == 0 {
                    return Err(EncoderError::BackendFailure("dim and max_text_tokens must be positive".into()));
                }
                Ok(Box::new(HashBackend::new(self.key.clone(), self.dim, self.max_text_tokens)))
            }
            "precomputed" => {
                let path = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| EncoderError::BackendFailure("precomputed backend needs `weights`".into()))?;
                Ok(Box::new(PrecomputedBackend::load(path)?))
            }
            other => Err(EncoderError::BackendFailure(format!("unknown encoder backend `{other}`"))),
        }
    }
}
