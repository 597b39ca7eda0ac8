//! Run configuration: one TOML file, optionally overridden by flags.
//!
//! Precedence, highest first: command-line flags, the config file, built-in
//! defaults. Relative paths in the file resolve against the file's directory;
//! relative paths given as flags resolve against the working directory.

use std::path::{Path, PathBuf};

use imfnd::classifier::TrainConfig;
use imfnd::encoders::BackendSpec;
use imfnd::fusion::FusionOptions;
use imfnd::lvlm_client::{ClientConfig, DEFAULT_API_KEY_ENV, DEFAULT_ENDPOINT};
use imfnd::prompting::PromptMode;
use imfnd::Label;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_dataset_name")]
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_dataset_name() -> String {
    "dataset".into()
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub modes: Vec<PromptMode>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub abstain_fallback: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            modes: vec![PromptMode::Imfnd],
            shots: vec![1],
            seeds: vec![1, 2, 3, 4, 5],
            abstain_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    /// `mock-echo`, `mock-fixed:<label>`, `mock-scripted:<json file>` or `remote:<model id>`.
    pub kind: String,
    pub cache_dir: Option<PathBuf>,
    pub api_key_env: String,
    pub endpoint: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl ClientSection {
    pub fn settings(&self) -> ClientConfig {
        ClientConfig {
            temperature: self.temperature,
            max_retries: self.max_retries,
            timeout_secs: self.timeout_secs,
            max_in_flight: self.max_in_flight,
            backoff_base_ms: self.backoff_base_ms,
            backoff_max_ms: self.backoff_max_ms,
        }
    }
}

impl Default for ClientSection {
    fn default() -> Self {
        let d = ClientConfig::default();
        Self {
            kind: "mock-echo".into(),
            cache_dir: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            endpoint: DEFAULT_ENDPOINT.into(),
            temperature: d.temperature,
            max_retries: d.max_retries,
            timeout_secs: d.timeout_secs,
            max_in_flight: d.max_in_flight,
            backoff_base_ms: d.backoff_base_ms,
            backoff_max_ms: d.backoff_max_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs/latest".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub encoder: BackendSpec,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fusion: FusionOptions,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parsed `client.kind`.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientKind {
    MockEcho,
    MockFixed(Label),
    MockScripted(PathBuf),
    Remote(String),
}

impl ClientKind {
    pub fn parse(raw: &str) -> Result<Self, ConfigError> {
        let bad = |m: &str| ConfigError::field("client.kind", format!("{m} (got `{raw}`)"));
        match raw.split_once(':') {
            None if raw == "mock-echo" => Ok(Self::MockEcho),
            Some(("mock-fixed", l)) => l.parse().map(Self::MockFixed).map_err(|_| bad("label must be real or fake")),
            Some(("mock-scripted", p)) if !p.is_empty() => Ok(Self::MockScripted(p.into())),
            Some(("remote", m)) if !m.is_empty() => Ok(Self::Remote(m.into())),
            _ => Err(bad("expected mock-echo, mock-fixed:<label>, mock-scripted:<path> or remote:<model id>")),
        }
    }
}

/// Flag values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub modes: Option<Vec<PromptMode>>,
    pub shots: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub client: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(raw: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(raw).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(raw, s.start))
                .unwrap_or((0, 0));
            ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    /// Reads, resolves relative paths, and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&raw, path)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset.path);
        if let Some(p) = self.dataset.image_root.as_mut() {
            join(p);
        }
        if let Some(p) = self.encoder.weights.as_mut() {
            join(p);
        }
        if let Some(p) = self.client.cache_dir.as_mut() {
            join(p);
        }
        join(&mut self.output.dir);
        if let Some(rest) = self.client.kind.strip_prefix("mock-scripted:") {
            let mut p = PathBuf::from(rest);
            join(&mut p);
            self.client.kind = format!("mock-scripted:{}", p.display());
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.modes {
            self.experiment.modes = v.clone();
        }
        if let Some(v) = &o.shots {
            self.experiment.shots = v.clone();
        }
        if let Some(v) = &o.seeds {
            self.experiment.seeds = v.clone();
        }
        if let Some(v) = &o.client {
            self.client.kind = v.clone();
        }
        if let Some(v) = &o.cache_dir {
            self.client.cache_dir = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.output.dir = v.clone();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        if e.modes.is_empty() {
            return Err(ConfigError::field("experiment.modes", "at least one mode is required"));
        }
        if e.shots.is_empty() {
            return Err(ConfigError::field("experiment.shots", "at least one shot count is required"));
        }
        if e.seeds.is_empty() {
            return Err(ConfigError::field("experiment.seeds", "at least one seed is required"));
        }
        if let Some(dup) = first_duplicate(&e.seeds) {
            return Err(ConfigError::field("experiment.seeds", format!("seed {dup} is listed twice")));
        }
        if let Some(dup) = first_duplicate(&e.shots) {
            return Err(ConfigError::field("experiment.shots", format!("{dup} is listed twice")));
        }
        if let Some(dup) = first_duplicate(&e.modes) {
            return Err(ConfigError::field("experiment.modes", format!("{dup} is listed twice")));
        }
        if e.modes.iter().any(|m| m.uses_examples()) && e.shots.contains(&0) {
            return Err(ConfigError::field("experiment.shots", "few-shot modes need at least one example per class"));
        }
        let f = self.dataset.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(ConfigError::field("dataset.test_fraction", format!("must lie in (0, 1), got {f}")));
        }
        self.train.validate().map_err(|err| ConfigError::field("train", err.to_string()))?;
        self.client
            .settings()
            .validate()
            .map_err(|err| ConfigError::field("client", err.to_string()))?;
        self.client_kind()?;
        Ok(())
    }

    pub fn client_kind(&self) -> Result<ClientKind, ConfigError> {
        ClientKind::parse(&self.client.kind)
    }

    /// Cache directory, defaulting to `<output>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        self.client.cache_dir.clone().unwrap_or_else(|| self.output.dir.join("cache"))
    }

    /// SHA-256 of the effective configuration, with the output location excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSection::default();
        c.client.cache_dir = None;
        let canonical = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(canonical))
    }
}

fn first_duplicate<T: PartialEq + Copy>(items: &[T]) -> Option<T> {
    items
        .iter()
        .enumerate()
        .find(|(i, x)| items[..*i].contains(x))
        .map(|(_, x)| *x)
}

fn line_col(raw: &str, offset: usize) -> (usize, usize) {
    let before = &raw[..offset.min(raw.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}
