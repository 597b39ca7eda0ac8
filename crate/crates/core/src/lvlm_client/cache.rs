use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::prompting::MultimodalPrompt;

const KEY_DOMAIN: &[u8] = b"imfnd-response-cache-v1\0";

/// Hex SHA-256 over model id, temperature bits and the canonical prompt bytes
/// (images enter by content digest).
pub fn cache_key(model_id: &str, prompt: &MultimodalPrompt, temperature: f64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(KEY_DOMAIN);
    hasher.update((model_id.len() as u64).to_le_bytes());
    hasher.update(model_id.as_bytes());
    hasher.update(temperature.to_bits().to_le_bytes());
    hasher.update(prompt.canonical_bytes());
    hex::encode(hasher.finalize())
}

/// In-memory response cache, optionally mirrored to a directory holding one
/// file per key (`<hex key>` containing a `model_id:` / `timestamp:` header,
/// a blank line, then the UTF-8 response). The first stored response for a
/// key wins.
pub struct ResponseCache {
    memory: Mutex<HashMap<String, String>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            memory: Mutex::new(HashMap::new()),
            dir: None,
        }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            memory: Mutex::new(HashMap::new()),
            dir: Some(dir),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.memory.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> io::Result<Option<String>> {
        if let Some(hit) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        match fs::read_to_string(dir.join(key)) {
            Ok(raw) => {
                let response = parse_entry(&raw)
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("corrupt cache entry {key}")))?
                    .response;
                self.memory
                    .lock()
                    .expect("cache lock")
                    .entry(key.to_string())
                    .or_insert_with(|| response.clone());
                Ok(Some(response))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Stores `response` unless the key already holds one; returns the value
    /// that ends up cached.
    pub fn put(&self, key: &str, model_id: &str, response: String) -> io::Result<String> {
        let stored = {
            let mut memory = self.memory.lock().expect("cache lock");
            memory.entry(key.to_string()).or_insert(response).clone()
        };
        if let Some(dir) = &self.dir {
            let path = dir.join(key);
            if !path.exists() {
                let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
                let mut f = fs::File::create(&tmp)?;
                write!(f, "model_id: {model_id}\ntimestamp: {timestamp}\n\n{stored}")?;
                f.sync_all()?;
                drop(f);
                fs::rename(&tmp, &path)?;
            }
        }
        Ok(stored)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheEntryInfo {
    pub key: String,
    pub model_id: String,
    pub timestamp: u64,
    pub response_bytes: usize,
}

struct ParsedEntry {
    model_id: String,
    timestamp: u64,
    response: String,
}

fn parse_entry(raw: &str) -> Option<ParsedEntry> {
    let (header, response) = raw.split_once("\n\n")?;
    let mut model_id = None;
    let mut timestamp = None;
    for line in header.lines() {
        if let Some(v) = line.strip_prefix("model_id: ") {
            model_id = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("timestamp: ") {
            timestamp = v.parse().ok();
        }
    }
    Some(ParsedEntry {
        model_id: model_id?,
        timestamp: timestamp?,
        response: response.to_string(),
    })
}

fn is_key(name: &str) -> bool {
    name.len() == 64 && name.bytes().all(|b| b.is_ascii_hexdigit())
}

pub fn list_cache_dir(dir: &Path) -> io::Result<Vec<CacheEntryInfo>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !is_key(&name) {
            continue;
        }
        let raw = fs::read_to_string(entry.path())?;
        if let Some(p) = parse_entry(&raw) {
            out.push(CacheEntryInfo {
                key: name,
                model_id: p.model_id,
                timestamp: p.timestamp,
                response_bytes: p.response.len(),
            });
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

/// Removes every cache entry file; returns how many were removed.
pub fn clear_cache_dir(dir: &Path) -> io::Result<usize> {
    let mut removed = 0;
    if !dir.exists() {
        return Ok(0);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if is_key(&entry.file_name().to_string_lossy()) {
            fs::remove_file(entry.path())?;
            removed += 1;
        }
    }
    Ok(removed)
}
