//! `imfnd run`: the full experiment loop plus its on-disk artifacts.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use imfnd::datasets::{load_dataset_with, stratified_split};
use imfnd::evaluation::{grid_csv, EvaluationReport, Evaluator, ExperimentConfig};
use imfnd::lvlm_client::{LvlmBackend, LvlmClient, MockBackend, MockPolicy, RemoteBackend, ResponseCache};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ClientKind, ConfigError, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_HARD_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Index of one run's inputs and outputs. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub config_digest: String,
    pub dataset_digest: String,
    pub code_version: String,
    pub model_id: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub cache_dir: PathBuf,
    pub cells: Vec<CellEntry>,
    pub grid_csv: PathBuf,
    pub models: Vec<PathBuf>,
    pub cache_hits: u64,
    pub network_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub mode: String,
    pub n_shots: usize,
    pub report: PathBuf,
    pub prompts: Vec<PathBuf>,
    pub failed_seeds: Vec<u64>,
    pub cache_hits: u64,
    pub network_queries: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn build_client(config: &RunConfig) -> Result<LvlmClient> {
    let backend: Arc<dyn LvlmBackend> = match config.client_kind()? {
        ClientKind::MockEcho => Arc::new(MockBackend::new(MockPolicy::EchoSmallModel)),
        ClientKind::MockFixed(l) => Arc::new(MockBackend::new(MockPolicy::Fixed(l))),
        ClientKind::MockScripted(path) => {
            let raw = fs::read_to_string(&path).with_context(|| format!("reading script {}", path.display()))?;
            let script: HashMap<String, String> =
                serde_json::from_str(&raw).map_err(|e| ConfigError::field("client.kind", format!("script {}: {e}", path.display())))?;
            Arc::new(MockBackend::new(MockPolicy::Scripted(script)))
        }
        ClientKind::Remote(model) => Arc::new(RemoteBackend::from_env(model, &config.client.endpoint, &config.client.api_key_env)?),
    };
    let cache_dir = config.cache_dir();
    let cache = ResponseCache::with_dir(&cache_dir).with_context(|| format!("opening cache {}", cache_dir.display()))?;
    Ok(LvlmClient::new(backend, config.client.settings(), cache)?)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunOutcome> {
    let started_at = now();
    let config = RunConfig::load(config_path, overrides)?;
    let encoder = config.encoder.build()?;
    let dataset = load_dataset_with(&config.dataset.path, config.dataset.image_root.as_deref(), Some(encoder.as_ref()))?;
    let dataset_digest = dataset.digest();
    info!(
        "loaded {} articles ({} real, {} fake, {} skipped)",
        dataset.articles.len(),
        dataset.counts.real,
        dataset.counts.fake,
        dataset.skipped.len()
    );
    let split = stratified_split(&dataset.articles, config.dataset.test_fraction, config.dataset.split_seed)?;
    let client = build_client(&config)?;
    let evaluator = Evaluator::new(&split, dataset_digest.clone(), encoder.as_ref(), &client);

    let e = &config.experiment;
    let base = ExperimentConfig {
        dataset: config.dataset.name.clone(),
        mode: e.modes[0],
        n_shots: e.shots[0],
        seeds: e.seeds.clone(),
        train: config.train.clone(),
        fusion: config.fusion,
        abstain_fallback: e.abstain_fallback,
    };
    let reports = evaluator.ablation_grid(&base, &e.modes, &e.shots)?;

    let out = &config.output.dir;
    let mut cells = Vec::new();
    let mut written = BTreeSet::new();
    let mut kept: Vec<&EvaluationReport> = Vec::new();
    for report in &reports {
        let tag = format!("{}_{}shot", report.mode(), report.n_shots());
        // zero-shot repeats once per shot count
        if !written.insert(tag.clone()) {
            continue;
        }
        kept.push(report);
        let report_path = PathBuf::from(format!("reports/report_{tag}.json"));
        write(&out.join(&report_path), &report.to_json())?;
        let mut prompts = Vec::new();
        for seed in &report.seeds {
            let path = PathBuf::from(format!("prompts/{tag}_seed{}.jsonl", seed.seed));
            let mut body = String::new();
            for ((id, text), record) in seed.prompts.iter().zip(&seed.records) {
                let line = serde_json::json!({ "id": id, "prompt_digest": record.prompt_digest, "prompt": text });
                body.push_str(&line.to_string());
                body.push('\n');
            }
            write(&out.join(&path), &body)?;
            prompts.push(path);
        }
        cells.push(CellEntry {
            mode: report.mode().to_string(),
            n_shots: report.n_shots(),
            report: report_path,
            prompts,
            failed_seeds: report.failed_seeds.iter().map(|f| f.seed).collect(),
            cache_hits: report.cache.cache_hits,
            network_queries: report.cache.network_queries,
        });
    }
    let owned: Vec<EvaluationReport> = kept.into_iter().cloned().collect();
    let grid_path = PathBuf::from("grid.csv");
    write(&out.join(&grid_path), &grid_csv(&owned))?;

    let mut models = Vec::new();
    for ((seed, n), params) in evaluator.trained_models() {
        let path = PathBuf::from(format!("models/seed{seed}_n{n}.json"));
        write(&out.join(&path), &params.to_json())?;
        models.push(path);
    }

    let stats = client.stats();
    info!("{} cache hits, {} network queries", stats.cache_hits, stats.network_queries);
    let manifest = RunManifest {
        config_path: config_path.to_path_buf(),
        config_digest: config.digest(),
        dataset_digest,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        model_id: client.model_id().to_string(),
        started_at,
        finished_at: now(),
        cache_dir: config.cache_dir(),
        cells,
        grid_csv: grid_path,
        models,
        cache_hits: stats.cache_hits,
        network_queries: stats.network_queries,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    write(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    let partial = manifest.cells.iter().any(|c| !c.failed_seeds.is_empty());
    Ok(RunOutcome {
        exit_code: if partial { EXIT_PARTIAL } else { EXIT_OK },
        manifest_path,
        manifest,
    })
}
