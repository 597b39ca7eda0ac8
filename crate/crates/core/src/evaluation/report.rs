use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::mean_and_std;
use super::runner::ExperimentConfig;
use crate::classifier::SmallModelPrediction;
use crate::lvlm_client::Verdict;
use crate::prompting::{PromptMode, EXAMPLE_SEPARATOR};
use crate::Label;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub id: String,
    pub gold: Label,
    pub verdict: Verdict,
    /// Verdict actually scored (differs from `verdict` only under abstain fallback).
    pub scored: Verdict,
    pub raw_response: String,
    pub small_model: Option<SmallModelPrediction>,
    pub prompt_digest: String,
    /// Run provenance, not part of the serialised result.
    #[serde(skip)]
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub abstain_count: usize,
    /// Accuracy of the small model's own labels on the test set.
    pub small_model_accuracy: Option<f64>,
    pub support_ids: Vec<String>,
    pub support_digest: Option<String>,
    pub model_checksum: Option<String>,
    pub selected_epoch: Option<usize>,
    #[serde(skip)]
    pub cache_hits: u64,
    #[serde(skip)]
    pub network_queries: u64,
    pub records: Vec<ArticleRecord>,
    /// `(article id, prompt with image sentinels)`; written separately, not in reports.
    #[serde(skip)]
    pub prompts: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
    /// Articles scored before the failure.
    pub partial_records: Vec<ArticleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub digest: String,
    pub train_size: usize,
    pub test_size: usize,
    pub split_seed: u64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFormat {
    pub example_separator: String,
}

impl Default for PromptFormat {
    fn default() -> Self {
        Self {
            example_separator: EXAMPLE_SEPARATOR.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    /// Population standard deviation across seeds.
    pub std_accuracy: f64,
    pub std_macro_f1: f64,
    /// Abstentions over all scored articles.
    pub abstain_rate: f64,
    pub std_kind: StdKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    Population,
}

impl Summary {
    pub fn from_seeds(seeds: &[SeedResult]) -> Self {
        let acc: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
        let f1: Vec<f64> = seeds.iter().map(|s| s.macro_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_and_std(&acc);
        let (mean_macro_f1, std_macro_f1) = mean_and_std(&f1);
        let scored: usize = seeds.iter().map(|s| s.records.len()).sum();
        let abstained: usize = seeds.iter().map(|s| s.abstain_count).sum();
        Self {
            mean_accuracy,
            mean_macro_f1,
            std_accuracy,
            std_macro_f1,
            abstain_rate: if scored == 0 { 0.0 } else { abstained as f64 / scored as f64 },
            std_kind: StdKind::Population,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub cache_hits: u64,
    pub network_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub dataset: DatasetInfo,
    pub model_id: String,
    pub temperature: f64,
    pub config: ExperimentConfig,
    pub prompt_format: PromptFormat,
    pub summary: Summary,
    /// Cache traffic of the run that produced this report. Skipped in JSON so
    /// that a rerun served from the cache writes a byte-identical report.
    #[serde(skip)]
    pub cache: CacheSummary,
    pub seeds: Vec<SeedResult>,
    pub failed_seeds: Vec<FailedSeed>,
}

impl EvaluationReport {
    pub fn mode(&self) -> PromptMode {
        self.config.mode
    }

    pub fn n_shots(&self) -> usize {
        self.config.n_shots
    }

    /// Summary recomputed from the stored per-seed values.
    pub fn recomputed_summary(&self) -> Summary {
        Summary::from_seeds(&self.seeds)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(raw: &str) -> Result<Self, ReportError> {
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| ReportError::Malformed(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ReportError::Malformed("missing schema_version".into()))? as u32;
        if found != REPORT_SCHEMA_VERSION {
            return Err(ReportError::SchemaVersionMismatch {
                found,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| ReportError::Malformed(e.to_string()))
    }

    pub fn csv_row(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.mode(),
            self.n_shots(),
            s.mean_accuracy,
            s.mean_macro_f1,
            s.std_accuracy,
            s.abstain_rate
        )
    }
}

pub const CSV_HEADER: &str = "mode,n_shots,mean_accuracy,mean_macro_f1,std_accuracy,abstain_rate";

/// One row per report, in the given order.
pub fn grid_csv(reports: &[EvaluationReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(seed: u64, accuracy: f64) -> SeedResult {
        SeedResult {
            seed,
            accuracy,
            macro_f1: accuracy / 2.0,
            abstain_count: 1,
            small_model_accuracy: None,
            support_ids: vec![],
            support_digest: None,
            model_checksum: None,
            selected_epoch: None,
            cache_hits: 0,
            network_queries: 0,
            records: vec![],
            prompts: vec![],
        }
    }

    fn report() -> EvaluationReport {
        let seeds = vec![seed(1, 0.6), seed(2, 0.7), seed(3, 0.8)];
        EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: DatasetInfo {
                name: "x".into(),
                digest: "abc".into(),
                train_size: 8,
                test_size: 4,
                split_seed: 0,
                test_fraction: 0.2,
            },
            model_id: "mock-echo".into(),
            temperature: 0.2,
            config: ExperimentConfig::default(),
            prompt_format: PromptFormat::default(),
            summary: Summary::from_seeds(&seeds),
            cache: CacheSummary::default(),
            seeds,
            failed_seeds: vec![],
        }
    }

    #[test]
    fn summary_uses_population_std() {
        let s = report().summary;
        assert!((s.mean_accuracy - 0.7).abs() < 1e-12);
        assert!((s.std_accuracy - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.mean_macro_f1 - 0.35).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let r = report();
        let back = EvaluationReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.recomputed_summary(), back.summary);

        let tampered = r.to_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            EvaluationReport::from_json(&tampered),
            Err(ReportError::SchemaVersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let csv = grid_csv(&[report(), report()]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("imfnd,1,0.700000,"));
    }
}
