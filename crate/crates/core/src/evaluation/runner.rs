use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{compute_metrics, MetricsError};
use super::report::{ArticleRecord, CacheSummary, DatasetInfo, EvaluationReport, FailedSeed, PromptFormat, SeedResult, Summary, REPORT_SCHEMA_VERSION};
use crate::classifier::{self, predict_article, train_with_history, ClassifierError, Labeled, SelectionMetric, SmallModelPrediction, TrainConfig};
use crate::datasets::{sample_n_shot, DatasetError, DatasetSplit, NewsArticle};
use crate::encoders::{encode_image, encode_text, EncoderBackend, EncoderError};
use crate::fusion::{build_feature_bundle_with, FeatureBundle, FusionError, FusionOptions};
use crate::lvlm_client::{parse_verdict, ClientError, LvlmClient, Verdict};
use crate::prompting::{assemble_prompt, render_example, render_test_input, PromptError, PromptMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error in `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("all {} seeds failed; first error: {}", .0.len(), .0.first().map(|f| f.error.as_str()).unwrap_or(""))]
    AllSeedsFailed(Vec<FailedSeed>),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form dataset label echoed into reports.
    pub dataset: String,
    pub mode: PromptMode,
    /// Examples per class; ignored (and reported as 0) for zero-shot.
    pub n_shots: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub fusion: FusionOptions,
    /// Score abstentions with the small model's label instead of as errors.
    pub abstain_fallback: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            mode: PromptMode::Imfnd,
            n_shots: 1,
            seeds: vec![1, 2, 3, 4, 5],
            train: TrainConfig::default(),
            fusion: FusionOptions::default(),
            abstain_fallback: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(EvalError::Config {
                field: "seeds",
                message: "at least one seed is required".into(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(EvalError::Config {
                field: "seeds",
                message: format!("seed {dup} appears more than once"),
            });
        }
        if self.mode.uses_examples() && self.n_shots == 0 {
            return Err(EvalError::Config {
                field: "n_shots",
                message: format!("mode {} needs at least one example per class", self.mode),
            });
        }
        self.train.validate().map_err(|e| EvalError::Config {
            field: "train",
            message: e.to_string(),
        })
    }

    fn normalized(&self) -> Self {
        let mut c = self.clone();
        if !c.mode.uses_examples() {
            c.n_shots = 0;
        }
        c
    }
}

/// Everything derived from one (seed, n) pair that prompt modes share.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub n_shots: usize,
    pub support: Vec<NewsArticle>,
    pub support_digest: String,
    pub model: Option<TrainedModel>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub checksum: String,
    pub params: classifier::SmallModelParams,
    pub selected_epoch: usize,
    pub support_predictions: Vec<SmallModelPrediction>,
    pub test_predictions: Vec<SmallModelPrediction>,
    pub test_accuracy: f64,
}

pub struct Evaluator<'a> {
    split: &'a DatasetSplit,
    dataset_digest: String,
    encoder: &'a dyn EncoderBackend,
    client: &'a LvlmClient,
    bundles: RefCell<HashMap<(String, FusionOptions), FeatureBundle>>,
    trained: RefCell<BTreeMap<(u64, usize), classifier::SmallModelParams>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(split: &'a DatasetSplit, dataset_digest: impl Into<String>, encoder: &'a dyn EncoderBackend, client: &'a LvlmClient) -> Self {
        Self {
            split,
            dataset_digest: dataset_digest.into(),
            encoder,
            client,
            bundles: RefCell::new(HashMap::new()),
            trained: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn split(&self) -> &DatasetSplit {
        self.split
    }

    pub fn client(&self) -> &LvlmClient {
        self.client
    }

    /// Parameters of every small model fitted so far, keyed by `(seed, n_shots)`.
    pub fn trained_models(&self) -> BTreeMap<(u64, usize), classifier::SmallModelParams> {
        self.trained.borrow().clone()
    }

    pub fn bundle(&self, article: &NewsArticle, options: FusionOptions) -> Result<FeatureBundle> {
        let key = (article.id.clone(), options);
        if let Some(b) = self.bundles.borrow().get(&key) {
            return Ok(b.clone());
        }
        let text = encode_text(self.encoder, &article.text)?;
        let image = encode_image(self.encoder, article.image.bytes())?;
        let bundle = build_feature_bundle_with(&text, &image, options)?;
        self.bundles.borrow_mut().insert(key, bundle.clone());
        Ok(bundle)
    }

    fn labeled(&self, articles: &[NewsArticle], options: FusionOptions) -> Result<Vec<Labeled>> {
        articles.iter().map(|a| Ok((self.bundle(a, options)?, a.label))).collect()
    }

    /// Samples the support set and, when `train` is set, fits the small model
    /// and predicts on support and test articles.
    pub fn prepare(&self, config: &ExperimentConfig, n_shots: usize, seed: u64, train: bool) -> Result<SeedArtifacts> {
        let support = sample_n_shot(self.split, n_shots, seed)?;
        let support_digest = support.digest();
        let model = if train {
            let opts = config.fusion;
            let support_data = self.labeled(&support.articles, opts)?;
            let test_data = self.labeled(&self.split.test, opts)?;
            let eval_set = match config.train.selection_metric {
                SelectionMetric::TestAccuracy => Some(test_data.as_slice()),
                SelectionMetric::TrainLoss => None,
            };
            let train_config = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let outcome = train_with_history(&support_data, eval_set, &train_config)?;
            let params = outcome.params;
            let predict = |data: &[Labeled]| -> Result<Vec<SmallModelPrediction>> {
                data.iter().map(|(b, _)| Ok(predict_article(&params, b)?)).collect()
            };
            let support_predictions = predict(&support_data)?;
            let test_predictions = predict(&test_data)?;
            self.trained.borrow_mut().insert((seed, n_shots), params.clone());
            let correct = test_predictions.iter().zip(&self.split.test).filter(|(p, a)| p.label == a.label).count();
            Some(TrainedModel {
                checksum: params.checksum(),
                test_accuracy: if test_data.is_empty() { 0.0 } else { correct as f64 / test_data.len() as f64 },
                params,
                selected_epoch: outcome.selected_epoch,
                support_predictions,
                test_predictions,
            })
        } else {
            None
        };
        Ok(SeedArtifacts {
            seed,
            n_shots,
            support: support.articles,
            support_digest,
            model,
        })
    }

    /// Scores one mode given prepared artifacts (`None` only for zero-shot).
    pub fn run_mode(
        &self,
        mode: PromptMode,
        seed: u64,
        artifacts: Option<&SeedArtifacts>,
        abstain_fallback: bool,
    ) -> std::result::Result<SeedResult, FailedSeed> {
        let fail = |error: String, partial_records: Vec<ArticleRecord>| FailedSeed {
            seed,
            error,
            partial_records,
        };
        let model = artifacts.and_then(|a| a.model.as_ref()).filter(|_| mode.uses_predictions());
        if mode.uses_predictions() && model.is_none() {
            return Err(fail(format!("mode {mode} needs a trained small model"), vec![]));
        }
        let examples = match (mode.uses_examples(), artifacts) {
            (false, _) => vec![],
            (true, None) => return Err(fail(format!("mode {mode} needs a support set"), vec![])),
            (true, Some(a)) => {
                let mut out = Vec::new();
                for (i, article) in a.support.iter().enumerate() {
                    let pred = model.map(|m| &m.support_predictions[i]);
                    out.push(render_example(article, article.label, pred, mode).map_err(|e| fail(e.to_string(), vec![]))?);
                }
                out
            }
        };
        let test = &self.split.test;
        let mut prompts = Vec::with_capacity(test.len());
        for (i, article) in test.iter().enumerate() {
            let pred = model.map(|m| &m.test_predictions[i]);
            let segments = render_test_input(article, pred, mode).map_err(|e| fail(e.to_string(), vec![]))?;
            prompts.push(assemble_prompt(examples.clone(), segments, self.client.temperature()));
        }

        let outcomes = self.client.query_many(&prompts);
        let mut records = Vec::with_capacity(test.len());
        let mut first_error = None;
        let (mut hits, mut network) = (0u64, 0u64);
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    first_error.get_or_insert_with(|| format!("article `{}`: {e}", test[i].id));
                    continue;
                }
            };
            if outcome.cached {
                hits += 1;
            } else {
                network += 1;
            }
            let small_model = model.map(|m| m.test_predictions[i]);
            let verdict = parse_verdict(&outcome.response).verdict;
            let scored = match (verdict, small_model, abstain_fallback) {
                (Verdict::Abstain, Some(p), true) => Verdict::from(p.label),
                _ => verdict,
            };
            records.push(ArticleRecord {
                id: test[i].id.clone(),
                gold: test[i].label,
                verdict,
                scored,
                raw_response: outcome.response,
                small_model,
                prompt_digest: prompts[i].digest(),
                cached: outcome.cached,
            });
        }
        if let Some(err) = first_error {
            return Err(fail(err, records));
        }
        let preds: Vec<Verdict> = records.iter().map(|r| r.scored).collect();
        let golds: Vec<_> = records.iter().map(|r| r.gold).collect();
        let metrics = compute_metrics(&preds, &golds).map_err(|e| fail(e.to_string(), records.clone()))?;
        Ok(SeedResult {
            seed,
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            abstain_count: records.iter().filter(|r| r.scored == Verdict::Abstain).count(),
            small_model_accuracy: model.map(|m| m.test_accuracy),
            support_ids: artifacts.map(|a| a.support.iter().map(|s| s.id.clone()).collect()).unwrap_or_default(),
            support_digest: artifacts.map(|a| a.support_digest.clone()),
            model_checksum: model.map(|m| m.checksum.clone()),
            selected_epoch: model.map(|m| m.selected_epoch),
            cache_hits: hits,
            network_queries: network,
            records,
            prompts: test.iter().zip(&prompts).map(|(a, p)| (a.id.clone(), p.to_marked_text())).collect(),
        })
    }

    fn seed_result(&self, config: &ExperimentConfig, seed: u64) -> std::result::Result<SeedResult, FailedSeed> {
        let artifacts = if config.mode.uses_examples() {
            Some(
                self.prepare(config, config.n_shots, seed, config.mode.uses_predictions())
                    .map_err(|e| FailedSeed {
                        seed,
                        error: e.to_string(),
                        partial_records: vec![],
                    })?,
            )
        } else {
            None
        };
        self.run_mode(config.mode, seed, artifacts.as_ref(), config.abstain_fallback)
    }

    pub fn run_single_seed(&self, config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
        config.validate()?;
        self.seed_result(config, seed).map_err(|f| EvalError::AllSeedsFailed(vec![f]))
    }

    pub fn run_experiment(&self, config: &ExperimentConfig) -> Result<EvaluationReport> {
        config.validate()?;
        let mut seeds = Vec::new();
        let mut failed = Vec::new();
        for &seed in &config.seeds {
            match self.seed_result(config, seed) {
                Ok(r) => seeds.push(r),
                Err(f) => failed.push(f),
            }
        }
        self.build_report(config, seeds, failed)
    }

    /// Every (mode, n) cell over the base config's seeds. Cells with equal
    /// seed and n share the support set and the trained small model.
    /// Returned in `shot_counts`-major, `modes`-minor order.
    pub fn ablation_grid(&self, base: &ExperimentConfig, modes: &[PromptMode], shot_counts: &[usize]) -> Result<Vec<EvaluationReport>> {
        if modes.is_empty() || shot_counts.is_empty() {
            return Err(EvalError::Config {
                field: "modes",
                message: "grid needs at least one mode and one shot count".into(),
            });
        }
        let configs: Vec<Vec<ExperimentConfig>> = shot_counts
            .iter()
            .map(|&n| {
                modes
                    .iter()
                    .map(|&mode| ExperimentConfig {
                        mode,
                        n_shots: n,
                        ..base.clone()
                    })
                    .collect()
            })
            .collect();
        for c in configs.iter().flatten() {
            c.validate()?;
        }
        let needs_examples = modes.iter().any(|m| m.uses_examples());
        let needs_model = modes.iter().any(|m| m.uses_predictions());
        let mut cells: Vec<Vec<(Vec<SeedResult>, Vec<FailedSeed>)>> =
            configs.iter().map(|row| row.iter().map(|_| (vec![], vec![])).collect()).collect();
        for (ni, &n) in shot_counts.iter().enumerate() {
            for &seed in &base.seeds {
                let artifacts = if needs_examples {
                    match self.prepare(base, n, seed, needs_model) {
                        Ok(a) => Some(a),
                        Err(e) => {
                            for (mi, &mode) in modes.iter().enumerate() {
                                if mode.uses_examples() {
                                    cells[ni][mi].1.push(FailedSeed {
                                        seed,
                                        error: e.to_string(),
                                        partial_records: vec![],
                                    });
                                } else {
                                    push_result(&mut cells[ni][mi], self.run_mode(mode, seed, None, base.abstain_fallback));
                                }
                            }
                            continue;
                        }
                    }
                } else {
                    None
                };
                for (mi, &mode) in modes.iter().enumerate() {
                    let a = if mode.uses_examples() { artifacts.as_ref() } else { None };
                    info!("seed {seed}, n={n}, mode {mode}");
                    push_result(&mut cells[ni][mi], self.run_mode(mode, seed, a, base.abstain_fallback));
                }
            }
        }
        let mut reports = Vec::new();
        for (row_cfg, row) in configs.iter().zip(cells) {
            for (cfg, (seeds, failed)) in row_cfg.iter().zip(row) {
                reports.push(self.build_report(cfg, seeds, failed)?);
            }
        }
        Ok(reports)
    }

    fn build_report(&self, config: &ExperimentConfig, seeds: Vec<SeedResult>, failed: Vec<FailedSeed>) -> Result<EvaluationReport> {
        if seeds.is_empty() {
            return Err(EvalError::AllSeedsFailed(failed));
        }
        let cache = CacheSummary {
            cache_hits: seeds.iter().map(|s| s.cache_hits).sum(),
            network_queries: seeds.iter().map(|s| s.network_queries).sum(),
        };
        Ok(EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: DatasetInfo {
                name: config.dataset.clone(),
                digest: self.dataset_digest.clone(),
                train_size: self.split.train.len(),
                test_size: self.split.test.len(),
                split_seed: self.split.seed,
                test_fraction: self.split.fraction,
            },
            model_id: self.client.model_id().to_string(),
            temperature: self.client.temperature(),
            config: config.normalized(),
            prompt_format: PromptFormat::default(),
            summary: Summary::from_seeds(&seeds),
            cache,
            seeds,
            failed_seeds: failed,
        })
    }
}

fn push_result(cell: &mut (Vec<SeedResult>, Vec<FailedSeed>), result: std::result::Result<SeedResult, FailedSeed>) {
    match result {
        Ok(r) => cell.0.push(r),
        Err(f) => cell.1.push(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{stratified_split, ImageRef, Language};
    use crate::encoders::HashBackend;
    use crate::lvlm_client::{make_mock_client, MockPolicy};
    use crate::Label;

    fn png(shade: u8) -> Vec<u8> {
        let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([shade, (x * 30) as u8, (y * 30) as u8]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn corpus(per_class: usize) -> Vec<NewsArticle> {
        let mut out = Vec::new();
        for label in Label::ALL {
            for i in 0..per_class {
                let shade = if label == Label::Real { 20 } else { 220 };
                out.push(NewsArticle {
                    id: format!("{label}-{i:03}"),
                    text: format!("{label} story number {i} about the city"),
                    image: ImageRef::new(png(shade + i as u8)),
                    label,
                    language: Language::En,
                });
            }
        }
        out
    }

    fn config(mode: PromptMode, n: usize, seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            n_shots: n,
            seeds,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn duplicate_or_missing_seeds_are_config_errors() {
        for seeds in [vec![], vec![1, 1]] {
            let err = config(PromptMode::Icl, 1, seeds).validate().unwrap_err();
            assert!(matches!(err, EvalError::Config { field: "seeds", .. }), "{err}");
        }
        let err = config(PromptMode::Icl, 0, vec![1]).validate().unwrap_err();
        assert!(matches!(err, EvalError::Config { field: "n_shots", .. }));
        config(PromptMode::ZeroShot, 0, vec![1]).validate().unwrap();
    }

    #[test]
    fn fixed_policy_scores_class_prior() {
        let split = stratified_split(&corpus(10), 0.2, 0).unwrap();
        let encoder = HashBackend::new("t", 8, 16);
        let client = make_mock_client(MockPolicy::Fixed(Label::Real));
        let eval = Evaluator::new(&split, "d", &encoder, &client);
        let report = eval.run_experiment(&config(PromptMode::ZeroShot, 0, vec![1, 2])).unwrap();
        assert_eq!(report.seeds.len(), 2);
        assert_eq!(report.summary.mean_accuracy, 0.5);
        assert_eq!(report.config.n_shots, 0);
        // second seed is served from the cache: zero-shot prompts do not depend on the seed
        assert_eq!(report.seeds[1].cache_hits, 4);
    }

    #[test]
    fn echo_reproduces_small_model() {
        let split = stratified_split(&corpus(10), 0.2, 0).unwrap();
        let encoder = HashBackend::new("t", 8, 16);
        let client = make_mock_client(MockPolicy::EchoSmallModel);
        let eval = Evaluator::new(&split, "d", &encoder, &client);
        let report = eval.run_experiment(&config(PromptMode::Imfnd, 2, vec![3, 4])).unwrap();
        for seed in &report.seeds {
            for r in &seed.records {
                assert_eq!(r.verdict, Verdict::from(r.small_model.unwrap().label));
            }
            assert_eq!(Some(seed.accuracy), seed.small_model_accuracy);
            assert_eq!(seed.support_ids.len(), 4);
        }
    }

    #[test]
    fn grid_shares_support_and_model() {
        let split = stratified_split(&corpus(8), 0.25, 0).unwrap();
        let encoder = HashBackend::new("t", 8, 16);
        let client = make_mock_client(MockPolicy::EchoSmallModel);
        let eval = Evaluator::new(&split, "d", &encoder, &client);
        let modes = [PromptMode::ZeroShot, PromptMode::Icl, PromptMode::Imfnd, PromptMode::ImfndNoProba];
        let reports = eval.ablation_grid(&config(PromptMode::Imfnd, 1, vec![1, 2]), &modes, &[1, 2]).unwrap();
        assert_eq!(reports.len(), 8);
        for row in reports.chunks(4) {
            let (icl, full, no_proba) = (&row[1], &row[2], &row[3]);
            for i in 0..2 {
                assert_eq!(icl.seeds[i].support_digest, full.seeds[i].support_digest);
                assert_eq!(full.seeds[i].model_checksum, no_proba.seeds[i].model_checksum);
                assert!(icl.seeds[i].model_checksum.is_none());
            }
        }
    }

    #[test]
    fn abstain_fallback_uses_small_model_label() {
        let split = stratified_split(&corpus(6), 0.34, 0).unwrap();
        let encoder = HashBackend::new("t", 8, 16);
        let script = split.test.iter().map(|a| (a.text.clone(), "no idea".to_string())).collect();
        let client = make_mock_client(MockPolicy::Scripted(script));
        let eval = Evaluator::new(&split, "d", &encoder, &client);
        let mut cfg = config(PromptMode::Imfnd, 1, vec![1]);
        let plain = eval.run_experiment(&cfg).unwrap();
        assert_eq!(plain.seeds[0].accuracy, 0.0);
        assert_eq!(plain.summary.abstain_rate, 1.0);
        cfg.abstain_fallback = true;
        let fallback = eval.run_experiment(&cfg).unwrap();
        let seed = &fallback.seeds[0];
        assert_eq!(seed.abstain_count, 0);
        assert_eq!(Some(seed.accuracy), seed.small_model_accuracy);
        assert!(seed.records.iter().all(|r| r.verdict == Verdict::Abstain));
    }
}
