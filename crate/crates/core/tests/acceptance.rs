//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p imfnd-core --test acceptance -- --nocapture`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{article, attention_oracle, corpus, prediction, separable_bundles, vote};
use imfnd::classifier::{accuracy, forward, objective, objective_gradient, train_with_history, SmallModelParams, TrainConfig};
use imfnd::datasets::{dataset_digest, sample_n_shot, stratified_split, NewsArticle};
use imfnd::encoders::{HashBackend, Modality, TokenFeatures};
use imfnd::evaluation::{compute_metrics, mean_and_std, Evaluator, ExperimentConfig, SeedResult, Summary};
use imfnd::fusion::{build_feature_bundle, cross_attend, FeatureBundle};
use imfnd::lvlm_client::{make_mock_client, ClientConfig, LvlmClient, MockBackend, MockPolicy, ResponseCache, Verdict};
use imfnd::prompting::{marked_text, render_example, render_test_input, PromptMode};
use imfnd::rng::SeededRng;
use imfnd::Label;
use ndarray::Array2;
use regex::Regex;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.symmetric(2.0))
}

fn attention_oracle_check() -> Check {
    let started = Instant::now();
    let mut rng = SeededRng::new(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = random_matrix(&mut rng, 4, 8);
        let c = random_matrix(&mut rng, 3, 8);
        let got = cross_attend(q.view(), c.view(), 8).map_err(|e| e.to_string())?;
        let want = attention_oracle(&q, &c);
        worst = worst.max((&got - &want).iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    ensure(worst < 1e-6, || format!("max abs error {worst:e}"))?;
    within(started, Duration::from_secs(5))?;
    Ok(format!("100 pairs, max abs error {worst:.1e}"))
}

fn degenerate_attention_check() -> Check {
    let mut rng = SeededRng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = TokenFeatures::mean_pooled(random_matrix(&mut rng, 1, 8), Modality::Text).unwrap();
        let m1 = TokenFeatures::mean_pooled(random_matrix(&mut rng, 1, 8), Modality::Image).unwrap();
        let b = build_feature_bundle(&t, &m1).map_err(|e| e.to_string())?;
        let err_mt = (&b.image_to_text - &b.text).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err_tm = (&b.text_to_image - &b.image).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(err_mt).max(err_tm);
    }
    ensure(worst < 1e-9, || format!("max abs error {worst:e}"))?;
    Ok(format!("f_mt = f_t and f_tm = f_m, max abs error {worst:.1e}"))
}

fn random_bundle(rng: &mut SeededRng, d: usize) -> FeatureBundle {
    let t = TokenFeatures::mean_pooled(random_matrix(rng, 3, d), Modality::Text).unwrap();
    let m = TokenFeatures::mean_pooled(random_matrix(rng, 5, d), Modality::Image).unwrap();
    build_feature_bundle(&t, &m).unwrap()
}

fn gradient_check() -> Check {
    let mut rng = SeededRng::new(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = 6;
        let bundle = random_bundle(&mut rng, d);
        let label = Label::from_index(rng.below(2) as usize).unwrap();
        let mut params = SmallModelParams::zeros(d);
        let flat: Vec<f64> = (0..params.num_parameters()).map(|_| rng.symmetric(1.0)).collect();
        params.set_flat(&flat);
        let (_, grad) = objective_gradient(&params, &bundle, label, Some(1.0)).map_err(|e| e.to_string())?;
        let analytic = grad.to_flat();
        let eval = |p: &SmallModelParams| objective(&forward(p, &bundle).unwrap(), label, Some(1.0));
        let mut num = Vec::with_capacity(flat.len());
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp.set_flat(&plus);
            pm.set_flat(&minus);
            num.push((eval(&pp) - eval(&pm)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-12));
    }
    ensure(worst < 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("20 instances, max relative error {worst:.1e}"))
}

fn trainability_check() -> Check {
    let started = Instant::now();
    let data = separable_bundles(0, 0.3);
    let config = TrainConfig::default();
    let outcome = train_with_history(&data, None, &config).map_err(|e| e.to_string())?;
    let acc = accuracy(&outcome.params, &data).map_err(|e| e.to_string())?;
    ensure(acc == 1.0, || format!("train accuracy {acc}"))?;
    ensure(outcome.history.len() <= 21, || format!("{} epochs", outcome.history.len()))?;
    within(started, Duration::from_secs(10))?;
    Ok(format!("train accuracy 1.0 at epoch {} of {}", outcome.selected_epoch, config.max_epochs))
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts").join(format!("{name}.txt"))).unwrap()
}

fn template_check() -> Check {
    let a = article("g1", "  Senator says the new bridge opened in 1850 \n", Label::Fake, 90);
    let p = prediction(vote(Label::Real, 0.62), vote(Label::Fake, 0.7149), vote(Label::Fake, 0.835));
    let ex = |m| marked_text(&render_example(&a, a.label, Some(&p), m).unwrap());
    let te = |m| marked_text(&render_test_input(&a, Some(&p), m).unwrap());
    let cases = [
        ("icl", ex(PromptMode::Icl)),
        ("icl_test", te(PromptMode::Icl)),
        ("imfnd", ex(PromptMode::Imfnd)),
        ("imfnd_test", te(PromptMode::Imfnd)),
        ("zero_shot", te(PromptMode::ZeroShot)),
    ];
    for (name, got) in &cases {
        ensure(*got == golden(name), || format!("{name} differs from golden file:\n{got:?}"))?;
    }

    let confidence = Regex::new(r" with \d{1,3}% confidence").unwrap();
    let sentences = Regex::new(r" (Text|Image|Multimodal) classifier prediction: (real|fake)\.").unwrap();
    let mut rng = SeededRng::new(5);
    for i in 0..50 {
        let words = ["flood", "mayor", "vaccine", "alien", "stock"];
        let text: Vec<&str> = (0..1 + rng.below(10)).map(|_| words[rng.below(5) as usize]).collect();
        let label = Label::from_index(rng.below(2) as usize).unwrap();
        let a = article(&format!("r{i}"), &text.join(" "), label, rng.below(255) as u8);
        let mut v = || vote(Label::from_index(rng.below(2) as usize).unwrap(), 0.5 + rng.unit_f64() / 2.0);
        let p = prediction(v(), v(), v());
        for example in [true, false] {
            let r = |m| {
                let segs = if example {
                    render_example(&a, a.label, Some(&p), m).unwrap()
                } else {
                    render_test_input(&a, Some(&p), m).unwrap()
                };
                marked_text(&segs)
            };
            let no_proba = confidence.replace_all(&r(PromptMode::Imfnd), "").into_owned();
            ensure(no_proba == r(PromptMode::ImfndNoProba), || format!("article {i}: probability strip"))?;
            let icl = sentences.replace_all(&no_proba, "").into_owned();
            ensure(icl == r(PromptMode::Icl), || format!("article {i}: prediction strip"))?;
            if !example {
                ensure(icl == r(PromptMode::ZeroShot), || format!("article {i}: zero-shot"))?;
            }
        }
    }
    Ok("5 golden files match, lattice holds on 50 articles".into())
}

fn echo_identity_check() -> Check {
    let started = Instant::now();
    let articles = corpus(20, 6);
    let split = stratified_split(&articles, 0.2, 0).map_err(|e| e.to_string())?;
    let encoder = HashBackend::new("accept", 32, 32);
    let client = make_mock_client(MockPolicy::EchoSmallModel);
    let eval = Evaluator::new(&split, dataset_digest(&articles), &encoder, &client);
    let mut runs = 0;
    for n in [1, 3, 5] {
        let cfg = ExperimentConfig {
            mode: PromptMode::Imfnd,
            n_shots: n,
            seeds: vec![1, 2, 3, 4, 5],
            ..ExperimentConfig::default()
        };
        let report = eval.run_experiment(&cfg).map_err(|e| e.to_string())?;
        ensure(report.seeds.len() == 5, || format!("n={n}: {} failed seeds", report.failed_seeds.len()))?;
        for s in &report.seeds {
            ensure(Some(s.accuracy) == s.small_model_accuracy, || {
                format!("n={n} seed {}: pipeline {} vs small model {:?}", s.seed, s.accuracy, s.small_model_accuracy)
            })?;
            runs += 1;
        }
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!("{} articles, {runs} (seed, n) runs identical", articles.len()))
}

fn parse(s: &str) -> Vec<Verdict> {
    s.chars()
        .map(|c| match c {
            'R' => Verdict::Real,
            'F' => Verdict::Fake,
            _ => Verdict::Abstain,
        })
        .collect()
}

fn gold(s: &str) -> Vec<Label> {
    s.chars().map(|c| if c == 'R' { Label::Real } else { Label::Fake }).collect()
}

fn metrics_check() -> Check {
    // (gold, pred, accuracy, macro-F1), worked by hand
    let cases: [(&str, &str, f64, f64); 12] = [
        ("RRFF", "RRFR", 3.0 / 4.0, 11.0 / 15.0),
        ("RRFF", "RRFF", 1.0, 1.0),
        ("RRFF", "FFRR", 0.0, 0.0),
        ("RF", "AA", 0.0, 0.0),
        ("RRRR", "RRRR", 1.0, 0.5),
        ("RRRF", "RRRR", 3.0 / 4.0, 3.0 / 7.0),
        ("RRFF", "RAFA", 0.5, 2.0 / 3.0),
        ("RRRFF", "FRRFR", 3.0 / 5.0, 7.0 / 12.0),
        ("FFFFFF", "FFAARR", 1.0 / 3.0, 1.0 / 4.0),
        ("RFRFRFRF", "RRRRFFFF", 0.5, 0.5),
        ("RRRRRRRRRF", "RRRRRRRRRF", 1.0, 1.0),
        ("RRFFF", "AAFFF", 3.0 / 5.0, 0.5),
    ];
    for (g, p, acc, f1) in cases {
        let m = compute_metrics(&parse(p), &gold(g)).map_err(|e| e.to_string())?;
        ensure((m.accuracy - acc).abs() <= 1e-12 && (m.macro_f1 - f1).abs() <= 1e-12, || {
            format!("{g}/{p}: got ({}, {}), want ({acc}, {f1})", m.accuracy, m.macro_f1)
        })?;
    }
    Ok(format!("{} confusion matrices exact to 1e-12", cases.len()))
}

/// Articles with the benchmark's class sizes (102 real, 96 fake).
fn benchmark_sized() -> Vec<NewsArticle> {
    let mut out = Vec::new();
    for (label, count) in [(Label::Real, 102), (Label::Fake, 96)] {
        for i in 0..count {
            out.push(article(&format!("{label}-{i:03}"), &format!("{label} item {i}"), label, i as u8));
        }
    }
    out
}

const PROBE_ENV: &str = "IMFND_ACCEPTANCE_PROBE";

fn probe_line() -> String {
    let articles = benchmark_sized();
    let split = stratified_split(&articles, 0.2, 42).unwrap();
    let support = sample_n_shot(&split, 5, 7).unwrap();
    format!("PROBE {} {} {}", dataset_digest(&split.test), dataset_digest(&split.train), support.digest())
}

/// Prints split and support digests when spawned by `sampling_check`.
#[test]
fn determinism_probe() {
    if std::env::var_os(PROBE_ENV).is_some() {
        println!("{}", probe_line());
    }
}

fn spawn_probe() -> Result<String, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let out = Command::new(exe)
        .args(["determinism_probe", "--exact", "--nocapture", "--test-threads=1"])
        .env(PROBE_ENV, "1")
        .output()
        .map_err(|e| e.to_string())?;
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.find("PROBE ").map(|i| l[i..].to_owned()))
        .ok_or_else(|| "probe printed nothing".to_string())
}

fn sampling_check() -> Check {
    let articles = benchmark_sized();
    let split = stratified_split(&articles, 0.2, 42).map_err(|e| e.to_string())?;
    let fake = split.test.iter().filter(|a| a.label == Label::Fake).count();
    let real = split.test.len() - fake;
    ensure((fake, real) == (19, 20), || format!("test set {fake} fake + {real} real"))?;
    let (a, b) = (spawn_probe()?, spawn_probe()?);
    ensure(a == b, || format!("process outputs differ:\n{a}\n{b}"))?;
    ensure(a == probe_line(), || "child digests differ from this process".into())?;
    Ok("19 fake + 20 real test articles; 3 processes agree on split and support digests".into())
}

fn seed_result(seed: u64, accuracy: f64) -> SeedResult {
    SeedResult {
        seed,
        accuracy,
        macro_f1: accuracy,
        abstain_count: 0,
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

fn stability_check() -> Check {
    let (mean, std) = mean_and_std(&[0.6, 0.7, 0.8]);
    let summary = Summary::from_seeds(&[seed_result(1, 0.6), seed_result(2, 0.7), seed_result(3, 0.8)]);
    // population std: sqrt(((-0.1)^2 + 0 + 0.1^2) / 3)
    let expected = (0.02f64 / 3.0).sqrt();
    for (m, s) in [(mean, std), (summary.mean_accuracy, summary.std_accuracy)] {
        ensure((m - 0.7).abs() < 1e-12, || format!("mean {m}"))?;
        ensure((s - 0.081649).abs() < 1e-6 && (s - expected).abs() < 1e-12, || format!("std {s}"))?;
    }
    Ok(format!("mean {mean:.6}, std {std:.6}"))
}

fn cache_check() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let articles = corpus(10, 8);
    let split = stratified_split(&articles, 0.2, 0).map_err(|e| e.to_string())?;
    let script: std::collections::HashMap<String, String> = split
        .test
        .iter()
        .map(|a| (a.text.clone(), format!("This news is {}.", a.label.flipped())))
        .collect();
    let encoder = HashBackend::new("accept", 8, 16);
    let seeds = vec![1, 2, 3];
    let cfg = ExperimentConfig {
        mode: PromptMode::Icl,
        n_shots: 2,
        seeds: seeds.clone(),
        ..ExperimentConfig::default()
    };
    let pass = || -> Result<_, String> {
        let backend = std::sync::Arc::new(MockBackend::new(MockPolicy::Scripted(script.clone())));
        let cache = ResponseCache::with_dir(dir.path()).map_err(|e| e.to_string())?;
        let client = LvlmClient::new(backend, ClientConfig::default(), cache).map_err(|e| e.to_string())?;
        let report = Evaluator::new(&split, "d", &encoder, &client).run_experiment(&cfg).map_err(|e| e.to_string())?;
        Ok((client.stats(), report))
    };
    let (first, r1) = pass()?;
    let (second, r2) = pass()?;
    let expected = (split.test.len() * seeds.len()) as u64;
    ensure(first.network_queries == expected, || format!("first pass: {} network calls", first.network_queries))?;
    ensure(second.network_queries == 0, || format!("second pass: {} network calls", second.network_queries))?;
    ensure(second.cache_hits == expected, || format!("second pass: {} hits, want {expected}", second.cache_hits))?;
    ensure(r1.to_json() == r2.to_json(), || "reports differ".into())?;
    ensure(r1.summary.mean_accuracy == 0.0, || "script was not followed".into())?;
    Ok(format!("second pass: {expected} cache hits, 0 network calls"))
}

fn online_check() -> Option<Check> {
    let dataset = std::env::var_os("IMFND_ONLINE_DATASET")?;
    let model = std::env::var("IMFND_ONLINE_MODEL").unwrap_or_else(|_| "gpt-4o".into());
    std::env::var_os(imfnd::lvlm_client::DEFAULT_API_KEY_ENV)?;
    Some((|| {
        let ds = imfnd::datasets::load_dataset(Path::new(&dataset), None).map_err(|e| e.to_string())?;
        ensure(ds.articles.len() >= 50, || format!("{} articles, need 50", ds.articles.len()))?;
        let split = stratified_split(&ds.articles, 0.2, 0).map_err(|e| e.to_string())?;
        let backend = imfnd::lvlm_client::RemoteBackend::from_env(model, imfnd::lvlm_client::DEFAULT_ENDPOINT, imfnd::lvlm_client::DEFAULT_API_KEY_ENV)
            .map_err(|e| e.to_string())?;
        let client = LvlmClient::new(std::sync::Arc::new(backend), ClientConfig::default(), ResponseCache::in_memory()).map_err(|e| e.to_string())?;
        let encoder = HashBackend::new("online", 512, 77);
        let eval = Evaluator::new(&split, ds.digest(), &encoder, &client);
        let grid = eval
            .ablation_grid(&ExperimentConfig::default(), &[PromptMode::Icl, PromptMode::Imfnd], &[1])
            .map_err(|e| e.to_string())?;
        let (icl, full) = (grid[0].summary.mean_accuracy, grid[1].summary.mean_accuracy);
        Ok(format!("ICL {icl:.3}, IMFND {full:.3} (directional only: IMFND >= ICL is {})", full >= icl))
    })())
}

#[test]
fn acceptance() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("attention oracle", attention_oracle_check),
        ("degenerate attention", degenerate_attention_check),
        ("gradient check", gradient_check),
        ("trainability", trainability_check),
        ("template fidelity", template_check),
        ("echo identity", echo_identity_check),
        ("metrics oracle", metrics_check),
        ("sampling determinism", sampling_check),
        ("stability statistics", stability_check),
        ("cache discipline", cache_check),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    match online_check() {
        None => println!("criterion 11 online grid: SKIP (set IMFND_ONLINE_DATASET and {} to run)", imfnd::lvlm_client::DEFAULT_API_KEY_ENV),
        Some(Ok(detail)) => println!("criterion 11 online grid: PASS ({detail})"),
        Some(Err(why)) => println!("criterion 11 online grid: FAIL ({why})"),
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
