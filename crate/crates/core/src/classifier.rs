//! The few-shot small model.
//!
//! Five linear heads (one per bundle feature) each produce a real/fake
//! probability pair; the ten probabilities are concatenated and passed to a
//! meta-linear layer whose softmax is the model's prediction. Training is
//! full-batch AdamW on cross-entropy of the meta output, optionally summed
//! with each head's own cross-entropy.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::FeatureBundle;
use crate::rng::{domain, SeededRng};
use crate::Label;

/// Clamp applied inside every `ln`.
pub const LOG_EPS: f64 = 1e-12;
pub const PARAMS_FORMAT: &str = "imfnd-small-model";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("support set must contain both classes")]
    DegenerateSupport,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed parameter document: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Text,
    Image,
    Concat,
    ImageToText,
    TextToImage,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Text, Head::Image, Head::Concat, Head::ImageToText, Head::TextToImage];

    pub fn name(self) -> &'static str {
        match self {
            Head::Text => "text",
            Head::Image => "image",
            Head::Concat => "concat",
            Head::ImageToText => "image_to_text",
            Head::TextToImage => "text_to_image",
        }
    }

    fn input_dim(self, d: usize) -> usize {
        match self {
            Head::Concat => 2 * d,
            _ => d,
        }
    }

    fn feature(self, bundle: &FeatureBundle) -> ArrayView1<'_, f64> {
        match self {
            Head::Text => bundle.text.view(),
            Head::Image => bundle.image.view(),
            Head::Concat => bundle.concat.view(),
            Head::ImageToText => bundle.image_to_text.view(),
            Head::TextToImage => bundle.text_to_image.view(),
        }
    }
}

/// Affine map to two logits: `weight` is `2 x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearLayer {
    pub fn zeros(input: usize) -> Self {
        Self {
            weight: Array2::zeros((2, input)),
            bias: Array1::zeros(2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallModelParams {
    dim: usize,
    /// Indexed in [`Head::ALL`] order.
    pub heads: [LinearLayer; 5],
    pub meta: LinearLayer,
}

const META_INPUT: usize = 10;

impl SmallModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            heads: Head::ALL.map(|h| LinearLayer::zeros(h.input_dim(dim))),
            meta: LinearLayer::zeros(META_INPUT),
        }
    }

    /// Zero biases; head weights uniform on `±1/√fan_in`; meta weights per `meta_init`.
    pub fn init(dim: usize, seed: u64, meta_init: MetaInit) -> Self {
        let mut rng = SeededRng::for_domain(seed, domain::INIT);
        let mut params = Self::zeros(dim);
        for layer in params.heads.iter_mut() {
            let bound = 1.0 / (layer.input_dim() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.symmetric(bound));
        }
        match meta_init {
            MetaInit::Uniform => {
                let bound = 1.0 / (META_INPUT as f64).sqrt();
                params.meta.weight.mapv_inplace(|_| rng.symmetric(bound));
            }
            MetaInit::Vote => {
                for h in 0..5 {
                    for class in 0..2 {
                        params.meta.weight[[class, 2 * h + class]] = 1.0;
                    }
                }
            }
        }
        params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self, head: Head) -> &LinearLayer {
        &self.heads[head as usize]
    }

    pub fn num_parameters(&self) -> usize {
        self.heads.iter().map(LinearLayer::len).sum::<usize>() + self.meta.len()
    }

    fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.heads.iter().chain(std::iter::once(&self.meta))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.heads.iter_mut().chain(std::iter::once(&mut self.meta))
    }

    /// Parameters in canonical order: each head in [`Head::ALL`] order then
    /// meta; within a layer, weight row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_parameters());
        let mut it = flat.iter();
        for layer in self.layers_mut() {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// SHA-256 over the little-endian bytes of [`Self::to_flat`].
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for v in self.to_flat() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_document(&self) -> ParamsDocument {
        let names = Head::ALL.iter().map(|h| h.name()).chain(std::iter::once("meta"));
        ParamsDocument {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            dim: self.dim,
            checksum: self.checksum(),
            layers: names
                .zip(self.layers())
                .map(|(name, l)| LayerDocument {
                    name: name.into(),
                    input_dim: l.input_dim(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &ParamsDocument) -> Result<Self> {
        if doc.format != PARAMS_FORMAT || doc.version != PARAMS_VERSION {
            return Err(ClassifierError::Format(format!(
                "unsupported format {} v{}",
                doc.format, doc.version
            )));
        }
        let mut params = Self::zeros(doc.dim);
        let expected: Vec<&str> = Head::ALL.iter().map(|h| h.name()).chain(std::iter::once("meta")).collect();
        if doc.layers.len() != expected.len() {
            return Err(ClassifierError::Format(format!("expected 6 layers, found {}", doc.layers.len())));
        }
        for ((layer, stored), name) in params.layers_mut().zip(&doc.layers).zip(expected) {
            if stored.name != name || stored.input_dim != layer.input_dim() {
                return Err(ClassifierError::Format(format!("layer `{}` does not match `{name}`", stored.name)));
            }
            if stored.weight.len() != layer.weight.len() || stored.bias.len() != 2 {
                return Err(ClassifierError::Format(format!("layer `{name}` has wrong shape")));
            }
            layer.weight = Array2::from_shape_vec((2, layer.input_dim()), stored.weight.clone())
                .map_err(|e| ClassifierError::Format(e.to_string()))?;
            layer.bias = Array1::from(stored.bias.clone());
        }
        if params.checksum() != doc.checksum {
            return Err(ClassifierError::Format("checksum mismatch".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("params serialise")
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let doc: ParamsDocument = serde_json::from_str(raw).map_err(|e| ClassifierError::Format(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// Versioned JSON layout of [`SmallModelParams`]; layer order is fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub checksum: String,
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDocument {
    pub name: String,
    pub input_dim: usize,
    /// Row-major `2 x input_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `(p_real, p_fake)`.
pub type ProbPair = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadProbabilities {
    /// Indexed in [`Head::ALL`] order.
    pub heads: [ProbPair; 5],
    pub meta: ProbPair,
}

impl HeadProbabilities {
    pub fn head(&self, head: Head) -> ProbPair {
        self.heads[head as usize]
    }

    fn meta_input(&self) -> Array1<f64> {
        Array1::from_iter(self.heads.iter().flat_map(|p| p.iter().copied()))
    }
}

fn softmax2(z: ArrayView1<f64>) -> ProbPair {
    let m = z[0].max(z[1]);
    let a = (z[0] - m).exp();
    let b = (z[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

fn check_bundle(params: &SmallModelParams, bundle: &FeatureBundle) -> Result<()> {
    for head in Head::ALL {
        let expected = params.head(head).input_dim();
        let found = head.feature(bundle).len();
        if expected != found {
            return Err(ClassifierError::DimensionMismatch { expected, found });
        }
    }
    Ok(())
}

pub fn forward(params: &SmallModelParams, bundle: &FeatureBundle) -> Result<HeadProbabilities> {
    check_bundle(params, bundle)?;
    let heads = Head::ALL.map(|h| softmax2(params.head(h).logits(h.feature(bundle)).view()));
    let mut probs = HeadProbabilities { heads, meta: [0.5, 0.5] };
    probs.meta = softmax2(params.meta.logits(probs.meta_input().view()).view());
    Ok(probs)
}

fn nll(pair: ProbPair, label: Label) -> f64 {
    -pair[label.index()].max(LOG_EPS).ln()
}

/// Cross-entropy of the meta pair.
pub fn loss(probs: &HeadProbabilities, label: Label) -> f64 {
    nll(probs.meta, label)
}

/// Meta cross-entropy plus `head_weight` times each head's cross-entropy.
pub fn objective(probs: &HeadProbabilities, label: Label, head_weight: Option<f64>) -> f64 {
    let mut total = loss(probs, label);
    if let Some(w) = head_weight {
        total += w * probs.heads.iter().map(|&p| nll(p, label)).sum::<f64>();
    }
    total
}

/// Objective value and its gradient with respect to every parameter, laid out
/// like the parameters themselves.
pub fn objective_gradient(
    params: &SmallModelParams,
    bundle: &FeatureBundle,
    label: Label,
    head_weight: Option<f64>,
) -> Result<(f64, SmallModelParams)> {
    let probs = forward(params, bundle)?;
    let value = objective(&probs, label, head_weight);
    let y = label.index();
    let mut grad = SmallModelParams::zeros(params.dim);

    // d/dz of -ln softmax(z)[y] is softmax(z) - onehot(y).
    let dz_meta = [probs.meta[0] - (y == 0) as u8 as f64, probs.meta[1] - (y == 1) as u8 as f64];
    let x = probs.meta_input();
    for c in 0..2 {
        for j in 0..META_INPUT {
            grad.meta.weight[[c, j]] = dz_meta[c] * x[j];
        }
        grad.meta.bias[c] = dz_meta[c];
    }

    for (h, head) in Head::ALL.into_iter().enumerate() {
        let p = probs.heads[h];
        let dp = [
            params.meta.weight[[0, 2 * h]] * dz_meta[0] + params.meta.weight[[1, 2 * h]] * dz_meta[1],
            params.meta.weight[[0, 2 * h + 1]] * dz_meta[0] + params.meta.weight[[1, 2 * h + 1]] * dz_meta[1],
        ];
        // softmax Jacobian: dz_i = p_i (dp_i - Σ_j p_j dp_j)
        let inner = p[0] * dp[0] + p[1] * dp[1];
        let mut dz = [p[0] * (dp[0] - inner), p[1] * (dp[1] - inner)];
        if let Some(w) = head_weight {
            dz[0] += w * (p[0] - (y == 0) as u8 as f64);
            dz[1] += w * (p[1] - (y == 1) as u8 as f64);
        }
        let f = head.feature(bundle);
        let layer = &mut grad.heads[h];
        for c in 0..2 {
            layer.weight.row_mut(c).assign(&f.mapv(|v| v * dz[c]));
            layer.bias[c] = dz[c];
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Best accuracy on the evaluation set (support set when none is given),
    /// ties broken by lower training objective.
    TestAccuracy,
    TrainLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInit {
    /// Meta logit for a class starts as the sum of that class's head
    /// probabilities (a soft vote).
    Vote,
    /// Seeded uniform on `±1/√10`, like the heads.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub selection_metric: SelectionMetric,
    /// Weight of the per-head cross-entropy terms; `None` trains on the meta loss only.
    pub head_loss_weight: Option<f64>,
    pub meta_init: MetaInit,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            max_epochs: 20,
            early_stop_patience: 3,
            selection_metric: SelectionMetric::TestAccuracy,
            head_loss_weight: Some(1.0),
            meta_init: MetaInit::Vote,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("max_epochs and early_stop_patience must be positive");
        }
        if self.early_stop_patience > self.max_epochs {
            return bad("early_stop_patience exceeds max_epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps must be positive");
        }
        if matches!(self.head_loss_weight, Some(w) if !(w >= 0.0)) {
            return bad("head_loss_weight must be non-negative");
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay (decay applied to every parameter).
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            theta[i] -= cfg.learning_rate * cfg.weight_decay * theta[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

pub type Labeled = (FeatureBundle, Label);

/// Per-epoch record of a training run; epoch 0 is the initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub selection_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SmallModelParams,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn mean_objective(params: &SmallModelParams, data: &[Labeled], head_weight: Option<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (bundle, label) in data {
        total += objective(&forward(params, bundle)?, *label, head_weight);
    }
    Ok(total / data.len() as f64)
}

/// Fraction of `data` whose meta label matches.
pub fn accuracy(params: &SmallModelParams, data: &[Labeled]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (bundle, label) in data {
        if predict_article(params, bundle)?.label == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn train_small_model(support: &[Labeled], eval_set: Option<&[Labeled]>, config: &TrainConfig) -> Result<SmallModelParams> {
    train_with_history(support, eval_set, config).map(|o| o.params)
}

pub fn train_with_history(support: &[Labeled], eval_set: Option<&[Labeled]>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = support.first().ok_or(ClassifierError::DegenerateSupport)?;
    if !Label::ALL.iter().all(|l| support.iter().any(|(_, y)| y == l)) {
        return Err(ClassifierError::DegenerateSupport);
    }
    let dim = first.0.dim();
    let mut params = SmallModelParams::init(dim, config.seed, config.meta_init);
    for (bundle, _) in support {
        check_bundle(&params, bundle)?;
    }
    let selection_set = eval_set.filter(|e| !e.is_empty()).unwrap_or(support);

    let score = |p: &SmallModelParams, epoch: usize| -> Result<EpochRecord> {
        let train_objective = mean_objective(p, support, config.head_loss_weight)?;
        if !train_objective.is_finite() {
            return Err(ClassifierError::NonFiniteLoss { epoch });
        }
        Ok(EpochRecord {
            epoch,
            train_objective,
            selection_accuracy: accuracy(p, selection_set)?,
        })
    };
    let better = |a: &EpochRecord, b: &EpochRecord| match config.selection_metric {
        SelectionMetric::TestAccuracy => {
            a.selection_accuracy > b.selection_accuracy
                || (a.selection_accuracy == b.selection_accuracy && a.train_objective < b.train_objective)
        }
        SelectionMetric::TrainLoss => a.train_objective < b.train_objective,
    };

    let mut history = vec![score(&params, 0)?];
    let mut best = (params.clone(), history[0].clone());
    let mut stale = 0;
    let mut theta = params.to_flat();
    let mut optimizer = AdamW::new(theta.len());
    let n = support.len() as f64;

    for epoch in 1..=config.max_epochs {
        let mut grad = vec![0.0; theta.len()];
        for (bundle, label) in support {
            let (_, g) = objective_gradient(&params, bundle, *label, config.head_loss_weight)?;
            for (acc, v) in grad.iter_mut().zip(g.to_flat()) {
                *acc += v / n;
            }
        }
        optimizer.step(&mut theta, &grad, config);
        params.set_flat(&theta);
        if !params.is_finite() {
            return Err(ClassifierError::NonFiniteLoss { epoch });
        }
        let record = score(&params, epoch)?;
        history.push(record.clone());
        if better(&record, &best.1) {
            best = (params.clone(), record);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        selected_epoch: best.1.epoch,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadVote {
    pub label: Label,
    /// Larger of the pair, in `[0.5, 1]`.
    pub confidence: f64,
}

impl HeadVote {
    /// `Fake` only when `p_fake > p_real`; ties go to `Real`.
    pub fn from_pair(pair: ProbPair) -> Self {
        let label = if pair[1] > pair[0] { Label::Fake } else { Label::Real };
        Self {
            label,
            confidence: pair[0].max(pair[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallModelPrediction {
    pub label: Label,
    pub text: HeadVote,
    pub image: HeadVote,
    pub meta: HeadVote,
}

impl SmallModelPrediction {
    pub fn from_probabilities(probs: &HeadProbabilities) -> Self {
        let meta = HeadVote::from_pair(probs.meta);
        Self {
            label: meta.label,
            text: HeadVote::from_pair(probs.head(Head::Text)),
            image: HeadVote::from_pair(probs.head(Head::Image)),
            meta,
        }
    }
}

pub fn predict_article(params: &SmallModelParams, bundle: &FeatureBundle) -> Result<SmallModelPrediction> {
    Ok(SmallModelPrediction::from_probabilities(&forward(params, bundle)?))
}
