//! Small-model guided in-context prompting for multimodal fake news detection.
//!
//! A few-shot linear-probe classifier is trained on fused text/image features;
//! its labels and confidences are written into in-context prompts for a large
//! visual-language model, and the whole loop is evaluated over several seeds.
//!
//! Module map:
//! - [`encoders`]: text/image encoder backends and similarity utilities
//! - [`fusion`]: the five-feature bundle with bidirectional cross-attention
//! - [`classifier`]: per-feature heads plus a meta-linear classifier, trained with AdamW
//! - [`prompting`]: byte-exact prompt templates and prompt assembly
//! - [`lvlm_client`]: model client contract, caching, retries, verdict parsing, mocks
//! - [`datasets`]: JSONL ingest, best-image selection, stratified split, n-shot sampling
//! - [`evaluation`]: metrics, per-seed runs, experiments, ablation grids and reports

pub mod classifier;
pub mod datasets;
pub mod encoders;
pub mod evaluation;
pub mod fusion;
pub mod label;
pub mod lvlm_client;
pub mod prompting;
pub mod rng;

pub use label::Label;
