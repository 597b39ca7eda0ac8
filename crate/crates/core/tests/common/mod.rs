#![allow(dead_code)]

use imfnd::classifier::{HeadVote, Labeled, SmallModelPrediction};
use imfnd::datasets::{ImageRef, Language, NewsArticle};
use imfnd::encoders::{Modality, TokenFeatures};
use imfnd::fusion::build_feature_bundle;
use imfnd::rng::SeededRng;
use imfnd::Label;
use ndarray::{Array1, Array2};

pub fn png(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |x, y| image::Rgb(f(x, y)));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

pub fn article(id: &str, text: &str, label: Label, shade: u8) -> NewsArticle {
    NewsArticle {
        id: id.into(),
        text: text.into(),
        image: ImageRef::new(png(8, 8, |x, y| [shade, (x * 16) as u8, (y * 16) as u8])),
        label,
        language: Language::En,
    }
}

/// Balanced corpus whose text and image carry the label, plus per-article noise.
pub fn corpus(per_class: usize, seed: u64) -> Vec<NewsArticle> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for label in Label::ALL {
        for i in 0..per_class {
            let (word, base) = match label {
                Label::Real => ("council", 40u8),
                Label::Fake => ("miracle", 200u8),
            };
            let filler = ["river", "market", "school", "storm", "vote", "bridge"];
            let a = filler[rng.below(filler.len() as u64) as usize];
            let b = filler[rng.below(filler.len() as u64) as usize];
            let text = format!("{word} {a} {b} story {i}");
            let shade = base.wrapping_add(rng.below(30) as u8);
            out.push(article(&format!("{}-{i:03}", label.as_str()), &text, label, shade));
        }
    }
    out
}

pub fn vote(label: Label, confidence: f64) -> HeadVote {
    HeadVote { label, confidence }
}

pub fn prediction(text: HeadVote, image: HeadVote, meta: HeadVote) -> SmallModelPrediction {
    SmallModelPrediction {
        label: meta.label,
        text,
        image,
        meta,
    }
}

/// Twenty bundles (10 per class, alternating) that are linearly separable:
/// fake tokens scatter around +mu, real tokens around -mu.
pub fn separable_bundles(seed: u64, noise: f64) -> Vec<Labeled> {
    let d = 16;
    let mut rng = SeededRng::new(seed);
    let mu_t = Array1::from_shape_fn(d, |_| if rng.below(2) == 0 { 1.0 } else { -1.0 });
    let mu_m = Array1::from_shape_fn(d, |_| if rng.below(2) == 0 { 1.0 } else { -1.0 });
    let mut out = vec![];
    for i in 0..20 {
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        let s = if label == Label::Fake { 1.0 } else { -1.0 };
        let t = Array2::from_shape_fn((3, d), |(_, k)| s * mu_t[k] + rng.symmetric(noise));
        let m = Array2::from_shape_fn((4, d), |(_, k)| s * mu_m[k] + rng.symmetric(noise));
        let tf = TokenFeatures::mean_pooled(t, Modality::Text).unwrap();
        let mf = TokenFeatures::mean_pooled(m, Modality::Image).unwrap();
        out.push((build_feature_bundle(&tf, &mf).unwrap(), label));
    }
    out
}

/// Loop-only attention: softmax(q k^T / sqrt(d)) v with no matrix routines.
pub fn attention_oracle(query: &Array2<f64>, context: &Array2<f64>) -> Array2<f64> {
    let (nq, d) = query.dim();
    let nk = context.nrows();
    let mut out = Array2::zeros((nq, d));
    for i in 0..nq {
        let mut scores = vec![0.0; nk];
        for j in 0..nk {
            let mut dot = 0.0;
            for k in 0..d {
                dot += query[[i, k]] * context[[j, k]];
            }
            scores[j] = dot / (d as f64).sqrt();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..nk {
            for k in 0..d {
                out[[i, k]] += exps[j] / total * context[[j, k]];
            }
        }
    }
    out
}

/// Independent SplitMix64 (Steele, Lea, Flood constants).
pub struct OracleSplitMix(pub u64);

impl OracleSplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, n)` by rejecting the biased low zone.
    pub fn below(&mut self, n: u64) -> u64 {
        let zone = (u64::MAX - n + 1) % n;
        loop {
            let x = self.next();
            if x >= zone {
                return x % n;
            }
        }
    }

    /// First `k` items of a forward Fisher-Yates pass.
    pub fn take<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut v = items.to_vec();
        for i in 0..k.min(v.len()) {
            let j = i + self.below((v.len() - i) as u64) as usize;
            v.swap(i, j);
        }
        v.truncate(k);
        v
    }
}
