//! Five-feature fusion of a text/image pair.
//!
//! The bundle holds the pooled text feature, the pooled image feature, their
//! L2-normalised concatenation, and two cross-attended features. Attention is
//! computed at token level (`softmax(Q Kᵀ / √d) V` with `K = V = context`, no
//! learned projections) and the attended sequence is mean-pooled.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{l2_normalize, EncoderError, Modality, TokenFeatures};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("expected {expected:?} features, found {found:?}")]
    ModalityMismatch { expected: Modality, found: Modality },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Pooled text feature (`d`).
    pub text: Array1<f64>,
    /// Pooled image feature (`d`).
    pub image: Array1<f64>,
    /// Normalised `text ⊕ image` (`2d`).
    pub concat: Array1<f64>,
    /// Image tokens attending over text tokens, pooled (`d`).
    pub image_to_text: Array1<f64>,
    /// Text tokens attending over image tokens, pooled (`d`).
    pub text_to_image: Array1<f64>,
}

impl FeatureBundle {
    pub fn dim(&self) -> usize {
        self.text.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionOptions {
    /// Also L2-normalise each half before concatenating.
    pub normalize_halves: bool,
}

fn check_dims(m: &ArrayView2<f64>, d: usize) -> Result<()> {
    if m.ncols() != d {
        return Err(FusionError::DimensionMismatch {
            expected: d,
            found: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(FusionError::EmptyMatrix);
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    Ok(())
}

/// Row-stochastic attention weights (`Nq x Nk`).
pub fn attention_weights(query: ArrayView2<f64>, context: ArrayView2<f64>, d: usize) -> Result<Array2<f64>> {
    check_dims(&query, d)?;
    check_dims(&context, d)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = query.dot(&context.t()) * scale;
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits)
}

pub fn cross_attend(query: ArrayView2<f64>, context: ArrayView2<f64>, d: usize) -> Result<Array2<f64>> {
    let weights = attention_weights(query, context, d)?;
    Ok(weights.dot(&context))
}

/// Mean over rows.
pub fn pool(m: ArrayView2<f64>) -> Result<Array1<f64>> {
    m.mean_axis(Axis(0)).ok_or(FusionError::EmptyMatrix)
}

pub fn build_feature_bundle(text: &TokenFeatures, image: &TokenFeatures) -> Result<FeatureBundle> {
    build_feature_bundle_with(text, image, FusionOptions::default())
}

pub fn build_feature_bundle_with(
    text: &TokenFeatures,
    image: &TokenFeatures,
    options: FusionOptions,
) -> Result<FeatureBundle> {
    if text.modality != Modality::Text {
        return Err(FusionError::ModalityMismatch {
            expected: Modality::Text,
            found: text.modality,
        });
    }
    if image.modality != Modality::Image {
        return Err(FusionError::ModalityMismatch {
            expected: Modality::Image,
            found: image.modality,
        });
    }
    let d = text.pooled.len();
    for len in [image.pooled.len(), text.tokens.ncols(), image.tokens.ncols()] {
        if len != d {
            return Err(FusionError::DimensionMismatch { expected: d, found: len });
        }
    }
    let (left, right) = if options.normalize_halves {
        (l2_normalize(text.pooled.view())?, l2_normalize(image.pooled.view())?)
    } else {
        (text.pooled.clone(), image.pooled.clone())
    };
    let joined = concatenate(Axis(0), &[left.view(), right.view()]).expect("1-d concat");
    let concat = l2_normalize(joined.view())?;
    let image_to_text = pool(cross_attend(image.tokens.view(), text.tokens.view(), d)?.view())?;
    let text_to_image = pool(cross_attend(text.tokens.view(), image.tokens.view(), d)?.view())?;
    Ok(FeatureBundle {
        text: text.pooled.clone(),
        image: image.pooled.clone(),
        concat,
        image_to_text,
        text_to_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use ndarray::{array, Array2};

    fn random(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.symmetric(2.0))
    }

    /// Explicit-loop attention used as the reference.
    fn attend_loops(q: &Array2<f64>, c: &Array2<f64>, d: usize) -> Array2<f64> {
        let mut out = Array2::zeros((q.nrows(), d));
        for i in 0..q.nrows() {
            let mut logits = vec![0.0; c.nrows()];
            for j in 0..c.nrows() {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += q[[i, k]] * c[[j, k]];
                }
                logits[j] = acc / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..c.nrows() {
                for k in 0..d {
                    out[[i, k]] += exps[j] / z * c[[j, k]];
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_context_row() {
        let q = array![[0.3, -2.0, 1.0]];
        let c = array![[5.0, 6.0, -7.0]];
        assert_eq!(cross_attend(q.view(), c.view(), 3).unwrap(), c);
    }

    #[test]
    fn zero_query_gives_uniform_mean() {
        let q = Array2::zeros((2, 4));
        let c = array![[1.0, 2.0, 3.0, 4.0], [3.0, 2.0, 1.0, 0.0], [-1.0, 5.0, 2.0, 2.0]];
        let out = cross_attend(q.view(), c.view(), 4).unwrap();
        let mean = c.mean_axis(Axis(0)).unwrap();
        for row in out.outer_iter() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = SeededRng::new(42);
        let q = random(&mut rng, 4, 8);
        let c = random(&mut rng, 3, 8);
        let fast = cross_attend(q.view(), c.view(), 8).unwrap();
        let slow = attend_loops(&q, &c, 8);
        let err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "max abs err {err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let q = Array2::zeros((2, 4));
        let c = Array2::zeros((2, 5));
        assert!(matches!(
            cross_attend(q.view(), c.view(), 4),
            Err(FusionError::DimensionMismatch { expected: 4, found: 5 })
        ));
    }

    #[test]
    fn pool_examples() {
        assert_eq!(pool(array![[1.0, -2.0]].view()).unwrap(), array![1.0, -2.0]);
        assert_eq!(pool(array![[1.0, 1.0], [3.0, 3.0]].view()).unwrap(), array![2.0, 2.0]);
        assert_eq!(pool(Array2::<f64>::zeros((0, 3)).view()).unwrap_err(), FusionError::EmptyMatrix);

        let mut rng = SeededRng::new(5);
        let m = random(&mut rng, 5, 4);
        let pooled = pool(m.view()).unwrap();
        for col in 0..4 {
            let mut acc = 0.0;
            for row in (0..5).rev() {
                acc += m[[row, col]];
            }
            assert!((pooled[col] - acc / 5.0).abs() < 1e-12);
        }
    }

    fn features(tokens: Array2<f64>, modality: Modality) -> TokenFeatures {
        TokenFeatures::mean_pooled(tokens, modality).unwrap()
    }

    #[test]
    fn single_token_bundle_collapses() {
        let t = features(array![[0.1, 0.2, -0.3]], Modality::Text);
        let m = features(array![[1.0, -1.0, 2.0]], Modality::Image);
        let b = build_feature_bundle(&t, &m).unwrap();
        assert_eq!(b.image_to_text, t.pooled);
        assert_eq!(b.text_to_image, m.pooled);
    }

    #[test]
    fn concat_is_normalised_jointly() {
        let t = TokenFeatures {
            tokens: array![[3.0, 4.0, 0.0, 0.0]],
            pooled: array![3.0, 4.0, 0.0, 0.0],
            modality: Modality::Text,
        };
        let m = TokenFeatures {
            tokens: array![[0.0, 0.0, 0.0, 5.0]],
            pooled: array![0.0, 0.0, 0.0, 5.0],
            modality: Modality::Image,
        };
        let b = build_feature_bundle(&t, &m).unwrap();
        let r = 50f64.sqrt();
        let expected = [3.0 / r, 4.0 / r, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0 / r];
        for (a, e) in b.concat.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }

        let halves = build_feature_bundle_with(&t, &m, FusionOptions { normalize_halves: true }).unwrap();
        let h = 2f64.sqrt();
        let expected = [0.6 / h, 0.8 / h, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0 / h];
        for (a, e) in halves.concat.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bundle_rejects_swapped_modalities() {
        let t = features(array![[1.0, 0.0]], Modality::Text);
        let m = features(array![[0.0, 1.0]], Modality::Image);
        assert!(matches!(build_feature_bundle(&m, &t), Err(FusionError::ModalityMismatch { .. })));
        let wide = features(array![[0.0, 1.0, 2.0]], Modality::Image);
        assert!(matches!(build_feature_bundle(&t, &wide), Err(FusionError::DimensionMismatch { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
            prop::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
        }

        proptest! {
            #[test]
            fn weights_are_stochastic(q in matrix(3, 6), c in matrix(5, 6)) {
                let w = attention_weights(q.view(), c.view(), 6).unwrap();
                for row in w.outer_iter() {
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn query_permutation_equivariance(q in matrix(4, 5), c in matrix(3, 5), seed in any::<u64>()) {
                let mut order: Vec<usize> = (0..4).collect();
                SeededRng::new(seed).partial_shuffle(&mut order, 4);
                let permuted = q.select(Axis(0), &order);
                let a = cross_attend(q.view(), c.view(), 5).unwrap().select(Axis(0), &order);
                let b = cross_attend(permuted.view(), c.view(), 5).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn context_permutation_invariance(q in matrix(2, 4), c in matrix(6, 4), seed in any::<u64>()) {
                let mut order: Vec<usize> = (0..6).collect();
                SeededRng::new(seed).partial_shuffle(&mut order, 6);
                let permuted = c.select(Axis(0), &order);
                let a = cross_attend(q.view(), c.view(), 4).unwrap();
                let b = cross_attend(q.view(), permuted.view(), 4).unwrap();
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn concat_has_unit_norm(t in matrix(3, 4), m in matrix(2, 4)) {
                let tf = TokenFeatures::mean_pooled(t, Modality::Text).unwrap();
                let mf = TokenFeatures::mean_pooled(m, Modality::Image).unwrap();
                prop_assume!(tf.pooled.iter().chain(mf.pooled.iter()).any(|x| x.abs() > 1e-6));
                let b = build_feature_bundle(&tf, &mf).unwrap();
                prop_assert!((b.concat.dot(&b.concat).sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }
}
