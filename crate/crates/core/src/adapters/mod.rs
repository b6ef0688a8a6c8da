//! Adapter traits isolating every external perception model, the bundle
//! type handed to pipelines, and a registry for selecting implementations
//! by name.
//!
//! Production backends (CLIP-like encoders, face analysis stacks,
//! segmenters, captioners, parsers) plug in behind these traits. The crate
//! ships deterministic mock implementations (see [`mock`]) that are pure
//! functions of `(inputs, seed)`, which keeps the full pipeline testable
//! without model weights. Adapters are immutable after construction and
//! shareable across threads.

pub mod mock;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoolGrid, FaceBox, PixelGrid, SegmentMask};
use crate::vocab::Occurrence;

/// Unit-norm identity embedding produced by a face embedder.
#[derive(Debug, Clone)]
pub struct FaceEmbedding {
    vector: Array1<f64>,
}

impl FaceEmbedding {
    /// Normalizes to unit length; rejects zero or non-finite vectors.
    pub fn new(v: Array1<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("face embedding must be non-empty and finite"));
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            return Err(Error::invalid("face embedding must be nonzero"));
        }
        Ok(FaceEmbedding { vector: v / norm })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn unit(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn cosine(&self, other: &FaceEmbedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::dim("face cosine", self.dim(), other.dim()));
        }
        Ok(self.vector.dot(&other.vector))
    }

    /// Negated Euclidean distance; higher means more similar. This is the
    /// similarity the verification stage aggregates.
    pub fn neg_l2(&self, other: &FaceEmbedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::dim("face l2", self.dim(), other.dim()));
        }
        let d = (&self.vector - &other.vector).mapv(|x| x * x).sum().sqrt();
        Ok(-d)
    }
}

/// A token with its byte span in the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Text encoded to one row per position. Row 0 is the begin marker, rows
/// `1..=tokens.len()` correspond to tokens in order, and the last row is
/// the end marker, so an empty string still encodes to two rows.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub matrix: ndarray::Array2<f64>,
    pub tokens: Vec<Token>,
}

impl EncodedText {
    /// Matrix row holding token `i`.
    pub fn token_row(&self, i: usize) -> usize {
        i + 1
    }
}

/// Lowercase alphanumeric-run tokenizer with byte offsets; shared by the
/// mock text encoder and the dependency-parser mock so spans line up.
pub fn tokenize(text: &str) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_alphanumeric() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            tokens.push(Token {
                text: text[start..i].to_ascii_lowercase(),
                start,
                end: i,
            });
        } else {
            i += 1;
        }
    }
    tokens
}

/// Image feature backbone (CLIP-style). When a mask is supplied the feature
/// must depend only on pixels where the mask is true.
pub trait ImageEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, image: &PixelGrid, mask: Option<&BoolGrid>) -> Result<Array1<f64>>;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EncodedText>;
}

pub trait FaceDetector: Send + Sync {
    /// Boxes clipped to image bounds, deterministic order.
    fn detect(&self, image: &PixelGrid) -> Result<Vec<FaceBox>>;
}

pub trait FaceEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Embeds a face crop (pixels).
    fn embed_crop(&self, crop: &PixelGrid) -> Result<FaceEmbedding>;
    /// Embeds a labelled fixture tag of the form `"<identity>:<variant>"`.
    /// Mock-only convenience used by fixtures and contract tests; real
    /// backends may reject it.
    fn embed_tag(&self, tag: &str) -> Result<FaceEmbedding>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &PixelGrid) -> Result<Vec<SegmentMask>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionMode {
    /// Deterministic beam/greedy output: same input, same caption.
    Greedy,
    /// Sampling-mode output; varies with the attempt counter.
    Random { attempt: u32 },
}

pub trait Captioner: Send + Sync {
    /// Captions an image. `tag` carries the fixture label when available
    /// (mocks key off it); real backends should use the pixels.
    fn caption(&self, image: &PixelGrid, tag: &str, mode: CaptionMode) -> Result<String>;
}

/// One caption segment owning exactly one class-word occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSegment {
    pub text: String,
    pub start: usize,
    pub end: usize,
    /// Occurrence spans are in caption coordinates, not segment-local ones.
    pub occurrence: Occurrence,
}

pub trait DependencyParser: Send + Sync {
    /// Splits a caption into contiguous segments, one per class-word
    /// occurrence. Errors when the caption has no class word.
    fn segment_by_class_words(&self, caption: &str) -> Result<Vec<CaptionSegment>>;
}

pub trait LabelSimilarity: Send + Sync {
    /// Symmetric similarity of two short labels in `[0, 1]`, 1 for equal.
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

pub trait PerceptualDistance: Send + Sync {
    /// Symmetric distance, zero for identical images.
    fn distance(&self, a: &PixelGrid, b: &PixelGrid) -> Result<f64>;
}

pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, image: &PixelGrid) -> Result<Array1<f64>>;
}

/// The full set of perception backends used across the pipeline.
#[derive(Clone)]
pub struct AdapterSet {
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub face_detector: Arc<dyn FaceDetector>,
    pub face_embedder: Arc<dyn FaceEmbedder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub captioner: Arc<dyn Captioner>,
    pub parser: Arc<dyn DependencyParser>,
    pub label_similarity: Arc<dyn LabelSimilarity>,
    pub perceptual: Arc<dyn PerceptualDistance>,
    pub fid_features: Arc<dyn FeatureExtractor>,
    pub dino_features: Arc<dyn FeatureExtractor>,
}

impl AdapterSet {
    /// All-mock set with role-separated seed streams.
    pub fn mocks(seed: u64, ctx: &AdapterBuildContext) -> Self {
        mock::build_set(seed, ctx)
    }

    /// Cosine between the pooled text feature and the image feature, used
    /// for prompt-fidelity scoring and for ranking caption segments. The
    /// image- and text-feature dimensions must agree.
    pub fn clip_similarity(&self, text: &str, image: &PixelGrid) -> Result<f64> {
        if self.image_encoder.dim() != self.text_encoder.dim() {
            return Err(Error::dim(
                "clip_similarity feature dims",
                self.text_encoder.dim(),
                self.image_encoder.dim(),
            ));
        }
        let enc = self.text_encoder.encode(text)?;
        let pooled = enc.matrix.mean_axis(ndarray::Axis(0)).expect("non-empty rows");
        let img = self.image_encoder.encode(image, None)?;
        let np = pooled.dot(&pooled).sqrt();
        let ni = img.dot(&img).sqrt();
        if np < 1e-12 || ni < 1e-12 {
            return Ok(0.0);
        }
        Ok(pooled.dot(&img) / (np * ni))
    }
}

/// Per-role implementation selection; `"mock"` everywhere by default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptersConfig {
    pub image_encoder: String,
    pub text_encoder: String,
    pub face_detector: String,
    pub face_embedder: String,
    pub segmenter: String,
    pub captioner: String,
    pub parser: String,
    pub label_similarity: String,
    pub perceptual: String,
    pub fid_features: String,
    pub dino_features: String,
}

impl Default for AdaptersConfig {
    fn default() -> Self {
        let m = || "mock".to_string();
        AdaptersConfig {
            image_encoder: m(),
            text_encoder: m(),
            face_detector: m(),
            face_embedder: m(),
            segmenter: m(),
            captioner: m(),
            parser: m(),
            label_similarity: m(),
            perceptual: m(),
            fid_features: m(),
            dino_features: m(),
        }
    }
}

impl AdaptersConfig {
    /// Sets every role to the same implementation name.
    pub fn all(name: &str) -> Self {
        let n = || name.to_string();
        AdaptersConfig {
            image_encoder: n(),
            text_encoder: n(),
            face_detector: n(),
            face_embedder: n(),
            segmenter: n(),
            captioner: n(),
            parser: n(),
            label_similarity: n(),
            perceptual: n(),
            fid_features: n(),
            dino_features: n(),
        }
    }
}

/// Dimensions and seed handed to adapter factories.
#[derive(Debug, Clone)]
pub struct AdapterBuildContext {
    pub seed: u64,
    pub image_feature_dim: usize,
    pub text_dim: usize,
    pub face_dim: usize,
    pub fid_dim: usize,
    pub dino_dim: usize,
}

impl Default for AdapterBuildContext {
    fn default() -> Self {
        AdapterBuildContext {
            seed: 0,
            image_feature_dim: 32,
            text_dim: 32,
            face_dim: 512,
            fid_dim: 16,
            dino_dim: 24,
        }
    }
}

macro_rules! adapter_registry {
    ($( $field:ident : $trait_:ident => $register:ident, $cfg:ident ;)*) => {
        /// Name-to-factory registry. `"mock"` is pre-registered for every
        /// role; plugins add themselves under their own names and are then
        /// selectable from configuration.
        #[derive(Default)]
        pub struct AdapterRegistry {
            $( $field: BTreeMap<String, Box<dyn Fn(&AdapterBuildContext) -> Result<Arc<dyn $trait_>> + Send + Sync>>, )*
        }

        impl AdapterRegistry {
            $(
                pub fn $register<F>(&mut self, name: &str, factory: F)
                where
                    F: Fn(&AdapterBuildContext) -> Result<Arc<dyn $trait_>> + Send + Sync + 'static,
                {
                    self.$field.insert(name.to_string(), Box::new(factory));
                }
            )*

            /// Builds the configured implementation per role.
            pub fn build(&self, cfg: &AdaptersConfig, ctx: &AdapterBuildContext) -> Result<AdapterSet> {
                Ok(AdapterSet {
                    $(
                        $field: {
                            let name = &cfg.$cfg;
                            let factory = self.$field.get(name).ok_or_else(|| {
                                Error::config(format!(
                                    "unknown {} adapter {:?}; registered: {}",
                                    stringify!($cfg),
                                    name,
                                    self.$field.keys().cloned().collect::<Vec<_>>().join(", ")
                                ))
                            })?;
                            factory(ctx)?
                        },
                    )*
                })
            }
        }
    };
}

adapter_registry! {
    image_encoder: ImageEncoder => register_image_encoder, image_encoder;
    text_encoder: TextEncoder => register_text_encoder, text_encoder;
    face_detector: FaceDetector => register_face_detector, face_detector;
    face_embedder: FaceEmbedder => register_face_embedder, face_embedder;
    segmenter: Segmenter => register_segmenter, segmenter;
    captioner: Captioner => register_captioner, captioner;
    parser: DependencyParser => register_parser, parser;
    label_similarity: LabelSimilarity => register_label_similarity, label_similarity;
    perceptual: PerceptualDistance => register_perceptual, perceptual;
    fid_features: FeatureExtractor => register_fid_features, fid_features;
    dino_features: FeatureExtractor => register_dino_features, dino_features;
}

impl AdapterRegistry {
    /// Registry with the mock implementation registered for every role.
    pub fn with_mocks() -> Self {
        let mut r = AdapterRegistry::default();
        mock::register(&mut r);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_reports_byte_offsets() {
        let t = tokenize("A man, riding!");
        let got: Vec<(&str, usize, usize)> =
            t.iter().map(|k| (k.text.as_str(), k.start, k.end)).collect();
        assert_eq!(got, vec![("a", 0, 1), ("man", 2, 5), ("riding", 7, 13)]);
    }

    #[test]
    fn face_embedding_normalizes_and_validates() {
        let e = FaceEmbedding::new(ndarray::arr1(&[3.0, 4.0])).unwrap();
        assert!((e.unit().dot(e.unit()) - 1.0).abs() < 1e-12);
        assert!(FaceEmbedding::new(ndarray::arr1(&[0.0, 0.0])).is_err());
        assert!(FaceEmbedding::new(ndarray::arr1(&[f64::NAN, 1.0])).is_err());
    }

    #[test]
    fn registry_rejects_unknown_names_with_listing() {
        let reg = AdapterRegistry::with_mocks();
        let mut cfg = AdaptersConfig::default();
        cfg.captioner = "nonexistent-backend".into();
        let err = match reg.build(&cfg, &AdapterBuildContext::default()) {
            Ok(_) => panic!("unknown adapter name must be rejected"),
            Err(e) => e,
        };
        let msg = err.to_string();
        assert!(msg.contains("nonexistent-backend") && msg.contains("mock"), "{msg}");
    }

    #[test]
    fn registry_builds_all_mock_set() {
        let reg = AdapterRegistry::with_mocks();
        let set = reg.build(&AdaptersConfig::default(), &AdapterBuildContext::default()).unwrap();
        assert_eq!(set.face_embedder.dim(), 512);
        assert_eq!(set.image_encoder.dim(), 32);
    }
}
