//! Deterministic mock adapters.
//!
//! Every mock is a pure function of its inputs and the seed it was built
//! with: same inputs, same outputs, on any platform. They are structured
//! rather than hash-opaque — features come from downsampled pixel content
//! pushed through fixed seeded projections — so identity information in
//! synthetic fixtures survives into feature space and downstream learning
//! and metrics behave qualitatively like their real counterparts.
//!
//! Conventions shared with the synthetic fixture generator:
//! - Face regions are framed by a one-pixel magenta border
//!   ([`MARKER_RGB`]); the detector scans for these frames and the
//!   embedder strips the frame before featurizing.
//! - Images without any frame fall back to a centered square detection
//!   with side `min(h, w) / 2`, which is where generated samples carry
//!   their subject.
//! - Fixture tags are `"<identity>:<variant>"`; the tag-keyed mocks derive
//!   their randomness from the identity part so variants of one identity
//!   agree.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{downsample, BoolGrid, FaceBox, PixelGrid, SegmentMask};
use crate::rng::{derive_seed, derive_seed_str, rng_from};
use crate::vocab;

use super::{
    AdapterBuildContext, AdapterRegistry, AdapterSet, CaptionMode, CaptionSegment, Captioner,
    DependencyParser, EncodedText, FaceDetector, FaceEmbedder, FaceEmbedding, FeatureExtractor,
    ImageEncoder, LabelSimilarity, PerceptualDistance, Segmenter, TextEncoder, Token,
};

pub const MARKER_RGB: [f64; 3] = [1.0, 0.0, 1.0];

fn is_marker(g: &PixelGrid, y: usize, x: usize) -> bool {
    (g[[y, x, 0]] - MARKER_RGB[0]).abs() < 1e-9
        && (g[[y, x, 1]] - MARKER_RGB[1]).abs() < 1e-9
        && (g[[y, x, 2]] - MARKER_RGB[2]).abs() < 1e-9
}

/// Seeded Gaussian matrix with entries scaled by `1/sqrt(cols)` so products
/// with unit-scale inputs stay unit-scale.
fn seeded_projection(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

fn seeded_unit_vector(dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = rng_from(seed);
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn flatten_grid(g: &PixelGrid) -> Array1<f64> {
    Array1::from_iter(g.iter().copied())
}

fn split_tag(tag: &str) -> Result<(&str, &str)> {
    match tag.split_once(':') {
        Some((id, variant)) if !id.is_empty() && !variant.is_empty() => Ok((id, variant)),
        _ => Err(Error::invalid(format!(
            "fixture tag must be \"<identity>:<variant>\", got {tag:?}"
        ))),
    }
}

fn identity_of_tag(tag: &str) -> &str {
    tag.split_once(':').map(|(id, _)| id).unwrap_or(tag)
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

/// CLIP-like image feature: mask-respecting 16x16 downsample followed by a
/// fixed seeded projection. Masked-out pixels are zeroed before
/// downsampling, so the feature depends only on the unmasked region.
pub struct MockImageEncoder {
    dim: usize,
    grid: usize,
    proj: Array2<f64>,
}

impl MockImageEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let grid = 16;
        MockImageEncoder {
            dim,
            grid,
            proj: seeded_projection(dim, grid * grid * 3, derive_seed(seed, "image-encoder", 0)),
        }
    }
}

impl ImageEncoder for MockImageEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &PixelGrid, mask: Option<&BoolGrid>) -> Result<Array1<f64>> {
        let (h, w, _) = image.dim();
        let prepared = match mask {
            None => image.clone(),
            Some(m) => {
                if m.dim() != (h, w) {
                    return Err(Error::dim("image mask", format!("{h}x{w}"), format!("{:?}", m.dim())));
                }
                let mut img = image.clone();
                for y in 0..h {
                    for x in 0..w {
                        if !m[[y, x]] {
                            for c in 0..3 {
                                img[[y, x, c]] = 0.0;
                            }
                        }
                    }
                }
                img
            }
        };
        let small = downsample(&prepared, self.grid, self.grid)?;
        Ok(self.proj.dot(&flatten_grid(&small)))
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

/// Per-token seeded unit embeddings with begin/end marker rows.
pub struct MockTextEncoder {
    dim: usize,
    seed: u64,
}

impl MockTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockTextEncoder { dim, seed }
    }

    fn token_vector(&self, word: &str) -> Array1<f64> {
        seeded_unit_vector(self.dim, derive_seed_str(self.seed, "token", word))
    }
}

impl TextEncoder for MockTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EncodedText> {
        let tokens = super::tokenize(text);
        let rows = tokens.len() + 2;
        let mut matrix = Array2::zeros((rows, self.dim));
        matrix
            .row_mut(0)
            .assign(&seeded_unit_vector(self.dim, derive_seed(self.seed, "begin-marker", 0)));
        for (i, tok) in tokens.iter().enumerate() {
            matrix.row_mut(i + 1).assign(&self.token_vector(&tok.text));
        }
        matrix
            .row_mut(rows - 1)
            .assign(&seeded_unit_vector(self.dim, derive_seed(self.seed, "end-marker", 0)));
        Ok(EncodedText { matrix, tokens })
    }
}

// ---------------------------------------------------------------------------
// Face detector
// ---------------------------------------------------------------------------

/// Scans for magenta one-pixel frames; falls back to a centered square when
/// an image carries no frame (the convention for generated samples).
pub struct MockFaceDetector;

impl MockFaceDetector {
    fn frame_at(&self, g: &PixelGrid, x: usize, y: usize) -> Option<(usize, usize)> {
        let (h, w, _) = g.dim();
        let mut bw = 0;
        while x + bw < w && is_marker(g, y, x + bw) {
            bw += 1;
        }
        let mut bh = 0;
        while y + bh < h && is_marker(g, y + bh, x) {
            bh += 1;
        }
        if bw < 3 || bh < 3 {
            return None;
        }
        // Full frame: top/bottom rows and left/right columns all marker.
        for dx in 0..bw {
            if !is_marker(g, y + bh - 1, x + dx) {
                return None;
            }
        }
        for dy in 0..bh {
            if !is_marker(g, y + dy, x + bw - 1) {
                return None;
            }
        }
        // Require a hollow interior so a filled magenta block is not a frame.
        if is_marker(g, y + bh / 2, x + bw / 2) {
            return None;
        }
        Some((bw, bh))
    }
}

impl FaceDetector for MockFaceDetector {
    fn detect(&self, image: &PixelGrid) -> Result<Vec<FaceBox>> {
        let (h, w, _) = image.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("cannot detect faces in an empty image"));
        }
        let mut boxes = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !is_marker(image, y, x) {
                    continue;
                }
                let left_edge = x == 0 || !is_marker(image, y, x - 1);
                let top_edge = y == 0 || !is_marker(image, y - 1, x);
                if !(left_edge && top_edge) {
                    continue;
                }
                if let Some((bw, bh)) = self.frame_at(image, x, y) {
                    boxes.push(FaceBox::new(x, y, bw, bh, 1.0)?);
                }
            }
        }
        if boxes.is_empty() {
            let side = (h.min(w) / 2).max(1);
            boxes.push(FaceBox::new((w - side) / 2, (h - side) / 2, side, side, 0.5)?);
        }
        Ok(boxes)
    }
}

// ---------------------------------------------------------------------------
// Face embedder
// ---------------------------------------------------------------------------

/// Identity embedder with two entry points sharing one feature space.
///
/// Crops: strip the frame ring, downsample to an 8x8 cell grid, subtract
/// the mean (so uniform brightness carries no identity), and apply a fixed
/// seeded projection. Tags: an identity-keyed base unit vector plus
/// `noise_amplitude` of variant-keyed noise, renormalized; identities are
/// near-orthogonal in 512 dimensions, giving same-identity cosines > 0.9
/// and cross-identity cosines < 0.3.
pub struct MockFaceEmbedder {
    dim: usize,
    seed: u64,
    noise_amplitude: f64,
    proj: Array2<f64>,
}

impl MockFaceEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockFaceEmbedder {
            dim,
            seed,
            noise_amplitude: 0.05,
            proj: seeded_projection(dim, 8 * 8 * 3, derive_seed(seed, "face-proj", 0)),
        }
    }

    fn fallback(&self) -> FaceEmbedding {
        FaceEmbedding::new(seeded_unit_vector(self.dim, derive_seed(self.seed, "face-flat", 0)))
            .expect("unit vector is valid")
    }
}

impl FaceEmbedder for MockFaceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_crop(&self, crop: &PixelGrid) -> Result<FaceEmbedding> {
        let (h, w, _) = crop.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("cannot embed an empty face crop"));
        }
        // Drop the one-pixel frame when there is room for it.
        let inner = if h > 2 && w > 2 {
            crate::grid::crop(crop, 1, 1, w - 2, h - 2)?
        } else {
            crop.clone()
        };
        let small = downsample(&inner, 8, 8)?;
        let mut x = flatten_grid(&small);
        let mean = x.sum() / x.len() as f64;
        x.mapv_inplace(|v| v - mean);
        let f = self.proj.dot(&x);
        let norm = f.dot(&f).sqrt();
        if norm < 1e-9 {
            // Featureless (flat) crop: deterministic sentinel embedding.
            return Ok(self.fallback());
        }
        FaceEmbedding::new(f)
    }

    fn embed_tag(&self, tag: &str) -> Result<FaceEmbedding> {
        let (id, _) = split_tag(tag)?;
        let base = seeded_unit_vector(self.dim, derive_seed_str(self.seed, "face-base", id));
        let noise = seeded_unit_vector(self.dim, derive_seed_str(self.seed, "face-noise", tag));
        FaceEmbedding::new(base + noise * self.noise_amplitude)
    }
}

// ---------------------------------------------------------------------------
// Segmenter
// ---------------------------------------------------------------------------

/// Person masks derived from face frames: each frame expands to a head-plus-
/// torso rectangle. Also emits the complementary region as a non-person
/// class so downstream selection has to filter by label. Images without
/// frames produce no masks at all.
pub struct MockSegmenter;

impl Segmenter for MockSegmenter {
    fn segment(&self, image: &PixelGrid) -> Result<Vec<SegmentMask>> {
        let (h, w, _) = image.dim();
        let boxes = MockFaceDetector.detect(image)?;
        let mut masks = Vec::new();
        let mut person_union = Array2::from_elem((h, w), false);
        for b in &boxes {
            if (b.confidence - 1.0).abs() > 1e-9 {
                continue; // fallback detection, not a frame
            }
            let x0 = b.x.saturating_sub(b.w / 4);
            let x1 = (b.x + b.w + b.w / 4).min(w);
            let y0 = b.y;
            let y1 = (b.y + b.h + 3 * b.h / 2).min(h);
            let mut bitmap = Array2::from_elem((h, w), false);
            for y in y0..y1 {
                for x in x0..x1 {
                    bitmap[[y, x]] = true;
                    person_union[[y, x]] = true;
                }
            }
            masks.push(SegmentMask { bitmap, class_label: "person".to_string() });
        }
        if !masks.is_empty() {
            let background = person_union.mapv(|v| !v);
            masks.push(SegmentMask { bitmap: background, class_label: "background".to_string() });
        }
        Ok(masks)
    }
}

// ---------------------------------------------------------------------------
// Captioner
// ---------------------------------------------------------------------------

const WORDED_TEMPLATES: &[&str] = &[
    "a photo of a {cw}",
    "a {cw} riding a horse",
    "a {cw} holding a camera",
    "a {cw} in a garden",
    "a portrait of a {cw} at night",
    "a {cw} reading near a window",
    "two {pl} at a table",
    "a {cw} and a {other} at a party",
    "a {cw} standing next to a {other}",
];

const WORDLESS_TEMPLATES: &[&str] = &[
    "a portrait with soft lighting",
    "a scenic photo at sunset",
    "an outdoor snapshot on a cloudy day",
];

/// Template captioner keyed by fixture tag. The greedy mode is a fixed
/// function of the tag; the random mode additionally varies with the
/// attempt counter. A configurable fraction of greedy captions omit class
/// words so the retry path gets exercised, and `never_class_word` simulates
/// a captioner that cannot produce one at all.
pub struct MockCaptioner {
    seed: u64,
    pub class_word_free_fraction: f64,
    pub never_class_word: bool,
}

impl MockCaptioner {
    pub fn new(seed: u64) -> Self {
        MockCaptioner { seed, class_word_free_fraction: 0.0, never_class_word: false }
    }

    pub fn with_class_word_free_fraction(mut self, f: f64) -> Self {
        self.class_word_free_fraction = f;
        self
    }

    pub fn without_class_words(mut self) -> Self {
        self.never_class_word = true;
        self
    }

    fn render_for_identity(template: &str, id: &str, seed: u64, rng: &mut impl Rng) -> String {
        // The primary class word tracks the identity so captions within a
        // group mostly agree; secondary words vary per caption.
        let id_rng = &mut rng_from(derive_seed_str(seed, "identity-word", id));
        let n = vocab::CLASS_WORDS.len();
        let cw = &vocab::CLASS_WORDS[id_rng.gen_range(0..n)];
        let mut other = &vocab::CLASS_WORDS[rng.gen_range(0..n)];
        if other.singular == cw.singular {
            other = &vocab::CLASS_WORDS[(id_rng.gen_range(0..n - 1) + 1) % n];
        }
        template
            .replace("{cw}", cw.singular)
            .replace("{pl}", cw.plurals[0])
            .replace("{other}", other.singular)
    }
}

impl Captioner for MockCaptioner {
    fn caption(&self, _image: &PixelGrid, tag: &str, mode: CaptionMode) -> Result<String> {
        let id = identity_of_tag(tag);
        match mode {
            CaptionMode::Greedy => {
                let mut rng = rng_from(derive_seed_str(self.seed, "caption-greedy", tag));
                let wordless =
                    self.never_class_word || rng.gen::<f64>() < self.class_word_free_fraction;
                if wordless {
                    Ok(WORDLESS_TEMPLATES[rng.gen_range(0..WORDLESS_TEMPLATES.len())].to_string())
                } else {
                    let t = WORDED_TEMPLATES[rng.gen_range(0..WORDED_TEMPLATES.len())];
                    Ok(Self::render_for_identity(t, id, self.seed, &mut rng))
                }
            }
            CaptionMode::Random { attempt } => {
                let mut rng = rng_from(derive_seed(
                    derive_seed_str(self.seed, "caption-random", tag),
                    "attempt",
                    u64::from(attempt),
                ));
                if self.never_class_word || rng.gen::<f64>() < 0.25 {
                    Ok(WORDLESS_TEMPLATES[rng.gen_range(0..WORDLESS_TEMPLATES.len())].to_string())
                } else {
                    let t = WORDED_TEMPLATES[rng.gen_range(0..WORDED_TEMPLATES.len())];
                    Ok(Self::render_for_identity(t, id, self.seed, &mut rng))
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dependency parser
// ---------------------------------------------------------------------------

/// Splits a caption into contiguous token runs, assigning every token to
/// the nearest class-word occurrence (earlier occurrence wins ties).
pub struct MockDependencyParser;

impl DependencyParser for MockDependencyParser {
    fn segment_by_class_words(&self, caption: &str) -> Result<Vec<CaptionSegment>> {
        let occurrences = vocab::find_occurrences(caption);
        if occurrences.is_empty() {
            return Err(Error::Adapter(format!("caption has no class word: {caption:?}")));
        }
        let tokens: Vec<Token> = super::tokenize(caption);
        // Token index of each occurrence (occurrences are whole tokens).
        let occ_token: Vec<usize> = occurrences
            .iter()
            .map(|o| {
                tokens
                    .iter()
                    .position(|t| t.start == o.start)
                    .expect("occurrence aligns with a token")
            })
            .collect();
        let owner_of = |ti: usize| -> usize {
            let mut best = 0;
            let mut best_d = usize::MAX;
            for (oi, &ot) in occ_token.iter().enumerate() {
                let d = ti.abs_diff(ot);
                if d < best_d {
                    best_d = d;
                    best = oi;
                }
            }
            best
        };
        let mut segments = Vec::new();
        let mut start_tok = 0;
        for oi in 0..occurrences.len() {
            let mut end_tok = start_tok;
            while end_tok < tokens.len() && owner_of(end_tok) == oi {
                end_tok += 1;
            }
            debug_assert!(end_tok > start_tok, "each occurrence owns at least its own token");
            let start = tokens[start_tok].start;
            let end = tokens[end_tok - 1].end;
            segments.push(CaptionSegment {
                text: caption[start..end].to_string(),
                start,
                end,
                occurrence: occurrences[oi].clone(),
            });
            start_tok = end_tok;
        }
        Ok(segments)
    }
}

// ---------------------------------------------------------------------------
// Label similarity
// ---------------------------------------------------------------------------

/// Symmetric label similarity: 1 for equal labels (case-insensitive),
/// otherwise a deterministic value in `[0.1, 0.9]` keyed by the unordered
/// pair.
pub struct MockLabelSimilarity {
    seed: u64,
}

impl MockLabelSimilarity {
    pub fn new(seed: u64) -> Self {
        MockLabelSimilarity { seed }
    }
}

impl LabelSimilarity for MockLabelSimilarity {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let a = a.to_ascii_lowercase();
        let b = b.to_ascii_lowercase();
        if a == b {
            return Ok(1.0);
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let key = format!("{lo}\u{1f}{hi}");
        let mut rng = rng_from(derive_seed_str(self.seed, "label-sim", &key));
        Ok(0.1 + 0.8 * rng.gen::<f64>())
    }
}

// ---------------------------------------------------------------------------
// Perceptual distance
// ---------------------------------------------------------------------------

/// Mean absolute difference of 16x16 downsamples: zero for identical
/// images, symmetric, loosely tracks perceptual dissimilarity of the flat
/// synthetic fixtures.
pub struct MockPerceptualDistance;

impl PerceptualDistance for MockPerceptualDistance {
    fn distance(&self, a: &PixelGrid, b: &PixelGrid) -> Result<f64> {
        let da = downsample(a, 16, 16)?;
        let db = downsample(b, 16, 16)?;
        let mut acc = 0.0;
        for (x, y) in da.iter().zip(db.iter()) {
            acc += (x - y).abs();
        }
        Ok(acc / (16.0 * 16.0 * 3.0))
    }
}

// ---------------------------------------------------------------------------
// Feature extractor (FID / DINO style)
// ---------------------------------------------------------------------------

/// Global image descriptor: 16x16 downsample through a fixed seeded
/// projection. Instantiated with different seeds for the FID and DINO
/// roles so the two feature spaces are unrelated.
pub struct MockFeatureExtractor {
    dim: usize,
    proj: Array2<f64>,
}

impl MockFeatureExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockFeatureExtractor {
            dim,
            proj: seeded_projection(dim, 16 * 16 * 3, derive_seed(seed, "feature-proj", 0)),
        }
    }
}

impl FeatureExtractor for MockFeatureExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &PixelGrid) -> Result<Array1<f64>> {
        let small = downsample(image, 16, 16)?;
        Ok(self.proj.dot(&flatten_grid(&small)))
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

pub(super) fn build_set(seed: u64, ctx: &AdapterBuildContext) -> AdapterSet {
    AdapterSet {
        image_encoder: Arc::new(MockImageEncoder::new(
            ctx.image_feature_dim,
            derive_seed(seed, "role-image-encoder", 0),
        )),
        text_encoder: Arc::new(MockTextEncoder::new(
            ctx.text_dim,
            derive_seed(seed, "role-text-encoder", 0),
        )),
        face_detector: Arc::new(MockFaceDetector),
        face_embedder: Arc::new(MockFaceEmbedder::new(
            ctx.face_dim,
            derive_seed(seed, "role-face-embedder", 0),
        )),
        segmenter: Arc::new(MockSegmenter),
        captioner: Arc::new(MockCaptioner::new(derive_seed(seed, "role-captioner", 0))),
        parser: Arc::new(MockDependencyParser),
        label_similarity: Arc::new(MockLabelSimilarity::new(derive_seed(seed, "role-label-sim", 0))),
        perceptual: Arc::new(MockPerceptualDistance),
        fid_features: Arc::new(MockFeatureExtractor::new(
            ctx.fid_dim,
            derive_seed(seed, "role-fid-features", 0),
        )),
        dino_features: Arc::new(MockFeatureExtractor::new(
            ctx.dino_dim,
            derive_seed(seed, "role-dino-features", 0),
        )),
    }
}

pub(super) fn register(reg: &mut AdapterRegistry) {
    reg.register_image_encoder("mock", |ctx| {
        Ok(Arc::new(MockImageEncoder::new(
            ctx.image_feature_dim,
            derive_seed(ctx.seed, "role-image-encoder", 0),
        )))
    });
    reg.register_text_encoder("mock", |ctx| {
        Ok(Arc::new(MockTextEncoder::new(ctx.text_dim, derive_seed(ctx.seed, "role-text-encoder", 0))))
    });
    reg.register_face_detector("mock", |_| Ok(Arc::new(MockFaceDetector)));
    reg.register_face_embedder("mock", |ctx| {
        Ok(Arc::new(MockFaceEmbedder::new(ctx.face_dim, derive_seed(ctx.seed, "role-face-embedder", 0))))
    });
    reg.register_segmenter("mock", |_| Ok(Arc::new(MockSegmenter)));
    reg.register_captioner("mock", |ctx| {
        Ok(Arc::new(MockCaptioner::new(derive_seed(ctx.seed, "role-captioner", 0))))
    });
    reg.register_parser("mock", |_| Ok(Arc::new(MockDependencyParser)));
    reg.register_label_similarity("mock", |ctx| {
        Ok(Arc::new(MockLabelSimilarity::new(derive_seed(ctx.seed, "role-label-sim", 0))))
    });
    reg.register_perceptual("mock", |_| Ok(Arc::new(MockPerceptualDistance)));
    reg.register_fid_features("mock", |ctx| {
        Ok(Arc::new(MockFeatureExtractor::new(ctx.fid_dim, derive_seed(ctx.seed, "role-fid-features", 0))))
    });
    reg.register_dino_features("mock", |ctx| {
        Ok(Arc::new(MockFeatureExtractor::new(ctx.dino_dim, derive_seed(ctx.seed, "role-dino-features", 0))))
    });
}
