//! Identity and text encoding: background noising, image-feature projection,
//! class-word span location, and the two-layer fusion perceptron that turns
//! one image embedding plus the class-word vector into a fused embedding.

use ndarray::Array2;
use rand::Rng;

use crate::adapters::AdapterSet;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::{BoolGrid, PixelGrid};
use crate::model::ParamStore;
use crate::rng::{derive_seed, rng_from};
use crate::vocab;

/// One reference image of the target identity together with the body-region
/// mask (true = keep). Construction enforces matching dimensions and at least
/// one kept pixel, so every `IdImage` has a usable foreground.
#[derive(Debug, Clone)]
pub struct IdImage {
    pub pixels: PixelGrid,
    pub mask: BoolGrid,
}

impl IdImage {
    pub fn new(pixels: PixelGrid, mask: BoolGrid) -> Result<Self> {
        let (h, w, _) = pixels.dim();
        if mask.dim() != (h, w) {
            return Err(Error::dim(
                "id image mask",
                format!("{h}x{w}"),
                format!("{}x{}", mask.dim().0, mask.dim().1),
            ));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::invalid("id image mask keeps no pixels"));
        }
        Ok(Self { pixels, mask })
    }

    /// Image without segmentation: every pixel counts as foreground.
    pub fn unmasked(pixels: PixelGrid) -> Self {
        let (h, w, _) = pixels.dim();
        Self { pixels, mask: BoolGrid::from_elem((h, w), true) }
    }
}

/// Replaces every masked-out pixel with seeded uniform noise in [0,1];
/// masked-true pixels pass through untouched. Keeps the model from keying on
/// background content around the subject.
pub fn noise_background(pixels: &PixelGrid, mask: &BoolGrid, seed: u64) -> Result<PixelGrid> {
    let (h, w, _) = pixels.dim();
    if mask.dim() != (h, w) {
        return Err(Error::dim(
            "noise_background mask",
            format!("{h}x{w}"),
            format!("{}x{}", mask.dim().0, mask.dim().1),
        ));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::invalid("noise_background: mask keeps no pixels"));
    }
    let mut rng = rng_from(derive_seed(seed, "background-noise", 0));
    let mut out = pixels.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                for c in 0..3 {
                    out[[y, x, c]] = rng.gen::<f64>();
                }
            }
        }
    }
    Ok(out)
}

/// Projected per-image identity embedding, a 1×D row vector.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    pub row: Array2<f64>,
}

impl ImageEmbedding {
    pub fn new(row: Array2<f64>) -> Result<Self> {
        if row.nrows() != 1 {
            return Err(Error::dim("image embedding", "1 row", format!("{} rows", row.nrows())));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("image embedding has non-finite entries"));
        }
        Ok(Self { row })
    }

    pub fn dim(&self) -> usize {
        self.row.ncols()
    }
}

/// Linear map from the image encoder's native dimension C to the text
/// embedding dimension D.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    /// C×D
    pub weight: Array2<f64>,
    /// 1×D
    pub bias: Array2<f64>,
}

impl ProjectionWeights {
    pub fn new(weight: Array2<f64>, bias: Array2<f64>) -> Result<Self> {
        if bias.dim() != (1, weight.ncols()) {
            return Err(Error::dim(
                "projection bias",
                format!("1x{}", weight.ncols()),
                format!("{}x{}", bias.nrows(), bias.ncols()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Self::new(params.get("proj.w")?.clone(), params.get("proj.b")?.clone())
    }
}

/// Two-layer fusion perceptron: concat → linear → SiLU → linear.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    /// 2D×H
    pub w1: Array2<f64>,
    /// 1×H
    pub b1: Array2<f64>,
    /// H×D
    pub w2: Array2<f64>,
    /// 1×D
    pub b2: Array2<f64>,
}

impl FusionWeights {
    pub fn new(w1: Array2<f64>, b1: Array2<f64>, w2: Array2<f64>, b2: Array2<f64>) -> Result<Self> {
        if b1.dim() != (1, w1.ncols()) || w2.nrows() != w1.ncols() || b2.dim() != (1, w2.ncols()) {
            return Err(Error::dim(
                "fusion weights",
                format!("w1 2Dx{h}, b1 1x{h}, w2 {h}xD, b2 1xD", h = w1.ncols()),
                format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    w1.dim(),
                    b1.dim(),
                    w2.dim(),
                    b2.dim()
                ),
            ));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Self::new(
            params.get("fusion.w1")?.clone(),
            params.get("fusion.b1")?.clone(),
            params.get("fusion.w2")?.clone(),
            params.get("fusion.b2")?.clone(),
        )
    }
}

/// Noises the background, runs the image-encoder adapter on the result (with
/// the mask, so conforming encoders ignore background content entirely), and
/// projects the raw feature into the text embedding space.
pub fn encode_id_image(
    image: &IdImage,
    adapters: &AdapterSet,
    projection: &ProjectionWeights,
    seed: u64,
) -> Result<ImageEmbedding> {
    let noised = noise_background(&image.pixels, &image.mask, seed)?;
    let feature = adapters.image_encoder.encode(&noised, Some(&image.mask))?;
    if feature.len() != projection.weight.nrows() {
        return Err(Error::dim(
            "encode_id_image projection input",
            format!("{}", projection.weight.nrows()),
            format!("{}", feature.len()),
        ));
    }
    let row = feature.insert_axis(ndarray::Axis(0));
    ImageEmbedding::new(row.dot(&projection.weight) + &projection.bias)
}

/// Fuses one image embedding with the class-word vector:
/// `layer2(silu(layer1([e; class])))`. Plain wrapper over the tape builder so
/// inference and training share one arithmetic path.
pub fn fuse_with_class_vector(
    e: &ImageEmbedding,
    class_vector: &Array2<f64>,
    weights: &FusionWeights,
) -> Result<ImageEmbedding> {
    if class_vector.dim() != (1, e.dim()) {
        return Err(Error::dim(
            "fuse class vector",
            format!("1x{}", e.dim()),
            format!("{}x{}", class_vector.nrows(), class_vector.ncols()),
        ));
    }
    let mut tape = Tape::new();
    let ie = tape.leaf(e.row.clone());
    let ic = tape.leaf(class_vector.clone());
    let g = FusionGraph::from_weights(&mut tape, weights);
    let out = g.fuse(&mut tape, ie, ic)?;
    ImageEmbedding::new(tape.value(out).clone())
}

/// Tape leaves for the fusion perceptron, reusable across the references of
/// one batch so all of them share the same weight nodes.
#[derive(Debug, Clone, Copy)]
pub struct FusionGraph {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl FusionGraph {
    pub fn from_weights(tape: &mut Tape, weights: &FusionWeights) -> Self {
        Self {
            w1: tape.leaf(weights.w1.clone()),
            b1: tape.leaf(weights.b1.clone()),
            w2: tape.leaf(weights.w2.clone()),
            b2: tape.leaf(weights.b2.clone()),
        }
    }

    pub fn from_params(tape: &mut Tape, params: &ParamStore) -> Result<Self> {
        Ok(Self {
            w1: tape.leaf(params.get("fusion.w1")?.clone()),
            b1: tape.leaf(params.get("fusion.b1")?.clone()),
            w2: tape.leaf(params.get("fusion.w2")?.clone()),
            b2: tape.leaf(params.get("fusion.b2")?.clone()),
        })
    }

    pub fn fuse(&self, tape: &mut Tape, e: NodeId, class_row: NodeId) -> Result<NodeId> {
        let joint = tape.concat_cols(&[e, class_row])?;
        let h = tape.matmul(joint, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.silu(h);
        let out = tape.matmul(h, self.w2)?;
        tape.add_row(out, self.b2)
    }
}

/// Tape leaves for the trainable image-encoder head: the encoder's tunable
/// final block followed by the projection into text space.
#[derive(Debug, Clone, Copy)]
pub struct IdEncoderGraph {
    pub enc_w: NodeId,
    pub enc_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

impl IdEncoderGraph {
    pub fn from_params(tape: &mut Tape, params: &ParamStore) -> Result<Self> {
        Ok(Self {
            enc_w: tape.leaf(params.get("enc_block.w")?.clone()),
            enc_b: tape.leaf(params.get("enc_block.b")?.clone()),
            proj_w: tape.leaf(params.get("proj.w")?.clone()),
            proj_b: tape.leaf(params.get("proj.b")?.clone()),
        })
    }

    /// Raw adapter feature (1×C leaf) → tuned block → projected 1×D row.
    pub fn project(&self, tape: &mut Tape, feature: NodeId) -> Result<NodeId> {
        let h = tape.matmul(feature, self.enc_w)?;
        let h = tape.add_row(h, self.enc_b)?;
        let h = tape.silu(h);
        let out = tape.matmul(h, self.proj_w)?;
        tape.add_row(out, self.proj_b)
    }
}

/// Text embedding with the located class-word span.
///
/// `matrix` is everything the text encoder produced (markers included);
/// `class_span` is a row range into that matrix, and `token_strings` names
/// each row so the span can be audited.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub matrix: Array2<f64>,
    pub token_strings: Vec<String>,
    pub class_span: std::ops::Range<usize>,
}

impl TextEmbedding {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn span_len(&self) -> usize {
        self.class_span.len()
    }

    /// Class-word feature vector: the span row, or the mean over span rows
    /// when the class word spans several tokens.
    pub fn class_vector(&self) -> Array2<f64> {
        let k = self.class_span.len() as f64;
        let mut row = Array2::zeros((1, self.dim()));
        for r in self.class_span.clone() {
            for (c, v) in self.matrix.row(r).iter().enumerate() {
                row[[0, c]] += v / k;
            }
        }
        row
    }
}

/// Encodes a generation prompt and locates the class-word span.
///
/// The prompt must contain exactly one class-word occurrence (captions with
/// several occurrences are disambiguated in the dataset pipeline, not here).
pub fn encode_text_with_class_span(prompt: &str, adapters: &AdapterSet) -> Result<TextEmbedding> {
    let occ = vocab::unique_occurrence(prompt)?;
    encode_text_with_span(prompt, occ.start..occ.end, adapters)
}

/// Encodes text and maps a byte range (e.g. a manifest class span) to the
/// covered embedding rows.
pub fn encode_text_with_span(
    text: &str,
    byte_span: std::ops::Range<usize>,
    adapters: &AdapterSet,
) -> Result<TextEmbedding> {
    let encoded = adapters.text_encoder.encode(text)?;
    let mut first = None;
    let mut last = None;
    for (i, tok) in encoded.tokens.iter().enumerate() {
        if tok.start < byte_span.end && tok.end > byte_span.start {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(Error::invalid(format!(
                "class span {byte_span:?} covers no tokens of {text:?}"
            )))
        }
    };
    let mut token_strings = Vec::with_capacity(encoded.matrix.nrows());
    token_strings.push("<|begin|>".to_string());
    token_strings.extend(encoded.tokens.iter().map(|t| t.text.clone()));
    token_strings.push("<|end|>".to_string());
    let span = encoded.token_row(first)..encoded.token_row(last) + 1;
    Ok(TextEmbedding { matrix: encoded.matrix, token_strings, class_span: span })
}

/// Null-text conditioning: the empty string through the text encoder, which
/// yields just the begin/end marker rows. No class span exists; the range is
/// empty and callers must not merge identity rows into it.
pub fn encode_null_text(adapters: &AdapterSet) -> Result<TextEmbedding> {
    let encoded = adapters.text_encoder.encode("")?;
    Ok(TextEmbedding {
        matrix: encoded.matrix,
        token_strings: vec!["<|begin|>".to_string(), "<|end|>".to_string()],
        class_span: 0..0,
    })
}
