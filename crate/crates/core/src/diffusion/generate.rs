//! End-to-end personalized generation: reference images in, pixels out.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::Tape;
use crate::diffusion::codec::{decode_latent, Latent};
use crate::diffusion::sampler::{ddim_sample, SamplerConfig, SamplerInputs};
use crate::diffusion::schedule::NoiseSchedule;
use crate::encoders::{
    encode_null_text, encode_text_with_class_span, noise_background, FusionGraph, IdEncoderGraph,
    IdImage,
};
use crate::error::{Error, Result};
use crate::grid::PixelGrid;
use crate::model::{ModelDims, ParamStore};
use crate::rng::derive_seed;
use crate::stacked::{
    apply_prompt_weights, compose, merge_into_text, ComposeMode, FusedEmbedding,
    LinearComposeWeights,
};

/// Knobs for one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub sampler: SamplerConfig,
    pub compose: ComposeMode,
    /// Per-identity-tag coefficients scaling the corresponding identity rows;
    /// tags without an entry keep weight 1.
    pub tag_weights: Option<BTreeMap<String, f64>>,
    /// Pixels per latent cell side in the decoded image.
    pub decode_block: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            sampler: SamplerConfig::default(),
            compose: ComposeMode::Stacked,
            tag_weights: None,
            decode_block: 4,
        }
    }
}

/// What went into an output image; written alongside it so runs can be
/// audited and replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt: String,
    pub class_word: String,
    /// Identity rows in the stack (after composing).
    pub n: usize,
    /// Identity tag of each reference image, in input order.
    pub sources: Vec<String>,
    /// Weight applied to each reference row, aligned with `sources`.
    pub weights: Vec<f64>,
    pub compose: ComposeMode,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

/// Generates one image conditioned on the prompt and the given identity
/// references. `id_images` pairs each reference with its identity tag (a
/// mixing pool slots straight in). The class word's embedding rows are
/// replaced by the composed identity rows; sampling then runs the delayed /
/// guided DDIM trajectory and the toy decoder paints the final latent.
pub fn generate(
    prompt: &str,
    id_images: &[(String, IdImage)],
    params: &ParamStore,
    dims: &ModelDims,
    schedule: &NoiseSchedule,
    options: &GenerateOptions,
    adapters: &AdapterSet,
    seed: u64,
) -> Result<(PixelGrid, Provenance)> {
    if id_images.is_empty() {
        return Err(Error::invalid("generation needs at least one reference image"));
    }
    options.sampler.validate()?;

    let text = encode_text_with_class_span(prompt, adapters)?;
    let null = encode_null_text(adapters)?;
    let class_word = text.token_strings[text.class_span.clone()].join(" ");
    let class_vector = text.class_vector();

    // Reference images run through the same tape program the trainer
    // differentiates: tunable encoder tail -> projection -> fusion with the
    // class vector.
    let mut tape = Tape::new();
    let encoder = IdEncoderGraph::from_params(&mut tape, params)?;
    let fusion = FusionGraph::from_params(&mut tape, params)?;
    let class_node = tape.leaf(class_vector);
    let mut fused = Vec::with_capacity(id_images.len());
    for (i, (tag, image)) in id_images.iter().enumerate() {
        let noised = noise_background(&image.pixels, &image.mask, derive_seed(seed, "ref-noise", i as u64))?;
        let feature = adapters.image_encoder.encode(&noised, Some(&image.mask))?;
        let feature = tape.leaf(feature.insert_axis(ndarray::Axis(0)));
        let projected = encoder.project(&mut tape, feature)?;
        let row = fusion.fuse(&mut tape, projected, class_node)?;
        fused.push(FusedEmbedding::new(tape.value(row).clone(), tag.clone())?);
    }

    let weights: Vec<f64> = id_images
        .iter()
        .map(|(tag, _)| {
            options.tag_weights.as_ref().and_then(|m| m.get(tag)).copied().unwrap_or(1.0)
        })
        .collect();
    if options.tag_weights.is_some() {
        fused = apply_prompt_weights(&fused, &weights)?;
    }

    let linear = match options.compose {
        ComposeMode::Linear => Some(LinearComposeWeights::from_params(params)?),
        _ => None,
    };
    let stacked = compose(&fused, options.compose, linear.as_ref())?;
    let n = stacked.len();
    let merged = merge_into_text(&text, &stacked)?;

    let inputs = SamplerInputs {
        plain: &text.matrix,
        merged: &merged.matrix,
        null: &null.matrix,
    };
    let z = ddim_sample(params, dims, schedule, &inputs, &options.sampler, seed)?;
    let latent = Latent::from_flat(&z, dims.latent_h, dims.latent_w, 0)?;
    let image = decode_latent(&latent.tensor, options.decode_block)?;

    let provenance = Provenance {
        prompt: prompt.to_string(),
        class_word,
        n,
        sources: id_images.iter().map(|(tag, _)| tag.clone()).collect(),
        weights,
        compose: options.compose,
        seed,
        sampler: options.sampler.clone(),
    };
    Ok((image, provenance))
}
